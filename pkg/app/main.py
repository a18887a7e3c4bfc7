import argparse
import contextlib
import logging
import signal
import threading
from dataclasses import asdict, replace
from pathlib import Path
from threading import Event
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from rich.progress import (
    BarColumn,
    Progress,
    SpinnerColumn,
    TaskProgressColumn,
    TextColumn,
    TimeRemainingColumn,
)
from rich.table import Table

from app.config import (
    LOG_LEVEL,
    SHOW_PROGRESS,
    WORKERS,
    ConfigError,
    RunConfig,
    dump_run_config,
    load_run_config,
)
from app.services.model import TrainingDivergedError, load_checkpoint, save_checkpoint
from app.services.pipeline import (
    METRIC_FIELDS,
    MetricsLog,
    RunResult,
    StageHooks,
    calibrate_noise,
    eta_setting,
    evaluate,
    run,
    run_seeding,
    threshold_setting,
)
from app.services.synth import (
    SPLITS,
    Corpus,
    CorpusSpec,
    generate,
    load_corpus,
    load_spec,
    save_corpus,
    with_noise,
)
from app.utils.file import (
    directory_digest,
    folder_size,
    format_size,
    inside,
    read_rows_csv,
    write_json,
    write_rows_csv,
)
from app.utils.log import console, setup_logging

logger = logging.getLogger(__name__)

# Set by SIGINT; training loops poll it between updates.
stop_event = Event()

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130

SWEEP_FIELDS = ("setting",) + METRIC_FIELDS
CURVE_FIELDS = ("update", "split", "mode", "metric", "value")
CURVE_METRICS = METRIC_FIELDS[3:]


def handle_exit(signum: int, frame: Optional[object]) -> None:
    """
    Handles SIGINT (Ctrl+C): the running stage stops after its current
    update and the command exits with 130. A second Ctrl+C aborts at once.
    """
    if stop_event.is_set():
        raise KeyboardInterrupt
    logger.warning("Interrupt received! Stopping after the current update...")
    stop_event.set()


def parse_settings(text: str, allow_auto: bool = False) -> List[Optional[float]]:
    """
    Parses a comma-separated list such as ``0.5,0.7,auto``; ``auto`` maps to None.
    """
    settings: List[Optional[float]] = []
    for part in text.split(","):
        part = part.strip().lower()
        if allow_auto and part == "auto":
            settings.append(None)
            continue
        try:
            value = float(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {part!r}") from None
        if value < 0.0:
            raise argparse.ArgumentTypeError(f"must be >= 0: {part!r}")
        settings.append(value)
    return settings


def parse_band(text: str) -> Tuple[float, float]:
    settings = parse_settings(text)
    if len(settings) != 2 or settings[0] > settings[1]:
        raise argparse.ArgumentTypeError("expected 'low,high' with low <= high")
    return settings[0], settings[1]


def setting_label(value: Optional[float]) -> str:
    return "auto" if value is None else repr(value)


def config_overrides(args: argparse.Namespace) -> Dict[str, str]:
    """Maps the flags given on the command line to ``section.key`` overrides."""
    flags = {
        "seed": "run.seed",
        "mode": "run.mode",
        "threshold": "run.threshold",
        "schedule": "run.schedule",
        "ema_decay": "run.ema_decay",
        "corpus": "data.corpus_dir",
        "variant": "atc.variant",
        "eta": "atc.eta",
        "psi": "atc.psi",
        "gamma": "contrastive.gamma",
    }
    overrides = {
        key: str(getattr(args, flag))
        for flag, key in flags.items()
        if getattr(args, flag, None) is not None
    }
    budget = getattr(args, "budget", None)
    if budget is not None:
        overrides["run.seed_updates"] = str(budget)
        overrides["run.pl_updates"] = str(budget)
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, config_overrides(args))


def prepare_out(out: str, cfg: Optional[RunConfig] = None) -> Path:
    """Creates the output folder and persists the resolved configuration."""
    folder = Path(out)
    folder.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        inside(folder, "config.ini").write_text(dump_run_config(cfg))
    return folder


def corpus_for(cfg: RunConfig) -> Corpus:
    if cfg.data.corpus_dir:
        return load_corpus(cfg.data.corpus_dir)
    return generate(cfg.data.spec)


@contextlib.contextmanager
def progress_bar() -> Iterator[Optional[Progress]]:
    if not SHOW_PROGRESS or not console.is_terminal:
        yield None
        return
    with Progress(
        TextColumn("[progress.description]{task.description}"),
        SpinnerColumn(),
        BarColumn(),
        TaskProgressColumn(),
        TimeRemainingColumn(),
        console=console,
    ) as progress:
        yield progress


def summary_of(cfg: RunConfig, result: RunResult) -> Dict[str, object]:
    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "stopped": stop_event.is_set(),
        "star_arcs": int(sum(result.star_arcs)),
        "final": result.final.as_dict(),
    }


def show_rows(title: str, rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        cells = []
        for column in columns:
            value = row.get(column)
            if value is None:
                cells.append("-")
            elif isinstance(value, float):
                cells.append(f"{value:.4f}")
            else:
                cells.append(str(value))
        table.add_row(*cells)
    console.print(table)


def cmd_gen_data(args: argparse.Namespace) -> None:
    spec = load_spec(args.spec) if args.spec else CorpusSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.noise is not None:
        spec = with_noise(spec, args.noise)
    folder = prepare_out(args.out)
    save_corpus(generate(spec), folder)
    logger.info(
        "Corpus written to %s (%s, digest %s)",
        folder,
        format_size(folder_size(folder)),
        directory_digest(folder),
    )


def cmd_train(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    out = prepare_out(args.out, cfg)
    corpus = corpus_for(cfg)
    with progress_bar() as progress:
        hooks = StageHooks(
            log=MetricsLog(inside(out, "metrics.csv")),
            progress=progress,
            stop_event=stop_event,
            checkpoint_dir=inside(out, "checkpoints"),
            workers=WORKERS,
        )
        result = run(cfg, corpus, hooks)
    save_checkpoint(inside(out, "checkpoints/final.npz"), result.state, result.rng)
    write_json(inside(out, "summary.json"), summary_of(cfg, result))
    logger.info(
        "%s run finished: %s token error rate %.4f",
        cfg.mode,
        result.final.split,
        result.final.token_error_rate,
    )


def cmd_eval(args: argparse.Namespace) -> None:
    state, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if not corpus[args.split]:
        raise ValueError(f"Split {args.split!r} of {args.corpus} is empty.")
    rows = [
        evaluate(state, corpus[args.split], which, args.split, which, args.confidence_mode)
        for which in ("student", "teacher")
    ]
    if args.out:
        out = prepare_out(args.out)
        write_rows_csv(inside(out, "eval.csv"), METRIC_FIELDS, [r.as_dict() for r in rows])
    show_rows(f"{args.checkpoint} on {args.split}", [r.as_dict() for r in rows], METRIC_FIELDS[:8])


def run_sweep(
    args: argparse.Namespace,
    settings: Sequence[Optional[float]],
    name: str,
    configure: Callable[[RunConfig, Optional[float]], RunConfig],
) -> None:
    """
    Trains one seed model, then runs the pseudo-labeling stage once per
    setting from copies of it and writes one summary row per setting.
    """
    cfg = resolve_config(args)
    out = prepare_out(args.out, cfg)
    corpus = corpus_for(cfg)
    summary: List[Dict[str, object]] = []
    with progress_bar() as progress:
        seed_hooks = StageHooks(
            MetricsLog(inside(out, "seed/metrics.csv")), progress, stop_event, workers=WORKERS
        )
        seed_state = run_seeding(cfg, corpus, seed_hooks)
        for value in settings:
            if stop_event.is_set():
                break
            label = setting_label(value)
            setting_cfg = configure(cfg, value)
            folder = inside(out, f"{name}-{label}")
            folder.mkdir(parents=True, exist_ok=True)
            (folder / "config.ini").write_text(dump_run_config(setting_cfg))
            hooks = StageHooks(
                MetricsLog(folder / "metrics.csv"), progress, stop_event, workers=WORKERS
            )
            result = run(setting_cfg, corpus, hooks, seed_state=seed_state)
            summary.append({"setting": label, **result.final.as_dict()})
            logger.info("%s=%s: token error rate %.4f", name, label, result.final.token_error_rate)
    write_rows_csv(inside(out, "sweep.csv"), SWEEP_FIELDS, summary)
    show_rows(f"{name} sweep", summary, ("setting", "token_error_rate", "auc", "mean_conf_incorrect"))


def cmd_sweep_threshold(args: argparse.Namespace) -> None:
    run_sweep(args, args.thresholds, "threshold", threshold_setting)


def cmd_sweep_eta(args: argparse.Namespace) -> None:
    run_sweep(args, args.etas, "eta", eta_setting)


def curve_rows(metrics: Sequence[Dict[str, str]]) -> List[Dict[str, object]]:
    """Reshapes wide metric rows into one ``(update, split, mode, metric, value)`` row per value."""
    rows: List[Dict[str, object]] = []
    for record in metrics:
        for metric in CURVE_METRICS:
            raw = record.get(metric, "")
            if raw == "":
                continue
            rows.append(
                {
                    "update": int(record["update"]),
                    "split": record["split"],
                    "mode": record["mode"],
                    "metric": metric,
                    "value": float(raw),
                }
            )
    return rows


def cmd_export_curves(args: argparse.Namespace) -> None:
    source = Path(args.run_dir) / "metrics.csv"
    if not source.is_file():
        raise FileNotFoundError(f"No metrics.csv in {args.run_dir}")
    rows = curve_rows(read_rows_csv(source))

    series: Dict[str, Dict[str, Dict[str, List[float]]]] = {}
    for row in rows:
        curve = series.setdefault(str(row["split"]), {}).setdefault(
            str(row["metric"]), {"update": [], "value": []}
        )
        curve["update"].append(row["update"])
        curve["value"].append(row["value"])

    out = prepare_out(args.out)
    write_rows_csv(inside(out, "curves.csv"), CURVE_FIELDS, rows)
    write_json(inside(out, "curves.json"), series)
    logger.info("Exported %d points from %s", len(rows), source)


def cmd_calibrate(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    out = prepare_out(args.out, cfg)
    noise, rate = calibrate_noise(cfg, args.target, iterations=args.iterations)
    write_json(inside(out, "spec.json"), asdict(with_noise(cfg.data.spec, noise)))
    write_json(inside(out, "calibration.json"), {"noise": noise, "token_error_rate": rate})
    logger.info("Calibrated noise %.4f gives unlabeled token error rate %.4f", noise, rate)


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="INI run configuration")
    parser.add_argument("--out", type=str, required=True, help="Output folder")
    parser.add_argument("--seed", type=int, help="Seed of every random stream")
    parser.add_argument("--corpus", type=str, help="Saved corpus folder (default: generate)")
    parser.add_argument("--mode", choices=["supervised", "pl", "mpl", "apl"])
    parser.add_argument("--threshold", type=str, help="Fixed threshold or 'auto'")
    parser.add_argument("--schedule", choices=["one_step", "two_step"])
    parser.add_argument("--variant", choices=["R", "A", "D"], help="ATC graph variant")
    parser.add_argument("--eta", type=float, help="ATC scale factor")
    parser.add_argument("--psi", type=float, help="ATC-A split of the scale factor")
    parser.add_argument("--gamma", type=float, help="Contrastive CTC weight")
    parser.add_argument("--lambda", dest="ema_decay", type=float, help="Teacher EMA decay")
    parser.add_argument("--budget", type=int, help="Updates per training stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apl", description="Alternative pseudo-labeling on synthetic sequence data"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate and save a synthetic corpus")
    gen.add_argument("spec", nargs="?", help="Corpus spec JSON (default: built-in spec)")
    gen.add_argument("--out", type=str, required=True, help="Corpus folder")
    gen.add_argument("--seed", type=int, help="Override the spec seed")
    gen.add_argument("--noise", type=float, help="Override the feature noise")
    gen.set_defaults(handler=cmd_gen_data)

    train = commands.add_parser("train", help="Seed and pseudo-label training run")
    add_run_flags(train)
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="Evaluate student and teacher of a checkpoint")
    ev.add_argument("checkpoint", type=str)
    ev.add_argument("corpus", type=str)
    ev.add_argument("--split", choices=SPLITS, default="test")
    ev.add_argument("--confidence-mode", choices=["average", "max"], default="average")
    ev.add_argument("--out", type=str, help="Write eval.csv here")
    ev.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep-threshold", help="Fixed thresholds vs automatic")
    add_run_flags(sweep)
    sweep.add_argument(
        "--thresholds",
        type=lambda text: parse_settings(text, allow_auto=True),
        default=[0.5, 0.7, 0.9, None],
        help="Comma-separated thresholds; 'auto' for automatic thresholding",
    )
    sweep.set_defaults(handler=cmd_sweep_threshold)

    sweep_eta = commands.add_parser("sweep-eta", help="ATC scale-factor sweep")
    add_run_flags(sweep_eta)
    sweep_eta.add_argument(
        "--etas",
        type=parse_settings,
        default=[0.0, 0.1, 0.3, 1.0],
        help="Comma-separated scale factors; 0 deletes the masked arcs",
    )
    sweep_eta.set_defaults(handler=cmd_sweep_eta)

    export = commands.add_parser("export-curves", help="Tidy CSV/JSON curves of a run")
    export.add_argument("run_dir", type=str)
    export.add_argument("--out", type=str, required=True)
    export.set_defaults(handler=cmd_export_curves)

    calibrate = commands.add_parser("calibrate", help="Tune corpus noise to a seed error band")
    add_run_flags(calibrate)
    calibrate.add_argument("--target", type=parse_band, default=(0.20, 0.30))
    calibrate.add_argument("--iterations", type=int, default=8)
    calibrate.set_defaults(handler=cmd_calibrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the application."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(LOG_LEVEL)

    stop_event.clear()
    in_main_thread = threading.current_thread() is threading.main_thread()
    previous = signal.signal(signal.SIGINT, handle_exit) if in_main_thread else None
    try:
        args.handler(args)
    except TrainingDivergedError as e:
        logger.error("Training diverged: %s", e)
        return EXIT_DIVERGED
    except (ConfigError, OSError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    finally:
        if in_main_thread:
            signal.signal(signal.SIGINT, previous)
    return EXIT_INTERRUPTED if stop_event.is_set() else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
