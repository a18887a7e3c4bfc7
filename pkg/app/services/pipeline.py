"""
Two-stage training: a seed model on labeled data (CTC or contrastive CTC),
then pseudo-labeling with an EMA teacher, CTC on labeled batches and CTC
or ATC on teacher-decoded unlabeled batches.
"""

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from threading import Event
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.progress import Progress, TaskID

from app.config import RunConfig
from app.services.atc import AtcConfig, AtcVariant, MaskedLabel, build_atc_graph
from app.services.confidence import (
    PseudoLabel,
    align_verdict,
    corpus_error_rate,
    detect_errors,
    greedy_decode,
    pr_auc,
)
from app.services.contrastive import contrastive_ctc_loss, generate_noisy_decode
from app.services.ctc import LossResult, build_ctc_graph, ctc_loss, loss_from_graph
from app.services.model import (
    Params,
    SequenceModel,
    TrainingDivergedError,
    TrainState,
    ema_update,
    save_checkpoint,
    sgd_step,
)
from app.services.synth import Corpus, Utterance, augment, generate, with_noise
from app.services.thresholding import (
    ThresholdState,
    current_threshold,
    update_labeled,
    update_unlabeled,
)
from app.utils.file import write_rows_csv
from app.utils.fst import STAR, EmptyGraphError, Emissions, Wfsa

logger = logging.getLogger(__name__)

METRIC_FIELDS = (
    "update",
    "split",
    "mode",
    "loss",
    "token_error_rate",
    "auc",
    "mean_conf_correct",
    "mean_conf_incorrect",
    "threshold",
    "T_e",
    "T_l",
    "T_u",
)

LossFn = Callable[[Emissions], LossResult]


@dataclass
class MetricsRow:
    update: int
    split: str
    mode: str
    loss: Optional[float] = None
    token_error_rate: Optional[float] = None
    auc: Optional[float] = None
    mean_conf_correct: Optional[float] = None
    mean_conf_incorrect: Optional[float] = None
    threshold: Optional[float] = None
    t_e: Optional[float] = None
    t_l: Optional[float] = None
    t_u: Optional[float] = None

    def as_dict(self) -> Dict[str, object]:
        row = asdict(self)
        for name in ("t_e", "t_l", "t_u"):
            row[name.replace("t_", "T_")] = row.pop(name)
        return row


class MetricsLog:
    """Collects metric rows and appends each one to a CSV file, if given."""

    def __init__(self, path: Optional[Path] = None):
        self.rows: List[MetricsRow] = []
        self.path = path
        if path is not None and path.exists():
            path.unlink()

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self.path is not None:
            write_rows_csv(self.path, METRIC_FIELDS, [row.as_dict()], append=True)

    def last(self, split: str) -> Optional[MetricsRow]:
        return next((r for r in reversed(self.rows) if r.split == split), None)


@dataclass
class StageHooks:
    """Optional observers of a training stage."""

    log: MetricsLog = field(default_factory=MetricsLog)
    progress: Optional[Progress] = None
    stop_event: Optional[Event] = None
    checkpoint_dir: Optional[Path] = None
    workers: int = 1
    # Generator of the running stage; checkpoints store its state.
    rng: Optional[np.random.Generator] = None
    # STAR arcs per pseudo-labeling update, for graph introspection.
    star_arcs: List[int] = field(default_factory=list)

    def stopped(self) -> bool:
        return self.stop_event is not None and self.stop_event.is_set()

    def task(self, description: str, total: int) -> Optional[TaskID]:
        if self.progress is None:
            return None
        return self.progress.add_task(description, total=total)

    def advance(self, task: Optional[TaskID]) -> None:
        if self.progress is not None and task is not None:
            self.progress.update(task, advance=1)


def stage_rng(cfg: RunConfig, stage: int) -> np.random.Generator:
    """Independent streams per stage so a shared seed model fits any second stage."""
    return np.random.default_rng([cfg.seed, stage])


def clone_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)


def _sample(pool: Sequence[Utterance], size: int, rng: np.random.Generator) -> List[Utterance]:
    picks = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
    return [pool[int(i)] for i in picks]


def _evaluate_job(
    model: SequenceModel, job: Tuple[np.ndarray, LossFn]
) -> Tuple[LossResult, Optional[Params], Emissions]:
    features, loss_fn = job
    emissions, cache = model.forward_with_cache(features)
    result = loss_fn(emissions)
    if result.skipped:
        return result, None, emissions
    if not math.isfinite(result.loss):
        raise TrainingDivergedError(f"Loss became {result.loss}.")
    return result, model.backward(cache, result.grad), emissions


@dataclass
class BatchResult:
    loss: float
    grads: Optional[Params]
    used: int
    skipped: int
    emissions: List[Emissions]


def _batch_gradients(
    model: SequenceModel, jobs: List[Tuple[np.ndarray, LossFn]], workers: int = 1
) -> BatchResult:
    """Mean loss and gradient over the non-skipped jobs, reduced in job order."""
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(lambda job: _evaluate_job(model, job), jobs))
    else:
        outputs = [_evaluate_job(model, job) for job in jobs]

    total_loss, grads, used = 0.0, None, 0
    for result, job_grads, _ in outputs:
        if job_grads is None:
            continue
        used += 1
        total_loss += result.loss
        if grads is None:
            grads = {k: v.copy() for k, v in job_grads.items()}
        else:
            for k, v in job_grads.items():
                grads[k] += v

    if grads is not None:
        grads = {k: v / used for k, v in grads.items()}
    mean_loss = total_loss / used if used else float("nan")
    return BatchResult(mean_loss, grads, used, len(jobs) - used, [o[2] for o in outputs])


def _combine(first: Optional[Params], second: Optional[Params]) -> Optional[Params]:
    if first is None or second is None:
        return first if second is None else second
    return {k: first[k] + second[k] for k in first}


def evaluate(
    state: TrainState,
    utterances: Sequence[Utterance],
    which: str = "teacher",
    split: str = "",
    mode: str = "",
    confidence_mode: str = "average",
) -> MetricsRow:
    """
    Greedy-decodes ``utterances`` with the student or teacher and scores the
    decodes: corpus token error rate, error-detection AUC and the mean
    confidence of correct and incorrect tokens.
    """
    model = state.teacher if which == "teacher" else state.student
    decodes = [greedy_decode(model.forward(u.features), confidence_mode) for u in utterances]
    verdicts = [align_verdict(d, u.label) for d, u in zip(decodes, utterances)]

    correct: List[float] = []
    incorrect: List[float] = []
    for decode, verdict in zip(decodes, verdicts):
        for conf, ok in zip(decode.confidences, verdict.correct):
            (correct if ok else incorrect).append(conf)

    return MetricsRow(
        update=state.step,
        split=split,
        mode=mode,
        token_error_rate=corpus_error_rate((d.tokens, u.label) for d, u in zip(decodes, utterances)),
        auc=pr_auc(verdicts, [d.confidences for d in decodes]),
        mean_conf_correct=float(np.mean(correct)) if correct else None,
        mean_conf_incorrect=float(np.mean(incorrect)) if incorrect else None,
    )


def new_state(cfg: RunConfig, corpus: Corpus, rng: np.random.Generator) -> TrainState:
    spec = corpus.spec
    model_cfg = replace(cfg.model, feature_dim=spec.feature_dim, vocab_size=spec.vocab_size)
    student = SequenceModel.initialize(model_cfg, rng)
    return TrainState.create(student, cfg.optimizer, cfg.ema_decay)


def run_seeding(
    cfg: RunConfig, corpus: Corpus, hooks: Optional[StageHooks] = None
) -> TrainState:
    """
    Trains a fresh student on the labeled split with the seed loss for
    ``cfg.seed_updates`` updates; the teacher starts as a copy of it.

    Raises:
        ValueError: The corpus has no labeled utterances.
        TrainingDivergedError: A loss or parameter stopped being finite.
    """
    hooks = hooks or StageHooks()
    rng = hooks.rng = stage_rng(cfg, 0)
    state = new_state(cfg, corpus, rng)
    labeled = corpus["labeled"]
    if not labeled:
        raise ValueError("Seeding needs labeled utterances.")

    task = hooks.task(f"[cyan]seed ({cfg.seed_loss})", cfg.seed_updates)
    for update in range(cfg.seed_updates):
        if hooks.stopped():
            logger.warning("Seeding stopped at update %d.", update)
            break
        jobs: List[Tuple[np.ndarray, LossFn]] = []
        for utt in _sample(labeled, cfg.labeled_batch, rng):
            features = augment(utt.features, cfg.augment_strength, rng, cfg.augment)
            if cfg.seed_loss == "contrastive":
                decoded = generate_noisy_decode(state.student, features, cfg.contrastive, rng)
                jobs.append(
                    (
                        features,
                        lambda e, t=utt.label, d=decoded: contrastive_ctc_loss(
                            t, e, d, cfg.contrastive
                        ),
                    )
                )
            else:
                jobs.append((features, lambda e, t=utt.label: ctc_loss(t, e)))

        batch = _batch_gradients(state.student, jobs, hooks.workers)
        if batch.grads is not None:
            sgd_step(state, batch.grads)
        hooks.log.append(MetricsRow(update=update + 1, split="seed", mode=cfg.seed_loss, loss=batch.loss))
        if (update + 1) % cfg.eval_every == 0:
            row = evaluate(state, corpus["labeled_dev"], "student", "labeled_dev", "seed", cfg.confidence_mode)
            hooks.log.append(row)
            logger.info("seed update %d: labeled_dev TER %.4f", update + 1, row.token_error_rate)
        hooks.advance(task)

    state.teacher = state.student.copy()
    if hooks.checkpoint_dir is not None:
        save_checkpoint(hooks.checkpoint_dir / "seed.npz", state, rng)
    return state


class PseudoLabeler:
    """Teacher decodes of unlabeled utterances, refreshed every ``relabel_every`` updates."""

    def __init__(self, cfg: RunConfig, frozen: bool):
        self.cfg = cfg
        self.frozen = frozen
        self._cache: Dict[str, Tuple[int, PseudoLabel]] = {}

    def prime(self, model: SequenceModel, utterances: Sequence[Utterance]) -> None:
        for utt in utterances:
            self._cache[utt.uid] = (0, greedy_decode(model.forward(utt.features), self.cfg.confidence_mode))

    def __call__(self, model: SequenceModel, utt: Utterance, update: int) -> PseudoLabel:
        cached = self._cache.get(utt.uid)
        if cached is not None and (self.frozen or update - cached[0] < self.cfg.relabel_every):
            return cached[1]
        decode = greedy_decode(model.forward(utt.features), self.cfg.confidence_mode)
        self._cache[utt.uid] = (update, decode)
        return decode


def _unlabeled_graph(
    cfg: RunConfig, pseudo: PseudoLabel, threshold: Optional[float], atc_phase: bool
) -> Wfsa:
    if not atc_phase:
        return build_ctc_graph(pseudo.tokens)
    if threshold is None:
        masked = MaskedLabel.unmasked(pseudo.tokens)
    else:
        masked = detect_errors(pseudo, threshold)
    return build_atc_graph(masked, cfg.atc)


def run_pseudo_labeling(
    cfg: RunConfig,
    state: TrainState,
    corpus: Corpus,
    hooks: Optional[StageHooks] = None,
) -> TrainState:
    """
    Continues training ``state`` on labeled and unlabeled batches.

    Each update: CTC on a labeled batch; teacher pseudo-labels for an
    unlabeled batch; threshold statistics; error masks; ATC (during the ATC
    phase of an ``apl`` run) or CTC on the pseudo-labels; one SGD step on
    the summed batch-mean gradients; one EMA update of the teacher.
    """
    hooks = hooks or StageHooks()
    rng = hooks.rng = stage_rng(cfg, 1)
    labeled, unlabeled = corpus["labeled"], corpus["unlabeled"]
    if not labeled:
        raise ValueError("Pseudo-labeling needs labeled utterances.")

    auto = cfg.mode == "apl" and cfg.threshold is None
    thresholds = ThresholdState(cfg.ema_decay) if auto else None
    labeler = PseudoLabeler(cfg, frozen=cfg.mode == "pl")
    if cfg.mode == "pl":
        labeler.prime(state.teacher, unlabeled)

    _log_eval(cfg, state, corpus, hooks, 0)
    task = hooks.task(f"[cyan]pseudo-label ({cfg.mode})", cfg.pl_updates)
    for update in range(cfg.pl_updates):
        if hooks.stopped():
            logger.warning("Pseudo-labeling stopped at update %d.", update)
            break

        labeled_batch = _sample(labeled, cfg.labeled_batch, rng)
        jobs = [
            (
                augment(utt.features, cfg.augment_strength, rng, cfg.augment),
                lambda e, t=utt.label: ctc_loss(t, e),
            )
            for utt in labeled_batch
        ]
        sup = _batch_gradients(state.student, jobs, hooks.workers)

        if thresholds is not None:
            if cfg.labeled_stats_from == "teacher":
                stats_emissions = [state.teacher.forward(u.features) for u in labeled_batch]
            else:
                stats_emissions = sup.emissions
            decodes = [greedy_decode(e, cfg.confidence_mode) for e in stats_emissions]
            verdicts = [align_verdict(d, u.label) for d, u in zip(decodes, labeled_batch)]
            thresholds = update_labeled(thresholds, verdicts, [d.confidences for d in decodes])

        unlabeled_batch = _sample(unlabeled, cfg.unlabeled_batch, rng) if unlabeled else []
        pseudo = [labeler(state.teacher, utt, update) for utt in unlabeled_batch]
        if thresholds is not None:
            thresholds = update_unlabeled(thresholds, [p.confidences for p in pseudo])
            threshold = current_threshold(thresholds, cfg.relative_correction)
        else:
            threshold = cfg.threshold if cfg.mode == "apl" else None

        atc_phase = cfg.mode == "apl" and update < cfg.switch_update
        jobs, star_arcs = [], 0
        for utt, label in zip(unlabeled_batch, pseudo):
            features = augment(utt.features, cfg.augment_strength, rng, cfg.augment)
            if cfg.utt_filter is not None and (label.mean_confidence or 0.0) < cfg.utt_filter:
                continue
            try:
                graph = _unlabeled_graph(cfg, label, threshold, atc_phase)
            except EmptyGraphError:
                continue
            star_arcs += graph.count_label(STAR)
            jobs.append((features, lambda e, g=graph: loss_from_graph(g, e)))
        hooks.star_arcs.append(star_arcs)

        unsup = _batch_gradients(state.student, jobs, hooks.workers)
        if unsup.grads is None:
            logger.warning("Update %d: no usable unlabeled utterances; labeled-only step.", update + 1)

        grads = _combine(sup.grads, unsup.grads)
        if grads is not None:
            sgd_step(state, grads)
        ema_update(state)

        loss = sum(b.loss for b in (sup, unsup) if b.used)
        hooks.log.append(
            MetricsRow(
                update=update + 1,
                split="train",
                mode=cfg.mode,
                loss=float(loss),
                threshold=threshold,
                t_e=thresholds.t_e if thresholds else None,
                t_l=thresholds.t_l if thresholds else None,
                t_u=thresholds.t_u if thresholds else None,
            )
        )
        done = update + 1
        if done % cfg.eval_every == 0 or done == cfg.switch_update or done == cfg.pl_updates:
            _log_eval(cfg, state, corpus, hooks, done)
        hooks.advance(task)

    return state


def _log_eval(
    cfg: RunConfig, state: TrainState, corpus: Corpus, hooks: StageHooks, update: int
) -> None:
    for split in ("dev", "unlabeled"):
        if not corpus[split]:
            continue
        row = evaluate(state, corpus[split], "teacher", split, cfg.mode, cfg.confidence_mode)
        row.update = update
        hooks.log.append(row)
    dev = hooks.log.last("dev")
    if dev is not None and dev.update == update:
        logger.info("%s update %d: dev TER %.4f", cfg.mode, update, dev.token_error_rate)
    if hooks.checkpoint_dir is not None and update:
        save_checkpoint(hooks.checkpoint_dir / f"update-{update:06d}.npz", state, hooks.rng)


@dataclass
class RunResult:
    state: TrainState
    log: MetricsLog
    final: MetricsRow
    star_arcs: List[int]
    rng: Optional[np.random.Generator] = None


def run(
    cfg: RunConfig,
    corpus: Corpus,
    hooks: Optional[StageHooks] = None,
    seed_state: Optional[TrainState] = None,
) -> RunResult:
    """
    Full run: seeding (or a copy of ``seed_state``), then pseudo-labeling
    unless the mode is ``supervised``, then a final teacher evaluation on
    the test split.
    """
    hooks = hooks or StageHooks()
    state = clone_state(seed_state) if seed_state is not None else run_seeding(cfg, corpus, hooks)
    if cfg.mode != "supervised":
        state = run_pseudo_labeling(cfg, state, corpus, hooks)

    split = "test" if corpus["test"] else "dev"
    final = evaluate(state, corpus[split], "teacher", split, cfg.mode, cfg.confidence_mode)
    hooks.log.append(final)
    return RunResult(state, hooks.log, final, hooks.star_arcs, hooks.rng)


def threshold_setting(cfg: RunConfig, threshold: Optional[float]) -> RunConfig:
    return replace(cfg, mode="apl", threshold=threshold)


def eta_setting(cfg: RunConfig, eta: float) -> RunConfig:
    """An ATC setting for a scale factor; 0 deletes the masked arcs."""
    if eta == 0.0:
        atc = AtcConfig(AtcVariant.DELETE, 1.0, cfg.atc.psi, cfg.atc.distrust_masked_repeats)
    else:
        atc = replace(cfg.atc, eta=eta)
    return replace(cfg, mode="apl", atc=atc)


def calibrate_noise(
    cfg: RunConfig,
    target: Tuple[float, float] = (0.20, 0.30),
    bounds: Tuple[float, float] = (0.1, 4.0),
    iterations: int = 8,
) -> Tuple[float, float]:
    """
    Bisects the corpus noise so a CTC seed model's unlabeled-split token
    error rate lands inside ``target``.

    Returns:
        Tuple[float, float]: The chosen noise and the error rate it gave.
    """
    seed_cfg = replace(cfg, seed_loss="ctc", mode="supervised")
    lo, hi = bounds
    noise, rate = cfg.data.spec.noise, float("nan")
    for _ in range(iterations):
        corpus = generate(with_noise(cfg.data.spec, noise))
        state = run_seeding(seed_cfg, corpus)
        rate = evaluate(state, corpus["unlabeled"], "teacher").token_error_rate
        logger.info("noise %.4f -> unlabeled TER %.4f", noise, rate)
        if target[0] <= rate <= target[1]:
            break
        if rate < target[0]:
            lo = noise
        else:
            hi = noise
        noise = 0.5 * (lo + hi)
    return noise, rate
