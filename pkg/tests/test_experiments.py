"""Desk-scale training experiments on the default synthetic benchmark."""

from dataclasses import replace

import numpy as np
import pytest

from app.config import DataConfig, RunConfig
from app.services.confidence import corpus_error_rate, greedy_decode
from app.services.contrastive import ContrastiveConfig, generate_noisy_decode
from app.services.pipeline import eta_setting, evaluate, run, run_seeding
from app.services.synth import generate

SEEDS = (0, 1, 2, 3, 4)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def benchmark():
    cfg = RunConfig()
    return cfg, generate(cfg.data.spec)


@pytest.fixture(scope="module")
def shifted():
    base = RunConfig()
    spec = replace(base.data.spec, shift=2.0, noise_inflation=0.2)
    cfg = replace(base, data=DataConfig(spec=spec))
    return cfg, generate(spec)


def final_error(cfg, corpus, seed_state):
    return run(cfg, corpus, seed_state=seed_state).final.token_error_rate


class TestModeOrdering:
    def test_alternative_pseudo_labeling_wins(self, benchmark):
        base, corpus = benchmark
        errors = {mode: [] for mode in ("supervised", "pl", "mpl", "apl")}
        for seed in SEEDS:
            cfg = replace(base, seed=seed)
            seed_state = run_seeding(cfg, corpus)
            for mode in errors:
                errors[mode].append(final_error(replace(cfg, mode=mode), corpus, seed_state))

        means = {mode: np.mean(values) for mode, values in errors.items()}
        assert means["supervised"] > means["pl"] > means["mpl"] > means["apl"]
        wins = sum(a < m for a, m in zip(errors["apl"], errors["mpl"], strict=True))
        assert wins >= 4


class TestContrastiveSeed:
    def test_widens_the_confidence_gap(self, benchmark):
        base, corpus = benchmark
        lower_conf = higher_auc = 0
        for seed in SEEDS:
            rows = {}
            for loss in ("ctc", "contrastive"):
                state = run_seeding(replace(base, seed=seed, seed_loss=loss), corpus)
                rows[loss] = evaluate(state, corpus["unlabeled"], "teacher", "unlabeled")
            ctc, contrastive = rows["ctc"], rows["contrastive"]
            lower_conf += contrastive.mean_conf_incorrect < ctc.mean_conf_incorrect
            higher_auc += contrastive.auc > ctc.auc
        assert lower_conf >= 4
        assert higher_auc >= 4


class TestScaleFactorSweep:
    def test_interior_optimum(self, benchmark):
        base, corpus = benchmark
        interior_wins = 0
        for seed in SEEDS:
            cfg = replace(base, seed=seed)
            seed_state = run_seeding(cfg, corpus)
            errors = {
                eta: final_error(eta_setting(cfg, eta), corpus, seed_state)
                for eta in (0.0, 0.1, 0.3, 1.0)
            }
            best_interior = min(errors[0.1], errors[0.3])
            interior_wins += best_interior < errors[0.0] and best_interior < errors[1.0]
        assert interior_wins >= 3


class TestNoisyDecode:
    def test_dropout_decode_makes_more_errors(self, benchmark):
        base, corpus = benchmark
        state = run_seeding(replace(base, seed_loss="ctc"), corpus)
        utterances = corpus["unlabeled"][:128]
        stream = np.random.default_rng(0)
        cfg = ContrastiveConfig()
        clean = corpus_error_rate(
            (greedy_decode(state.teacher.forward(u.features)).tokens, u.label) for u in utterances
        )
        noisy = corpus_error_rate(
            (generate_noisy_decode(state.teacher, u.features, cfg, stream), u.label)
            for u in utterances
        )
        assert noisy > clean


class TestOneStepDecline:
    def test_unlabeled_auc_falls_after_the_midpoint(self, benchmark):
        base, corpus = benchmark
        declines = 0
        for seed in SEEDS:
            cfg = replace(base, seed=seed, schedule="one_step")
            log = run(cfg, corpus).log
            auc = {r.update: r.auc for r in log.rows if r.split == "unlabeled"}
            middle, end = auc[cfg.pl_updates // 2], auc[cfg.pl_updates]
            declines += middle is not None and end is not None and end < middle
        assert declines >= 3


class TestAutomaticThreshold:
    @pytest.mark.parametrize("condition", ["benchmark", "shifted"])
    def test_close_to_the_best_fixed_threshold(self, request, condition):
        base, corpus = request.getfixturevalue(condition)
        close = 0
        for seed in SEEDS:
            cfg = replace(base, seed=seed)
            seed_state = run_seeding(cfg, corpus)
            fixed = [
                final_error(replace(cfg, threshold=t), corpus, seed_state)
                for t in (0.3, 0.5, 0.7, 0.9)
            ]
            auto = final_error(replace(cfg, threshold=None), corpus, seed_state)
            close += auto <= min(fixed) + 0.01
        assert close >= 4

    def test_relative_correction_helps_under_shift(self, shifted):
        base, corpus = shifted
        wins = 0
        for seed in SEEDS:
            cfg = replace(base, seed=seed, threshold=None)
            seed_state = run_seeding(cfg, corpus)
            corrected = final_error(cfg, corpus, seed_state)
            plain = final_error(replace(cfg, relative_correction=False), corpus, seed_state)
            wins += corrected < plain
        assert wins >= 4
