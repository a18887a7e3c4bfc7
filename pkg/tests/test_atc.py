import math

import numpy as np
import pytest

from app.services.atc import AtcConfig, AtcVariant, MaskedLabel, atc_loss, build_atc_graph
from app.services.ctc import build_ctc_graph, ctc_loss, min_frames
from app.utils.fst import BLANK, STAR, Emissions
from tests.helpers import (
    brute_force_graph,
    numeric_gradient,
    random_emissions,
    random_label,
    relative_error,
)

REPLACE = AtcConfig(AtcVariant.REPLACE, eta=0.3)
ADD = AtcConfig(AtcVariant.ADD, eta=0.3, psi=0.4)


def random_masked(rng, vocab):
    label = random_label(rng, int(rng.integers(1, 4)), vocab)
    mask = tuple(bool(m) for m in rng.random(len(label)) < 0.5)
    return MaskedLabel(label, mask)


class TestConfig:
    def test_eta_bounds(self):
        with pytest.raises(ValueError):
            AtcConfig(AtcVariant.REPLACE, eta=0.0)
        with pytest.raises(ValueError):
            AtcConfig(AtcVariant.ADD, eta=1.5)
        assert AtcConfig(AtcVariant.DELETE, eta=0.0).variant is AtcVariant.DELETE

    def test_psi_bounds(self):
        with pytest.raises(ValueError):
            AtcConfig(AtcVariant.ADD, psi=1.0)

    def test_variant_from_string(self):
        assert AtcConfig("A").variant is AtcVariant.ADD

    def test_mask_length_must_match(self):
        with pytest.raises(ValueError, match="Mask length"):
            MaskedLabel((1, 2), (True,))


class TestGraph:
    def test_unmasked_label_is_the_ctc_graph(self):
        masked = MaskedLabel.unmasked((1, 2, 2))
        assert build_atc_graph(masked, REPLACE) == build_ctc_graph((1, 2, 2))

    def test_replace_rewrites_arcs_into_masked_state(self):
        graph = build_atc_graph(MaskedLabel((1, 2), (False, True)), REPLACE)
        star_arcs = [a for a in graph.arcs if a.label == STAR]
        # Entering state 3: its self-loop, the arc from 2 and the skip from 1.
        assert sorted(a.src for a in star_arcs) == [1, 2, 3]
        assert all(a.dst == 3 for a in star_arcs)
        assert all(a.weight == pytest.approx(math.log(0.3)) for a in star_arcs)
        assert graph.count_label(2) == 0

    def test_add_keeps_the_original_next_to_star(self):
        graph = build_atc_graph(MaskedLabel((1,), (True,)), ADD)
        entering = [a for a in graph.arcs if a.dst == 1]
        assert [a.label for a in entering] == [1, STAR, 1, STAR]
        assert entering[0].weight == pytest.approx(math.log(0.3 * 0.6))
        assert entering[1].weight == pytest.approx(math.log(0.3 * 0.4))

    def test_delete_without_mask_is_ctc(self, rng):
        emissions = random_emissions(rng, 5, 4)
        cfg = AtcConfig(AtcVariant.DELETE, eta=0.0)
        result = atc_loss(MaskedLabel.unmasked((1, 3)), emissions, cfg)
        assert result.loss == pytest.approx(ctc_loss((1, 3), emissions).loss, abs=1e-12)

    def test_delete_with_mask_skips(self, rng):
        emissions = random_emissions(rng, 5, 4)
        cfg = AtcConfig(AtcVariant.DELETE, eta=0.0)
        result = atc_loss(MaskedLabel((1, 3), (False, True)), emissions, cfg)
        assert result.skipped
        assert not result.grad.any()


class TestAtcLoss:
    def test_all_false_mask_equals_ctc(self, rng):
        for cfg in (REPLACE, ADD):
            for _ in range(20):
                vocab = int(rng.integers(2, 6))
                label = random_label(rng, int(rng.integers(1, 5)), vocab)
                emissions = random_emissions(rng, min_frames(label) + 2, vocab)
                atc = atc_loss(MaskedLabel.unmasked(label), emissions, cfg)
                ctc = ctc_loss(label, emissions)
                assert abs(atc.loss - ctc.loss) <= 1e-12
                assert np.abs(atc.grad - ctc.grad).max() <= 1e-12

    def test_replace_two_frame_value(self, rng):
        emissions = random_emissions(rng, 2, 4)
        y = emissions.probs
        star = 1.0 - y[:, BLANK]
        eta = 0.3
        expected = eta * y[0, 0] * star[1] + eta * star[0] * y[1, 0] + eta**2 * star[0] * star[1]
        result = atc_loss(MaskedLabel((2,), (True,)), emissions, REPLACE)
        assert result.loss == pytest.approx(-math.log(expected), abs=1e-12)

    def test_add_single_frame_value(self, rng):
        emissions = random_emissions(rng, 1, 4)
        y = emissions.probs[0]
        expected = 0.3 * 0.6 * y[2] + 0.3 * 0.4 * (1.0 - y[BLANK])
        result = atc_loss(MaskedLabel((2,), (True,)), emissions, ADD)
        assert result.loss == pytest.approx(-math.log(expected), abs=1e-12)

    def test_matches_path_enumeration(self, rng):
        for cfg in (REPLACE, ADD):
            for _ in range(100):
                masked = random_masked(rng, 4)
                emissions = random_emissions(rng, int(rng.integers(1, 6)), 4)
                graph = build_atc_graph(masked, cfg)
                expected = -brute_force_graph(graph, emissions.values)
                result = atc_loss(masked, emissions, cfg)
                if math.isinf(expected):
                    assert result.skipped
                else:
                    assert result.loss == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("cfg", [REPLACE, ADD], ids=["replace", "add"])
    def test_gradient_matches_finite_differences(self, rng, cfg):
        for _ in range(100):
            masked = random_masked(rng, 4)
            frames = min_frames(masked.tokens) + int(rng.integers(0, 3))
            values = random_emissions(rng, frames, 4).values

            def loss(v):
                return atc_loss(masked, Emissions(v, validate=False), cfg).loss

            analytic = atc_loss(masked, Emissions(values), cfg).grad
            assert relative_error(analytic, numeric_gradient(loss, values)) < 1e-4

    def test_star_gradient_ratio_of_a_single_path(self):
        # One frame, one masked token: the only path is a single STAR arc, so
        # each non-blank token receives the share y_k / sum of non-blank y.
        y = np.array([[0.4, 0.3, 0.2, 0.1]])
        emissions = Emissions(np.log(y))
        grad = -atc_loss(MaskedLabel((1,), (True,)), emissions, REPLACE).grad
        np.testing.assert_allclose(grad[0, 1:], y[0, 1:] / 0.6, rtol=1e-6)
        assert grad[0, BLANK] == 0.0

    def test_masked_repeat_allows_the_skip(self, rng):
        emissions = random_emissions(rng, 2, 3)
        masked = MaskedLabel((2, 2), (False, True))
        assert not atc_loss(masked, emissions, REPLACE).skipped
        strict = AtcConfig(AtcVariant.REPLACE, eta=0.3, distrust_masked_repeats=False)
        assert atc_loss(masked, emissions, strict).skipped

    def test_frame_occupancy_sums_to_one(self, rng):
        emissions = random_emissions(rng, 6, 4)
        grad = -atc_loss(MaskedLabel((1, 3), (True, False)), emissions, ADD).grad
        np.testing.assert_allclose(grad.sum(axis=1), 1.0, atol=1e-10)


class TestAtcProperties:
    @pytest.mark.parametrize(
        "masked",
        [
            MaskedLabel((1, 4, 3), (False, True, False)),
            MaskedLabel((4, 2, 4), (True, False, True)),
        ],
        ids=["middle", "edges"],
    )
    def test_single_path_ratio_to_the_true_label(self, rng, masked):
        # Three distinct tokens on three frames leave exactly one path, so the
        # ratio to the true label's probability is a product over the masked
        # frames of eta * y_star / y_true.
        truth = (1, 2, 3)
        for _ in range(20):
            emissions = random_emissions(rng, 3, 5)
            y = emissions.probs
            star = 1.0 - y[:, BLANK]
            expected = 0.0
            for t, m in enumerate(masked.incorrect_mask):
                if m:
                    expected += math.log(REPLACE.eta * star[t] / y[t, truth[t]])
            atc = atc_loss(masked, emissions, REPLACE).loss
            ctc = ctc_loss(truth, emissions).loss
            assert ctc - atc == pytest.approx(expected, abs=1e-9)

    def test_replace_loss_falls_as_eta_grows(self, rng):
        for _ in range(50):
            masked = random_masked(rng, 4)
            if not masked.num_masked:
                continue
            emissions = random_emissions(rng, min_frames(masked.tokens) + 2, 4)
            losses = [
                atc_loss(masked, emissions, AtcConfig(AtcVariant.REPLACE, eta=eta)).loss
                for eta in (0.1, 0.3, 0.6, 1.0)
            ]
            assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_add_with_psi_near_one_is_replace(self, rng):
        add = AtcConfig(AtcVariant.ADD, eta=0.3, psi=1.0 - 1e-9)
        for _ in range(50):
            masked = random_masked(rng, 4)
            emissions = random_emissions(rng, min_frames(masked.tokens) + 2, 4)
            expected = atc_loss(masked, emissions, REPLACE).loss
            assert atc_loss(masked, emissions, add).loss == pytest.approx(expected, abs=1e-6)

    def test_add_with_psi_near_zero_is_ctc(self, rng):
        add = AtcConfig(AtcVariant.ADD, eta=1.0, psi=1e-9, distrust_masked_repeats=False)
        for _ in range(50):
            masked = random_masked(rng, 4)
            emissions = random_emissions(rng, min_frames(masked.tokens) + 2, 4)
            expected = ctc_loss(masked.tokens, emissions).loss
            assert atc_loss(masked, emissions, add).loss == pytest.approx(expected, abs=1e-6)

    def test_add_with_psi_near_zero_on_one_alignment(self, rng):
        # As many frames as tokens: one alignment, one kept arc per masked token.
        add = AtcConfig(AtcVariant.ADD, eta=0.3, psi=1e-9)
        masked = MaskedLabel((1, 2, 3), (True, False, True))
        for _ in range(20):
            emissions = random_emissions(rng, 3, 4)
            expected = ctc_loss(masked.tokens, emissions).loss - 2 * math.log(0.3)
            assert atc_loss(masked, emissions, add).loss == pytest.approx(expected, abs=1e-6)
