import math

import numpy as np
import pytest

from app.services.ctc import build_ctc_graph
from app.utils.fst import (
    FINAL_MARKER,
    STAR,
    Arc,
    EmptyGraphError,
    Emissions,
    Wfsa,
    backward,
    intersect_dense,
    trim,
)
from tests.helpers import brute_force_graph, numeric_gradient, random_emissions, relative_error


def star_graph() -> Wfsa:
    """Two-state acceptor mixing token, blank, STAR and weighted arcs."""
    arcs = (
        Arc(0, 0, 0, 0.0),
        Arc(0, 1, 1, math.log(0.5)),
        Arc(0, 1, STAR, math.log(0.25)),
        Arc(1, 1, STAR, 0.0),
        Arc(1, 1, 2, math.log(0.7)),
        Arc(1, 2, FINAL_MARKER, 0.0),
    )
    return Wfsa(3, 0, arcs, frozenset([2]))


class TestWfsa:
    def test_rejects_out_of_range_arc(self):
        with pytest.raises(ValueError, match="out of range"):
            Wfsa(2, 0, (Arc(0, 5, 1, 0.0),), frozenset([1]))

    def test_rejects_non_finite_weight(self):
        with pytest.raises(ValueError, match="non-finite"):
            Wfsa(2, 0, (Arc(0, 1, 1, float("-inf")),), frozenset([1]))

    def test_final_marker_must_enter_final_state(self):
        with pytest.raises(ValueError, match="final state"):
            Wfsa(3, 0, (Arc(0, 1, FINAL_MARKER, 0.0),), frozenset([2]))

    def test_final_markers_cannot_chain(self):
        arcs = (Arc(0, 1, FINAL_MARKER, 0.0), Arc(1, 2, FINAL_MARKER, 0.0))
        with pytest.raises(ValueError, match="chained"):
            Wfsa(3, 0, arcs, frozenset([1, 2]))

    def test_rejects_unknown_negative_label(self):
        with pytest.raises(ValueError, match="unknown label"):
            Wfsa(2, 0, (Arc(0, 1, -3, 0.0),), frozenset([1]))

    def test_count_label(self):
        assert star_graph().count_label(STAR) == 2
        assert star_graph().count_label(FINAL_MARKER) == 1

    def test_text_form_keeps_arcs_and_weights(self):
        graph = star_graph()
        parsed = Wfsa.from_text(graph.to_text())
        assert parsed == graph

    def test_text_form_needs_start_zero(self):
        graph = Wfsa(2, 1, (Arc(1, 0, 1, 0.0),), frozenset([0]))
        with pytest.raises(ValueError):
            graph.to_text()


class TestEmissions:
    def test_rejects_unnormalized_rows(self):
        with pytest.raises(ValueError, match="normalized"):
            Emissions(np.zeros((2, 3)))

    def test_unvalidated_rows_are_accepted(self):
        assert Emissions(np.zeros((2, 3)), validate=False).num_frames == 2

    def test_rejects_nan_and_bad_shapes(self):
        with pytest.raises(ValueError):
            Emissions(np.array([[np.nan, 0.0]]), validate=False)
        with pytest.raises(ValueError):
            Emissions(np.zeros(3), validate=False)
        with pytest.raises(ValueError):
            Emissions(np.zeros((2, 1)), validate=False)

    def test_from_logits_normalizes(self, rng):
        emissions = Emissions.from_logits(rng.normal(size=(4, 5)))
        np.testing.assert_allclose(emissions.probs.sum(axis=1), 1.0, atol=1e-12)


class TestIntersectDense:
    def test_matches_path_enumeration(self, rng):
        for _ in range(20):
            frames = int(rng.integers(1, 6))
            emissions = random_emissions(rng, frames, 3)
            graph = star_graph()
            expected = brute_force_graph(graph, emissions.values)
            assert intersect_dense(graph, emissions).total == pytest.approx(expected, abs=1e-10)

    def test_uniform_arc_weight_shifts_total(self, rng):
        emissions = random_emissions(rng, 5, 4)
        base = build_ctc_graph((1, 3))
        arcs = tuple(
            a if a.label == FINAL_MARKER else a._replace(weight=a.weight + 0.1) for a in base.arcs
        )
        shifted = Wfsa(base.num_states, base.start_state, arcs, base.final_states)
        delta = intersect_dense(shifted, emissions).total - intersect_dense(base, emissions).total
        assert delta == pytest.approx(5 * 0.1, abs=1e-12)

    def test_infeasible_is_minus_infinity(self, rng):
        score = intersect_dense(build_ctc_graph((1, 1, 1)), random_emissions(rng, 4, 3))
        assert score.total == float("-inf")
        assert not score.tape.feasible

    def test_label_outside_vocabulary(self, rng):
        with pytest.raises(ValueError, match="V=3"):
            intersect_dense(build_ctc_graph((5,)), random_emissions(rng, 3, 3))

    def test_repeated_calls_are_bitwise_equal(self, rng):
        emissions = random_emissions(rng, 6, 4)
        graph = build_ctc_graph((1, 2, 2))
        first = intersect_dense(graph, emissions)
        second = intersect_dense(graph, emissions)
        assert first.total == second.total
        assert np.array_equal(backward(first.tape), backward(second.tape))


class TestBackward:
    def test_matches_finite_differences(self, rng):
        graph = star_graph()
        for _ in range(10):
            values = random_emissions(rng, int(rng.integers(2, 5)), 3).values

            def total(v):
                return intersect_dense(graph, Emissions(v, validate=False)).total

            analytic = backward(intersect_dense(graph, Emissions(values)).tape)
            assert relative_error(analytic, numeric_gradient(total, values)) < 1e-4

    def test_frame_occupancy_sums_to_one(self, rng):
        emissions = random_emissions(rng, 6, 3)
        grad = backward(intersect_dense(star_graph(), emissions).tape)
        np.testing.assert_allclose(grad.sum(axis=1), 1.0, atol=1e-10)

    def test_infeasible_gives_zero_gradient(self, rng):
        score = intersect_dense(build_ctc_graph((2, 2)), random_emissions(rng, 2, 3))
        assert np.array_equal(backward(score.tape), np.zeros((2, 3)))


class TestTrim:
    def test_drops_dead_states_and_keeps_arc_order(self):
        arcs = (
            Arc(0, 1, 1, 0.0),
            Arc(0, 2, 2, 0.0),  # state 2 never reaches the final state
            Arc(1, 1, 0, -0.5),
            Arc(1, 3, FINAL_MARKER, 0.0),
            Arc(4, 1, 1, 0.0),  # state 4 is unreachable
        )
        trimmed = trim(Wfsa(5, 0, arcs, frozenset([3])))
        assert trimmed.num_states == 3
        assert trimmed.arcs == (
            Arc(0, 1, 1, 0.0),
            Arc(1, 1, 0, -0.5),
            Arc(1, 2, FINAL_MARKER, 0.0),
        )
        assert trimmed.final_states == frozenset([2])

    def test_raises_without_a_path(self):
        with pytest.raises(EmptyGraphError):
            trim(Wfsa(3, 0, (Arc(0, 1, 1, 0.0),), frozenset([2])))
