import itertools
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from app.utils.fst import BLANK, FINAL_MARKER, STAR, Emissions, Wfsa


def random_emissions(
    rng: np.random.Generator, frames: int, vocab: int, sharpness: float = 1.0
) -> Emissions:
    return Emissions.from_logits(sharpness * rng.normal(size=(frames, vocab)))


def random_label(rng: np.random.Generator, length: int, vocab: int) -> Tuple[int, ...]:
    return tuple(int(t) for t in rng.integers(1, vocab, size=length))


def collapse(path: Sequence[int]) -> Tuple[int, ...]:
    out: List[int] = []
    prev = None
    for token in path:
        if token != prev and token != BLANK:
            out.append(int(token))
        prev = token
    return tuple(out)


def brute_force_ctc(label: Sequence[int], values: np.ndarray) -> float:
    """log P(label | x) by summing over every frame path."""
    frames, vocab = values.shape
    scores = [
        values[np.arange(frames), path].sum()
        for path in itertools.product(range(vocab), repeat=frames)
        if collapse(path) == tuple(label)
    ]
    return float(logsumexp(scores)) if scores else float("-inf")


def brute_force_graph(graph: Wfsa, values: np.ndarray) -> float:
    """Log-sum of every start-to-final path of ``graph`` consuming all frames."""
    frames = values.shape[0]
    star = logsumexp(np.delete(values, BLANK, axis=1), axis=1)
    scores: List[float] = []

    def walk(state: int, t: int, score: float) -> None:
        if t == frames:
            if state in graph.final_states:
                scores.append(score)
            for arc in graph.arcs:
                if arc.src == state and arc.label == FINAL_MARKER:
                    scores.append(score + arc.weight)
            return
        for arc in graph.arcs:
            if arc.src != state or arc.label == FINAL_MARKER:
                continue
            emit = star[t] if arc.label == STAR else values[t, arc.label]
            walk(arc.dst, t + 1, score + arc.weight + emit)

    walk(graph.start_state, 0, 0.0)
    return float(logsumexp(scores)) if scores else float("-inf")


def numeric_gradient(fn, values: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an unnormalized T x V matrix."""
    grad = np.zeros_like(values)
    for index in np.ndindex(values.shape):
        up, down = values.copy(), values.copy()
        up[index] += eps
        down[index] -= eps
        grad[index] = (fn(up) - fn(down)) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
