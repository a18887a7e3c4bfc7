"""
Log-semiring weighted finite-state acceptors and their intersection with
dense per-frame emissions.

Label ids follow the k2 convention: ``BLANK`` is token 0, ``FINAL_MARKER`` (-1)
arcs enter the final state without consuming a frame, and ``STAR`` (-2) arcs
score the log-sum of every non-blank token at their frame.
"""

import logging
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import FrozenSet, Iterable, List, NamedTuple, Set, Tuple, Union

import numpy as np
from scipy.special import log_softmax, logsumexp

logger = logging.getLogger(__name__)

BLANK = 0
FINAL_MARKER = -1
STAR = -2

NORMALIZATION_TOLERANCE = 1e-6


class EmptyGraphError(ValueError):
    """Raised when a graph has no start-to-final path."""


class Arc(NamedTuple):
    src: int
    dst: int
    label: int
    weight: float


class _ArcArrays(NamedTuple):
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    final_src: np.ndarray
    final_weight: np.ndarray


@dataclass(frozen=True)
class Wfsa:
    """
    Weighted finite-state acceptor with log-space arc weights.

    Arcs keep their construction order; intersection accumulates in that
    order so scores are reproducible bit for bit.
    """

    num_states: int
    start_state: int
    arcs: Tuple[Arc, ...]
    final_states: FrozenSet[int]

    def __post_init__(self) -> None:
        arcs = tuple(
            Arc(int(a[0]), int(a[1]), int(a[2]), float(a[3])) for a in self.arcs
        )
        object.__setattr__(self, "arcs", arcs)
        object.__setattr__(
            self, "final_states", frozenset(int(s) for s in self.final_states)
        )

        if self.num_states < 1:
            raise ValueError("A graph needs at least one state.")
        if not 0 <= self.start_state < self.num_states:
            raise ValueError(f"Start state {self.start_state} is out of range.")
        if not self.final_states:
            raise ValueError("A graph needs at least one final state.")
        if any(not 0 <= s < self.num_states for s in self.final_states):
            raise ValueError("Final state out of range.")

        final_sources = {a.src for a in arcs if a.label == FINAL_MARKER}
        for arc in arcs:
            if not (0 <= arc.src < self.num_states and 0 <= arc.dst < self.num_states):
                raise ValueError(f"Arc {arc} references a state out of range.")
            if not np.isfinite(arc.weight):
                raise ValueError(f"Arc {arc} has a non-finite weight.")
            if arc.label < STAR:
                raise ValueError(f"Arc {arc} has an unknown label.")
            if arc.label == FINAL_MARKER:
                if arc.dst not in self.final_states:
                    raise ValueError(f"Final-marker arc {arc} must enter a final state.")
                if arc.dst in final_sources:
                    raise ValueError(f"Final-marker arcs cannot be chained ({arc}).")

    @cached_property
    def _arrays(self) -> _ArcArrays:
        frame = [a for a in self.arcs if a.label != FINAL_MARKER]
        final = [a for a in self.arcs if a.label == FINAL_MARKER]
        return _ArcArrays(
            src=np.array([a.src for a in frame], dtype=np.int64),
            dst=np.array([a.dst for a in frame], dtype=np.int64),
            label=np.array([a.label for a in frame], dtype=np.int64),
            weight=np.array([a.weight for a in frame], dtype=np.float64),
            final_src=np.array([a.src for a in final], dtype=np.int64),
            final_weight=np.array([a.weight for a in final], dtype=np.float64),
        )

    def count_label(self, label: int) -> int:
        """Returns how many arcs carry ``label``."""
        return sum(1 for a in self.arcs if a.label == label)

    def to_text(self) -> str:
        """
        Serializes the graph as ``src dst label weight`` lines followed by a
        line of final states. The start state must be 0.
        """
        if self.start_state != 0:
            raise ValueError("Only graphs starting in state 0 can be serialized.")
        lines = [f"{a.src} {a.dst} {a.label} {a.weight!r}" for a in self.arcs]
        lines.append(" ".join(str(s) for s in sorted(self.final_states)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Wfsa":
        """Parses the format written by :meth:`to_text`."""
        lines = [line.split() for line in text.splitlines() if line.strip()]
        if not lines:
            raise ValueError("Empty graph text.")
        *arc_lines, final_line = lines
        arcs = []
        for fields in arc_lines:
            if len(fields) != 4:
                raise ValueError(f"Malformed arc line: {' '.join(fields)!r}")
            arcs.append(Arc(int(fields[0]), int(fields[1]), int(fields[2]), float(fields[3])))
        finals = frozenset(int(s) for s in final_line)
        ids = [0, *finals, *(a.src for a in arcs), *(a.dst for a in arcs)]
        return cls(max(ids) + 1, 0, tuple(arcs), finals)


class Emissions:
    """
    A T x V matrix of per-frame log-probabilities; column ``BLANK`` is the
    blank token.

    Args:
        values: Log-probabilities, one row per frame.
        validate (bool): Require every row to log-sum-exp to 0. Gradient
            checks and unnormalized kernels pass False.
    """

    def __init__(self, values: Union[np.ndarray, Iterable], validate: bool = True):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"Emissions must be 2-D, got shape {values.shape}.")
        if values.shape[0] < 1 or values.shape[1] < 2:
            raise ValueError(f"Emissions need T >= 1 and V >= 2, got {values.shape}.")
        if np.isnan(values).any():
            raise ValueError("Emissions contain NaN.")
        if validate:
            drift = np.abs(logsumexp(values, axis=1)).max()
            if drift > NORMALIZATION_TOLERANCE:
                raise ValueError(f"Emission rows are not normalized (drift {drift:.2e}).")
        self.values = values

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Emissions":
        return cls(log_softmax(np.asarray(logits, dtype=np.float64), axis=1))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Emissions":
        """Builds emissions from linear probabilities, renormalizing each row."""
        probs = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls.from_logits(np.log(probs))

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.values.shape[1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.values)


@dataclass
class GradTape:
    """Forward quantities retained for the backward sweep."""

    values: np.ndarray
    scores: np.ndarray
    columns: np.ndarray
    arrays: _ArcArrays
    alpha: np.ndarray
    final_scores: np.ndarray
    total: float

    @property
    def feasible(self) -> bool:
        return bool(np.isfinite(self.total))


class LatticeScore(NamedTuple):
    total: float
    tape: GradTape


def _scatter_logsumexp(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    """Log-sum-exp of ``values`` grouped by ``index``, accumulated in input order."""
    peak = np.full(size, -np.inf)
    np.maximum.at(peak, index, values)
    shift = np.where(np.isfinite(peak), peak, 0.0)
    acc = np.zeros(size)
    np.add.at(acc, index, np.exp(values - shift[index]))
    with np.errstate(divide="ignore"):
        return np.log(acc) + shift


def _frame_scores(values: np.ndarray) -> np.ndarray:
    """Appends the STAR column (log-sum over non-blank tokens) to each frame."""
    star = logsumexp(np.delete(values, BLANK, axis=1), axis=1)
    return np.concatenate([values, star[:, None]], axis=1)


def _final_scores(graph: Wfsa, arrays: _ArcArrays) -> np.ndarray:
    scores = np.full(graph.num_states, -np.inf)
    scores[list(graph.final_states)] = 0.0
    if arrays.final_src.size:
        via_marker = _scatter_logsumexp(
            arrays.final_weight, arrays.final_src, graph.num_states
        )
        scores = np.logaddexp(scores, via_marker)
    return scores


def intersect_dense(graph: Wfsa, emissions: Emissions) -> LatticeScore:
    """
    Scores every start-to-final path of ``graph`` that consumes exactly T
    frames of ``emissions`` and sums them in the log semiring.

    Args:
        graph (Wfsa): Label graph.
        emissions (Emissions): Per-frame log-probabilities.

    Returns:
        LatticeScore: Total log-score (``-inf`` when no path fits in T frames)
        and the tape for :func:`backward`.
    """
    values = emissions.values
    num_frames, vocab = values.shape
    arrays = graph._arrays

    if np.any(arrays.label >= vocab):
        raise ValueError(
            f"Graph uses token {int(arrays.label.max())} but emissions have V={vocab}."
        )

    columns = np.where(arrays.label == STAR, vocab, arrays.label)
    scores = _frame_scores(values)

    alpha = np.full((num_frames + 1, graph.num_states), -np.inf)
    alpha[0, graph.start_state] = 0.0
    for t in range(num_frames):
        candidates = alpha[t, arrays.src] + arrays.weight + scores[t, columns]
        alpha[t + 1] = _scatter_logsumexp(candidates, arrays.dst, graph.num_states)

    final_scores = _final_scores(graph, arrays)
    total = float(logsumexp(alpha[num_frames] + final_scores))

    tape = GradTape(
        values=values,
        scores=scores,
        columns=columns,
        arrays=arrays,
        alpha=alpha,
        final_scores=final_scores,
        total=total,
    )
    return LatticeScore(total, tape)


def backward(tape: GradTape) -> np.ndarray:
    """
    Differentiates the total log-score with respect to the emission values.

    Args:
        tape (GradTape): Tape from :func:`intersect_dense`.

    Returns:
        np.ndarray: T x V gradient; all zeros for an infeasible tape.
    """
    num_frames, vocab = tape.values.shape
    if not tape.feasible:
        logger.debug("Backward on an infeasible lattice; returning a zero gradient.")
        return np.zeros((num_frames, vocab))

    arrays = tape.arrays
    num_states = tape.alpha.shape[1]

    beta = np.full((num_frames + 1, num_states), -np.inf)
    beta[num_frames] = tape.final_scores
    for t in range(num_frames - 1, -1, -1):
        candidates = arrays.weight + tape.scores[t, tape.columns] + beta[t + 1, arrays.dst]
        beta[t] = _scatter_logsumexp(candidates, arrays.src, num_states)

    occupancy = np.exp(
        tape.alpha[:-1, arrays.src]
        + arrays.weight
        + tape.scores[:, tape.columns]
        + beta[1:, arrays.dst]
        - tape.total
    )

    column_grad = np.zeros((num_frames, vocab + 1))
    np.add.at(
        column_grad, (np.arange(num_frames)[:, None], tape.columns[None, :]), occupancy
    )

    grad = column_grad[:, :vocab].copy()
    if not np.any(tape.columns == vocab):
        return grad

    # A frame with no non-blank mass has STAR = -inf and no STAR occupancy.
    star = tape.scores[:, vocab : vocab + 1]
    non_blank = np.delete(np.arange(vocab), BLANK)
    with np.errstate(invalid="ignore"):
        star_share = np.exp(tape.values[:, non_blank] - star)
    star_share = np.where(np.isfinite(star), star_share, 0.0)
    grad[:, non_blank] += column_grad[:, vocab : vocab + 1] * star_share
    return grad


def _reachable(start: Iterable[int], edges: List[List[int]]) -> Set[int]:
    seen = set(start)
    queue = deque(seen)
    while queue:
        state = queue.popleft()
        for nxt in edges[state]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def trim(graph: Wfsa) -> Wfsa:
    """
    Keeps only the states and arcs lying on some start-to-final path.

    Raises:
        EmptyGraphError: No final state is reachable from the start state.
    """
    forward: List[List[int]] = [[] for _ in range(graph.num_states)]
    reverse: List[List[int]] = [[] for _ in range(graph.num_states)]
    for arc in graph.arcs:
        forward[arc.src].append(arc.dst)
        reverse[arc.dst].append(arc.src)

    keep = _reachable([graph.start_state], forward) & _reachable(graph.final_states, reverse)
    if graph.start_state not in keep:
        raise EmptyGraphError("Graph has no path from the start state to a final state.")

    renumber = {old: new for new, old in enumerate(sorted(keep))}
    arcs = tuple(
        Arc(renumber[a.src], renumber[a.dst], a.label, a.weight)
        for a in graph.arcs
        if a.src in keep and a.dst in keep
    )
    finals = frozenset(renumber[s] for s in graph.final_states if s in keep)
    return Wfsa(len(keep), renumber[graph.start_state], arcs, finals)
