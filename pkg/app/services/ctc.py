import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from app.utils.fst import (
    BLANK,
    FINAL_MARKER,
    Arc,
    Emissions,
    Wfsa,
    backward,
    intersect_dense,
    trim,
)

logger = logging.getLogger(__name__)

LabelSeq = Tuple[int, ...]


class LossResult(NamedTuple):
    """A scalar loss with its gradient w.r.t. the emission log-probabilities."""

    loss: float
    grad: np.ndarray
    skipped: bool = False


class CtcRecursion(NamedTuple):
    """Log-space forward/backward variables over the blank-extended label."""

    alpha: np.ndarray
    beta: np.ndarray
    log_prob: float
    extended: np.ndarray


def check_label(tokens: Sequence[int]) -> LabelSeq:
    """
    Validates a label sequence and returns it as a tuple.

    Raises:
        ValueError: A token is negative or equals the blank id.
    """
    label = tuple(int(t) for t in tokens)
    for token in label:
        if token == BLANK:
            raise ValueError("Labels cannot contain the blank token.")
        if token < 0:
            raise ValueError(f"Invalid token id {token}.")
    return label


def extend_with_blanks(tokens: Sequence[int]) -> List[int]:
    """Interleaves blanks: ``(a, b)`` becomes ``(∅, a, ∅, b, ∅)``."""
    extended = [BLANK]
    for token in tokens:
        extended.extend([token, BLANK])
    return extended


def min_frames(tokens: Sequence[int]) -> int:
    """Shortest emission length that can produce ``tokens``."""
    repeats = sum(1 for prev, cur in zip(tokens, tokens[1:]) if prev == cur)
    return len(tokens) + repeats


def label_graph(
    tokens: Sequence[int], skip_blocked: Optional[Sequence[bool]] = None
) -> Wfsa:
    """
    Builds the standard CTC label topology over ``tokens``.

    State ``s`` stands for position ``s`` of the blank-extended label; every
    arc entering ``s`` (self-loop included) carries that position's label.
    The super-final state is entered through final-marker arcs.

    Args:
        tokens (Sequence[int]): Label tokens, no blanks.
        skip_blocked (Optional[Sequence[bool]]): Per token, whether the
            blank between it and the previous token is mandatory. Defaults
            to "the previous token is identical".

    Returns:
        Wfsa: Trimmed label graph with final state ``2U + 1``.
    """
    if skip_blocked is None:
        skip_blocked = [i > 0 and tokens[i] == tokens[i - 1] for i in range(len(tokens))]

    extended = extend_with_blanks(tokens)
    size = len(extended)
    arcs: List[Arc] = []
    for s in range(size):
        arcs.append(Arc(s, s, extended[s], 0.0))
        if s + 1 < size:
            arcs.append(Arc(s, s + 1, extended[s + 1], 0.0))
        # Skip over a blank into the next token.
        if s + 2 < size and extended[s + 2] != BLANK and s > 0:
            if not skip_blocked[(s + 1) // 2]:
                arcs.append(Arc(s, s + 2, extended[s + 2], 0.0))

    final = size
    arcs.append(Arc(size - 1, final, FINAL_MARKER, 0.0))
    if size > 1:
        arcs.append(Arc(size - 2, final, FINAL_MARKER, 0.0))
    return trim(Wfsa(size + 1, 0, tuple(arcs), frozenset([final])))


def build_ctc_graph(label: Sequence[int]) -> Wfsa:
    """
    Builds the graph accepting exactly the frame paths that collapse to
    ``label``.
    """
    return label_graph(check_label(label))


def loss_from_graph(graph: Wfsa, emissions: Emissions) -> LossResult:
    """Negated lattice total of ``graph`` over ``emissions``, with gradient."""
    score = intersect_dense(graph, emissions)
    if not score.tape.feasible:
        logger.debug(
            "No path of %d frames through a %d-state graph; skipping.",
            emissions.num_frames,
            graph.num_states,
        )
        return LossResult(float("inf"), np.zeros_like(emissions.values), True)
    return LossResult(-score.total, -backward(score.tape))


def ctc_alpha_beta(label: Sequence[int], emissions: Emissions) -> CtcRecursion:
    """
    Runs the explicit CTC alpha/beta recursions in log space.

    Both variables include the emission of their own frame, so
    ``alpha[t] + beta[t] - logy[t]`` splices to ``log P(label | x)`` for
    every ``t``.
    """
    extended = np.array(extend_with_blanks(check_label(label)))
    values = emissions.values
    num_frames = values.shape[0]
    size = len(extended)
    logy = values[:, extended]

    skip = np.zeros(size, dtype=bool)
    for s in range(2, size):
        skip[s] = extended[s] != BLANK and extended[s] != extended[s - 2]

    alpha = np.full((num_frames, size), -np.inf)
    alpha[0, 0] = logy[0, 0]
    if size > 1:
        alpha[0, 1] = logy[0, 1]
    for t in range(1, num_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logy[t]

    beta = np.full((num_frames, size), -np.inf)
    beta[-1, -1] = logy[-1, -1]
    if size > 1:
        beta[-1, -2] = logy[-1, -2]
    for t in range(num_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + logy[t]

    log_prob = float(logsumexp(alpha[-1, max(size - 2, 0) :]))
    return CtcRecursion(alpha, beta, log_prob, extended)


def ctc_loss_recursion(label: Sequence[int], emissions: Emissions) -> LossResult:
    """CTC loss and gradient from the explicit alpha/beta recursion."""
    rec = ctc_alpha_beta(label, emissions)
    values = emissions.values
    if not np.isfinite(rec.log_prob):
        return LossResult(float("inf"), np.zeros_like(values), True)

    logy = values[:, rec.extended]
    with np.errstate(invalid="ignore"):
        occupancy = np.where(
            np.isfinite(logy), rec.alpha + rec.beta - logy - rec.log_prob, -np.inf
        )
    grad = np.zeros_like(values)
    np.add.at(
        grad,
        (np.arange(values.shape[0])[:, None], rec.extended[None, :]),
        np.exp(occupancy),
    )
    return LossResult(-rec.log_prob, -grad)


def ctc_loss(label: Sequence[int], emissions: Emissions, fast: bool = False) -> LossResult:
    """
    CTC loss ``-log P(label | x)`` and its gradient.

    Args:
        label (Sequence[int]): Target tokens.
        emissions (Emissions): Per-frame log-probabilities.
        fast (bool): Use the explicit recursion instead of the label graph.

    Returns:
        LossResult: ``skipped`` is set, with loss ``+inf``, when the label
        needs more frames than are available.
    """
    if fast:
        return ctc_loss_recursion(label, emissions)
    return loss_from_graph(build_ctc_graph(label), emissions)
