import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import average_precision_score

from app.services.atc import MaskedLabel
from app.utils.fst import BLANK, Emissions

logger = logging.getLogger(__name__)

CONFIDENCE_MODES = ("average", "max")


@dataclass(frozen=True)
class PseudoLabel:
    """
    A greedy decode with one confidence per token.

    ``frame_spans[i]`` is the half-open ``(start, end)`` frame range of the
    run of identical argmax frames that produced ``tokens[i]``.
    """

    tokens: Tuple[int, ...]
    confidences: Tuple[float, ...]
    frame_spans: Tuple[Tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not len(self.tokens) == len(self.confidences) == len(self.frame_spans):
            raise ValueError("Tokens, confidences and spans must have equal length.")
        if any(not 0.0 <= c <= 1.0 for c in self.confidences):
            raise ValueError("Confidences must lie in [0, 1].")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def mean_confidence(self) -> Optional[float]:
        return float(np.mean(self.confidences)) if self.confidences else None


@dataclass(frozen=True)
class AlignmentVerdict:
    """Per predicted token correctness against a reference."""

    correct: Tuple[bool, ...]
    hits: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def incorrect(self) -> Tuple[bool, ...]:
        return tuple(not c for c in self.correct)


def greedy_decode(emissions: Emissions, mode: str = "average") -> PseudoLabel:
    """
    Decodes by per-frame argmax, merging repeated frames and dropping blanks.

    Args:
        emissions (Emissions): Per-frame log-probabilities.
        mode (str): "average" or "max" of the argmax probabilities over a
            token's run.

    Returns:
        PseudoLabel: Tokens with confidences and frame spans.
    """
    if mode not in CONFIDENCE_MODES:
        raise ValueError(f"Unknown confidence mode {mode!r}.")

    best = emissions.values.argmax(axis=1)
    best_prob = np.exp(emissions.values.max(axis=1))
    reduce = np.mean if mode == "average" else np.max

    tokens: List[int] = []
    confidences: List[float] = []
    spans: List[Tuple[int, int]] = []
    start = 0
    for t in range(1, len(best) + 1):
        if t < len(best) and best[t] == best[start]:
            continue
        if best[start] != BLANK:
            tokens.append(int(best[start]))
            confidences.append(float(np.clip(reduce(best_prob[start:t]), 0.0, 1.0)))
            spans.append((start, t))
        start = t
    return PseudoLabel(tuple(tokens), tuple(confidences), tuple(spans))


def _edit_table(predicted: Sequence[int], reference: Sequence[int]) -> np.ndarray:
    table = np.zeros((len(predicted) + 1, len(reference) + 1), dtype=np.int64)
    table[:, 0] = np.arange(len(predicted) + 1)
    table[0, :] = np.arange(len(reference) + 1)
    for i in range(1, len(predicted) + 1):
        for j in range(1, len(reference) + 1):
            diagonal = table[i - 1, j - 1] + (predicted[i - 1] != reference[j - 1])
            table[i, j] = min(diagonal, table[i - 1, j] + 1, table[i, j - 1] + 1)
    return table


def _tokens_of(predicted: Union[PseudoLabel, Sequence[int]]) -> Tuple[int, ...]:
    if isinstance(predicted, PseudoLabel):
        return predicted.tokens
    return tuple(int(t) for t in predicted)


def align_verdict(
    predicted: Union[PseudoLabel, Sequence[int]], reference: Sequence[int]
) -> AlignmentVerdict:
    """
    Aligns a prediction to its reference with unit-cost Levenshtein edits.

    Matched tokens are correct; substituted and inserted tokens are
    incorrect. Ties in the backtrace prefer match, then substitution, then
    insertion, then deletion.
    """
    pred = _tokens_of(predicted)
    ref = tuple(int(t) for t in reference)
    table = _edit_table(pred, ref)

    correct = [False] * len(pred)
    hits = subs = ins = dels = 0
    i, j = len(pred), len(ref)
    while i > 0 or j > 0:
        here = table[i, j]
        if i > 0 and j > 0 and pred[i - 1] == ref[j - 1] and table[i - 1, j - 1] == here:
            correct[i - 1] = True
            hits += 1
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and table[i - 1, j - 1] + 1 == here:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and table[i - 1, j] + 1 == here:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return AlignmentVerdict(tuple(correct), hits, subs, ins, dels)


def detect_errors(predicted: PseudoLabel, threshold: float) -> MaskedLabel:
    """
    Flags tokens whose confidence falls below ``threshold``.

    A threshold of 0 flags nothing; any threshold above 1 flags everything.
    """
    if not threshold >= 0.0:
        raise ValueError(f"Threshold must be non-negative, got {threshold}.")
    return MaskedLabel(predicted.tokens, tuple(c < threshold for c in predicted.confidences))


def pr_auc(
    verdicts: Sequence[AlignmentVerdict], confidences: Sequence[Sequence[float]]
) -> Optional[float]:
    """
    Error-detection quality as average precision, with incorrect tokens as
    positives scored by ``1 - confidence``.

    Returns:
        Optional[float]: The AUC, or None when no token is incorrect.
    """
    labels: List[bool] = []
    scores: List[float] = []
    for verdict, conf in zip(verdicts, confidences, strict=True):
        if len(verdict.correct) != len(conf):
            raise ValueError("Each verdict needs one confidence per predicted token.")
        labels.extend(verdict.incorrect)
        scores.extend(1.0 - c for c in conf)

    if not any(labels):
        logger.debug("No incorrect tokens among %d; AUC is undefined.", len(labels))
        return None
    return float(average_precision_score(np.array(labels), np.array(scores)))


def token_error_rate(predicted: Sequence[int], reference: Sequence[int]) -> float:
    """
    Edit operations per reference token.

    An empty reference yields the number of predicted tokens (0 for an
    empty prediction) and logs a warning when that is non-zero.
    """
    pred = _tokens_of(predicted)
    ref = tuple(int(t) for t in reference)
    distance = int(_edit_table(pred, ref)[-1, -1])
    if not ref:
        if pred:
            logger.warning("Empty reference scored against %d predicted tokens.", len(pred))
        return float(len(pred))
    return distance / len(ref)


def corpus_error_rate(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]]) -> float:
    """Total edits over total reference tokens for ``(predicted, reference)`` pairs."""
    edits = total = 0
    for predicted, reference in pairs:
        edits += int(_edit_table(_tokens_of(predicted), tuple(reference))[-1, -1])
        total += len(reference)
    return edits / total if total else 0.0
