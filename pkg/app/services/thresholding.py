"""
Automatic confidence thresholds: an EMA of the mean confidence of incorrect
labeled-data tokens, rescaled by the unlabeled/labeled mean-confidence ratio.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from app.services.confidence import AlignmentVerdict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThresholdState:
    """
    EMA accumulators; ``None`` means the accumulator has not seen data yet.

    Attributes:
        t_e: Mean confidence of incorrect labeled-data tokens.
        t_l: Mean confidence of all labeled-data tokens.
        t_u: Mean confidence of all unlabeled-data tokens.
        decay: EMA decay, shared with the teacher model.
    """

    decay: float = 0.999
    t_e: Optional[float] = None
    t_l: Optional[float] = None
    t_u: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must be in [0, 1], got {self.decay}.")

    @property
    def ready(self) -> bool:
        return self.t_e is not None


def _ema(previous: Optional[float], value: float, decay: float) -> float:
    # The first observation initializes the accumulator directly.
    if previous is None:
        return value
    return (1.0 - decay) * value + decay * previous


def _flatten(confidences: Iterable[Sequence[float]]) -> np.ndarray:
    return np.array([c for conf in confidences for c in conf], dtype=np.float64)


def update_labeled(
    state: ThresholdState,
    batch_verdicts: Sequence[AlignmentVerdict],
    batch_confidences: Sequence[Sequence[float]],
) -> ThresholdState:
    """
    Folds one labeled batch into ``t_e`` and ``t_l``.

    A batch without incorrect tokens leaves ``t_e`` untouched; an empty
    batch leaves the whole state untouched.
    """
    confidences = _flatten(batch_confidences)
    if not confidences.size:
        return state
    incorrect = np.array([bad for v in batch_verdicts for bad in v.incorrect], dtype=bool)
    if incorrect.shape != confidences.shape:
        raise ValueError("Verdicts and confidences cover different tokens.")

    t_l = _ema(state.t_l, float(confidences.mean()), state.decay)
    t_e = state.t_e
    if incorrect.any():
        t_e = _ema(state.t_e, float(confidences[incorrect].mean()), state.decay)
    return replace(state, t_e=t_e, t_l=t_l)


def update_unlabeled(
    state: ThresholdState, batch_confidences: Sequence[Sequence[float]]
) -> ThresholdState:
    """Folds one unlabeled batch's mean token confidence into ``t_u``."""
    confidences = _flatten(batch_confidences)
    if not confidences.size:
        return state
    return replace(state, t_u=_ema(state.t_u, float(confidences.mean()), state.decay))


def current_threshold(state: ThresholdState, relative_correction: bool = True) -> Optional[float]:
    """
    Returns ``t_e``, or ``(t_u / t_l) * t_e`` with relative correction,
    clamped to [0, 1].

    Returns:
        Optional[float]: None while the needed accumulators are empty; the
        caller then treats every token as correct.
    """
    if state.t_e is None:
        return None
    threshold = state.t_e
    if relative_correction:
        if state.t_u is None or state.t_l is None or state.t_l <= 0.0:
            return None
        threshold = state.t_u / state.t_l * state.t_e
    if threshold > 1.0:
        logger.warning("Threshold %.4f clamped to 1.0.", threshold)
    return float(min(max(threshold, 0.0), 1.0))
