import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from app.services.confidence import greedy_decode
from app.services.ctc import LabelSeq, LossResult, check_label, ctc_loss
from app.services.model import Dropout, SequenceModel
from app.utils.fst import Emissions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    """
    Args:
        gamma (float): Weight of the subtracted noisy-decode term, in [0, 1).
        noise_strength (float): Dropout rate of the noisy decoding pass.
        augment_strength (float): Strength of the input augmentation.
    """

    gamma: float = 0.5
    noise_strength: float = 0.3
    augment_strength: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}.")
        if not 0.0 <= self.noise_strength < 1.0:
            raise ValueError(f"noise_strength must be in [0, 1), got {self.noise_strength}.")
        if not 0.0 <= self.augment_strength <= 1.0:
            raise ValueError(f"augment_strength must be in [0, 1], got {self.augment_strength}.")


def contrastive_ctc_loss(
    truth: Sequence[int],
    emissions_aug: Emissions,
    decoded: Sequence[int],
    cfg: ContrastiveConfig,
) -> LossResult:
    """
    ``ctc(truth) - gamma * ctc(decoded)``, both on the augmented emissions.

    When the noisy decode equals the truth this is exactly
    ``(1 - gamma) * ctc(truth)``. A decode that cannot fit in T frames
    drops the second term.
    """
    truth = check_label(truth)
    decoded = check_label(decoded)
    positive = ctc_loss(truth, emissions_aug)
    if positive.skipped:
        return positive

    if decoded == truth:
        scale = 1.0 - cfg.gamma
        return LossResult(scale * positive.loss, scale * positive.grad)

    negative = ctc_loss(decoded, emissions_aug)
    if negative.skipped:
        logger.warning(
            "Noisy decode of %d tokens does not fit %d frames; dropping its term.",
            len(decoded),
            emissions_aug.num_frames,
        )
        return positive
    return LossResult(
        positive.loss - cfg.gamma * negative.loss,
        positive.grad - cfg.gamma * negative.grad,
    )


def generate_noisy_decode(
    model: SequenceModel,
    features: np.ndarray,
    cfg: ContrastiveConfig,
    rng: np.random.Generator,
) -> LabelSeq:
    """Greedy decode of a forward pass with dropout at ``cfg.noise_strength``."""
    emissions = model.forward(features, Dropout(cfg.noise_strength, rng))
    return greedy_decode(emissions).tokens
