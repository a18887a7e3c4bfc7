"""
Alternative temporal classification: CTC label graphs in which tokens
flagged as incorrect accept a STAR alternative (any non-blank token).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from app.services.ctc import LossResult, check_label, label_graph, loss_from_graph
from app.utils.fst import STAR, Arc, EmptyGraphError, Emissions, Wfsa, trim

logger = logging.getLogger(__name__)


class AtcVariant(str, Enum):
    REPLACE = "R"
    ADD = "A"
    # Scale factor 0: masked arcs are removed with no STAR substitute.
    DELETE = "D"


@dataclass(frozen=True)
class MaskedLabel:
    """A pseudo-label and the positions detected as incorrect."""

    tokens: Tuple[int, ...]
    incorrect_mask: Tuple[bool, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", check_label(self.tokens))
        object.__setattr__(self, "incorrect_mask", tuple(bool(m) for m in self.incorrect_mask))
        if len(self.tokens) != len(self.incorrect_mask):
            raise ValueError(
                f"Mask length {len(self.incorrect_mask)} does not match "
                f"{len(self.tokens)} tokens."
            )

    @classmethod
    def unmasked(cls, tokens: Sequence[int]) -> "MaskedLabel":
        return cls(tuple(tokens), (False,) * len(tokens))

    @property
    def num_masked(self) -> int:
        return sum(self.incorrect_mask)


@dataclass(frozen=True)
class AtcConfig:
    """
    Args:
        variant (AtcVariant): Replace (R), add (A) or delete (D) arcs.
        eta (float): Scale factor on STAR arcs, in (0, 1].
        psi (float): STAR share of the add variant, in (0, 1).
        distrust_masked_repeats (bool): Allow the skip transition between
            identical neighbours when either of them is masked.
    """

    variant: AtcVariant = AtcVariant.REPLACE
    eta: float = 0.3
    psi: float = 0.5
    distrust_masked_repeats: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", AtcVariant(self.variant))
        if self.variant is not AtcVariant.DELETE and not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}.")
        if not 0.0 < self.psi < 1.0:
            raise ValueError(f"psi must be in (0, 1), got {self.psi}.")


def _skip_blocked(masked: MaskedLabel, cfg: AtcConfig) -> List[bool]:
    tokens, mask = masked.tokens, masked.incorrect_mask
    blocked = []
    for i, token in enumerate(tokens):
        repeat = i > 0 and tokens[i - 1] == token
        if cfg.distrust_masked_repeats and repeat and (mask[i] or mask[i - 1]):
            repeat = False
        blocked.append(repeat)
    return blocked


def build_atc_graph(masked: MaskedLabel, cfg: AtcConfig) -> Wfsa:
    """
    Rewrites the CTC topology of ``masked.tokens`` at the masked positions.

    Every arc entering the state of a masked token (its self-loop included)
    is turned into a STAR arc weighted ``log(eta)`` for the replace variant;
    the add variant keeps it with weight ``log(eta * (1 - psi))`` and puts a
    parallel STAR arc weighted ``log(eta * psi)`` right after it.

    Raises:
        EmptyGraphError: Delete variant with at least one masked token.
    """
    base = label_graph(masked.tokens, _skip_blocked(masked, cfg))
    if not masked.num_masked:
        return base

    # Token i lives at state 2i + 1 of the topology.
    masked_states = {2 * i + 1 for i, m in enumerate(masked.incorrect_mask) if m}
    arcs: List[Arc] = []
    for arc in base.arcs:
        if arc.dst not in masked_states or arc.label < 0:
            arcs.append(arc)
        elif cfg.variant is AtcVariant.REPLACE:
            arcs.append(arc._replace(label=STAR, weight=arc.weight + math.log(cfg.eta)))
        elif cfg.variant is AtcVariant.ADD:
            keep = math.log(cfg.eta * (1.0 - cfg.psi))
            star = math.log(cfg.eta * cfg.psi)
            arcs.append(arc._replace(weight=arc.weight + keep))
            arcs.append(arc._replace(label=STAR, weight=arc.weight + star))
    return trim(Wfsa(base.num_states, base.start_state, tuple(arcs), base.final_states))


def atc_loss(masked: MaskedLabel, emissions: Emissions, cfg: AtcConfig) -> LossResult:
    """
    ATC loss: the negated total score of the ATC graph over ``emissions``.

    Returns:
        LossResult: Skipped (``+inf``, zero gradient) when no path fits.
    """
    try:
        graph = build_atc_graph(masked, cfg)
    except EmptyGraphError:
        logger.debug("All paths removed for %d masked tokens; skipping.", masked.num_masked)
        return LossResult(float("inf"), np.zeros_like(emissions.values), True)
    return loss_from_graph(graph, emissions)
