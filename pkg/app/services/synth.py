"""
Synthetic labeled/unlabeled corpora: each token is rendered as a run of
noisy copies of its prototype vector, separated by silence frames.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from app.utils.file import read_json, write_json

logger = logging.getLogger(__name__)

SPLITS = ("labeled", "unlabeled", "labeled_dev", "dev", "test")
# Splits drawn from the unlabeled (possibly shifted) domain.
TARGET_SPLITS = frozenset({"unlabeled", "dev", "test"})

MANIFEST = "manifest.tsv"
MANIFEST_VERSION = "apl-corpus-v1"
FEATURE_DTYPE = "<f8"


@dataclass(frozen=True)
class CorpusSpec:
    """
    Args:
        vocab_size (int): Output classes including the blank (id 0).
        label_length (Tuple[int, int]): Inclusive range of tokens per label.
        frames_per_token (Tuple[int, int]): Inclusive range of frames per token.
        feature_dim (int): Feature width F.
        noise (float): Gaussian feature noise sigma.
        shift (float): Norm of the mean offset applied to target-domain splits.
        noise_inflation (float): Relative sigma increase on target-domain splits.
        sizes (Dict[str, int]): Utterances per split.
        seed (int): Master seed; every utterance derives its own stream.
    """

    vocab_size: int = 8
    label_length: Tuple[int, int] = (3, 8)
    frames_per_token: Tuple[int, int] = (2, 4)
    feature_dim: int = 16
    noise: float = 1.5
    shift: float = 0.0
    noise_inflation: float = 0.0
    sizes: Dict[str, int] = field(
        default_factory=lambda: {
            "labeled": 64,
            "unlabeled": 256,
            "labeled_dev": 64,
            "dev": 64,
            "test": 64,
        }
    )
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "label_length", tuple(self.label_length))
        object.__setattr__(self, "frames_per_token", tuple(self.frames_per_token))
        if self.vocab_size < 2:
            raise ValueError("Need at least one token besides the blank.")
        lo, hi = self.label_length
        if not 0 <= lo <= hi:
            raise ValueError(f"Bad label length range {self.label_length}.")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ValueError(f"Bad frames-per-token range {self.frames_per_token}.")
        if self.noise < 0.0 or self.shift < 0.0 or self.noise_inflation < 0.0:
            raise ValueError("Noise, shift and inflation must be non-negative.")
        unknown = set(self.sizes) - set(SPLITS)
        if unknown:
            raise ValueError(f"Unknown corpus splits: {sorted(unknown)}.")

    def size(self, split: str) -> int:
        return int(self.sizes.get(split, 0))


@dataclass
class Utterance:
    uid: str
    features: np.ndarray
    label: Tuple[int, ...]

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: Dict[str, List[Utterance]]

    def __getitem__(self, split: str) -> List[Utterance]:
        return self.splits.get(split, [])


@dataclass(frozen=True)
class AugmentConfig:
    """SpecAugment-style masking rates and additive noise at strength 1."""

    time_mask_prob: float = 0.05
    time_mask_len: int = 3
    channel_mask_prob: float = 0.1
    noise_std: float = 0.3

    def __post_init__(self) -> None:
        if not (0 <= self.time_mask_prob <= 1 and 0 <= self.channel_mask_prob <= 1):
            raise ValueError("Mask probabilities must be in [0, 1].")
        if self.time_mask_len < 1 or self.noise_std < 0:
            raise ValueError("Mask length must be >= 1 and noise non-negative.")


def prototypes(spec: CorpusSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns the per-class prototype matrix (row 0 is silence) and the unit
    direction of the domain shift.
    """
    rng = np.random.default_rng([spec.seed, len(SPLITS)])
    protos = rng.normal(0.0, 1.0, (spec.vocab_size, spec.feature_dim))
    direction = rng.normal(0.0, 1.0, spec.feature_dim)
    return protos, direction / np.linalg.norm(direction)


def _frame_classes(label: np.ndarray, spec: CorpusSpec, rng: np.random.Generator) -> List[int]:
    lo, hi = spec.frames_per_token
    classes = [0] * int(rng.integers(1, 3))
    for i, token in enumerate(label):
        classes.extend([int(token)] * int(rng.integers(lo, hi + 1)))
        if i + 1 < len(label):
            # Repeated tokens need a separating blank to survive the collapse.
            gap = 1 if label[i + 1] == token else int(rng.integers(0, 2))
            classes.extend([0] * gap)
    classes.extend([0] * int(rng.integers(1, 3)))
    return classes


def _render(
    spec: CorpusSpec, split: str, index: int, protos: np.ndarray, direction: np.ndarray
) -> Utterance:
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), index])
    lo, hi = spec.label_length
    length = int(rng.integers(lo, hi + 1))
    label = rng.integers(1, spec.vocab_size, size=length)
    classes = _frame_classes(label, spec, rng)

    sigma = spec.noise
    offset = np.zeros(spec.feature_dim)
    if split in TARGET_SPLITS:
        sigma *= 1.0 + spec.noise_inflation
        offset = spec.shift * direction

    features = protos[classes] + offset + rng.normal(0.0, sigma, (len(classes), spec.feature_dim))
    return Utterance(f"{split}-{index:05d}", features, tuple(int(t) for t in label))


def generate(spec: CorpusSpec) -> Corpus:
    """Renders every split of ``spec``; the same spec always yields the same corpus."""
    protos, direction = prototypes(spec)
    splits = {
        split: [_render(spec, split, i, protos, direction) for i in range(spec.size(split))]
        for split in SPLITS
    }
    logger.debug(
        "Generated corpus: %s", ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    )
    return Corpus(spec, splits)


def augment(
    features: np.ndarray,
    strength: float,
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """
    Adds noise, then zeroes random time spans and feature channels.

    Args:
        features (np.ndarray): T x F features.
        strength (float): Scales every rate in ``cfg``; 0 returns a copy.
        rng (np.random.Generator): Randomness source.
        cfg (AugmentConfig): Rates at strength 1.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"Augmentation strength must be in [0, 1], got {strength}.")
    out = np.array(features, dtype=np.float64)
    if strength == 0.0:
        return out

    frames, width = out.shape
    out += rng.normal(0.0, strength * cfg.noise_std, out.shape)
    starts = np.flatnonzero(rng.random(frames) < strength * cfg.time_mask_prob)
    time_mask = np.zeros(frames, dtype=bool)
    for start in starts:
        time_mask[start : start + cfg.time_mask_len] = True
    channel_mask = rng.random(width) < strength * cfg.channel_mask_prob
    out[time_mask] = 0.0
    out[:, channel_mask] = 0.0
    return out


def save_corpus(corpus: Corpus, folder: Union[str, Path]) -> Path:
    """
    Writes ``manifest.tsv``, ``spec.json`` and one flat little-endian
    float64 file per utterance under ``folder``.
    """
    folder = Path(folder)
    (folder / "features").mkdir(parents=True, exist_ok=True)
    write_json(folder / "spec.json", asdict(corpus.spec))

    lines = [
        f"# {MANIFEST_VERSION} feature_dim={corpus.spec.feature_dim} dtype={FEATURE_DTYPE}",
        "split\tuid\tpath\tframes\tlabel",
    ]
    for split in SPLITS:
        for utt in corpus[split]:
            rel = f"features/{utt.uid}.f64"
            utt.features.astype(FEATURE_DTYPE).tofile(folder / rel)
            label = " ".join(str(t) for t in utt.label)
            lines.append(f"{split}\t{utt.uid}\t{rel}\t{utt.num_frames}\t{label}")
    with open(folder / MANIFEST, "w") as f:
        f.write("\n".join(lines) + "\n")
    return folder


def load_corpus(folder: Union[str, Path]) -> Corpus:
    """
    Reads a corpus written by :func:`save_corpus`.

    Raises:
        FileNotFoundError: Manifest or a feature file is missing.
        ValueError: The manifest header or a record is malformed.
    """
    folder = Path(folder)
    spec_fields = read_json(folder / "spec.json")
    spec = CorpusSpec(**spec_fields)

    with open(folder / MANIFEST) as f:
        header, columns, *records = f.read().splitlines()
    meta = dict(item.split("=", 1) for item in header.lstrip("# ").split()[1:])
    if not header.startswith(f"# {MANIFEST_VERSION}") or meta.get("dtype") != FEATURE_DTYPE:
        raise ValueError(f"Unsupported corpus manifest header: {header!r}")
    width = int(meta["feature_dim"])

    splits: Dict[str, List[Utterance]] = {split: [] for split in SPLITS}
    for record in records:
        split, uid, rel, frames, label = record.split("\t")
        values = np.fromfile(folder / rel, dtype=FEATURE_DTYPE)
        if values.size != int(frames) * width:
            raise ValueError(f"{rel} holds {values.size} values, expected {frames}x{width}.")
        tokens = tuple(int(t) for t in label.split())
        splits[split].append(Utterance(uid, values.reshape(int(frames), width), tokens))
    return Corpus(spec, splits)


def load_spec(path: Union[str, Path]) -> CorpusSpec:
    """Reads a corpus spec from a JSON file; absent fields keep their defaults."""
    return CorpusSpec(**read_json(path))


def with_noise(spec: CorpusSpec, noise: float) -> CorpusSpec:
    return replace(spec, noise=noise)
