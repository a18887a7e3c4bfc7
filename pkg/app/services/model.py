"""
A small frame classifier with hand-written reverse-mode gradients:
input projection, residual depthwise temporal convolutions, output
projection and log-softmax. Plus momentum SGD, the EMA teacher and
checkpointing.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from app.utils.fst import Emissions

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAX_PARAMETERS = 100_000

Params = Dict[str, np.ndarray]


class TrainingDivergedError(RuntimeError):
    """Raised when parameters or losses stop being finite."""


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    vocab_size: int = 8
    hidden: int = 48
    layers: int = 2
    window: int = 5
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"Convolution window must be odd, got {self.window}.")
        if self.layers < 1:
            raise ValueError("The model needs at least one mixing layer.")
        if self.vocab_size < 2 or self.feature_dim < 1 or self.hidden < 1:
            raise ValueError("Model dimensions must be positive (vocab >= 2).")


@dataclass
class Dropout:
    """Inverted Bernoulli dropout on hidden activations, driven by ``rng``."""

    rate: float
    rng: np.random.Generator

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {self.rate}.")

    def mask(self, shape: Tuple[int, ...]) -> Optional[np.ndarray]:
        if self.rate == 0.0:
            return None
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


class ForwardCache(NamedTuple):
    features: np.ndarray
    hidden: List[np.ndarray]
    activations: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    log_probs: np.ndarray


def _apply(mask: Optional[np.ndarray], values: np.ndarray) -> np.ndarray:
    return values if mask is None else values * mask


def _conv(h: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    pad = kernel.shape[0] // 2
    padded = np.pad(h, ((pad, pad), (0, 0)))
    frames = h.shape[0]
    return sum(kernel[k] * padded[k : k + frames] for k in range(kernel.shape[0]))


def _conv_backward(
    h: np.ndarray, kernel: np.ndarray, grad: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    pad = kernel.shape[0] // 2
    padded = np.pad(h, ((pad, pad), (0, 0)))
    frames = h.shape[0]
    grad_kernel = np.empty_like(kernel)
    grad_padded = np.zeros_like(padded)
    for k in range(kernel.shape[0]):
        grad_kernel[k] = (grad * padded[k : k + frames]).sum(axis=0)
        grad_padded[k : k + frames] += kernel[k] * grad
    return grad_kernel, grad_padded[pad : pad + frames]


class SequenceModel:
    """
    Maps a T x F feature sequence to T x V normalized log-probabilities.

    Args:
        config (ModelConfig): Layer sizes.
        params (Params): Parameter tensors keyed by name.
    """

    def __init__(self, config: ModelConfig, params: Params):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "SequenceModel":
        f, h, v, w = config.feature_dim, config.hidden, config.vocab_size, config.window
        scale = config.init_scale
        params: Params = {
            "input.weight": rng.normal(0.0, scale / np.sqrt(f), (f, h)),
            "input.bias": np.zeros(h),
        }
        for layer in range(config.layers):
            params[f"mix{layer}.kernel"] = rng.normal(0.0, 0.5 * scale / np.sqrt(w), (w, h))
            params[f"mix{layer}.bias"] = np.zeros(h)
        params["output.weight"] = rng.normal(0.0, scale / np.sqrt(h), (h, v))
        params["output.bias"] = np.zeros(v)

        model = cls(config, params)
        if model.parameter_count > MAX_PARAMETERS:
            logger.warning("Model has %d parameters (> %d).", model.parameter_count, MAX_PARAMETERS)
        return model

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SequenceModel":
        return SequenceModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def _check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.isfinite(value).all():
                raise TrainingDivergedError(f"Parameter {name} is not finite.")

    def forward_with_cache(
        self, features: np.ndarray, dropout: Optional[Dropout] = None
    ) -> Tuple[Emissions, ForwardCache]:
        """
        Runs the model and keeps what :meth:`backward` needs.

        Raises:
            ValueError: Feature width does not match the config.
            TrainingDivergedError: A parameter is NaN or infinite.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"Expected T x {self.config.feature_dim} features, got {features.shape}."
            )
        self._check_finite()
        p = self.params

        h = np.tanh(features @ p["input.weight"] + p["input.bias"])
        mask = dropout.mask(h.shape) if dropout else None
        hidden, activations, masks = [h], [], [mask]
        h = _apply(mask, h)

        for layer in range(self.config.layers):
            act = np.tanh(_conv(h, p[f"mix{layer}.kernel"]) + p[f"mix{layer}.bias"])
            out = h + act
            mask = dropout.mask(out.shape) if dropout else None
            hidden.append(h)
            activations.append(act)
            masks.append(mask)
            h = _apply(mask, out)

        hidden.append(h)
        log_probs = log_softmax(h @ p["output.weight"] + p["output.bias"], axis=1)
        cache = ForwardCache(features, hidden, activations, masks, log_probs)
        return Emissions(log_probs), cache

    def forward(self, features: np.ndarray, dropout: Optional[Dropout] = None) -> Emissions:
        return self.forward_with_cache(features, dropout)[0]

    def backward(self, cache: ForwardCache, grad_log_probs: np.ndarray) -> Params:
        """
        Back-propagates a gradient w.r.t. the output log-probabilities.

        Returns:
            Params: Gradients keyed like ``self.params``.
        """
        p = self.params
        grads: Params = {}
        probs = np.exp(cache.log_probs)
        grad_logits = grad_log_probs - probs * grad_log_probs.sum(axis=1, keepdims=True)

        top = cache.hidden[-1]
        grads["output.weight"] = top.T @ grad_logits
        grads["output.bias"] = grad_logits.sum(axis=0)
        grad_h = grad_logits @ p["output.weight"].T

        for layer in reversed(range(self.config.layers)):
            grad_out = _apply(cache.masks[layer + 1], grad_h)
            act = cache.activations[layer]
            grad_pre = grad_out * (1.0 - act**2)
            grad_kernel, grad_input = _conv_backward(
                cache.hidden[layer + 1], p[f"mix{layer}.kernel"], grad_pre
            )
            grads[f"mix{layer}.kernel"] = grad_kernel
            grads[f"mix{layer}.bias"] = grad_pre.sum(axis=0)
            grad_h = grad_out + grad_input

        first = cache.hidden[0]
        grad_pre = _apply(cache.masks[0], grad_h) * (1.0 - first**2)
        grads["input.weight"] = cache.features.T @ grad_pre
        grads["input.bias"] = grad_pre.sum(axis=0)
        return grads


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0

    def __post_init__(self) -> None:
        if self.lr < 0.0 or not 0.0 <= self.momentum < 1.0 or self.clip_norm <= 0.0:
            raise ValueError(f"Invalid optimizer settings: {self}.")


@dataclass
class TrainState:
    """Student, EMA teacher, momentum buffers and the update counter."""

    student: SequenceModel
    teacher: SequenceModel
    optimizer: OptimizerConfig
    ema_decay: float = 0.999
    step: int = 0
    velocity: Params = field(default_factory=dict)

    @classmethod
    def create(
        cls, student: SequenceModel, optimizer: OptimizerConfig, ema_decay: float = 0.999
    ) -> "TrainState":
        velocity = {k: np.zeros_like(v) for k, v in student.params.items()}
        return cls(student, student.copy(), optimizer, ema_decay, 0, velocity)


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_gradients(grads: Params, bound: float) -> Params:
    """Rescales ``grads`` so their global L2 norm is at most ``bound``."""
    norm = global_norm(grads)
    if norm <= bound:
        return grads
    scale = bound / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(state: TrainState, grads: Params) -> TrainState:
    """
    Applies one clipped momentum-SGD update to the student in place.

    Args:
        state (TrainState): Training state, owned by the caller.
        grads (Params): Gradients shaped like the student parameters.

    Returns:
        TrainState: ``state`` with the step counter incremented.
    """
    params = state.student.params
    if grads.keys() != params.keys():
        raise ValueError("Gradient names do not match the model parameters.")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ValueError(f"Gradient {name} has shape {grad.shape}, want {params[name].shape}.")

    cfg = state.optimizer
    grads = clip_gradients(grads, cfg.clip_norm)
    for name, grad in grads.items():
        velocity = cfg.momentum * state.velocity[name] + grad
        state.velocity[name] = velocity
        params[name] = params[name] - cfg.lr * velocity
    state.step += 1
    return state


def ema_update(state: TrainState) -> TrainState:
    """Moves every teacher tensor towards the student: ``λ·teacher + (1-λ)·student``."""
    decay = state.ema_decay
    for name, value in state.student.params.items():
        state.teacher.params[name] = decay * state.teacher.params[name] + (1.0 - decay) * value
    return state


def save_checkpoint(
    path: Union[str, Path], state: TrainState, rng: Optional[np.random.Generator] = None
) -> None:
    """Writes the full training state (and optionally an RNG) to an ``.npz`` file."""
    arrays: Dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "model_config": np.array(json.dumps(asdict(state.student.config))),
        "optimizer": np.array(json.dumps(asdict(state.optimizer))),
        "ema_decay": np.array(state.ema_decay),
        "step": np.array(state.step),
        "rng_state": np.array(json.dumps(rng.bit_generator.state) if rng else ""),
    }
    for prefix, tensors in (
        ("student", state.student.params),
        ("teacher", state.teacher.params),
        ("velocity", state.velocity),
    ):
        for name, value in tensors.items():
            arrays[f"{prefix}/{name}"] = value

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: Union[str, Path]) -> Tuple[TrainState, Optional[np.random.Generator]]:
    """
    Restores a checkpoint written by :func:`save_checkpoint`.

    Returns:
        Tuple[TrainState, Optional[np.random.Generator]]: The state and the
        saved generator, if one was stored.
    """
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {version}.")
        config = ModelConfig(**json.loads(str(data["model_config"])))
        optimizer = OptimizerConfig(**json.loads(str(data["optimizer"])))

        groups: Dict[str, Params] = {"student": {}, "teacher": {}, "velocity": {}}
        for key in data.files:
            prefix, _, name = key.partition("/")
            if prefix in groups:
                groups[prefix][name] = data[key].copy()

        state = TrainState(
            student=SequenceModel(config, groups["student"]),
            teacher=SequenceModel(config, groups["teacher"]),
            optimizer=optimizer,
            ema_decay=float(data["ema_decay"]),
            step=int(data["step"]),
            velocity=groups["velocity"],
        )
        rng_state = str(data["rng_state"])

    rng = None
    if rng_state:
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(rng_state)
    return state, rng
