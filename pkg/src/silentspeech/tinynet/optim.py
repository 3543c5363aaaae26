"""Adam and the single training step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, DivergenceError
from .core import Model, backward, forward_trace
from .losses import loss_ce, loss_distill


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    alpha: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    distill: DistillConfig | None = None
    schedule: str = "constant"  # or "cosine": decays to 0 over all steps
    weight_decay: float = 0.0  # decoupled, applied to weights only (not biases)

    def validate(self) -> "TrainConfig":
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.distill is not None:
            if self.distill.temperature <= 0:
                raise ConfigError("distillation temperature must be positive")
            if not 0 <= self.distill.alpha <= 1:
                raise ConfigError("distillation alpha must lie in [0, 1]")
        return self

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(model: Model, grads: dict[str, np.ndarray], cfg: TrainConfig, state: AdamState) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.lr == 0:
            continue
        step = (cfg.lr / c1) * m / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and name.endswith(".w"):
            step = step + cfg.lr * cfg.weight_decay * model.params[name]
        model.params[name] -= step.astype(model.dtype, copy=False)


def train_step(
    model: Model,
    batch: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    state: AdamState,
    teacher_logits: np.ndarray | None = None,
) -> tuple[float, AdamState]:
    """One forward/backward/Adam update; mutates ``model`` in place."""
    logits, trace = forward_trace(model, batch)
    if cfg.distill is not None:
        if teacher_logits is None:
            raise ConfigError("distillation step needs teacher logits")
        loss, dlogits = loss_distill(
            logits, teacher_logits, labels, cfg.distill.temperature, cfg.distill.alpha
        )
    else:
        loss, dlogits = loss_ce(logits, labels)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}", step=state.t)
    grads, _ = backward(model, trace, dlogits)
    adam_update(model, grads, cfg, state)
    return loss, state


def minibatches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]
