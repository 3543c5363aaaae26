"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from .core import Model, backward, forward_trace, param_specs
from .losses import loss_ce

# |grad| below this is compared in absolute terms, scaled by it
REL_FLOOR = 1e-7


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_kind: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    nudged: int = 0
    skipped: int = 0


def _masks_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(
    model: Model,
    batch: np.ndarray,
    epsilon: float = 1e-4,
    labels: np.ndarray | None = None,
    per_kind: int = 200,
    seed: int = 0,
    nudge: float = 1e-3,
) -> GradCheckReport:
    """Compare backprop against central differences on sampled parameters.

    Runs in float64 on a copy of ``model``. Up to ``per_kind`` parameters are
    sampled from each parameter kind (conv kernels, conv biases, dense
    weights, dense biases). When a +/- epsilon probe flips a ReLU the
    parameter is moved by +/- ``nudge`` and re-checked there; if both moves
    still straddle a kink the parameter is skipped.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise InvalidArgument("epsilon must lie in [1e-6, 1e-3]")
    m = model.astype(np.float64)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = rng.integers(0, m.config.classes, size=x.shape[0])

    def loss_and_masks():
        logits, trace = forward_trace(m, x)
        return loss_ce(logits, labels)[0], trace.relu_masks()

    def analytic():
        logits, trace = forward_trace(m, x)
        grads, _ = backward(m, trace, loss_ce(logits, labels)[1])
        return grads, trace.relu_masks()

    grads, base_masks = analytic()
    by_kind: dict[str, list[str]] = {}
    for spec in param_specs(m.config):
        by_kind.setdefault(spec.kind, []).append(spec.name)

    report = GradCheckReport(0.0)
    for kind, names in by_kind.items():
        sizes = np.array([m.params[n].size for n in names])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        picks = rng.choice(offsets[-1], size=min(per_kind, offsets[-1]), replace=False)
        worst = 0.0
        for flat in np.sort(picks):
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = names[j], int(flat - offsets[j])
            arr = m.params[name].reshape(-1)
            orig = arr[idx]
            err = None
            for shift in (0.0, nudge, -nudge):
                arr[idx] = orig + shift
                if shift == 0.0:
                    g, masks = grads, base_masks
                else:
                    g, masks = analytic()
                arr[idx] = orig + shift + epsilon
                lp, mp = loss_and_masks()
                arr[idx] = orig + shift - epsilon
                lm, mm = loss_and_masks()
                arr[idx] = orig
                if _masks_equal(mp, masks) and _masks_equal(mm, masks):
                    a = float(g[name].reshape(-1)[idx])
                    n = (lp - lm) / (2 * epsilon)
                    err = abs(a - n) / max(abs(a), abs(n), REL_FLOOR)
                    report.nudged += shift != 0.0
                    break
            if err is None:
                report.skipped += 1
                continue
            report.checked += 1
            worst = max(worst, err)
        report.per_kind[kind] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


def grad_check(model: Model, batch: np.ndarray, epsilon: float = 1e-4, **kwargs) -> float:
    """Maximum relative error between analytic and numeric gradients."""
    return grad_check_report(model, batch, epsilon, **kwargs).max_rel_error
