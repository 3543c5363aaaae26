"""Cross-entropy and response-based distillation losses.

Both return ``(loss, dloss/dlogits)``; losses are computed in float64 and the
gradient is cast back to the logits' dtype.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument, InvalidLabel, ShapeError


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidLabel(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy."""
    logits = np.asarray(logits)
    labels = _check_labels(logits, labels)
    b = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return float(loss), grad.astype(logits.dtype, copy=False)


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Per-row KL(softmax(p/T) || softmax(q/T))."""
    lp = log_softmax(np.asarray(p_logits, dtype=np.float64) / temperature)
    lq = log_softmax(np.asarray(q_logits, dtype=np.float64) / temperature)
    return (np.exp(lp) * (lp - lq)).sum(axis=1)


def loss_distill(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    labels: np.ndarray,
    temperature: float,
    alpha: float,
) -> tuple[float, np.ndarray]:
    """alpha * CE(student, labels) + (1 - alpha) * T^2 * KL(teacher_T || student_T).

    The teacher is a constant; the KL term is averaged over the batch.
    """
    if temperature <= 0:
        raise InvalidArgument("temperature must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument("alpha must lie in [0, 1]")
    student_logits = np.asarray(student_logits)
    if np.shape(teacher_logits) != student_logits.shape:
        raise ShapeError("student and teacher logits differ in shape")
    ce, g_ce = loss_ce(student_logits, labels)
    b = student_logits.shape[0]
    t = float(temperature)
    kl = kl_divergence(teacher_logits, student_logits, t).mean()
    p_s = softmax(np.asarray(student_logits, dtype=np.float64) / t)
    p_t = softmax(np.asarray(teacher_logits, dtype=np.float64) / t)
    g_kl = (p_s - p_t) * (t / b)
    loss = alpha * ce + (1.0 - alpha) * t * t * kl
    grad = alpha * g_ce.astype(np.float64) + (1.0 - alpha) * g_kl
    return float(loss), grad.astype(student_logits.dtype, copy=False)
