"""Emotion decoding from 5 s carotid-pulse windows.

Preprocessing removes the mean, z-scores and takes the magnitude of a
256-point radix-2 FFT (129 bins at 50/256 Hz). Three classifier kinds share
one interface: a small 1D CNN, an MLP and closed-form LDA. LDA is stored as
a hidden-layer-free tinynet MLP, so every kind persists as an ``.itnn``
checkpoint and supports input gradients.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import sigcore
from .errors import InsufficientData, InvalidArgument, ShapeError, UnsupportedModel
from .sigcore import EMOTIONS, PulseWindow
from .tinynet import ArchConfig, Model, TrainConfig, build_model, forward, input_gradient, softmax
from .tinynet.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FFT_LEN = 256
BINS = FFT_LEN // 2 + 1
WINDOW_LEN = int(round(sigcore.PULSE_WINDOW_S * sigcore.PULSE_RATE_HZ))
BIN_HZ = sigcore.PULSE_RATE_HZ / FFT_LEN
SIGMA_FLOOR = 1e-9
KINDS = ("cnn1d", "mlp", "lda")
MIN_PER_CLASS = 10
WEIGHT_DECAY = 0.0


# ---------------------------------------------------------------------------
# FFT


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x, n: int | None = None) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    ``n`` is the padded length (a power of two no shorter than the input);
    by default the input length itself, which must then be a power of two.
    """
    x = np.asarray(x, dtype=np.complex128)
    m = x.shape[-1]
    n = m if n is None else int(n)
    if n < 1 or n & (n - 1):
        raise InvalidArgument(f"FFT length {n} is not a power of two")
    if n < m:
        raise InvalidArgument(f"FFT length {n} is shorter than the input ({m})")
    if n > m:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n - m)]
        x = np.pad(x, pad)
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return a


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class SpectrumVector:
    magnitudes: np.ndarray
    bin_hz: float = BIN_HZ
    flagged: bool = False  # degenerate (near-constant) window

    def __post_init__(self):
        if np.any(self.magnitudes < 0):
            raise InvalidArgument("magnitudes must be non-negative")

    def freqs(self) -> np.ndarray:
        return np.arange(len(self.magnitudes)) * self.bin_hz


def _values(window) -> np.ndarray:
    values = window.values if isinstance(window, PulseWindow) else np.asarray(window, dtype=np.float64)
    if values.shape[-1] != WINDOW_LEN:
        raise ShapeError(f"pulse window must hold {WINDOW_LEN} samples, got {values.shape[-1]}")
    return np.asarray(values, dtype=np.float64)


def normalize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """DC removal and z-scoring per row; returns (normalized, flagged)."""
    x = np.atleast_2d(values)
    centered = x - x.mean(axis=1, keepdims=True)
    sigma = centered.std(axis=1, keepdims=True)
    flagged = sigma[:, 0] < SIGMA_FLOOR
    z = np.where(flagged[:, None], 0.0, centered / np.where(flagged[:, None], 1.0, sigma))
    return z, flagged


def spectra(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`preprocess`: (magnitudes (B, 129), flagged)."""
    z, flagged = normalize(values)
    return np.abs(fft(z, FFT_LEN)[:, :BINS]), flagged


def preprocess(window) -> SpectrumVector:
    mags, flagged = spectra(_values(window)[None, :])
    return SpectrumVector(mags[0], BIN_HZ, bool(flagged[0]))


def features(windows, uses_dft: bool) -> np.ndarray:
    """Model inputs for a list of windows (or a (B, 250) array)."""
    if isinstance(windows, np.ndarray):
        values = _values(windows)
    else:
        values = np.stack([_values(w) for w in windows]) if len(windows) else np.zeros((0, WINDOW_LEN))
    values = np.atleast_2d(values)
    if uses_dft:
        return spectra(values)[0]
    return normalize(values)[0]


# ---------------------------------------------------------------------------
# models


@dataclass
class EmotionModel:
    kind: str
    uses_dft: bool
    net: Model
    test_accuracy: float = float("nan")
    test_indices: tuple[int, ...] = ()

    classes = EMOTIONS

    @property
    def input_len(self) -> int:
        return BINS if self.uses_dft else WINDOW_LEN

    def scores(self, windows) -> np.ndarray:
        x = features(windows, self.uses_dft)
        if x.shape[1] != self.net.config.input_len:
            raise ShapeError(f"model expects {self.net.config.input_len} inputs, got {x.shape[1]}")
        return softmax(forward(self.net, x.astype(self.net.dtype)))

    def save(self, path) -> None:
        save_checkpoint(path, self.net)


def emotion_arch(kind: str, uses_dft: bool) -> ArchConfig:
    input_len = BINS if uses_dft else WINDOW_LEN
    input_kind = "spectrum" if uses_dft else "raw"
    role = f"emotion-{kind}"
    if kind == "cnn1d":
        return ArchConfig(
            input_len=input_len, classes=3, stem_width=8, blocks=((16, 1), (16, 2)),
            stem_kernel=7, role=role, input_kind=input_kind, pool="flatten",
        )
    if kind == "mlp":
        return ArchConfig(input_len=input_len, classes=3, kind="mlp", hidden=(64,), role=role, input_kind=input_kind)
    if kind == "lda":
        return ArchConfig(input_len=input_len, classes=3, kind="mlp", hidden=(), role=role, input_kind=input_kind)
    raise InvalidArgument(f"unknown emotion model kind {kind!r}")


def load_emotion_model(path) -> EmotionModel:
    net = load_checkpoint(path)
    role = net.config.role
    if not role.startswith("emotion-") or net.config.input_kind not in ("spectrum", "raw"):
        raise UnsupportedModel(f"{path} is not an emotion checkpoint (role {role!r})")
    return EmotionModel(role.split("-", 1)[1], net.config.input_kind == "spectrum", net)


def window_labels(windows: Sequence[PulseWindow]) -> np.ndarray:
    labels = []
    for w in windows:
        if w.emotion_label not in EMOTIONS:
            raise InvalidArgument(f"window at {w.start_s} s has no emotion label")
        labels.append(EMOTIONS.index(w.emotion_label))
    return np.asarray(labels, dtype=np.int64)


def split_windows(labels: np.ndarray, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stratified 80/20 split; returns sorted (train, test) indices."""
    rng = np.random.default_rng([seed, 41])
    train, test = [], []
    for c in range(len(EMOTIONS)):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(test_fraction * len(idx)))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def fit_lda(x: np.ndarray, y: np.ndarray, classes: int = 3, ridge: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Linear discriminant weights (dim, classes) and biases (classes,).

    Pooled within-class covariance with a ridge of ``ridge * trace / dim``;
    log class priors enter the bias.
    """
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[1]
    means = np.stack([x[y == c].mean(axis=0) for c in range(classes)])
    resid = x - means[y]
    cov = resid.T @ resid / max(len(x) - classes, 1)
    cov += ridge * np.trace(cov) / dim * np.eye(dim)
    if np.trace(cov) == 0:
        cov += np.eye(dim)
    w = np.linalg.solve(cov, means.T)
    priors = np.bincount(y, minlength=classes) / len(y)
    b = -0.5 * np.sum(means.T * w, axis=0) + np.log(priors)
    return w, b


def default_emotion_train(kind: str) -> TrainConfig:
    if kind == "cnn1d":
        return TrainConfig(lr=1e-3, batch_size=32, epochs=60, weight_decay=WEIGHT_DECAY)
    return TrainConfig(lr=1e-3, batch_size=32, epochs=60, weight_decay=WEIGHT_DECAY)


def train_emotion(
    windows: Sequence[PulseWindow],
    kind: str = "cnn1d",
    uses_dft: bool = True,
    seed: int = 0,
    train: TrainConfig | None = None,
) -> EmotionModel:
    """Fit on a seeded stratified 80% and score the held-out 20%."""
    if kind not in KINDS:
        raise InvalidArgument(f"unknown emotion model kind {kind!r}")
    labels = window_labels(windows)
    counts = np.bincount(labels, minlength=len(EMOTIONS))
    for c, count in enumerate(counts):
        if count < MIN_PER_CLASS:
            raise InsufficientData(
                f"class {EMOTIONS[c]!r} has {count} windows, need {MIN_PER_CLASS}", key=EMOTIONS[c]
            )
    x = features(list(windows), uses_dft)
    tr, te = split_windows(labels, seed)
    arch = emotion_arch(kind, uses_dft)
    if kind == "lda":
        w, b = fit_lda(x[tr], labels[tr])
        net = build_model(arch, seed, dtype=np.float64)
        net.params["head.w"][...] = w.T
        net.params["head.b"][...] = b
    else:
        from .tokendec import fit

        cfg = (train or default_emotion_train(kind)).with_(seed=seed)
        model = build_model(arch, seed)
        net = fit(model, x[tr].astype(np.float32), labels[tr], cfg, name=f"emotion[{kind}]").model
    result = EmotionModel(kind, uses_dft, net, test_indices=tuple(te.tolist()))
    if len(te):
        pred = np.argmax(result.scores(np.stack([windows[i].values for i in te])), axis=1)
        result.test_accuracy = float(np.mean(pred == labels[te]))
    log.info("emotion %s dft=%s: held-out accuracy %.4f", kind, uses_dft, result.test_accuracy)
    return result



def classify_emotion(model: EmotionModel, window) -> tuple[str, np.ndarray]:
    """Label and class scores; ``np.argmax`` keeps the first of tied classes."""
    scores = model.scores(_values(window)[None, :])[0]
    return EMOTIONS[int(np.argmax(scores))], scores


def predict_emotions(model: EmotionModel, windows) -> np.ndarray:
    if not len(windows):
        return np.zeros(0, dtype=np.int64)
    return np.argmax(model.scores(windows), axis=1)


@dataclass
class EmotionReport:
    accuracy: float
    confusion: np.ndarray  # rows = true, cols = predicted, class order EMOTIONS

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true_class"] + [f"pred_{c}" for c in EMOTIONS])
            for c, row in zip(EMOTIONS, self.confusion):
                w.writerow([c] + row.tolist())
            w.writerow(["accuracy", f"{self.accuracy:.6f}"])


def report_emotions(y_true: np.ndarray, y_pred: np.ndarray) -> EmotionReport:
    conf = np.zeros((3, 3), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    total = conf.sum()
    return EmotionReport(float(np.trace(conf) / total) if total else float("nan"), conf)


def eval_emotion(model: EmotionModel, windows: Sequence[PulseWindow]) -> EmotionReport:
    return report_emotions(window_labels(windows), predict_emotions(model, list(windows)))


def _onehot_argmax(logits: np.ndarray) -> np.ndarray:
    g = np.zeros_like(logits)
    g[np.arange(len(logits)), np.argmax(logits, axis=1)] = 1.0
    return g


def freq_saliency(model: EmotionModel, windows) -> np.ndarray:
    """|d score_argmax / d magnitude_k| normalised per window to sum 1.

    Accepts one window or a batch; returns (129,) or (B, 129).
    """
    if not model.uses_dft:
        raise UnsupportedModel("frequency saliency needs a model fed with DFT magnitudes")
    single = isinstance(windows, PulseWindow) or (isinstance(windows, np.ndarray) and windows.ndim == 1)
    batch = [windows] if isinstance(windows, PulseWindow) else windows
    x = features(batch if not isinstance(batch, np.ndarray) else np.atleast_2d(batch), True)
    grad = np.abs(input_gradient(model.net.astype(np.float64), x, _onehot_argmax))
    total = grad.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(total > 0, grad / total, 1.0 / grad.shape[1])
    return out[0] if single else out


def low_band_mass(weights: np.ndarray, max_hz: float = 2.0) -> np.ndarray:
    """Share of saliency in bins at or below ``max_hz``."""
    k = int(np.floor(max_hz / BIN_HZ + 1e-9))
    return np.asarray(weights)[..., : k + 1].sum(axis=-1)
