"""Streams, tokens, token samples and pulse windows.

A stream holds equal-length channels sampled at one rate plus interval
annotations (words, nods, emotion spans). Speech is cut into fixed 144 ms
tokens; each classifier input is the current token preceded by ``n - 1``
context tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ChannelNotFound,
    CorruptFile,
    EmptyInput,
    FormatError,
    InvalidAnnotations,
    InvalidArgument,
    ShapeError,
)

TOKEN_S = 0.144
DEFAULT_RATE_HZ = 500
PULSE_RATE_HZ = 50
PULSE_WINDOW_S = 5.0
TIE_EPS_S = 1e-9

SPEECH = "speech"
PULSE = "pulse"
CHANNEL_CODES = {SPEECH: 0, PULSE: 1}
EMOTIONS = ("neutral", "relieved", "frustrated")
ANNOTATION_KINDS = ("word", "nod", "emotion")


def token_len_samples(sample_rate_hz: int) -> int:
    return int(round(TOKEN_S * sample_rate_hz))


@dataclass(frozen=True)
class IntervalAnnotation:
    kind: str
    start_s: float
    end_s: float
    payload: int | str | None = None

    def __post_init__(self):
        if self.kind not in ANNOTATION_KINDS:
            raise InvalidAnnotations(f"unknown annotation kind {self.kind!r}")
        if not self.start_s < self.end_s:
            raise InvalidAnnotations(
                f"annotation start {self.start_s} must precede end {self.end_s}"
            )
        if self.kind == "word" and (not isinstance(self.payload, (int, np.integer)) or self.payload < 1):
            raise InvalidAnnotations(f"word annotation needs a word id >= 1, got {self.payload!r}")
        if self.kind == "emotion" and self.payload not in EMOTIONS:
            raise InvalidAnnotations(f"unknown emotion {self.payload!r}")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class SignalStream:
    sample_rate_hz: int
    channels: tuple[str, ...]
    samples: np.ndarray  # (n_channels, n_samples)
    annotations: tuple[IntervalAnnotation, ...] = ()

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise InvalidArgument("sample_rate_hz must be positive")
        data = np.asarray(self.samples, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2 or data.shape[0] != len(self.channels):
            raise ShapeError(
                f"samples shape {data.shape} does not match {len(self.channels)} channels"
            )
        for ch in self.channels:
            if ch not in CHANNEL_CODES:
                raise InvalidArgument(f"unknown channel id {ch!r}")
        data.setflags(write=False)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "annotations", tuple(self.annotations))
        dur = self.duration_s
        for ann in self.annotations:
            if ann.start_s < 0 or ann.end_s > dur + 1e-9:
                raise InvalidAnnotations(
                    f"annotation {ann} lies outside the stream [0, {dur}]"
                )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.samples[self.channels.index(name)]
        except ValueError:
            raise ChannelNotFound(f"stream has no {name!r} channel") from None

    def words(self) -> list[IntervalAnnotation]:
        return [a for a in self.annotations if a.kind == "word"]


@dataclass(frozen=True)
class Token:
    values: np.ndarray
    index: int
    label: int = 0

    def span_s(self, sample_rate_hz: int) -> tuple[float, float]:
        n = len(self.values)
        return self.index * n / sample_rate_hz, (self.index + 1) * n / sample_rate_hz


@dataclass(frozen=True)
class TokenSample:
    tokens: np.ndarray  # (n, token_len); row n-1 is the current token
    label: int
    index: int = 0

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> np.ndarray:
        return self.tokens.reshape(-1)


@dataclass(frozen=True)
class PulseWindow:
    values: np.ndarray
    emotion_label: str | None = None
    start_s: float = 0.0
    rate_hz: int = PULSE_RATE_HZ

    def __post_init__(self):
        if len(self.values) != int(round(PULSE_WINDOW_S * self.rate_hz)):
            raise ShapeError(
                f"pulse window must hold {PULSE_WINDOW_S} s at {self.rate_hz} Hz, got {len(self.values)} samples"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("pulse window contains non-finite values")


def tokenize(stream: SignalStream, channel: str = SPEECH) -> list[Token]:
    """Cut one channel into consecutive non-overlapping tokens.

    The trailing remainder shorter than a token is dropped.
    """
    x = stream.channel(channel)
    if len(x) == 0:
        raise EmptyInput("stream is empty")
    size = token_len_samples(stream.sample_rate_hz)
    count = len(x) // size
    blocks = x[: count * size].reshape(count, size)
    return [Token(values=blocks[i], index=i) for i in range(count)]


def _overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def check_word_annotations(annotations: Iterable[IntervalAnnotation]) -> list[IntervalAnnotation]:
    words = sorted((a for a in annotations if a.kind == "word"), key=lambda a: (a.start_s, a.end_s))
    for prev, cur in zip(words, words[1:]):
        if cur.start_s < prev.end_s:
            raise InvalidAnnotations(f"word annotations overlap: {prev} and {cur}")
    return words


def label_tokens(
    tokens: Sequence[Token],
    annotations: Iterable[IntervalAnnotation],
    sample_rate_hz: int = DEFAULT_RATE_HZ,
) -> list[int]:
    """Label each token with the word covering more than half of it, else blank."""
    words = check_word_annotations(annotations)
    starts = [w.start_s for w in words]
    labels = []
    for tok in tokens:
        t0, t1 = tok.span_s(sample_rate_hz)
        half = 0.5 * (t1 - t0)
        label = 0
        # only words starting before t1 can overlap; scan back from there
        j = int(np.searchsorted(starts, t1, side="left")) - 1
        while j >= 0 and words[j].end_s > t0:
            # strict majority; the tolerance keeps exact halves blank despite float rounding
            if _overlap(t0, t1, words[j].start_s, words[j].end_s) > half + TIE_EPS_S:
                label = int(words[j].payload)
                break
            j -= 1
        labels.append(label)
    return labels


def with_labels(tokens: Sequence[Token], labels: Sequence[int]) -> list[Token]:
    if len(tokens) != len(labels):
        raise ShapeError("token and label counts differ")
    return [Token(values=t.values, index=t.index, label=int(lab)) for t, lab in zip(tokens, labels)]


def sample_matrix(tokens: Sequence[Token], n: int) -> np.ndarray:
    """Stack context windows for every token: array (len(tokens), n, token_len)."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if not tokens:
        return np.zeros((0, n, 0))
    values = np.stack([t.values for t in tokens])
    padded = np.concatenate([np.zeros((n - 1, values.shape[1]), dtype=values.dtype), values])
    idx = np.arange(len(tokens))[:, None] + np.arange(n)[None, :]
    return padded[idx]


def assemble_samples(tokens: Sequence[Token], n: int) -> list[TokenSample]:
    """One sample per token: tokens i-n+1..i, zero-padded before the stream start."""
    windows = sample_matrix(tokens, n)
    return [
        TokenSample(tokens=windows[i], label=tok.label, index=tok.index)
        for i, tok in enumerate(tokens)
    ]


def decimate(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise InvalidArgument("decimation factor must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    count = len(x) // factor
    return x[: count * factor].reshape(count, factor).mean(axis=1)


def _majority_emotion(annotations, t0: float, t1: float) -> str | None:
    totals: dict[str, float] = {}
    for a in annotations:
        if a.kind == "emotion":
            totals[a.payload] = totals.get(a.payload, 0.0) + _overlap(t0, t1, a.start_s, a.end_s)
    if not totals:
        return None
    label, covered = max(totals.items(), key=lambda kv: (kv[1], -EMOTIONS.index(kv[0])))
    return label if covered > 0.5 * (t1 - t0) else None


def window_starts(duration_s: float, hop_s: float, window_s: float = PULSE_WINDOW_S) -> list[float]:
    if hop_s <= 0:
        raise InvalidArgument("hop must be positive")
    starts = []
    k = 0
    while True:
        s = k * hop_s
        if s + window_s > duration_s + 1e-9:
            return starts
        starts.append(s)
        k += 1


def window_pulse(
    stream: SignalStream,
    hop_s: float = PULSE_WINDOW_S,
    working_rate_hz: int = PULSE_RATE_HZ,
) -> list[PulseWindow]:
    """Decimated 5 s pulse windows labelled by the majority emotion span."""
    x = stream.channel(PULSE)
    rate = stream.sample_rate_hz
    if rate % working_rate_hz:
        raise InvalidArgument(f"{rate} Hz is not an integer multiple of {working_rate_hz} Hz")
    factor = rate // working_rate_hz
    size = int(round(PULSE_WINDOW_S * rate))
    out = []
    for s in window_starts(stream.duration_s, hop_s):
        i0 = int(round(s * rate))
        seg = x[i0 : i0 + size]
        if len(seg) < size:
            break
        label = _majority_emotion(stream.annotations, s, s + PULSE_WINDOW_S)
        out.append(PulseWindow(decimate(seg, factor), label, s, working_rate_hz))
    return out


# ---------------------------------------------------------------------------
# .itss stream files

_ITSS_MAGIC = b"ITSS"
_ITSS_VERSION = 1
_CODE_TO_CHANNEL = {v: k for k, v in CHANNEL_CODES.items()}


def annotation_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ann")


def write_stream(path, stream: SignalStream) -> None:
    """Write the binary stream plus a tab-separated annotation sidecar."""
    path = Path(path)
    header = _ITSS_MAGIC + struct.pack(
        "<HIB", _ITSS_VERSION, stream.sample_rate_hz, len(stream.channels)
    )
    header += bytes(CHANNEL_CODES[c] for c in stream.channels)
    header += struct.pack("<Q", stream.n_samples)
    body = np.ascontiguousarray(stream.samples.T, dtype="<f4").tobytes()
    path.write_bytes(header + body)
    lines = []
    for a in stream.annotations:
        payload = "" if a.payload is None else str(a.payload)
        lines.append(f"{a.kind}\t{a.start_s!r}\t{a.end_s!r}\t{payload}")
    annotation_path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _parse_annotation(line: str) -> IntervalAnnotation:
    kind, start, end, payload = line.split("\t")
    value: int | str | None = payload or None
    if kind == "word":
        value = int(payload)
    return IntervalAnnotation(kind, float(start), float(end), value)


def read_stream(path) -> SignalStream:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _ITSS_MAGIC:
        raise FormatError(f"{path}: not an ITSS stream file")
    try:
        version, rate, count = struct.unpack_from("<HIB", raw, 4)
        if version != _ITSS_VERSION:
            raise FormatError(f"{path}: unsupported ITSS version {version}")
        pos = 4 + struct.calcsize("<HIB")
        codes = raw[pos : pos + count]
        pos += count
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except struct.error as exc:
        raise CorruptFile(f"{path}: truncated header") from exc
    if len(codes) != count or any(c not in _CODE_TO_CHANNEL for c in codes):
        raise CorruptFile(f"{path}: bad channel table")
    need = n * count * 4
    if len(raw) - pos != need:
        raise CorruptFile(f"{path}: expected {need} payload bytes, found {len(raw) - pos}")
    data = np.frombuffer(raw, dtype="<f4", count=n * count, offset=pos).reshape(n, count).T
    annotations = ()
    side = annotation_path(path)
    if side.exists():
        annotations = tuple(
            _parse_annotation(line) for line in side.read_text().splitlines() if line.strip()
        )
    return SignalStream(
        sample_rate_hz=rate,
        channels=tuple(_CODE_TO_CHANNEL[c] for c in codes),
        samples=data.astype(np.float64),
        annotations=annotations,
    )


def quantize_stream(stream: SignalStream) -> SignalStream:
    """Round samples through float32, as they would be after a file round trip."""
    return SignalStream(
        stream.sample_rate_hz,
        stream.channels,
        stream.samples.astype(np.float32).astype(np.float64),
        stream.annotations,
    )


def token_time(index: int, sample_rate_hz: int = DEFAULT_RATE_HZ) -> float:
    """End time of token ``index``."""
    return (index + 1) * token_len_samples(sample_rate_hz) / sample_rate_hz


__all__ = [
    "TOKEN_S",
    "SignalStream",
    "IntervalAnnotation",
    "Token",
    "TokenSample",
    "PulseWindow",
    "tokenize",
    "label_tokens",
    "assemble_samples",
    "decimate",
    "window_pulse",
    "write_stream",
    "read_stream",
]
