"""Deterministic stand-in for the choker hardware.

Words are sequences of Gabor atoms in the 4-40 Hz band, the carotid pulse is
a quasi-periodic three-harmonic waveform in 0-6 Hz, and sessions splice
words, pauses and nod gestures together with white noise at a fixed SNR.
Everything is a pure function of its configuration and seed.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import sigcore
from .errors import (
    ChannelNotFound,
    CorruptFile,
    EmptyInput,
    FormatError,
    InvalidArgument,
    NotInVocabulary,
    ShapeError,
    TooShort,
)
from .sigcore import IntervalAnnotation, SignalStream

# Plain words used as texts for the first word ids; larger vocabularies fall
# back to synthetic names.
LEXICON = (
    "we", "go", "hospital", "i", "want", "water", "need", "help", "you",
    "home", "eat", "drink", "doctor", "now", "please", "tired", "pain",
    "sleep", "family", "outside", "today", "medicine", "cold", "hot",
    "bathroom", "walk", "sit", "read", "phone", "friend",
)

UNIT_MIN_S, UNIT_MAX_S = 0.08, 0.20
WORD_MIN_S, WORD_MAX_S = 0.4, 1.0
FREQ_MIN_HZ, FREQ_MAX_HZ = 4.0, 40.0


@dataclass(frozen=True)
class ArticulationUnit:
    center_freq_hz: float
    amplitude: float
    duration_s: float
    phase: float


@dataclass(frozen=True)
class Word:
    word_id: int
    text: str
    units: tuple[ArticulationUnit, ...]

    @property
    def nominal_duration_s(self) -> float:
        return float(sum(u.duration_s for u in self.units))


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[Word, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.words) < 2:
            raise InvalidArgument("a vocabulary needs at least two words")
        if [w.word_id for w in self.words] != list(range(1, len(self.words) + 1)):
            raise InvalidArgument("word ids must run contiguously from 1")

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def class_count(self) -> int:
        return len(self.words) + 1

    def word(self, word_id: int) -> Word:
        if not 1 <= word_id <= len(self.words):
            raise NotInVocabulary(f"word id {word_id} not in vocabulary of {len(self.words)}")
        return self.words[word_id - 1]

    def text(self, word_id: int) -> str:
        return self.word(word_id).text

    def id_of(self, text: str) -> int:
        for w in self.words:
            if w.text == text:
                return w.word_id
        raise NotInVocabulary(f"{text!r} not in vocabulary")


def _unit_durations(rng: np.random.Generator, total: float, k: int) -> np.ndarray:
    # spread the excess over the minimum, capping each unit at the maximum
    weights = rng.uniform(0.2, 1.0, size=k)
    d = np.full(k, UNIT_MIN_S)
    excess = total - UNIT_MIN_S * k
    free = np.ones(k, dtype=bool)
    while excess > 1e-12 and free.any():
        share = excess * weights * free / np.sum(weights * free)
        room = UNIT_MAX_S - d
        add = np.minimum(share, room)
        d += add
        excess -= add.sum()
        free &= (UNIT_MAX_S - d) > 1e-12
    return d


# articulation ramps up: the first unit of every word is soft
ONSET_AMPLITUDE = (0.1, 0.25)
UNIT_AMPLITUDE = (0.5, 1.0)


def min_unit_freq(duration_s: float) -> float:
    """Lowest carrier that keeps a unit's Gabor atom out of the 0-2 Hz band."""
    return max(FREQ_MIN_HZ, 2.5 + 0.9 / duration_s)


def make_vocab(seed: int, v: int) -> Vocabulary:
    if v < 2:
        raise InvalidArgument("vocabulary size must be >= 2")
    rng = np.random.default_rng([seed, v])
    words = []
    for wid in range(1, v + 1):
        total = rng.uniform(WORD_MIN_S, WORD_MAX_S)
        k_lo = int(np.ceil(total / UNIT_MAX_S - 1e-9))
        k_hi = min(5, int(np.floor(total / UNIT_MIN_S + 1e-9)))
        k = int(rng.integers(max(2, k_lo), k_hi + 1))
        durations = _unit_durations(rng, total, k)
        units = []
        for j, d in enumerate(durations):
            f = rng.uniform(min_unit_freq(d), FREQ_MAX_HZ)
            amp_lo, amp_hi = ONSET_AMPLITUDE if j == 0 else UNIT_AMPLITUDE
            units.append(
                ArticulationUnit(
                    center_freq_hz=float(f),
                    amplitude=float(rng.uniform(amp_lo, amp_hi)),
                    duration_s=float(d),
                    phase=float(rng.uniform(0, 2 * np.pi)),
                )
            )
        text = LEXICON[wid - 1] if wid <= len(LEXICON) else f"word{wid}"
        words.append(Word(wid, text, tuple(units)))
    return Vocabulary(tuple(words), seed)


@dataclass(frozen=True)
class SpeakerProfile:
    domain: str = "healthy"
    amplitude_scale: float = 1.0
    jitter_scale: float = 1.0
    tremor_amp: float = 0.0
    seed: int = 0
    tremor_hz: float = 5.0
    freq_scale: float = 1.0
    rate_scale: float = 1.0

    def __post_init__(self):
        if self.domain not in ("healthy", "patient"):
            raise InvalidArgument(f"unknown speaker domain {self.domain!r}")
        if self.amplitude_scale <= 0:
            raise InvalidArgument("amplitude_scale must be positive")


def healthy_speaker(seed: int) -> SpeakerProfile:
    rng = np.random.default_rng([seed, 101])
    return SpeakerProfile(
        domain="healthy",
        amplitude_scale=1.0,
        jitter_scale=1.0,
        tremor_amp=0.0,
        seed=seed,
        freq_scale=float(rng.uniform(0.94, 1.06)),
        rate_scale=float(rng.uniform(0.92, 1.08)),
    )


def patient_speaker(seed: int) -> SpeakerProfile:
    """Dysarthric speaker: weaker, slower, lower-pitched articulation with tremor."""
    rng = np.random.default_rng([seed, 202])
    return SpeakerProfile(
        domain="patient",
        amplitude_scale=float(rng.uniform(0.55, 0.7)),
        jitter_scale=1.5,
        tremor_amp=float(rng.uniform(0.06, 0.12)),
        seed=seed,
        tremor_hz=float(rng.uniform(4.0, 6.0)),
        freq_scale=float(rng.uniform(0.8, 0.9)),
        rate_scale=float(rng.uniform(1.15, 1.35)),
    )


def synth_utterance(
    word_id: int,
    vocab: Vocabulary,
    profile: SpeakerProfile,
    seed: int,
    sample_rate_hz: int = sigcore.DEFAULT_RATE_HZ,
) -> tuple[np.ndarray, tuple[float, float]]:
    """Render one word; returns the signal and its (0, duration) interval."""
    word = vocab.word(word_id)
    rng = np.random.default_rng([profile.seed, seed, word_id])
    gain = rng.normal(1.0, 0.1 * profile.jitter_scale)
    warp = rng.uniform(0.9, 1.1) * profile.rate_scale
    duration = word.nominal_duration_s * warp
    n = int(round(duration * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    x = np.zeros(n)
    t_start = 0.0
    for u in word.units:
        d = u.duration_s * warp
        t0 = t_start + 0.5 * d
        sigma = d / 3.0
        f = u.center_freq_hz * profile.freq_scale
        x += u.amplitude * np.exp(-((t - t0) ** 2) / (2 * sigma**2)) * np.sin(
            2 * np.pi * f * (t - t0) + u.phase
        )
        t_start += d
    x *= gain * profile.amplitude_scale
    if profile.tremor_amp > 0:
        taper = np.sin(np.pi * np.arange(n) / max(n - 1, 1)) ** 2
        x += profile.tremor_amp * taper * np.sin(
            2 * np.pi * profile.tremor_hz * t + rng.uniform(0, 2 * np.pi)
        )
    return x, (0.0, n / sample_rate_hz)


# ---------------------------------------------------------------------------
# pulse


@dataclass(frozen=True)
class EmotionProfile:
    label: str
    f0_mean_hz: float
    f0_std_hz: float
    harmonic_ratios: tuple[float, float, float]

    def __post_init__(self):
        if self.label not in sigcore.EMOTIONS:
            raise InvalidArgument(f"unknown emotion {self.label!r}")
        if not 0.5 <= self.f0_mean_hz <= 2.0:
            raise InvalidArgument("f0_mean_hz must lie in [0.5, 2.0]")
        r = self.harmonic_ratios
        if len(r) != 3 or r[2] > r[1]:
            raise InvalidArgument("harmonic ratios must be three entries, non-increasing after the first")


EMOTION_PROFILES = {
    "neutral": EmotionProfile("neutral", 1.15, 0.03, (1.0, 0.45, 0.2)),
    "relieved": EmotionProfile("relieved", 0.95, 0.02, (1.0, 0.35, 0.15)),
    "frustrated": EmotionProfile("frustrated", 1.45, 0.08, (1.0, 0.6, 0.3)),
}

_HARMONIC_PHASES = (0.0, -np.pi / 3, -2 * np.pi / 3)


def subject_emotion_profiles(seed: int, f0_sd_hz: float = 0.08, ratio_sd: float = 0.08) -> dict[str, EmotionProfile]:
    """Per-subject variant of the defaults: a shared resting-rate offset plus
    per-emotion jitter of the fundamental and the overtone ratios."""
    rng = np.random.default_rng([seed, 53])
    offset = rng.normal(0.0, f0_sd_hz)
    out = {}
    for label, base in EMOTION_PROFILES.items():
        f0 = float(np.clip(base.f0_mean_hz + offset + rng.normal(0.0, f0_sd_hz / 2), 0.5, 2.0))
        r2 = float(np.clip(base.harmonic_ratios[1] + rng.normal(0.0, ratio_sd), 0.05, 1.0))
        r3 = float(np.clip(base.harmonic_ratios[2] + rng.normal(0.0, ratio_sd), 0.02, r2))
        out[label] = EmotionProfile(label, f0, base.f0_std_hz, (1.0, r2, r3))
    return out


def _exact_noise(rng: np.random.Generator, clean: np.ndarray, snr_db: float) -> np.ndarray:
    """White noise scaled so the realised SNR equals ``snr_db`` exactly."""
    noise = rng.standard_normal(len(clean))
    p_sig = np.mean(clean**2)
    p_noise = np.mean(noise**2)
    if p_sig == 0 or p_noise == 0:
        return np.zeros_like(clean)
    return noise * np.sqrt(p_sig / (p_noise * 10 ** (snr_db / 10)))


def synth_pulse(
    profile: EmotionProfile,
    duration_s: float,
    seed: int,
    sample_rate_hz: int = sigcore.DEFAULT_RATE_HZ,
    snr_db: float | None = 25.0,
    respiration: bool = True,
) -> np.ndarray:
    """Carotid pulse with beat-to-beat fundamental variation.

    ``snr_db=None`` disables the noise.
    """
    if duration_s < sigcore.PULSE_WINDOW_S:
        raise TooShort(f"pulse needs at least {sigcore.PULSE_WINDOW_S} s, got {duration_s}")
    rng = np.random.default_rng([seed, sigcore.EMOTIONS.index(profile.label), 7])
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    # beat boundaries; the phase is linear within each beat
    edges = [rng.uniform(-1.0 / profile.f0_mean_hz, 0.0)]
    while edges[-1] <= t[-1]:
        f0 = max(0.3, rng.normal(profile.f0_mean_hz, profile.f0_std_hz))
        edges.append(edges[-1] + 1.0 / f0)
    edges = np.asarray(edges)
    beat = np.searchsorted(edges, t, side="right") - 1
    frac = (t - edges[beat]) / (edges[beat + 1] - edges[beat])
    phase = 2 * np.pi * (beat + frac)
    x = np.zeros(n)
    for h, (ratio, offset) in enumerate(zip(profile.harmonic_ratios, _HARMONIC_PHASES), start=1):
        x += ratio * np.sin(h * phase + offset)
    if respiration:
        x *= 1.0 + 0.1 * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
    if snr_db is not None:
        x = x + _exact_noise(rng, x, snr_db)
    return x


def inject_crosstalk(pulse: np.ndarray, speech: np.ndarray, kappa: float) -> np.ndarray:
    pulse = np.asarray(pulse, dtype=np.float64)
    speech = np.asarray(speech, dtype=np.float64)
    if pulse.shape != speech.shape:
        raise ShapeError(f"pulse {pulse.shape} and speech {speech.shape} differ in length")
    return pulse + kappa * speech


# ---------------------------------------------------------------------------
# sessions


@dataclass(frozen=True)
class Pause:
    seconds: float


@dataclass(frozen=True)
class NodPair:
    pass


@dataclass(frozen=True)
class EmotionSpan:
    """Switches the pulse emotion from this point of the script onwards."""

    label: str


ScriptItem = Union[int, float, Pause, NodPair, EmotionSpan]

# carotid strain is an order of magnitude below speech vibration
PULSE_GAIN = 0.1
NOD_BUMP_S = 0.3
NOD_GAP_S = 0.4


def nod_waveform(amplitude: float, sample_rate_hz: int) -> np.ndarray:
    bump_n = int(round(NOD_BUMP_S * sample_rate_hz))
    gap_n = int(round(NOD_GAP_S * sample_rate_hz))
    bump = amplitude * np.sin(np.pi * (np.arange(bump_n) + 0.5) / bump_n)
    return np.concatenate([bump, np.zeros(gap_n), bump])


def synth_session(
    script: Sequence[ScriptItem],
    vocab: Vocabulary,
    profile: SpeakerProfile,
    noise_snr_db: float = 20.0,
    seed: int = 0,
    sample_rate_hz: int = sigcore.DEFAULT_RATE_HZ,
    noiseless: bool = False,
    emotion_profiles: dict[str, EmotionProfile] | None = None,
    kappa: float = 0.0,
    pulse_gain: float = PULSE_GAIN,
) -> SignalStream:
    """Render a script into a two-channel annotated stream.

    Integers are word ids, floats (or :class:`Pause`) are silences in
    seconds. ``kappa`` leaks the clean speech into the pulse channel.
    ``pulse_gain`` sets the carotid strain relative to speech vibration.
    """
    if not script:
        raise EmptyInput("script is empty")
    if not noiseless and not np.isfinite(noise_snr_db):
        raise InvalidArgument("noise_snr_db must be finite; pass noiseless=True instead")
    profiles = emotion_profiles or EMOTION_PROFILES
    pieces: list[np.ndarray] = []
    annotations: list[IntervalAnnotation] = []
    nod_slots: list[int] = []
    emotion_marks: list[tuple[float, str]] = []
    cursor = 0
    peak = 0.0
    for k, item in enumerate(script):
        if isinstance(item, bool):
            raise InvalidArgument(f"bad script item {item!r}")
        if isinstance(item, (int, np.integer)):
            x, _ = synth_utterance(int(item), vocab, profile, seed * 100003 + k, sample_rate_hz)
            annotations.append(
                IntervalAnnotation("word", cursor / sample_rate_hz, (cursor + len(x)) / sample_rate_hz, int(item))
            )
            peak = max(peak, float(np.max(np.abs(x))))
            pieces.append(x)
            cursor += len(x)
        elif isinstance(item, (float, Pause)):
            seconds = item.seconds if isinstance(item, Pause) else item
            if seconds < 0:
                raise InvalidArgument("pause must be non-negative")
            n = int(round(seconds * sample_rate_hz))
            pieces.append(np.zeros(n))
            cursor += n
        elif isinstance(item, NodPair):
            n = len(nod_waveform(1.0, sample_rate_hz))
            nod_slots.append(len(pieces))
            annotations.append(
                IntervalAnnotation("nod", cursor / sample_rate_hz, (cursor + n) / sample_rate_hz)
            )
            pieces.append(np.zeros(n))
            cursor += n
        elif isinstance(item, EmotionSpan):
            if item.label not in profiles:
                raise InvalidArgument(f"unknown emotion {item.label!r}")
            emotion_marks.append((cursor / sample_rate_hz, item.label))
        else:
            raise InvalidArgument(f"bad script item {item!r}")
    nod_amp = 3.0 * (peak if peak > 0 else 1.0)
    for slot in nod_slots:
        pieces[slot] = nod_waveform(nod_amp, sample_rate_hz)
    clean = np.concatenate(pieces) if pieces else np.zeros(0)
    if len(clean) == 0:
        raise EmptyInput("script renders to an empty stream")
    rng = np.random.default_rng([seed, profile.seed, 31337])
    speech = clean if noiseless else clean + _exact_noise(rng, clean, noise_snr_db)

    duration = len(clean) / sample_rate_hz
    if not emotion_marks or emotion_marks[0][0] > 0:
        emotion_marks.insert(0, (0.0, "neutral"))
    pulse = np.zeros(len(clean))
    spans = []
    for j, (start, label) in enumerate(emotion_marks):
        end = emotion_marks[j + 1][0] if j + 1 < len(emotion_marks) else duration
        if end > start:
            spans.append((start, end, label))
    for j, (start, end, label) in enumerate(spans):
        i0 = int(round(start * sample_rate_hz))
        i1 = int(round(end * sample_rate_hz))
        seg_s = max(end - start, sigcore.PULSE_WINDOW_S)
        p = synth_pulse(profiles[label], seg_s, seed * 7919 + j, sample_rate_hz, None if noiseless else 25.0)
        pulse[i0:i1] = pulse_gain * p[: i1 - i0]
        annotations.append(IntervalAnnotation("emotion", start, end, label))
    if kappa:
        pulse = inject_crosstalk(pulse, clean, kappa)
    annotations.sort(key=lambda a: (a.start_s, a.end_s, a.kind))
    return SignalStream(sample_rate_hz, (sigcore.SPEECH, sigcore.PULSE), np.stack([speech, pulse]), tuple(annotations))


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return float(10 * np.log10(np.mean(clean**2) / np.mean(noise**2)))


def derive_seed(master_seed: int, index: int) -> int:
    """Per-session seed independent of generation order."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def word_sessions(
    vocab: Vocabulary,
    profile: SpeakerProfile,
    reps: int,
    seed: int,
    words_per_session: int = 20,
    pause_range: tuple[float, float] = (0.35, 0.9),
    noise_snr_db: float = 20.0,
    nod_rate: float = 0.0,
    sample_rate_hz: int = sigcore.DEFAULT_RATE_HZ,
) -> list[SignalStream]:
    """Every vocabulary word ``reps`` times in shuffled order, split into sessions."""
    rng = np.random.default_rng([seed, profile.seed, 5])
    order = np.repeat(np.arange(1, vocab.size + 1), reps)
    rng.shuffle(order)
    sessions = []
    for s, start in enumerate(range(0, len(order), words_per_session)):
        script: list[ScriptItem] = [float(rng.uniform(*pause_range))]
        for wid in order[start : start + words_per_session]:
            script.append(int(wid))
            script.append(float(rng.uniform(*pause_range)))
            if nod_rate and rng.uniform() < nod_rate:
                script.append(NodPair())
                script.append(float(rng.uniform(*pause_range)))
        script.append(1.2)
        sessions.append(
            synth_session(
                script, vocab, profile, noise_snr_db, derive_seed(seed, s), sample_rate_hz
            )
        )
    return sessions


# ---------------------------------------------------------------------------
# token datasets


@dataclass
class TokenDataset:
    """Flattened token samples plus the utterance each sample belongs to.

    ``groups`` maps samples to utterances (used for leakage-free splits and
    per-word subsampling); it is not persisted in ``.itds`` files.
    """

    n: int
    token_len: int
    class_count: int
    x: np.ndarray  # (samples, n * token_len) float32
    y: np.ndarray  # (samples,) int64
    provenance: str = ""
    groups: np.ndarray | None = None
    group_words: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[1] != self.n * self.token_len:
            raise ShapeError(f"sample matrix {self.x.shape} does not match n={self.n}, token_len={self.token_len}")
        if len(self.y) != len(self.x):
            raise ShapeError("sample and label counts differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ShapeError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_len(self) -> int:
        return self.n * self.token_len

    def histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count)

    def subset(self, index: np.ndarray) -> "TokenDataset":
        index = np.asarray(index, dtype=np.int64)
        groups = None if self.groups is None else self.groups[index]
        kept = {} if groups is None else {g: self.group_words[g] for g in np.unique(groups).tolist() if g in self.group_words}
        return replace(self, x=self.x[index], y=self.y[index], groups=groups, group_words=kept)

    def group_ids(self, block: int = 16) -> np.ndarray:
        """Utterance groups, or contiguous blocks when none were recorded."""
        if self.groups is not None:
            return self.groups
        return np.arange(len(self)) // block

    def equals(self, other: "TokenDataset") -> bool:
        return (
            self.n == other.n
            and self.token_len == other.token_len
            and self.class_count == other.class_count
            and np.array_equal(self.y, other.y)
            and self.x.tobytes() == other.x.tobytes()
        )


def concat_datasets(parts: Sequence[TokenDataset]) -> TokenDataset:
    if not parts:
        raise EmptyInput("no datasets to concatenate")
    first = parts[0]
    for p in parts[1:]:
        if (p.n, p.token_len, p.class_count) != (first.n, first.token_len, first.class_count):
            raise ShapeError("datasets disagree on n, token_len or class_count")
    groups, words, offset = [], {}, 0
    have_groups = all(p.groups is not None for p in parts)
    if have_groups:
        for p in parts:
            groups.append(p.groups + offset)
            words.update({g + offset: w for g, w in p.group_words.items()})
            offset += int(p.groups.max()) + 1 if len(p.groups) else 0
    digest = hashlib.sha256("".join(p.provenance for p in parts).encode()).hexdigest()
    return TokenDataset(
        first.n,
        first.token_len,
        first.class_count,
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.y for p in parts]),
        digest,
        np.concatenate(groups) if have_groups else None,
        words,
    )


def _token_groups(n_tokens: int, token_len: int, rate: int, words: list[IntervalAnnotation]) -> np.ndarray:
    ends = (np.arange(n_tokens) + 1) * token_len / rate
    starts = np.array([w.start_s for w in words])
    return np.maximum(np.searchsorted(starts, ends, side="left") - 1, 0)


def build_token_dataset(
    sessions: Sequence[SignalStream],
    n: int,
    class_count: int | None = None,
    config: dict | None = None,
) -> TokenDataset:
    """Tokenize, label and assemble context samples across sessions."""
    if not sessions:
        raise EmptyInput("no sessions")
    xs, ys, gs, group_words = [], [], [], {}
    token_len = sigcore.token_len_samples(sessions[0].sample_rate_hz)
    offset = 0
    digest = hashlib.sha256(repr(sorted((config or {}).items())).encode())
    for stream in sessions:
        if sigcore.SPEECH not in stream.channels:
            raise ChannelNotFound("session has no speech channel")
        if sigcore.token_len_samples(stream.sample_rate_hz) != token_len:
            raise ShapeError("sessions disagree on sample rate")
        tokens = sigcore.tokenize(stream, sigcore.SPEECH)
        labels = sigcore.label_tokens(tokens, stream.annotations, stream.sample_rate_hz)
        tokens = sigcore.with_labels(tokens, labels)
        windows = sigcore.sample_matrix(tokens, n)
        xs.append(windows.reshape(len(tokens), -1).astype(np.float32))
        ys.append(np.asarray(labels, dtype=np.int64))
        words = sigcore.check_word_annotations(stream.annotations)
        if words:
            local = _token_groups(len(tokens), token_len, stream.sample_rate_hz, words)
            for j, w in enumerate(words):
                group_words[offset + j] = int(w.payload)
            gs.append(local + offset)
            offset += len(words)
        else:
            gs.append(np.full(len(tokens), offset))
            offset += 1
        digest.update(xs[-1].tobytes())
        digest.update(ys[-1].tobytes())
    y = np.concatenate(ys)
    if class_count is None:
        class_count = int(y.max()) + 1 if len(y) else 1
    return TokenDataset(
        n, token_len, class_count, np.concatenate(xs), y, digest.hexdigest(), np.concatenate(gs), group_words
    )


# ---------------------------------------------------------------------------
# .itds files

_ITDS_MAGIC = b"ITDS"
_ITDS_VERSION = 1
_ITDS_HEADER = "<HHIHQ"


def write_dataset(path, ds: TokenDataset) -> None:
    header = _ITDS_MAGIC + struct.pack(
        _ITDS_HEADER, _ITDS_VERSION, ds.n, ds.token_len, ds.class_count, len(ds)
    )
    rec = np.dtype([("label", "<u2"), ("values", "<f4", (ds.input_len,))])
    records = np.empty(len(ds), dtype=rec)
    records["label"] = ds.y
    records["values"] = ds.x
    body = header + records.tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_dataset(path) -> TokenDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _ITDS_MAGIC:
        raise FormatError(f"{path}: not an ITDS dataset")
    hsize = 4 + struct.calcsize(_ITDS_HEADER)
    if len(raw) < hsize + 4:
        raise CorruptFile(f"{path}: truncated header")
    version, n, token_len, class_count, count = struct.unpack_from(_ITDS_HEADER, raw, 4)
    if version != _ITDS_VERSION:
        raise FormatError(f"{path}: unsupported ITDS version {version}")
    rec = np.dtype([("label", "<u2"), ("values", "<f4", (n * token_len,))])
    if len(raw) != hsize + count * rec.itemsize + 4:
        raise CorruptFile(f"{path}: size does not match {count} records")
    (stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != stored:
        raise CorruptFile(f"{path}: checksum mismatch")
    records = np.frombuffer(raw, dtype=rec, count=count, offset=hsize)
    return TokenDataset(
        n,
        token_len,
        class_count,
        records["values"].copy(),
        records["label"].astype(np.int64),
        hashlib.sha256(raw).hexdigest(),
    )


def file_crc(path) -> int:
    """Content checksum. For ``.itds`` files this is the stored trailer: the CRC
    of a body followed by its own CRC is a constant, so hashing the whole file
    would tell nothing apart."""
    raw = Path(path).read_bytes()
    if raw[:4] == _ITDS_MAGIC and len(raw) >= 4:
        return struct.unpack_from("<I", raw, len(raw) - 4)[0]
    return zlib.crc32(raw)
