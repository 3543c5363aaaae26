"""Streaming orchestration: tokens in, transcript events out.

Per 144 ms token the pipeline classifies the speech channel, feeds a
causal double-nod detector, emits an emotion label every completed 5 s
pulse window, and closes a sentence after ``blank_boundary_tokens``
consecutive blank tokens. Replays are deterministic; wall-clock latencies
are measured but left out of the JSON-lines transcript unless requested.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import agents, sigcore
from .errors import ConfigError, ShapeError
from .sigcore import SignalStream
from .synthdata import Vocabulary, make_vocab

log = logging.getLogger(__name__)

EVENT_KINDS = ("word", "sentence", "expanded_sentence", "mode_switch", "emotion")
MODES = ("direct", "expanded")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class NodParams:
    smooth_s: float = 0.2  # causal moving average of the signed signal
    history_s: float = 10.0  # trailing window for the running percentile
    exclude_recent_s: float = 1.0  # most recent part left out of the percentile
    percentile: float = 95.0
    factor: float = 2.0
    floor: float = 0.5  # absolute minimum threshold (signals are dimensionless)
    refractory_s: float = 0.2
    min_gap_s: float = 0.2
    max_gap_s: float = 1.5

    def validate(self) -> "NodParams":
        if not 0 < self.min_gap_s <= self.max_gap_s:
            raise ConfigError("nod gap bounds must satisfy 0 < min <= max")
        if self.smooth_s <= 0 or self.history_s <= self.exclude_recent_s:
            raise ConfigError("nod smoothing must be positive and history longer than the excluded tail")
        return self


@dataclass(frozen=True)
class PipelineConfig:
    token_checkpoint: str | None = None
    emotion_checkpoint: str | None = None
    n: int = 15
    blank_boundary_tokens: int = 7
    nod: NodParams = field(default_factory=NodParams)
    mode: str = "direct"
    latency_budget_s: float = 1.0
    seed: int = 0
    vocab_seed: int = 7
    vocab_size: int = 20
    context: agents.ContextRecord = field(default_factory=agents.ContextRecord)
    expansion: str = "template"  # or "llm" (falls back to the template offline)
    threads: int = 1

    def validate(self) -> "PipelineConfig":
        if self.blank_boundary_tokens < 1:
            raise ConfigError("blank_boundary_tokens must be >= 1")
        if self.latency_budget_s <= 0:
            raise ConfigError("latency budget must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.expansion not in ("template", "llm"):
            raise ConfigError(f"unknown expansion mode {self.expansion!r}")
        if self.n < 1 or self.threads < 1:
            raise ConfigError("n and threads must be >= 1")
        self.nod.validate()
        return self

    @property
    def decision_delay_s(self) -> float:
        return self.blank_boundary_tokens * sigcore.TOKEN_S

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        try:
            if "nod" in d and isinstance(d["nod"], dict):
                d["nod"] = NodParams(**d["nod"])
            if "context" in d and isinstance(d["context"], dict):
                d["context"] = agents.ContextRecord(**d["context"])
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class TranscriptEvent:
    kind: str
    payload: dict
    stream_time_s: float
    wall_latency_s: float | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def to_json(self, include_wall: bool = False) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "payload": self.payload,
                "stream_time_s": self.stream_time_s,
                "wall_latency_s": self.wall_latency_s if include_wall else None,
            },
            sort_keys=False,
            separators=(",", ":"),
        )


def write_jsonl(path_or_fh, events: Iterable[TranscriptEvent], include_wall: bool = False) -> None:
    lines = "".join(e.to_json(include_wall) + "\n" for e in events)
    if hasattr(path_or_fh, "write"):
        path_or_fh.write(lines)
    else:
        Path(path_or_fh).write_text(lines)


def read_jsonl(path) -> list[TranscriptEvent]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(TranscriptEvent(d["kind"], d["payload"], d["stream_time_s"], d.get("wall_latency_s")))
    return out


def _t(x: float) -> float:
    return round(float(x), 6)


# ---------------------------------------------------------------------------
# double nod


class NodDetector:
    """Causal double-nod detector fed sample chunks of the speech channel."""

    def __init__(self, rate_hz: int, params: NodParams | None = None):
        self.rate = rate_hz
        self.p = (params or NodParams()).validate()
        self.win = max(1, int(round(self.p.smooth_s * rate_hz)))
        self._tail = np.zeros(0)  # last win-1 raw samples
        self._env: list[np.ndarray] = []  # smoothed history chunks
        self._env_len = 0
        self._n = 0  # samples consumed
        self._in_peak = False
        self._peak_val = -np.inf
        self._peak_idx = -1
        self._last_peak: int | None = None  # last accepted peak (sample index)
        self._pending: int | None = None  # first peak of a possible pair

    def _threshold(self) -> float:
        hist = int(self.p.history_s * self.rate)
        excl = int(self.p.exclude_recent_s * self.rate)
        env = np.concatenate(self._env) if len(self._env) > 1 else (self._env[0] if self._env else np.zeros(0))
        self._env = [env[-hist:]] if len(env) else []
        usable = env[max(0, len(env) - hist) : max(0, len(env) - excl)]
        level = self.p.factor * float(np.percentile(np.abs(usable), self.p.percentile)) if len(usable) else 0.0
        return max(self.p.floor, level)

    def push(self, chunk: np.ndarray) -> list[float]:
        """Consume samples; returns times (s) of double nods completed in them."""
        chunk = np.asarray(chunk, dtype=np.float64)
        thr = self._threshold()
        joined = np.concatenate([self._tail, chunk])
        csum = np.concatenate([[0.0], np.cumsum(joined)])
        start = len(self._tail)
        env = np.empty(len(chunk))
        for j in range(len(chunk)):
            hi = start + j + 1
            lo = max(0, hi - self.win)
            env[j] = (csum[hi] - csum[lo]) / self.win
        self._tail = joined[-(self.win - 1):] if self.win > 1 else np.zeros(0)
        events = []
        for j, e in enumerate(env):
            idx = self._n + j
            if e >= thr:
                if not self._in_peak:
                    self._in_peak, self._peak_val, self._peak_idx = True, e, idx
                elif e > self._peak_val:
                    self._peak_val, self._peak_idx = e, idx
            elif self._in_peak:
                self._in_peak = False
                t = self._accept(self._peak_idx)
                if t is not None:
                    events.append(t)
        self._env.append(env)
        self._n += len(chunk)
        return events

    def _accept(self, peak: int) -> float | None:
        refractory = int(round(self.p.refractory_s * self.rate))
        if self._last_peak is not None and peak - self._last_peak < refractory:
            return None
        self._last_peak = peak
        if self._pending is not None:
            gap = (peak - self._pending) / self.rate
            if self.p.min_gap_s <= gap <= self.p.max_gap_s:
                self._pending = None
                return peak / self.rate
        self._pending = peak
        return None


def detect_double_nod(
    speech: np.ndarray, params: NodParams | None = None, rate_hz: int = sigcore.DEFAULT_RATE_HZ, chunk: int = 72
) -> list[float]:
    det = NodDetector(rate_hz, params)
    out = []
    x = np.asarray(speech, dtype=np.float64)
    for i in range(0, len(x), chunk):
        out.extend(det.push(x[i : i + chunk]))
    return out


# ---------------------------------------------------------------------------
# segmentation shared by streaming and batch decoding


class Segmenter:
    """Splits a label stream at runs of ``k`` blanks that follow a word."""

    def __init__(self, k: int, table: agents.ConstraintTable):
        self.k = k
        self.table = table
        self.buffer: list[int] = []
        self.start = 0  # token index of buffer[0]
        self.blanks = 0

    def push(self, label: int) -> tuple[int, list[agents.WordRun]] | None:
        """Returns (segment start index, word runs) when a sentence closes."""
        self.buffer.append(int(label))
        self.blanks = self.blanks + 1 if label == agents.BLANK else 0
        if self.blanks < self.k:
            return None
        runs = agents.merge_tokens(self.buffer, self.table)
        start = self.start
        self.start += len(self.buffer)
        self.buffer = []
        self.blanks = 0
        return (start, runs) if runs else None


def decode_stream_labels(
    labels: Sequence[int], vocab: Vocabulary, k: int = 7, table: agents.ConstraintTable | None = None
) -> list[tuple[agents.DecodedSentence, int]]:
    """Batch decoding: (sentence with absolute spans, closing token index)."""
    seg = Segmenter(k, table or agents.ConstraintTable.from_vocab(vocab))
    out = []
    for i, y in enumerate(labels):
        done = seg.push(y)
        if done is not None:
            start, runs = done
            shifted = [agents.WordRun(r.word_id, r.start + start, r.end + start) for r in runs]
            out.append((agents.synthesize_sentence(shifted, vocab), i))
    return out


# ---------------------------------------------------------------------------
# classifiers


class OracleClassifier:
    """Labels from the stream's own word annotations (replay and testing)."""

    def __init__(self, stream: SignalStream):
        tokens = sigcore.tokenize(stream)
        self.labels = sigcore.label_tokens(tokens, stream.annotations, stream.sample_rate_hz)
        self.i = 0
        self.inferences = 0

    def push(self, values: np.ndarray) -> int:
        y = self.labels[self.i]
        self.i += 1
        self.inferences += 1
        return y


def _load_token_classifier(config: PipelineConfig, token_len: int, model=None):
    from .tinynet import load_checkpoint
    from .tokendec import StreamClassifier

    if model is None:
        if config.token_checkpoint is None:
            raise ConfigError("no token checkpoint configured")
        model = load_checkpoint(config.token_checkpoint)
    if model.config.input_len != config.n * token_len:
        raise ConfigError(
            f"token model input_len {model.config.input_len} != n={config.n} x token_len={token_len}"
        )
    return StreamClassifier(model, config.n, token_len)


def _load_emotion_model(config: PipelineConfig, model=None):
    from .emotion import load_emotion_model

    if model is not None:
        return model
    if config.emotion_checkpoint is None:
        return None
    return load_emotion_model(config.emotion_checkpoint)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class _TokenWork:
    index: int
    label: int
    nods: list[float]
    emotions: list[tuple[float, str, list[float]]]
    compute_s: float


def _load_source(source) -> SignalStream:
    if isinstance(source, SignalStream):
        return source
    return sigcore.read_stream(source)


def run_pipeline(
    source,
    config: PipelineConfig,
    token_model=None,
    emotion_model=None,
    classifier=None,
    llm_config: agents.LLMConfig | None = None,
) -> list[TranscriptEvent]:
    """Replay a stream through the full pipeline and return its events.

    ``classifier`` overrides the token model with any object exposing
    ``push(token_values) -> label`` (for example :class:`OracleClassifier`).
    """
    config.validate()
    stream = _load_source(source)
    rate = stream.sample_rate_hz
    token_len = sigcore.token_len_samples(rate)
    vocab = make_vocab(config.vocab_seed, config.vocab_size)
    table = agents.ConstraintTable.from_vocab(vocab)
    clf = classifier if classifier is not None else _load_token_classifier(config, token_len, token_model)
    emo = _load_emotion_model(config, emotion_model)
    if emo is not None and stream.sample_rate_hz % sigcore.PULSE_RATE_HZ:
        raise ConfigError(f"{rate} Hz is not a multiple of the {sigcore.PULSE_RATE_HZ} Hz pulse rate")
    speech = stream.channel(sigcore.SPEECH)
    pulse = stream.channel(sigcore.PULSE) if emo is not None else None
    n_tokens = len(speech) // token_len
    window = int(round(sigcore.PULSE_WINDOW_S * rate))

    def classify(i: int) -> tuple[int, float]:
        t0 = time.perf_counter()
        y = clf.push(speech[i * token_len : (i + 1) * token_len])
        return int(y), time.perf_counter() - t0

    nod = NodDetector(rate, config.nod)
    next_window_end = [window]

    def side(i: int) -> tuple[list[float], list, float]:
        t0 = time.perf_counter()
        chunk = speech[i * token_len : (i + 1) * token_len]
        nods = nod.push(chunk)
        emotions = []
        end = (i + 1) * token_len
        while pulse is not None and next_window_end[0] <= end:
            w1 = next_window_end[0]
            values = sigcore.decimate(pulse[w1 - window : w1], rate // sigcore.PULSE_RATE_HZ)
            scores = emo.scores(values[None, :])[0]
            emotions.append((w1 / rate, sigcore.EMOTIONS[int(np.argmax(scores))], [float(s) for s in scores]))
            next_window_end[0] += window
        return nods, emotions, time.perf_counter() - t0

    events: list[TranscriptEvent] = []
    seg = Segmenter(config.blank_boundary_tokens, table)
    mode = config.mode
    emotion_label = config.context.emotion if emo is None else None
    for work in _token_stream(n_tokens, classify, side, config.threads):
        i = work.index
        t_end = _t((i + 1) * sigcore.TOKEN_S)
        for t_win, label, scores in work.emotions:
            emotion_label = label
            events.append(TranscriptEvent("emotion", {"label": label, "scores": scores, "window_end_s": _t(t_win)}, t_end))
        for t_nod in work.nods:
            mode = "expanded" if mode == "direct" else "direct"
            events.append(TranscriptEvent("mode_switch", {"mode": mode, "nod_time_s": _t(t_nod)}, t_end))
        t0 = time.perf_counter()
        done = seg.push(work.label)
        if done is None:
            continue
        start, runs = done
        shifted = [agents.WordRun(r.word_id, r.start + start, r.end + start) for r in runs]
        sentence = agents.synthesize_sentence(shifted, vocab)
        for r, text in zip(shifted, sentence.words):
            events.append(
                TranscriptEvent(
                    "word",
                    {"word": text, "word_id": r.word_id, "start_s": _t(r.start * sigcore.TOKEN_S),
                     "end_s": _t((r.end + 1) * sigcore.TOKEN_S)},
                    t_end,
                )
            )
        latency = work.compute_s + (time.perf_counter() - t0)
        events.append(
            TranscriptEvent(
                "sentence",
                {"text": sentence.text, "words": len(sentence), "end_s": _t(sentence.end_timestamp_s),
                 "emotion": emotion_label},
                t_end,
                latency,
            )
        )
        if mode == "expanded":
            ctx = replace(config.context, emotion=emotion_label or config.context.emotion)
            text = agents.expand_sentence(sentence, ctx, config.expansion, llm_config)
            events.append(
                TranscriptEvent(
                    "expanded_sentence",
                    {"text": text, "basic": sentence.text, "emotion": ctx.emotion},
                    t_end,
                    work.compute_s + (time.perf_counter() - t0),
                )
            )
    return events


def _token_stream(n_tokens: int, classify, side, threads: int) -> Iterator[_TokenWork]:
    """Per-token work items in token order, optionally from two worker threads."""
    if threads <= 1:
        for i in range(n_tokens):
            y, c1 = classify(i)
            nods, emotions, c2 = side(i)
            yield _TokenWork(i, y, nods, emotions, c1 + c2)
        return
    q_cls: queue.Queue = queue.Queue(maxsize=64)
    q_side: queue.Queue = queue.Queue(maxsize=64)
    errors: list[BaseException] = []

    def run(fn, q):
        try:
            for i in range(n_tokens):
                q.put(fn(i))
        except BaseException as exc:  # surfaced in the consumer
            errors.append(exc)
            q.put(None)

    workers = [
        threading.Thread(target=run, args=(classify, q_cls), daemon=True),
        threading.Thread(target=run, args=(side, q_side), daemon=True),
    ]
    for w in workers:
        w.start()
    for i in range(n_tokens):
        a, b = q_cls.get(), q_side.get()
        if a is None or b is None:
            break
        yield _TokenWork(i, a[0], b[0], b[1], a[1] + b[2])
    for w in workers:
        w.join()
    if errors:
        raise errors[0]


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyStats:
    decision_delay_s: float
    compute_latency_s: list[float]
    stream_latency_s: list[float]  # sentence event time minus last word-annotation end
    mean_s: float = float("nan")
    p95_s: float = float("nan")

    @property
    def count(self) -> int:
        return len(self.compute_latency_s)


def measure_latency(
    events: Sequence[TranscriptEvent],
    annotations: Sequence[sigcore.IntervalAnnotation] = (),
    blank_boundary_tokens: int = 7,
) -> LatencyStats:
    delay = blank_boundary_tokens * sigcore.TOKEN_S
    sentences = [e for e in events if e.kind == "sentence"]
    compute = [float(e.wall_latency_s) for e in sentences if e.wall_latency_s is not None]
    ends = sorted(a.end_s for a in annotations if a.kind == "word")
    stream = []
    for e in sentences:
        prior = [t for t in ends if t <= e.stream_time_s]
        if prior:
            stream.append(e.stream_time_s - prior[-1])
    stats = LatencyStats(delay, compute, stream)
    if compute:
        stats.mean_s = float(np.mean(compute))
        stats.p95_s = float(np.percentile(compute, 95))
    return stats


def event_totals(events: Sequence[TranscriptEvent]) -> dict[str, int]:
    totals = {k: 0 for k in EVENT_KINDS}
    for e in events:
        totals[e.kind] += 1
    return totals


def check_shapes(model, n: int, rate_hz: int) -> None:
    token_len = sigcore.token_len_samples(rate_hz)
    if model.config.input_len != n * token_len:
        raise ShapeError(f"model input_len {model.config.input_len} != {n} x {token_len}")
