"""Token synthesis and sentence expansion agents.

The token synthesis agent (TSA) turns a per-token class stream into words
with three deterministic rules (smoothing, run merging, minimum run length
per word). The sentence expansion agent (SEA) enriches a decoded sentence
with an emotion phrase and context; a template path is always available and
an optional LLM path falls back to it on any failure.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import sigcore
from .errors import (
    BudgetError,
    EmptyInput,
    EmptyReference,
    InvalidArgument,
    LengthMismatch,
    OfflineError,
    ProtocolError,
    TransportError,
)
from .synthdata import Vocabulary

log = logging.getLogger(__name__)

BLANK = 0


# ---------------------------------------------------------------------------
# constraints and merging


@dataclass(frozen=True)
class WordConstraint:
    expected_tokens: int
    min_run: int


@dataclass(frozen=True)
class ConstraintTable:
    entries: dict[int, WordConstraint]
    max_blank_gap: int = 1

    @classmethod
    def from_vocab(cls, vocab: Vocabulary, token_s: float = sigcore.TOKEN_S, max_blank_gap: int = 1):
        entries = {}
        for w in vocab.words:
            expected = max(1, int(round(w.nominal_duration_s / token_s)))
            entries[w.word_id] = WordConstraint(expected, max(2, math.ceil(expected / 2)))
        return cls(entries, max_blank_gap)

    def min_run(self, word_id: int) -> int:
        entry = self.entries.get(word_id)
        return entry.min_run if entry is not None else 2

    def expected_tokens(self, word_id: int) -> int:
        entry = self.entries.get(word_id)
        return entry.expected_tokens if entry is not None else 1


def smooth_labels(seq: Sequence[int]) -> list[int]:
    """Width-3 majority filter; three-way ties and endpoints keep their value."""
    seq = [int(v) for v in seq]
    out = list(seq)
    for i in range(1, len(seq) - 1):
        a, b, c = seq[i - 1], seq[i], seq[i + 1]
        if a == c and a != b:
            out[i] = a
    return out


@dataclass(frozen=True)
class WordRun:
    word_id: int
    start: int  # first token index
    end: int  # last token index, inclusive

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def _runs(seq: Sequence[int]) -> list[WordRun]:
    runs = []
    i = 0
    while i < len(seq):
        j = i
        while j + 1 < len(seq) and seq[j + 1] == seq[i]:
            j += 1
        if seq[i] != BLANK:
            runs.append(WordRun(int(seq[i]), i, j))
        i = j + 1
    return runs


def merge_tokens(seq: Sequence[int], table: ConstraintTable, smooth: bool = True) -> list[WordRun]:
    """Smooth, collapse runs, bridge short gaps between equal runs, drop short runs."""
    labels = [int(v) for v in seq]
    if any(v < 0 for v in labels):
        raise InvalidArgument("labels must be non-negative")
    if smooth:
        labels = smooth_labels(labels)
    merged: list[WordRun] = []
    for run in _runs(labels):
        if merged and merged[-1].word_id == run.word_id and run.start - merged[-1].end - 1 <= table.max_blank_gap:
            merged[-1] = WordRun(run.word_id, merged[-1].start, run.end)
        else:
            merged.append(run)
    return [r for r in merged if r.length >= table.min_run(r.word_id)]


@dataclass(frozen=True)
class DecodedSentence:
    words: tuple[str, ...]
    word_ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    end_timestamp_s: float = 0.0

    def __post_init__(self):
        for (a0, a1), (b0, _) in zip(self.spans, self.spans[1:]):
            if b0 <= a1:
                raise InvalidArgument("word spans must be increasing and non-overlapping")

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.words)


def synthesize_sentence(
    runs: Sequence[WordRun], vocab: Vocabulary, token_s: float = sigcore.TOKEN_S, t0_s: float = 0.0
) -> DecodedSentence:
    words = tuple(vocab.text(r.word_id) for r in runs)
    end = t0_s + (runs[-1].end + 1) * token_s if runs else t0_s
    return DecodedSentence(words, tuple(r.word_id for r in runs), tuple((r.start, r.end) for r in runs), end)


def decode_labels(seq: Sequence[int], vocab: Vocabulary, table: ConstraintTable | None = None) -> DecodedSentence:
    table = table or ConstraintTable.from_vocab(vocab)
    return synthesize_sentence(merge_tokens(seq, table), vocab)


# ---------------------------------------------------------------------------
# metrics


def _words(x) -> list[str]:
    if isinstance(x, str):
        return x.split()
    return [str(w) for w in x]


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(reference, hypothesis) -> float:
    """(S + D + I) / |reference| over whitespace tokens; may exceed 1."""
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise EmptyReference("reference has no words")
    return edit_distance(ref, hyp) / len(ref)


def ser(refs: Sequence, hyps: Sequence) -> float:
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if not refs:
        return 0.0
    return sum(_words(r) != _words(h) for r, h in zip(refs, hyps)) / len(refs)


def corpus_wer(refs: Sequence, hyps: Sequence) -> float:
    """Total edits over total reference words."""
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} references vs {len(hyps)} hypotheses")
    total = sum(len(_words(r)) for r in refs)
    if total == 0:
        raise EmptyReference("references have no words")
    return sum(edit_distance(_words(r), _words(h)) for r, h in zip(refs, hyps)) / total


# ---------------------------------------------------------------------------
# boundary-corruption benchmark


def boundary_positions(labels: Sequence[int]) -> np.ndarray:
    """Tokens on either side of a blank/word transition."""
    y = np.asarray(labels)
    idx = []
    for i in range(len(y)):
        left = y[i - 1] if i > 0 else y[i]
        right = y[i + 1] if i + 1 < len(y) else y[i]
        if y[i] == BLANK and (left != BLANK or right != BLANK):
            idx.append(i)
        elif y[i] != BLANK and (left == BLANK or right == BLANK):
            idx.append(i)
    return np.asarray(idx, dtype=np.int64)


def corrupt_boundaries(labels: Sequence[int], rate: float, rng: np.random.Generator) -> list[int]:
    """Flip each boundary token independently with probability ``rate``:
    word tokens become blank, blank tokens take the neighbouring word."""
    y = [int(v) for v in labels]
    out = list(y)
    for i in boundary_positions(y):
        if rng.random() >= rate:
            continue
        if y[i] != BLANK:
            out[i] = BLANK
        else:
            left = y[i - 1] if i > 0 else BLANK
            right = y[i + 1] if i + 1 < len(y) else BLANK
            out[i] = left if left != BLANK else right
    return out


@dataclass
class TSABenchmark:
    wer: float
    ser: float
    label_accuracy: float  # corrupted stream vs clean labels
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sentence_id", "ref", "hyp", "wer"])
            for row in self.rows:
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])


def scripted_sentences(vocab: Vocabulary, count: int, seed: int, min_words: int = 2, max_words: int = 6):
    rng = np.random.default_rng([seed, 61])
    return [
        [int(w) for w in rng.integers(1, vocab.size + 1, size=int(rng.integers(min_words, max_words + 1)))]
        for _ in range(count)
    ]


def sentence_labels(word_ids: Sequence[int], vocab: Vocabulary, seed: int, profile=None) -> list[int]:
    """Ground-truth token labels of a rendered (noiseless) sentence."""
    from . import synthdata

    rng = np.random.default_rng([seed, 67])
    script: list = [float(rng.uniform(0.4, 0.8))]
    for w in word_ids:
        script += [int(w), float(rng.uniform(0.35, 0.9))]
    stream = synthdata.synth_session(
        script, vocab, profile or synthdata.healthy_speaker(seed), seed=seed, noiseless=True
    )
    tokens = sigcore.label_tokens(sigcore.tokenize(stream), stream.annotations, stream.sample_rate_hz)
    return list(tokens)


def tsa_benchmark(
    vocab: Vocabulary, count: int = 200, rate: float = 0.08, seed: int = 0, table: ConstraintTable | None = None
) -> TSABenchmark:
    table = table or ConstraintTable.from_vocab(vocab)
    rng = np.random.default_rng([seed, 71])
    refs, hyps, rows = [], [], []
    agree = total = 0
    for k, ids in enumerate(scripted_sentences(vocab, count, seed)):
        clean = sentence_labels(ids, vocab, seed * 100003 + k)
        noisy = corrupt_boundaries(clean, rate, rng) if rate > 0 else clean
        agree += sum(a == b for a, b in zip(clean, noisy))
        total += len(clean)
        ref = " ".join(vocab.text(w) for w in ids)
        hyp = decode_labels(noisy, vocab, table).text
        refs.append(ref)
        hyps.append(hyp)
        rows.append((k, ref, hyp, wer(ref, hyp)))
    return TSABenchmark(corpus_wer(refs, hyps), ser(refs, hyps), agree / total if total else float("nan"), rows)


# ---------------------------------------------------------------------------
# prompts


DEFAULT_INSTRUCTION = (
    "You convert token label sequences from a silent speech decoder into words. "
    "Each token covers 144 milliseconds of signal and carries one class label. "
    "Label 0 is a blank token with no active word. "
    "Any other label is the identifier of a vocabulary word. "
    "A word normally spans several consecutive tokens with the same label. "
    "Repeated labels in a run belong to one spoken word, not to repeated words. "
    "A single blank token inside a run of one label is a decoding error at a boundary and must be ignored. "
    "A single isolated word label surrounded by blanks is usually noise and should be dropped. "
    "Short runs that are much shorter than the typical token count of that word are likely noise. "
    "Blank runs separate words; longer blank runs separate sentences. "
    "Keep the words strictly in the order of their runs. "
    "Never add words that have no run in the sequence. "
    "Never reorder, merge or split words beyond these rules. "
    "Write the answer as the plain sentence in lower case. "
    "Separate words with single spaces. "
    "Do not add punctuation, explanations, quotes or labels. "
    "If no word survives the rules, answer with an empty line. "
    "The vocabulary is small and fixed, so every output word must come from the vocabulary list. "
    "Patients with dysarthria articulate slowly, so runs can be longer than typical. "
    "Tremor may add short spurious runs, which the minimum run length removes. "
    "When two runs of the same word are split by one blank token, treat them as a single word. "
    "When two runs of different words touch, keep both words. "
    "Consider the whole sequence before answering. "
    "Check the final sentence against the sequence once more before you reply."
)


def _vocab_line(vocab: Vocabulary) -> str:
    return "Vocabulary: " + ", ".join(f"{w.word_id}={w.text}" for w in vocab.words) + "."


def default_examples(vocab: Vocabulary, count: int = 5, seed: int = 0) -> tuple[tuple[tuple[int, ...], str], ...]:
    out = []
    table = ConstraintTable.from_vocab(vocab)
    rng = np.random.default_rng([seed, 79])
    for k, ids in enumerate(scripted_sentences(vocab, count, seed + 1, 2, 4)):
        labels = corrupt_boundaries(sentence_labels(ids, vocab, 7000 + k), 0.15, rng)
        out.append((tuple(labels), decode_labels(labels, vocab, table).text))
    return tuple(out)


@dataclass(frozen=True)
class PromptSpec:
    instruction: str = DEFAULT_INSTRUCTION
    examples: tuple[tuple[tuple[int, ...], str], ...] = ()
    use_examples: bool = True
    use_constraints: bool = True
    budget_words: int = 400

    def __post_init__(self):
        if self.budget_words <= 0:
            raise InvalidArgument("prompt budget must be positive")
        for labels, words in self.examples:
            if any(int(v) < 0 for v in labels) or not isinstance(words, str):
                raise InvalidArgument("examples must pair non-negative label sequences with text")


@dataclass(frozen=True)
class BuiltPrompt:
    text: str
    word_count: int
    examples_used: int
    instruction_sentences: int


def _count(text: str) -> int:
    return len(text.split())


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=\.)\s+", text.strip()) if s.strip()]


def build_tsa_prompt(
    labels: Sequence[int], spec: PromptSpec, table: ConstraintTable, vocab: Vocabulary | None = None
) -> BuiltPrompt:
    """Assemble a TSA prompt within ``spec.budget_words`` whitespace words.

    Mandatory: the first instruction sentence, the constraints section (if
    enabled), the vocabulary line and the query. Whole examples and then
    further instruction sentences are added while they fit.
    """
    sentences = _sentences(spec.instruction)
    query = "Sequence: " + " ".join(str(int(v)) for v in labels) + "\nAnswer:"
    mandatory = [query]
    if vocab is not None:
        mandatory.append(_vocab_line(vocab))
    constraints = ""
    if spec.use_constraints:
        items = ", ".join(
            f"{wid}:{c.expected_tokens}/{c.min_run}" for wid, c in sorted(table.entries.items())
        )
        constraints = (
            "Constraints (word:typical tokens/minimum run): " + items
            + f". At most {table.max_blank_gap} blank token may split one word."
        )
        mandatory.append(constraints)
    used = sum(_count(p) for p in mandatory) + (_count(sentences[0]) if sentences else 0)
    if used > spec.budget_words:
        raise BudgetError(f"mandatory prompt content needs {used} words, budget is {spec.budget_words}")
    blocks = []
    if spec.use_examples:
        for labels_ex, words in spec.examples:
            block = "Sequence: " + " ".join(str(int(v)) for v in labels_ex) + "\nAnswer: " + words
            cost = _count(block) + (0 if blocks else 1)  # 1 = "Examples:" header
            if used + cost > spec.budget_words:
                break
            used += cost
            blocks.append(block)
    n_sent = 1 if sentences else 0
    for s in sentences[1:]:
        if used + _count(s) > spec.budget_words:
            break
        used += _count(s)
        n_sent += 1
    parts = [" ".join(sentences[:n_sent])]
    if vocab is not None:
        parts.append(_vocab_line(vocab))
    if constraints:
        parts.append(constraints)
    if blocks:
        parts.append("Examples:\n" + "\n\n".join(blocks))
    parts.append(query)
    text = "\n\n".join(p for p in parts if p)
    return BuiltPrompt(text, _count(text), len(blocks), n_sent)


# ---------------------------------------------------------------------------
# LLM client


@dataclass(frozen=True)
class LLMConfig:
    endpoint: str = ""
    model: str = ""
    key: str = ""
    offline: bool = True
    timeout_s: float = 30.0

    @classmethod
    def from_env(cls, env: dict | None = None) -> "LLMConfig":
        env = os.environ if env is None else env
        return cls(
            endpoint=env.get("IT_LLM_ENDPOINT", ""),
            model=env.get("IT_LLM_MODEL", ""),
            key=env.get("IT_LLM_KEY", ""),
            offline=env.get("IT_OFFLINE", "1") != "0",
        )


def llm_complete(prompt: str, config: LLMConfig | None = None) -> str:
    """One chat-completion POST; no retries."""
    config = config or LLMConfig.from_env()
    if config.offline:
        raise OfflineError("offline mode (IT_OFFLINE=1); use the deterministic path")
    if not config.endpoint:
        raise OfflineError("no LLM endpoint configured (IT_LLM_ENDPOINT)")
    body = json.dumps({"model": config.model, "messages": [{"role": "user", "content": prompt}]}).encode()
    headers = {"Content-Type": "application/json"}
    if config.key:
        headers["Authorization"] = f"Bearer {config.key}"
    req = urllib.request.Request(config.endpoint, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=config.timeout_s) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        raise TransportError(f"LLM endpoint returned {exc.code}", status=exc.code) from exc
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise TransportError(f"LLM request failed: {exc}") from exc
    try:
        payload = json.loads(raw)
        content = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError("LLM response is not a chat completion") from exc
    if not isinstance(content, str):
        raise ProtocolError("LLM message content is not text")
    return content


def tsa_decode(
    labels: Sequence[int],
    vocab: Vocabulary,
    table: ConstraintTable | None = None,
    spec: PromptSpec | None = None,
    config: LLMConfig | None = None,
) -> tuple[str, str]:
    """LLM-backed TSA with the deterministic decoder as fallback.

    Returns (sentence, source) where source is "llm" or "rules".
    """
    table = table or ConstraintTable.from_vocab(vocab)
    fallback = decode_labels(labels, vocab, table).text
    try:
        prompt = build_tsa_prompt(labels, spec or PromptSpec(), table, vocab)
        answer = llm_complete(prompt.text, config)
    except (OfflineError, TransportError, ProtocolError, BudgetError) as exc:
        log.debug("TSA falls back to rules: %s", exc)
        return fallback, "rules"
    words = answer.strip().lower().split()
    known = {w.text for w in vocab.words}
    if any(w not in known for w in words):
        return fallback, "rules"
    return " ".join(words), "llm"


# ---------------------------------------------------------------------------
# sentence expansion


TIMES_OF_DAY = ("morning", "afternoon", "evening", "night")
WEATHER = ("sunny", "cloudy", "rainy", "snowy", "windy", "foggy")

EMOTION_LEXICON = {
    "relieved": ("what a relief", "thankfully", "i feel much better now", "that is a weight off my mind"),
    "frustrated": ("honestly this is frustrating", "i am fed up", "this is really getting to me", "ugh"),
}


@dataclass(frozen=True)
class ContextRecord:
    emotion: str = "neutral"
    time_of_day: str = "morning"
    weather: str = "sunny"
    location: str = ""

    def __post_init__(self):
        if self.emotion not in sigcore.EMOTIONS:
            raise InvalidArgument(f"unknown emotion {self.emotion!r}")
        if self.time_of_day not in TIMES_OF_DAY:
            raise InvalidArgument(f"unknown time of day {self.time_of_day!r}")
        if self.weather not in WEATHER:
            raise InvalidArgument(f"unknown weather {self.weather!r}")


def _norm_tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


def _contains_phrase(tokens: list[str], phrase: str) -> bool:
    p = phrase.split()
    return any(tokens[i : i + len(p)] == p for i in range(len(tokens) - len(p) + 1))


def length_cap(basic_words: int) -> int:
    return 4 * basic_words + 12


def _pick(options: Sequence[str], key: str) -> str:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return options[digest[0] % len(options)]


def _basic_words(basic) -> list[str]:
    return list(basic.words) if isinstance(basic, DecodedSentence) else _words(basic)


def expand_template(basic, ctx: ContextRecord) -> str:
    words = _basic_words(basic)
    if not words:
        raise EmptyInput("nothing to expand")
    core = " ".join(words)
    core = core[0].upper() + core[1:] + "."
    parts = []
    if ctx.emotion != "neutral":
        phrase = _pick(EMOTION_LEXICON[ctx.emotion], core + ctx.emotion)
        parts.append(phrase[0].upper() + phrase[1:] + ".")
    parts.append(core)
    article = "an" if ctx.time_of_day[0] in "aeiou" else "a"
    objective = f"It is {article} {ctx.weather} {ctx.time_of_day}"
    with_location = objective + (f" here at {ctx.location}." if ctx.location else ".")
    cap = length_cap(len(words))
    if _count(" ".join(parts + [with_location])) <= cap:
        parts.append(with_location)
    elif _count(" ".join(parts + [objective + "."])) <= cap:
        parts.append(objective + ".")
    return " ".join(parts)


def sea_prompt(basic, ctx: ContextRecord) -> str:
    words = _basic_words(basic)
    return "\n".join(
        [
            "You help a patient with a speech impairment express a short decoded sentence.",
            f"Decoded sentence: {' '.join(words)}",
            f"Detected emotion: {ctx.emotion}",
            f"Context: time of day {ctx.time_of_day}, weather {ctx.weather}"
            + (f", location {ctx.location}" if ctx.location else "") + ".",
            "Think step by step before answering:",
            "1. State the core meaning of the decoded sentence and keep every one of its words in order.",
            "2. Decide how the detected emotion should colour the sentence; add no emotion wording if neutral.",
            "3. Add the context only where it helps the listener.",
            f"4. Keep the result under {length_cap(len(words))} words.",
            "Reply with the final sentence on the last line, prefixed by 'Final:'.",
        ]
    )


def expand_sentence(basic, ctx: ContextRecord, mode: str = "template", config: LLMConfig | None = None) -> str:
    """Expanded sentence; the LLM path falls back to the template on any failure."""
    words = _basic_words(basic)
    if not words:
        raise EmptyInput("nothing to expand")
    if mode == "template":
        return expand_template(words, ctx)
    if mode != "llm":
        raise InvalidArgument(f"unknown expansion mode {mode!r}")
    try:
        answer = llm_complete(sea_prompt(words, ctx), config)
    except (OfflineError, TransportError, ProtocolError) as exc:
        log.debug("SEA falls back to template: %s", exc)
        return expand_template(words, ctx)
    final = [line for line in answer.splitlines() if line.strip().lower().startswith("final:")]
    text = final[-1].split(":", 1)[1].strip() if final else answer.strip()
    if not check_expansion(words, text, ctx).ok:
        return expand_template(words, ctx)
    return text


@dataclass(frozen=True)
class ExpansionCheck:
    ok: bool
    violations: tuple[str, ...]


def check_expansion(basic, expanded: str, ctx: ContextRecord) -> ExpansionCheck:
    words = [w.lower() for w in _basic_words(basic)]
    tokens = _norm_tokens(expanded)
    violations = []
    if any(w not in tokens for w in words):
        violations.append("missing-content-word")
    else:
        pos = 0
        for w in words:
            try:
                pos = tokens.index(w, pos) + 1
            except ValueError:
                violations.append("order-violation")
                break
    if ctx.emotion == "neutral":
        has_phrase = any(_contains_phrase(tokens, p) for ps in EMOTION_LEXICON.values() for p in ps)
    else:
        has_phrase = not any(_contains_phrase(tokens, p) for p in EMOTION_LEXICON[ctx.emotion])
    if has_phrase:
        violations.append("emotion-phrase")
    if len(expanded.split()) > length_cap(len(words)):
        violations.append("too-long")
    return ExpansionCheck(not violations, tuple(violations))


# ---------------------------------------------------------------------------
# prompt-length ablation


PROMPT_BUDGETS = (100, 200, 400, 800)


@dataclass
class AblationRow:
    budget_words: int
    word_count: int
    examples_used: int
    wer: float
    ser: float
    source: str


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["budget_words", "word_count", "examples_used", "wer", "ser", "source"])
        for r in rows:
            w.writerow([r.budget_words, r.word_count, r.examples_used, f"{r.wer:.6f}", f"{r.ser:.6f}", r.source])


def ablate_prompts(
    vocab: Vocabulary,
    budgets: Iterable[int] = PROMPT_BUDGETS,
    count: int = 50,
    rate: float = 0.08,
    seed: int = 0,
    config: LLMConfig | None = None,
) -> list[AblationRow]:
    """TSA prompt-length sweep. Offline, every row reports the rule decoder."""
    table = ConstraintTable.from_vocab(vocab)
    examples = default_examples(vocab, 5, seed)
    rng = np.random.default_rng([seed, 83])
    cases = []
    for k, ids in enumerate(scripted_sentences(vocab, count, seed + 2)):
        labels = corrupt_boundaries(sentence_labels(ids, vocab, 9000 + k), rate, rng)
        cases.append((" ".join(vocab.text(w) for w in ids), labels))
    rows = []
    for budget in budgets:
        spec = PromptSpec(examples=examples, budget_words=int(budget))
        refs, hyps, sources = [], [], set()
        built = None
        for ref, labels in cases:
            try:
                built = build_tsa_prompt(labels, spec, table, vocab)
            except BudgetError:
                built = None
            hyp, source = tsa_decode(labels, vocab, table, spec, config)
            refs.append(ref)
            hyps.append(hyp)
            sources.add(source)
        rows.append(
            AblationRow(
                int(budget),
                built.word_count if built else -1,
                built.examples_used if built else 0,
                corpus_wer(refs, hyps),
                ser(refs, hyps),
                "+".join(sorted(sources)),
            )
        )
    return rows
