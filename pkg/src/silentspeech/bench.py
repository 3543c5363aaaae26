"""Reference synthetic benchmark and acceptance checks.

Every stage caches its models and scores under ``cache_dir`` so the
acceptance tests, the CLI ``bench`` command and ad-hoc reruns share one
set of trained artifacts. Data is regenerated deterministically on demand.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from . import agents, emotion, runtime, sigcore, tokendec
from . import synthdata as sd
from .errors import ConfigError
from .tinynet import (
    ArchConfig,
    Model,
    TrainConfig,
    count_flops,
    load_checkpoint,
    save_checkpoint,
    student_config,
    teacher_config,
)

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("SILENTSPEECH_CACHE", Path.home() / ".cache" / "silentspeech"))


@dataclass(frozen=True)
class BenchConfig:
    vocab_seed: int = 7
    vocab_size: int = 20
    n: int = 15
    healthy_speakers: int = 10
    healthy_reps: int = 10
    healthy_seed: int = 1000
    patients: int = 5
    patient_train_reps: int = 5  # per patient; 25 per word in total
    patient_test_reps: int = 3
    patient_seed: int = 2000
    teacher_epochs: int = 4
    finetune_epochs: int = 8
    distill_epochs: tuple[int, int] = (6, 12)  # healthy stage, patient stage
    student_variant: str = "half"
    reps_grid: tuple[int, ...] = (0, 5, 10, 25)
    seeds: tuple[int, ...] = (0, 1, 2)
    emotion_train_recordings: int = 30
    emotion_test_recordings: int = 6
    emotion_words: int = 30
    emotion_f0_sd: float = 0.08
    kappas: tuple[float, ...] = (0.0, 0.01, 0.25)
    tsa_sentences: int = 200
    tsa_rate: float = 0.08
    cache_dir: str = str(DEFAULT_CACHE)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown bench keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def key(self) -> str:
        """Short digest of everything except the cache location."""
        import hashlib

        d = asdict(self)
        d.pop("cache_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


class Benchmark:
    """Lazily trained reference artifacts with an on-disk cache."""

    def __init__(self, config: BenchConfig | None = None):
        self.config = config or BenchConfig()
        self.root = Path(self.config.cache_dir) / self.config.key()
        self._results_path = self.root / "results.json"
        self.results: dict = json.loads(self._results_path.read_text()) if self._results_path.exists() else {}

    # -- cache helpers -----------------------------------------------------

    def _save_results(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self._results_path.write_text(json.dumps(self.results, indent=1, sort_keys=True))

    def _cached(self, key: str, fn: Callable[[], dict]) -> dict:
        if key not in self.results:
            t0 = time.perf_counter()
            value = fn()
            value["seconds"] = round(time.perf_counter() - t0, 1)
            self.results[key] = value
            self._save_results()
            log.info("bench %s: %s", key, value)
        return self.results[key]

    def _model(self, name: str, train: Callable[[], Model]) -> Model:
        path = self.root / f"{name}.itnn"
        if path.exists():
            return load_checkpoint(path)
        model = train()
        self.root.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, model)
        return model

    # -- data --------------------------------------------------------------

    @cached_property
    def vocab(self) -> sd.Vocabulary:
        return sd.make_vocab(self.config.vocab_seed, self.config.vocab_size)

    @property
    def classes(self) -> int:
        return self.config.vocab_size + 1

    @cached_property
    def healthy(self) -> sd.TokenDataset:
        c = self.config
        sessions = []
        for spk in range(c.healthy_speakers):
            sessions += sd.word_sessions(self.vocab, sd.healthy_speaker(spk), c.healthy_reps, seed=c.healthy_seed + spk)
        return sd.build_token_dataset(sessions, c.n, self.classes)

    def _patients(self, reps: int, offset: int) -> sd.TokenDataset:
        c = self.config
        sessions = []
        for p in range(c.patients):
            sessions += sd.word_sessions(
                self.vocab, sd.patient_speaker(100 + p), reps, seed=c.patient_seed + offset + p
            )
        return sd.build_token_dataset(sessions, c.n, self.classes)

    @cached_property
    def patient_train(self) -> sd.TokenDataset:
        return self._patients(self.config.patient_train_reps, 0)

    @cached_property
    def patient_test(self) -> sd.TokenDataset:
        return self._patients(self.config.patient_test_reps, 500)

    @property
    def teacher_arch(self) -> ArchConfig:
        return teacher_config(self.config.n * sigcore.token_len_samples(sigcore.DEFAULT_RATE_HZ), self.classes)

    @property
    def student_arch(self) -> ArchConfig:
        return student_config(
            self.config.n * sigcore.token_len_samples(sigcore.DEFAULT_RATE_HZ), self.classes, variant=self.config.student_variant
        )

    def _train_cfg(self, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(epochs=epochs, schedule="cosine", seed=seed)

    # -- token decoder -----------------------------------------------------

    def teacher(self, seed: int = 0) -> Model:
        def train():
            r = tokendec.pretrain(self.healthy, self.teacher_arch, self._train_cfg(self.config.teacher_epochs, seed))
            self.results[f"pretrain/{seed}"] = {"val_accuracy": r.val_accuracy}
            self._save_results()
            return r.model

        return self._model(f"teacher_s{seed}", train)

    def pretrain_accuracy(self, seed: int = 0) -> float:
        def run():
            model = self.teacher(seed)
            if f"pretrain/{seed}" in self.results:
                return self.results.pop(f"pretrain/{seed}")
            # checkpoint came from an earlier cache without the score: rescore the same split
            _, va = tokendec.split_by_group(self.healthy, 0.1, seed)
            return {"val_accuracy": tokendec.accuracy(model, self.healthy.subset(va))}

        return self._cached(f"pretrain_s{seed}", run)["val_accuracy"]

    def finetuned(self, reps: int, seed: int = 0) -> Model:
        return self._model(
            f"finetune_r{reps}_s{seed}",
            lambda: tokendec.finetune(
                self.teacher(seed), self.patient_train, reps, self._train_cfg(self.config.finetune_epochs, seed)
            ).model,
        )

    def transfer(self, seed: int = 0) -> dict:
        def run():
            out = {"transfer": {}, "scratch": {}}
            for reps in self.config.reps_grid:
                out["transfer"][str(reps)] = tokendec.accuracy(self.finetuned(reps, seed), self.patient_test)
            top = max(self.config.reps_grid)
            scratch = tokendec.train_scratch(
                self.patient_train, top, self.teacher_arch, self._train_cfg(self.config.finetune_epochs, seed)
            ).model
            out["scratch"][str(top)] = tokendec.accuracy(scratch, self.patient_test)
            return out

        return self._cached(f"transfer_s{seed}", run)

    def student(self) -> Model:
        """Two-stage distillation: healthy data from the pretrained teacher, then
        the patients' few-shot data from the fine-tuned teacher at a tenth of the rate."""
        top = max(self.config.reps_grid)
        e1, e2 = self.config.distill_epochs

        def train():
            first = tokendec.distill(self.teacher(0), self.student_arch, self.healthy, self._train_cfg(e1, 0))
            few = tokendec.subsample_reps(self.patient_train, top, 0)
            second = tokendec.distill(
                self.finetuned(top, 0), self.student_arch, few, self._train_cfg(e2, 0).with_(lr=1e-4), init=first.student
            )
            return second.student

        return self._model("student", train)

    def distillation(self) -> dict:
        def run():
            teacher = self.finetuned(max(self.config.reps_grid), 0)
            student = self.student()
            rep = tokendec.evaluate(student, self.patient_test)
            sal = tokendec.saliency_batch(student, self.patient_test.x[:: max(1, len(self.patient_test) // 400)], self.config.n)
            return {
                "teacher_accuracy": tokendec.accuracy(teacher, self.patient_test),
                "student_accuracy": rep.token_accuracy,
                "flops_ratio": count_flops(student.config) / count_flops(teacher.config),
                "blank_error_fraction": rep.blank_boundary_error_fraction,
                "context_saliency": float(np.mean(sal[:, :-1].sum(axis=1))),
            }

        return self._cached("distill", run)

    # -- emotion -----------------------------------------------------------

    def emotion_windows(self, kappa: float, recordings: int, seed: int) -> list[sigcore.PulseWindow]:
        """Each recording is its own subject holding one emotion for the whole session."""
        c = self.config
        out = []
        for ci, label in enumerate(sigcore.EMOTIONS):
            for r in range(recordings):
                subject = seed * 100000 + ci * 1000 + r
                rng = np.random.default_rng([subject, 5])
                script: list = [sd.EmotionSpan(label)]
                for _ in range(c.emotion_words):
                    script += [int(rng.integers(1, c.vocab_size + 1)), float(rng.uniform(0.3, 0.9))]
                stream = sd.synth_session(
                    script,
                    self.vocab,
                    sd.healthy_speaker(subject),
                    seed=subject,
                    kappa=kappa,
                    emotion_profiles=sd.subject_emotion_profiles(subject, c.emotion_f0_sd),
                )
                out += sigcore.window_pulse(stream)
        return out

    @cached_property
    def emotion_train_windows(self):
        return self.emotion_windows(0.0, self.config.emotion_train_recordings, 0)

    def emotion_test_windows(self, kappa: float):
        return self.emotion_windows(kappa, self.config.emotion_test_recordings, 1)

    def emotion_model(self, kind: str, uses_dft: bool, seed: int = 0) -> emotion.EmotionModel:
        path = self.root / f"emotion_{kind}_{'dft' if uses_dft else 'raw'}_s{seed}.itnn"
        if path.exists():
            # checkpoints hold weights only; the seeded split gives back the held-out set
            model = emotion.load_emotion_model(path)
            windows = self.emotion_train_windows
            _, te = emotion.split_windows(emotion.window_labels(windows), seed)
            model.test_indices = tuple(te.tolist())
            model.test_accuracy = emotion.eval_emotion(model, [windows[i] for i in te]).accuracy
            return model
        model = emotion.train_emotion(self.emotion_train_windows, kind, uses_dft, seed)
        self.root.mkdir(parents=True, exist_ok=True)
        model.save(path)
        return model

    def emotion_scores(self, seed: int = 0) -> dict:
        def run():
            out = {}
            for kind in ("cnn1d", "mlp"):
                for dft in (True, False):
                    out[f"{kind}_{'dft' if dft else 'raw'}"] = self.emotion_model(kind, dft, seed).test_accuracy
            return out

        return self._cached(f"emotion_s{seed}", run)

    def crosstalk(self) -> dict:
        def run():
            model = self.emotion_model("cnn1d", True, 0)
            out = {str(k): emotion.eval_emotion(model, self.emotion_test_windows(k)).accuracy for k in self.config.kappas}
            weights = emotion.freq_saliency(model, self.emotion_test_windows(0.0))
            out["low_band_mass"] = float(np.mean(emotion.low_band_mass(weights)))
            return out

        return self._cached("crosstalk", run)

    # -- agents and runtime -----------------------------------------------------

    def tsa(self) -> dict:
        def run():
            clean = agents.tsa_benchmark(self.vocab, self.config.tsa_sentences, 0.0, seed=0)
            noisy = agents.tsa_benchmark(self.vocab, self.config.tsa_sentences, self.config.tsa_rate, seed=0)
            return {
                "clean_wer": clean.wer,
                "clean_ser": clean.ser,
                "wer": noisy.wer,
                "ser": noisy.ser,
                "label_accuracy": noisy.label_accuracy,
            }

        return self._cached("tsa", run)

    def demo_session(self, seed: int = 0) -> sigcore.SignalStream:
        """Scripted sessions: three sentences, a double nod, sustained emotion."""
        v = self.config.vocab_size
        rng = np.random.default_rng([seed, 61])
        script: list = [sd.EmotionSpan("relieved"), 0.6]
        for s in range(3):
            for _ in range(int(rng.integers(2, 5))):
                script += [int(rng.integers(1, v + 1)), float(rng.uniform(0.35, 0.7))]
            script.append(1.6)
            if s == 0:
                script += [sd.NodPair(), 1.6]
        return sd.synth_session(
            script, self.vocab, sd.healthy_speaker(seed), seed=seed,
            emotion_profiles=sd.subject_emotion_profiles(seed, self.config.emotion_f0_sd),
        )

    def pipeline_config(self, **overrides) -> runtime.PipelineConfig:
        return runtime.PipelineConfig(
            n=self.config.n, vocab_seed=self.config.vocab_seed, vocab_size=self.config.vocab_size, **overrides
        )

    def replay(self) -> dict:
        """Run the recorded demo session three times from its .itss file:
        twice single-threaded, once with the two-worker pipeline."""
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "demo_session.itss"
        sigcore.write_stream(path, self.demo_session(0))
        student = self.student()
        emo = self.emotion_model("cnn1d", True, 0)
        logs = []
        events = None
        for threads in (1, 1, 2):
            stream = sigcore.read_stream(path)
            events = runtime.run_pipeline(
                stream, self.pipeline_config(threads=threads), token_model=student, emotion_model=emo
            )
            logs.append("".join(e.to_json() + "\n" for e in events))
        stats = runtime.measure_latency(events, stream.annotations)
        return {
            "identical_replays": logs[0] == logs[1],
            "identical_threads": logs[0] == logs[2],
            "latency_p95_s": stats.p95_s,
            "decision_delay_s": stats.decision_delay_s,
            "totals": runtime.event_totals(events),
        }


# ---------------------------------------------------------------------------
# acceptance


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number:2d} {'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def median_over_seeds(values) -> float:
    return float(np.median(list(values)))


def learning_criteria(bench: Benchmark) -> list[Criterion]:
    """Criteria 3-6 and 8-10, the ones that need trained models."""
    seeds = bench.config.seeds
    top = str(max(bench.config.reps_grid))
    out = []

    pre = median_over_seeds(bench.pretrain_accuracy(s) for s in seeds)
    out.append(Criterion(3, "pretraining", pre >= 0.90, f"median validation accuracy {pre:.4f} (>= 0.90)"))

    runs = [bench.transfer(s) for s in seeds]
    grid = [str(r) for r in bench.config.reps_grid]
    curve = {r: median_over_seeds(run["transfer"][r] for run in runs) for r in grid}
    scratch = median_over_seeds(run["scratch"][top] for run in runs)
    gap_ok = curve[top] >= scratch + 0.05
    zero_ok = all(curve["0"] < curve[r] + 0.02 for r in grid[1:])
    out.append(
        Criterion(
            4,
            "transfer gap",
            gap_ok and zero_ok,
            f"fine-tuned@{top} {curve[top]:.4f} vs scratch {scratch:.4f}; curve "
            + ", ".join(f"{r}:{curve[r]:.3f}" for r in grid),
        )
    )

    d = bench.distillation()
    ok = d["student_accuracy"] >= d["teacher_accuracy"] - 0.03 and d["flops_ratio"] <= 0.30
    out.append(
        Criterion(
            5,
            "distillation",
            ok,
            f"student {d['student_accuracy']:.4f} teacher {d['teacher_accuracy']:.4f} flops ratio {d['flops_ratio']:.3f}",
        )
    )
    out.append(
        Criterion(
            6, "error structure", d["blank_error_fraction"] >= 0.5,
            f"class-0 share of errors {d['blank_error_fraction']:.3f} (>= 0.50)",
        )
    )

    emo = [bench.emotion_scores(s) for s in seeds]
    med = {k: median_over_seeds(e[k] for e in emo) for k in emo[0] if k != "seconds"}
    ok = med["cnn1d_dft"] >= 0.80 and med["cnn1d_dft"] >= med["cnn1d_raw"] and med["mlp_dft"] >= med["mlp_raw"]
    out.append(Criterion(8, "emotion", ok, ", ".join(f"{k} {v:.3f}" for k, v in med.items())))

    x = bench.crosstalk()
    a0, a1, a25 = x["0.0"], x["0.01"], x["0.25"]
    ok = abs(a1 - a0) <= 0.02 and a1 > a25
    out.append(Criterion(9, "crosstalk", ok, f"kappa 0: {a0:.3f}, 0.01: {a1:.3f}, 0.25: {a25:.3f}"))

    ctx, low = d["context_saliency"], x["low_band_mass"]
    out.append(
        Criterion(
            10, "saliency", ctx > 0.05 and low >= 0.40,
            f"token context mass {ctx:.3f} (> 0.05); emotion 0-2 Hz mass {low:.3f} (>= 0.40)",
        )
    )
    return out


def runtime_criteria(bench: Benchmark) -> list[Criterion]:
    t = bench.tsa()
    ok = t["clean_wer"] == 0 and t["clean_ser"] == 0 and t["wer"] <= 0.05 and t["ser"] <= 0.04
    tsa = Criterion(7, "TSA correction", ok, f"clean {t['clean_wer']:.3f}/{t['clean_ser']:.3f}; 8%: WER {t['wer']:.4f} SER {t['ser']:.4f}")
    r = bench.replay()
    ok = r["identical_replays"] and r["identical_threads"] and r["latency_p95_s"] < 0.25
    rep = Criterion(
        11, "runtime determinism and latency", ok,
        f"replays identical {r['identical_replays']}, threads identical {r['identical_threads']}, "
        f"compute p95 {r['latency_p95_s'] * 1000:.1f} ms, decision delay {r['decision_delay_s']:.3f} s",
    )
    return [tsa, rep]


def _dp_edit(a, b) -> int:
    """Textbook full-table Levenshtein distance (oracle for the metric code)."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(
                table[i - 1][j] + 1, table[i][j - 1] + 1, table[i - 1][j - 1] + (a[i - 1] != b[j - 1])
            )
    return table[-1][-1]


def fast_criteria(workdir: Path, seed: int = 0, grad_tol: float = 1e-4, fft_tol: float = 1e-9) -> list[Criterion]:
    """Criteria 1, 2 and 12: gradient, FFT and metric/serialization oracles."""
    from .tinynet import build_model, grad_check

    rng = np.random.default_rng(seed)
    out = []

    t0 = time.perf_counter()
    input_len = 15 * sigcore.token_len_samples(sigcore.DEFAULT_RATE_HZ)
    errs = {}
    for role, arch in (("teacher", teacher_config(input_len, 21)), ("student", student_config(input_len, 21))):
        model = build_model(arch, seed)
        errs[role] = grad_check(model, rng.normal(size=(2, input_len)), 1e-4, per_kind=40)
    took = time.perf_counter() - t0
    worst = max(errs.values())
    out.append(
        Criterion(
            1, "gradient integrity", worst < grad_tol and took < 120,
            f"max rel error teacher {errs['teacher']:.2e}, student {errs['student']:.2e} in {took:.1f} s",
        )
    )

    t0 = time.perf_counter()
    fft_err, parseval = 0.0, 0.0
    sizes = [2**k for k in range(3, 11)]
    for i in range(100):
        n = sizes[i % len(sizes)]
        x = rng.normal(size=n) + 1j * rng.normal(size=n)
        k = np.arange(n)
        direct = np.exp(-2j * np.pi * np.outer(k, k) / n) @ x
        got = emotion.fft(x)
        fft_err = max(fft_err, float(np.max(np.abs(got - direct))))
        parseval = max(parseval, abs(np.sum(np.abs(x) ** 2) - np.sum(np.abs(got) ** 2) / n) / np.sum(np.abs(x) ** 2))
    took = time.perf_counter() - t0
    out.append(
        Criterion(
            2, "FFT oracle", fft_err < fft_tol and parseval < fft_tol and took < 10,
            f"max abs error {fft_err:.2e}, Parseval rel error {parseval:.2e} in {took:.2f} s",
        )
    )

    mismatches = 0
    for _ in range(1000):
        ref = rng.integers(0, 6, size=rng.integers(1, 9)).tolist()
        hyp = rng.integers(0, 6, size=rng.integers(0, 9)).tolist()
        if agents.wer(ref, hyp) != _dp_edit(ref, hyp) / len(ref):
            mismatches += 1
        if agents.ser([ref], [hyp]) != float(ref != hyp):
            mismatches += 1
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    vocab = sd.make_vocab(7, 20)
    ds = sd.build_token_dataset(sd.word_sessions(vocab, sd.healthy_speaker(0), 1, seed=1)[:1], 15, 21)
    sd.write_dataset(workdir / "rt.itds", ds)
    ds_ok = sd.read_dataset(workdir / "rt.itds").equals(ds)
    model = build_model(student_config(input_len, 21), seed)
    save_checkpoint(workdir / "rt.itnn", model)
    back = load_checkpoint(workdir / "rt.itnn")
    ck_ok = all(back.params[k].tobytes() == v.tobytes() for k, v in model.params.items()) and back.config == model.config
    crc_ok = True
    for path, reader in ((workdir / "rt.itds", sd.read_dataset), (workdir / "rt.itnn", load_checkpoint)):
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        bad = path.with_suffix(path.suffix + ".bad")
        bad.write_bytes(bytes(raw))
        try:
            reader(bad)
            crc_ok = False
        except Exception as exc:  # noqa: BLE001 - any rejection counts, the type is checked in unit tests
            crc_ok &= "checksum" in str(exc) or "corrupt" in type(exc).__name__.lower()
    out.append(
        Criterion(
            12, "metric oracles and round trips", mismatches == 0 and ds_ok and ck_ok and crc_ok,
            f"{mismatches} metric mismatches over 1000 pairs; dataset {ds_ok}, checkpoint {ck_ok}, CRC rejects {crc_ok}",
        )
    )
    return out


def all_criteria(bench: Benchmark, workdir: Path) -> list[Criterion]:
    found = fast_criteria(workdir) + runtime_criteria(bench) + learning_criteria(bench)
    return sorted(found, key=lambda c: c.number)
