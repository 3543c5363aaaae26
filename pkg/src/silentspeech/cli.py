"""Command line entry point.

Every subcommand reads one JSON config (``--config``) merged over its
defaults, then ``--set key=value`` overrides (values parsed as JSON when
possible, dotted keys reach nested objects). Exit codes: 0 success,
2 config error or unknown subcommand, 3 data error, 4 failed acceptance
threshold in ``bench``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import agents, bench, emotion, runtime, sigcore, tokendec
from . import synthdata as sd
from .errors import (
    BudgetError,
    ConfigError,
    CorruptFile,
    EmptyInput,
    FormatError,
    InsufficientData,
    InvalidAnnotations,
    ShapeError,
    UnsupportedModel,
)
from .tinynet import DistillConfig, TrainConfig, load_checkpoint, save_checkpoint, student_config, teacher_config

log = logging.getLogger("silentspeech")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_THRESHOLD = 0, 2, 3, 4
DATA_ERRORS = (FormatError, CorruptFile, InsufficientData, EmptyInput, ShapeError, InvalidAnnotations, UnsupportedModel, OSError)

TRAIN_KEYS = {"lr": 1e-3, "batch_size": 64, "epochs": 4, "seed": 0, "schedule": "cosine", "weight_decay": 0.0}

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "kind": "healthy",  # healthy | patient | emotion | session
        "out": "data.itds",
        "vocab_size": 20,
        "vocab_seed": 7,
        "seed": 0,
        "speakers": 10,
        "reps": 10,
        "n": 15,
        "snr_db": 20.0,
        "kappa": 0.0,
        "recordings": 10,
        "words": 30,
    },
    "train-teacher": {"data": "healthy.itds", "out": "teacher.itnn", "role": "teacher", **TRAIN_KEYS},
    "finetune": {"base": "teacher.itnn", "data": "patient.itds", "reps": 25, "out": "finetuned.itnn", **TRAIN_KEYS, "epochs": 8},
    "distill": {
        "teacher": "finetuned.itnn",
        "data": "patient.itds",
        "init": None,
        "eval_data": None,
        "out": "student.itnn",
        "temperature": 4.0,
        "alpha": 0.5,
        "student_variant": "half",
        **TRAIN_KEYS,
    },
    "eval": {"model": "student.itnn", "data": "patient_test.itds", "csv": None},
    "emotion-train": {"data": "emotion.itds", "kind": "cnn1d", "uses_dft": True, "seed": 0, "out": "emotion.itnn"},
    "emotion-eval": {"model": "emotion.itnn", "data": "emotion_test.itds", "csv": None},
    "run-stream": {
        "source": "session.itss",
        "token_checkpoint": None,
        "emotion_checkpoint": None,
        "oracle": False,
        "include_wall": False,
        "out": None,
        "pipeline": {},
    },
    "bench": {"tier": "fast", "workdir": "bench-work", "grad_tol": 1e-4, "fft_tol": 1e-9, "config": {}},
    "ablate-prompts": {"vocab_size": 20, "vocab_seed": 7, "sentences": 20, "seed": 0, "csv": None},
}


# ---------------------------------------------------------------------------
# config handling


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and base[k]:
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(command: str, path: str | None, sets: list[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if parts[0] not in cfg:
            raise ConfigError(f"unknown config key {parts[0]!r}")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not an object")
        node[parts[-1]] = _parse_value(value)
    return cfg


def _train_config(cfg: dict, **extra) -> TrainConfig:
    try:
        return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS}, **extra).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# dataset files with utterance groups


def _groups_path(path) -> Path:
    return Path(str(path) + ".groups.json")


def save_token_dataset(path, ds: sd.TokenDataset) -> None:
    sd.write_dataset(path, ds)
    if ds.groups is not None:
        _groups_path(path).write_text(
            json.dumps({"groups": ds.groups.tolist(), "group_words": {str(k): v for k, v in ds.group_words.items()}})
        )


def load_token_dataset(path) -> sd.TokenDataset:
    ds = sd.read_dataset(path)
    side = _groups_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        groups = np.asarray(meta["groups"], dtype=np.int64)
        if len(groups) != len(ds):
            raise CorruptFile(f"{side}: group count does not match the dataset")
        ds.groups = groups
        ds.group_words = {int(k): int(v) for k, v in meta["group_words"].items()}
    return ds


def _emotion_windows(path) -> list[sigcore.PulseWindow]:
    ds = sd.read_dataset(path)
    if ds.n != 1 or ds.token_len != emotion.WINDOW_LEN or ds.class_count != len(sigcore.EMOTIONS):
        raise FormatError(f"{path}: not an emotion dataset (n=1, token_len={emotion.WINDOW_LEN}, 3 classes)")
    return [sigcore.PulseWindow(x.astype(np.float64), sigcore.EMOTIONS[int(y)]) for x, y in zip(ds.x, ds.y)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict) -> int:
    kind = cfg["kind"]
    vocab = sd.make_vocab(cfg["vocab_seed"], cfg["vocab_size"])
    seed = cfg["seed"]
    if kind in ("healthy", "patient"):
        sessions = []
        for s in range(cfg["speakers"]):
            profile = sd.healthy_speaker(s) if kind == "healthy" else sd.patient_speaker(100 + s)
            sessions += sd.word_sessions(
                vocab, profile, cfg["reps"], seed=sd.derive_seed(seed, s), noise_snr_db=cfg["snr_db"]
            )
        ds = sd.build_token_dataset(sessions, cfg["n"], vocab.size + 1, config=cfg)
        save_token_dataset(cfg["out"], ds)
        _emit({"out": cfg["out"], "samples": len(ds), "crc32": sd.file_crc(cfg["out"])})
    elif kind == "emotion":
        b = bench.Benchmark(
            bench.BenchConfig(vocab_seed=cfg["vocab_seed"], vocab_size=cfg["vocab_size"], emotion_words=cfg["words"])
        )
        windows = b.emotion_windows(cfg["kappa"], cfg["recordings"], seed)
        x = np.stack([w.values for w in windows]).astype(np.float32)
        y = emotion.window_labels(windows)
        sd.write_dataset(cfg["out"], sd.TokenDataset(1, emotion.WINDOW_LEN, 3, x, y))
        _emit({"out": cfg["out"], "windows": len(windows), "crc32": sd.file_crc(cfg["out"])})
    elif kind == "session":
        b = bench.Benchmark(bench.BenchConfig(vocab_seed=cfg["vocab_seed"], vocab_size=cfg["vocab_size"]))
        stream = b.demo_session(seed)
        sigcore.write_stream(cfg["out"], stream)
        _emit({"out": cfg["out"], "duration_s": stream.duration_s, "crc32": sd.file_crc(cfg["out"])})
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    return EXIT_OK


def cmd_train_teacher(cfg: dict) -> int:
    ds = load_token_dataset(cfg["data"])
    factory = {"teacher": teacher_config, "student": student_config}.get(cfg["role"])
    if factory is None:
        raise ConfigError(f"unknown role {cfg['role']!r}")
    result = tokendec.pretrain(ds, factory(ds.input_len, ds.class_count), _train_config(cfg))
    save_checkpoint(cfg["out"], result.model)
    _emit({"out": cfg["out"], "val_accuracy": result.val_accuracy, "best_epoch": result.best_epoch})
    return EXIT_OK


def cmd_finetune(cfg: dict) -> int:
    base = load_checkpoint(cfg["base"])
    ds = load_token_dataset(cfg["data"])
    result = tokendec.finetune(base, ds, cfg["reps"], _train_config(cfg))
    save_checkpoint(cfg["out"], result.model)
    _emit({"out": cfg["out"], "val_accuracy": result.val_accuracy})
    return EXIT_OK


def cmd_distill(cfg: dict) -> int:
    teacher = load_checkpoint(cfg["teacher"])
    ds = load_token_dataset(cfg["data"])
    init = load_checkpoint(cfg["init"]) if cfg["init"] else None
    arch = init.config if init is not None else student_config(ds.input_len, ds.class_count, variant=cfg["student_variant"])
    train = _train_config(cfg, distill=DistillConfig(cfg["temperature"], cfg["alpha"]))
    eval_ds = load_token_dataset(cfg["eval_data"]) if cfg["eval_data"] else None
    result = tokendec.distill(teacher, arch, ds, train, eval_ds=eval_ds, init=init)
    save_checkpoint(cfg["out"], result.student)
    _emit(
        {
            "out": cfg["out"],
            "teacher_accuracy": result.teacher_accuracy,
            "student_accuracy": result.student_accuracy,
            "flops_ratio": result.flops_ratio,
        }
    )
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    report = tokendec.evaluate(load_checkpoint(cfg["model"]), load_token_dataset(cfg["data"]))
    if cfg["csv"]:
        tokendec.write_eval_csv(cfg["csv"], report)
    _emit(
        {
            "token_accuracy": report.token_accuracy,
            "errors": report.errors,
            "blank_boundary_error_fraction": report.blank_boundary_error_fraction,
        }
    )
    return EXIT_OK


def cmd_emotion_train(cfg: dict) -> int:
    windows = _emotion_windows(cfg["data"])
    model = emotion.train_emotion(windows, cfg["kind"], bool(cfg["uses_dft"]), cfg["seed"])
    model.save(cfg["out"])
    _emit({"out": cfg["out"], "test_accuracy": model.test_accuracy})
    return EXIT_OK


def cmd_emotion_eval(cfg: dict) -> int:
    report = emotion.eval_emotion(emotion.load_emotion_model(cfg["model"]), _emotion_windows(cfg["data"]))
    if cfg["csv"]:
        report.write_csv(cfg["csv"])
    _emit({"accuracy": report.accuracy, "confusion": report.confusion.tolist()})
    return EXIT_OK


def cmd_run_stream(cfg: dict) -> int:
    pipe = dict(cfg["pipeline"])
    pipe.setdefault("token_checkpoint", cfg["token_checkpoint"])
    pipe.setdefault("emotion_checkpoint", cfg["emotion_checkpoint"])
    config = runtime.PipelineConfig.from_dict(pipe)
    stream = sigcore.read_stream(cfg["source"])
    classifier = runtime.OracleClassifier(stream) if cfg["oracle"] else None
    events = runtime.run_pipeline(stream, config, classifier=classifier)
    if cfg["out"]:
        runtime.write_jsonl(cfg["out"], events, cfg["include_wall"])
    else:
        runtime.write_jsonl(sys.stdout, events, cfg["include_wall"])
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    workdir = Path(cfg["workdir"])
    if cfg["tier"] not in ("fast", "full"):
        raise ConfigError(f"unknown bench tier {cfg['tier']!r}")
    found = bench.fast_criteria(workdir, grad_tol=cfg["grad_tol"], fft_tol=cfg["fft_tol"])
    if cfg["tier"] == "full":
        b = bench.Benchmark(bench.BenchConfig.from_dict(cfg["config"]))
        found += bench.runtime_criteria(b) + bench.learning_criteria(b)
    found.sort(key=lambda c: c.number)
    for c in found:
        print(c.line())
    return EXIT_OK if all(c.passed for c in found) else EXIT_THRESHOLD


def cmd_ablate_prompts(cfg: dict) -> int:
    vocab = sd.make_vocab(cfg["vocab_seed"], cfg["vocab_size"])
    rows = agents.ablate_prompts(vocab, count=cfg["sentences"], seed=cfg["seed"])
    if cfg["csv"]:
        agents.write_ablation_csv(cfg["csv"], rows)
    for row in rows:
        _emit(asdict(row))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "finetune": cmd_finetune,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "emotion-train": cmd_emotion_train,
    "emotion-eval": cmd_emotion_eval,
    "run-stream": cmd_run_stream,
    "bench": cmd_bench,
    "ablate-prompts": cmd_ablate_prompts,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="silentspeech", description="Silent speech decoding toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in COMMANDS and not argv[0].startswith("-"):
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, args.set)
        return COMMANDS[args.command](cfg)
    except (ConfigError, BudgetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
