import json

import pytest

from silentspeech import cli, runtime, synthdata as sd


def call(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def datasets(workdir):
    """Tiny healthy and patient token sets shared by the training commands."""
    common = ["--set", "speakers=1", "--set", "reps=3", "--set", "n=3"]
    assert cli.main(["gen-data", "--set", f"out={workdir}/h.itds", *common]) == 0
    assert cli.main(["gen-data", "--set", "kind=patient", "--set", f"out={workdir}/p.itds", *common]) == 0
    return workdir / "h.itds", workdir / "p.itds"


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert cli.main(["bogus"]) == cli.EXIT_CONFIG
        assert "usage" in capsys.readouterr().err

    def test_no_command(self):
        assert cli.main([]) == cli.EXIT_CONFIG

    def test_unknown_key(self):
        assert cli.main(["gen-data", "--set", "colour=blue"]) == cli.EXIT_CONFIG

    def test_malformed_set(self):
        assert cli.main(["eval", "--set", "model"]) == cli.EXIT_CONFIG

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert cli.main(["eval", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG

    def test_config_file_merges(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"kind": "teapot"}))
        assert cli.main(["gen-data", "--config", str(tmp_path / "c.json")]) == cli.EXIT_CONFIG

    def test_missing_model(self, tmp_path):
        assert cli.main(["eval", "--set", f"model={tmp_path}/none.itnn"]) == cli.EXIT_DATA

    def test_bench_threshold_failure(self, tmp_path, capsys):
        code = cli.main(["bench", "--set", f"workdir={tmp_path}", "--set", "fft_tol=1e-30"])
        assert code == cli.EXIT_THRESHOLD
        assert "criterion  2 FAIL" in capsys.readouterr().out


class TestGenData:
    def test_same_seed_same_checksum(self, capsys, tmp_path):
        args = ["--set", "speakers=1", "--set", "reps=2", "--set", "n=3"]
        _, a = call(capsys, "gen-data", "--set", f"out={tmp_path}/a.itds", *args)
        _, b = call(capsys, "gen-data", "--set", f"out={tmp_path}/b.itds", *args)
        _, c = call(capsys, "gen-data", "--set", f"out={tmp_path}/c.itds", "--set", "seed=1", *args)
        assert a[0]["crc32"] == b[0]["crc32"] != c[0]["crc32"]

    def test_groups_sidecar_roundtrip(self, datasets):
        ds = cli.load_token_dataset(datasets[0])
        assert ds.groups is not None and len(ds.groups) == len(ds)
        assert sorted(set(ds.group_words.values())) == list(range(1, 21))

    def test_dataset_without_sidecar_loads(self, datasets, tmp_path):
        ds = cli.load_token_dataset(datasets[0])
        sd.write_dataset(tmp_path / "bare.itds", ds)
        assert cli.load_token_dataset(tmp_path / "bare.itds").groups is None


def test_training_chain(capsys, datasets, workdir):
    healthy, patient = datasets
    fast = ["--set", "epochs=1", "--set", "batch_size=32"]
    code, out = call(capsys, "train-teacher", "--set", f"data={healthy}", "--set", f"out={workdir}/t.itnn", *fast)
    assert code == 0 and out[0]["out"].endswith("t.itnn")
    code, _ = call(capsys, "finetune", "--set", f"base={workdir}/t.itnn", "--set", f"data={patient}",
                   "--set", "reps=2", "--set", f"out={workdir}/f.itnn", *fast)
    assert code == 0
    code, out = call(capsys, "distill", "--set", f"teacher={workdir}/f.itnn", "--set", f"data={patient}",
                     "--set", f"out={workdir}/s.itnn", "--set", "student_variant=reference", *fast)
    assert code == 0 and 0 < out[0]["flops_ratio"] < 0.1
    code, out = call(capsys, "eval", "--set", f"model={workdir}/s.itnn", "--set", f"data={patient}",
                     "--set", f"csv={workdir}/eval.csv")
    assert code == 0 and 0.0 <= out[0]["token_accuracy"] <= 1.0
    assert (workdir / "eval.csv").read_text().startswith("true_class,recall")
    # teacher checkpoint offered where a dataset is expected
    assert cli.main(["eval", "--set", f"model={workdir}/s.itnn", "--set", f"data={workdir}/t.itnn"]) == cli.EXIT_DATA


def test_emotion_chain(capsys, workdir):
    code, out = call(capsys, "gen-data", "--set", "kind=emotion", "--set", "recordings=6", "--set", "words=20",
                     "--set", f"out={workdir}/emo.itds")
    assert code == 0 and out[0]["windows"] > 0
    code, out = call(capsys, "emotion-train", "--set", f"data={workdir}/emo.itds", "--set", "kind=lda",
                     "--set", f"out={workdir}/emo.itnn")
    assert code == 0
    code, out = call(capsys, "emotion-eval", "--set", f"model={workdir}/emo.itnn", "--set", f"data={workdir}/emo.itds")
    assert code == 0 and len(out[0]["confusion"]) == 3


def test_run_stream_to_stdout(capsys, workdir):
    code, _ = call(capsys, "gen-data", "--set", "kind=session", "--set", f"out={workdir}/s.itss")
    assert code == 0
    assert cli.main(["run-stream", "--set", f"source={workdir}/s.itss", "--set", "oracle=true"]) == 0
    lines = capsys.readouterr().out.splitlines()
    events = [json.loads(line) for line in lines]
    assert [e["kind"] for e in events].count("sentence") == 3
    assert all(e["wall_latency_s"] is None for e in events)
    assert "mode_switch" in {e["kind"] for e in events}


def test_run_stream_to_file_matches_stdout(capsys, workdir):
    cli.main(["gen-data", "--set", "kind=session", "--set", f"out={workdir}/s2.itss"])
    capsys.readouterr()
    cli.main(["run-stream", "--set", f"source={workdir}/s2.itss", "--set", "oracle=true"])
    stdout = capsys.readouterr().out
    assert cli.main(["run-stream", "--set", f"source={workdir}/s2.itss", "--set", "oracle=true",
                     "--set", f"out={workdir}/e.jsonl"]) == 0
    assert (workdir / "e.jsonl").read_text() == stdout
    assert len(runtime.read_jsonl(workdir / "e.jsonl")) == len(stdout.splitlines())


def test_run_stream_bad_pipeline_key(workdir):
    cli.main(["gen-data", "--set", "kind=session", "--set", f"out={workdir}/s3.itss"])
    code = cli.main(["run-stream", "--set", f"source={workdir}/s3.itss", "--set", "oracle=true", "--set", "pipeline.speed=9"])
    assert code == cli.EXIT_CONFIG


def test_ablate_prompts(capsys, tmp_path):
    code, rows = call(capsys, "ablate-prompts", "--set", "sentences=4", "--set", f"csv={tmp_path}/a.csv")
    assert code == 0 and [r["budget_words"] for r in rows] == [100, 200, 400, 800]
    assert (tmp_path / "a.csv").exists()
