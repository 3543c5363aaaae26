import io
import json

import numpy as np
import pytest

from silentspeech import agents, emotion, runtime, sigcore
from silentspeech import synthdata as sd
from silentspeech.errors import ConfigError
from silentspeech.runtime import NodParams, PipelineConfig, TranscriptEvent
from silentspeech.tinynet import ArchConfig, build_model, save_checkpoint

RATE = sigcore.DEFAULT_RATE_HZ
SENTENCES = [[3, 7], [12, 5, 9], [1, 18]]


def scripted(vocab, nod_after=None, seed=4, emotion_label=None, noiseless=True):
    script: list = [sd.EmotionSpan(emotion_label)] if emotion_label else []
    script.append(0.6)
    for s, ids in enumerate(SENTENCES):
        for w in ids:
            script += [w, 0.5]
        script.append(1.6)
        if s == nod_after:
            script += [sd.NodPair(), 1.6]
    return sd.synth_session(script, vocab, sd.healthy_speaker(seed), seed=seed, noiseless=noiseless)


def run(stream, **kw):
    return runtime.run_pipeline(stream, PipelineConfig(**kw), classifier=runtime.OracleClassifier(stream))


def sentences(events):
    return [e.payload["text"] for e in events if e.kind == "sentence"]


def fixed_emotion(bias):
    net = build_model(emotion.emotion_arch("lda", True), 0, dtype=np.float64)
    net.params["head.w"][...] = 0
    net.params["head.b"][...] = bias
    return emotion.EmotionModel("lda", True, net)


def truncate(stream, seconds):
    n = int(round(seconds * stream.sample_rate_hz))
    return sigcore.SignalStream(stream.sample_rate_hz, stream.channels, stream.samples[:, :n])


@pytest.fixture(scope="module")
def session(vocab):
    return scripted(vocab)


@pytest.fixture(scope="module")
def tiny_model():
    """Random two-token linear model: enough to exercise the streaming path."""
    return build_model(ArchConfig(input_len=2 * 72, classes=21, kind="mlp", hidden=()), 3)


# -- double nod ---------------------------------------------------------------------


def bumps(count, amplitude=3.0, lead_s=2.0, tail_s=1.0):
    one = sd.nod_waveform(amplitude, RATE)[: int(sd.NOD_BUMP_S * RATE)]
    gap = np.zeros(int(sd.NOD_GAP_S * RATE))
    parts = [np.zeros(int(lead_s * RATE))]
    for i in range(count):
        parts += [one] + ([gap] if i < count - 1 else [])
    parts.append(np.zeros(int(tail_s * RATE)))
    return np.concatenate(parts)


class TestNod:
    def test_single_bump(self):
        assert runtime.detect_double_nod(bumps(1)) == []

    # a causal moving average delays a symmetric bump's peak by half its width
    LAG = NodParams().smooth_s / 2

    def test_pair(self):
        events = runtime.detect_double_nod(bumps(2))
        second_peak = 2.0 + sd.NOD_BUMP_S + sd.NOD_GAP_S + sd.NOD_BUMP_S / 2
        assert len(events) == 1
        assert events[0] == pytest.approx(second_peak + self.LAG, abs=0.01)

    def test_three_bumps_pair_greedily(self):
        events = runtime.detect_double_nod(bumps(3))
        assert len(events) == 1
        assert events[0] == pytest.approx(2.0 + 1.5 * sd.NOD_BUMP_S + sd.NOD_GAP_S + self.LAG, abs=0.01)

    def test_second_double_nod_after_history_clears(self):
        x = np.concatenate([bumps(2, tail_s=11.0), bumps(2, lead_s=0.0)])
        assert len(runtime.detect_double_nod(x)) == 2

    def test_back_to_back_pairs_raise_the_threshold(self):
        # the first pair enters the running percentile and masks the second
        assert len(runtime.detect_double_nod(bumps(4))) == 1

    def test_gap_too_long(self):
        one = sd.nod_waveform(3.0, RATE)[: int(sd.NOD_BUMP_S * RATE)]
        x = np.concatenate([np.zeros(RATE), one, np.zeros(2 * RATE), one, np.zeros(RATE)])
        assert runtime.detect_double_nod(x) == []

    def test_below_floor(self):
        assert runtime.detect_double_nod(bumps(2, amplitude=0.3)) == []

    def test_chunking_does_not_matter(self):
        x = bumps(2) + np.random.default_rng(0).normal(0, 0.05, len(bumps(2)))
        ref = runtime.detect_double_nod(x, chunk=72)
        assert runtime.detect_double_nod(x, chunk=1) == ref
        assert runtime.detect_double_nod(x, chunk=len(x)) == ref

    def test_speech_alone_is_not_a_nod(self, session):
        assert runtime.detect_double_nod(session.channel(sigcore.SPEECH)) == []

    def test_session_nod_detected(self, vocab):
        stream = scripted(vocab, nod_after=0, noiseless=False)
        nod = [a for a in stream.annotations if a.kind == "nod"][0]
        events = runtime.detect_double_nod(stream.channel(sigcore.SPEECH))
        assert len(events) == 1 and nod.start_s < events[0] <= nod.end_s

    def test_param_validation(self):
        with pytest.raises(ConfigError):
            NodParams(min_gap_s=2.0, max_gap_s=1.0).validate()
        with pytest.raises(ConfigError):
            NodParams(history_s=0.5).validate()


# -- segmentation -----------------------------------------------------------------------


class TestSegmenter:
    def test_closes_after_k_blanks(self, vocab):
        labels = [0] + [4] * 8 + [0, 0, 0]
        out = runtime.decode_stream_labels(labels, vocab, k=3)
        assert len(out) == 1 and out[0][1] == 11 and out[0][0].word_ids == (4,)

    def test_open_sentence_not_flushed(self, vocab):
        assert runtime.decode_stream_labels([0] + [4] * 8 + [0, 0], vocab, k=3) == []

    def test_spans_are_absolute(self, vocab):
        labels = [4] * 8 + [0] * 5 + [6] * 8 + [0] * 3
        out = runtime.decode_stream_labels(labels, vocab, k=3)
        assert [s.spans for s, _ in out] == [((0, 7),), ((13, 20),)]

    def test_streaming_equals_batch(self, vocab):
        rng = np.random.default_rng(2)
        labels = rng.choice([0, 0, 0, 0, 5, 8], size=300).tolist()
        table = agents.ConstraintTable.from_vocab(vocab)
        seg = runtime.Segmenter(7, table)
        pushed = [seg.push(y) for y in labels]
        closing = [i for i, p in enumerate(pushed) if p is not None]
        assert closing == [i for _, i in runtime.decode_stream_labels(labels, vocab, 7, table)]


# -- pipeline ---------------------------------------------------------------------------


class TestPipeline:
    def test_three_sentences_match_script(self, vocab, session):
        events = run(session)
        assert sentences(events) == [" ".join(vocab.text(w) for w in ids) for ids in SENTENCES]
        words = [e.payload["word_id"] for e in events if e.kind == "word"]
        assert words == [w for ids in SENTENCES for w in ids]

    def test_totals_equal_batch_decode(self, vocab, session):
        labels = runtime.OracleClassifier(session).labels
        batch = runtime.decode_stream_labels(labels, vocab)
        totals = runtime.event_totals(run(session))
        assert totals["sentence"] == len(batch)
        assert totals["word"] == sum(len(s) for s, _ in batch)

    def test_sentence_emitted_at_closing_token(self, vocab, session):
        labels = runtime.OracleClassifier(session).labels
        closing = [i for _, i in runtime.decode_stream_labels(labels, vocab)]
        times = [e.stream_time_s for e in run(session) if e.kind == "sentence"]
        assert times == [round((i + 1) * sigcore.TOKEN_S, 6) for i in closing]

    def test_no_words_no_sentences(self):
        stream = sigcore.SignalStream(RATE, (sigcore.SPEECH,), np.zeros(5 * RATE))
        assert sentences(run(stream)) == []

    def test_replay_is_identical(self, session, tiny_model):
        cfg = PipelineConfig(n=2)
        logs = [
            "".join(e.to_json() + "\n" for e in runtime.run_pipeline(session, cfg, token_model=tiny_model))
            for _ in range(2)
        ]
        assert logs[0] == logs[1]

    def test_threads_do_not_change_output(self, vocab, tiny_model):
        stream = scripted(vocab, nod_after=1, emotion_label="frustrated", noiseless=False)
        emo = fixed_emotion(np.array([0.0, 0.0, 1.0]))
        a = runtime.run_pipeline(stream, PipelineConfig(n=2, threads=1), token_model=tiny_model, emotion_model=emo)
        b = runtime.run_pipeline(stream, PipelineConfig(n=2, threads=2), token_model=tiny_model, emotion_model=emo)
        assert [e.to_json() for e in a] == [e.to_json() for e in b]

    def test_causal(self, session, tiny_model):
        """Events up to a cut point do not depend on samples after it."""
        cfg = PipelineConfig(n=2)
        full = runtime.run_pipeline(session, cfg, token_model=tiny_model)
        cut = 6.0
        part = runtime.run_pipeline(truncate(session, cut), cfg, token_model=tiny_model)
        early = [e.to_json() for e in full if e.stream_time_s <= cut]
        assert [e.to_json() for e in part] == early

    def test_nod_switches_to_expanded(self, vocab):
        stream = scripted(vocab, nod_after=0, noiseless=False)
        events = run(stream, context=agents.ContextRecord("relieved", "evening", "rainy"))
        switches = [e for e in events if e.kind == "mode_switch"]
        assert [e.payload["mode"] for e in switches] == ["expanded"]
        expanded = [e for e in events if e.kind == "expanded_sentence"]
        assert len(expanded) == 2
        assert all(e.stream_time_s > switches[0].stream_time_s for e in expanded)
        for e in expanded:
            ctx = agents.ContextRecord(e.payload["emotion"], "evening", "rainy")
            assert agents.check_expansion(e.payload["basic"], e.payload["text"], ctx).ok

    def test_start_in_expanded_mode(self, session):
        events = run(session, mode="expanded")
        assert runtime.event_totals(events)["expanded_sentence"] == 3

    def test_emotion_events_every_window(self, vocab):
        stream = scripted(vocab, emotion_label="relieved", noiseless=False)
        emo = fixed_emotion(np.log([0.2, 0.5, 0.3]))
        events = runtime.run_pipeline(stream, PipelineConfig(), classifier=runtime.OracleClassifier(stream), emotion_model=emo)
        emos = [e for e in events if e.kind == "emotion"]
        assert len(emos) == int(stream.duration_s // sigcore.PULSE_WINDOW_S)
        assert all(e.payload["label"] == "relieved" for e in emos)
        assert [e.payload["window_end_s"] for e in emos] == [5.0 * (k + 1) for k in range(len(emos))]
        later = [e for e in events if e.kind == "sentence" and e.stream_time_s >= 5.0]
        assert later and all(e.payload["emotion"] == "relieved" for e in later)

    def test_reads_itss_source(self, session, tmp_path):
        sigcore.write_stream(tmp_path / "s.itss", session)
        back = sigcore.read_stream(tmp_path / "s.itss")
        a = runtime.run_pipeline(tmp_path / "s.itss", PipelineConfig(), classifier=runtime.OracleClassifier(back))
        assert [e.to_json() for e in a] == [e.to_json() for e in run(session)]

    def test_checkpoint_shape_mismatch(self, session, tmp_path):
        save_checkpoint(tmp_path / "m.itnn", build_model(ArchConfig(input_len=3 * 72, classes=21, kind="mlp"), 0))
        with pytest.raises(ConfigError):
            runtime.run_pipeline(session, PipelineConfig(token_checkpoint=str(tmp_path / "m.itnn"), n=2))
        with pytest.raises(ConfigError):
            runtime.run_pipeline(session, PipelineConfig())

    def test_missing_source(self, tmp_path):
        with pytest.raises(OSError):
            runtime.run_pipeline(tmp_path / "nope.itss", PipelineConfig(), classifier=object())


# -- events, config, latency ------------------------------------------------------------


class TestEvents:
    def test_jsonl_roundtrip_redacts_wall_time(self, tmp_path):
        events = [
            TranscriptEvent("sentence", {"text": "we go"}, 1.5, 0.004),
            TranscriptEvent("mode_switch", {"mode": "expanded", "nod_time_s": 2.0}, 2.016),
        ]
        runtime.write_jsonl(tmp_path / "e.jsonl", events)
        back = runtime.read_jsonl(tmp_path / "e.jsonl")
        assert back[0].wall_latency_s is None and back[0].payload == {"text": "we go"}
        buf = io.StringIO()
        runtime.write_jsonl(buf, events, include_wall=True)
        assert json.loads(buf.getvalue().splitlines()[0])["wall_latency_s"] == 0.004

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            TranscriptEvent("shout", {}, 0.0)

    def test_config_dict_roundtrip(self):
        cfg = PipelineConfig(mode="expanded", nod=NodParams(floor=0.7), context=agents.ContextRecord("frustrated"))
        assert PipelineConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize(
        "bad", [{"mode": "loud"}, {"blank_boundary_tokens": 0}, {"threads": 0}, {"nod": {"smooth_s": -1}}, {"bogus": 1}]
    )
    def test_config_errors(self, bad):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(bad)


class TestLatency:
    def test_decision_delay(self):
        assert PipelineConfig().decision_delay_s == pytest.approx(1.008)
        assert runtime.measure_latency([]).decision_delay_s == pytest.approx(1.008)

    def test_empty_stats(self):
        stats = runtime.measure_latency([])
        assert stats.count == 0 and np.isnan(stats.mean_s) and np.isnan(stats.p95_s)

    def test_stats_from_events(self):
        events = [TranscriptEvent("sentence", {}, t, lat) for t, lat in [(2.0, 0.01), (5.0, 0.02), (9.0, 0.03)]]
        words = [sigcore.IntervalAnnotation("word", 0.5, 1.0, 1), sigcore.IntervalAnnotation("word", 3.0, 3.9, 2)]
        stats = runtime.measure_latency(events, words)
        assert stats.mean_s == pytest.approx(0.02)
        assert stats.p95_s == pytest.approx(np.percentile([0.01, 0.02, 0.03], 95))
        assert stats.stream_latency_s == pytest.approx([1.0, 1.1, 5.1])

    def test_scripted_run_latency(self, session, tiny_model):
        events = runtime.run_pipeline(session, PipelineConfig(n=2), token_model=tiny_model)
        stats = runtime.measure_latency(events, session.annotations)
        assert stats.count == runtime.event_totals(events)["sentence"]
        if stats.count:
            assert stats.p95_s < 0.25
