import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silentspeech import sigcore
from silentspeech import synthdata as sd
from silentspeech.errors import (
    ChannelNotFound,
    CorruptFile,
    FormatError,
    InvalidArgument,
    NotInVocabulary,
    ShapeError,
    TooShort,
)


def dft_power(x, rate):
    """One-sided power spectrum from an explicit DFT basis matrix (independent of the FFT code)."""
    n = len(x)
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    return k * rate / n, np.abs(basis @ x) ** 2


def band_fraction(x, rate, lo, hi):
    f, p = dft_power(x - x.mean(), rate)
    return p[(f >= lo) & (f <= hi)].sum() / p.sum()


class TestVocab:
    def test_deterministic(self, vocab):
        assert sd.make_vocab(7, 20) == vocab

    def test_ids(self, vocab):
        assert [w.word_id for w in vocab.words] == list(range(1, 21))

    def test_too_small(self):
        with pytest.raises(InvalidArgument):
            sd.make_vocab(0, 1)

    def test_durations_over_many_seeds(self):
        for seed in range(1000):
            for w in sd.make_vocab(seed, 3).words:
                assert 0.4 - 1e-9 <= w.nominal_duration_s <= 1.0 + 1e-9
                assert 2 <= len(w.units) <= 5
                for u in w.units:
                    assert 4 <= u.center_freq_hz <= 40
                    assert 0 < u.amplitude <= 1
                    assert 0.08 - 1e-9 <= u.duration_s <= 0.20 + 1e-9


class TestUtterance:
    def test_bit_identical(self, vocab):
        p = sd.SpeakerProfile(jitter_scale=0.0)
        a, _ = sd.synth_utterance(3, vocab, p, seed=5)
        b, _ = sd.synth_utterance(3, vocab, p, seed=5)
        assert np.array_equal(a, b)

    def test_patient_scale(self, vocab):
        healthy = sd.SpeakerProfile(jitter_scale=0.0)
        patient = sd.SpeakerProfile(domain="patient", amplitude_scale=0.6, jitter_scale=0.0)
        patient_tremor = sd.SpeakerProfile(domain="patient", amplitude_scale=0.6, jitter_scale=0.0, tremor_amp=0.1)
        for wid in range(1, 21):
            h, _ = sd.synth_utterance(wid, vocab, healthy, seed=1)
            p, _ = sd.synth_utterance(wid, vocab, patient, seed=1)
            assert np.max(np.abs(p)) == pytest.approx(0.6 * np.max(np.abs(h)), rel=1e-12)
            assert np.max(np.abs(p)) < np.max(np.abs(h))
            pt, _ = sd.synth_utterance(wid, vocab, patient_tremor, seed=1)
            assert abs(np.max(np.abs(pt)) - np.max(np.abs(p))) <= 0.1 + 1e-12

    def test_energy_and_band(self, vocab):
        for wid in range(1, 21):
            x, (t0, t1) = sd.synth_utterance(wid, vocab, sd.healthy_speaker(0), seed=wid)
            assert np.sum(x**2) > 0
            assert t1 == pytest.approx(len(x) / 500)
            assert band_fraction(x, 500, 2, 50) >= 0.95

    def test_unknown_word(self, vocab):
        with pytest.raises(NotInVocabulary):
            sd.synth_utterance(21, vocab, sd.healthy_speaker(0), seed=0)


class TestPulse:
    def test_neutral_peak(self):
        prof = sd.EMOTION_PROFILES["neutral"]
        x = sd.synth_pulse(prof, 40.0, seed=3, sample_rate_hz=50)
        f, p = dft_power(x - x.mean(), 50)
        assert abs(f[np.argmax(p)] - prof.f0_mean_hz) <= 0.1

    def test_periodic_without_jitter(self):
        prof = sd.EmotionProfile("neutral", 1.25, 0.0, (1.0, 0.45, 0.2))
        x = sd.synth_pulse(prof, 10.0, seed=1, sample_rate_hz=100, snr_db=None, respiration=False)
        period = 100 / 1.25
        ac = np.array([np.dot(x[: len(x) - lag], x[lag:]) / (len(x) - lag) for lag in range(40, 120)])
        assert abs(40 + int(np.argmax(ac)) - period) <= 1

    def test_band(self):
        for prof in sd.EMOTION_PROFILES.values():
            x = sd.synth_pulse(prof, 20.0, seed=2, sample_rate_hz=100, snr_db=None)
            f, p = dft_power(x - x.mean(), 100)
            assert p[f > 10].sum() < 0.01 * p.sum()
            assert band_fraction(x, 100, 0, 6) >= 0.95

    def test_too_short(self):
        with pytest.raises(TooShort):
            sd.synth_pulse(sd.EMOTION_PROFILES["neutral"], 4.0, seed=0)

    def test_profile_invariants(self):
        with pytest.raises(InvalidArgument):
            sd.EmotionProfile("neutral", 2.5, 0.0, (1.0, 0.5, 0.2))
        with pytest.raises(InvalidArgument):
            sd.EmotionProfile("neutral", 1.0, 0.0, (1.0, 0.2, 0.5))

    def test_subject_profiles_valid_and_seeded(self):
        a = sd.subject_emotion_profiles(4)
        assert a == sd.subject_emotion_profiles(4)
        assert a != sd.subject_emotion_profiles(5)
        assert set(a) == set(sigcore.EMOTIONS)


class TestCrosstalk:
    def test_identity_and_unit(self, rng):
        pulse, speech = rng.normal(size=100), rng.normal(size=100)
        assert np.array_equal(sd.inject_crosstalk(pulse, speech, 0.0), pulse)
        assert np.array_equal(sd.inject_crosstalk(np.zeros(100), speech, 1.0), speech)

    def test_energy_ratio(self, vocab):
        speech, _ = sd.synth_utterance(4, vocab, sd.healthy_speaker(0), seed=0)
        pulse = np.zeros_like(speech)

        def band_energy(k):
            y = sd.inject_crosstalk(pulse, speech, k)
            f, p = dft_power(y, 500)
            return p[(f >= 4) & (f <= 40)].sum()

        assert band_energy(0.01) / band_energy(0.25) == pytest.approx((0.01 / 0.25) ** 2, rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            sd.inject_crosstalk(np.zeros(3), np.zeros(4), 0.1)


class TestSession:
    def test_three_words(self, vocab):
        s = sd.synth_session([1, 1.0, 2, 1.0, 3], vocab, sd.healthy_speaker(0), noiseless=True, seed=2)
        words = s.words()
        assert [w.payload for w in words] == [1, 2, 3]
        lengths = [len(sd.synth_utterance(w, vocab, sd.healthy_speaker(0), 2 * 100003 + k)[0]) for k, w in ((0, 1), (2, 2), (4, 3))]
        assert s.n_samples == sum(lengths) + 2 * 500

    def test_noiseless_is_concatenation(self, vocab):
        prof = sd.healthy_speaker(1)
        s = sd.synth_session([2, 0.5, 5], vocab, prof, noiseless=True, seed=4)
        a, _ = sd.synth_utterance(2, vocab, prof, 4 * 100003 + 0)
        b, _ = sd.synth_utterance(5, vocab, prof, 4 * 100003 + 2)
        assert np.array_equal(s.channel("speech"), np.concatenate([a, np.zeros(250), b]))

    def test_snr(self, vocab):
        prof = sd.healthy_speaker(0)
        clean = sd.synth_session([1, 0.3, 2], vocab, prof, noiseless=True, seed=9).channel("speech")
        noisy = sd.synth_session([1, 0.3, 2], vocab, prof, noise_snr_db=20.0, seed=9).channel("speech")
        assert abs(sd.measured_snr_db(clean, noisy) - 20.0) <= 0.5

    def test_infinite_snr_rejected(self, vocab):
        with pytest.raises(InvalidArgument):
            sd.synth_session([1], vocab, sd.healthy_speaker(0), noise_snr_db=float("inf"))

    def test_nod_shape(self, vocab):
        s = sd.synth_session([1, 0.5, sd.NodPair(), 0.5], vocab, sd.healthy_speaker(0), noiseless=True, seed=1)
        nod = [a for a in s.annotations if a.kind == "nod"][0]
        x = s.channel("speech")
        i0, i1 = int(round(nod.start_s * 500)), int(round(nod.end_s * 500))
        seg = x[i0:i1]
        assert len(seg) == 500  # 0.3 + 0.4 + 0.3 s
        peak_word = np.max(np.abs(x[: int(round(s.words()[0].end_s * 500))]))
        assert np.max(seg) == pytest.approx(3 * peak_word, rel=1e-3)
        assert np.all(seg[150:350] == 0)

    def test_emotion_spans(self, vocab):
        script = [sd.EmotionSpan("relieved"), 1, 4.0, sd.EmotionSpan("frustrated"), 2, 6.0]
        s = sd.synth_session(script, vocab, sd.healthy_speaker(0), seed=0)
        labels = [a.payload for a in s.annotations if a.kind == "emotion"]
        assert labels == ["relieved", "frustrated"]

    def test_blank_dominates(self, vocab):
        sessions = sd.word_sessions(vocab, sd.healthy_speaker(0), 1, seed=0, pause_range=(1.0, 1.2))
        ds = sd.build_token_dataset(sessions, 15, 21)
        hist = ds.histogram()
        assert hist[0] > hist[1:].sum()

    def test_deterministic(self, vocab):
        a = sd.word_sessions(vocab, sd.patient_speaker(100), 1, seed=3)
        b = sd.word_sessions(vocab, sd.patient_speaker(100), 1, seed=3)
        assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))


class TestDataset:
    def test_counts(self, vocab):
        s = sigcore.SignalStream(500, ("speech",), np.zeros((1, 720)))
        ds = sd.build_token_dataset([s], 15, 21)
        assert len(ds) == 10
        assert np.all(ds.y == 0)

    def test_histogram_recount(self, vocab):
        sessions = sd.word_sessions(vocab, sd.healthy_speaker(2), 1, seed=5)
        ds = sd.build_token_dataset(sessions, 15, 21)
        total = np.zeros(21, dtype=int)
        for s in sessions:
            labels = sigcore.label_tokens(sigcore.tokenize(s), s.annotations)
            total += np.bincount(labels, minlength=21)
        assert np.array_equal(ds.histogram(), total)

    def test_no_speech_channel(self):
        s = sigcore.SignalStream(500, ("pulse",), np.zeros((1, 720)))
        with pytest.raises(ChannelNotFound):
            sd.build_token_dataset([s], 15)

    def test_round_trip_and_errors(self, vocab, tmp_path):
        ds = sd.build_token_dataset(sd.word_sessions(vocab, sd.healthy_speaker(0), 1, seed=1)[:1], 15, 21)
        path = tmp_path / "d.itds"
        sd.write_dataset(path, ds)
        assert sd.read_dataset(path).equals(ds)
        raw = bytearray(path.read_bytes())
        (tmp_path / "magic.itds").write_bytes(b"NOPE" + bytes(raw[4:]))
        with pytest.raises(FormatError):
            sd.read_dataset(tmp_path / "magic.itds")
        flipped = bytearray(raw)
        flipped[100] ^= 0xFF
        (tmp_path / "flip.itds").write_bytes(bytes(flipped))
        with pytest.raises(CorruptFile):
            sd.read_dataset(tmp_path / "flip.itds")
        (tmp_path / "trunc.itds").write_bytes(bytes(raw[:-7]))
        with pytest.raises(CorruptFile):
            sd.read_dataset(tmp_path / "trunc.itds")

    def test_same_seed_same_checksum(self, vocab, tmp_path):
        for name, seed in (("a", 1), ("b", 1), ("c", 2)):
            ds = sd.build_token_dataset(sd.word_sessions(vocab, sd.healthy_speaker(0), 1, seed=seed)[:1], 15, 21)
            sd.write_dataset(tmp_path / f"{name}.itds", ds)
        crc = {name: sd.file_crc(tmp_path / f"{name}.itds") for name in "abc"}
        assert crc["a"] == crc["b"] != crc["c"]
        assert crc["a"] == zlib.crc32((tmp_path / "a.itds").read_bytes()[:-4])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 1000))
    def test_derive_seed_pure(self, master, index):
        assert sd.derive_seed(master, index) == sd.derive_seed(master, index)
