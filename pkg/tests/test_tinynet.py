import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from silentspeech.errors import ConfigError, CorruptFile, DivergenceError, FormatError, InvalidArgument, InvalidLabel, ShapeError
from silentspeech.tinynet import (
    AdamState,
    ArchConfig,
    DistillConfig,
    TrainConfig,
    build_model,
    count_flops,
    forward,
    grad_check,
    grad_check_report,
    kl_divergence,
    layer_flops,
    load_checkpoint,
    loss_ce,
    loss_distill,
    save_checkpoint,
    softmax,
    student_config,
    teacher_config,
    train_step,
)
from silentspeech.tinynet.flops import conv_flops

SMALL = ArchConfig(input_len=48, classes=4, stem_width=4, blocks=((4, 1), (6, 2)), stem_stride=2, pool="flatten")
SMALL_AVG = dataclasses.replace(SMALL, pool="avg")
MLP = ArchConfig(input_len=12, classes=3, kind="mlp", hidden=(8,))
LINEAR = ArchConfig(input_len=12, classes=3, kind="mlp", hidden=(), activation="identity")


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


class TestBuild:
    def test_deterministic(self):
        a, b = build_model(SMALL, 3), build_model(SMALL, 3)
        assert a.same_as(b)
        assert not a.same_as(build_model(SMALL, 4))

    def test_reference_sizes(self):
        t, s = teacher_config(1080, 21), student_config(1080, 21)
        assert build_model(s).parameter_count() < build_model(t).parameter_count()

    def test_zero_blocks(self):
        with pytest.raises(ConfigError):
            build_model(dataclasses.replace(SMALL, blocks=()))

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            build_model(dataclasses.replace(SMALL, blocks=((4, 3),)))


class TestForward:
    def test_zero_input_rows_equal(self):
        logits = forward(build_model(SMALL, 0), np.zeros((5, 48), dtype=np.float32))
        assert np.all(logits == logits[0])

    def test_batch_independence(self, rng):
        m = build_model(SMALL, 0, dtype=np.float64)
        x = rng.normal(size=(8, 48))
        # BLAS picks different kernels per batch size, so agreement is to rounding, not bitwise
        assert np.allclose(forward(m, x[3:4])[0], forward(m, x)[3], rtol=0, atol=1e-12)
        assert np.array_equal(forward(m, x[3:5])[0], forward(m, x[3:5])[0])

    def test_bias_shift(self, rng):
        m = build_model(SMALL, 0, dtype=np.float64)
        x = rng.normal(size=(3, 48))
        base = forward(m, x)
        m.params["head.b"] += 2.5
        assert np.allclose(forward(m, x), base + 2.5, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(build_model(SMALL), np.zeros((2, 47)))

    def test_finite(self, rng):
        logits = forward(build_model(student_config(1080, 21)), rng.normal(size=(2, 1080)).astype(np.float32))
        assert logits.shape == (2, 21) and np.all(np.isfinite(logits))


class TestLosses:
    def test_uniform(self):
        loss, _ = loss_ce(np.zeros((4, 7)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(np.log(7))

    def test_confident(self):
        logits = np.array([[100.0, 0, 0]])
        assert loss_ce(logits, np.array([0]))[0] < 1e-30

    def test_label_range(self):
        with pytest.raises(InvalidLabel):
            loss_ce(np.zeros((1, 3)), np.array([3]))

    def test_ce_gradient(self, rng):
        z, y = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
        _, g = loss_ce(z, y)
        num = central_diff(lambda v: loss_ce(v, y)[0], z)
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-8)) < 1e-4

    def test_distill_alpha_one(self, rng):
        z, t, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
        a = loss_distill(z, t, y, 4.0, 1.0)
        b = loss_ce(z, y)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_kl_zero_on_match(self, rng):
        z = rng.normal(size=(3, 5))
        assert np.allclose(kl_divergence(z, z, 4.0), 0.0)
        full, _ = loss_distill(z, z, np.zeros(3, dtype=int), 4.0, 0.0)
        assert full == pytest.approx(0.0, abs=1e-12)

    def test_distill_gradient(self, rng):
        z, t, y = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.integers(0, 5, 4)
        _, g = loss_distill(z, t, y, 4.0, 0.3)
        num = central_diff(lambda v: loss_distill(v, t, y, 4.0, 0.3)[0], z)
        assert np.max(np.abs(g - num) / np.maximum(np.abs(num), 1e-8)) < 1e-4

    def test_bad_temperature(self, rng):
        with pytest.raises(InvalidArgument):
            loss_distill(np.zeros((1, 2)), np.zeros((1, 2)), np.array([0]), 0.0, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
        arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
        st.floats(-50, 50),
    )
    def test_shift_invariance_and_bounds(self, z, t, c):
        y = np.array([0, 2, 4])
        assert np.allclose(softmax(z).sum(axis=1), 1.0, atol=1e-9)
        ce, _ = loss_ce(z, y)
        assert ce >= 0
        assert np.all(kl_divergence(t, z, 2.0) >= -1e-12)
        assert loss_ce(z + c, y)[0] == pytest.approx(ce, abs=1e-9)
        assert np.allclose(kl_divergence(t + c, z - c, 2.0), kl_divergence(t, z, 2.0), atol=1e-9)


class TestTraining:
    def test_lr_zero(self, rng):
        m = build_model(SMALL, 0)
        before = m.copy()
        x, y = rng.normal(size=(8, 48)).astype(np.float32), rng.integers(0, 4, 8)
        train_step(m, x, y, TrainConfig(lr=0.0), AdamState())
        assert m.same_as(before)

    def test_overfit_single_batch(self, rng):
        m = build_model(SMALL, 0, dtype=np.float64)
        x, y = rng.normal(size=(8, 48)), rng.integers(0, 4, 8)
        state, cfg = AdamState(), TrainConfig(lr=1e-2)
        for _ in range(200):
            loss, state = train_step(m, x, y, cfg, state)
        assert loss_ce(forward(m, x), y)[0] < 0.01

    def test_reproducible(self, rng):
        x, y = rng.normal(size=(8, 48)).astype(np.float32), rng.integers(0, 4, 8)
        models = []
        for _ in range(2):
            m, state = build_model(SMALL, 5), AdamState()
            for _ in range(5):
                train_step(m, x, y, TrainConfig(), state)
            models.append(m)
        assert models[0].same_as(models[1])

    def test_divergence(self):
        m = build_model(SMALL, 0)
        x = np.full((2, 48), np.nan, dtype=np.float32)
        with pytest.raises(DivergenceError):
            train_step(m, x, np.array([0, 1]), TrainConfig(), AdamState())

    def test_distill_alpha_one_matches_ce(self, rng):
        x, y = rng.normal(size=(8, 48)).astype(np.float32), rng.integers(0, 4, 8)
        teacher = rng.normal(size=(8, 4))
        a, b = build_model(SMALL, 1), build_model(SMALL, 1)
        sa, sb = AdamState(), AdamState()
        for _ in range(3):
            train_step(a, x, y, TrainConfig(), sa)
            train_step(b, x, y, TrainConfig(distill=DistillConfig(7.0, 1.0)), sb, teacher_logits=teacher)
        assert a.same_as(b)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1).validate()
        with pytest.raises(ConfigError):
            TrainConfig(schedule="step").validate()

    def test_cosine_schedule(self):
        cfg = TrainConfig(lr=1e-3, schedule="cosine")
        assert cfg.lr_at(0, 10) == pytest.approx(1e-3)
        assert cfg.lr_at(5, 10) == pytest.approx(0.5e-3)
        assert cfg.lr_at(10, 10) == pytest.approx(0.0, abs=1e-18)


class TestGradCheck:
    @pytest.mark.parametrize("config", [SMALL, SMALL_AVG, MLP])
    def test_small(self, config, rng):
        m = build_model(config, 0)
        assert grad_check(m, rng.normal(size=(3, config.input_len))) < 1e-4

    def test_linear_exact(self, rng):
        m = build_model(LINEAR, 0)
        assert grad_check(m, rng.normal(size=(3, 12))) < 1e-7

    def test_reference_student(self, rng):
        m = build_model(student_config(1080, 21), 0)
        report = grad_check_report(m, rng.normal(size=(2, 1080)), 1e-4, per_kind=200)
        assert report.max_rel_error < 1e-4
        assert report.checked >= 200

    def test_epsilon_range(self, rng):
        with pytest.raises(InvalidArgument):
            grad_check(build_model(MLP), rng.normal(size=(1, 12)), 1e-2)

    def test_kink_nudging_stable(self, rng):
        m = build_model(SMALL, 0)
        x = rng.normal(size=(2, 48))
        a = grad_check_report(m, x, 1e-4, seed=3)
        b = grad_check_report(m, x, 1e-4, seed=3)
        assert a.max_rel_error == b.max_rel_error and a.max_rel_error < 1e-4


class TestFlops:
    def test_single_conv_rule(self):
        assert conv_flops(1, 4, 3, 10) == 240

    def test_additive_and_ratio(self):
        t, s = teacher_config(1080, 21), student_config(1080, 21)
        assert count_flops(t) == sum(f for _, f in layer_flops(t))
        assert count_flops(s) / count_flops(t) <= 0.30

    def test_width_doubling(self):
        base = ArchConfig(input_len=256, classes=2, stem_width=8, blocks=((8, 1), (8, 1)))
        wide = dataclasses.replace(base, stem_width=16, blocks=((16, 1), (16, 1)))
        conv = lambda c: sum(f for name, f in layer_flops(c) if name.endswith(".conv"))
        assert conv(wide) == 4 * conv(base)

    @given(st.integers(1, 32), st.integers(1, 32))
    def test_monotone_in_width(self, w, extra):
        a = ArchConfig(input_len=64, classes=3, stem_width=w, blocks=((w, 1),))
        b = ArchConfig(input_len=64, classes=3, stem_width=w + extra, blocks=((w + extra, 1),))
        assert count_flops(b) > count_flops(a)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        m = build_model(SMALL, 2)
        save_checkpoint(tmp_path / "m.itnn", m)
        back = load_checkpoint(tmp_path / "m.itnn")
        x = rng.normal(size=(3, 48)).astype(np.float32)
        assert back.same_as(m)
        assert forward(back, x).tobytes() == forward(m, x).tobytes()

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.itnn", build_model(SMALL))
        raw = (tmp_path / "m.itnn").read_bytes()
        (tmp_path / "t.itnn").write_bytes(raw[:-20])
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / "t.itnn")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.itnn").write_bytes(b"ABCD" + bytes(30))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x.itnn")

    def test_teacher_as_student(self, tmp_path):
        save_checkpoint(tmp_path / "t.itnn", build_model(teacher_config(1080, 21)))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "t.itnn", expect=student_config(1080, 21))
