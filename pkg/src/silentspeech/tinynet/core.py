"""Architecture configs, parameter init, forward and backward passes.

Two model kinds are supported:

``resnet1d``
    conv stem (k=7) -> residual blocks -> pooling -> dense. Pooling is either a
    global average or a flatten that keeps time positions (needed when the
    label depends on where in the window a pattern sits).
    Each block computes ``relu((shortcut(x) + conv3(x)) / sqrt(2))`` where the
    shortcut is the identity or a strided 1x1 projection when the shape
    changes. No normalization layers, so a forward pass never depends on
    batch composition.
``mlp``
    dense layers with ReLU, then a dense head. With no hidden layers this is
    a plain linear classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError

RESIDUAL_SCALE = float(1.0 / np.sqrt(2.0))
KINDS = ("resnet1d", "mlp")
ACTIVATIONS = ("relu", "identity")
POOLS = ("avg", "flatten")


@dataclass(frozen=True)
class ArchConfig:
    input_len: int
    classes: int
    stem_width: int = 16
    blocks: tuple[tuple[int, int], ...] = ()
    kind: str = "resnet1d"
    hidden: tuple[int, ...] = ()
    stem_kernel: int = 7
    stem_stride: int = 1
    block_kernel: int = 3
    in_channels: int = 1
    activation: str = "relu"
    role: str = "student"
    input_kind: str = "tokens"
    pool: str = "avg"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(w), int(s)) for w, s in self.blocks))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> "ArchConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.input_len < 1:
            raise ConfigError("input_len must be positive")
        if self.classes < 2:
            raise ConfigError("a classifier needs at least two classes")
        if self.pool not in POOLS:
            raise ConfigError(f"unknown pooling {self.pool!r}")
        if self.in_channels != 1:
            raise ConfigError("only single-channel inputs are supported")
        if self.kind == "resnet1d":
            if not self.blocks:
                raise ConfigError("a residual network needs at least one block")
            if self.stem_width < 1 or any(w < 1 for w, _ in self.blocks):
                raise ConfigError("widths must be positive")
            if any(s not in (1, 2) for _, s in self.blocks):
                raise ConfigError("block strides must be 1 or 2")
            if self.stem_stride < 1 or self.stem_kernel < 1 or self.block_kernel < 1:
                raise ConfigError("kernel sizes and strides must be positive")
        elif any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["hidden"] = list(self.hidden)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchConfig":
        d = dict(d)
        d["blocks"] = tuple(tuple(b) for b in d.get("blocks", ()))
        d["hidden"] = tuple(d.get("hidden", ()))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad architecture config: {exc}") from exc


def conv_out_len(length: int, kernel: int, stride: int) -> int:
    pad = (kernel - 1) // 2
    return (length + 2 * pad - kernel) // stride + 1


def final_length(config: ArchConfig) -> int:
    length = conv_out_len(config.input_len, config.stem_kernel, config.stem_stride)
    for _, stride in config.blocks:
        length = conv_out_len(length, config.block_kernel, stride)
    return length


def feature_dim(config: ArchConfig) -> int:
    if config.kind == "mlp":
        return config.hidden[-1] if config.hidden else config.input_len
    width = config.blocks[-1][0]
    return width * final_length(config) if config.pool == "flatten" else width


def teacher_config(input_len: int, classes: int, stem_stride: int = 4) -> ArchConfig:
    return ArchConfig(
        input_len=input_len,
        classes=classes,
        stem_width=32,
        blocks=((32, 1), (64, 2), (64, 1), (128, 2), (128, 1), (128, 1), (256, 2), (256, 1)),
        stem_stride=stem_stride,
        role="teacher",
        pool="flatten",
    )


STUDENT_BLOCKS = {
    # three blocks; about 5% of the teacher's FLOPs
    "reference": (16, ((16, 1), (32, 2), (64, 2))),
    # teacher depth at half width; about 25% of the teacher's FLOPs
    "half": (16, ((16, 1), (32, 2), (32, 1), (64, 2), (64, 1), (64, 1), (128, 2), (128, 1))),
}


def student_config(input_len: int, classes: int, stem_stride: int = 4, variant: str = "reference") -> ArchConfig:
    if variant not in STUDENT_BLOCKS:
        raise ConfigError(f"unknown student variant {variant!r}; expected one of {sorted(STUDENT_BLOCKS)}")
    stem, blocks = STUDENT_BLOCKS[variant]
    return ArchConfig(
        input_len=input_len,
        classes=classes,
        stem_width=stem,
        blocks=blocks,
        stem_stride=stem_stride,
        role="student",
        pool="flatten",
    )


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    kind: str  # conv.w, conv.b, dense.w, dense.b


def param_specs(config: ArchConfig) -> list[ParamSpec]:
    config.validate()
    specs: list[ParamSpec] = []

    def conv(name, cout, cin, k):
        specs.append(ParamSpec(f"{name}.w", (cout, cin, k), cin * k, "conv.w"))
        specs.append(ParamSpec(f"{name}.b", (cout,), cin * k, "conv.b"))

    def dense(name, fout, fin):
        specs.append(ParamSpec(f"{name}.w", (fout, fin), fin, "dense.w"))
        specs.append(ParamSpec(f"{name}.b", (fout,), fin, "dense.b"))

    if config.kind == "resnet1d":
        conv("stem", config.stem_width, config.in_channels, config.stem_kernel)
        cin = config.stem_width
        for i, (width, stride) in enumerate(config.blocks):
            conv(f"block{i}.conv", width, cin, config.block_kernel)
            if stride != 1 or width != cin:
                conv(f"block{i}.proj", width, cin, 1)
            cin = width
        dense("head", config.classes, feature_dim(config))
    else:
        fin = config.input_len
        for i, h in enumerate(config.hidden):
            dense(f"hidden{i}", h, fin)
            fin = h
        dense("head", config.classes, fin)
    return specs


class Model:
    """Architecture config plus named parameter arrays."""

    def __init__(self, config: ArchConfig, params: dict[str, np.ndarray]):
        self.config = config.validate()
        expected = {s.name: s.shape for s in param_specs(config)}
        if set(expected) != set(params):
            raise ConfigError(
                f"parameter names do not match config: missing {sorted(set(expected) - set(params))}, "
                f"unexpected {sorted(set(params) - set(expected))}"
            )
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = {s.name: params[s.name] for s in param_specs(config)}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype, copy=True) for k, v in self.params.items()})

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def same_as(self, other: "Model") -> bool:
        return self.config == other.config and all(
            self.params[k].dtype == other.params[k].dtype
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)

    def __repr__(self):
        return f"Model({self.config.kind}, role={self.config.role}, params={self.parameter_count()})"


def build_model(config: ArchConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fan-in scaled uniform (He) weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for spec in param_specs(config):
        if spec.name.endswith(".w"):
            bound = np.sqrt(6.0 / spec.fan_in)
            if spec.name.startswith("head"):
                bound = np.sqrt(1.0 / spec.fan_in)
            params[spec.name] = rng.uniform(-bound, bound, size=spec.shape).astype(dtype)
        else:
            params[spec.name] = np.zeros(spec.shape, dtype=dtype)
    return Model(config, params)


# ---------------------------------------------------------------------------
# layer primitives


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """Same-padded strided 1D convolution, channels-last.

    x (B, L, C), w (O, C, K) -> (B, L_out, O). The im2col matrix is kept for
    the backward pass.
    """
    batch, length, cin = x.shape
    k = w.shape[2]
    pad = (k - 1) // 2
    lout = conv_out_len(length, k, stride)
    if k == 1:
        cols = np.ascontiguousarray(x[:, ::stride, :][:, :lout, :]).reshape(batch * lout, cin)
    else:
        xp = np.pad(x, ((0, 0), (pad, k - 1 - pad), (0, 0)))
        win = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :lout]  # (B, L_out, C, K)
        cols = win.reshape(batch * lout, cin * k)
    wmat = w.transpose(1, 2, 0).reshape(cin * k, -1)
    out = cols @ wmat
    out += b
    return out.reshape(batch, lout, -1), (x.shape, cols, stride, pad)


def conv1d_backward(dout: np.ndarray, w: np.ndarray, cache, need_dx: bool = True):
    (batch, length, cin), cols, stride, pad = cache
    cout, _, k = w.shape
    lout = dout.shape[1]
    d2 = dout.reshape(batch * lout, cout)
    dw = (cols.T @ d2).reshape(cin, k, cout).transpose(2, 0, 1)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(cout, cin * k)).reshape(batch, lout, cin, k)
    dxp = np.zeros((batch, length + k - 1, cin), dtype=dout.dtype)
    for j in range(k):
        dxp[:, j : j + stride * (lout - 1) + 1 : stride, :] += dcols[:, :, :, j]
    return dxp[:, pad : pad + length, :], dw, db


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0) if kind == "relu" else z


def _act_grad(dh: np.ndarray, z: np.ndarray, kind: str) -> np.ndarray:
    return dh * (z > 0) if kind == "relu" else dh


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Trace:
    """Intermediate values kept for the backward pass."""

    steps: list = field(default_factory=list)
    features: np.ndarray | None = None
    input_shape: tuple = ()

    def relu_masks(self) -> list[np.ndarray]:
        return [s[-1] > 0 for s in self.steps if s[0] in ("stem", "block", "hidden")]


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.input_len:
        raise ShapeError(
            f"input rows must have length {model.config.input_len}, got shape {x.shape}"
        )
    return x.astype(model.dtype, copy=False)


def forward_trace(model: Model, x: np.ndarray) -> tuple[np.ndarray, Trace]:
    cfg = model.config
    p = model.params
    x = _check_input(model, x)
    trace = Trace(input_shape=x.shape)
    act = cfg.activation
    if cfg.kind == "resnet1d":
        h = x[:, :, None]
        z, cache = conv1d(h, p["stem.w"], p["stem.b"], cfg.stem_stride)
        trace.steps.append(("stem", cache, z))
        h = _act(z, act)
        for i, (width, stride) in enumerate(cfg.blocks):
            a, conv_cache = conv1d(h, p[f"block{i}.conv.w"], p[f"block{i}.conv.b"], stride)
            proj_cache = None
            if f"block{i}.proj.w" in p:
                s, proj_cache = conv1d(h, p[f"block{i}.proj.w"], p[f"block{i}.proj.b"], stride)
            else:
                s = h
            z = (s + a) * RESIDUAL_SCALE
            trace.steps.append(("block", i, conv_cache, proj_cache, z))
            h = _act(z, act)
        feats = h.reshape(len(h), -1) if cfg.pool == "flatten" else h.mean(axis=1)
        trace.steps.append(("pool", h.shape))
    else:
        feats = x
        for i, _ in enumerate(cfg.hidden):
            z = feats @ p[f"hidden{i}.w"].T + p[f"hidden{i}.b"]
            trace.steps.append(("hidden", i, feats, z))
            feats = _act(z, act)
    trace.features = feats
    logits = feats @ p["head.w"].T + p["head.b"]
    return logits, trace


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    return forward_trace(model, x)[0]


def features(model: Model, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations (pooled features for resnet1d)."""
    return forward_trace(model, x)[1].features


def backward(
    model: Model, trace: Trace, dlogits: np.ndarray, need_input_grad: bool = False
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Gradients of a scalar loss given its gradient wrt the logits."""
    cfg = model.config
    p = model.params
    act = cfg.activation
    dlogits = dlogits.astype(model.dtype, copy=False)
    grads: dict[str, np.ndarray] = {}
    feats = trace.features
    grads["head.w"] = dlogits.T @ feats
    grads["head.b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ p["head.w"]
    dx = None
    if cfg.kind == "resnet1d":
        pool_shape = trace.steps[-1][1]
        if cfg.pool == "flatten":
            dh = dfeat.reshape(pool_shape)
        else:
            dh = np.broadcast_to((dfeat / pool_shape[1])[:, None, :], pool_shape)
        for step in reversed(trace.steps[:-1]):
            if step[0] == "block":
                _, i, conv_cache, proj_cache, z = step
                dz = _act_grad(dh, z, act) * RESIDUAL_SCALE
                dh_a, grads[f"block{i}.conv.w"], grads[f"block{i}.conv.b"] = conv1d_backward(
                    dz, p[f"block{i}.conv.w"], conv_cache
                )
                if proj_cache is not None:
                    dh_s, grads[f"block{i}.proj.w"], grads[f"block{i}.proj.b"] = conv1d_backward(
                        dz, p[f"block{i}.proj.w"], proj_cache
                    )
                else:
                    dh_s = dz
                dh = dh_a + dh_s
            else:
                _, cache, z = step
                dz = _act_grad(dh, z, act)
                dxin, grads["stem.w"], grads["stem.b"] = conv1d_backward(
                    dz, p["stem.w"], cache, need_dx=need_input_grad
                )
                if need_input_grad:
                    dx = dxin[:, :, 0]
    else:
        dh = dfeat
        for step in reversed(trace.steps):
            _, i, inp, z = step
            dz = _act_grad(dh, z, act)
            grads[f"hidden{i}.w"] = dz.T @ inp
            grads[f"hidden{i}.b"] = dz.sum(axis=0)
            dh = dz @ p[f"hidden{i}.w"]
        if need_input_grad:
            dx = dh
    return {k: grads[k] for k in p}, dx


def input_gradient(model: Model, x: np.ndarray, dlogits_fn) -> np.ndarray:
    """d(scalar)/d(input) where ``dlogits_fn(logits)`` gives d(scalar)/d(logits)."""
    logits, trace = forward_trace(model, x)
    _, dx = backward(model, trace, dlogits_fn(logits), need_input_grad=True)
    return dx
