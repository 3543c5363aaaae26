"""FLOP accounting: two operations per multiply-accumulate."""

from __future__ import annotations

from .core import ArchConfig, conv_out_len, feature_dim


def layer_flops(config: ArchConfig) -> list[tuple[str, int]]:
    config.validate()
    out = []
    if config.kind == "resnet1d":
        length = conv_out_len(config.input_len, config.stem_kernel, config.stem_stride)
        out.append(("stem", 2 * config.in_channels * config.stem_width * config.stem_kernel * length))
        cin = config.stem_width
        for i, (width, stride) in enumerate(config.blocks):
            length = conv_out_len(length, config.block_kernel, stride)
            out.append((f"block{i}.conv", 2 * cin * width * config.block_kernel * length))
            if stride != 1 or width != cin:
                out.append((f"block{i}.proj", 2 * cin * width * length))
            cin = width
        out.append(("head", 2 * feature_dim(config) * config.classes))
    else:
        fin = config.input_len
        for i, h in enumerate(config.hidden):
            out.append((f"hidden{i}", 2 * fin * h))
            fin = h
        out.append(("head", 2 * fin * config.classes))
    return out


def count_flops(config: ArchConfig) -> int:
    return sum(f for _, f in layer_flops(config))


def conv_flops(cin: int, cout: int, kernel: int, lout: int) -> int:
    return 2 * cin * cout * kernel * lout
