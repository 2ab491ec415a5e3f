"""Three-unit attention branch with residual composition.

The branch taps four stages of a backbone: an early map with twice the
spatial extent of the late maps, plus the three late-stage maps. The first
unit is a four-layer conv stack (kernels 3, 3, 1, 1; stride 2 on the first
layer; BN + ReLU after the first three layers, sigmoid after the last) that
turns the early map into gating maps shaped like the late maps. The two
remaining units are single 1x1 convs with sigmoid. Gates are chained by
Hadamard products through the late maps, and the final gate is applied
residually: out = x_late + gate * x_late, so attention can only rescale the
signal by a factor in (1, 2), never destroy it.

A small two-block backbone with the same four tap points is provided for
desk-scale end-to-end training; full-scale feature maps arrive precomputed
via the tensor file bridge.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .pooling import PoolingSpec, gem_pool, pool
from .tensor import (BatchNormState, ShapeError, Tensor, add, batchnorm,
                     conv2d, default_dtype, hadamard, l2_normalize, param,
                     relu, sigmoid)


class Conv2dLayer:
    def __init__(self, w: Tensor, b: Tensor, stride: int, padding: int):
        self.w = w
        self.b = b
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNormLayer:
    def __init__(self, channels: int):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.state = BatchNormState(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.state, mode=mode)


def _make_conv(rng, in_c: int, out_c: int, k: int, stride: int,
               gain: float) -> Conv2dLayer:
    # N(0, gain/fan_in): gain 2 ahead of ReLU, 1 ahead of sigmoid
    fan_in = in_c * k * k
    w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(out_c, in_c, k, k))
    padding = 1 if k == 3 else 0
    return Conv2dLayer(param(w), param(np.zeros(out_c)), stride, padding)


def _zero_conv(in_c: int, out_c: int, k: int, stride: int) -> Conv2dLayer:
    padding = 1 if k == 3 else 0
    return Conv2dLayer(param(np.zeros((out_c, in_c, k, k))),
                       param(np.zeros(out_c)), stride, padding)


@dataclass
class AttentionConfig:
    """Channel geometry of the branch.

    Defaults match a 2048-channel late stage fed from a 1024-channel early
    stage; shrink everything for toy backbones.
    """
    in_channels: int = 1024
    att1_channels: tuple[int, int, int, int] = (1024, 512, 512, 2048)

    @property
    def out_channels(self) -> int:
        return self.att1_channels[-1]


@dataclass
class StageMaps:
    """The four tap points of the main branch."""
    x_4_23: Tensor
    x_5_1: Tensor
    x_5_2: Tensor
    x_5_3: Tensor


class AttentionNet:
    """Parameters of the three attention units plus the pooling exponent."""

    def __init__(self, config: AttentionConfig, rng=None, zero_init: bool = False,
                 p_init: float = 2.92):
        self.config = config
        c_in = config.in_channels
        c1, c2, c3, c_out = config.att1_channels
        if zero_init:
            self.att1_convs = [
                _zero_conv(c_in, c1, 3, 2), _zero_conv(c1, c2, 3, 1),
                _zero_conv(c2, c3, 1, 1), _zero_conv(c3, c_out, 1, 1)]
            self.att2_1 = _zero_conv(c_out, c_out, 1, 1)
            self.att2_2 = _zero_conv(c_out, c_out, 1, 1)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.att1_convs = [
                _make_conv(rng, c_in, c1, 3, 2, gain=2.0),
                _make_conv(rng, c1, c2, 3, 1, gain=2.0),
                _make_conv(rng, c2, c3, 1, 1, gain=2.0),
                _make_conv(rng, c3, c_out, 1, 1, gain=1.0)]
            self.att2_1 = _make_conv(rng, c_out, c_out, 1, 1, gain=1.0)
            self.att2_2 = _make_conv(rng, c_out, c_out, 1, 1, gain=1.0)
        self.att1_bns = [BatchNormLayer(c) for c in (c1, c2, c3)]
        self.p = param(float(p_init), name="p")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, conv in enumerate(self.att1_convs):
            out += [(f"att1.conv{i}.w", conv.w), (f"att1.conv{i}.b", conv.b)]
        for i, bn in enumerate(self.att1_bns):
            out += [(f"att1.bn{i}.gamma", bn.gamma), (f"att1.bn{i}.beta", bn.beta)]
        out += [("att2_1.w", self.att2_1.w), ("att2_1.b", self.att2_1.b),
                ("att2_2.w", self.att2_2.w), ("att2_2.b", self.att2_2.b),
                ("p", self.p)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, bn in enumerate(self.att1_bns):
            out += [(f"att1.bn{i}.running_mean", bn.state.running_mean),
                    (f"att1.bn{i}.running_var", bn.state.running_var)]
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        stage, stat = name.rsplit(".", 1)
        idx = int(stage.split("bn")[1])
        setattr(self.att1_bns[idx].state, stat, np.asarray(value, dtype=default_dtype()))


def att1_forward(net: AttentionNet, x_4_23: Tensor, mode: str = "eval") -> Tensor:
    """Early-stage gating maps, sized like the late-stage maps."""
    h = x_4_23
    for conv, bn in zip(net.att1_convs[:3], net.att1_bns):
        h = relu(bn(conv(h), mode))
    return sigmoid(net.att1_convs[3](h))


def att2_forward(unit: Conv2dLayer, x: Tensor) -> Tensor:
    """Shape-preserving 1x1 gate."""
    if unit.w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"att2: {x.data.shape[1]} input channels, unit expects "
                         f"{unit.w.data.shape[1]}")
    return sigmoid(unit(x))


def attention_compose(net: AttentionNet, maps: StageMaps,
                      mode: str = "eval") -> Tensor:
    """Run the branch and apply the residual gate to the last late map."""
    if maps.x_5_1.data.shape != maps.x_5_2.data.shape or \
       maps.x_5_2.data.shape != maps.x_5_3.data.shape:
        raise ShapeError("late-stage maps must share one shape")
    a_4_23 = att1_forward(net, maps.x_4_23, mode)
    if a_4_23.data.shape != maps.x_5_1.data.shape:
        raise ShapeError(f"gate shape {a_4_23.data.shape} does not match "
                         f"late maps {maps.x_5_1.data.shape}")
    a_5_1 = att2_forward(net.att2_1, hadamard(a_4_23, maps.x_5_1))
    a_5_2 = att2_forward(net.att2_2, hadamard(a_5_1, maps.x_5_2))
    return add(maps.x_5_3, hadamard(a_5_2, maps.x_5_3))


def descriptor_from_maps(net: AttentionNet | None, maps: StageMaps,
                         spec: PoolingSpec, mode: str = "eval",
                         attention: bool = True) -> Tensor:
    """Pool (optionally attention-composed) maps into a unit-norm descriptor."""
    if attention:
        if net is None:
            raise ValueError("attention descriptor needs an AttentionNet")
        feats = attention_compose(net, maps, mode)
    else:
        feats = maps.x_5_3
    if spec.kind == "gem" and net is not None:
        pooled = gem_pool(feats, net.p, eps=spec.eps)
    else:
        pooled = pool(feats, spec)
    return l2_normalize(pooled)


# ---------------------------------------------------------------------------
# toy backbone


@dataclass
class ToyBackboneConfig:
    in_channels: int = 4
    early_channels: int = 8
    late_channels: int = 16


class ToyBackbone:
    """Two-block CNN exposing the same four tap points as the full pipeline.

    Block one keeps the input resolution (the early tap); block two halves it
    with a stride-2 unit and runs two more units (the three late taps). All
    taps are post-ReLU, so pooled values are nonnegative.
    """

    def __init__(self, config: ToyBackboneConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c_in, c4, c5 = config.in_channels, config.early_channels, config.late_channels
        self.config = config
        self.conv4 = _make_conv(rng, c_in, c4, 3, 1, gain=2.0)
        self.bn4 = BatchNormLayer(c4)
        self.conv5 = [_make_conv(rng, c4, c5, 3, 2, gain=2.0),
                      _make_conv(rng, c5, c5, 3, 1, gain=2.0),
                      _make_conv(rng, c5, c5, 3, 1, gain=2.0)]
        self.bn5 = [BatchNormLayer(c5) for _ in range(3)]

    def forward(self, image: np.ndarray, mode: str = "eval") -> StageMaps:
        x = Tensor(image[None] if image.ndim == 3 else image)
        x_4_23 = relu(self.bn4(self.conv4(x), mode))
        h = x_4_23
        taps = []
        for conv, bn in zip(self.conv5, self.bn5):
            h = relu(bn(conv(h), mode))
            taps.append(h)
        return StageMaps(x_4_23, *taps)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("backbone.conv4.w", self.conv4.w), ("backbone.conv4.b", self.conv4.b),
               ("backbone.bn4.gamma", self.bn4.gamma), ("backbone.bn4.beta", self.bn4.beta)]
        for i, (conv, bn) in enumerate(zip(self.conv5, self.bn5)):
            out += [(f"backbone.conv5_{i}.w", conv.w), (f"backbone.conv5_{i}.b", conv.b),
                    (f"backbone.bn5_{i}.gamma", bn.gamma), (f"backbone.bn5_{i}.beta", bn.beta)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = [("backbone.bn4.running_mean", self.bn4.state.running_mean),
               ("backbone.bn4.running_var", self.bn4.state.running_var)]
        for i, bn in enumerate(self.bn5):
            out += [(f"backbone.bn5_{i}.running_mean", bn.state.running_mean),
                    (f"backbone.bn5_{i}.running_var", bn.state.running_var)]
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        stage, stat = name.rsplit(".", 1)
        bn = self.bn4 if stage.endswith("bn4") else self.bn5[int(stage.rsplit("_", 1)[1])]
        setattr(bn.state, stat, np.asarray(value, dtype=default_dtype()))

    def attention_config(self) -> AttentionConfig:
        c4, c5 = self.config.early_channels, self.config.late_channels
        return AttentionConfig(in_channels=c4, att1_channels=(c4, c4, c4, c5))


# ---------------------------------------------------------------------------
# serialization: one tensor file per parameter plus a manifest


def save_attention_net(net: AttentionNet, spec: PoolingSpec, directory: str,
                       extra_params=None, extra_meta: dict | None = None,
                       extra_buffers=None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = list(net.named_parameters()) + list(extra_params or [])
    names = []
    for name, tensor in entries:
        fname = name.replace(".", "_") + ".agtf"
        storage.write_tensor(os.path.join(directory, fname), np.asarray(tensor.data))
        names.append({"name": name, "file": fname,
                      "shape": list(np.shape(tensor.data))})
    buffers = []
    for name, arr in list(net.named_buffers()) + list(extra_buffers or []):
        fname = name.replace(".", "_") + ".agtf"
        storage.write_tensor(os.path.join(directory, fname), arr)
        buffers.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "parameters": names,
        "buffers": buffers,
        "pooling": {"kind": spec.kind, "p": spec.p, "p_mode": spec.p_mode,
                    "eps": spec.eps},
        "attention_config": {
            "in_channels": net.config.in_channels,
            "att1_channels": list(net.config.att1_channels)},
    }
    if extra_meta:
        manifest.update(extra_meta)
    storage.write_json(os.path.join(directory, "manifest.json"), manifest)


def load_attention_net(directory: str):
    """Returns (net, pooling spec, manifest dict)."""
    manifest = storage.read_json(os.path.join(directory, "manifest.json"))
    cfg = manifest["attention_config"]
    config = AttentionConfig(in_channels=cfg["in_channels"],
                             att1_channels=tuple(cfg["att1_channels"]))
    net = AttentionNet(config, zero_init=True)
    by_name = dict(net.named_parameters())
    for entry in manifest["parameters"]:
        if entry["name"] not in by_name:
            continue
        arr = storage.read_tensor(os.path.join(directory, entry["file"]))
        target = by_name[entry["name"]]
        if tuple(arr.shape) != tuple(np.shape(target.data)):
            raise storage.FormatError(f"parameter {entry['name']}: stored shape "
                                      f"{arr.shape} != expected {np.shape(target.data)}")
        target.data = np.asarray(arr, dtype=default_dtype()).reshape(target.data.shape)
    for entry in manifest["buffers"]:
        if not entry["name"].startswith("att1."):
            continue  # buffer belongs to a wrapping model, not this net
        arr = storage.read_tensor(os.path.join(directory, entry["file"]))
        net.set_buffer(entry["name"], arr)
    p = manifest["pooling"]
    spec = PoolingSpec(kind=p["kind"], p=p["p"], p_mode=p["p_mode"], eps=p["eps"])
    spec.p = float(net.p.data)
    return net, spec, manifest
