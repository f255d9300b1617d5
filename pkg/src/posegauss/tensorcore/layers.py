"""Parameter containers and the network building blocks used by the encoders,
decoder and depth solver."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class LayerParams:
    """Convolution (or dense) weights in (kh, kw, cin, cout) layout plus bias."""

    weight: Tensor
    bias: Tensor | None = None

    @property
    def kernel(self):
        return self.weight.shape[:2]

    @property
    def in_channels(self):
        return self.weight.shape[2]

    @property
    def out_channels(self):
        return self.weight.shape[3]

    @classmethod
    def init(cls, kh, kw, cin, cout, rng, dtype=np.float32, bias=True, name="conv"):
        """Fan-in scaled uniform init; biases start at zero."""
        bound = 1.0 / np.sqrt(kh * kw * cin)
        w = rng.uniform(-bound, bound, size=(kh, kw, cin, cout)).astype(dtype)
        b = ag.param(np.zeros(cout, dtype=dtype), f"{name}.bias") if bias else None
        return cls(ag.param(w, f"{name}.weight"), b)

    @classmethod
    def zeros(cls, kh, kw, cin, cout, dtype=np.float32, bias=True, name="conv"):
        w = ag.param(np.zeros((kh, kw, cin, cout), dtype=dtype), f"{name}.weight")
        b = ag.param(np.zeros(cout, dtype=dtype), f"{name}.bias") if bias else None
        return cls(w, b)


def iter_params(obj, prefix=""):
    """Yield ``(name, Tensor)`` for every trainable leaf inside ``obj``.

    Walks dataclasses, lists/tuples and dicts in declaration order, so the
    sequence is canonical for a given structure.
    """
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if isinstance(obj, LayerParams):
        yield f"{prefix}.weight", obj.weight
        if obj.bias is not None:
            yield f"{prefix}.bias", obj.bias
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            yield from iter_params(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_params(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in obj:
            yield from iter_params(obj[key], f"{prefix}.{key}")


def static(default=None):
    """Dataclass field that holds configuration, not parameters."""
    return field(default=default, metadata={"static": True})


def zero_grads(obj):
    for _, p in iter_params(obj):
        p.zero_grad()


def conv2d(x: Tensor, params: LayerParams, stride=1, padding=0) -> Tensor:
    return ag.conv2d_raw(x, params.weight, params.bias, stride=stride, padding=padding)


def dense(x: Tensor, params: LayerParams) -> Tensor:
    """Fully connected layer on the last axis, reusing a 1x1 conv weight."""
    w = params.weight.reshape(params.in_channels, params.out_channels)
    if x.ndim == 1:
        return dense(x.reshape(1, -1), params).reshape(-1)
    out = ag.matmul(x, w)
    if params.bias is not None:
        out = out + params.bias
    return out


# ------------------------------------------------------------- SE block


@dataclass
class SEParams:
    squeeze: LayerParams
    excite: LayerParams

    @classmethod
    def init(cls, channels, reduction, rng, dtype=np.float32, name="se"):
        if channels % reduction:
            raise ValueError(f"SE reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        return cls(
            LayerParams.init(1, 1, channels, hidden, rng, dtype, name=f"{name}.squeeze"),
            LayerParams.init(1, 1, hidden, channels, rng, dtype, name=f"{name}.excite"),
        )


def se_gates(x: Tensor, params: SEParams) -> Tensor:
    """Per-channel gates sigmoid(MLP(global average pool)), shape (..., C)."""
    pooled = x.mean(axis=(-3, -2))
    hidden = ag.relu(dense(pooled, params.squeeze))
    return ag.sigmoid(dense(hidden, params.excite))


def se_block(x: Tensor, params: SEParams) -> Tensor:
    if x.shape[-1] != params.squeeze.in_channels:
        raise ValueError(
            f"se_block: input shape {x.shape} vs squeeze weight shape {params.squeeze.weight.shape}"
        )
    g = se_gates(x, params)
    return x * ag.reshape(g, g.shape[:-1] + (1, 1, g.shape[-1]))


# -------------------------------------------------------- residual unit


@dataclass
class ResidualParams:
    conv1: LayerParams
    conv2: LayerParams
    se: SEParams
    proj: LayerParams | None = None
    stride: int = static(1)

    @classmethod
    def init(cls, cin, cout, rng, stride=1, reduction=4, dtype=np.float32, name="res"):
        proj = None
        if cin != cout or stride != 1:
            proj = LayerParams.init(1, 1, cin, cout, rng, dtype, name=f"{name}.proj")
        return cls(
            LayerParams.init(3, 3, cin, cout, rng, dtype, name=f"{name}.conv1"),
            LayerParams.init(3, 3, cout, cout, rng, dtype, name=f"{name}.conv2"),
            SEParams.init(cout, reduction, rng, dtype, name=f"{name}.se"),
            proj,
            stride,
        )


def residual_block(x: Tensor, params: ResidualParams) -> Tensor:
    """relu(SE(conv(relu(conv(x))))) + skip(x), skip a strided 1x1 when shapes change."""
    s = params.stride
    h = ag.relu(conv2d(x, params.conv1, stride=s, padding=1))
    h = conv2d(h, params.conv2, padding=1)
    h = ag.relu(se_block(h, params.se))
    skip = x if params.proj is None else conv2d(x, params.proj, stride=s)
    return h + skip


# ---------------------------------------------------------- conv GRU


@dataclass
class GRUParams:
    update: LayerParams
    reset: LayerParams
    candidate: LayerParams

    @property
    def hidden(self):
        return self.update.out_channels

    @classmethod
    def init(cls, hidden, inputs, rng, kernel=3, dtype=np.float32, name="gru"):
        c = hidden + inputs
        return cls(
            LayerParams.init(kernel, kernel, c, hidden, rng, dtype, name=f"{name}.update"),
            LayerParams.init(kernel, kernel, c, hidden, rng, dtype, name=f"{name}.reset"),
            LayerParams.init(kernel, kernel, c, hidden, rng, dtype, name=f"{name}.candidate"),
        )


def conv_gru_step(hidden: Tensor, x: Tensor, params: GRUParams) -> Tensor:
    if hidden.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"conv_gru_step: hidden {hidden.shape} and input {x.shape} differ spatially")
    pad = params.update.kernel[0] // 2
    hx = ag.concat([hidden, x], axis=-1)
    z = ag.sigmoid(conv2d(hx, params.update, padding=pad))
    r = ag.sigmoid(conv2d(hx, params.reset, padding=pad))
    cand = ag.tanh(conv2d(ag.concat([r * hidden, x], axis=-1), params.candidate, padding=pad))
    return (1.0 - z) * hidden + z * cand
