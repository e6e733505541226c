"""Encoder, fusion, and channel-interaction building blocks.

All blocks are pure functions of (input tensor, parameter struct, train flag).
Parameters are created through a :class:`ParamRegistry` so every learnable
tensor and running buffer has a stable hierarchical name for checkpoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .fourier import amplitude_phase, from_amplitude_phase, irfft2, rfft2
from .tensor import ShapeError, Tensor, accumulate_grad, make_op

__all__ = [
    "ParamRegistry",
    "ConvParams",
    "BnParams",
    "ConvBnParams",
    "SpatialBlockParams",
    "FrequencyBlockParams",
    "CrossAttentionParams",
    "TciParams",
    "init_conv",
    "init_bn",
    "init_conv_bn",
    "init_spatial_block",
    "init_frequency_block",
    "init_cross_attention",
    "init_tci",
    "conv_bn_relu",
    "spatial_encoder_block",
    "frequency_encoder_block",
    "ppm_sample",
    "attention_weights",
    "cross_attention_fuse",
    "cosine_adjacency",
    "channel_cosine_adjacency",
    "improved_laplacian",
    "tci_core",
    "tci_forward",
]


class ParamRegistry:
    """Insertion-ordered store of learnable tensors and running buffers."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def param(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        a = np.array(arr, dtype=self.dtype)
        self.buffers[name] = a
        return a


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ConvBnParams:
    conv: ConvParams
    bn: BnParams


@dataclass
class SpatialBlockParams:
    """Conv-BN-ReLU -> Conv-BN -> (+residual, 1x1-projected if needed) -> ReLU."""

    cb1: ConvBnParams
    cb2: ConvBnParams
    proj: ConvParams | None


@dataclass
class FrequencyBlockParams:
    amp1: ConvBnParams
    amp2: ConvParams
    pha1: ConvBnParams
    pha2: ConvParams
    chan: ConvParams  # 1x1, Cin -> Cout


@dataclass
class CrossAttentionParams:
    wsq: ConvBnParams
    wfq: ConvBnParams
    wsk: ConvBnParams
    wfk: ConvBnParams
    wv: ConvBnParams
    wout: ConvParams
    d0: int


@dataclass
class TciParams:
    embed_w: Tensor  # C x C channel-mixing 1x1
    embed_b: Tensor
    theta: Tensor  # D x D, or D x D' when factorized
    theta2: Tensor | None  # D' x D when factorized
    up_w: Tensor  # C x 4 x 4 depthwise transposed kernel
    up_b: Tensor


def init_conv(reg: ParamRegistry, rng, name: str, cout: int, cin: int, k: int) -> ConvParams:
    w = reg.param(f"{name}.w", _he_normal(rng, (cout, cin, k, k), cin * k * k))
    b = reg.param(f"{name}.b", np.zeros(cout))
    return ConvParams(w, b)


def init_bn(reg: ParamRegistry, name: str, c: int) -> BnParams:
    return BnParams(
        gamma=reg.param(f"{name}.gamma", np.ones(c)),
        beta=reg.param(f"{name}.beta", np.zeros(c)),
        running_mean=reg.buffer(f"{name}.rmean", np.zeros(c)),
        running_var=reg.buffer(f"{name}.rvar", np.ones(c)),
    )


def init_conv_bn(reg, rng, name, cout, cin, k) -> ConvBnParams:
    return ConvBnParams(
        conv=init_conv(reg, rng, f"{name}.conv", cout, cin, k),
        bn=init_bn(reg, f"{name}.bn", cout),
    )


def init_spatial_block(reg, rng, name, cin, cout) -> SpatialBlockParams:
    cb1 = init_conv_bn(reg, rng, f"{name}.cb1", cout, cin, 3)
    cb2 = init_conv_bn(reg, rng, f"{name}.cb2", cout, cout, 3)
    proj = init_conv(reg, rng, f"{name}.proj", cout, cin, 1) if cin != cout else None
    return SpatialBlockParams(cb1, cb2, proj)


def init_frequency_block(reg, rng, name, cin, cout) -> FrequencyBlockParams:
    return FrequencyBlockParams(
        amp1=init_conv_bn(reg, rng, f"{name}.amp1", cin, cin, 3),
        amp2=init_conv(reg, rng, f"{name}.amp2", cin, cin, 3),
        pha1=init_conv_bn(reg, rng, f"{name}.pha1", cin, cin, 3),
        pha2=init_conv(reg, rng, f"{name}.pha2", cin, cin, 3),
        chan=init_conv(reg, rng, f"{name}.chan", cout, cin, 1),
    )


def init_cross_attention(reg, rng, name, c, d0) -> CrossAttentionParams:
    return CrossAttentionParams(
        wsq=init_conv_bn(reg, rng, f"{name}.wsq", d0, c, 1),
        wfq=init_conv_bn(reg, rng, f"{name}.wfq", d0, c, 1),
        wsk=init_conv_bn(reg, rng, f"{name}.wsk", d0, c, 1),
        wfk=init_conv_bn(reg, rng, f"{name}.wfk", d0, c, 1),
        wv=init_conv_bn(reg, rng, f"{name}.wv", d0, 2 * c, 1),
        wout=init_conv(reg, rng, f"{name}.wout", c, d0, 1),
        d0=d0,
    )


def init_tci(reg, rng, name, c, d, inner: int | None = None) -> TciParams:
    # Theta follows the conv init recipe with an extra 1/sqrt(D) damping so the
    # graph term starts small; the upsample is zero so the module opens as an
    # exact identity.
    if inner is None:
        theta = reg.param(f"{name}.theta", _he_normal(rng, (d, d), d) / math.sqrt(d))
        theta2 = None
    else:
        theta = reg.param(f"{name}.theta", _he_normal(rng, (d, inner), d) / math.sqrt(d))
        theta2 = reg.param(f"{name}.theta2", _he_normal(rng, (inner, d), inner) / math.sqrt(inner))
    return TciParams(
        embed_w=reg.param(f"{name}.embed.w", _he_normal(rng, (c, c), c)),
        embed_b=reg.param(f"{name}.embed.b", np.zeros(c)),
        theta=theta,
        theta2=theta2,
        up_w=reg.param(f"{name}.up.w", np.zeros((c, 4, 4))),
        up_b=reg.param(f"{name}.up.b", np.zeros(c)),
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def conv_bn_relu(x: Tensor, p: ConvBnParams, train: bool, stride: int = 1, padding: int = 0) -> Tensor:
    y = T.conv2d(x, p.conv.w, p.conv.b, stride=stride, padding=padding)
    y = T.batchnorm2d(y, p.bn.gamma, p.bn.beta, p.bn.running_mean, p.bn.running_var, train)
    return T.relu(y)


def spatial_encoder_block(f: Tensor, p: SpatialBlockParams, train: bool) -> Tensor:
    h = conv_bn_relu(f, p.cb1, train, padding=1)
    y = T.conv2d(h, p.cb2.conv.w, p.cb2.conv.b, padding=1)
    y = T.batchnorm2d(y, p.cb2.bn.gamma, p.cb2.bn.beta, p.cb2.bn.running_mean, p.cb2.bn.running_var, train)
    res = f if p.proj is None else T.conv2d(f, p.proj.w, p.proj.b)
    return T.relu(T.add(y, res))


def _filter_stack(x: Tensor, cb: ConvBnParams, c2: ConvParams, train: bool) -> Tensor:
    h = conv_bn_relu(x, cb, train, padding=1)
    return T.conv2d(h, c2.w, c2.b, padding=1)


def frequency_encoder_block(f: Tensor, p: FrequencyBlockParams, train: bool) -> Tensor:
    """Filter amplitude/phase spectra with learned convs, invert, and mix channels.

    Steps: transform, split into amplitude and phase, run each through its
    filter stack with a residual add, recompose, invert, add the spatial-domain
    residual, and adjust channels with the 1x1 conv.
    """
    w = f.data.shape[-1]
    spec = rfft2(f)
    amp, pha = amplitude_phase(spec)
    amp_fuse = T.add(_filter_stack(amp, p.amp1, p.amp2, train), amp)
    pha_fuse = T.add(_filter_stack(pha, p.pha1, p.pha2, train), pha)
    x_ = irfft2(from_amplitude_phase(amp_fuse, pha_fuse, w))
    return T.conv2d(T.add(x_, f), p.chan.w, p.chan.b)


def ppm_sample(f: Tensor, bins: Sequence[int]) -> Tensor:
    """Pool to each b x b grid and concatenate the flattened cells as tokens."""
    if not bins:
        raise ShapeError("ppm_sample: empty bin list")
    n, c = f.data.shape[:2]
    pieces = []
    for b in bins:
        pooled = T.adaptive_avg_pool2d(f, int(b))
        pieces.append(T.reshape(pooled, (n, c, int(b) * int(b))))
    tokens = pieces[0]
    for piece in pieces[1:]:
        tokens = T.concat_channels(tokens, piece, axis=2)
    return T.transpose_last2(tokens)  # (N, S, c)


def attention_weights(
    f_spa: Tensor,
    f_freq: Tensor,
    p: CrossAttentionParams,
    bins: Sequence[int],
    train: bool,
) -> tuple[Tensor, Tensor]:
    """Row-stochastic attention (N, H*W, S) and the value tokens (N, S, d0)."""
    if f_spa.data.shape != f_freq.data.shape:
        raise ShapeError(
            f"cross_attention_fuse: stream shapes {f_spa.data.shape} and {f_freq.data.shape} differ"
        )
    n, c, h, w = f_spa.data.shape
    d0 = p.d0

    def as_queries(x: Tensor) -> Tensor:
        return T.transpose_last2(T.reshape(x, (n, d0, h * w)))

    q_spa = as_queries(conv_bn_relu(f_spa, p.wsq, train))
    q_freq = as_queries(conv_bn_relu(f_freq, p.wfq, train))
    k_spa = ppm_sample(conv_bn_relu(f_spa, p.wsk, train), bins)
    k_freq = ppm_sample(conv_bn_relu(f_freq, p.wfk, train), bins)
    v = ppm_sample(conv_bn_relu(T.concat_channels(f_spa, f_freq), p.wv, train), bins)

    scores = T.add(
        T.matmul(q_spa, T.transpose_last2(k_freq)),
        T.matmul(q_freq, T.transpose_last2(k_spa)),
    )
    attn = T.softmax_rows(T.scale(scores, 1.0 / math.sqrt(d0)))
    return attn, v


def cross_attention_fuse(
    f_spa: Tensor,
    f_freq: Tensor,
    p: CrossAttentionParams,
    bins: Sequence[int],
    train: bool,
) -> Tensor:
    n, c, h, w = f_spa.data.shape
    attn, v = attention_weights(f_spa, f_freq, p, bins, train)
    ca = T.matmul(attn, v)  # (N, H*W, d0)
    ca = T.reshape(T.transpose_last2(ca), (n, p.d0, h, w))
    out = T.conv2d(ca, p.wout.w, p.wout.b)
    return T.add(T.add(out, f_spa), f_freq)


def cosine_adjacency(e: Tensor) -> Tensor:
    """Row-cosine similarity matrix of (N, C, D) embeddings.

    Zero-norm rows get 0 off-diagonal; the diagonal is exactly 1. The output
    is exactly symmetric.
    """
    if e.data.ndim != 3:
        raise ShapeError(f"cosine_adjacency: expected (N, C, D), got {e.data.shape}")
    n, c, _ = e.data.shape
    norms = np.sqrt((e.data * e.data).sum(axis=-1))
    safe = norms > 0
    ehat = np.zeros_like(e.data)
    np.divide(e.data, norms[..., None], out=ehat, where=safe[..., None])
    raw = np.matmul(ehat, ehat.swapaxes(-1, -2))
    a = 0.5 * (raw + raw.swapaxes(-1, -2))
    di = np.arange(c)
    a[:, di, di] = 1.0

    def backward(g):
        goff = g.copy()
        goff[:, di, di] = 0.0
        gsym = goff + goff.swapaxes(-1, -2)
        ge_hat = np.matmul(gsym, ehat)
        dot = (ge_hat * ehat).sum(axis=-1, keepdims=True)
        ge = np.zeros_like(e.data)
        np.divide(ge_hat - dot * ehat, norms[..., None], out=ge, where=safe[..., None])
        accumulate_grad(e, ge)

    return make_op(a, (e,), backward, "cosine_adjacency")


def channel_cosine_adjacency(f: Tensor, embed_w: Tensor, embed_b: Tensor) -> Tensor:
    """Adjacency over channels: embed with a channel-mixing ReLU layer, then cosine."""
    e = T.relu(T.add_channel_bias(T.matmul(embed_w, f), embed_b))
    return cosine_adjacency(e)


def improved_laplacian(a: Tensor) -> Tensor:
    """L = I - D^{-1/2} (A + I) D^{-1/2} with D the degree of the self-looped graph."""
    if a.data.ndim != 3 or a.data.shape[-1] != a.data.shape[-2]:
        raise ShapeError(f"improved_laplacian: expected (N, C, C), got {a.data.shape}")
    n, c, _ = a.data.shape
    eye = Tensor(np.broadcast_to(np.eye(c, dtype=a.data.dtype), (n, c, c)).copy())
    a_tilde = T.add(a, eye)
    deg = T.sum_last(a_tilde)
    if np.any(deg.data <= 0):
        raise ValueError("improved_laplacian: non-positive degree (precondition violated)")
    # normalize by 1/sqrt(d_i * d_j); exact when the degree product is a
    # perfect square (e.g. the single-channel case, where L must be [0])
    outer = T.matmul(T.reshape(deg, (n, c, 1)), T.reshape(deg, (n, 1, c)))
    return T.sub(eye, T.mul(a_tilde, T.rsqrt(outer)))


def tci_core(f: Tensor, p: TciParams) -> Tensor:
    """Graph interaction on pooled channel rows: relu(L @ f @ Theta), (N, C, D)."""
    adj = channel_cosine_adjacency(f, p.embed_w, p.embed_b)
    lap = improved_laplacian(adj)
    hmid = T.matmul(lap, f)
    if p.theta2 is None:
        hmid = T.matmul(hmid, p.theta)
    else:
        hmid = T.matmul(T.matmul(hmid, p.theta), p.theta2)
    return T.relu(hmid)


def tci_forward(f_in: Tensor, p: TciParams, train: bool) -> Tensor:
    n, c, h, w = f_in.data.shape
    if h % 4 or w % 4:
        raise ShapeError(f"tci_forward: dims ({h}, {w}) not divisible by 4")
    d = (h // 4) * (w // 4)
    f = T.reshape(T.maxpool2d(f_in, 4, 4), (n, c, d))
    h_out = tci_core(f, p)
    up = T.upsample_depthwise(T.reshape(h_out, (n, c, h // 4, w // 4)), p.up_w, p.up_b, 4)
    return T.add(up, f_in)
