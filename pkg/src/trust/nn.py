"""Neural building blocks on top of the tensor engine.

Linear maps, layer normalization, embeddings, strided 2-D convolution,
multi-head attention and post-norm transformer decoder layers. Parameters
live in a ParamStore keyed by dotted names so checkpoints and optimizers
can address them stably.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ParamStore:
    """Ordered map of dotted parameter name -> Tensor (requires_grad)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._init_spec: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, init: str = "explicit") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(data, requires_grad=True, dtype=data.dtype)
        self._params[name] = t
        self._init_spec[name] = init
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def init_spec(self, name: str) -> str:
        return self._init_spec[name]

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            a = np.asarray(arrays[k], dtype=t.dtype)
            if a.shape != t.shape:
                raise ShapeError(f"parameter '{k}': shape {a.shape} != expected {t.shape}")
            t.data = a

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


@dataclass
class DecoderLayerConfig:
    model_dim: int
    num_heads: int
    ffn_dim: int
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")


# -- initializers -------------------------------------------------------------


def uniform_fanin(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or T.DEFAULT_DTYPE)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype or T.DEFAULT_DTYPE)


# -- stateless ops ---------------------------------------------------------------


def linear(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: x(...,in) @ (in,out) + (out)."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"linear: input extent {x.shape[-1]} != weight rows {weights.shape[0]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    y = T.matmul(x, weights)
    if bias is not None:
        y = T.add(y, bias)
    if squeeze:
        y = T.reshape(y, (y.shape[-1],))
    return y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data * xhat + beta.data

    def bwd():
        g = out.grad
        if gamma.requires_grad:
            gamma._ensure_grad()
            gamma.grad += (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            beta._ensure_grad()
            beta.grad += g.reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            x._ensure_grad()
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.grad += inv_std * (dxhat - m1 - xhat * m2)

    out = T._wrap(out_data.astype(x.dtype, copy=False), (x, gamma, beta), bwd, "layer_norm")
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row gather from a (V, d) table; backward scatter-adds into the table."""
    return T.gather(table, indices)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor],
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B,H,W,Cin) or (H,W,Cin) with (k,k,Cin,Cout)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: expected rank 3 or 4 input, got {x.shape}")
    b, h, w, cin = xd.shape
    k, k2, kcin, cout = kernels.shape
    if k != k2 or kcin != cin:
        raise ShapeError(f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ShapeError(
            f"conv2d: non-integral output extent for input {h}x{w}, k={k}, stride={stride}, padding={padding}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    # windows: (B, oh, ow, k, k, Cin) -> flat columns for one GEMM
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]                    # (B, oh, ow, Cin, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * oh * ow, k * k * cin)
    wmat = kernels.data.reshape(k * k * cin, cout)
    out2d = cols @ wmat
    if bias is not None:
        out2d = out2d + bias.data
    out_data = out2d.reshape(b, oh, ow, cout)
    if squeeze:
        out_data = out_data[0]

    def bwd():
        g2d = (out.grad[None] if squeeze else out.grad).reshape(b * oh * ow, cout)
        if kernels.requires_grad:
            kernels._ensure_grad()
            kernels.grad += (cols.T @ g2d).reshape(k, k, cin, cout)
        if bias is not None and bias.requires_grad:
            bias._ensure_grad()
            bias.grad += g2d.sum(axis=0)
        if x.requires_grad:
            x._ensure_grad()
            dcols = (g2d @ wmat.T).reshape(b, oh, ow, k, k, cin)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride, :] += dcols[:, :, :, ki, kj, :]
            dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
            x.grad += dx[0] if squeeze else dx

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = T._wrap(out_data, parents, bwd, "conv2d")
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B,H,W,C) or (H,W,C)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, h, w, c = xd.shape
    out_data = xd.repeat(2, axis=1).repeat(2, axis=2)
    if squeeze:
        out_data = out_data[0]

    def bwd():
        if x.requires_grad:
            x._ensure_grad()
            g = out.grad[None] if squeeze else out.grad
            folded = g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))
            x.grad += folded[0] if squeeze else folded

    out = T._wrap(out_data, (x,), bwd, "upsample2x")
    return out


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator],
            training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return T.mul(x, Tensor(keep, dtype=x.dtype))


def sinusoidal_pe_2d(h: int, w: int, d: int, dtype=None) -> np.ndarray:
    """Additive 2-D sinusoidal positional encoding of shape (h, w, d)."""
    if d % 4 != 0:
        raise ValueError(f"positional encoding dim {d} must be divisible by 4")
    half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, half, 2) / half))
    ys = np.arange(h)[:, None] * freqs[None, :]
    xs = np.arange(w)[:, None] * freqs[None, :]
    pe = np.zeros((h, w, d))
    pe[:, :, 0:half:2] = np.sin(ys)[:, None, :]
    pe[:, :, 1:half:2] = np.cos(ys)[:, None, :]
    pe[:, :, half::2] = np.sin(xs)[None, :, :]
    pe[:, :, half + 1::2] = np.cos(xs)[None, :, :]
    return pe.astype(dtype or T.DEFAULT_DTYPE)


# -- stateful modules -------------------------------------------------------------


class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, dtype=None):
        self.w = store.add(f"{name}.w", uniform_fanin(rng, (in_dim, out_dim), in_dim, dtype),
                           init=f"uniform_fanin({in_dim})")
        self.b = store.add(f"{name}.b", np.zeros(out_dim, dtype=dtype or T.DEFAULT_DTYPE),
                           init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, dtype=None, epsilon: float = 1e-5):
        dt = dtype or T.DEFAULT_DTYPE
        self.gamma = store.add(f"{name}.gamma", np.ones(dim, dtype=dt), init="ones")
        self.beta = store.add(f"{name}.beta", np.zeros(dim, dtype=dt), init="zeros")
        self.epsilon = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.epsilon)


class Embedding:
    def __init__(self, store: ParamStore, name: str, vocab: int, dim: int,
                 rng: np.random.Generator, dtype=None):
        self.table = store.add(f"{name}.table", normal_init(rng, (vocab, dim), 0.02, dtype),
                               init="normal(0.02)")

    def __call__(self, indices) -> Tensor:
        return embedding_lookup(self.table, indices)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, k: int,
                 stride: int, padding: int, rng: np.random.Generator, dtype=None):
        fan_in = k * k * in_ch
        self.kernels = store.add(f"{name}.kernels", uniform_fanin(rng, (k, k, in_ch, out_ch), fan_in, dtype),
                                 init=f"uniform_fanin({fan_in})")
        self.bias = store.add(f"{name}.bias", np.zeros(out_ch, dtype=dtype or T.DEFAULT_DTYPE),
                              init="zeros")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernels, self.bias, self.stride, self.padding)


class MultiHeadAttention:
    """Scaled dot-product attention with per-head splits and output projection."""

    def __init__(self, store: ParamStore, name: str, cfg: DecoderLayerConfig,
                 rng: np.random.Generator, dtype=None):
        d = cfg.model_dim
        self.cfg = cfg
        self.wq = Linear(store, f"{name}.q", d, d, rng, dtype)
        self.wk = Linear(store, f"{name}.k", d, d, rng, dtype)
        self.wv = Linear(store, f"{name}.v", d, d, rng, dtype)
        self.wo = Linear(store, f"{name}.out", d, d, rng, dtype)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        d = self.cfg.model_dim
        if query.shape[-1] != d or key.shape[-1] != d or value.shape[-1] != d:
            raise ShapeError(
                f"attention: feature dims {query.shape[-1]}/{key.shape[-1]}/{value.shape[-1]} != model_dim {d}")
        nh = self.cfg.num_heads
        dh = d // nh
        squeeze = query.ndim == 2
        q, k, v = query, key, value
        if squeeze:
            q = T.reshape(q, (1,) + q.shape)
            k = T.reshape(k, (1,) + k.shape)
            v = T.reshape(v, (1,) + v.shape)
        b, lq, _ = q.shape
        lk = k.shape[1]

        def split(t: Tensor, length: int) -> Tensor:
            t = T.reshape(t, (b, length, nh, dh))
            t = T.transpose(t, (0, 2, 1, 3))
            return T.reshape(t, (b * nh, length, dh))

        qh = split(self.wq(q), lq)
        kh = split(self.wk(k), lk)
        vh = split(self.wv(v), lk)
        scores = T.matmul(qh, T.transpose(kh, (0, 2, 1)))
        scores = T.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(dh)), dtype=scores.dtype))
        weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, vh)
        ctx = T.reshape(ctx, (b, nh, lq, dh))
        ctx = T.transpose(ctx, (0, 2, 1, 3))
        ctx = T.reshape(ctx, (b, lq, d))
        out = self.wo(ctx)
        if squeeze:
            out = T.reshape(out, (lq, d))
        return out


class DecoderLayer:
    """Post-norm transformer decoder layer: self-attn, cross-attn, FFN."""

    def __init__(self, store: ParamStore, name: str, cfg: DecoderLayerConfig,
                 rng: np.random.Generator, dtype=None):
        d = cfg.model_dim
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(store, f"{name}.self_attn", cfg, rng, dtype)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross_attn", cfg, rng, dtype)
        self.ffn1 = Linear(store, f"{name}.ffn1", d, cfg.ffn_dim, rng, dtype)
        self.ffn2 = Linear(store, f"{name}.ffn2", cfg.ffn_dim, d, rng, dtype)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d, dtype)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d, dtype)
        self.ln3 = LayerNorm(store, f"{name}.ln3", d, dtype)

    def __call__(self, queries: Tensor, memory: Tensor,
                 rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        rate = self.cfg.dropout_rate
        x = queries
        h = self.self_attn(x, x, x)
        x = self.ln1(T.add(x, dropout(h, rate, rng, training)))
        h = self.cross_attn(x, memory, memory)
        x = self.ln2(T.add(x, dropout(h, rate, rng, training)))
        h = self.ffn2(T.relu(self.ffn1(x)))
        x = self.ln3(T.add(x, dropout(h, rate, rng, training)))
        return x


def transformer_decoder_layer(layer: DecoderLayer, queries: Tensor, memory: Tensor,
                              rng: Optional[np.random.Generator] = None,
                              training: bool = False) -> Tensor:
    return layer(queries, memory, rng=rng, training=training)
