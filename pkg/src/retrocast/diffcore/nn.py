"""Differentiable building blocks used by the decoders.

Everything here composes the primitives in :mod:`retrocast.diffcore.tensor`,
except :func:`bilinear_sample` which carries a hand-written adjoint so that
gradients flow into both the sampled grid and the sampling coordinates.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatchError, Tensor, as_tensor, stack

LAYER_NORM_VAR_EPS = 1e-6
SCALE_FLOOR = 1e-3


class Parameter(Tensor):
    """Leaf tensor with a stable name for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name


class ParamStore:
    """Registry of named parameters with seeded initialization."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, shape: tuple, init: str = "fan") -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "fan":
            fan_in = shape[0] if len(shape) >= 2 else max(shape[0], 1)
            value = self.rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
        elif init == "embed":
            value = self.rng.normal(0.0, 0.5, shape)
        else:
            raise ValueError(f"unknown init: {init}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def n_scalars(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


# -- functional ops ----------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ W + b with x of shape (..., d_in) and W of shape (d_in, d_out)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatchError(
            f"linear: input shape {x.shape} incompatible with weight {W.shape}"
        )
    y = x @ W
    return y if b is None else y + as_tensor(b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x - Tensor(x.value.max(axis=axis, keepdims=True))
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis; variance is floored so constants map to zero."""
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + LAYER_NORM_VAR_EPS).sqrt()
    return normed * as_tensor(gamma) + as_tensor(beta)


def positive_scale(x: Tensor) -> Tensor:
    """Map raw head output to a strictly positive scale, bounded off zero."""
    return as_tensor(x).softplus() + SCALE_FLOOR


def positional_encoding(coords: Tensor, width: int) -> Tensor:
    """Sinusoidal encoding of each coordinate axis, concatenated to `width`.

    `coords` has shape (..., C); each axis receives width // C interleaved
    sin/cos channels over geometrically spaced wavelengths.
    """
    coords = as_tensor(coords)
    n_axes = coords.shape[-1]
    if width % 2 != 0:
        raise ShapeMismatchError(f"encoding width must be even, got {width}")
    per_axis = width // n_axes
    if per_axis % 2 != 0 or per_axis * n_axes != width:
        raise ShapeMismatchError(
            f"width {width} not divisible into even blocks for {n_axes} axes"
        )
    n_freq = per_axis // 2
    inv_freq = 1.0 / (10000.0 ** (np.arange(n_freq) * 2.0 / per_axis))
    blocks = []
    for c in range(n_axes):
        t = coords[..., c : c + 1] * Tensor(inv_freq)
        inter = stack([t.sin(), t.cos()], axis=-1)
        blocks.append(inter.reshape(t.shape[:-1] + (per_axis,)))
    if len(blocks) == 1:
        return blocks[0]
    from .tensor import concat

    return concat(blocks, axis=-1)


def bilinear_sample(grid, coords) -> Tensor:
    """Bilinearly interpolate `grid` (H, W, D) at `coords` (K, 2) in cell units.

    Coordinates outside [0, H-1] x [0, W-1] yield zero features with zero
    gradient. Differentiable in both the grid values and the coordinates.
    """
    grid = as_tensor(grid)
    coords = as_tensor(coords)
    H, W, D = grid.shape
    cv = coords.value
    x, y = cv[:, 0], cv[:, 1]
    valid = (x >= 0.0) & (x <= H - 1.0) & (y >= 0.0) & (y <= W - 1.0)

    # non-finite coordinates count as out of range instead of crashing the
    # integer cast below; they already fail the validity mask
    xc = np.where(np.isfinite(x), np.clip(x, 0.0, H - 1.0), 0.0)
    yc = np.where(np.isfinite(y), np.clip(y, 0.0, W - 1.0), 0.0)
    x0 = np.minimum(np.floor(xc), H - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), W - 2).astype(np.intp)
    fx = xc - x0
    fy = yc - y0

    g = grid.value
    g00 = g[x0, y0]
    g01 = g[x0, y0 + 1]
    g10 = g[x0 + 1, y0]
    g11 = g[x0 + 1, y0 + 1]

    w00 = (1 - fx) * (1 - fy)
    w01 = (1 - fx) * fy
    w10 = fx * (1 - fy)
    w11 = fx * fy
    out_val = (
        w00[:, None] * g00 + w01[:, None] * g01 + w10[:, None] * g10 + w11[:, None] * g11
    )
    out_val[~valid] = 0.0
    out = Tensor(out_val, (grid, coords))

    def gfn(gout):
        gv = gout.copy()
        gv[~valid] = 0.0
        gbuf = np.zeros_like(g)
        np.add.at(gbuf, (x0, y0), w00[:, None] * gv)
        np.add.at(gbuf, (x0, y0 + 1), w01[:, None] * gv)
        np.add.at(gbuf, (x0 + 1, y0), w10[:, None] * gv)
        np.add.at(gbuf, (x0 + 1, y0 + 1), w11[:, None] * gv)
        grid._accum(gbuf)

        dx = ((g10 - g00) * (1 - fy)[:, None] + (g11 - g01) * fy[:, None])
        dy = ((g01 - g00) * (1 - fx)[:, None] + (g11 - g10) * fx[:, None])
        gc = np.zeros_like(cv)
        gc[:, 0] = (gv * dx).sum(axis=1)
        gc[:, 1] = (gv * dy).sum(axis=1)
        gc[~valid] = 0.0
        coords._accum(gc)

    out._grad_fn = gfn
    return out


# -- parameterized modules ---------------------------------------------

class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 zero_init: bool = False):
        self.W = store.add(f"{name}.W", (d_in, d_out),
                           init="zeros" if zero_init else "fan")
        self.b = store.add(f"{name}.b", (d_out,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)


class MLP:
    """Stack of linear layers with ReLU between them."""

    def __init__(self, store: ParamStore, name: str, dims: list[int],
                 zero_init_last: bool = False):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(store, f"{name}.{i}", a, b, zero_init=zero_init_last and last)
            )

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.add(f"{name}.gamma", (d,), init="zeros")
        self.beta = store.add(f"{name}.beta", (d,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        # gamma parameterized around 1 so zero-init keeps identity scaling
        return layer_norm(x, self.gamma + 1.0, self.beta)


class MultiHeadAttention:
    """Scaled dot-product attention over (batch, length, d_model) operands."""

    def __init__(self, store: ParamStore, name: str, d_model: int, n_heads: int):
        if d_model % n_heads != 0:
            raise ShapeMismatchError(
                f"d_model {d_model} not divisible by n_heads {n_heads}"
            )
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(store, f"{name}.q", d_model, d_model)
        self.wk = Linear(store, f"{name}.k", d_model, d_model)
        self.wv = Linear(store, f"{name}.v", d_model, d_model)
        self.wo = Linear(store, f"{name}.o", d_model, d_model)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        B, Lq, D = q.shape
        Lk = k.shape[1]
        h, dh = self.n_heads, self.d_head

        def split(t, L):
            return t.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

        Q = split(self.wq(q), Lq)
        K = split(self.wk(k), Lk)
        V = split(self.wv(v), Lk)
        scores = (Q @ K.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        attn = softmax(scores, axis=-1)
        mixed = attn @ V
        merged = mixed.transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return self.wo(merged)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         store: ParamStore | None = None,
                         name: str = "mha") -> Tensor:
    """Functional one-shot attention; creates throwaway projections."""
    if store is None:
        store = ParamStore(0)
    mha = MultiHeadAttention(store, name, q.shape[-1], n_heads)
    return mha(q, k, v)


class FeedForward:
    """Position-wise feed-forward with residual and layer norm."""

    def __init__(self, store: ParamStore, name: str, d_model: int, d_hidden: int):
        self.fc1 = Linear(store, f"{name}.fc1", d_model, d_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_model)
        self.norm = LayerNorm(store, f"{name}.norm", d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.fc2(self.fc1(x).relu()))


class AttentionBlock:
    """Attention + residual + layer norm + feed-forward sublayer."""

    def __init__(self, store: ParamStore, name: str, d_model: int, n_heads: int,
                 ffn_mult: int = 2):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d_model, n_heads)
        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.ffn = FeedForward(store, f"{name}.ffn", d_model, ffn_mult * d_model)

    def __call__(self, q: Tensor, k: Tensor | None = None,
                 v: Tensor | None = None) -> Tensor:
        if k is None:
            k = q
        if v is None:
            v = k
        x = self.norm(q + self.attn(q, k, v))
        return self.ffn(x)
