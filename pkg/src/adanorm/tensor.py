"""Dense float64 tensors with reverse-mode automatic differentiation.

A small CPU-only engine: just enough operations for convolutional networks
with per-channel gating, fused normalization, and the distance losses used
in this project. Design choices that matter:

* every tensor is a float64 numpy array; no dtype promotion anywhere,
* no implicit broadcasting — elementwise ops demand identical shapes, and
  the broadcast-like patterns (per-channel affine, per-row offsets) are
  explicit ``expand_*`` ops with exact adjoints,
* ``backward`` walks a topologically sorted tape and accumulates gradients
  on leaves only; repeated calls accumulate until grads are zeroed.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "no_grad",
    "add", "sub", "mul", "div", "matmul", "transpose",
    "relu", "sigmoid", "softplus", "exp", "log", "sqrt", "square",
    "tsum", "tmean", "reshape", "concat", "narrow", "take_rows",
    "expand_rows", "expand_c", "expand_nc",
    "conv2d", "avg_pool2", "global_avg_pool", "pixel_shuffle",
    "normalize", "finite_diff_check",
    "TAG_ADAPTIVE", "TAG_BASE",
]

TAG_ADAPTIVE = "adaptive"   # parameters owned by adaptive-fusion norm layers
TAG_BASE = "base"           # everything else (convs, heads, plain norm affines)

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (pure forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return _rsub_scalar(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reverse pass ------------------------------------------------------

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 and accumulate grads on reachable leaves.

        Only scalar roots are accepted; intermediate nodes never keep their
        gradients, leaves accumulate across calls until zeroed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, gp in zip(node._parents, node._backward(g)):
                if gp is None or not (parent.requires_grad or parent._parents):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + gp
                else:
                    # defensive copy only when the adjoint is a view
                    grads[id(parent)] = np.array(gp) if not gp.flags.owndata else gp


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as_scalar(x) -> float | None:
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape} "
                         "(no implicit broadcasting; use expand_* ops)")


# -- elementwise arithmetic --------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _node(a.data + s, (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _node(a.data - s, (a,), lambda g: (g,))
    _check_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def _rsub_scalar(a: Tensor, s) -> Tensor:
    s = _as_scalar(s)
    if s is None:
        raise TypeError("rsub expects a scalar on the left")
    return _node(s - a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return _node(a.data * s, (a,), lambda g: (g * s,))
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        inv = 1.0 / s
        return _node(a.data * inv, (a,), lambda g: (g * inv,))
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return (g / bd, -g * ad / (bd * bd))

    return _node(out, (a, b), bwd)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0.0):
        raise ValueError("log: requires strictly positive input")
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad < 0.0):
        raise ValueError("sqrt: requires non-negative input")
    y = np.sqrt(ad)
    return _node(y, (a,), lambda g: (g * (0.5 / y),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0.0          # subgradient 0 at the kink
    return _node(ad * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    y = np.empty_like(ad)
    pos = ad >= 0.0
    y[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed as max(x,0) + log1p(e^{-|x|}) for stability."""
    ad = a.data
    y = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = np.empty_like(ad)
    pos = ad >= 0.0
    sig[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return _node(y, (a,), lambda g: (g * sig,))


# -- reductions and shape ops ------------------------------------------------

def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else axis
        g2 = np.expand_dims(g, [ax % len(shape) for ax in axes])
        return (np.broadcast_to(g2, shape).copy(),)

    return _node(out, (a,), bwd)


def tmean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        m = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        m = 1
        for ax in axes:
            m *= shape[ax % len(shape)]
    return div(tsum(a, axis=axis), float(m))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d tensor, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat: empty input")
    nd = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ValueError("concat: rank mismatch")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    shape = a.shape
    if not (0 <= start and start + length <= shape[axis]):
        raise ValueError(f"narrow: [{start}:{start+length}] out of range on axis "
                         f"{axis} (size {shape[axis]})")
    sl = [slice(None)] * len(shape)
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        buf = np.zeros(shape)
        buf[sl] = g
        return (buf,)

    return _node(a.data[sl].copy(), (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0; adjoint scatter-adds (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bwd(g):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return _node(a.data[idx].copy(), (a,), bwd)


def expand_rows(a: Tensor, n: int) -> Tensor:
    """[D] -> [n, D] by row repetition; adjoint sums over rows."""
    if a.data.ndim != 1:
        raise ValueError(f"expand_rows: expected 1-d tensor, got {a.shape}")
    return _node(np.broadcast_to(a.data, (n, a.shape[0])).copy(), (a,),
                 lambda g: (g.sum(axis=0),))


def expand_c(a: Tensor, n: int, h: int, w: int) -> Tensor:
    """[C] -> [n, C, h, w]; adjoint sums over sample and spatial axes."""
    if a.data.ndim != 1:
        raise ValueError(f"expand_c: expected 1-d tensor, got {a.shape}")
    c = a.shape[0]
    out = np.broadcast_to(a.data.reshape(1, c, 1, 1), (n, c, h, w)).copy()
    return _node(out, (a,), lambda g: (g.sum(axis=(0, 2, 3)),))


def expand_nc(a: Tensor, h: int, w: int) -> Tensor:
    """[N, C] -> [N, C, h, w]; adjoint sums over the spatial axes."""
    if a.data.ndim != 2:
        raise ValueError(f"expand_nc: expected 2-d tensor, got {a.shape}")
    n, c = a.shape
    out = np.broadcast_to(a.data.reshape(n, c, 1, 1), (n, c, h, w)).copy()
    return _node(out, (a,), lambda g: (g.sum(axis=(2, 3)),))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-d tensors, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- structured ops -----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input x [N,C,H,W], kernel w [O,C,k,k].

    im2col forward; the adjoint scatters column gradients back with k*k
    strided adds. Odd square kernels only.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be [O,C,k,k], got {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}")
    if cw != c:
        raise ValueError(f"conv2d: kernel channel axis (1) is {cw}, input has {c}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    if h < kh or wd < kh:
        raise ValueError(f"conv2d: spatial axes (2,3) of size {h}x{wd} are "
                         f"smaller than the {kh}x{kh} kernel")
    k = kh
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        need_x = x.requires_grad or x._parents
        need_w = w.requires_grad or w._parents
        gw = (gmat.T @ cols).reshape(o, c, k, k) if need_w else None
        gx = None
        if need_x:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] \
                        += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw)

    return _node(np.ascontiguousarray(out), (x, w), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; even spatial sizes required."""
    if x.data.ndim != 4:
        raise ValueError(f"avg_pool2: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial axes must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return _node(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), (n, c, h, w)).copy(),)

    return _node(out, (x,), bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r] depth-to-space rearrangement."""
    if x.data.ndim != 4:
        raise ValueError(f"pixel_shuffle: input must be 4-d, got {x.shape}")
    n, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise ValueError(f"pixel_shuffle: channel axis (1) of size {crr} not "
                         f"divisible by r*r={r * r}")
    c = crr // (r * r)
    out = (x.data.reshape(n, c, r, r, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(n, c, h * r, w * r))

    def bwd(g):
        gx = (g.reshape(n, c, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, crr, h, w))
        return (np.ascontiguousarray(gx),)

    return _node(np.ascontiguousarray(out), (x,), bwd)


def normalize(x: Tensor, axes: tuple[int, ...], eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over ``axes`` (biased variance, fused adjoint).

    axes=(0,2,3) gives per-channel batch statistics, axes=(2,3) per-plane
    instance statistics. The adjoint is the closed form
    dx = (g - mean(g) - xhat * mean(g*xhat)) / sqrt(var + eps).
    """
    ad = x.data
    mu = ad.mean(axis=axes, keepdims=True)
    var = ad.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (ad - mu) * inv

    def bwd(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return ((g - gm - xhat * gxm) * inv,)

    return _node(xhat, (x,), bwd)


# -- parameter registry -------------------------------------------------------

class ParamStore:
    """Named, tagged trainable tensors with stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, tag: str) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if tag not in (TAG_ADAPTIVE, TAG_BASE):
            raise ValueError(f"unknown tag {tag!r} for {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._tags[name] = tag
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def tag(self, name: str) -> str:
        return self._tags[name]

    def names(self, tag: str | None = None) -> list[str]:
        if tag is None:
            return list(self._params)
        return [n for n, t in self._tags.items() if t == tag]

    def items(self, tag: str | None = None):
        for n in self.names(tag):
            yield n, self._params[n]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self, tag: str | None = None) -> dict[str, np.ndarray]:
        """Snapshot current gradients (zeros where a param was untouched)."""
        out = {}
        for n, t in self.items(tag):
            out[n] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        return out


# -- gradient checking --------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` must be a deterministic map from the leaf ``x`` to a scalar; it is
    re-evaluated once to detect hidden randomness. Relative error per entry
    is |a - n| / max(1, |n|).
    """
    if not x.requires_grad or x._parents:
        raise ValueError("finite_diff_check: x must be a leaf with requires_grad")
    y = f(x)
    if y.data.size != 1:
        raise ValueError(f"finite_diff_check: f must return a scalar, "
                         f"got shape {y.shape}")
    y2 = f(x)
    if not np.array_equal(y.data, y2.data):
        raise ValueError("finite_diff_check: f is not deterministic "
                         "(two evaluations differ)")
    x.grad = None
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
