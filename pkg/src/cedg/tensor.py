"""Dense float tensors with reverse-mode automatic differentiation and SGD.

The graph is built eagerly: each op returns a new Tensor holding references to
its inputs plus a vector-Jacobian closure. `Tensor.backward()` on a scalar
loss walks the graph once in reverse topological order and accumulates
gradients into every reachable leaf with `requires_grad` (in practice the
Parameters of a model). Gradients accumulate with `+=` across backward calls
until explicitly zeroed.

Data is float32 end to end. Gradient-check code may construct float64 tensors;
ops preserve the incoming dtype. Every op output is checked for NaN/Inf and a
NumericError is raised on the first non-finite value (`set_finite_checks`
toggles this).

Spatial tensors are [C,H,W] or batched [N,C,H,W]; ops accept both and a 3-D
input comes back 3-D.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_grad_enabled = True
_finite_checks = True


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(on: bool) -> bool:
    """Enable/disable per-op NaN/Inf checking. Returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(on)
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _finite_checks:
        return
    # A float64 sum is non-finite iff the array holds a NaN or Inf: float32
    # magnitudes cannot overflow the float64 accumulator.
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NumericError(f"non-finite values produced by {op}")


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar. Leaf grads accumulate with +=."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.data.shape}")
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
                if id(p) not in seen and (p.requires_grad or p._vjp is not None):
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not (parent.requires_grad or parent._vjp is not None):
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, "mean")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf. sgd_step mutates .data in place; ops never do."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str = ""):
        super().__init__(np.ascontiguousarray(data, dtype=np.float32), requires_grad=True)
        self.name = name
        self.momentum_buffer: np.ndarray | None = None


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float32))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (have, want) in enumerate(zip(g.shape, shape)) if want == 1 and have != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    out = x.data ** e

    def vjp(g):
        if e == 0.0:
            return (np.zeros_like(x.data),)
        if e < 1.0:
            # subgradient 0 at x == 0 where the true derivative diverges
            with np.errstate(divide="ignore"):
                base = x.data ** (e - 1.0)
            base = np.where(x.data == 0.0, 0.0, base)
        else:
            base = x.data ** (e - 1.0)
        return (g * e * base,)

    return _make(out, (x,), vjp, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (x,), vjp, "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _make(out, (x,), vjp, "log")


def clip_min(x: Tensor, lo: float) -> Tensor:
    """Elementwise max(x, lo). Gradient flows only where x > lo."""
    out = np.maximum(x.data, lo)

    def vjp(g):
        return (g * (x.data > lo),)

    return _make(out, (x,), vjp, "clip_min")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), vjp, "relu")


# -- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), vjp, "reshape")


def flatten_features(x: Tensor) -> Tensor:
    """[C,H,W] -> [C*H*W]; [N,...] -> [N, prod(rest)]. 1-D/2-D pass through."""
    if x.ndim <= 2:
        return x
    if x.ndim == 3:
        return reshape(x, (x.size,))
    return reshape(x, (x.shape[0], -1))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(out, tuple(tensors), vjp, "concat")


def _reduce(x: Tensor, axis, keepdims: bool, kind: str) -> Tensor:
    if kind == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)
    else:
        out = x.data.mean(axis=axis, keepdims=keepdims)
    # a full reduction yields a numpy scalar; keep the array dtype intact
    out = np.asarray(out)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def vjp(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(gg, tuple(a % x.data.ndim for a in axes))
        gx = np.broadcast_to(gg, x.data.shape)
        if kind == "mean":
            gx = gx / count
        return (np.ascontiguousarray(gx),)

    return _make(out, (x,), vjp, kind)


# -- neural-net ops ----------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [n_in] or [N,n_in] against weight [n_out,n_in], optional bias [n_out]."""
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {weight.shape}")
    n_out, n_in = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n_in:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gx = g @ weight.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _make(out, parents, vjp, "linear")


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} stride {stride} padding {padding} "
            f"yields empty output for {h}x{w} input"
        )
    return ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x [C,H,W] or [N,C,H,W]; weight [Co,Ci,Kh,Kw]."""
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got {weight.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # [n,c,ho,wo,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(co, -1)
    out2 = np.matmul(w2, cols)                                # [n,co,L]
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({co},)")
        out2 = out2 + bias.data[:, None]
    out = out2.reshape(n, co, ho, wo)
    if squeeze:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(n, co, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
        hp, wp = h + 2 * padding, w + 2 * padding
        gxp = np.zeros((n, c, hp, wp), dtype=g4.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if squeeze:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return _make(out, parents, vjp, "conv2d")


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k-by-k average pooling; k must divide both dims."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"avg_pool: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n, c, h, w = xd.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avg_pool: window {k} must divide spatial dims {h}x{w}")
    ho, wo = h // k, w // k
    out = xd.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = np.broadcast_to(
            g4[:, :, :, None, :, None] / (k * k), (n, c, ho, k, wo, k)
        ).reshape(n, c, h, w)
        if squeeze:
            gx = gx[0]
        return (np.ascontiguousarray(gx),)

    return _make(out, (x,), vjp, "avg_pool")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (batch, H, W).

    Train mode normalizes with biased batch statistics and folds them into the
    running buffers in place: r <- (1-momentum)*r + momentum*batch_stat.
    Infer mode uses the running buffers. Running buffers are plain arrays, not
    part of the autodiff graph.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"batch_norm: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")

    if train:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        dgamma = (g4 * xhat).sum(axis=(0, 2, 3))
        dbeta = g4.sum(axis=(0, 2, 3))
        dxhat = g4 * gamma.data[None, :, None, None]
        if train:
            mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        else:
            gx = dxhat * inv[None, :, None, None]
        if squeeze:
            gx = gx[0]
        return np.ascontiguousarray(gx), dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp, "batch_norm")


# -- normalizing activations (last axis) -------------------------------------


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), vjp, "softmax")


def l1_normalize(x: Tensor) -> Tensor:
    """x / sum(|x|) along the last axis. An all-zero slice maps to zeros."""
    s = np.abs(x.data).sum(axis=-1, keepdims=True)
    safe = np.where(s == 0.0, 1.0, s)
    out = np.where(s == 0.0, 0.0, x.data / safe)

    def vjp(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        gx = g / safe - np.sign(x.data) * dot / (safe * safe)
        return (np.where(s == 0.0, 0.0, gx),)

    return _make(out, (x,), vjp, "l1_normalize")


def l2_normalize(x: Tensor) -> Tensor:
    """x / sqrt(sum(x^2)) along the last axis. An all-zero slice maps to zeros."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(n == 0.0, 1.0, n)
    out = np.where(n == 0.0, 0.0, x.data / safe)

    def vjp(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        gx = g / safe - x.data * dot / (safe ** 3)
        return (np.where(n == 0.0, 0.0, gx),)

    return _make(out, (x,), vjp, "l2_normalize")


_ACTIVATIONS = {
    "relu": relu,
    "softmax": softmax,
    "l1_normalize": l1_normalize,
    "l2_normalize": l2_normalize,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# -- SGD ----------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    """SGD hyperparameters with a stepwise learning-rate schedule.

    lr_schedule is a tuple of (first_epoch, last_epoch_or_None, lr) entries.
    Entries must tile the horizon: sorted, no gaps, no overlaps; only the last
    entry may be open-ended.
    """

    batch_size: int
    lr_schedule: tuple[tuple[int, int | None, float], ...]
    weight_decay: float = 0.0
    momentum: float = 0.0
    dampening: float = 0.0
    nesterov: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("weight_decay", "momentum", "dampening"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.nesterov and self.dampening != 0:
            raise ConfigError("nesterov momentum requires dampening == 0")
        if not self.lr_schedule:
            raise ConfigError("lr_schedule must not be empty")
        prev_end = None
        for i, (start, end, lr) in enumerate(self.lr_schedule):
            if lr <= 0:
                raise ConfigError(f"learning rate must be positive, got {lr}")
            if end is not None and end < start:
                raise ConfigError(f"schedule entry {i}: end {end} before start {start}")
            if end is None and i != len(self.lr_schedule) - 1:
                raise ConfigError("only the last schedule entry may be open-ended")
            if i == 0:
                if start != 0:
                    raise ConfigError(f"schedule must start at epoch 0, got {start}")
            elif start != prev_end + 1:
                raise ConfigError(
                    f"schedule entries must be contiguous: entry {i} starts at {start}, "
                    f"previous ended at {prev_end}"
                )
            prev_end = end
        object.__setattr__(self, "lr_schedule", tuple(tuple(e) for e in self.lr_schedule))

    def lr_at(self, epoch: int) -> float:
        for start, end, lr in self.lr_schedule:
            if epoch >= start and (end is None or epoch <= end):
                return lr
        raise ConfigError(f"lr schedule has no entry for epoch {epoch}")


# Training presets for the three phases of the pipeline.
PRESETS: dict[str, SgdConfig] = {
    "pretrain": SgdConfig(
        batch_size=128,
        lr_schedule=((0, 80, 0.1), (81, 119, 0.01), (120, None, 0.001)),
        weight_decay=1e-4,
        momentum=0.9,
        dampening=0.0,
        nesterov=True,
    ),
    "stage1": SgdConfig(
        batch_size=128,
        lr_schedule=((0, 74, 0.1), (75, 124, 0.01), (125, None, 0.001)),
        weight_decay=1e-5,
        momentum=0.9,
        dampening=0.0,
        nesterov=True,
    ),
    "stage3": SgdConfig(
        batch_size=128,
        lr_schedule=((0, None, 0.0005),),
        weight_decay=0.0,
        momentum=0.0,
        dampening=0.0,
        nesterov=False,
    ),
}


def sgd_step(params: list[Parameter], cfg: SgdConfig, epoch: int) -> None:
    """One SGD update in place. Parameters without a gradient are skipped.

        g    <- grad + weight_decay * w
        v    <- momentum * v_prev + (1 - dampening) * g   (first step: v = g)
        step <- g + momentum * v   if nesterov else   v
        w    <- w - lr(epoch) * step
    """
    lr = cfg.lr_at(epoch)
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.astype(np.float32, copy=True)
        if cfg.weight_decay:
            g += cfg.weight_decay * p.data
        if cfg.momentum:
            if p.momentum_buffer is None:
                p.momentum_buffer = g.copy()
            else:
                p.momentum_buffer *= cfg.momentum
                p.momentum_buffer += (1.0 - cfg.dampening) * g
            step = g + cfg.momentum * p.momentum_buffer if cfg.nesterov else p.momentum_buffer
        else:
            step = g
        p.data -= lr * step
        _check_finite(p.data, "sgd_step")


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.grad = None
