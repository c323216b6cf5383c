"""Reverse-mode automatic differentiation over 4D image tensors.

This is the only compute backend used for learning in the workbench: a
tape of ``Tensor4`` nodes ([batch, channel, height, width] numpy arrays)
built by the op functions below, differentiated by walking the tape in
reverse topological order.  Convolutions are evaluated as GEMMs over
sliding windows, which keeps everything inside numpy's BLAS.

Every op result is finiteness-checked (NaN or Inf raises ``NonFinite``)
unless ``set_finite_checks(False)`` has been called.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (NonFinite, OddSpatialDim, OutOfRange, ShapeMismatch,
                     UnsupportedKernel)

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf detection; returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NonFinite(f"non-finite values produced by {where}")


class Tensor4:
    """A [B, C, H, W] array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeMismatch(f"Tensor4 needs 4 dims, got shape {data.shape}")
        _check_finite(data, "Tensor4 construction")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor4, ...] = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a single-element tensor (a scalar loss)."""
        if self.data.size != 1:
            raise ShapeMismatch(
                f"backward() starts from a scalar, got shape {self.shape}")
        order: list[Tensor4] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor4, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def __repr__(self):
        return (f"Tensor4(shape={self.shape}, dtype={self.dtype}, "
                f"requires_grad={self.requires_grad})")


def _result(data: np.ndarray, parents: tuple[Tensor4, ...], backprop,
            where: str) -> Tensor4:
    _check_finite(data, where)
    out = Tensor4.__new__(Tensor4)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backprop = backprop
    else:
        out._parents = ()
        out._backprop = None
    return out


def _accumulate(t: Tensor4, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# Convolution machinery
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad_lo: int, pad_hi: int) -> np.ndarray:
    """Materialize k-by-k patches of [B,C,H,W] as [B, C*k*k, H'*W'].

    The tensor is filled tap by tap with plain shifted-slice copies, which
    run at near-memcpy speed (rows stay contiguous), unlike a transposed
    sliding-window view whose copy degenerates to k*k-element gathers.
    """
    if pad_lo or pad_hi:
        x = np.pad(x, ((0, 0), (0, 0), (pad_lo, pad_hi), (pad_lo, pad_hi)))
    bsz, c, hp, wp = x.shape
    oh, ow = hp - k + 1, wp - k + 1
    col = np.empty((bsz, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
    return col.reshape(bsz, c * k * k, oh * ow)


def _corr(x: np.ndarray, w: np.ndarray, pad_lo: int, pad_hi: int) -> np.ndarray:
    """Cross-correlate [B,C,H,W] with [O,C,k,k] under explicit zero padding."""
    o, c, k = w.shape[0], w.shape[1], w.shape[2]
    if k == 1 and pad_lo == 0 and pad_hi == 0:
        bsz, _, h, wd = x.shape
        out = np.matmul(w.reshape(o, c), x.reshape(bsz, c, h * wd))
        return out.reshape(bsz, o, h, wd)
    bsz = x.shape[0]
    oh = x.shape[2] + pad_lo + pad_hi - k + 1
    ow = x.shape[3] + pad_lo + pad_hi - k + 1
    col = _im2col(x, k, pad_lo, pad_hi)
    out = np.matmul(w.reshape(o, c * k * k), col)
    return out.reshape(bsz, o, oh, ow)


def _corr_grad_w(x: np.ndarray, g: np.ndarray, k: int,
                 pad_lo: int, pad_hi: int) -> np.ndarray:
    """Gradient of _corr w.r.t. the kernel: correlate input with grad."""
    bsz, o = g.shape[0], g.shape[1]
    c = x.shape[1]
    g2 = g.reshape(bsz, o, -1)
    if k == 1 and pad_lo == 0 and pad_hi == 0:
        x2 = x.reshape(bsz, c, -1)
    else:
        x2 = _im2col(x, k, pad_lo, pad_hi)
    gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(o, c, k, k)


def _corr_grad_x(g: np.ndarray, w: np.ndarray, pad_lo: int,
                 pad_hi: int) -> np.ndarray:
    """Gradient of the correlation w.r.t. the input: full correlation of
    the output gradient with the flipped kernel, channel axes swapped."""
    w_t = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return _corr(g, np.ascontiguousarray(w_t), pad_lo, pad_hi)


def conv2d(x: Tensor4, w: Tensor4, b: Tensor4 | None = None) -> Tensor4:
    """Same-padding 2D convolution (cross-correlation), odd kernels only.

    ``x``: [B, C, H, W]; ``w``: [O, C, k, k] with odd ``k``; optional bias
    ``b``: [1, O, 1, 1].  Output: [B, O, H, W].
    """
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ShapeMismatch(f"kernel must be [O, C, k, k], got {w.shape}")
    k = w.data.shape[2]
    if k % 2 != 1:
        raise UnsupportedKernel(f"conv2d supports odd kernels, got {k}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(
            f"input has {x.data.shape[1]} channels, kernel expects "
            f"{w.data.shape[1]}")
    if b is not None and b.data.shape != (1, w.data.shape[0], 1, 1):
        raise ShapeMismatch(
            f"bias must be [1, {w.data.shape[0]}, 1, 1], got {b.shape}")
    p = k // 2
    parents = (x, w) if b is None else (x, w, b)
    out = _corr(x.data, w.data, p, p)
    if b is not None:
        out = out + b.data

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, _corr_grad_x(g, w.data, p, p))
        if w.requires_grad:
            _accumulate(w, _corr_grad_w(x.data, g, k, p, p))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3))[None, :, None, None])

    return _result(out, parents, backprop, "conv2d")


def upconv2(x: Tensor4, w: Tensor4, b: Tensor4 | None = None) -> Tensor4:
    """2x upsampling followed by a 2x2 convolution.

    The input is nearest-neighbour upsampled by 2 in both spatial
    dimensions, zero-padded by one row/column on the high side, and
    convolved with a 2x2 kernel, giving an output of exactly twice the
    input's height and width.  ``w``: [O, C, 2, 2].
    """
    if w.data.ndim != 4 or w.data.shape[2:] != (2, 2):
        raise UnsupportedKernel(f"upconv2 needs a [O, C, 2, 2] kernel, got {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(
            f"input has {x.data.shape[1]} channels, kernel expects "
            f"{w.data.shape[1]}")
    if b is not None and b.data.shape != (1, w.data.shape[0], 1, 1):
        raise ShapeMismatch(
            f"bias must be [1, {w.data.shape[0]}, 1, 1], got {b.shape}")
    up = x.data.repeat(2, axis=2).repeat(2, axis=3)
    out = _corr(up, w.data, 0, 1)
    if b is not None:
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backprop(g: np.ndarray) -> None:
        if x.requires_grad:
            g_up = _corr_grad_x(g, w.data, 1, 0)  # w.r.t. the upsampled image
            bsz, c, h2, w2 = g_up.shape
            gx = g_up.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
            _accumulate(x, gx)
        if w.requires_grad:
            _accumulate(w, _corr_grad_w(up, g, 2, 0, 1))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3))[None, :, None, None])

    return _result(out, parents, backprop, "upconv2")


def maxpool2(x: Tensor4) -> Tensor4:
    """2x2 max pooling with stride 2; ties go to the first element in
    row-major window order.  Spatial dims must be even."""
    bsz, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = (x.data.reshape(bsz, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(bsz, c, h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1)  # first max wins
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backprop(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(bsz, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(bsz, c, h, w))
        _accumulate(x, gx)

    return _result(np.ascontiguousarray(out), (x,), backprop, "maxpool2")


def concat_channels(parts: list[Tensor4]) -> Tensor4:
    """Concatenate along the channel axis."""
    if len(parts) == 0:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeMismatch(
                f"concat_channels shapes disagree: {ref} vs {s}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def backprop(g: np.ndarray) -> None:
        start = 0
        for p, c in zip(parts, sizes):
            _accumulate(p, g[:, start:start + c])
            start += c

    return _result(out, tuple(parts), backprop, "concat_channels")


def relu(x: Tensor4) -> Tensor4:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def backprop(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(out, (x,), backprop, "relu")


def elu(x: Tensor4) -> Tensor4:
    """x for x > 0, exp(x) - 1 otherwise; the derivative at 0 is 1."""
    neg = np.where(x.data > 0.0, 0.0, x.data)
    exp_neg = np.exp(neg)
    out = np.where(x.data > 0.0, x.data, exp_neg - 1.0).astype(x.data.dtype)

    def backprop(g: np.ndarray) -> None:
        _accumulate(x, g * np.where(x.data > 0.0, 1.0, exp_neg))

    return _result(out, (x,), backprop, "elu")


def detach(x: Tensor4) -> Tensor4:
    """A tape-free view of ``x``: same data, no gradient history."""
    out = Tensor4.__new__(Tensor4)
    out.data = x.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backprop = None
    return out


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backprop(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out, (a, b), backprop, "add")


def scale(x: Tensor4, s: float) -> Tensor4:
    out = x.data * s

    def backprop(g: np.ndarray) -> None:
        _accumulate(x, g * s)

    return _result(out, (x,), backprop, "scale")


def mse(prediction: Tensor4, target: Tensor4) -> Tensor4:
    """Mean of squared differences over every element; scalar output."""
    if prediction.data.shape != target.data.shape:
        raise ShapeMismatch(
            f"mse shapes disagree: {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    out = np.array(np.mean(diff * diff),
                   dtype=prediction.data.dtype).reshape(1, 1, 1, 1)
    n = diff.size

    def backprop(g: np.ndarray) -> None:
        go = (2.0 / n) * float(g.reshape(())) * diff
        _accumulate(prediction, go)
        if target.requires_grad:
            _accumulate(target, -go)

    return _result(out, (prediction, target), backprop, "mse")


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered, named trainable tensors plus their Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor4] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor4:
        if name in self.params:
            raise OutOfRange(f"duplicate parameter name {name!r}")
        t = Tensor4(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        """Freeze or unfreeze all parameters whose name has the prefix."""
        for name, t in self.params.items():
            if name.startswith(prefix):
                t.requires_grad = trainable


def adam_step(store: ParamStore, lr: float, t: int, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One Adam update over the store's trainable parameters.

    ``t`` is the 1-based step count used for bias correction.  Gradients
    default to each tensor's accumulated ``.grad``; parameters with no
    gradient (or frozen ones) are skipped, leaving their moments intact.
    An explicit ``grads`` mapping overrides the tape's gradients.
    """
    if t < 1:
        raise OutOfRange("Adam step count t must be >= 1")
    if lr <= 0.0:
        raise OutOfRange("learning rate must be positive")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}")
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    per_tensor: dict[str, float]

    @property
    def ok(self) -> bool:
        return self.n_checked > 0


def grad_check(loss_fn, store: ParamStore,
               extra: dict[str, Tensor4] | None = None, *,
               h: float = 1e-5, elems_per_tensor: int | None = None,
               tensor_subset: list[str] | None = None,
               seed: int = 0, floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` rebuilds the forward graph and returns the scalar loss.
    All checked tensors must be float64 (float32 cannot resolve the
    finite-difference quotient at useful tolerances).  ``elems_per_tensor``
    bounds how many randomly chosen elements of each tensor are probed
    (all of them when None); ``tensor_subset`` restricts which named
    tensors are probed.  Relative error is
    ``|num - ana| / max(|num|, |ana|, floor)``: below ``floor`` the
    comparison is effectively absolute.  The default floor is the
    smallest gradient magnitude for which a float64 central difference
    of a deep-graph loss can support a relative comparison at all —
    evaluation noise is about ``ulp(loss) / (2 h)``, i.e. ~1e-9 of
    absolute resolution at ``h = 1e-6`` — so demanding relative accuracy
    on entries far below it only measures that noise.
    """
    targets: dict[str, Tensor4] = dict(store.params)
    for name, t in (extra or {}).items():
        if name in targets:
            raise OutOfRange(f"extra tensor name {name!r} collides with a parameter")
        targets[name] = t
    if tensor_subset is not None:
        unknown = set(tensor_subset) - set(targets)
        if unknown:
            raise OutOfRange(f"unknown tensors in subset: {sorted(unknown)}")
        targets = {k: targets[k] for k in tensor_subset}
    for name, t in targets.items():
        if t.data.dtype != np.float64:
            raise OutOfRange(
                f"grad_check requires float64 tensors; {name!r} is {t.dtype}")
        t.requires_grad = True

    for t in targets.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, t in targets.items():
        if t.grad is None:
            raise NonFinite(f"no gradient reached tensor {name!r}")
        if not np.isfinite(t.grad).all():
            raise NonFinite(f"non-finite analytic gradient for {name!r}")
        analytic[name] = t.grad.copy()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    per_tensor: dict[str, float] = {}
    for name, t in targets.items():
        flat = t.data.flat  # writes through regardless of memory layout
        n = t.data.size
        if elems_per_tensor is None or elems_per_tensor >= n:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=elems_per_tensor, replace=False)
        t_worst = 0.0
        ana_flat = analytic[name].reshape(-1)
        for i in idxs:
            theta = flat[i]
            step = h * max(1.0, abs(theta))
            flat[i] = theta + step
            lo_hi = float(loss_fn().data.reshape(()))
            flat[i] = theta - step
            lo_lo = float(loss_fn().data.reshape(()))
            flat[i] = theta
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            ana = float(ana_flat[i])
            rel = abs(numeric - ana) / max(abs(numeric), abs(ana), floor)
            t_worst = max(t_worst, rel)
            checked += 1
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
    return GradCheckReport(max_rel_error=worst, n_checked=checked,
                           per_tensor=per_tensor)
