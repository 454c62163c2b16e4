"""Reverse-mode automatic differentiation over numpy arrays.

Provides exactly the primitives the template/registration networks and
their objective need: affine (dense) maps, square 'same'-padded
convolutions at stride 1 and 2, nearest-neighbour x2 upsampling, pointwise
nonlinearities, elementwise arithmetic, full reductions, channel
concatenation, bilinear grid sampling (differentiable in both the source
image and the sampling coordinates) and spatial forward differences.

Layout is channels-last throughout: image-like tensors are
(batch, height, width, channels). Building an expression from Tensors
records the computation tape; ``backward(loss)`` walks it in reverse
topological order. Training runs in float32; ``check_gradients`` verifies
analytic gradients against central finite differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "constant",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "square",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tsum",
    "tmean",
    "mean_batch",
    "dense",
    "conv2d",
    "upsample2",
    "concat",
    "grid_sample",
    "diff_y",
    "diff_x",
    "crop2d",
    "reshape",
    "tile_batch",
    "GradCheckReport",
    "check_gradients",
    "kink_margin",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """An operation received inputs of incompatible shape or kind."""


class Tensor:
    """A node in the computation tape wrapping a float32/float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; scalars are lifted to shape-() constants
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))


def constant(data, dtype=None) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    # the tape keeps only what backward will visit
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    out.op = op
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every requires_grad node in the tape."""
    if loss.data.shape != ():
        raise ShapeError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    order = _toposort(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise ops


def _ew_shapes(op: str, a: Tensor, b: Tensor) -> None:
    _check_dtype(op, a, b)
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _fit(g: np.ndarray, shape) -> np.ndarray:
    # only scalar-vs-array mixing is permitted, so reduce fully or pass through
    return g.sum() if shape == () and np.ndim(g) else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("add", a, b)

    def back(g):
        if a.requires_grad:
            _acc(a, _fit(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _fit(g, b.data.shape))

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("sub", a, b)

    def back(g):
        if a.requires_grad:
            _acc(a, _fit(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _fit(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("mul", a, b)

    def back(g):
        if a.requires_grad:
            _acc(a, _fit(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _fit(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("div", a, b)

    def back(g):
        if a.requires_grad:
            _acc(a, _fit(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _fit(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), back, "div")


def square(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, g * (2.0 * a.data))

    return _result(a.data * a.data, (a,), back, "square")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def back(g):
        _acc(a, g * (a.data > 0))

    return _result(out, (a,), back, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(a.data > 0, a.data, slope * a.data)

    def back(g):
        _acc(a, g * np.where(a.data > 0, 1.0, slope).astype(a.data.dtype))

    return _result(out.astype(a.data.dtype, copy=False), (a,), back, "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _acc(a, g * out * (1.0 - out))

    return _result(out, (a,), back, "sigmoid")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    def back(g):
        _acc(a, np.full_like(a.data, g))

    return _result(a.data.sum(dtype=a.data.dtype), (a,), back, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _acc(a, np.full_like(a.data, g / n))

    return _result(a.data.mean(dtype=a.data.dtype), (a,), back, "mean")


def mean_batch(a: Tensor) -> Tensor:
    """Mean over the leading (batch) axis, keeping the remaining axes."""
    if a.data.ndim < 1:
        raise ShapeError("mean_batch: input has no batch axis")
    n = a.data.shape[0]

    def back(g):
        _acc(a, np.broadcast_to(g / n, a.data.shape))

    return _result(a.data.mean(axis=0), (a,), back, "mean_batch")


# ---------------------------------------------------------------------------
# dense / convolution / resampling


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (B, n_in) @ (n_in, n_out) + (n_out,)."""
    _check_dtype("dense", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"dense: input {x.data.shape} incompatible with weight {w.data.shape}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"dense: bias {b.data.shape} != ({w.data.shape[1]},)")
    out = x.data @ w.data + b.data

    def back(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _result(out, (x, w, b), back, "dense")


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """'Same'-padded square convolution on (B, H, W, C) input.

    Weight layout is (C_in, kh, kw, C_out); stride is 1 or 2. Zero padding,
    biased toward the bottom-right when the total pad is odd.
    """
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need (B,H,W,C) input and (Cin,kh,kw,Cout) weight, "
            f"got {x.data.shape} and {w.data.shape}"
        )
    bsz, h, wd, cin = x.data.shape
    wcin, kh, kw, cout = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    tensors = [x, w] if b is None else [x, w, b]
    _check_dtype("conv2d", *tensors)
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.data.shape} != ({cout},)")

    ho, pt, pb = _same_pad(h, kh, stride)
    wo, pl, pr = _same_pad(wd, kw, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    patches = win.reshape(bsz * ho * wo, cin * kh * kw)  # copies the strided view
    w_mat = w.data.reshape(cin * kh * kw, cout)
    out = patches @ w_mat
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)

    def back(g):
        g_mat = g.reshape(bsz * ho * wo, cout)
        if w.requires_grad:
            _acc(w, (patches.T @ g_mat).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _acc(b, g_mat.sum(axis=0))
        if x.requires_grad:
            gp = (g_mat @ w_mat.T).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                rows = slice(ki, ki + stride * (ho - 1) + 1, stride)
                for kj in range(kw):
                    cols = slice(kj, kj + stride * (wo - 1) + 1, stride)
                    gxp[:, rows, cols, :] += gp[:, :, :, :, ki, kj]
            _acc(x, gxp[:, pt : pt + h, pl : pl + wd, :])

    return _result(out, tuple(tensors), back, "conv2d")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of (B, H, W, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: need (B,H,W,C), got {x.data.shape}")
    bsz, h, w, c = x.data.shape
    out = np.broadcast_to(
        x.data[:, :, None, :, None, :], (bsz, h, 2, w, 2, c)
    ).reshape(bsz, 2 * h, 2 * w, c)

    def back(g):
        _acc(x, g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _result(np.ascontiguousarray(out), (x,), back, "upsample2")


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the trailing (channel) axis."""
    if not parts:
        raise ShapeError("concat: empty input list")
    _check_dtype("concat", *parts)
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat: leading dims differ, {p.data.shape} vs {parts[0].data.shape}"
            )
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-1)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _acc(p, g[..., lo:hi])

    return _result(out, tuple(parts), back, "concat")


def grid_sample(img: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling of (B, H, W, C) at absolute pixel coordinates.

    coords is (B, Ho, Wo, 2) with [..., 0] the x (column) and [..., 1] the
    y (row) position. Out-of-bounds positions clamp to the nearest edge.
    Differentiable in both the image and the coordinates.
    """
    _check_dtype("grid_sample", img, coords)
    if img.data.ndim != 4 or coords.data.ndim != 4 or coords.data.shape[-1] != 2:
        raise ShapeError(
            f"grid_sample: need (B,H,W,C) image and (B,Ho,Wo,2) coords, "
            f"got {img.data.shape} and {coords.data.shape}"
        )
    bsz, h, w, _ = img.data.shape
    if coords.data.shape[0] != bsz:
        raise ShapeError(
            f"grid_sample: batch mismatch {img.data.shape[0]} vs {coords.data.shape[0]}"
        )
    xs = coords.data[..., 0]
    ys = coords.data[..., 1]
    if not np.isfinite(coords.data).all():
        # NaN survives clamping and would index garbage
        raise ValueError("grid_sample: non-finite sampling coordinates")
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = xc.astype(np.int64)
    y0 = yc.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0)[..., None].astype(img.data.dtype)
    wy = (yc - y0)[..., None].astype(img.data.dtype)
    bb = np.arange(bsz)[:, None, None]
    v00 = img.data[bb, y0, x0]
    v01 = img.data[bb, y0, x1]
    v10 = img.data[bb, y1, x0]
    v11 = img.data[bb, y1, x1]
    top = v00 + wx * (v01 - v00)
    bot = v10 + wx * (v11 - v10)
    out = top + wy * (bot - top)

    def back(g):
        if img.requires_grad:
            gi = np.zeros_like(img.data)
            np.add.at(gi, (bb, y0, x0), g * (1 - wx) * (1 - wy))
            np.add.at(gi, (bb, y0, x1), g * wx * (1 - wy))
            np.add.at(gi, (bb, y1, x0), g * (1 - wx) * wy)
            np.add.at(gi, (bb, y1, x1), g * wx * wy)
            _acc(img, gi)
        if coords.requires_grad:
            dvx = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
            dvy = (v10 - v00) * (1 - wx) + (v11 - v01) * wx
            gx = (g * dvx).sum(axis=-1) * ((xs >= 0) & (xs <= w - 1))
            gy = (g * dvy).sum(axis=-1) * ((ys >= 0) & (ys <= h - 1))
            _acc(coords, np.stack([gx, gy], axis=-1).astype(coords.data.dtype))

    return _result(out, (img, coords), back, "grid_sample")


def diff_y(x: Tensor) -> Tensor:
    """Forward difference along the height axis of (B, H, W, C)."""
    if x.data.ndim != 4 or x.data.shape[1] < 2:
        raise ShapeError(f"diff_y: need (B,H>=2,W,C), got {x.data.shape}")
    out = x.data[:, 1:] - x.data[:, :-1]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, 1:] += g
        gx[:, :-1] -= g
        _acc(x, gx)

    return _result(out, (x,), back, "diff_y")


def diff_x(x: Tensor) -> Tensor:
    """Forward difference along the width axis of (B, H, W, C)."""
    if x.data.ndim != 4 or x.data.shape[2] < 2:
        raise ShapeError(f"diff_x: need (B,H,W>=2,C), got {x.data.shape}")
    out = x.data[:, :, 1:] - x.data[:, :, :-1]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, :, 1:] += g
        gx[:, :, :-1] -= g
        _acc(x, gx)

    return _result(out, (x,), back, "diff_x")


def crop2d(x: Tensor, margin: int) -> Tensor:
    """Drop a uniform spatial margin from (B, H, W, C)."""
    bsz, h, w, c = x.data.shape
    if margin < 0 or 2 * margin >= h or 2 * margin >= w:
        raise ShapeError(f"crop2d: margin {margin} too large for {x.data.shape}")
    out = x.data[:, margin : h - margin, margin : w - margin, :]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, margin : h - margin, margin : w - margin, :] = g
        _acc(x, gx)

    return _result(np.ascontiguousarray(out), (x,), back, "crop2d")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")

    def back(g):
        _acc(x, g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), back, "reshape")


def tile_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a single-item (1, ...) tensor along the batch axis."""
    if x.data.ndim < 1 or x.data.shape[0] != 1:
        raise ShapeError(f"tile_batch: need leading axis 1, got {x.data.shape}")

    out = np.broadcast_to(x.data, (batch,) + x.data.shape[1:])

    def back(g):
        _acc(x, g.sum(axis=0, keepdims=True))

    return _result(np.ascontiguousarray(out), (x,), back, "tile_batch")


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    """Per-tensor maximum relative error of analytic vs numeric gradients."""

    errors: dict[str, float] = field(default_factory=dict)
    nonfinite: list[tuple[str, int]] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def ok(self, tol: float = 1e-4) -> bool:
        return not self.nonfinite and self.max_error < tol

    def summary(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.errors.items())]
        for name, idx in self.nonfinite:
            lines.append(f"{name}[{idx}]: non-finite perturbed loss")
        lines.append(f"max relative error: {self.max_error:.3e}")
        return "\n".join(lines)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current values of
    ``params`` on every call. All checked tensors must be float64. The
    relative error denominator is max(|analytic|, |numeric|, 1e-8). With
    ``max_entries`` set, at most that many randomly chosen entries per
    tensor are perturbed; by default every entry is.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"check_gradients requires float64 params ({name})")

    loss = loss_fn()
    zero_grads(params.values())
    backward(loss)
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }

    report = GradCheckReport()
    rng = rng or np.random.default_rng(0)
    for name, t in params.items():
        flat = t.data.ravel()
        if flat.size == 0:
            continue
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            idxs = range(flat.size)
        worst = 0.0
        aflat = analytic[name].ravel()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = float(loss_fn().data)
            flat[i] = orig - epsilon
            lm = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                report.nonfinite.append((name, int(i)))
                continue
            numeric = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
        report.errors[name] = worst
    return report


def kink_margin(loss: Tensor) -> float:
    """Distance of a recorded graph from its nearest non-smooth point.

    Central differences are only trustworthy where the graph is locally
    smooth: relu/leaky-relu pre-activations must stay away from 0 and
    bilinear sampling coordinates away from integer grid lines (outside
    the clamp region they are flat, so only in-range coordinates count).
    An epsilon perturbation of one parameter moves any pre-activation by
    at most epsilon * max|input|, so instances whose margin exceeds that
    cannot cross a kink during a finite-difference sweep.
    """
    margin = np.inf
    for node in _toposort(loss):
        if node.op in ("relu", "leaky_relu"):
            z = node._parents[0].data
            if z.size:
                margin = min(margin, float(np.abs(z).min()))
        elif node.op == "grid_sample":
            c = node._parents[1].data
            h, w = node._parents[0].data.shape[1:3]
            for axis, hi in ((0, w - 1), (1, h - 1)):
                vals = c[..., axis]
                inside = (vals > -0.5) & (vals < hi + 0.5)
                if inside.any():
                    d = np.abs(vals[inside] - np.rint(vals[inside]))
                    margin = min(margin, float(d.min()))
    return margin
