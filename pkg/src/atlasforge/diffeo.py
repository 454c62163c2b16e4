"""Deformation machinery on stationary velocity fields.

A velocity or displacement field over an (H, W) grid is an array of shape
(H, W, 2): channel 0 holds dx (along width/x), channel 1 dy (along
height/y), both in pixel units. A displacement u defines the map
phi(p) = p + u(p). ``integrate_ss`` turns a stationary velocity into such
a map by scaling and squaring; ``integrate_euler`` is the slow
explicit-Euler reference used only to cross-check it.

Every function accepts either plain numpy arrays or autodiff Tensors
(optionally with a leading batch axis) and returns the same kind it was
given; the Tensor path is differentiable end to end. All bilinear
sampling clamps to the nearest edge outside the grid.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "identity_coords",
    "sample_bilinear",
    "integrate_ss",
    "integrate_euler",
    "warp",
    "warp_field",
    "compose",
    "invert",
    "jacobian_determinants",
    "interior",
    "save_field_csv",
    "load_field_csv",
]

INTERIOR_MARGIN = 3

_grid_cache: dict[tuple, np.ndarray] = {}


def identity_coords(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(H, W, 2) array of absolute pixel coordinates, x then y."""
    key = (h, w, np.dtype(dtype).str)
    got = _grid_cache.get(key)
    if got is None:
        ys, xs = np.mgrid[0:h, 0:w]
        got = np.stack([xs, ys], axis=-1).astype(dtype)
        got.setflags(write=False)
        _grid_cache[key] = got
    return got


def sample_bilinear(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear lookup of (H, W[, C]) values at (..., 2) coords."""
    vals = values if values.ndim == 3 else values[..., None]
    h, w, _ = vals.shape
    xc = np.clip(coords[..., 0], 0.0, w - 1.0)
    yc = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = xc.astype(np.int64)
    y0 = yc.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    top = vals[y0, x0] * (1 - fx) + vals[y0, x1] * fx
    bot = vals[y1, x0] * (1 - fx) + vals[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out if values.ndim == 3 else out[..., 0]


def _check_field_shape(arr: np.ndarray, what: str) -> None:
    if arr.ndim not in (3, 4) or arr.shape[-1] != 2:
        raise ShapeError(f"{what}: expected (H,W,2) or (B,H,W,2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: field contains non-finite values")


def _lift_field(v, what: str) -> tuple[Tensor, bool, bool]:
    """Normalize to a batched (B,H,W,2) Tensor; note original kind/rank."""
    was_tensor = isinstance(v, Tensor)
    arr = v.data if was_tensor else np.asarray(v)
    if not was_tensor:
        _check_field_shape(arr, what)
    elif arr.ndim not in (3, 4) or arr.shape[-1] != 2:
        raise ShapeError(f"{what}: expected (H,W,2) or (B,H,W,2), got {arr.shape}")
    had_batch = arr.ndim == 4
    t = v if was_tensor else ad.constant(arr)
    if not had_batch:
        t = ad.reshape(t, (1,) + arr.shape)
    return t, was_tensor, had_batch


def _restore(out: Tensor, was_tensor: bool, had_batch: bool):
    if not had_batch:
        out = ad.reshape(out, out.data.shape[1:])
    return out if was_tensor else out.data


def _coords_const(u: Tensor) -> Tensor:
    b, h, w, _ = u.data.shape
    grid = identity_coords(h, w, u.data.dtype)
    return ad.constant(np.broadcast_to(grid[None], (b, h, w, 2)))


def warp_field(field: Tensor, through: Tensor) -> Tensor:
    """Resample `field` at p + through(p); both batched (B,H,W,2) Tensors."""
    return ad.grid_sample(field, ad.add(_coords_const(through), through))


def integrate_ss(v, steps: int = 7):
    """Flow of a stationary velocity field by scaling and squaring.

    Halve the velocity ``steps`` times, then square the resulting small
    displacement back up: u <- u + u(p + u(p)), repeated ``steps`` times.
    Differentiable with respect to v on the Tensor path.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    u, was_tensor, had_batch = _lift_field(v, "integrate_ss")
    scale = np.asarray(1.0 / (1 << steps), dtype=u.data.dtype)
    u = ad.mul(u, ad.constant(scale))
    for _ in range(steps):
        u = ad.add(u, warp_field(u, u))
    return _restore(u, was_tensor, had_batch)


def integrate_euler(v: np.ndarray, steps: int) -> np.ndarray:
    """Explicit-Euler flow of the same ODE; numpy-only reference."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    v = np.asarray(v, dtype=np.float64)
    _check_field_shape(v, "integrate_euler")
    if v.ndim == 4:
        return np.stack([integrate_euler(f, steps) for f in v])
    h, w, _ = v.shape
    pos = identity_coords(h, w, np.float64).copy()
    for _ in range(steps):
        pos += sample_bilinear(v, pos) / steps
    return pos - identity_coords(h, w, np.float64)


def warp(image, phi):
    """Pull an image back through phi: out(p) = image(p + u(p)).

    image: (H, W), (H, W, C), or batched Tensor (B, H, W, C); phi: a
    displacement field on the same grid.
    """
    u, was_tensor, had_batch = _lift_field(phi, "warp")
    img_tensor = isinstance(image, Tensor)
    img = image if img_tensor else ad.constant(np.asarray(image, dtype=u.data.dtype))
    arr = img.data
    squeeze_channel = False
    if arr.ndim == 2:
        img = ad.reshape(img, (1,) + arr.shape + (1,))
        squeeze_channel = True
    elif arr.ndim == 3:
        img = ad.reshape(img, (1,) + arr.shape)
    elif arr.ndim != 4:
        raise ShapeError(f"warp: image shape {arr.shape} unsupported")
    if img.data.shape[1:3] != u.data.shape[1:3]:
        raise ShapeError(
            f"warp: image grid {img.data.shape[1:3]} != field grid {u.data.shape[1:3]}"
        )
    if img.data.shape[0] == 1 and u.data.shape[0] > 1:
        img = ad.tile_batch(img, u.data.shape[0])
    out = ad.grid_sample(img, ad.add(_coords_const(u), u))
    if squeeze_channel:
        out = ad.reshape(out, out.data.shape[1:3])
    elif not had_batch and u.data.shape[0] == 1:
        out = ad.reshape(out, out.data.shape[1:])
    return out if (img_tensor or was_tensor) else out.data


def compose(phi1, phi2):
    """Displacement of phi1 after phi2: u(p) = u2(p) + u1(p + u2(p))."""
    u1, t1, b1 = _lift_field(phi1, "compose")
    u2, t2, b2 = _lift_field(phi2, "compose")
    if u1.data.shape != u2.data.shape:
        raise ShapeError(
            f"compose: field shapes differ, {u1.data.shape} vs {u2.data.shape}"
        )
    out = ad.add(u2, warp_field(u1, u2))
    return _restore(out, t1 or t2, b1 or b2)


def invert(v, steps: int = 7):
    """Inverse flow, obtained by integrating the negated velocity."""
    u, was_tensor, had_batch = _lift_field(v, "invert")
    neg = ad.mul(u, ad.constant(np.asarray(-1.0, dtype=u.data.dtype)))
    return _restore(integrate_ss(neg, steps), was_tensor, had_batch)


def jacobian_determinants(phi: np.ndarray) -> np.ndarray:
    """Determinant of d(phi)/dp per pixel; central differences inside,
    one-sided at the boundary. Non-positive values mark folding."""
    u = phi.data if isinstance(phi, Tensor) else np.asarray(phi)
    _check_field_shape(u, "jacobian_determinants")
    if u.ndim == 4:
        return np.stack([jacobian_determinants(f) for f in u])
    dux_dy, dux_dx = np.gradient(u[..., 0])
    duy_dy, duy_dx = np.gradient(u[..., 1])
    return (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


def interior(arr: np.ndarray, margin: int = INTERIOR_MARGIN) -> np.ndarray:
    """Trim a spatial margin from the trailing (H, W[, C]) axes."""
    if isinstance(arr, Tensor):
        arr = arr.data
    if arr.ndim == 2:
        return arr[margin:-margin, margin:-margin]
    if arr.ndim == 3:
        return arr[margin:-margin, margin:-margin, :]
    return arr[:, margin:-margin, margin:-margin, ...]


def save_field_csv(path, field: np.ndarray) -> None:
    """Write one `x,y,dx,dy` row per pixel, row-major."""
    u = field.data if isinstance(field, Tensor) else np.asarray(field)
    if u.ndim != 3 or u.shape[-1] != 2:
        raise ShapeError(f"save_field_csv: expected (H,W,2), got {u.shape}")
    h, w, _ = u.shape
    grid = identity_coords(h, w, np.float64)
    rows = np.concatenate(
        [grid.reshape(-1, 2), u.reshape(-1, 2).astype(np.float64)], axis=1
    )
    np.savetxt(path, rows, fmt="%.9g", delimiter=",", header="x,y,dx,dy", comments="")


def load_field_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64)
    rows = np.atleast_2d(rows)
    if rows.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 columns x,y,dx,dy")
    w = int(rows[:, 0].max()) + 1
    h = int(rows[:, 1].max()) + 1
    if rows.shape[0] != h * w:
        raise ValueError(f"{path}: {rows.shape[0]} rows do not fill a {h}x{w} grid")
    field = np.zeros((h, w, 2), dtype=np.float32)
    xs = rows[:, 0].astype(np.int64)
    ys = rows[:, 1].astype(np.int64)
    field[ys, xs, 0] = rows[:, 2]
    field[ys, xs, 1] = rows[:, 3]
    return field
