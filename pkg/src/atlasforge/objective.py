"""Training objective: data likelihood plus deformation priors.

The minimized loss for a batch is the mean over images of

    data(x, t o phi)  +  lambda_d * d/2 * sum_p |u(p)|^2
                      +  lambda_a / 2  * sum_p |grad u(p)|^2

plus one global centrality term gamma * sum_p |u_bar(p)|^2, where u_bar
is an exponential running average (decay 1 - 1/c) of batch-mean
displacements. Inside the loss the history part of u_bar is a constant;
gradients flow only through the current batch's contribution.

The data term is either the Gaussian negative log-likelihood
(1/(2 sigma^2)) * sum_p (x - t o phi)^2 or a local normalized
cross-correlation score over fully-inside windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffeo
from .autodiff import ShapeError, Tensor
from .nets import Model

__all__ = [
    "LossConfig",
    "RunningMeanField",
    "mse_data_term",
    "ncc_data_term",
    "magnitude_penalty",
    "smoothness_penalty",
    "update_running_mean",
    "centrality_penalty",
    "total_loss",
]

LIKELIHOODS = ("gaussian", "local-ncc")


@dataclass
class LossConfig:
    gamma: float = 0.01
    lambda_d: float = 0.001
    lambda_a: float = 0.01
    sigma: float = 1.0
    degree: int = 4
    likelihood: str = "gaussian"
    ncc_window: int = 9
    ema_c: int = 100
    int_steps: int = 7

    def __post_init__(self):
        vals = (self.gamma, self.lambda_d, self.lambda_a, self.sigma)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if min(self.gamma, self.lambda_d, self.lambda_a) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.degree < 1 or self.ema_c < 1 or self.int_steps < 1:
            raise ValueError("degree, ema_c, int_steps must be >= 1")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd, got {self.ncc_window}")


@dataclass
class RunningMeanField:
    """EMA of batch-mean displacement fields, decay beta = 1 - 1/c."""

    mean: np.ndarray
    beta: float
    step: int = 0

    @classmethod
    def zeros(cls, h: int, w: int, c: int = 100, dtype=np.float32):
        return cls(mean=np.zeros((h, w, 2), dtype=dtype), beta=1.0 - 1.0 / c)


def update_running_mean(
    state: RunningMeanField, batch_mean_u: np.ndarray
) -> RunningMeanField:
    bm = batch_mean_u.data if isinstance(batch_mean_u, Tensor) else batch_mean_u
    bm = np.asarray(bm)
    if bm.shape != state.mean.shape:
        raise ShapeError(
            f"batch mean {bm.shape} does not match running mean {state.mean.shape}"
        )
    new = state.beta * state.mean + (1.0 - state.beta) * bm
    return RunningMeanField(
        mean=new.astype(state.mean.dtype), beta=state.beta, step=state.step + 1
    )


def _pair(x, t, what: str) -> tuple[Tensor, Tensor, bool]:
    """Lift both images to equal-shape batched Tensors."""
    numpy_in = not (isinstance(x, Tensor) or isinstance(t, Tensor))
    xt = x if isinstance(x, Tensor) else ad.constant(np.asarray(x))
    tt = t if isinstance(t, Tensor) else ad.constant(np.asarray(t))
    if xt.data.ndim == 2:
        xt = ad.reshape(xt, (1,) + xt.data.shape + (1,))
    if tt.data.ndim == 2:
        tt = ad.reshape(tt, (1,) + tt.data.shape + (1,))
    if xt.data.shape != tt.data.shape:
        raise ShapeError(f"{what}: shapes {xt.data.shape} and {tt.data.shape} differ")
    return xt, tt, numpy_in


def _scale(t: Tensor, value: float) -> Tensor:
    return ad.mul(t, ad.constant(np.asarray(value, dtype=t.data.dtype)))


def _finish(t: Tensor, numpy_in: bool):
    return t.item() if numpy_in else t


def mse_data_term(x, warped_t, sigma: float = 1.0):
    """(1/(2 sigma^2)) * sum_p (x - t o phi)^2, averaged over the batch."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    xt, tt, numpy_in = _pair(x, warped_t, "mse_data_term")
    b = xt.data.shape[0]
    out = _scale(ad.tsum(ad.square(ad.sub(xt, tt))), 1.0 / (2.0 * sigma * sigma * b))
    return _finish(out, numpy_in)


def ncc_data_term(x, warped_t, window: int = 9):
    """Negative mean local squared correlation over fully-inside windows.

    cc(p) = (sum_w xc * tc)^2 / (sum_w xc^2 * sum_w tc^2 + 1e-5) with
    window-mean-centered xc, tc; returns -mean cc in [-1, 0]. Windows that
    would overhang the boundary are excluded; constant windows score 0.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    xt, tt, numpy_in = _pair(x, warped_t, "ncc_data_term")
    h, w = xt.data.shape[1:3]
    margin = window // 2
    if h <= 2 * margin or w <= 2 * margin:
        raise ShapeError(f"images {h}x{w} smaller than the {window}x{window} window")
    ones = ad.constant(np.ones((1, window, window, 1), dtype=xt.data.dtype))
    n = float(window * window)

    def wsum(t: Tensor) -> Tensor:
        return ad.crop2d(ad.conv2d(t, ones), margin)

    sx = wsum(xt)
    st = wsum(tt)
    sxx = wsum(ad.square(xt))
    stt = wsum(ad.square(tt))
    sxt = wsum(ad.mul(xt, tt))
    cov = ad.sub(sxt, _scale(ad.mul(sx, st), 1.0 / n))
    var_x = ad.sub(sxx, _scale(ad.square(sx), 1.0 / n))
    var_t = ad.sub(stt, _scale(ad.square(st), 1.0 / n))
    eps = ad.constant(np.asarray(1e-5, dtype=xt.data.dtype))
    cc = ad.div(ad.square(cov), ad.add(ad.mul(var_x, var_t), eps))
    return _finish(_scale(ad.tmean(cc), -1.0), numpy_in)


def _as_field(u, what: str) -> tuple[Tensor, bool]:
    numpy_in = not isinstance(u, Tensor)
    t = u if isinstance(u, Tensor) else ad.constant(np.asarray(u))
    if t.data.ndim == 3:
        t = ad.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != 4 or t.data.shape[-1] != 2:
        raise ShapeError(f"{what}: expected (B,H,W,2) field, got {t.data.shape}")
    return t, numpy_in


def magnitude_penalty(u, lambda_d: float, d: int = 4):
    """lambda_d * d/2 * sum_p |u(p)|^2, averaged over the batch."""
    ut, numpy_in = _as_field(u, "magnitude_penalty")
    b = ut.data.shape[0]
    out = _scale(ad.tsum(ad.square(ut)), lambda_d * d / (2.0 * b))
    return _finish(out, numpy_in)


def smoothness_penalty(u, lambda_a: float):
    """lambda_a/2 * sum over in-bounds forward-difference pairs of squared
    jumps, both axes and both channels, averaged over the batch."""
    ut, numpy_in = _as_field(u, "smoothness_penalty")
    b = ut.data.shape[0]
    total = ad.add(
        ad.tsum(ad.square(ad.diff_y(ut))), ad.tsum(ad.square(ad.diff_x(ut)))
    )
    return _finish(_scale(total, lambda_a / (2.0 * b)), numpy_in)


def centrality_penalty(state: RunningMeanField, gamma: float, batch_mean_u=None):
    """gamma * sum_p |u_bar(p)|^2.

    With batch_mean_u given (a Tensor), u_bar is the post-update running
    mean beta * history + (1 - beta) * batch_mean_u, where the history is
    constant and gradients flow through the batch term only. Without it,
    scores the stored mean as a plain float.
    """
    if batch_mean_u is None:
        return float(gamma * (state.mean.astype(np.float64) ** 2).sum())
    bm = batch_mean_u if isinstance(batch_mean_u, Tensor) else ad.constant(batch_mean_u)
    if bm.data.shape != state.mean.shape:
        raise ShapeError(
            f"batch mean {bm.data.shape} does not match running mean "
            f"{state.mean.shape}"
        )
    hist = ad.constant(state.mean.astype(bm.data.dtype) * state.beta)
    blended = ad.add(hist, _scale(bm, 1.0 - state.beta))
    return _scale(ad.tsum(ad.square(blended)), gamma)


def total_loss(
    model: Model,
    x,
    a,
    state: RunningMeanField,
    config: LossConfig,
) -> tuple[Tensor, RunningMeanField, dict]:
    """Full objective on one batch: template -> unet -> flow -> warp.

    Returns the scalar loss Tensor, the advanced running-mean state, and
    per-term float diagnostics.
    """
    xt = x if isinstance(x, Tensor) else ad.constant(np.asarray(x))
    if xt.data.ndim == 2:
        xt = ad.reshape(xt, (1,) + xt.data.shape + (1,))
    elif xt.data.ndim == 3:
        xt = ad.reshape(xt, xt.data.shape + (1,))
    if a is None and model.mode == "unconditional":
        a = np.zeros((xt.data.shape[0], 1), dtype=np.float32)
    t = model.template(attrs=a, images=xt)
    v = model.velocity(t, xt)
    u = diffeo.integrate_ss(v, config.int_steps)
    warped = diffeo.warp(t, u)
    if config.likelihood == "gaussian":
        data = mse_data_term(xt, warped, config.sigma)
    else:
        data = ncc_data_term(xt, warped, config.ncc_window)
    mag = magnitude_penalty(u, config.lambda_d, config.degree)
    smooth = smoothness_penalty(u, config.lambda_a)
    bmean = ad.mean_batch(u)
    cent = centrality_penalty(state, config.gamma, batch_mean_u=bmean)
    loss = ad.add(ad.add(data, mag), ad.add(smooth, cent))
    new_state = update_running_mean(state, bmean.data)
    diagnostics = {
        "total": float(loss.data),
        "data": float(data.data),
        "magnitude": float(mag.data),
        "smoothness": float(smooth.data),
        "centrality": float(cent.data),
        "mean_abs_u": float(np.abs(u.data).mean()),
    }
    return loss, new_state, diagnostics
