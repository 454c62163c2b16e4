"""Evaluation: centrality and size of deformations, Jacobian health,
reconstruction error, Dice with label propagation, velocity-field PCA,
and template synthesis along principal axes.

All analyses are read-only over a loaded checkpoint. Registration runs
in batches; every metric that aggregates over a split shares one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffeo
from .autodiff import ShapeError
from .data import Dataset, write_pgm
from .nets import init_model
from .objective import RunningMeanField, mse_data_term
from .train import (
    Checkpoint,
    TrainConfig,
    batch_indices,
    clip_by_global_norm,
    model_from_checkpoint,
    optimizer_step,
)

__all__ = [
    "MetricsReport",
    "VelocityPCA",
    "registration_fields",
    "mean_displacement_norm",
    "mean_field_size",
    "jacobian_fraction",
    "centrality_metrics",
    "jacobian_stats",
    "recon_mse",
    "evaluate_checkpoint",
    "dice",
    "propagate_labels",
    "pca_fields",
    "pca_velocity",
    "synth_along_component",
    "select_exemplar",
    "exemplar_baseline",
    "decoder_only_baseline",
    "save_montage",
]


@dataclass
class MetricsReport:
    """Split-level registration quality numbers.

    mean_displacement_norm is sum_p |mean_i u_i(p)|^2 (pixels^2): small
    when the template sits at the center of the deformations.
    mean_field_size is (1/n) sum_i sum_p |u_i(p)|^2: how far images sit
    from the template individually.
    """

    mean_displacement_norm: float
    mean_field_size: float
    mse: float
    nonpositive_jacobian_fraction: float
    n_images: int
    per_class: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["metric,scope,value"]
        scopes = [("overall", self._overall())]
        scopes += [(f"class_{c}", d) for c, d in sorted(self.per_class.items())]
        for scope, vals in scopes:
            for key, val in vals.items():
                rows.append(f"{key},{scope},{val!r}")
        return "\n".join(rows) + "\n"

    def _overall(self) -> dict:
        return {
            "mean_displacement_norm": self.mean_displacement_norm,
            "mean_field_size": self.mean_field_size,
            "mse": self.mse,
            "nonpositive_jacobian_fraction": self.nonpositive_jacobian_fraction,
            "n_images": self.n_images,
        }

    def summary(self) -> str:
        lines = [
            f"images:                      {self.n_images}",
            f"mean displacement norm:      {self.mean_displacement_norm:.6g} px^2",
            f"mean field size:             {self.mean_field_size:.6g} px^2",
            f"reconstruction mse:          {self.mse:.6g}",
            f"non-positive jacobians:      {self.nonpositive_jacobian_fraction:.3%}",
        ]
        for c, vals in sorted(self.per_class.items()):
            lines.append(
                f"  class {c}: mean_norm={vals['mean_displacement_norm']:.4g} "
                f"size={vals['mean_field_size']:.4g} mse={vals['mse']:.4g}"
            )
        return "\n".join(lines)


@dataclass
class VelocityPCA:
    mean: np.ndarray  # (H, W, 2)
    components: np.ndarray  # (k, H, W, 2), unit norm when not degenerate
    variances: np.ndarray  # (k,), non-increasing
    degenerate: bool = False


# ---------------------------------------------------------------------------
# one registration pass shared by the metrics


def _split_indices(dataset: Dataset, split: str) -> np.ndarray:
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    return idx


def registration_fields(
    ckpt: Checkpoint, dataset: Dataset, idx, batch: int = 16
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Velocities, displacements, and warped templates for the given items.

    Returns (v, u, warped) with shapes (m,H,W,2), (m,H,W,2), (m,H,W).
    """
    model = model_from_checkpoint(ckpt)
    steps = ckpt.config.loss.int_steps
    idx = np.asarray(idx)
    vs, us, warped = [], [], []
    for lo in range(0, idx.size, batch):
        sel = idx[lo : lo + batch]
        x = dataset.images[sel][..., None].astype(np.float32)
        a = dataset.attributes[sel] if model.mode == "conditional" else None
        if a is None:
            a = np.zeros((len(sel), 1), dtype=np.float32)
        t = model.template(attrs=a, images=x)
        v = model.velocity(t, x)
        u = diffeo.integrate_ss(v, steps)
        w = diffeo.warp(t, u)
        vs.append(v.data.copy())
        us.append(u.data.copy())
        warped.append(w.data[..., 0].copy())
    return np.concatenate(vs), np.concatenate(us), np.concatenate(warped)


def mean_displacement_norm(fields: np.ndarray) -> float:
    """sum_p |mean_i u_i(p)|^2 over a (n,H,W,2) stack."""
    mean = fields.astype(np.float64).mean(axis=0)
    return float((mean**2).sum())


def mean_field_size(fields: np.ndarray) -> float:
    """(1/n) sum_i sum_p |u_i(p)|^2 over a (n,H,W,2) stack."""
    f = fields.astype(np.float64)
    return float((f**2).sum() / f.shape[0])


def jacobian_fraction(fields: np.ndarray) -> tuple[float, dict]:
    """Fraction of non-positive Jacobian determinants plus a histogram
    summary over a (n,H,W,2) displacement stack."""
    dets = diffeo.jacobian_determinants(fields)
    flat = dets.ravel()
    frac = float((flat <= 0.0).mean())
    hist = {
        "min": float(flat.min()),
        "p01": float(np.percentile(flat, 1)),
        "median": float(np.median(flat)),
        "p99": float(np.percentile(flat, 99)),
        "max": float(flat.max()),
        "mean": float(flat.mean()),
    }
    return frac, hist


def evaluate_checkpoint(
    ckpt: Checkpoint, dataset: Dataset, split: str = "test", batch: int = 16
) -> MetricsReport:
    """Register every split image and aggregate all metrics in one pass."""
    idx = _split_indices(dataset, split)
    _, u, warped = registration_fields(ckpt, dataset, idx, batch)
    x = dataset.images[idx].astype(np.float64)
    sq = (x - warped.astype(np.float64)) ** 2
    frac, _ = jacobian_fraction(u)
    cls = dataset.class_ids()[idx]
    per_class = {}
    for c in np.unique(cls):
        m = cls == c
        cf, _ = jacobian_fraction(u[m])
        per_class[int(c)] = {
            "mean_displacement_norm": mean_displacement_norm(u[m]),
            "mean_field_size": mean_field_size(u[m]),
            "mse": float(sq[m].mean()),
            "nonpositive_jacobian_fraction": cf,
            "n_images": int(m.sum()),
        }
    return MetricsReport(
        mean_displacement_norm=mean_displacement_norm(u),
        mean_field_size=mean_field_size(u),
        mse=float(sq.mean()),
        nonpositive_jacobian_fraction=frac,
        n_images=int(idx.size),
        per_class=per_class,
    )


def centrality_metrics(
    ckpt: Checkpoint, dataset: Dataset, split: str = "test"
) -> MetricsReport:
    return evaluate_checkpoint(ckpt, dataset, split)


def jacobian_stats(
    ckpt: Checkpoint, dataset: Dataset, split: str = "test"
) -> tuple[float, dict]:
    idx = _split_indices(dataset, split)
    _, u, _ = registration_fields(ckpt, dataset, idx)
    return jacobian_fraction(u)


def recon_mse(
    ckpt: Checkpoint, dataset: Dataset, split: str = "test"
) -> tuple[float, dict]:
    report = evaluate_checkpoint(ckpt, dataset, split)
    return report.mse, {c: v["mse"] for c, v in report.per_class.items()}


# ---------------------------------------------------------------------------
# label overlap


def dice(mask_a: np.ndarray, mask_b: np.ndarray, labels=None) -> dict:
    """Per-label Dice overlap 2|A&B| / (|A|+|B|); 1.0 when a label is
    absent from both masks."""
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise ShapeError(f"mask shapes {mask_a.shape} and {mask_b.shape} differ")
    if labels is None:
        labels = np.union1d(np.unique(mask_a), np.unique(mask_b))
        labels = [int(v) for v in labels if v != 0]
    labels = list(labels)
    if not labels:
        raise ValueError("no labels to score")
    out = {}
    for lab in labels:
        a = mask_a == lab
        b = mask_b == lab
        denom = int(a.sum()) + int(b.sum())
        out[lab] = 1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom
    return out


def propagate_labels(
    ckpt: Checkpoint,
    images: np.ndarray,
    label_maps: np.ndarray,
    attrs: np.ndarray | None = None,
    batch: int = 16,
) -> np.ndarray:
    """Carry segmentations into template space and vote.

    Each image's one-hot label map rides the image->template map (the
    flow integrated backwards); the warped one-hots are averaged over
    images and the argmax per pixel picks the winning label.
    """
    images = np.asarray(images, dtype=np.float32)
    label_maps = np.asarray(label_maps)
    if images.ndim != 3 or label_maps.shape != images.shape:
        raise ShapeError(
            f"need matching (m,H,W) images and labels, got "
            f"{images.shape} and {label_maps.shape}"
        )
    model = model_from_checkpoint(ckpt)
    steps = ckpt.config.loss.int_steps
    values = np.unique(label_maps)
    onehot = (label_maps[..., None] == values).astype(np.float32)  # (m,H,W,L)
    acc = np.zeros(images.shape[1:] + (values.size,), dtype=np.float64)
    for lo in range(0, images.shape[0], batch):
        x = images[lo : lo + batch][..., None]
        a = attrs[lo : lo + batch] if attrs is not None else None
        if a is None:
            a = np.zeros((x.shape[0], 1), dtype=np.float32)
        t = model.template(attrs=a, images=x)
        v = model.velocity(t, x).data
        u_inv = diffeo.invert(v, steps)
        moved = diffeo.warp(onehot[lo : lo + batch], u_inv)
        acc += moved.astype(np.float64).sum(axis=0)
    return values[np.argmax(acc, axis=-1)]


# ---------------------------------------------------------------------------
# principal components of velocity fields


def pca_fields(fields: np.ndarray, n_components: int) -> VelocityPCA:
    """PCA over (n,H,W,2) stacks via the n-by-n Gram matrix.

    Eigenvectors of (X X^T)/(n-1) lift to unit-norm field components;
    the nonzero spectrum matches the dense covariance eigendecomposition.
    A near-zero total variance flags the result degenerate.
    """
    fields = np.asarray(fields, dtype=np.float64)
    n = fields.shape[0]
    if n <= n_components:
        raise ValueError(
            f"need more than {n_components} fields for {n_components} "
            f"components, got {n}"
        )
    shape = fields.shape[1:]
    mean = fields.mean(axis=0)
    x = (fields - mean).reshape(n, -1)
    gram = x @ x.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:n_components]
    evals = np.maximum(evals[order], 0.0)
    variances = evals / (n - 1)
    total = float(np.trace(gram))
    if total < 1e-12:
        return VelocityPCA(
            mean=mean,
            components=np.zeros((n_components,) + shape),
            variances=np.zeros(n_components),
            degenerate=True,
        )
    comps = np.zeros((n_components, x.shape[1]))
    for i, (lam, col) in enumerate(zip(evals, evecs[:, order].T)):
        if lam < 1e-12 * total:
            continue
        c = x.T @ col
        c /= np.linalg.norm(c)
        if c[np.argmax(np.abs(c))] < 0:  # fix sign for reproducibility
            c = -c
        comps[i] = c
    return VelocityPCA(
        mean=mean,
        components=comps.reshape((n_components,) + shape),
        variances=variances,
        degenerate=False,
    )


def pca_velocity(
    ckpt: Checkpoint, dataset: Dataset, split: str, n_components: int
) -> VelocityPCA:
    idx = _split_indices(dataset, split)
    v, _, _ = registration_fields(ckpt, dataset, idx)
    return pca_fields(v, n_components)


def synth_along_component(
    ckpt: Checkpoint,
    attrs: np.ndarray | None,
    component: np.ndarray,
    coefficients,
) -> list[np.ndarray]:
    """Template views warped along one velocity axis, one per coefficient."""
    model = model_from_checkpoint(ckpt)
    steps = ckpt.config.loss.int_steps
    h, w = model.arch.height, model.arch.width
    component = np.asarray(component, dtype=np.float64)
    if component.shape != (h, w, 2):
        raise ShapeError(
            f"component shape {component.shape} does not match ({h},{w},2)"
        )
    if attrs is None:
        attrs = np.zeros((1, 1), dtype=np.float32)
    a = np.asarray(attrs, dtype=np.float32).reshape(1, -1)
    t = model.template(attrs=a).data[0, :, :, 0].astype(np.float64)
    out = []
    for alpha in coefficients:
        if alpha == 0.0:
            out.append(t.copy())
            continue
        phi = diffeo.integrate_ss(float(alpha) * component, steps)
        out.append(diffeo.warp(t, phi))
    return out


# ---------------------------------------------------------------------------
# baselines: same registration training, different template source


def select_exemplar(dataset: Dataset, seed: int = 0, n_refs: int = 200) -> int:
    """Train image whose summed squared distance to a random reference
    panel is smallest; the panel makes selection O(n) not O(n^2)."""
    train_idx = _split_indices(dataset, "train")
    imgs = dataset.images[train_idx].reshape(train_idx.size, -1).astype(np.float64)
    rng = np.random.default_rng(seed)
    refs = imgs[rng.integers(0, imgs.shape[0], size=n_refs)]
    d2 = (
        (imgs**2).sum(axis=1)[:, None]
        - 2.0 * imgs @ refs.T
        + (refs**2).sum(axis=1)[None, :]
    )
    return int(train_idx[np.argmin(d2.sum(axis=1))])


def exemplar_baseline(
    dataset: Dataset, config: TrainConfig, seed: int = 0, out_dir=None
) -> tuple[Checkpoint, int]:
    """Train the identical registration network against a frozen exemplar
    image instead of a learned template."""
    from . import train as train_mod

    ex = select_exemplar(dataset, seed)
    cfg = replace(
        config,
        mode="unconditional",
        freeze=tuple(set(config.freeze) | {"template/"}),
    )
    ckpt, _ = train_mod.train(
        cfg,
        dataset,
        out_dir=out_dir,
        template_init=dataset.images[ex].astype(np.float64),
    )
    return ckpt, ex


def decoder_only_baseline(
    dataset: Dataset, config: TrainConfig
) -> Checkpoint:
    """Fit the template decoder to the images by plain MSE, no warping.

    Returns a Checkpoint at iteration 0 so a registration network can be
    trained on top of the frozen decoder via train(..., resume_from=...).
    """
    if config.mode != "conditional":
        raise ValueError("decoder-only baseline needs conditional mode")
    train_idx = _split_indices(dataset, "train")
    model = init_model("conditional", config.arch, seed=config.seed)
    decoder = {
        n: t for n, t in model.params.trainable().items() if n.startswith("decoder/")
    }
    moments: dict = {}
    from . import autodiff as ad

    for it in range(config.iterations):
        sel = train_idx[
            batch_indices(config.seed, it, train_idx.size, config.batch_size)
        ]
        x = dataset.images[sel][..., None].astype(np.float32)
        a = dataset.attributes[sel]
        t = model.template(attrs=a)
        loss = mse_data_term(ad.constant(x), t, sigma=config.loss.sigma)
        ad.zero_grads(model.params.tensors())
        ad.backward(loss)
        grads = {n: p.grad for n, p in decoder.items() if p.grad is not None}
        grads, _ = clip_by_global_norm(grads, config.clip_norm)
        optimizer_step(model.params, grads, moments, config)
    state = RunningMeanField.zeros(
        config.arch.height, config.arch.width, c=config.loss.ema_c
    )
    return Checkpoint(config, model.params, state, {}, 0)


# ---------------------------------------------------------------------------
# figure-style export


def save_montage(images, path, pad: int = 1) -> None:
    """Write a horizontal strip of equally sized grayscale images."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("no images to montage")
    h, w = images[0].shape
    for im in images:
        if im.shape != (h, w):
            raise ShapeError("montage images must share one shape")
    strip = np.full((h, len(images) * w + pad * (len(images) - 1)), 1.0)
    for i, im in enumerate(images):
        strip[:, i * (w + pad) : i * (w + pad) + w] = im
    write_pgm(path, strip)
