"""Dataset ingestion, attribute encoding, and synthetic data generation.

A Dataset is a parallel collection of same-sized grayscale images in
[0, 1], attribute vectors, per-item metadata (class id, optional scale
and rotation), and a train/val/test split tag per item.

Attribute vectors are [class one-hot] ++ [scale scalar] ++ [rotation
scalar], continuous parts rescaled to [0, 1]; unused segments are
omitted. Synthetic builders are pure functions of their seed.

Supported file formats: IDX image/label pairs (big-endian), 8-bit
grayscale PGM (P2/P5) and PNG, and an attribute CSV with header
``filename,class,scale,rotation``.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import diffeo

__all__ = [
    "SCALE_LO",
    "SCALE_HI",
    "ItemMeta",
    "Dataset",
    "load_idx",
    "load_image_dir",
    "save_image_dir",
    "read_pgm",
    "write_pgm",
    "read_image",
    "synth_transform",
    "build_simulated",
    "random_smooth_field",
    "random_bump_field",
    "synth_oracle_dataset",
    "make_template",
    "synth_class_dataset",
    "encode_attributes",
    "split",
    "HoldoutRule",
    "parse_holdout",
    "holdout_filter",
    "pad_to",
    "quantize8",
]

SCALE_LO = 0.7
SCALE_HI = 1.3

SPLITS = ("train", "val", "test")


@dataclass
class ItemMeta:
    class_id: int = 0
    scale: float | None = None
    rotation: float | None = None


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    attributes: np.ndarray  # (n, A) float32
    meta: list[ItemMeta]
    splits: np.ndarray  # (n,) unicode tags from SPLITS
    n_classes: int

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.attributes) == len(self.meta) == len(self.splits) == n):
            raise ValueError(
                f"parallel lists disagree: {n} images, {len(self.attributes)} "
                f"attribute rows, {len(self.meta)} meta, {len(self.splits)} splits"
            )
        if self.images.ndim != 3:
            raise ValueError(f"images must be (n, H, W), got {self.images.shape}")

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def attr_len(self) -> int:
        return self.attributes.shape[1]

    def class_ids(self) -> np.ndarray:
        return np.array([m.class_id for m in self.meta], dtype=np.int64)

    def indices(self, split_tag: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split_tag)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            images=self.images[idx],
            attributes=self.attributes[idx],
            meta=[self.meta[i] for i in idx],
            splits=self.splits[idx],
            n_classes=self.n_classes,
        )


# ---------------------------------------------------------------------------
# IDX ingestion


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        f.close()
        return gzip.open(path, "rb")
    return f


def _read_exact(f, count: int, path, offset: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(
            f"{path}: truncated at byte {offset + len(buf)}, "
            f"needed {count} more bytes"
        )
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair into a Dataset.

    Pixels are scaled to [0, 1] by /255; labels become class ids and the
    attribute vectors are their one-hot encodings.
    """
    with _open_maybe_gzip(images_path) as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, images_path, 0))
        if magic != 0x00000803:
            raise ValueError(
                f"{images_path}: bad image magic 0x{magic:08x} at byte 0, "
                f"expected 0x00000803"
            )
        n, h, w = struct.unpack(">III", _read_exact(f, 12, images_path, 4))
        raw = _read_exact(f, n * h * w, images_path, 16)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)
    with _open_maybe_gzip(labels_path) as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, labels_path, 0))
        if magic != 0x00000801:
            raise ValueError(
                f"{labels_path}: bad label magic 0x{magic:08x} at byte 0, "
                f"expected 0x00000801"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, labels_path, 4))
        labels = np.frombuffer(
            _read_exact(f, n_labels, labels_path, 8), dtype=np.uint8
        )
    if n_labels != n:
        raise ValueError(
            f"count mismatch: {images_path} has {n} images but "
            f"{labels_path} has {n_labels} labels"
        )
    n_classes = int(labels.max()) + 1 if n else 1
    attrs = np.zeros((n, n_classes), dtype=np.float32)
    attrs[np.arange(n), labels] = 1.0
    return Dataset(
        images=(images.astype(np.float32) / 255.0),
        attributes=attrs,
        meta=[ItemMeta(class_id=int(c)) for c in labels],
        splits=np.full(n, "train"),
        n_classes=n_classes,
    )


# ---------------------------------------------------------------------------
# PGM / PNG / CSV directory ingestion


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P2/P5 PGM as float32 in [0, 1]."""
    data = Path(path).read_bytes()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if not 0 < maxval <= 255:
        raise ValueError(f"{path}: maxval {maxval} outside 8-bit range")
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        raster = data[pos : pos + h * w]
        if len(raster) != h * w:
            raise ValueError(f"{path}: raster truncated at byte {pos + len(raster)}")
        img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    else:
        vals = data[pos:].split()
        if len(vals) != h * w:
            raise ValueError(f"{path}: expected {h * w} pixels, found {len(vals)}")
        img = np.array([int(v) for v in vals], dtype=np.uint16).reshape(h, w)
        if img.max() > maxval:
            raise ValueError(f"{path}: pixel exceeds maxval {maxval}")
    return img.astype(np.float32) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as binary 8-bit PGM."""
    q = quantize8(image)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def quantize8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read one grayscale PGM or PNG image as [0, 1] float32."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            gray = im.convert("L")
            return np.asarray(gray, dtype=np.float32) / 255.0
    raise ValueError(f"{path}: unsupported image format (need .pgm or .png)")


_read_image_file = read_image


CSV_HEADER = ["filename", "class", "scale", "rotation"]


def load_image_dir(dir_path, attributes_csv=None) -> Dataset:
    """Read a directory of PGM/PNG images described by an attribute CSV.

    CSV columns: filename, class, scale, rotation; scale and rotation may
    be blank, but each column must be blank or filled consistently.
    """
    dir_path = Path(dir_path)
    csv_path = Path(attributes_csv) if attributes_csv else dir_path / "attributes.csv"
    with open(csv_path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or [c.strip() for c in rows[0]] != CSV_HEADER:
        raise ValueError(f"{csv_path}: first row must be {','.join(CSV_HEADER)}")

    names: list[str] = []
    classes: list[int] = []
    scales: list[float | None] = []
    rotations: list[float | None] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ValueError(f"{csv_path} row {lineno}: expected 4 columns, got {len(row)}")
        name, cls, sc, rot = (c.strip() for c in row)
        try:
            classes.append(int(cls) if cls else 0)
            scales.append(float(sc) if sc else None)
            rotations.append(float(rot) if rot else None)
        except ValueError as e:
            raise ValueError(f"{csv_path} row {lineno}: {e}") from None
        names.append(name)
    if not names:
        raise ValueError(f"{csv_path}: no data rows")

    for col, vals in (("scale", scales), ("rotation", rotations)):
        filled = sum(v is not None for v in vals)
        if filled not in (0, len(vals)):
            raise ValueError(
                f"{csv_path}: column {col} filled for {filled}/{len(vals)} rows; "
                f"must be all or none"
            )

    images = []
    for name in names:
        path = dir_path / name
        if not path.exists():
            raise ValueError(f"{csv_path} references missing file {name}")
        images.append(_read_image_file(path))
    dims = {im.shape for im in images}
    if len(dims) > 1:
        raise ValueError(f"non-uniform image dims: {sorted(dims)}")

    n_classes = max(classes) + 1
    attrs = np.stack(
        [
            encode_attributes(c, n_classes, scale=s, rotation=r)
            for c, s, r in zip(classes, scales, rotations)
        ]
    )
    meta = [
        ItemMeta(class_id=c, scale=s, rotation=r)
        for c, s, r in zip(classes, scales, rotations)
    ]
    return Dataset(
        images=np.stack(images),
        attributes=attrs,
        meta=meta,
        splits=np.full(len(names), "train"),
        n_classes=n_classes,
    )


def save_image_dir(dataset: Dataset, dir_path, fmt: str = "pgm") -> None:
    """Write images plus attributes.csv; inverse of load_image_dir."""
    if fmt not in ("pgm", "png"):
        raise ValueError(f"fmt must be pgm or png, got {fmt}")
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    width = len(str(max(dataset.n - 1, 1)))
    with open(dir_path / "attributes.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for i, m in enumerate(dataset.meta):
            name = f"{i:0{width}d}.{fmt}"
            img = dataset.images[i]
            if fmt == "pgm":
                write_pgm(dir_path / name, img)
            else:
                from PIL import Image

                Image.fromarray(quantize8(img), mode="L").save(dir_path / name)
            writer.writerow(
                [
                    name,
                    m.class_id,
                    "" if m.scale is None else repr(float(m.scale)),
                    "" if m.rotation is None else repr(float(m.rotation)),
                ]
            )


# ---------------------------------------------------------------------------
# synthetic transforms


def synth_transform(image: np.ndarray, scale: float, rotation_deg: float = 0.0):
    """Rotate about the image center, then scale about it; one resampling.

    The output is the bilinear pullback through the inverse affine map
    with edge clamping. Rotation is counterclockwise in (x, y) with y
    running down the rows.
    """
    if not SCALE_LO <= scale <= SCALE_HI:
        raise ValueError(f"scale {scale} outside [{SCALE_LO}, {SCALE_HI}]")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    th = math.radians(rotation_deg % 360.0)
    cos, sin = math.cos(th), math.sin(th)
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    rel = diffeo.identity_coords(h, w, np.float64) - center
    rel = rel / scale
    src = center + np.stack(
        [cos * rel[..., 0] + sin * rel[..., 1], -sin * rel[..., 0] + cos * rel[..., 1]],
        axis=-1,
    )
    return diffeo.sample_bilinear(img, src).astype(np.float32)


REGIMES = ("class", "class-scale", "class-scale-rot")


def build_simulated(dataset: Dataset, regime: str, seed: int) -> Dataset:
    """Apply per-item random scale and/or rotation, re-encoding attributes."""
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    rng = np.random.default_rng(seed)
    with_scale = regime != "class"
    with_rot = regime == "class-scale-rot"
    images = []
    attrs = []
    meta = []
    for i in range(dataset.n):
        cls = dataset.meta[i].class_id
        s = float(rng.uniform(SCALE_LO, SCALE_HI)) if with_scale else None
        r = float(rng.uniform(0.0, 360.0)) if with_rot else None
        if with_scale or with_rot:
            images.append(synth_transform(dataset.images[i], s or 1.0, r or 0.0))
        else:
            images.append(dataset.images[i].copy())
        attrs.append(encode_attributes(cls, dataset.n_classes, scale=s, rotation=r))
        meta.append(ItemMeta(class_id=cls, scale=s, rotation=r))
    return Dataset(
        images=np.stack(images),
        attributes=np.stack(attrs),
        meta=meta,
        splits=dataset.splits.copy(),
        n_classes=dataset.n_classes,
    )


# ---------------------------------------------------------------------------
# random fields and the oracle dataset


def random_smooth_field(
    rng: np.random.Generator, h: int, w: int, max_mag: float
) -> np.ndarray:
    """White noise per channel, 4 passes of a 3x3 box filter, rescaled so
    the largest displacement magnitude equals max_mag."""
    f = rng.normal(size=(h, w, 2))
    for _ in range(4):
        p = np.pad(f, ((1, 1), (1, 1), (0, 0)), mode="edge")
        acc = np.zeros_like(f)
        for dy in range(3):
            for dx in range(3):
                acc += p[dy : dy + h, dx : dx + w]
        f = acc / 9.0
    if max_mag == 0.0:
        return np.zeros((h, w, 2), dtype=np.float64)
    mag = np.sqrt((f**2).sum(-1)).max()
    return f * (max_mag / mag)


def random_bump_field(
    rng: np.random.Generator,
    h: int,
    w: int,
    max_mag: float,
    bumps: int = 3,
    sigma_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """Sum of broad Gaussian bumps, rescaled to a peak magnitude.

    Much smoother than random_smooth_field: spatial wavelengths stay well
    above the grid spacing, so bilinear resampling inside the integrators
    is accurate. This is the family used to compare integrate_ss against
    the dense Euler reference.
    """
    lo, hi = sigma_range if sigma_range else (0.31 * min(h, w), 0.5 * min(h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    f = np.zeros((h, w, 2))
    for _ in range(bumps):
        cy = rng.uniform(h * 0.25, h * 0.75)
        cx = rng.uniform(w * 0.25, w * 0.75)
        s = rng.uniform(lo, hi)
        amp = rng.normal(size=2)
        f += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))[..., None] * amp
    if max_mag == 0.0:
        return np.zeros((h, w, 2), dtype=np.float64)
    mag = np.sqrt((f**2).sum(-1)).max()
    return f * (max_mag / mag)


_FIELD_QUANTUM = 4096.0  # fields snap to 1/4096 px so sums cancel bitwise


def synth_oracle_dataset(
    template: np.ndarray,
    n: int,
    noise_sigma: float,
    field_amplitude: float,
    seed: int,
) -> tuple[Dataset, np.ndarray]:
    """Images warped from a known template by zero-mean random fields.

    Each item is warp(template, integrate_ss(v_i)) plus clipped Gaussian
    noise. The fields are returned for oracle comparisons and sum to the
    zero field exactly: after mean subtraction they are snapped to a
    1/4096-px lattice and the integer residual is spread across items, so
    both float32 and float64 summation cancel bitwise.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if field_amplitude > 5.0:
        raise ValueError(f"field_amplitude {field_amplitude} above 5 px")
    template = np.asarray(template, dtype=np.float64)
    h, w = template.shape
    rng = np.random.default_rng(seed)
    fields = np.stack(
        [random_smooth_field(rng, h, w, field_amplitude) for _ in range(n)]
    )
    fields -= fields.mean(axis=0)

    k = np.rint(fields * _FIELD_QUANTUM)
    resid = k.sum(axis=0)
    base = np.floor_divide(resid, n)
    rem = (resid - base * n).astype(np.int64)  # in [0, n)
    k -= base
    k -= np.arange(n)[:, None, None, None] < rem
    fields = (k / _FIELD_QUANTUM).astype(np.float32)

    images = np.empty((n, h, w), dtype=np.float32)
    for i in range(n):
        warped = diffeo.warp(template, diffeo.integrate_ss(fields[i].astype(np.float64), 7))
        if noise_sigma > 0:
            warped = warped + rng.normal(0.0, noise_sigma, size=(h, w))
        images[i] = np.clip(warped, 0.0, 1.0)

    ds = Dataset(
        images=images,
        attributes=np.ones((n, 1), dtype=np.float32),
        meta=[ItemMeta(class_id=0) for _ in range(n)],
        splits=np.full(n, "train"),
        n_classes=1,
    )
    return ds, fields


# ---------------------------------------------------------------------------
# toy shape datasets for experiments at desk scale

TEMPLATE_KINDS = ("disk", "ring", "cross", "square")


def make_template(kind: str, h: int = 32, w: int = 32) -> np.ndarray:
    """A smooth grayscale shape with soft (~1.5 px) edges, values in [0, 1]."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    m = min(h, w)
    tau = 1.4

    def soft(x):
        return 1.0 / (1.0 + np.exp(-x / tau))

    r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    if kind == "disk":
        img = soft(0.30 * m - r)
    elif kind == "ring":
        img = soft(0.11 * m - np.abs(r - 0.30 * m))
    elif kind == "cross":
        bar_v = soft(0.10 * m - np.abs(xs - cx)) * soft(0.36 * m - np.abs(ys - cy))
        bar_h = soft(0.10 * m - np.abs(ys - cy)) * soft(0.36 * m - np.abs(xs - cx))
        img = np.maximum(bar_v, bar_h)
    elif kind == "square":
        img = soft(0.26 * m - np.abs(ys - cy)) * soft(0.26 * m - np.abs(xs - cx))
    else:
        raise ValueError(f"unknown template kind {kind!r}; have {TEMPLATE_KINDS}")
    return img.astype(np.float32)


def synth_class_dataset(
    kinds,
    n_per_class: int,
    regime: str = "class",
    seed: int = 0,
    h: int = 32,
    w: int = 32,
    warp_amplitude: float = 1.5,
    noise_sigma: float = 0.02,
) -> Dataset:
    """Per-class shape templates under random deformation, scale, rotation.

    Every item is its class template, optionally scaled/rotated per the
    regime, then warped by a small random smooth field and corrupted with
    clipped Gaussian noise.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    rng = np.random.default_rng(seed)
    templates = [make_template(k, h, w) for k in kinds]
    n_classes = len(templates)
    with_scale = regime != "class"
    with_rot = regime == "class-scale-rot"
    images, attrs, meta = [], [], []
    for i in range(n_per_class * n_classes):
        cls = i % n_classes
        s = float(rng.uniform(SCALE_LO, SCALE_HI)) if with_scale else None
        r = float(rng.uniform(0.0, 360.0)) if with_rot else None
        img = templates[cls]
        if with_scale or with_rot:
            img = synth_transform(img, s or 1.0, r or 0.0)
        if warp_amplitude > 0:
            v = random_smooth_field(rng, h, w, warp_amplitude)
            img = diffeo.warp(img.astype(np.float64), diffeo.integrate_ss(v, 7))
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, size=(h, w))
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        attrs.append(encode_attributes(cls, n_classes, scale=s, rotation=r))
        meta.append(ItemMeta(class_id=cls, scale=s, rotation=r))
    return Dataset(
        images=np.stack(images),
        attributes=np.stack(attrs),
        meta=meta,
        splits=np.full(len(images), "train"),
        n_classes=n_classes,
    )


# ---------------------------------------------------------------------------
# attributes, splits, holdout


def encode_attributes(
    class_id: int,
    n_classes: int,
    scale: float | None = None,
    rotation: float | None = None,
) -> np.ndarray:
    """One-hot class, then scale mapped from [0.7, 1.3] to [0, 1], then
    rotation mapped from [0, 360) to [0, 1); absent parts are omitted."""
    if not 0 <= class_id < n_classes:
        raise ValueError(f"class id {class_id} outside [0, {n_classes})")
    parts = np.zeros(n_classes, dtype=np.float32)
    parts[class_id] = 1.0
    out = [parts]
    if scale is not None:
        if not SCALE_LO <= scale <= SCALE_HI:
            raise ValueError(f"scale {scale} outside [{SCALE_LO}, {SCALE_HI}]")
        out.append(np.float32((scale - SCALE_LO) / (SCALE_HI - SCALE_LO)).reshape(1))
    if rotation is not None:
        if not 0.0 <= rotation < 360.0:
            raise ValueError(f"rotation {rotation} outside [0, 360)")
        out.append(np.float32(rotation / 360.0).reshape(1))
    return np.concatenate(out)


def split(dataset: Dataset, fractions, seed: int) -> Dataset:
    """Assign train/val/test tags, shuffled per seed, stratified by class."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be 3 non-negatives summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    tags = np.empty(dataset.n, dtype="<U5")
    classes = dataset.class_ids()
    for c in np.unique(classes):
        idx = rng.permutation(np.flatnonzero(classes == c))
        m = len(idx)
        n_tr = int(round(m * fractions[0]))
        n_val = min(int(round(m * fractions[1])), m - n_tr)
        tags[idx[:n_tr]] = "train"
        tags[idx[n_tr : n_tr + n_val]] = "val"
        tags[idx[n_tr + n_val :]] = "test"
    return replace(dataset, splits=tags)


@dataclass
class HoldoutRule:
    """Which training items to drop: class set x scale interval, or a
    per-class cap keeping only the first `max_count` matching items."""

    classes: frozenset[int]
    scale_range: tuple[float, float] | None = None
    rotation_range: tuple[float, float] | None = None
    max_count: int | None = None

    def matches(self, m: ItemMeta) -> bool:
        if m.class_id not in self.classes:
            return False
        if self.scale_range is not None:
            if m.scale is None or not self.scale_range[0] <= m.scale <= self.scale_range[1]:
                return False
        if self.rotation_range is not None:
            if (
                m.rotation is None
                or not self.rotation_range[0] <= m.rotation <= self.rotation_range[1]
            ):
                return False
        return True


def parse_holdout(text: str) -> HoldoutRule:
    """Parse rules like `classes=3,4,5;scale=0.9:1.1` or `class=5;max=5`."""
    classes: frozenset[int] | None = None
    scale_range = rotation_range = None
    max_count = None
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        key, _, val = part.partition("=")
        key = key.strip()
        val = val.strip()
        try:
            if key in ("class", "classes"):
                classes = frozenset(int(v) for v in val.split(","))
            elif key in ("scale", "rotation"):
                lo, _, hi = val.partition(":")
                rng_val = (float(lo), float(hi))
                if rng_val[0] > rng_val[1]:
                    raise ValueError(f"empty interval {val}")
                if key == "scale":
                    scale_range = rng_val
                else:
                    rotation_range = rng_val
            elif key == "max":
                max_count = int(val)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise ValueError(f"bad holdout rule {text!r}: {e}") from None
    if classes is None:
        raise ValueError(f"bad holdout rule {text!r}: needs class= or classes=")
    return HoldoutRule(
        classes=classes,
        scale_range=scale_range,
        rotation_range=rotation_range,
        max_count=max_count,
    )


def holdout_filter(dataset: Dataset, rule) -> Dataset:
    """Drop (or cap) matching items from the training split only."""
    if isinstance(rule, str):
        rule = parse_holdout(rule)
    keep = np.ones(dataset.n, dtype=bool)
    kept_per_class: dict[int, int] = {}
    for i in range(dataset.n):
        if dataset.splits[i] != "train" or not rule.matches(dataset.meta[i]):
            continue
        if rule.max_count is None:
            keep[i] = False
        else:
            c = dataset.meta[i].class_id
            kept_per_class[c] = kept_per_class.get(c, 0) + 1
            if kept_per_class[c] > rule.max_count:
                keep[i] = False
    out = dataset.subset(np.flatnonzero(keep))
    if len(out.indices("train")) == 0:
        raise ValueError("holdout removed every training item")
    return out


def pad_to(images: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero-pad (n, H, W) images to (n, h, w), centered."""
    n, ih, iw = images.shape
    if ih > h or iw > w:
        raise ValueError(f"cannot pad {ih}x{iw} down to {h}x{w}")
    top = (h - ih) // 2
    left = (w - iw) // 2
    out = np.zeros((n, h, w), dtype=images.dtype)
    out[:, top : top + ih, left : left + iw] = images
    return out
