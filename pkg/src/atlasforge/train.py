"""Training loop, optimizers, and checkpoint persistence.

Everything here is deterministic: (config, dataset) fixes every logged
value and every checkpoint byte. Batch order is a pure function of
(seed, iteration), so resuming from a checkpoint replays the exact
remainder of an uninterrupted run.

Checkpoint container: magic "DTC1", little-endian u32 version, u32
tensor count, then per tensor a u16 name length, the UTF-8 name, a u8
dtype code (0=f32, 1=f64), a u8 rank, rank u32 dims, and the raw
row-major little-endian data. Running-mean tensors use the reserved
prefix "ema/", optimizer tensors "opt/". A CRC32 of all preceding bytes
trails the file. The TrainConfig snapshot lives in a JSON sidecar at
"<path>.json".
"""

from __future__ import annotations

import dataclasses
import functools
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .data import Dataset
from .nets import MODES, ArchConfig, Model, ParamStore, init_model
from .objective import LossConfig, RunningMeanField, total_loss

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainingError",
    "train",
    "optimizer_step",
    "clip_by_global_norm",
    "batch_indices",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "LOG_HEADER",
]

LOG_HEADER = "iter,total,data,magnitude,smoothness,centrality,mean_abs_u"

MAGIC = b"DTC1"
VERSION = 1
OPTIMIZERS = ("adam", "sgd")
RESERVED_PREFIXES = ("opt/", "ema/")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class TrainingError(RuntimeError):
    """Raised when optimization cannot continue (non-finite loss)."""


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    mode: str = "unconditional"
    batch_size: int = 16
    iterations: int = 2000
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 10
    clip_norm: float = 10.0
    freeze: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if min(self.batch_size, self.iterations, self.log_interval) < 1:
            raise ValueError("batch_size, iterations, log_interval must be >= 1")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate and clip_norm must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("adam parameters out of range")
        self.freeze = tuple(self.freeze)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["freeze"] = list(self.freeze)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        d["arch"] = ArchConfig(**d.get("arch", {}))
        d["freeze"] = tuple(d.get("freeze", ()))
        return cls(**d)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamStore
    state: RunningMeanField
    moments: dict
    iteration: int
    version: int = VERSION


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    return Model(mode=ckpt.config.mode, arch=ckpt.config.arch, params=ckpt.params)


# ---------------------------------------------------------------------------
# batch sampling: an infinite stream of shuffled epochs, indexable by
# absolute position so iteration i never depends on loop history


@functools.lru_cache(maxsize=8)
def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
    perm.flags.writeable = False
    return perm


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Dataset indices for one batch; pure function of its arguments."""
    if n < 1 or batch_size < 1:
        raise ValueError("need n >= 1 and batch_size >= 1")
    start = iteration * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    for k in range(batch_size):
        epoch, offset = divmod(start + k, n)
        out[k] = _epoch_perm(seed, epoch, n)[offset]
    return out


# ---------------------------------------------------------------------------
# optimizers


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}, norm


def optimizer_step(params, grads: dict, moments: dict, config: TrainConfig):
    """Apply one adam or sgd update in place; returns (params, moments).

    Adam moments live in ``moments`` under "opt/m/<name>" and
    "opt/v/<name>" with the shared step count at "opt/t". Parameters
    without a gradient entry are left untouched.
    """
    tensors = dict(params.items()) if isinstance(params, ParamStore) else params
    for name in grads:
        if name not in tensors:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if grads[name].shape != tensors[name].data.shape:
            raise ShapeError(
                f"gradient shape {grads[name].shape} does not match "
                f"parameter {name!r} {tensors[name].data.shape}"
            )
    if config.optimizer == "sgd":
        for name in sorted(grads):
            tensors[name].data -= config.learning_rate * grads[name]
        return params, moments

    t = int(moments.get("opt/t", 0.0)) + 1
    moments["opt/t"] = float(t)
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name in sorted(grads):
        p = tensors[name]
        g = grads[name]
        m = moments.get(f"opt/m/{name}")
        v = moments.get(f"opt/v/{name}")
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        moments[f"opt/m/{name}"] = m
        moments[f"opt/v/{name}"] = v
        step = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p.data -= step.astype(p.data.dtype)
    return params, moments


# ---------------------------------------------------------------------------
# checkpoint container


def _write_tensor(chunks: list, name: str, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype)
    if dt not in _DTYPE_CODES:
        raise ValueError(f"tensor {name!r} has unsupported dtype {dt}")
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name!r}")
    if arr.ndim > 255:
        raise ValueError(f"tensor rank {arr.ndim} too large")
    chunks.append(struct.pack("<H", len(nb)))
    chunks.append(nb)
    chunks.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
    chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    chunks.append(np.ascontiguousarray(arr).astype(dt.newbyteorder("<")).tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    entries: list[tuple[str, np.ndarray]] = []
    for name, t in ckpt.params.items():
        if name.startswith(RESERVED_PREFIXES):
            raise ValueError(f"parameter name {name!r} uses a reserved prefix")
        entries.append((name, t.data))
    st = ckpt.state
    entries.append(("ema/mean", st.mean))
    entries.append(("ema/beta", np.asarray(st.beta, dtype=np.float64)))
    entries.append(("ema/step", np.asarray(float(st.step), dtype=np.float64)))
    entries.append(("opt/iteration", np.asarray(float(ckpt.iteration), np.float64)))
    for name in sorted(ckpt.moments):
        entries.append((name, np.asarray(ckpt.moments[name])))

    chunks = [MAGIC, struct.pack("<II", ckpt.version, len(entries))]
    for name, arr in entries:
        _write_tensor(chunks, name, arr)
    blob = b"".join(chunks)
    path.write_bytes(blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(ckpt.config.to_dict(), indent=2) + "\n")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise ValueError(f"checkpoint truncated at byte {len(raw)}")
    body, crc_bytes = raw[:-4], raw[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ValueError("checkpoint checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise ValueError("bad checkpoint magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise ValueError(f"tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dt = _CODE_DTYPES[code]
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(n_items * dt.itemsize), dtype=dt.newbyteorder("<"))
        tensors[name] = data.astype(dt).reshape(dims).copy()
        order.append(name)
    if r.pos != len(body):
        raise ValueError(f"{len(body) - r.pos} trailing bytes after tensor table")

    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing config sidecar {sidecar}")
    config = TrainConfig.from_dict(json.loads(sidecar.read_text()))

    params = ParamStore()
    moments: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    for name in order:
        arr = tensors[name]
        if name.startswith("opt/"):
            if name != "opt/iteration":
                moments[name] = arr if arr.ndim else float(arr)
        elif name.startswith("ema/"):
            ema[name] = arr
        else:
            params.add(name, arr)
    for key in ("ema/mean", "ema/beta", "ema/step"):
        if key not in ema:
            raise ValueError(f"checkpoint missing {key!r}")
    if "opt/iteration" not in tensors:
        raise ValueError("checkpoint missing 'opt/iteration'")
    state = RunningMeanField(
        mean=ema["ema/mean"],
        beta=float(ema["ema/beta"]),
        step=int(float(ema["ema/step"])),
    )
    return Checkpoint(
        config=config,
        params=params,
        state=state,
        moments=moments,
        iteration=int(float(tensors["opt/iteration"])),
        version=version,
    )


# ---------------------------------------------------------------------------
# training loop


def _check_compat(config: TrainConfig, dataset: Dataset) -> None:
    if dataset.height != config.arch.height or dataset.width != config.arch.width:
        raise ValueError(
            f"dataset images {dataset.height}x{dataset.width} do not match "
            f"architecture {config.arch.height}x{config.arch.width}"
        )
    if config.mode == "conditional" and dataset.attr_len != config.arch.attr_len:
        raise ValueError(
            f"conditional mode needs {config.arch.attr_len} attributes, "
            f"dataset provides {dataset.attr_len}"
        )


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir=None,
    resume_from: Checkpoint | None = None,
    template_init: np.ndarray | None = None,
) -> tuple[Checkpoint, list[str]]:
    """Run the optimization loop; returns (final checkpoint, CSV log lines).

    With out_dir set, writes log.csv, interval checkpoints
    checkpoint_<iter>.dtc, and a final checkpoint.dtc. resume_from
    continues a run: iterations already done are skipped and the log
    covers only the remainder. template_init seeds the unconditional
    pixel grid (flat 0.5 by default).
    """
    train_idx = dataset.indices("train")
    if train_idx.size == 0:
        raise ValueError("dataset has no train split")
    _check_compat(config, dataset)

    if resume_from is not None:
        params = resume_from.params
        state = resume_from.state
        moments = dict(resume_from.moments)
        start = resume_from.iteration
        model = Model(mode=config.mode, arch=config.arch, params=params)
    else:
        model = init_model(
            config.mode, config.arch, seed=config.seed, template_init=template_init
        )
        state = RunningMeanField.zeros(
            config.arch.height, config.arch.width, c=config.loss.ema_c
        )
        moments = {}
        start = 0

    frozen = tuple(config.freeze)
    trainable = {
        n: t
        for n, t in model.params.trainable().items()
        if not any(n.startswith(p) for p in frozen)
    }
    if not trainable:
        raise ValueError("freeze list leaves no trainable parameters")

    images = dataset.images
    attrs = dataset.attributes
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log_lines = [LOG_HEADER]
    last_diag: dict = {}
    n_train = train_idx.size
    for it in range(start, config.iterations):
        idx = train_idx[batch_indices(config.seed, it, n_train, config.batch_size)]
        x = images[idx]
        a = attrs[idx] if config.mode == "conditional" else None
        try:
            loss, state, diag = total_loss(model, x, a, state, config.loss)
        except ValueError as e:
            if "non-finite" not in str(e):
                raise
            raise TrainingError(
                f"non-finite forward pass at iteration {it}; "
                f"last diagnostics: {last_diag}"
            ) from e
        if not np.isfinite(diag["total"]):
            raise TrainingError(
                f"non-finite loss at iteration {it}: {diag}; "
                f"last diagnostics: {last_diag}"
            )
        last_diag = diag
        ad.zero_grads(model.params.tensors())
        ad.backward(loss)
        grads = {
            n: t.grad for n, t in trainable.items() if t.grad is not None
        }
        grads, _ = clip_by_global_norm(grads, config.clip_norm)
        optimizer_step(model.params, grads, moments, config)

        if it % config.log_interval == 0 or it == config.iterations - 1:
            log_lines.append(
                ",".join(
                    [str(it)]
                    + [
                        _fmt(diag[k])
                        for k in (
                            "total",
                            "data",
                            "magnitude",
                            "smoothness",
                            "centrality",
                            "mean_abs_u",
                        )
                    ]
                )
            )
        if (
            out_dir is not None
            and config.checkpoint_interval > 0
            and (it + 1) % config.checkpoint_interval == 0
            and (it + 1) < config.iterations
        ):
            snap = Checkpoint(config, model.params, state, moments, it + 1)
            save_checkpoint(out_dir / f"checkpoint_{it + 1:06d}.dtc", snap)

    model.params.check_finite()
    ckpt = Checkpoint(config, model.params, state, moments, config.iterations)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.dtc", ckpt)
        (out_dir / "log.csv").write_text("\n".join(log_lines) + "\n")
    return ckpt, log_lines
