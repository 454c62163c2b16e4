"""Network architectures: template decoder, registration U-Net, encoder.

Three template sources share one interface: a conditional decoder mapping
an attribute vector to an image, a bare learnable pixel grid for the
unconditional case, and a latent path that first encodes the input image
to a small attribute vector. The registration U-Net maps (template,
image) pairs to a stationary velocity field at full resolution.

Parameters live in a ParamStore under fixed names:
  decoder/dense/{w|b}, decoder/lvl{i}/conv{j}/{w|b}, decoder/final/{w|b},
  unet/down{i}/conv1/{w|b}, unet/up{i}/conv{j}/{w|b}, unet/final/{w|b},
  encoder/down{i}/conv1/{w|b}, encoder/dense/{w|b}, template/pixels
so checkpoints are portable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "ParamStore",
    "ArchConfig",
    "Model",
    "MODES",
    "init_model",
    "template_decoder_forward",
    "unconditional_template",
    "registration_unet_forward",
    "latent_encoder_forward",
]

MODES = ("unconditional", "conditional", "latent")

UNET_TAIL_FEATURES = 16
DECODER_FEATURES = 16
FINAL_INIT_STD = 1e-5
LEAKY_SLOPE = 0.2


class ParamStore:
    """Ordered name -> Tensor map; names unique, shapes fixed after add."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._store:
            raise ValueError(f"parameter {name!r} already exists")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        t = Tensor(values, requires_grad=True)
        self._store[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._store[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def tensors(self) -> list[Tensor]:
        return list(self._store.values())

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._store.items() if t.requires_grad}

    def check_finite(self) -> None:
        for name, t in self._store.items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name!r} became non-finite")

    def size(self) -> int:
        return sum(t.data.size for t in self._store.values())


@dataclass
class ArchConfig:
    height: int = 32
    width: int = 32
    attr_len: int = 1
    decoder_k: int = 8
    unet_features: int = 32
    unet_depth: int = 4
    latent_dim: int = 1

    def __post_init__(self):
        if self.height != self.width:
            raise ValueError(
                f"square images required, got {self.height}x{self.width}"
            )
        side = self.height
        if side % (1 << self.unet_depth):
            raise ValueError(
                f"dims {side} not divisible by 2^{self.unet_depth}"
            )
        levels = (side // 4).bit_length() - 1
        if side != 4 * (1 << levels):
            raise ValueError(f"dims must be 4*2^m for the decoder, got {side}")
        if self.decoder_k < 1 or self.attr_len < 1 or self.latent_dim < 1:
            raise ValueError("decoder_k, attr_len, latent_dim must be >= 1")

    @property
    def decoder_levels(self) -> int:
        return (self.height // 4).bit_length() - 1


def _he(rng, fan_in: int, shape, dtype) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def _zeros(shape, dtype) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def _add_conv(store, rng, name, cin, cout, dtype, std=None):
    if std is None:
        w = _he(rng, cin * 9, (cin, 3, 3, cout), dtype)
    else:
        w = rng.normal(0.0, std, size=(cin, 3, 3, cout)).astype(dtype)
    store.add(f"{name}/w", w)
    if std is None:
        store.add(f"{name}/b", _zeros(cout, dtype))
    else:
        store.add(f"{name}/b", rng.normal(0.0, std, size=cout).astype(dtype))


def init_decoder(store: ParamStore, arch: ArchConfig, rng, dtype=np.float32):
    k = arch.decoder_k
    store.add(
        "decoder/dense/w", _he(rng, arch.attr_len, (arch.attr_len, 16 * k), dtype)
    )
    store.add("decoder/dense/b", _zeros(16 * k, dtype))
    feat = DECODER_FEATURES
    cin = k
    for i in range(arch.decoder_levels):
        _add_conv(store, rng, f"decoder/lvl{i}/conv1", cin, feat, dtype)
        _add_conv(store, rng, f"decoder/lvl{i}/conv2", feat, feat, dtype)
        cin = feat
    _add_conv(store, rng, "decoder/final", feat, 1, dtype)


def init_unet(store: ParamStore, arch: ArchConfig, rng, dtype=np.float32):
    f = arch.unet_features
    d = arch.unet_depth
    cin = 2
    for i in range(d):
        _add_conv(store, rng, f"unet/down{i}/conv1", cin, f, dtype)
        cin = f
    for i in range(d):
        skip = 2 if i == d - 1 else f
        _add_conv(store, rng, f"unet/up{i}/conv1", f + skip, f, dtype)
    _add_conv(store, rng, f"unet/up{d-1}/conv2", f, UNET_TAIL_FEATURES, dtype)
    _add_conv(
        store, rng, f"unet/up{d-1}/conv3", UNET_TAIL_FEATURES, UNET_TAIL_FEATURES, dtype
    )
    _add_conv(store, rng, "unet/final", UNET_TAIL_FEATURES, 2, dtype, std=FINAL_INIT_STD)


def init_encoder(store: ParamStore, arch: ArchConfig, rng, dtype=np.float32):
    f = arch.unet_features
    cin = 1
    for i in range(arch.unet_depth):
        _add_conv(store, rng, f"encoder/down{i}/conv1", cin, f, dtype)
        cin = f
    side = arch.height >> arch.unet_depth
    flat = side * side * f
    store.add("encoder/dense/w", _he(rng, flat, (flat, arch.latent_dim), dtype))
    store.add("encoder/dense/b", _zeros(arch.latent_dim, dtype))


@dataclass
class Model:
    """A mode, its architecture, and the parameters binding them."""

    mode: str
    arch: ArchConfig
    params: ParamStore = field(default_factory=ParamStore)

    def template(self, attrs=None, images=None) -> Tensor:
        """Template batch (B, H, W, 1) for the given attribute rows/images."""
        if self.mode == "unconditional":
            if attrs is None:
                raise ValueError("unconditional template needs attrs for batch size")
            batch = len(attrs.data if isinstance(attrs, Tensor) else attrs)
            t = unconditional_template(self.params)
            t = ad.reshape(t, (1, self.arch.height, self.arch.width, 1))
            return ad.tile_batch(t, batch) if batch > 1 else t
        if self.mode == "conditional":
            return template_decoder_forward(self.params, attrs, self.arch)
        if self.mode == "latent":
            if images is None:
                raise ValueError("latent mode derives attributes from images")
            z = latent_encoder_forward(self.params, images, self.arch)
            return template_decoder_forward(self.params, z, self.arch)
        raise ValueError(f"unknown mode {self.mode!r}")

    def velocity(self, t: Tensor, x: Tensor) -> Tensor:
        return registration_unet_forward(self.params, t, x, self.arch)


def init_model(
    mode: str,
    arch: ArchConfig,
    seed: int = 0,
    dtype=np.float32,
    template_init: np.ndarray | None = None,
) -> Model:
    """Build a Model with freshly initialized parameters.

    The unconditional pixel grid starts at template_init if given, else
    flat 0.5; a neutral start lets the data term report learning progress
    honestly instead of inheriting a mean-image head start.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if mode == "unconditional":
        if template_init is None:
            template_init = np.full((arch.height, arch.width), 0.5)
        if template_init.shape != (arch.height, arch.width):
            raise ValueError(
                f"template init {template_init.shape} != "
                f"({arch.height}, {arch.width})"
            )
        store.add("template/pixels", template_init.astype(dtype))
    else:
        if mode == "latent" and arch.attr_len != arch.latent_dim:
            raise ValueError(
                f"latent mode needs attr_len == latent_dim, got "
                f"{arch.attr_len} != {arch.latent_dim}"
            )
        init_decoder(store, arch, rng, dtype)
    init_unet(store, arch, rng, dtype)
    if mode == "latent":
        init_encoder(store, arch, rng, dtype)
    return Model(mode=mode, arch=arch, params=store)


def _as_batched(x, channels: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else ad.constant(np.asarray(x))
    if t.data.ndim == 2 and channels == 1:
        t = ad.reshape(t, (1,) + t.data.shape + (1,))
    elif t.data.ndim == 3 and t.data.shape[-1] == channels:
        t = ad.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != 4 or t.data.shape[-1] != channels:
        raise ShapeError(f"{what}: expected (B,H,W,{channels}), got {x.data.shape if isinstance(x, Tensor) else np.shape(x)}")
    return t


def template_decoder_forward(params: ParamStore, a, arch: ArchConfig) -> Tensor:
    """Decode attribute rows (B, A) to template images (B, H, W, 1)."""
    t = a if isinstance(a, Tensor) else ad.constant(np.asarray(a))
    if t.data.ndim == 1:
        t = ad.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != 2 or t.data.shape[1] != arch.attr_len:
        raise ShapeError(
            f"attribute rows must be (B, {arch.attr_len}), got {t.data.shape}"
        )
    b = t.data.shape[0]
    h = ad.dense(t, params["decoder/dense/w"], params["decoder/dense/b"])
    h = ad.reshape(h, (b, 4, 4, arch.decoder_k))
    for i in range(arch.decoder_levels):
        h = ad.upsample2(h)
        h = ad.relu(
            ad.conv2d(h, params[f"decoder/lvl{i}/conv1/w"], params[f"decoder/lvl{i}/conv1/b"])
        )
        h = ad.relu(
            ad.conv2d(h, params[f"decoder/lvl{i}/conv2/w"], params[f"decoder/lvl{i}/conv2/b"])
        )
    out = ad.conv2d(h, params["decoder/final/w"], params["decoder/final/b"])
    return ad.sigmoid(out)


def unconditional_template(params: ParamStore) -> Tensor:
    """The learnable pixel grid itself; values unconstrained."""
    return params["template/pixels"]


def registration_unet_forward(params: ParamStore, t, x, arch: ArchConfig) -> Tensor:
    """Predict the stationary velocity field (B, H, W, 2) aligning the
    template t toward image x; inputs are (B, H, W, 1) maps."""
    t = _as_batched(t, 1, "registration template input")
    x = _as_batched(x, 1, "registration image input")
    if t.data.shape != x.data.shape:
        raise ShapeError(
            f"template {t.data.shape} and image {x.data.shape} dims differ"
        )
    side = t.data.shape[1]
    d = arch.unet_depth
    if t.data.shape[2] != side or side % (1 << d):
        raise ShapeError(
            f"grid {t.data.shape[1]}x{t.data.shape[2]} not divisible by 2^{d}"
        )
    h = ad.concat([t, x])
    skips = [h]
    for i in range(d):
        h = ad.leaky_relu(
            ad.conv2d(
                h,
                params[f"unet/down{i}/conv1/w"],
                params[f"unet/down{i}/conv1/b"],
                stride=2,
            ),
            LEAKY_SLOPE,
        )
        skips.append(h)
    for i in range(d):
        h = ad.upsample2(h)
        h = ad.concat([h, skips[d - 1 - i]])
        h = ad.leaky_relu(
            ad.conv2d(h, params[f"unet/up{i}/conv1/w"], params[f"unet/up{i}/conv1/b"]),
            LEAKY_SLOPE,
        )
    h = ad.leaky_relu(
        ad.conv2d(h, params[f"unet/up{d-1}/conv2/w"], params[f"unet/up{d-1}/conv2/b"]),
        LEAKY_SLOPE,
    )
    h = ad.leaky_relu(
        ad.conv2d(h, params[f"unet/up{d-1}/conv3/w"], params[f"unet/up{d-1}/conv3/b"]),
        LEAKY_SLOPE,
    )
    return ad.conv2d(h, params["unet/final/w"], params["unet/final/b"])


def latent_encoder_forward(params: ParamStore, x, arch: ArchConfig) -> Tensor:
    """Compress images (B, H, W, 1) to latent attribute rows (B, latent)."""
    x = _as_batched(x, 1, "encoder input")
    if x.data.shape[1] != arch.height or x.data.shape[2] != arch.width:
        raise ShapeError(
            f"encoder input {x.data.shape[1:3]} != ({arch.height}, {arch.width})"
        )
    h = x
    for i in range(arch.unet_depth):
        h = ad.leaky_relu(
            ad.conv2d(
                h,
                params[f"encoder/down{i}/conv1/w"],
                params[f"encoder/down{i}/conv1/b"],
                stride=2,
            ),
            LEAKY_SLOPE,
        )
    b = h.data.shape[0]
    flat = ad.reshape(h, (b, h.data.size // b))
    return ad.dense(flat, params["encoder/dense/w"], params["encoder/dense/b"])
