"""Residual CNN + GeM encoder shared by the image and semantic-mask branches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from placerec.errors import DataError
from placerec.numcore import (
    Conv2d,
    GemParams,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    gem_pool,
    no_grad,
    relu,
    reshape,
)

# Lower bound re-imposed on the learnable GeM exponent after each step; keeps
# the pool between average (p=1) and max (p->inf).
GEM_P_FLOOR = 1.0


@dataclass
class CnnEncoderConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    output_dim: int = 256
    gem: GemParams = field(default_factory=GemParams)

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")
        if not self.widths:
            raise ValueError("at least one stage width is required")
        self.widths = tuple(int(w) for w in self.widths)


class _Stage(Module):
    """Stride-2 downsampling conv followed by one residual conv."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.down = Conv2d(in_ch, out_ch, rng, stride=2, padding=1)
        self.res = Conv2d(out_ch, out_ch, rng, stride=1, padding=1)

    def forward(self, x):
        h = relu(self.down(x))
        return relu(add(h, self.res(h)))


class CnnEncoder(Module):
    """Maps a batch of channels-last rasters (N, H, W, C) to (N, output_dim)."""

    def __init__(self, config: CnnEncoderConfig, rng: np.random.Generator):
        self.config = config
        chans = (config.in_channels,) + config.widths
        self.stages = [_Stage(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.gem_p = Parameter(np.array([config.gem.p]), min_value=GEM_P_FLOOR)
        self.proj = Linear(config.widths[-1], config.output_dim, rng)

    def features(self, x) -> Tensor:
        """Pooled (pre-projection) features, shape (N, widths[-1])."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4:
            raise DataError(f"expected (N, H, W, C) input, got shape {x.shape}")
        n, h, w, c = x.shape
        if c != self.config.in_channels:
            raise DataError(f"channel mismatch: encoder expects {self.config.in_channels}, input has {c}")
        if h * w == 0:
            raise DataError("empty raster")
        for stage in self.stages:
            x = stage(x)
        n, h, w, c = x.shape
        return gem_pool(reshape(x, (n, h * w, c)), self.gem_p, eps=self.config.gem.eps, axis=1)

    def forward(self, x) -> Tensor:
        return self.proj(self.features(x))


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) or float [0, 1] raster -> float (H, W, 3)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DataError(f"image must be (H, W, 1|3), got {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise DataError("image contains non-finite values")
    return arr


def mask_to_input(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Class-id raster (H, W) -> single-channel float raster of class_id / num_classes."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise DataError(f"semantic mask must be a single-channel raster, got shape {np.shape(mask)}")
    return (arr.astype(np.float64) / float(num_classes))[..., None]


def _encode_one(encoder: CnnEncoder, raster: np.ndarray) -> np.ndarray:
    with no_grad():
        return encoder(Tensor(raster[None])).data[0].copy()


def encode_image(image: np.ndarray, encoder: CnnEncoder) -> np.ndarray:
    """Embed one RGB image (H, W, 3)."""
    if encoder.config.in_channels != 3:
        raise DataError("encode_image needs a 3-channel encoder")
    return _encode_one(encoder, image_to_input(image))


def encode_semantic_mask(mask: np.ndarray, encoder: CnnEncoder, num_classes: int | None = None) -> np.ndarray:
    """Embed one semantic mask.

    ``mask`` is either a (H, W) class-id raster (then ``num_classes`` is
    required) or an already normalized (H, W, 1) float raster.
    """
    if encoder.config.in_channels != 1:
        raise DataError("encode_semantic_mask needs a 1-channel encoder")
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[2] != 1:
        raise DataError(f"semantic masks are single-channel, got {arr.shape[2]} channels")
    if num_classes is not None:
        raster = mask_to_input(arr, num_classes)
    elif arr.ndim == 3:
        raster = arr.astype(np.float64)
    else:
        raise DataError("num_classes is required for a class-id mask")
    return _encode_one(encoder, raster)
