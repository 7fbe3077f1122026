"""Convolutional feature encoder and multi-scale pyramid.

A small residual network turns each RGB frame into a feature map at 1/4
resolution; coarser pyramid levels are average-pooled from it, halving
resolution per level. All normalization is per position across channels,
so a feature cell depends only on pixels inside its receptive field
(about 47 px at full resolution for the default depth).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .optim import Parameter

BASE_STRIDE = 4  # full-res pixels per feature cell at the finest scale


@dataclass
class EncoderConfig:
    in_channels: int = 3
    stem_width: int = 64
    width: int = 128
    feature_dim: int = 128
    n_blocks: int = 2
    n_scales: int = 4

    @property
    def max_stride(self) -> int:
        return BASE_STRIDE * 2 ** (self.n_scales - 1)


def _he(rng, shape, fan_in) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def preprocess_images(rgb: np.ndarray) -> Tensor:
    """uint8 (N, H, W, 3) to a float32 NCHW tensor in [-1, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 4 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"expected uint8 (N, H, W, 3) images, got {rgb.shape} {rgb.dtype}")
    x = rgb.astype(np.float32) / 127.5 - 1.0
    return ad.tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


class FeatureEncoder:
    """Stem (stride 2), one downsampling residual stage (stride 2),
    ``n_blocks`` stride-1 residual blocks, then a 1x1 projection head."""

    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or EncoderConfig()
        rng = np.random.default_rng(seed)
        P: dict[str, Tensor] = {}

        def conv(name, cin, cout, k):
            P[f"{name}.w"] = ad.tensor(_he(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
            P[f"{name}.b"] = ad.tensor(np.zeros(cout, np.float32), requires_grad=True)

        def norm(name, c):
            P[f"{name}.g"] = ad.tensor(np.ones((1, c, 1, 1), np.float32), requires_grad=True)
            P[f"{name}.o"] = ad.tensor(np.zeros((1, c, 1, 1), np.float32), requires_grad=True)

        conv("stem", cfg.in_channels, cfg.stem_width, 3)
        norm("stem_norm", cfg.stem_width)
        conv("down.conv1", cfg.stem_width, cfg.width, 3)
        norm("down.norm1", cfg.width)
        conv("down.conv2", cfg.width, cfg.width, 3)
        norm("down.norm2", cfg.width)
        conv("down.skip", cfg.stem_width, cfg.width, 1)
        for i in range(cfg.n_blocks):
            conv(f"block{i}.conv1", cfg.width, cfg.width, 3)
            norm(f"block{i}.norm1", cfg.width)
            conv(f"block{i}.conv2", cfg.width, cfg.width, 3)
            norm(f"block{i}.norm2", cfg.width)
        conv("head", cfg.width, cfg.feature_dim, 1)
        self.P = P

    def parameters(self) -> list[Parameter]:
        return [Parameter(f"encoder.{k}", v) for k, v in self.P.items()]

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.P[f"{name}.g"], self.P[f"{name}.o"], axis=1)

    def base_features(self, images: Tensor) -> Tensor:
        """NCHW images to (N, feature_dim, H/4, W/4)."""
        P = self.P
        x = ad.conv2d(images, P["stem.w"], P["stem.b"], stride=2, padding=1)
        x = ad.gelu(self._norm("stem_norm", x))

        skip = ad.conv2d(x, P["down.skip.w"], P["down.skip.b"], stride=2, padding=0)
        h = ad.conv2d(x, P["down.conv1.w"], P["down.conv1.b"], stride=2, padding=1)
        h = ad.gelu(self._norm("down.norm1", h))
        h = ad.conv2d(h, P["down.conv2.w"], P["down.conv2.b"], stride=1, padding=1)
        x = ad.gelu(self._norm("down.norm2", h) + skip)

        for i in range(self.cfg.n_blocks):
            h = ad.conv2d(x, P[f"block{i}.conv1.w"], P[f"block{i}.conv1.b"], stride=1, padding=1)
            h = ad.gelu(self._norm(f"block{i}.norm1", h))
            h = ad.conv2d(h, P[f"block{i}.conv2.w"], P[f"block{i}.conv2.b"], stride=1, padding=1)
            x = ad.gelu(x + self._norm(f"block{i}.norm2", h))

        return ad.conv2d(x, P["head.w"], P["head.b"])

    def pyramid(self, images: Tensor) -> list[Tensor]:
        """Feature maps at n_scales resolutions: H/4, H/8, ... (finest first)."""
        h, w = images.shape[2], images.shape[3]
        stride = self.cfg.max_stride
        if h % stride or w % stride:
            raise ShapeError(
                f"image size {h}x{w} must be divisible by {stride} "
                f"for a {self.cfg.n_scales}-scale pyramid"
            )
        f = self.base_features(images)
        feats = [f]
        for _ in range(self.cfg.n_scales - 1):
            f = ad.avg_pool2d(f)
            feats.append(f)
        return feats


def cell_center_pixel(index, scale: int):
    """Full-resolution pixel at the center of feature cell ``index`` (row or
    col, scalar or array) at 1-indexed pyramid ``scale``."""
    cell = BASE_STRIDE * 2 ** (scale - 1)
    return (np.asarray(index, dtype=np.float64) + 0.5) * cell - 0.5
