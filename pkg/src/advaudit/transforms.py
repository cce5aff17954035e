"""Multi-resolution pyramid construction and stochastic shift transforms.

Both are exactly linear in pixel values: the pyramid is average-pool down
plus nearest-upsample back, and the stochastic transform family is integer
pixel shifts with zero fill. Linearity keeps gradient routing exact (the
adjoint of a shift is the opposite shift).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import avgpool2d, shift2d, upsample_nearest


@dataclass(frozen=True)
class PyramidSpec:
    """Descending side lengths; the first entry is the native resolution."""

    resolutions: tuple[int, ...]

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if not res:
            raise ValueError("pyramid needs at least one resolution")
        if any(r <= 0 for r in res):
            raise ValueError(f"resolutions must be positive, got {res}")
        if any(a <= b for a, b in zip(res, res[1:])):
            raise ValueError(f"resolutions must be strictly decreasing, got {res}")
        native = res[0]
        bad = [r for r in res if native % r]
        if bad:
            raise ValueError(f"resolutions {bad} do not divide native side {native}")

    @property
    def native(self) -> int:
        return self.resolutions[0]

    @property
    def factors(self) -> tuple[int, ...]:
        return tuple(self.native // r for r in self.resolutions)


def build_pyramid(images: np.ndarray, spec: PyramidSpec) -> np.ndarray:
    """Channel-stack every scale of the image: (N, C, H, W) -> (N, K*C, H, W).

    Each scale is average-pooled to the target resolution and nearest-upsampled
    back to native size, so all scales share the native grid.
    """
    if images.ndim != 4:
        raise ValueError(f"expected N,C,H,W images, got shape {images.shape}")
    n, c, h, w = images.shape
    if h != spec.native or w != spec.native:
        raise ValueError(f"image side {h}x{w} does not match pyramid native side {spec.native}")
    scales = []
    for k in spec.factors:
        if k == 1:
            scales.append(images)
        else:
            scales.append(upsample_nearest(avgpool2d(images, k), k))
    return np.concatenate(scales, axis=1)


@dataclass(frozen=True)
class EotTransform:
    """Integer pixel shift; dx moves columns, dy moves rows; zero fill."""

    dx: int
    dy: int

    def apply(self, images: np.ndarray) -> np.ndarray:
        return shift2d(images, self.dx, self.dy)

    def adjoint(self, grads: np.ndarray) -> np.ndarray:
        """Transpose of apply; for a zero-fill shift that is the opposite shift."""
        return shift2d(grads, -self.dx, -self.dy)

    @property
    def identity(self) -> bool:
        return self.dx == 0 and self.dy == 0


def sample_eot(rng: np.random.Generator, s: int) -> EotTransform:
    """Uniform draw over the (2s+1)^2 integer shift grid; dx drawn before dy."""
    if s < 0:
        raise ValueError(f"max shift must be >= 0, got {s}")
    dx = int(rng.integers(-s, s + 1))
    dy = int(rng.integers(-s, s + 1))
    return EotTransform(dx, dy)


def apply_eot(t: EotTransform, images: np.ndarray) -> np.ndarray:
    return t.apply(images)
