"""Synthetic vascular-like phantoms: bright tubes on a noisy background.

Each tube is swept along a random-walk centerline with bounded curvature
(the walk reflects off the volume boundary), dilated to a per-tube radius.
The intensity volume is a background level plus a contrast margin on tube
voxels, lightly smoothed, with additive Gaussian noise. The mask is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volume import LabelMask, Volume3D


class PhantomError(Exception):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 32)
    n_tubes: int = 3
    radius_range: tuple[float, float] = (1.0, 2.0)
    contrast: float = 3.0
    noise_sigma: float = 0.05
    step_bound: float = 0.5  # max direction perturbation per centerline step
    seed: int = 0

    def __post_init__(self):
        if self.n_tubes < 0:
            raise PhantomError("n_tubes must be >= 0")
        if self.radius_range[0] < 1 or self.radius_range[1] > min(self.dims) / 4:
            raise PhantomError(
                f"radii must lie in [1, min(dims)/4], got {self.radius_range}"
            )
        if self.contrast <= 1:
            raise PhantomError("contrast (tube-vs-background ratio) must be > 1")
        if self.noise_sigma < 0 or self.step_bound < 0:
            raise PhantomError("noise_sigma and step_bound must be >= 0")


def _centerline(dims, rng: np.random.Generator, step_bound: float) -> np.ndarray:
    """Random-walk polyline through the volume; reflects at the boundary."""
    lo = np.zeros(3)
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    pos = rng.uniform(0.15, 0.85, size=3) * hi
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    n_steps = int(1.5 * max(dims))
    points = [pos.copy()]
    for _ in range(n_steps):
        direction = direction + rng.uniform(-step_bound, step_bound, size=3)
        direction /= np.linalg.norm(direction)
        pos = pos + direction
        for ax in range(3):
            if pos[ax] < lo[ax] or pos[ax] > hi[ax]:
                direction[ax] = -direction[ax]
                pos[ax] = np.clip(pos[ax], lo[ax], hi[ax])
        points.append(pos.copy())
    return np.array(points)


def _stamp_tube(mask: np.ndarray, points: np.ndarray, radius: float) -> None:
    r = int(np.ceil(radius))
    dims = mask.shape
    offsets = np.stack(
        np.meshgrid(*[np.arange(-r, r + 1)] * 3, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    ball = offsets[np.linalg.norm(offsets, axis=1) <= radius]
    for p in points:
        vox = ball + np.round(p).astype(int)
        ok = np.all((vox >= 0) & (vox < dims), axis=1)
        v = vox[ok]
        mask[v[:, 0], v[:, 1], v[:, 2]] = 1


def generate(cfg: PhantomConfig) -> tuple[Volume3D, LabelMask]:
    """Generate one phantom volume and its exact ground-truth mask."""
    rng = np.random.default_rng(cfg.seed)
    mask = np.zeros(cfg.dims, dtype=np.int32)
    for _ in range(cfg.n_tubes):
        radius = rng.uniform(*cfg.radius_range)
        points = _centerline(cfg.dims, rng, cfg.step_bound)
        _stamp_tube(mask, points, radius)

    background = 1.0
    intensity = background + (cfg.contrast - 1.0) * background * (mask > 0)
    intensity = ndimage.gaussian_filter(intensity.astype(np.float64), sigma=0.5)
    intensity = intensity + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)
    return (
        Volume3D(data=intensity.astype(np.float32), spacing=(1.0, 1.0, 1.0)),
        LabelMask(data=mask),
    )


def generate_dataset(
    n_subjects: int, base: PhantomConfig = PhantomConfig(), seed: int = 0
) -> dict[str, tuple[Volume3D, LabelMask]]:
    """A small cohort with per-subject jitter in contrast, noise and tube count."""
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n_subjects):
        cfg = replace(
            base,
            n_tubes=max(1, base.n_tubes + int(rng.integers(-1, 2))),
            contrast=float(base.contrast * rng.uniform(0.8, 1.2)),
            noise_sigma=float(base.noise_sigma * rng.uniform(0.8, 1.2)),
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        out[f"subj{i:03d}"] = generate(cfg)
    return out
