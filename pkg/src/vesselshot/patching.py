"""Patch sampling for training, volume tiling for inference, reconstruction.

Tiling supports two edge modes:
  * "clamped": the final origin per axis is clamped to dim - size, so every
    voxel is covered (edge patches may overlap their neighbor; reconstruction
    resolves overlaps last-writer-wins in plan order);
  * "drop-partial": trailing regions that do not fit a whole patch are
    dropped, leaving border voxels unsegmented.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import LabelMask, Volume3D, save_volume, load_volume, load_mask

TILING_MODES = ("clamped", "drop-partial")


class PatchingError(Exception):
    pass


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int]
    per_volume_count: int = 15
    min_foreground_voxels: int = 30

    def __post_init__(self):
        if min(self.size) < 1:
            raise PatchingError(f"patch size must be >= 1, got {self.size}")
        if self.per_volume_count < 1 or self.min_foreground_voxels < 1:
            raise PatchingError("per_volume_count and min_foreground_voxels must be >= 1")


@dataclass(frozen=True)
class Patch:
    """A sub-grid of a parent volume, optionally with its mask sub-grid."""

    origin: tuple[int, int, int]
    image: np.ndarray
    mask: np.ndarray | None = None
    subject_id: str = ""
    seed: int = 0

    @property
    def size(self) -> tuple[int, int, int]:
        return self.image.shape

    @property
    def identity(self) -> tuple:
        """Exact patch identity for support/query disjointness checks."""
        return (self.subject_id, self.origin, self.seed)


@dataclass(frozen=True)
class TilingPlan:
    dims: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]
    mode: str = "clamped"

    def __len__(self) -> int:
        return len(self.origins)


def _crop(arr: np.ndarray, origin, size) -> np.ndarray:
    ox, oy, oz = origin
    px, py, pz = size
    return arr[ox : ox + px, oy : oy + py, oz : oz + pz]


def sample_vessel_patches(
    vol: Volume3D,
    mask: LabelMask,
    spec: PatchSpec,
    rng: np.random.Generator,
    subject_id: str = "",
    seed: int = 0,
    max_tries: int = 100,
) -> list[Patch]:
    """Randomly sample patches that each contain enough foreground voxels.

    Rejection sampling with a bounded retry cap per patch; after the cap,
    falls back to a patch centered on a random foreground voxel (clamped
    into bounds), so sampling always terminates.
    """
    dims = vol.dims
    if mask.dims != dims:
        raise PatchingError(f"mask dims {mask.dims} != volume dims {dims}")
    if any(p > d for p, d in zip(spec.size, dims)):
        raise PatchingError(f"patch size {spec.size} exceeds volume dims {dims}")
    fg = np.argwhere(mask.data > 0)
    if len(fg) == 0:
        raise PatchingError("mask has no foreground voxels")

    patches = []
    hi = [d - p for d, p in zip(dims, spec.size)]
    for idx in range(spec.per_volume_count):
        origin = None
        for _ in range(max_tries):
            cand = tuple(int(rng.integers(0, h + 1)) for h in hi)
            sub = _crop(mask.data, cand, spec.size)
            if int((sub > 0).sum()) >= spec.min_foreground_voxels:
                origin = cand
                break
        if origin is None:
            center = fg[int(rng.integers(0, len(fg)))]
            origin = tuple(
                int(np.clip(c - p // 2, 0, h)) for c, p, h in zip(center, spec.size, hi)
            )
        patches.append(
            Patch(
                origin=origin,
                image=_crop(vol.data, origin, spec.size).copy(),
                mask=_crop(mask.data, origin, spec.size).copy(),
                subject_id=subject_id,
                seed=seed + idx,
            )
        )
    return patches


def tile_non_overlapping(
    dims: tuple[int, int, int], patch_size: tuple[int, int, int], mode: str = "clamped"
) -> TilingPlan:
    """Plan a non-overlapping tiling of a volume into patches."""
    if mode not in TILING_MODES:
        raise PatchingError(f"unknown tiling mode {mode!r}")
    if any(p > d for p, d in zip(patch_size, dims)):
        raise PatchingError(f"patch size {patch_size} exceeds dims {dims}")
    per_axis = []
    for d, p in zip(dims, patch_size):
        starts = list(range(0, d, p))
        if mode == "clamped":
            starts = [min(o, d - p) for o in starts]
        else:
            starts = [o for o in starts if o + p <= d]
        per_axis.append(starts)
    origins = tuple(
        (x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]
    )
    return TilingPlan(dims=tuple(dims), patch_size=tuple(patch_size), origins=origins, mode=mode)


def extract_tiles(vol: Volume3D, plan: TilingPlan) -> list[Patch]:
    return [
        Patch(origin=o, image=_crop(vol.data, o, plan.patch_size).copy())
        for o in plan.origins
    ]


def reconstruct(plan: TilingPlan, patch_masks: list[LabelMask]) -> LabelMask:
    """Reassemble patch predictions into a full-size mask.

    Every voxel takes its value from the last plan entry covering it;
    voxels not covered by any patch (drop-partial mode) stay 0.
    """
    if len(patch_masks) != len(plan):
        raise PatchingError(
            f"got {len(patch_masks)} patch masks for a plan of {len(plan)}"
        )
    out = np.zeros(plan.dims, dtype=np.int32)
    px, py, pz = plan.patch_size
    for origin, pm in zip(plan.origins, patch_masks):
        if pm.dims != plan.patch_size:
            raise PatchingError(f"patch mask dims {pm.dims} != plan size {plan.patch_size}")
        ox, oy, oz = origin
        out[ox : ox + px, oy : oy + py, oz : oz + pz] = pm.data
    return LabelMask(data=out)


# ---------------------------------------------------------------------------
# On-disk patch cache


def save_patch_cache(out_dir, patches: list[Patch], spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write patches in the raw volume format plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(patches):
        stem = f"patch_{i:05d}"
        save_volume(Volume3D(data=p.image, spacing=spacing), out_dir / f"{stem}.img.raw")
        entry = {
            "subject_id": p.subject_id,
            "origin": list(p.origin),
            "seed": p.seed,
            "image": f"{stem}.img.raw",
        }
        if p.mask is not None:
            save_volume(LabelMask(data=p.mask), out_dir / f"{stem}.msk.raw")
            entry["mask"] = f"{stem}.msk.raw"
        entries.append(entry)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"patches": entries}, indent=2) + "\n")
    return manifest


def load_patch_cache(cache_dir) -> list[Patch]:
    cache_dir = Path(cache_dir)
    manifest = json.loads((cache_dir / "manifest.json").read_text())
    patches = []
    for entry in manifest["patches"]:
        image = load_volume(cache_dir / entry["image"]).data
        mask = load_mask(cache_dir / entry["mask"]).data if "mask" in entry else None
        patches.append(
            Patch(
                origin=tuple(entry["origin"]),
                image=image,
                mask=mask,
                subject_id=entry["subject_id"],
                seed=entry["seed"],
            )
        )
    return patches
