"""Class prototypes by masked average pooling, cosine scoring, prediction.

The prototype of a class is the mean, over support images, of the mean
feature vector across that class's voxels; support images without any
voxel of the class are dropped from the outer average. Query voxels are
scored against each prototype by scaled cosine similarity and turned into
per-class probabilities with a voxelwise softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

COSINE_EPS = 1e-8
DEFAULT_ALPHA = 20.0


class PrototypeError(Exception):
    pass


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: torch.Tensor  # shape (D,)
    support_count: int

    def __post_init__(self):
        if self.support_count < 1:
            raise PrototypeError("prototype needs at least one support image")
        vec = self.vector.detach()
        if not torch.isfinite(vec).all():
            raise PrototypeError("prototype vector is not finite")
        if float(vec.norm()) == 0.0:
            raise PrototypeError("zero-norm prototype")


@dataclass(frozen=True)
class SimilarityMap:
    """Scaled cosine similarities, one grid per prototype, stacked (C, X, Y, Z)."""

    scores: torch.Tensor
    class_ids: tuple[int, ...]
    alpha: float


@dataclass(frozen=True)
class Prediction:
    probabilities: torch.Tensor  # (C, X, Y, Z), voxelwise sum 1
    hard_mask: np.ndarray  # (X, Y, Z) int, values from class_ids
    class_ids: tuple[int, ...]


def _pool(
    features: Sequence[torch.Tensor],
    masks: Sequence[np.ndarray],
    class_id: int,
    invert: bool,
) -> Prototype:
    if len(features) != len(masks) or not features:
        raise PrototypeError("features and masks must be nonempty and the same length")
    per_image = []
    for feat, mask in zip(features, masks):
        if feat.shape[1:] != tuple(np.shape(mask)):
            raise PrototypeError(
                f"feature grid {tuple(feat.shape[1:])} does not match mask {np.shape(mask)}"
            )
        ind = np.asarray(mask) != class_id if invert else np.asarray(mask) == class_id
        n = int(ind.sum())
        if n == 0:
            continue  # zero-voxel support images are excluded from the outer mean
        sel = torch.as_tensor(ind, device=feat.device)
        per_image.append(feat[:, sel].mean(dim=1))
    if not per_image:
        which = "background" if invert else f"class {class_id}"
        raise PrototypeError(f"no {which} voxels in any support mask")
    vector = torch.stack(per_image).mean(dim=0)
    return Prototype(class_id=0 if invert else class_id, vector=vector, support_count=len(per_image))


def masked_average_pool(
    features: Sequence[torch.Tensor], masks: Sequence[np.ndarray], class_id: int
) -> Prototype:
    """Foreground prototype: mean feature over the class's voxels, then over images."""
    return _pool(features, masks, class_id, invert=False)


def background_prototype(
    features: Sequence[torch.Tensor], masks: Sequence[np.ndarray], class_id: int
) -> Prototype:
    """Same pooling with the complement indicator (mask != class)."""
    return _pool(features, masks, class_id, invert=True)


def similarity(
    query: torch.Tensor, prototypes: Sequence[Prototype], alpha: float = DEFAULT_ALPHA
) -> SimilarityMap:
    """Scaled cosine similarity of every query voxel against each prototype."""
    if alpha <= 0:
        raise PrototypeError("alpha must be positive")
    d = query.shape[0]
    qnorm = query.norm(dim=0)  # (X, Y, Z)
    scores = []
    for proto in prototypes:
        if proto.vector.shape[0] != d:
            raise PrototypeError(
                f"prototype dim {proto.vector.shape[0]} != feature dim {d}"
            )
        dot = torch.einsum("dxyz,d->xyz", query, proto.vector.to(query.dtype))
        scores.append(alpha * dot / (qnorm * proto.vector.norm() + COSINE_EPS))
    return SimilarityMap(
        scores=torch.stack(scores),
        class_ids=tuple(p.class_id for p in prototypes),
        alpha=alpha,
    )


def predict(sim: SimilarityMap) -> Prediction:
    """Voxelwise softmax over scaled similarities; argmax with ties toward
    the lower class index."""
    if sim.scores.shape[0] < 2:
        raise PrototypeError("prediction needs at least two classes")
    probs = torch.softmax(sim.scores, dim=0)
    # np.argmax returns the first maximum, i.e. the lower class position
    hard_pos = np.argmax(probs.detach().cpu().numpy(), axis=0)
    ids = np.asarray(sim.class_ids, dtype=np.int32)
    return Prediction(probabilities=probs, hard_mask=ids[hard_pos], class_ids=sim.class_ids)


# ---------------------------------------------------------------------------
# Structured-text export for inspection and regression tests


def export_prototypes(path, prototypes: Sequence[Prototype]) -> None:
    lines = ["# class_id support_count values..."]
    for p in prototypes:
        vals = " ".join(f"{v:.9e}" for v in p.vector.detach().cpu().numpy())
        lines.append(f"{p.class_id} {p.support_count} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_prototypes(path) -> list[Prototype]:
    protos = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        protos.append(
            Prototype(
                class_id=int(fields[0]),
                support_count=int(fields[1]),
                vector=torch.tensor([float(v) for v in fields[2:]], dtype=torch.float64),
            )
        )
    return protos
