"""Episodic few-shot training, full-volume inference, and the supervised baseline.

Each training step draws a fresh support/query episode, pools prototypes
from the support features, scores the query features by scaled cosine
similarity, and descends the hybrid loss with SGD + momentum under a
polynomial learning-rate decay. Validation Dice is monitored for early
stopping; the best-scoring parameters are returned.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy import ndimage

from .encoder import Encoder, EncoderConfig, build_encoder
from .episodes import ClassFraming, Episode, EpisodeConfig, PatchDataset, build_episode
from .loss_metrics import LossConfig, dice_coefficient, dice_loss, hybrid_loss
from .patching import Patch, extract_tiles, reconstruct, tile_non_overlapping
from .prototype_head import (
    DEFAULT_ALPHA,
    Prototype,
    background_prototype,
    masked_average_pool,
    predict,
    similarity,
)
from .volume import LabelMask, Volume3D


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5  # per axis
    blur_prob: float = 0.15
    blur_sigma_range: tuple[float, float] = (0.3, 0.8)
    noise_prob: float = 0.15
    noise_sigma: float = 0.05
    contrast_prob: float = 0.15
    contrast_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        for p in (self.flip_prob, self.blur_prob, self.noise_prob, self.contrast_prob):
            if not 0.0 <= p <= 1.0:
                raise TrainingError("augmentation probabilities must be in [0, 1]")
        if self.noise_sigma < 0 or min(self.blur_sigma_range) < 0:
            raise TrainingError("sigmas must be >= 0")
        if min(self.contrast_range) <= 0:
            raise TrainingError("contrast range must be positive")


@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 20000
    initial_lr: float = 0.01
    momentum: float = 0.99
    poly_exponent: float = 0.9
    early_stop_patience: int = 1000
    val_interval: int = 250
    alpha: float = DEFAULT_ALPHA
    stop_prototype_gradient: bool = False
    episode: EpisodeConfig = EpisodeConfig()
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()
    encoder: EncoderConfig = EncoderConfig()
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise TrainingError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError("momentum must be in [0, 1)")
        if self.early_stop_patience < 1 or self.val_interval < 1:
            raise TrainingError("patience and val_interval must be >= 1")


@dataclass(frozen=True)
class SupervisedConfig:
    max_iterations: int = 2000
    lr: float = 1e-4
    t_max: int = 5
    eta_min: float = 1e-6
    batch_size: int = 4
    early_stop_patience: int = 1000
    val_interval: int = 250
    augment: AugmentConfig = AugmentConfig()
    encoder: EncoderConfig = EncoderConfig(levels=4, feature_dim=2)
    seed: int = 0


@dataclass
class Checkpoint:
    """Best-validation encoder state plus enough context to run inference."""

    encoder: Encoder
    iteration: int
    best_val_dc: float
    alpha: float
    history: list[dict] = field(default_factory=list)


def poly_lr(t: int, cfg: TrainConfig) -> float:
    """lr(t) = lr0 * (1 - t/max_iter)^exponent; monotone, lr(max_iter) = 0."""
    return cfg.initial_lr * (1.0 - t / cfg.max_iterations) ** cfg.poly_exponent


# ---------------------------------------------------------------------------
# Augmentation


def augment(patch: Patch, cfg: AugmentConfig, rng: np.random.Generator) -> Patch:
    """Spatial transforms (flips) act on image and mask; intensity
    transforms act on the image only."""
    image = patch.image.copy()
    mask = None if patch.mask is None else patch.mask.copy()
    for ax in range(3):
        if rng.random() < cfg.flip_prob:
            image = np.flip(image, axis=ax)
            if mask is not None:
                mask = np.flip(mask, axis=ax)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        image = ndimage.gaussian_filter(image.astype(np.float64), sigma=sigma)
    if rng.random() < cfg.noise_prob:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    if rng.random() < cfg.contrast_prob:
        image = image * rng.uniform(*cfg.contrast_range)
    return replace(
        patch,
        image=np.ascontiguousarray(image, dtype=np.float32),
        mask=None if mask is None else np.ascontiguousarray(mask),
    )


# ---------------------------------------------------------------------------
# Prototype computation shared by training and inference


def _to_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


def episode_prototypes(
    encoder: Encoder,
    support: tuple[tuple[Patch, ...], ...],
    alpha: float,
    stop_gradient: bool = False,
) -> list[Prototype]:
    """Background prototype plus one foreground prototype per episode class."""
    all_feats: list[torch.Tensor] = []
    all_masks: list[np.ndarray] = []
    per_class: list[tuple[list[torch.Tensor], list[np.ndarray]]] = []
    for group in support:
        feats, masks = [], []
        for p in group:
            f = encoder(_to_tensor(p.image))[0]
            if stop_gradient:
                f = f.detach()
            feats.append(f)
            masks.append(p.mask)
        per_class.append((feats, masks))
        all_feats.extend(feats)
        all_masks.extend(masks)
    protos = [background_prototype(all_feats, all_masks, class_id=1)]
    for ci, (feats, masks) in enumerate(per_class, start=1):
        fg = masked_average_pool(feats, masks, class_id=1)
        protos.append(replace(fg, class_id=ci))
    return protos


def _episode_loss(
    encoder: Encoder, episode: Episode, cfg: TrainConfig
) -> torch.Tensor:
    protos = episode_prototypes(
        encoder, episode.support, cfg.alpha, cfg.stop_prototype_gradient
    )
    losses = []
    for patch, cls in zip(episode.query, episode.query_class):
        feat = encoder(_to_tensor(patch.image))[0]
        sim = similarity(feat, protos, cfg.alpha)
        gt = torch.as_tensor((patch.mask > 0).astype(np.int64) * cls)
        losses.append(hybrid_loss(sim.scores, gt, cfg.loss))
    return torch.stack(losses).mean()


def _augment_episode(
    episode: Episode, cfg: AugmentConfig, rng: np.random.Generator
) -> Episode:
    support = tuple(
        tuple(augment(p, cfg, rng) for p in group) for group in episode.support
    )
    query = tuple(augment(p, cfg, rng) for p in episode.query)
    return Episode(support=support, query=query, query_class=episode.query_class)


# ---------------------------------------------------------------------------
# Validation


def _fixed_support(
    train_ds: PatchDataset, cfg: TrainConfig
) -> tuple[tuple[Patch, ...], ...]:
    """Deterministic support drawn from the training pool for validation/eval."""
    rng = np.random.default_rng(cfg.seed + 7919)
    ep_cfg = replace(cfg.episode, n_queries=1)
    episode = build_episode(train_ds, ep_cfg, rng)
    return episode.support


@torch.no_grad()
def validate_patch_dc(
    encoder: Encoder,
    support: tuple[tuple[Patch, ...], ...],
    val_patches: list[Patch],
    alpha: float,
) -> float:
    """Mean patch-level Dice on the validation pool (binary: any foreground)."""
    encoder.eval()
    protos = episode_prototypes(encoder, support, alpha, stop_gradient=True)
    scores = []
    for p in val_patches:
        feat = encoder(_to_tensor(p.image))[0]
        pred = predict(similarity(feat, protos, alpha))
        scores.append(dice_coefficient(pred.hard_mask > 0, p.mask > 0))
    encoder.train()
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Few-shot training loop


def train_fewshot(
    train_ds: PatchDataset, val_ds: PatchDataset, cfg: TrainConfig
) -> Checkpoint:
    """Episodic training with SGD + momentum, polynomial lr decay, and
    early stopping on validation Dice."""
    torch.manual_seed(cfg.seed)
    encoder = build_encoder(cfg.encoder)
    encoder.train()
    opt = torch.optim.SGD(
        encoder.parameters(), lr=cfg.initial_lr, momentum=cfg.momentum
    )
    rng = np.random.default_rng(cfg.seed)
    support = _fixed_support(train_ds, cfg)
    val_patches = val_ds.all_patches()

    best_state = copy.deepcopy(encoder.state_dict())
    best_dc = -1.0
    best_iter = 0
    history: list[dict] = []

    for t in range(cfg.max_iterations):
        lr = poly_lr(t, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        episode = build_episode(train_ds, cfg.episode, rng)
        episode = _augment_episode(episode, cfg.augment, rng)
        loss = _episode_loss(encoder, episode, cfg)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at iteration {t}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {"iter": t, "loss": float(loss.item()), "lr": lr}

        if (t + 1) % cfg.val_interval == 0 or t + 1 == cfg.max_iterations:
            val_dc = validate_patch_dc(encoder, support, val_patches, cfg.alpha)
            record["val_dc"] = val_dc
            if val_dc > best_dc:
                best_dc = val_dc
                best_iter = t
                best_state = copy.deepcopy(encoder.state_dict())
        history.append(record)
        if best_dc >= 0 and t - best_iter >= cfg.early_stop_patience:
            break

    encoder.load_state_dict(best_state)
    encoder.eval()
    return Checkpoint(
        encoder=encoder,
        iteration=best_iter,
        best_val_dc=best_dc,
        alpha=cfg.alpha,
        history=history,
    )


# ---------------------------------------------------------------------------
# Full-volume inference


@torch.no_grad()
def segment_volume(
    encoder: Encoder,
    support: tuple[tuple[Patch, ...], ...],
    vol: Volume3D,
    tiling_mode: str = "clamped",
    alpha: float = DEFAULT_ALPHA,
) -> LabelMask:
    """Tile the volume, segment each patch against the support prototypes
    (computed once), and reconstruct the full-size mask.

    The prediction is collapsed to binary foreground: any foreground class
    maps to label 1.
    """
    encoder.eval()
    patch_size = support[0][0].size
    protos = episode_prototypes(encoder, support, alpha, stop_gradient=True)
    plan = tile_non_overlapping(vol.dims, patch_size, mode=tiling_mode)
    patch_preds = []
    for tile in extract_tiles(vol, plan):
        feat = encoder(_to_tensor(tile.image))[0]
        pred = predict(similarity(feat, protos, alpha))
        patch_preds.append(LabelMask(data=(pred.hard_mask > 0).astype(np.int32)))
    return reconstruct(plan, patch_preds)


# ---------------------------------------------------------------------------
# Supervised baseline


@torch.no_grad()
def _supervised_val_dc(net: Encoder, val_patches: list[Patch]) -> float:
    net.eval()
    scores = []
    for p in val_patches:
        logits = net(_to_tensor(p.image))[0]
        pred = logits.argmax(dim=0).cpu().numpy()
        scores.append(dice_coefficient(pred > 0, p.mask > 0))
    net.train()
    return float(np.mean(scores))


def train_supervised_baseline(
    train_ds: PatchDataset, val_ds: PatchDataset, cfg: SupervisedConfig
) -> Checkpoint:
    """Per-patch Dice-loss training of a deeper segmentation net (Adam +
    cosine-annealing lr), same augmentation pipeline as the few-shot loop."""
    torch.manual_seed(cfg.seed)
    net = build_encoder(cfg.encoder)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.t_max, eta_min=cfg.eta_min
    )
    rng = np.random.default_rng(cfg.seed)
    pool = train_ds.all_patches()
    if not pool:
        raise TrainingError("empty training pool")
    val_patches = val_ds.all_patches()
    iters_per_epoch = max(1, len(pool) // cfg.batch_size)

    best_state = copy.deepcopy(net.state_dict())
    best_dc = -1.0
    best_iter = 0
    history: list[dict] = []

    for t in range(cfg.max_iterations):
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        batch = [augment(pool[i], cfg.augment, rng) for i in idx]
        losses = []
        for p in batch:
            logits = net(_to_tensor(p.image))[0]
            gt = torch.as_tensor((p.mask > 0).astype(np.int64))
            losses.append(dice_loss(logits, gt))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {t}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (t + 1) % iters_per_epoch == 0:
            sched.step()
        record = {"iter": t, "loss": float(loss.item()), "lr": opt.param_groups[0]["lr"]}

        if (t + 1) % cfg.val_interval == 0 or t + 1 == cfg.max_iterations:
            val_dc = _supervised_val_dc(net, val_patches)
            record["val_dc"] = val_dc
            if val_dc > best_dc:
                best_dc = val_dc
                best_iter = t
                best_state = copy.deepcopy(net.state_dict())
        history.append(record)
        if best_dc >= 0 and t - best_iter >= cfg.early_stop_patience:
            break

    net.load_state_dict(best_state)
    net.eval()
    return Checkpoint(
        encoder=net, iteration=best_iter, best_val_dc=best_dc, alpha=0.0, history=history
    )


# ---------------------------------------------------------------------------
# Cross-validation


def _patch_pool(
    volumes: dict, subjects: list[str], spec, seed: int
) -> PatchDataset:
    import zlib

    from .patching import sample_vessel_patches

    by_subject = {}
    for s in subjects:
        vol, mask = volumes[s]
        rng = np.random.default_rng((seed, zlib.crc32(s.encode())))
        by_subject[s] = sample_vessel_patches(
            vol, mask, spec, rng, subject_id=s, seed=seed
        )
    return PatchDataset(by_subject=by_subject)


def cross_validate(
    volumes: dict[str, tuple[Volume3D, LabelMask]],
    folds: list[tuple[list[str], list[str]]],
    patch_spec,
    cfg: TrainConfig,
    tiling_mode: str = "clamped",
):
    """Train per fold and evaluate volume-level metrics on the fold's test
    subjects; every subject is segmented exactly once across folds.

    Returns (per-fold reports, aggregate report over all subjects).
    """
    from .loss_metrics import aggregate, all_metrics

    fold_reports = []
    case_ids: list[str] = []
    case_metrics: list[dict] = []
    for fi, (train_subjects, test_subjects) in enumerate(folds):
        train_ds = _patch_pool(volumes, train_subjects, patch_spec, cfg.seed)
        ckpt = train_fewshot(train_ds, train_ds, cfg)
        support = _fixed_support(train_ds, cfg)
        ids, mets = [], []
        for s in test_subjects:
            vol, gt = volumes[s]
            pred = segment_volume(ckpt.encoder, support, vol, tiling_mode, cfg.alpha)
            ids.append(s)
            mets.append(all_metrics(pred.data, gt.data))
        fold_reports.append(aggregate(ids, mets))
        case_ids.extend(ids)
        case_metrics.extend(mets)
    return fold_reports, aggregate(case_ids, case_metrics)


@torch.no_grad()
def segment_volume_supervised(
    net: Encoder, vol: Volume3D, patch_size, tiling_mode: str = "clamped"
) -> LabelMask:
    """Full-volume inference for the supervised baseline (argmax over logits)."""
    net.eval()
    plan = tile_non_overlapping(vol.dims, tuple(patch_size), mode=tiling_mode)
    preds = []
    for tile in extract_tiles(vol, plan):
        logits = net(_to_tensor(tile.image))[0]
        pred = logits.argmax(dim=0).cpu().numpy()
        preds.append(LabelMask(data=(pred > 0).astype(np.int32)))
    return reconstruct(plan, preds)
