"""Command-line orchestration.

Subcommands: preprocess | phantom | train | evaluate | crossval | segment.
Every command is reproducible from its config file and seed alone; resolved
configs are serialized into the output directory for provenance.

Exit codes: 0 success, 2 bad usage/config, 3 missing input,
4 checkpoint mismatch, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import phantom as phantom_mod
from .encoder import CheckpointError, EncoderConfig, load_checkpoint, save_checkpoint
from .episodes import ClassFraming, EpisodeConfig, PatchDataset, make_folds, split_subjects
from .loss_metrics import LossConfig, aggregate, all_metrics, format_table
from .patching import (
    PatchSpec,
    load_patch_cache,
    sample_vessel_patches,
    save_patch_cache,
)
from .training import (
    AugmentConfig,
    SupervisedConfig,
    TrainConfig,
    _fixed_support,
    _patch_pool,
    cross_validate,
    segment_volume,
    train_fewshot,
    train_supervised_baseline,
)
from .volume import (
    AffineTransform,
    LabelMask,
    Volume3D,
    VolumeError,
    apply_affine,
    load_mask,
    load_volume,
    normalize_intensity,
    resample_isotropic,
    save_volume,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Config plumbing


def _from_dict(cls, d: dict):
    if d is None:
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k not in fields:
            raise CliError(f"unknown {cls.__name__} key: {k}", EXIT_CONFIG)
        if k == "framing":
            v = ClassFraming(v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def load_train_config(path: str | None, overrides: argparse.Namespace) -> tuple[TrainConfig, PatchSpec, dict]:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"no such config file: {p}", EXIT_MISSING)
        raw = yaml.safe_load(p.read_text()) or {}
    try:
        cfg = TrainConfig(
            **{
                k: v
                for k, v in raw.get("train", {}).items()
                if k not in ("episode", "loss", "augment", "encoder")
            },
            episode=_from_dict(EpisodeConfig, raw.get("episode")),
            loss=_from_dict(LossConfig, raw.get("loss")),
            augment=_from_dict(AugmentConfig, raw.get("augment")),
            encoder=_from_dict(EncoderConfig, raw.get("encoder")),
        )
        spec = _from_dict(PatchSpec, raw.get("patch") or {"size": [16, 16, 8]})
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config: {exc}", EXIT_CONFIG) from exc
    if overrides.seed is not None:
        cfg = replace(cfg, seed=overrides.seed, episode=replace(cfg.episode, seed=overrides.seed))
    if getattr(overrides, "ways", None) is not None:
        framing = (
            ClassFraming.SUBJECT_AS_CLASS if overrides.ways > 1 else cfg.episode.framing
        )
        cfg = replace(cfg, episode=replace(cfg.episode, c_ways=overrides.ways, framing=framing))
    if getattr(overrides, "shots", None) is not None:
        cfg = replace(cfg, episode=replace(cfg.episode, k_shots=overrides.shots))
    if getattr(overrides, "patch_size", None) is not None:
        spec = replace(spec, size=tuple(overrides.patch_size))
    return cfg, spec, raw


def _dump_config(out_dir: Path, cfg: TrainConfig, spec: PatchSpec) -> None:
    resolved = {
        "train": {
            k: v
            for k, v in asdict(cfg).items()
            if k not in ("episode", "loss", "augment", "encoder")
        },
        "episode": {**asdict(cfg.episode), "framing": cfg.episode.framing.value},
        "loss": asdict(cfg.loss),
        "augment": asdict(cfg.augment),
        "encoder": asdict(cfg.encoder),
        "patch": asdict(spec),
    }
    (out_dir / "config.resolved.yaml").write_text(yaml.safe_dump(resolved))


# ---------------------------------------------------------------------------
# Dataset directory layout


def write_dataset(out_dir: Path, subjects: dict[str, tuple[Volume3D, LabelMask]], meta: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, (vol, mask) in subjects.items():
        save_volume(vol, out_dir / f"{sid}.img.raw")
        save_volume(mask, out_dir / f"{sid}.msk.raw")
        entries.append({"id": sid, "image": f"{sid}.img.raw", "mask": f"{sid}.msk.raw"})
    manifest = {"subjects": entries, **meta}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_dataset(data_dir: Path) -> dict[str, tuple[Volume3D, LabelMask]]:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"no dataset manifest in {data_dir}", EXIT_MISSING)
    manifest = json.loads(manifest_path.read_text())
    out = {}
    for entry in manifest["subjects"]:
        vol = load_volume(data_dir / entry["image"])
        mask = load_mask(data_dir / entry["mask"])
        out[entry["id"]] = (vol, mask)
    return out


def _support_from_cache(support_dir: Path):
    if not (Path(support_dir) / "manifest.json").exists():
        raise CliError(f"no support patch cache at {support_dir}", EXIT_MISSING)
    patches = load_patch_cache(support_dir)
    by_class: dict[int, list] = {}
    for p in patches:
        by_class.setdefault(int(p.seed) // 10**6, []).append(p)
    # support groups were cached flat with a class tag folded into seed
    return tuple(tuple(v) for _, v in sorted(by_class.items()))


def _save_support(support, out_dir: Path) -> None:
    flat = []
    for ci, group in enumerate(support):
        for p in group:
            flat.append(replace(p, seed=ci * 10**6 + (p.seed % 10**6)))
    save_patch_cache(out_dir, flat)


# ---------------------------------------------------------------------------
# Commands


def cmd_phantom(args) -> int:
    base = _from_dict(phantom_mod.PhantomConfig, _load_yaml_section(args.config, "phantom"))
    subjects = phantom_mod.generate_dataset(args.n_subjects, base, seed=args.seed or 0)
    write_dataset(
        Path(args.out),
        subjects,
        {"generator": "phantom", "seed": args.seed or 0, "config": asdict(base)},
    )
    print(f"wrote {len(subjects)} phantom subject(s) to {args.out}")
    return EXIT_OK


def _load_yaml_section(path: str | None, section: str) -> dict | None:
    if not path:
        return None
    p = Path(path)
    if not p.exists():
        raise CliError(f"no such config file: {p}", EXIT_MISSING)
    return (yaml.safe_load(p.read_text()) or {}).get(section)


def cmd_preprocess(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out)
    if not in_dir.is_dir():
        raise CliError(f"no such input directory: {in_dir}", EXIT_MISSING)
    paths = sorted(
        p
        for p in in_dir.iterdir()
        if p.name.endswith((".nii", ".nii.gz")) or p.suffix == ".raw"
    )
    paths = [p for p in paths if not p.name.endswith(".json")]
    if not paths:
        raise CliError(f"no volumes found in {in_dir}", EXIT_MISSING)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in paths:
        vol = load_volume(p)
        if args.affine_dir:
            affine_path = Path(args.affine_dir) / f"{p.name.split('.')[0]}.affine.txt"
            if affine_path.exists():
                t = AffineTransform(np.loadtxt(affine_path))
                vol = apply_affine(vol, t, vol)
        vol = resample_isotropic(vol, args.target_spacing)
        vol = normalize_intensity(vol)
        stem = p.name.split(".")[0]
        out_path = out_dir / f"{stem}.img.raw"
        save_volume(vol, out_path)
        entries.append({"id": stem, "image": out_path.name, "dims": list(vol.dims)})
    (out_dir / "manifest.json").write_text(
        json.dumps({"subjects": entries, "target_spacing": args.target_spacing}, indent=2) + "\n"
    )
    print(f"preprocessed {len(entries)} volume(s) to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, spec, _ = load_train_config(args.config, args)
    volumes = read_dataset(Path(args.data))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    subjects = sorted(volumes)
    fractions = tuple(args.split_fractions)
    train_s, val_s, test_s = split_subjects(subjects, fractions, cfg.seed)
    (out_dir / "splits.json").write_text(
        json.dumps({"train": train_s, "val": val_s, "test": test_s, "seed": cfg.seed}, indent=2) + "\n"
    )
    train_ds = _patch_pool(volumes, train_s, spec, cfg.seed)
    val_ds = _patch_pool(volumes, val_s, spec, cfg.seed + 1)

    ckpt = train_fewshot(train_ds, val_ds, cfg)
    save_checkpoint(
        out_dir / "checkpoint.pt",
        ckpt.encoder,
        extra={"iteration": ckpt.iteration, "best_val_dc": ckpt.best_val_dc, "alpha": ckpt.alpha},
    )
    with (out_dir / "train_log.jsonl").open("w") as f:
        for rec in ckpt.history:
            f.write(json.dumps(rec) + "\n")
    _save_support(_fixed_support(train_ds, cfg), out_dir / "support")
    _dump_config(out_dir, cfg, spec)
    print(f"best val DC {ckpt.best_val_dc:.4f} at iteration {ckpt.iteration}")
    return EXIT_OK


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        code = EXIT_MISSING if "no such" in str(exc) else EXIT_CHECKPOINT
        raise CliError(str(exc), code) from exc


def cmd_evaluate(args) -> int:
    encoder, extra = _load_ckpt(args.checkpoint)
    support = _support_from_cache(Path(args.support))
    volumes = read_dataset(Path(args.data))
    subjects = args.subjects or sorted(volumes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids, mets = [], []
    for s in subjects:
        if s not in volumes:
            raise CliError(f"subject {s} not in dataset", EXIT_MISSING)
        vol, gt = volumes[s]
        pred = segment_volume(
            encoder, support, vol, args.tiling, extra.get("alpha", 20.0)
        )
        ids.append(s)
        mets.append(all_metrics(pred.data, gt.data))
    report = aggregate(ids, mets)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    table = format_table([("evaluation", report)])
    (out_dir / "metrics.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg, spec, _ = load_train_config(args.config, args)
    volumes = read_dataset(Path(args.data))
    folds = make_folds(sorted(volumes), args.k, cfg.seed)
    fold_reports, overall = cross_validate(volumes, folds, spec, cfg, args.tiling)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, rep in enumerate(fold_reports):
        (out_dir / f"fold{i}.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    (out_dir / "aggregate.json").write_text(json.dumps(overall.to_dict(), indent=2) + "\n")
    rows = [(f"fold {i}", rep) for i, rep in enumerate(fold_reports)]
    rows.append(("aggregate", overall))
    table = format_table(rows) + "\naggregate: " + overall.format_pm()
    (out_dir / "report.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# overlap mask coding for prediction-vs-ground-truth export
OVERLAP_PRED_ONLY = 1
OVERLAP_GT_ONLY = 2
OVERLAP_BOTH = 3


def cmd_segment(args) -> int:
    encoder, extra = _load_ckpt(args.checkpoint)
    support = _support_from_cache(Path(args.support))
    vol_path = Path(args.volume)
    if not vol_path.exists():
        raise CliError(f"no such volume: {vol_path}", EXIT_MISSING)
    vol = load_volume(vol_path)
    pred = segment_volume(encoder, support, vol, args.tiling, extra.get("alpha", 20.0))
    save_volume(pred, args.out)
    if args.gt:
        gt = load_mask(args.gt)
        p = pred.data > 0
        g = gt.data > 0
        overlap = np.zeros(pred.dims, dtype=np.int32)
        overlap[p & ~g] = OVERLAP_PRED_ONLY
        overlap[~p & g] = OVERLAP_GT_ONLY
        overlap[p & g] = OVERLAP_BOTH
        save_volume(LabelMask(data=overlap), args.overlap_out or f"{args.out}.overlap.raw")
    print(f"wrote segmentation to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p, out_required=True):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=out_required, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesselshot")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample and normalize volumes")
    p.add_argument("in_dir")
    _add_common(p)
    p.add_argument("--target-spacing", type=float, default=1.0)
    p.add_argument("--affine-dir", help="directory of <stem>.affine.txt files to apply")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    _add_common(p)
    p.add_argument("--n-subjects", type=int, required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="few-shot episodic training")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--patch-size", type=int, nargs=3)
    p.add_argument("--ways", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument(
        "--split-fractions", type=float, nargs=3, default=(0.78, 0.07, 0.15)
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="volume-level metrics on a subject set")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True, help="support patch cache directory")
    p.add_argument("--data", required=True)
    p.add_argument("--subjects", nargs="*", default=None)
    p.add_argument("--tiling", choices=("clamped", "drop-partial"), default="clamped")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("-k", type=int, default=4)
    p.add_argument("--patch-size", type=int, nargs=3)
    p.add_argument("--ways", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--tiling", choices=("clamped", "drop-partial"), default="clamped")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("segment", help="segment one volume")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--gt", help="ground-truth mask; triggers overlap-mask export")
    p.add_argument("--overlap-out")
    p.add_argument("--tiling", choices=("clamped", "drop-partial"), default="clamped")
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except VolumeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # surfaced with a distinct code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
