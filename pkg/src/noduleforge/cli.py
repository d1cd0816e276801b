"""Command-line pipeline: gen-data, train, screen, detect, evaluate.

Every subcommand takes ``--config FILE`` plus per-key override flags
(one per configuration key, e.g. ``--fcn-max-iters 50``). Outputs are
written atomically and are byte-identical across reruns with the same
configuration and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio
from .config import KEY_SPECS, RunConfig, load_config, serialize_config
from .exceptions import NoduleForgeError
from .metrics import CPM_RATES, cpm, froc, stage1_metrics
from .models import (
    build_refine_resnet,
    build_screen_fcn,
    load_model,
    ResidualUnitSpec,
    save_model,
    transfer_stem,
)
from .nn.losses import HybridLossConfig
from .phantom import PhantomSpec, generate_phantom, make_patch_sampler
from .refine import RefinerConfig, refine_candidates
from .screening import screen_scan
from .training import TrainConfig, train_stage1, train_stage2
from .models import REFINE_PATCH, SCREEN_PATCH

STRUCTURES_HEADER = ["scan_id", "x", "y", "z"]


def worker_count(n_items: int | None = None) -> int:
    """Parallel worker cap: NODULEFORGE_THREADS bounds os.cpu_count()."""
    n = os.cpu_count() or 1
    env = os.environ.get("NODULEFORGE_THREADS")
    if env:
        try:
            n = max(1, min(n, int(env)))
        except ValueError:
            raise NoduleForgeError(f"NODULEFORGE_THREADS is not an integer: {env!r}")
    if n_items is not None:
        n = max(1, min(n, n_items))
    return n


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noduleforge",
        description="Two-stage 3D nodule detection pipeline on phantom or MetaImage volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", metavar="FILE",
                       help="run configuration document (key = value lines)")
        for key, (_, doc) in KEY_SPECS.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                           metavar="V", help=doc)

    p = sub.add_parser("gen-data", help="generate phantom train/test volumes")
    p.add_argument("--out", required=True, metavar="DIR")
    add_common(p)

    p = sub.add_parser("train-fcn", help="train the stage-1 screening network")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--trace", metavar="FILE", help="loss trace CSV")
    add_common(p)

    p = sub.add_parser("screen", help="run stage-1 candidate screening")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="FILE")
    add_common(p)

    p = sub.add_parser("train-refiner", help="train the stage-2 refiner")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--fcn", metavar="FILE", help="screening model for stem transfer")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--trace", metavar="FILE", help="loss trace CSV")
    add_common(p)

    p = sub.add_parser("detect", help="full two-stage detection")
    p.add_argument("--fcn", required=True, metavar="FILE")
    p.add_argument("--refiner", required=True, metavar="FILE")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="FILE")
    add_common(p)

    p = sub.add_parser("evaluate", help="FROC/CPM scoring of a candidate CSV")
    p.add_argument("--candidates", required=True, metavar="FILE")
    p.add_argument("--annotations", required=True, metavar="FILE")
    p.add_argument("--n-scans", type=int, metavar="N",
                   help="scan count (default: distinct scan ids seen)")
    p.add_argument("--out", metavar="FILE", help="CPM summary CSV")
    add_common(p)

    p = sub.add_parser("froc-plot", help="write FROC curve points as CSV")
    p.add_argument("--candidates", required=True, metavar="FILE")
    p.add_argument("--annotations", required=True, metavar="FILE")
    p.add_argument("--n-scans", type=int, metavar="N")
    p.add_argument("--out", required=True, metavar="FILE")
    add_common(p)

    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key in KEY_SPECS:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            cfg.set_value(key, raw)
    return cfg


# ---------------------------------------------------------------------------
# corpus helpers


def _load_corpus(data_dir):
    """Volumes (sorted), annotations grouped per scan, mimic hints attached."""
    data_dir = Path(data_dir)
    headers = sorted(data_dir.glob("*.mhd"))
    if not headers:
        raise NoduleForgeError(f"no .mhd volumes found in {data_dir}")
    volumes = [fileio.load_mhd(h) for h in headers]
    anno_path = data_dir / "annotations.csv"
    annos = fileio.read_annotations_csv(anno_path) if anno_path.exists() else []
    by_scan = {}
    for a in annos:
        by_scan.setdefault(a.scan_id, []).append(a)
    structures = data_dir / "structures.csv"
    if structures.exists():
        _, rows = fileio._read_rows(structures, [STRUCTURES_HEADER])
        mimics = {}
        for lineno, row in rows:
            mimics.setdefault(row[0], []).append(
                tuple(fileio._num(structures, lineno, c, row[i])
                      for i, c in ((1, "x"), (2, "y"), (3, "z")))
            )
        for vol in volumes:
            vol.meta["mimic_centers"] = mimics.get(vol.scan_id, [])
    return [(vol, by_scan.get(vol.scan_id, [])) for vol in volumes]


def _train_config_stage1(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.fcn_batch_size,
        learning_rate=cfg.fcn_learning_rate,
        max_iters=cfg.fcn_max_iters,
        osf_enabled=cfg.osf_enabled,
        hard_fraction=cfg.osf_hard_fraction,
        easy_keep_fraction=cfg.osf_easy_keep_fraction,
        seed=cfg.seed,
        loss_cfg=HybridLossConfig(lam=0.0, beta=cfg.loss_beta),
    )


def _train_config_stage2(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.refine_batch_size,
        learning_rate=cfg.refine_learning_rate,
        max_iters=cfg.refine_max_iters,
        osf_enabled=False,
        seed=cfg.seed,
        loss_cfg=HybridLossConfig(lam=cfg.loss_lambda, beta=cfg.loss_beta),
    )


def _to_world(cands, vol):
    """Candidate coordinates in the volume's world frame, for CSV output."""
    out = []
    scale = float(np.mean(vol.spacing))
    for c in cands:
        w = type(c)(
            position=vol.voxel_to_world(c.position),
            probability=c.probability,
            scan_id=c.scan_id,
            refined_centroid=None if c.refined_centroid is None
            else vol.voxel_to_world(c.refined_centroid),
            refined_diameter=None if c.refined_diameter is None
            else c.refined_diameter * scale,
            refine_probability=c.refine_probability,
        )
        out.append(w)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    rng = np.random.default_rng(cfg.seed)
    for split, count in (("train", cfg.phantom_train_volumes),
                         ("test", cfg.phantom_test_volumes)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        seeds = rng.integers(0, 2 ** 31 - 1, size=count)
        all_annos = []
        structure_rows = []
        for i in range(count):
            scan_id = f"{split}_{i:04d}"
            spec = PhantomSpec(
                dims=tuple(cfg.phantom_dims),
                n_nodules=cfg.phantom_nodules_per_volume,
                diameter_range=(cfg.phantom_diameter_min, cfg.phantom_diameter_max),
                n_mimics=cfg.phantom_mimics_per_volume,
                noise_sigma=cfg.phantom_noise_sigma,
                seed=int(seeds[i]),
            )
            vol, annos = generate_phantom(spec, scan_id=scan_id)
            fileio.write_mhd(vol, split_dir / f"{scan_id}.mhd")
            all_annos.extend(annos)
            for m in vol.meta["mimic_centers"]:
                structure_rows.append([scan_id, repr(float(m[0])),
                                       repr(float(m[1])), repr(float(m[2]))])
        fileio.write_annotations_csv(split_dir / "annotations.csv", all_annos)
        fileio._write_csv(split_dir / "structures.csv", STRUCTURES_HEADER,
                          structure_rows)
        print(f"wrote {count} volumes to {split_dir}")
    fileio._atomic_write_text(out / "config.txt", serialize_config(cfg))
    return 0


def cmd_train_fcn(args) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(args.data)
    sampler = make_patch_sampler(
        corpus, SCREEN_PATCH,
        pos_fraction=cfg.fcn_pos_fraction,
        hard_negative_fraction=cfg.fcn_hard_negative_fraction,
        augment_positives=cfg.augment_enabled,
    )
    model = build_screen_fcn(cfg.fcn_channels, seed=cfg.seed)
    trained, trace = train_stage1(model, sampler, _train_config_stage1(cfg))
    save_model(trained, args.out)
    if args.trace:
        fileio.write_loss_trace_csv(args.trace, trace)
    print(f"trained screening model for {len(trace)} iterations -> {args.out}")
    return 0


def cmd_screen(args) -> int:
    cfg = resolve_config(args)
    model = load_model(args.model)
    corpus = _load_corpus(args.data)

    def run(pair):
        vol, _ = pair
        return _to_world(
            screen_scan(model, vol, threshold=cfg.screen_threshold,
                        radius=cfg.nms_radius),
            vol,
        )

    with ThreadPoolExecutor(max_workers=worker_count(len(corpus))) as pool:
        per_vol = list(pool.map(run, corpus))
    cands = [c for group in per_vol for c in group]
    fileio.write_candidates_csv(args.out, cands)
    annos = [a for _, annos in corpus for a in annos]
    if annos:
        sens, fps = stage1_metrics(cands, annos, n_scans=len(corpus))
        print(f"screening sensitivity {sens:.3f} at {fps:.1f} FPs/scan")
    print(f"wrote {len(cands)} candidates -> {args.out}")
    return 0


def cmd_train_refiner(args) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(args.data)
    model = build_refine_resnet(seed=cfg.seed)
    if args.fcn:
        model = transfer_stem(load_model(args.fcn), model)
    sampler = make_patch_sampler(
        corpus, REFINE_PATCH,
        pos_fraction=cfg.refine_pos_fraction,
        hard_negative_fraction=cfg.refine_hard_negative_fraction,
        augment_positives=cfg.augment_enabled,
    )
    trained, trace = train_stage2(model, sampler, _train_config_stage2(cfg))
    save_model(trained, args.out)
    if args.trace:
        fileio.write_loss_trace_csv(args.trace, trace)
    print(f"trained refiner for {len(trace)} iterations -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    cfg = resolve_config(args)
    fcn = load_model(args.fcn)
    refiner = load_model(args.refiner)
    corpus = _load_corpus(args.data)
    rcfg = RefinerConfig(decision_threshold=cfg.decision_threshold)

    def run(pair):
        vol, _ = pair
        cands = screen_scan(fcn, vol, threshold=cfg.screen_threshold,
                            radius=cfg.nms_radius)
        return _to_world(refine_candidates(refiner, vol, cands, rcfg), vol)

    with ThreadPoolExecutor(max_workers=worker_count(len(corpus))) as pool:
        per_vol = list(pool.map(run, corpus))
    detections = [c for group in per_vol for c in group]
    fileio.write_candidates_csv(args.out, detections)
    print(f"wrote {len(detections)} detections -> {args.out}")
    return 0


def _grouped_scans(cand_path, anno_path, n_scans_arg):
    cands = fileio.read_candidates_csv(cand_path)
    annos = fileio.read_annotations_csv(anno_path)
    scan_ids = sorted({c.scan_id for c in cands} | {a.scan_id for a in annos})
    n_scans = n_scans_arg if n_scans_arg else len(scan_ids)
    scans = []
    for sid in scan_ids:
        scans.append((
            [c for c in cands if c.scan_id == sid],
            [a for a in annos if a.scan_id == sid],
        ))
    return scans, n_scans


def cmd_evaluate(args) -> int:
    scans, n_scans = _grouped_scans(args.candidates, args.annotations, args.n_scans)
    curve = froc(scans, n_scans=n_scans)
    result = cpm(curve)
    for rate, sens in zip(CPM_RATES, result.per_rate):
        print(f"sensitivity at {rate:g} FPs/scan: {sens:.3f}")
    print(f"cpm {result.cpm:.3f}")
    if args.out:
        fileio.write_cpm_csv(args.out, result)
    return 0


def cmd_froc_plot(args) -> int:
    scans, n_scans = _grouped_scans(args.candidates, args.annotations, args.n_scans)
    curve = froc(scans, n_scans=n_scans)
    fileio.write_froc_csv(args.out, curve)
    print(f"wrote {len(curve.points)} FROC points -> {args.out}")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-fcn": cmd_train_fcn,
    "screen": cmd_screen,
    "train-refiner": cmd_train_refiner,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "froc-plot": cmd_froc_plot,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (NoduleForgeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
