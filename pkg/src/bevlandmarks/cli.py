"""Command-line entry point: ``bevlandmarks <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fio
from .bev import (AugmentRanges, BevConfig, build_coordinate_map, pixel_center_local, project_bev,
                  voxel_downsample)
from .bundle import load_bundle, save_bundle
from .geometry import Pose2, local_to_global
from .evaluation import EvalThresholds, evaluate
from .landmarks import LandmarkInitConfig, LandmarkSet, init_landmarks
from .localizer import LocalizerConfig, detect_peaks, localize, parse_record
from .loss import LossConfig
from .model import param_count, predict
from .pipeline import DeskSetup, corner_distance, make_queries, reference_scans, run_desk, sample_queries
from .synth import PRESETS, SensorSpec, generate_scene
from .trainer import TrainConfig, prepare_frame, train, write_summary

log = logging.getLogger("bevlandmarks")


def _bev_args(p):
    g = p.add_argument_group("BEV image")
    g.add_argument("--width-px", type=int, default=64)
    g.add_argument("--height-px", type=int, default=64)
    g.add_argument("--pixel-size", type=float, default=0.25)
    g.add_argument("--voxel-size", type=float, default=0.1)


def _bev(a) -> BevConfig:
    return BevConfig(a.width_px, a.height_px, a.pixel_size, a.voxel_size)


def _scan_path(scan_dir: Path, fid: str) -> Path:
    for ext in (".bin", ".txt", ".xyz"):
        p = scan_dir / f"{fid}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no scan for frame {fid!r} in {scan_dir}")


def cmd_synth(a) -> int:
    out = Path(a.out)
    scene = generate_scene(a.seed, a.preset)
    sensor = SensorSpec()
    ref = reference_scans(scene, a.spacing, sensor, a.seed)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.txt")
    fio.write_trajectory(out / "trajectory.txt", list(zip(ref.ids, ref.poses)))
    ext = ".bin" if a.format == "xyz-bin" else ".txt"
    for fid, cloud in zip(ref.ids, ref.clouds):
        fio.write_cloud(out / "scans" / f"{fid}{ext}", cloud, a.format)
    n_q = 0
    if a.queries:
        lo, hi = a.query_range
        qs = sample_queries(scene, ref.poses, a.queries, (lo, hi), a.seed + 1000, sensor, "q")
        (out / "queries").mkdir(exist_ok=True)
        fio.write_trajectory(out / "queries_gt.txt", list(zip(qs.ids, qs.poses)))
        for fid, cloud in zip(qs.ids, qs.clouds):
            fio.write_cloud(out / "queries" / f"{fid}{ext}", cloud, a.format)
        n_q = len(qs)
    print(f"wrote {len(ref)} reference scans, {n_q} queries, {len(scene.corners)} corners to {out}")
    return 0


def cmd_bev(a) -> int:
    cfg = _bev(a)
    cloud = fio.read_cloud(a.cloud, a.format)
    img = project_bev(voxel_downsample(cloud, cfg.voxel_size), cfg)
    fio.write_pgm(a.out, img.density)
    print(f"{a.out}: {cfg.width_px}x{cfg.height_px}, {int(img.count.sum())} points in "
          f"{int((img.count > 0).sum())} occupied cells")
    if a.coords:
        np.save(a.coords, build_coordinate_map(Pose2(*a.pose), cfg).stacked())
    return 0


def cmd_init_landmarks(a) -> int:
    traj = fio.read_trajectory(a.trajectory)
    cfg = LandmarkInitConfig(a.d_p, a.rho)
    bev = _bev(a)
    lm = init_landmarks([p for _, p in traj], bev, cfg)
    lm.save(a.out)
    print(f"{len(lm)} landmarks (s_grid {cfg.s_grid(bev):.3f} m) -> {a.out}")
    return 0


def cmd_train(a) -> int:
    bev = _bev(a)
    traj = fio.read_trajectory(a.trajectory)
    scans = Path(a.scans)
    frames = [prepare_frame(fid, pose, fio.read_cloud(_scan_path(scans, fid)), bev) for fid, pose in traj]
    lm = LandmarkSet.load(a.landmarks) if a.landmarks else init_landmarks(
        [p for _, p in traj], bev, LandmarkInitConfig(a.d_p, a.rho))
    aug = AugmentRanges(a.max_translation, not a.no_rotation, tuple(a.scale_range))
    cfg = TrainConfig(epochs=a.epochs, lr_initial=a.lr_initial, lr_final=a.lr_final, momentum=a.momentum,
                      val_fraction=a.val_fraction, freeze_landmarks=a.freeze_landmarks, seed=a.seed,
                      loss=LossConfig(d_p=a.d_p), augment=aug)
    resume = load_bundle(a.resume) if a.resume else None
    res = train(frames, lm, bev, cfg, resume=resume, checkpoint_path=a.checkpoint, log_path=a.log)
    size = save_bundle(a.out, res.bundle)
    if a.summary:
        write_summary(a.summary, res)
    s = res.summary
    print(f"trained {s['epochs']} epochs on {s['train_frames']} frames; best val {s['best_val_loss']:.4f}; "
          f"bundle {size} bytes -> {a.out}")
    return 0


def cmd_localize(a) -> int:
    bundle = load_bundle(a.bundle)
    cfg = LocalizerConfig(n=a.n, min_inliers=a.min_inliers, inlier_threshold=a.inlier_threshold,
                          ransac_iterations=a.iterations, seed=a.seed)
    if a.cloud:
        jobs = [(Path(a.cloud).stem, Path(a.cloud))]
    else:
        if not a.scans:
            raise ValueError("give --cloud or --scans")
        scans = Path(a.scans)
        if a.ids:
            ids = [fid for fid, _ in fio.read_trajectory(a.ids)]
        else:
            ids = sorted(p.stem for p in scans.iterdir() if p.suffix in (".bin", ".txt", ".xyz"))
        jobs = [(fid, _scan_path(scans, fid)) for fid in ids]
    lines = []
    for k, (fid, path) in enumerate(jobs):
        res = localize(fio.read_cloud(path, a.format), bundle, cfg, seed=a.seed + k)
        lines.append(res.record(fid))
    text = "\n".join(lines) + "\n"
    if a.out:
        Path(a.out).write_text(text)
        ok = sum(l.split()[1] == "OK" for l in lines)
        print(f"{ok}/{len(lines)} localized -> {a.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(a) -> int:
    records = {}
    for lineno, line in enumerate(Path(a.results).read_text().splitlines(), 1):
        if line.strip() and not line.startswith("#"):
            fid, res = parse_record(line)
            records[fid] = res
    gt = fio.read_trajectory(a.gt)
    ref = [p for _, p in fio.read_trajectory(a.reference)] if a.reference else [p for _, p in gt]
    missing = [fid for fid, _ in gt if fid not in records]
    if missing:
        raise ValueError(f"{len(missing)} ground-truth frames have no result, e.g. {missing[0]!r}")
    report = evaluate([records[fid] for fid, _ in gt], [p for _, p in gt], ref,
                      EvalThresholds(a.te_max, a.re_max), [fid for fid, _ in gt], a.bin_width)
    text = report.text()
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text if not a.out else f"SR={report.sr:.2f} over {report.n_frames} frames -> {a.out}\n")
    return 0


def cmd_inspect(a) -> int:
    b = load_bundle(a.bundle)
    lm = b.landmarks
    cfg = b.model.config
    d = np.sqrt(((lm[:, None] - lm[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    info = {
        "landmarks": len(lm),
        "param_count": param_count(cfg),
        "model": cfg.to_dict(),
        "bev": {"width_px": b.bev.width_px, "height_px": b.bev.height_px, "pixel_size": b.bev.pixel_size,
                "voxel_size": b.bev.voxel_size},
        "landmark_bounds": [lm.min(0).tolist(), lm.max(0).tolist()],
        "min_landmark_spacing": float(d.min()) if len(lm) > 1 else None,
        "meta": b.meta,
        "has_optimizer_state": b.optimizer is not None,
        "file_bytes": Path(a.bundle).stat().st_size,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    if a.landmarks:
        LandmarkSet(lm).save(a.landmarks)
    return 0


def cmd_demo_transfer(a) -> int:
    """Run the heatmap branch of a trained bundle on scans from a different scene."""
    bundle = load_bundle(a.bundle)
    scene = generate_scene(a.seed, a.preset)
    scans = reference_scans(scene, a.spacing, SensorSpec(), a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    corners = scene.corners
    pillars = scene.pillars[:, :2]
    targets = np.vstack([corners, pillars]) if len(pillars) else corners
    dists = []
    cfg = LocalizerConfig(n=a.n)
    for k in range(0, len(scans), a.stride):
        fid, pose, cloud = scans.ids[k], scans.poses[k], scans.clouds[k]
        img = project_bev(voxel_downsample(cloud, bundle.bev.voxel_size), bundle.bev)
        heat, _ = predict(bundle.model, img)
        peaks = detect_peaks(heat, cfg)
        fio.write_pgm(out / f"{fid}_bev.pgm", img.density)
        lo, hi = float(heat.min()), float(heat.max())
        fio.write_pgm(out / f"{fid}_heat.pgm", (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat))
        for (u, v), _ in peaks:
            g = local_to_global(pose, pixel_center_local(u, v, bundle.bev))
            if len(targets):
                dists.append(float(np.sqrt(((targets - g) ** 2).sum(1)).min()))
    med = float(np.median(dists)) if dists else math.nan
    print(f"{a.preset}: {len(dists)} peaks over {math.ceil(len(scans) / a.stride)} scans; median distance from a "
          f"peak to the nearest corner or pillar {med:.2f} m; images in {out}")
    return 0


def cmd_desk(a) -> int:
    """synth -> init -> train -> localize -> eval on the seeded desk fixture, optimized and frozen."""
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = DeskSetup(scene_seed=a.seed)
    aug = AugmentRanges(a.max_translation, True, tuple(a.scale_range))
    setup = replace(setup, train=replace(setup.train, epochs=a.epochs, augment=aug),
                    localizer=replace(setup.localizer, min_inliers=a.min_inliers))
    scene = generate_scene(setup.scene_seed, setup.preset)
    ref = reference_scans(scene, setup.spacing, setup.sensor, setup.scene_seed)
    queries = make_queries(scene, ref, setup)
    lines = [f"scene {setup.preset} seed {setup.scene_seed}: {len(ref)} keyframes, {len(scene.corners)} corners"]
    modes = [False] + ([True] if a.frozen else [])
    for frozen in modes:
        tag = "frozen" if frozen else "optimized"
        s = replace(setup, train=replace(setup.train, freeze_landmarks=frozen))
        run = run_desk(s, reference=ref, scene=scene, queries=queries, log_path=out / f"{tag}_train.log")
        save_bundle(out / f"{tag}.bsld", run.result.bundle)
        write_summary(out / f"{tag}_summary.json", run.result)
        (out / f"{tag}_near.txt").write_text(run.near.text())
        (out / f"{tag}_far.txt").write_text(run.far.text())
        c = scene.corners
        h = run.result.history
        lines.append(f"{tag}: SR near {run.near.sr:.2f}% far {run.far.sr:.2f}%; "
                     f"train loss {h[0]['train_loss']:.3f} -> {h[-1]['train_loss']:.3f}; "
                     f"landmark-corner distance {corner_distance(run.result.initial_landmarks, c):.3f} -> "
                     f"{corner_distance(run.result.final_landmarks, c):.3f} m")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevlandmarks", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthetic scene, reference trajectory and scans")
    s.add_argument("--preset", choices=PRESETS, default="rooms")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--format", choices=fio.FORMATS, default="xyz-bin")
    s.add_argument("--queries", type=int, default=0, help="also write N query scans")
    s.add_argument("--query-range", type=float, nargs=2, default=(0.0, 2.0), metavar=("LO", "HI"),
                   help="distance band to the reference trajectory for queries (m)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bev", help="point cloud -> BEV density image (PGM)")
    s.add_argument("--cloud", required=True)
    s.add_argument("--format", choices=fio.FORMATS)
    s.add_argument("--out", required=True)
    s.add_argument("--coords", help="also write the global coordinate map (.npy) for --pose")
    s.add_argument("--pose", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "YAW"))
    s.add_argument("--seed", type=int, default=0)
    _bev_args(s)
    s.set_defaults(func=cmd_bev)

    s = sub.add_parser("init-landmarks", help="grid-averaged patch centres along a trajectory")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--d-p", type=int, default=4)
    s.add_argument("--rho", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    _bev_args(s)
    s.set_defaults(func=cmd_init_landmarks)

    s = sub.add_parser("train", help="jointly optimize the network and landmarks")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--scans", required=True)
    s.add_argument("--landmarks", help="landmark list; initialized from the trajectory if omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr-initial", type=float, default=4e-4)
    s.add_argument("--lr-final", type=float, default=4e-5)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--val-fraction", type=float, default=0.03)
    s.add_argument("--freeze-landmarks", action="store_true")
    s.add_argument("--max-translation", type=float, default=0.25)
    s.add_argument("--scale-range", type=float, nargs=2, default=(0.5, 1.5))
    s.add_argument("--no-rotation", action="store_true")
    s.add_argument("--d-p", type=int, default=4)
    s.add_argument("--rho", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log", help="per-epoch log file")
    s.add_argument("--checkpoint", help="checkpoint written every epoch")
    s.add_argument("--resume", help="resume from a checkpoint")
    s.add_argument("--summary", help="JSON training summary")
    _bev_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("localize", help="estimate poses for one cloud or a directory of scans")
    s.add_argument("--bundle", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--cloud")
    g.add_argument("--scans")
    s.add_argument("--ids", help="trajectory file whose frame ids select and order the scans")
    s.add_argument("--format", choices=fio.FORMATS)
    s.add_argument("--out")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--min-inliers", type=int, default=4)
    s.add_argument("--inlier-threshold", type=float, default=1.0)
    s.add_argument("--iterations", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("eval", help="success rate and median errors")
    s.add_argument("--results", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--reference", help="reference trajectory for distance bins (default: --gt)")
    s.add_argument("--te-max", type=float, default=2.0)
    s.add_argument("--re-max", type=float, default=5.0)
    s.add_argument("--bin-width", type=float, default=3.0)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-bundle", help="landmark count, parameter count and landmark stats")
    s.add_argument("--bundle", required=True)
    s.add_argument("--landmarks", help="also write the landmark list")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("demo-transfer", help="heatmap branch on scans of an unseen scene (qualitative)")
    s.add_argument("--bundle", required=True)
    s.add_argument("--preset", choices=PRESETS, default="campus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--stride", type=int, default=10)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_demo_transfer)
    s = sub.add_parser("desk", help="end-to-end desk pipeline on the seeded rooms fixture")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7, help="scene seed")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--max-translation", type=float, default=0.25)
    s.add_argument("--scale-range", type=float, nargs=2, default=(0.5, 1.5))
    s.add_argument("--min-inliers", type=int, default=4)
    s.add_argument("--frozen", action="store_true", help="also run the frozen-landmark ablation")
    s.set_defaults(func=cmd_desk)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)  # usage errors exit 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        return a.func(a)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"bevlandmarks {a.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
