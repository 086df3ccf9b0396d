"""Command-line entry points: synth, train, eval, infer, gradcheck.

Exit codes: 0 ok, 1 gradient check failed, 2 usage, 3 numeric failure, 4 IO.
Errors go to stderr as single lines prefixed ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .data import (PROFILES, SceneRecord, build_sample, generate_record, load_split, read_manifest,
                   read_scene, scene_dir_name, write_manifest, write_scene)
from .geometry import GridSpec
from .models import (TrainConfig, TrainingDiverged, evaluate_records, load_checkpoint, predict,
                     save_checkpoint, train)
from .postprocess import extract_skeleton

EXIT_OK, EXIT_GRAD, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "lane", "gnd")


class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- synth -------------------------------------------------------------------------------

def _synth_one(args):
    k, seed, profile_name, out = args
    rec = generate_record(k, seed, PROFILES[profile_name])
    write_scene(Path(out, scene_dir_name(k)), rec)
    return k


def cmd_synth(out: str, scenes: int, seed: int, profile: str = "highway", jobs: int = 1) -> dict:
    """Generate ``scenes`` scenes, the manifest and a default training config."""
    if scenes < 1:
        raise UsageError("--scenes must be at least 1")
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    prof = PROFILES[profile]
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    work = [(k, seed, profile, str(d)) for k in range(scenes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_synth_one, work))
    else:
        for w in work:
            _synth_one(w)
    manifest = write_manifest(d, scenes, seed, prof)
    cfg = TrainConfig(tau=prof.tau, threshold=prof.threshold, seed=seed)
    (d / "train_config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return manifest


# -- train -------------------------------------------------------------------------------

def load_records(data: str, split: str, spec: GridSpec) -> List[SceneRecord]:
    return [r.compact(spec) for r in load_split(data, split)]


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in history:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lane), repr(e.gnd)])


def cmd_train(data: str, out: str, config: Optional[str] = None, overrides: Optional[dict] = None):
    manifest = read_manifest(data)
    cfg_path = Path(config) if config else Path(data, "train_config.txt")
    cfg = TrainConfig.from_text(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else TrainConfig(
        tau=manifest["tau"], threshold=manifest["threshold"])
    if overrides:
        cfg = TrainConfig(**{**cfg.__dict__, **{k: v for k, v in overrides.items() if v is not None}})
    spec = GridSpec.from_json(manifest["grid"])
    train_recs = load_records(data, "train", spec)
    val_recs = load_records(data, "val", spec)
    if not train_recs or not val_recs:
        raise UsageError("dataset needs non-empty train and val splits")
    result = train(train_recs, val_recs, spec, cfg,
                   on_epoch=lambda e: print(f"epoch {e.epoch} train {e.train_loss:.3f} val {e.val_loss:.3f}"))
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.__dict__, "grid": spec.to_json(), "tau": cfg.tau, "threshold": cfg.threshold,
            "profile": manifest.get("profile"), "best_epoch": result.best_epoch, "best_val": result.best_val}
    save_checkpoint(d, result.nets, meta)
    write_loss_csv(d / "loss.csv", result.log)
    print(f"final validation loss {result.best_val:.6f} (epoch {result.best_epoch})")
    return result


# -- eval / infer -----------------------------------------------------------------------

def cmd_eval(data: str, ckpt: str, report: str, split: str = "test", mode: Optional[str] = None,
             true_ground: bool = False) -> dict:
    nets, meta = load_checkpoint(ckpt)
    spec = GridSpec.from_json(meta["grid"])
    records = load_records(data, split, spec)
    if not records:
        raise UsageError(f"split {split!r} is empty")
    cfg = dict(meta.get("config", {}))
    mode = mode or cfg.get("mode", "both")
    rep, _ = evaluate_records(nets, records, spec, meta["tau"], meta["threshold"], mode, true_ground,
                              config={"split": split, "checkpoint": str(ckpt), "train_config": cfg})
    out = rep.to_json()
    Path(report).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    print(f"AP {out['ap']:.4f} precision@5 {out['precision_at_5px']:.4f} recall@5 {out['recall_at_5px']:.4f}")
    return out


def _to_rgb(gray: np.ndarray, lo: float, hi: float) -> np.ndarray:
    g = np.clip((np.asarray(gray, dtype=np.float64) - lo) / max(hi - lo, 1e-9), 0.0, 1.0)
    return np.repeat(g[..., None], 3, axis=-1)


def compose_viz(bev: np.ndarray, dt: np.ndarray, skeleton: np.ndarray, warped: Optional[np.ndarray],
                tau: float) -> np.ndarray:
    """Four panels side by side: LiDAR, predicted DT, skeleton over camera, warped camera."""
    occ = bev[2] > -9.999
    lidar = _to_rgb(np.where(occ, bev[1], 0.0), 0.0, 1.0)
    dtp = _to_rgb(dt, 0.0, tau)
    cam = np.zeros(dt.shape + (3,)) if warped is None else np.clip(warped.transpose(1, 2, 0), 0.0, 1.0)
    overlay = cam.copy()
    overlay[skeleton] = (1.0, 0.0, 0.0)
    sep = np.ones((dt.shape[0], 2, 3))
    panels = [lidar, sep, dtp, sep, overlay, sep, cam]
    return (np.concatenate(panels, axis=1) * 255.0 + 0.5).astype(np.uint8)


def cmd_infer(scene: str, ckpt: str, viz: str) -> None:
    nets, meta = load_checkpoint(ckpt)
    spec = GridSpec.from_json(meta["grid"])
    rec = read_scene(scene).compact(spec)
    sample = build_sample(rec, spec, meta["tau"])
    mode = meta.get("config", {}).get("mode", "both")
    dts, _, warps = predict(nets, [sample], spec, mode)
    skel = extract_skeleton(dts[0], meta["threshold"])
    io.save_png(viz, compose_viz(sample.bev, dts[0], skel.mask, warps[0], meta["tau"]))
    print(f"{skel.component_count} lane components; wrote {viz}")


def cmd_gradcheck(seed: int = 0) -> bool:
    from .gradcheck import TOLERANCE, passes, run_suite

    results = run_suite(seed)
    for name, per in results.items():
        cols = "  ".join(f"{dt} {err:.3e}" for dt, err in per.items())
        print(f"{name:24s} {cols}")
    ok = passes(results)
    print("all ops within tolerance" if ok else
          f"FAILED: tolerance float32 {TOLERANCE[np.float32]:g}, float64 {TOLERANCE[np.float64]:g}")
    return ok


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanebev", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--profile", choices=sorted(PROFILES), default="highway")
    s.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="train ground and lane networks")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--mode", choices=("lidar", "camera", "both"))

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--report", required=True)
    e.add_argument("--mode", choices=("lidar", "camera", "both"))
    e.add_argument("--true-ground", action="store_true", help="warp the camera onto ground-truth heights")

    i = sub.add_parser("infer", help="render a prediction composite for one scene")
    i.add_argument("--scene", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--viz", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.out, args.scenes, args.seed, args.profile, args.jobs)
        elif args.command == "train":
            cmd_train(args.data, args.out, args.config,
                      {"seed": args.seed, "epochs": args.epochs, "mode": args.mode})
        elif args.command == "eval":
            cmd_eval(args.data, args.ckpt, args.report, args.split, args.mode, args.true_ground)
        elif args.command == "infer":
            cmd_infer(args.scene, args.ckpt, args.viz)
        elif args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(args.seed) else EXIT_GRAD
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (OSError, io.FormatError, KeyError, json.JSONDecodeError) as exc:
        where = getattr(exc, "filename", None)
        return _fail(EXIT_IO, f"{where}: {exc}" if where else str(exc))
    except ValueError as exc:
        return _fail(EXIT_USAGE, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
