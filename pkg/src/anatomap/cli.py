"""Command-line surface: phantom-gen, train, localize, prompt, eval.

Heavy imports happen inside the command handlers so that ``--strict``
can pin thread counts in the environment before numpy loads; strict
mode makes every subcommand byte-reproducible for a fixed seed.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

VERSION = "0.1.0"
ROLES = ("z_min", "z_max", "y_min", "y_max", "x_min", "x_max")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


# excluded from the config hash: handlers and filesystem locations, so
# that reruns into different directories stay byte-identical
_UNHASHED_ARGS = {
    "func", "out", "spec", "cohort", "checkpoint", "config", "resume",
    "support_json", "support_dir", "query", "query_dir", "landmarks",
    "pred", "gt_dir", "emit_support",
}


def config_hash(args_dict):
    semantic = {k: str(v) for k, v in sorted(args_dict.items())
                if k not in _UNHASHED_ARGS}
    blob = json.dumps(semantic, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(doc, path):
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ANATOMAP_SEED")
    return int(env) if env else 0


def _meta(args, seed):
    return {"version": VERSION, "config_hash": config_hash({**vars(args), "seed": seed})}


# -- phantom-gen ---------------------------------------------------------

def cmd_phantom_gen(args):
    import numpy as np  # noqa: F401
    from . import phantom, volume

    spec = phantom.default_spec() if args.spec is None else \
        phantom.PhantomSpec.from_json(Path(args.spec).read_text())
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    seed = _resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    (out / "spec.json").write_text(spec.to_json() + "\n")
    files = {"spec.json": _sha256(out / "spec.json")}
    for i, (vol, truth) in enumerate(phantom.generate_cohort(spec, args.count, seed)):
        stem = f"subject_{i:03d}"
        volume.save_volume(vol, out / f"{stem}.json")
        mask_files = {}
        for name, organ in truth.organs.items():
            mfile = f"{stem}.{name}.mask.json"
            volume.save_mask(organ.mask, truth.spacing, out / mfile)
            mask_files[name] = mfile
        gt = phantom.truth_to_dict(truth, mask_files)
        gt["meta"] = _meta(args, seed)
        _dump_json(gt, out / f"{stem}.gt.json")
        for f in [f"{stem}.json", f"{stem}.raw", f"{stem}.gt.json"] + \
                [m for m in mask_files.values()] + \
                [m.replace(".json", ".raw") for m in mask_files.values()]:
            files[f] = _sha256(out / f)
        print(f"wrote {stem} ({len(truth.organs)} organs)")
    manifest = {"meta": _meta(args, seed), "seed": seed, "count": args.count,
                "files": files}
    _dump_json(manifest, out / "manifest.json")
    print(f"cohort of {args.count} written to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------

def _load_cohort_volumes(cohort_dir, ids=None):
    from . import volume
    cohort_dir = Path(cohort_dir)
    headers = sorted(cohort_dir.glob("subject_*.json"))
    headers = [h for h in headers
               if not h.name.endswith(".gt.json") and ".mask." not in h.name]
    if ids is not None:
        wanted = {f"subject_{i:03d}.json" for i in ids}
        headers = [h for h in headers if h.name in wanted]
    if not headers:
        raise FileNotFoundError(f"no subject volumes found in {cohort_dir}")
    return [(h, volume.load_volume(h)) for h in headers]


def _write_loss_csv(path, history, meta):
    lines = [f"# anatomap {meta['version']} config={meta['config_hash']}"]
    lines.append("epoch,l_mse,l_ce,l_total")
    for h in history:
        lines.append(f"{h['epoch']},{h['l_mse']!r},{h['l_ce']!r},{h['l_total']!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args):
    from . import train as training
    from .nn import checkpoint

    if args.config:
        cfg = training.TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = training.TrainConfig()
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.r is not None:
        overrides["r_mm"] = tuple(args.r)
    if args.seed is not None or "ANATOMAP_SEED" in os.environ:
        overrides["seed"] = _resolve_seed(args)
    if overrides:
        import dataclasses
        cfg = dataclasses.replace(cfg, **overrides)

    vols = [v for _, v in _load_cohort_volumes(args.cohort)]
    weights = None
    first_epoch = 0
    if args.resume:
        weights, extras = checkpoint.load_checkpoint(args.resume)
        first_epoch = int(extras.get("epoch", -1)) + 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(args, cfg.seed)
    weights, history = training.train(vols, cfg, weights=weights)
    for h in history:
        h["epoch"] += first_epoch
    extras = {
        "r_mm": list(cfg.r_mm),
        "patch_size": list(cfg.patch_size),
        "epoch": history[-1]["epoch"],
        "train_meta": meta,
    }
    ckpt = checkpoint.save_checkpoint(weights, out / "checkpoint.json", extras)
    _write_loss_csv(out / "loss.csv", history, meta)
    print(f"checkpoint {ckpt} (final l_total {history[-1]['l_total']:.4f})")
    return EXIT_OK


# -- support / localize ----------------------------------------------------

def _segment_counts(truths, organs, n_mm):
    from .phantom import segment_count
    return {
        o: segment_count(min(t.span_mm(o) for t in truths), n_mm)
        for o in organs
    }


def _load_truth(gt_path, with_masks=True):
    from . import phantom, volume
    gt_path = Path(gt_path)
    doc = json.loads(gt_path.read_text())
    loader = (lambda f: volume.load_mask(gt_path.parent / f)[0]) if with_masks else None
    return phantom.truth_from_dict(doc, loader)


def build_support_json(cohort_dir, ids, mode, n_mm):
    """Assemble the support descriptor from generated ground truth."""
    cohort_dir = Path(cohort_dir)
    truths = []
    for i in ids:
        truths.append(_load_truth(cohort_dir / f"subject_{i:03d}.gt.json"))
    organs = sorted(truths[0].organs.keys())
    seg = _segment_counts(truths, organs, n_mm) if mode == "spl" else None
    entries = []
    for i, truth in zip(ids, truths):
        landmarks = {}
        for o in organs:
            if mode == "wpl":
                for r in ROLES:
                    landmarks[f"{o}:{r}"] = [int(v) for v in truth.organs[o].extremes[r]]
            else:
                for si, seg_pts in enumerate(truth.segment_extremes(o, seg[o])):
                    for r in ROLES:
                        landmarks[f"{o}:s{si}:{r}"] = [int(v) for v in seg_pts[r]]
        entries.append({"volume": f"subject_{i:03d}.json", "landmarks": landmarks})
    return entries


def _parse_ids(text):
    return [int(t) for t in text.split(",") if t != ""]


def cmd_localize(args):
    import numpy as np
    from . import locate, volume
    from .nn import checkpoint

    weights, extras = checkpoint.load_checkpoint(args.checkpoint)
    r_mm = tuple(extras.get("r_mm", (192.0, 192.0, 192.0)))
    patch_size = tuple(extras.get("patch_size", (16, 16, 16)))
    seed = _resolve_seed(args)
    meta = _meta(args, seed)

    if args.support_json:
        support_doc = json.loads(Path(args.support_json).read_text())
        support_root = Path(args.support_json).parent
    elif args.support_dir:
        ids = _parse_ids(args.support_ids) if args.support_ids else list(range(args.k))
        if args.k is not None:
            ids = ids[:args.k]
        support_doc = build_support_json(args.support_dir, ids, args.mode, args.n)
        support_root = Path(args.support_dir)
    else:
        raise ValueError("provide --support-json or --support-dir")
    if args.emit_support:
        _dump_json({"meta": meta, "supports": support_doc}, args.emit_support)

    supports = []
    for entry in support_doc:
        vol = volume.load_volume(support_root / entry["volume"])
        if vol.domain == "raw_hu":
            vol = volume.normalize_hu(vol)
        supports.append((vol, {k: tuple(v) for k, v in sorted(entry["landmarks"].items())}))
    models = locate.build_support_models(supports, weights, patch_size)

    queries = [Path(q) for q in (args.query or [])]
    if args.query_dir:
        ids = _parse_ids(args.query_ids) if args.query_ids else None
        queries += [h for h, _ in _load_cohort_volumes(args.query_dir, ids)]
    if not queries:
        raise ValueError("no query volumes given")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for qpath in queries:
        vol = volume.load_volume(qpath)
        if vol.domain == "raw_hu":
            vol = volume.normalize_hu(vol)
        starts = None
        if args.random_start:
            starts = {n: rng.integers(0, s) for n in models
                      for s in [np.asarray(vol.shape)]}
        results = locate.localize_landmarks(
            vol, models, weights, r_mm, patch_size,
            starts=starts, max_steps=args.max_steps, refine=not args.no_refine)
        doc = {
            "meta": meta,
            "mode": args.mode,
            "n_mm": args.n if args.mode == "spl" else None,
            "k": len(supports),
            "query_shape": list(vol.shape),
            "spacing": [vol.spacing.z, vol.spacing.y, vol.spacing.x],
            "landmarks": {
                name: {
                    "position": [int(v) for v in res.position],
                    "coarse": [int(v) for v in res.coarse_position],
                    "steps": res.steps,
                }
                for name, res in results.items()
            },
        }
        dest = out / (qpath.stem + ".landmarks.json")
        _dump_json(doc, dest)
        print(f"localized {len(results)} landmarks for {qpath.name} -> {dest.name}")
    return EXIT_OK


# -- prompt ----------------------------------------------------------------

def _group_landmarks(landmark_doc):
    """Group landmark names into organ -> segment -> role -> position."""
    organs = {}
    for name, entry in landmark_doc["landmarks"].items():
        parts = name.split(":")
        if len(parts) == 2:
            organ, role = parts
            seg = 0
        else:
            organ, seg_s, role = parts
            seg = int(seg_s.lstrip("s"))
        organs.setdefault(organ, {}).setdefault(seg, {})[role] = entry["position"]
    return organs


def _boxes_from_groups(groups, spacing, shape):
    import warnings
    from . import prompt as prompting
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=Warning)
        boxes = []
        for seg in sorted(groups):
            pts = [groups[seg][r] for r in ROLES]
            boxes.append(prompting.box_from_points(pts, spacing).clamped(shape))
    return boxes


def cmd_prompt(args):
    from . import prompt as prompting
    from .volume import Spacing

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _resolve_seed(args)
    meta = _meta(args, seed)
    total = 0
    for lm_path in args.landmarks:
        doc = json.loads(Path(lm_path).read_text())
        spacing = Spacing.of(doc["spacing"])
        shape = tuple(doc["query_shape"])
        mode = doc.get("mode", "wpl")
        for organ, groups in sorted(_group_landmarks(doc).items()):
            boxes = _boxes_from_groups(groups, spacing, shape)
            ps = prompting.slice_prompts(
                boxes, args.margin, shape[1:], organ=organ, mode=mode,
                n_mm=doc.get("n_mm"), meta=meta)
            stem = Path(lm_path).stem.replace(".landmarks", "")
            dest = out / f"{stem}.{organ}.prompts.json"
            prompting.export_prompts(ps, dest)
            total += 1
    print(f"wrote {total} prompt sets to {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _gt_boxes_and_masks(gt, organ, mode, n_mm):
    from . import prompt as prompting
    organ_truth = gt.organs[organ]
    box = prompting.box_from_points(list(organ_truth.extremes.values()), gt.spacing)
    return box, organ_truth.mask


def cmd_eval(args):
    import warnings
    import numpy as np
    from . import metrics, prompt as prompting
    from .phantom import segment_count

    gt_dir = Path(args.gt_dir)
    cases = []
    for pred_path in sorted(Path(args.pred).glob("*.landmarks.json")):
        doc = json.loads(pred_path.read_text())
        stem = pred_path.name.replace(".landmarks.json", "")
        gt = _load_truth(gt_dir / f"{stem}.gt.json")
        spacing = gt.spacing
        by_organ = _group_landmarks(doc)
        for organ in sorted(by_organ):
            groups = by_organ[organ]
            gt_box, mask = _gt_boxes_and_masks(gt, organ, doc.get("mode"), doc.get("n_mm"))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", category=Warning)
                boxes = _boxes_from_groups(groups, spacing, gt.shape)
                union_pts = [p for seg in groups.values() for p in seg.values()]
                whole_box = prompting.box_from_points(union_pts, spacing).clamped(gt.shape)
            # landmark error: per segment against matching gt segment extremes
            m = len(groups)
            gt_segs = gt.segment_extremes(organ, m) if m > 1 else [gt.organs[organ].extremes]
            ale_vals = []
            for seg_idx in sorted(groups):
                pred_pts = {r: groups[seg_idx][r] for r in ROLES}
                ale_vals.append(metrics.ale(pred_pts, gt_segs[seg_idx], spacing))
            ps = prompting.slice_prompts(boxes, args.margin, gt.shape[1:],
                                         organ=organ, mode=doc.get("mode", "wpl"))
            pred_mask = prompting.box_clip_segment(mask, ps)
            cases.append({
                "organ": organ,
                "ale": float(np.mean(ale_vals)),
                "wd": metrics.wall_distance(whole_box, gt_box),
                "iou": metrics.iou3d(whole_box, gt_box),
                "dsc": metrics.dsc(pred_mask, mask),
            })
    rep, csv_text = metrics.report(cases)
    seed = _resolve_seed(args)
    meta = _meta(args, seed)
    header = f"# anatomap {meta['version']} config={meta['config_hash']}\n"
    Path(args.out).write_text(header + csv_text)
    for m in ("ale", "wd", "iou", "dsc"):
        mean, std = rep.cohort[m]
        print(f"{m:4s} {mean:8.3f} +- {std:.3f}")
    print(f"report written to {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="anatomap",
        description="Few-shot anatomical localization on 3D volumes: phantom "
                    "generation, self-supervised training, landmark localization, "
                    "bbox prompt export, and evaluation.")
    p.add_argument("--version", action="version", version=f"anatomap {VERSION}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (falls back to ANATOMAP_SEED, then 0)")
    common.add_argument("--strict", action="store_true",
                        help="single-threaded, byte-reproducible mode")
    common.add_argument("--jobs", type=int, default=None,
                        help="cap kernel worker threads")

    g = sub.add_parser("phantom-gen", parents=[common],
                       help="generate a synthetic cohort with ground truth")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, required=True, help="number of subjects")
    g.add_argument("--spec", help="phantom spec JSON (default: built-in layout)")
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", parents=[common],
                       help="train the localization network on a cohort")
    t.add_argument("--cohort", required=True, help="directory from phantom-gen")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--r", type=float, nargs=3, metavar=("RZ", "RY", "RX"),
                   help="offset bound in mm per axis")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    l = sub.add_parser("localize", parents=[common],
                       help="few-shot landmark localization on query volumes")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--support-json", help="support descriptor JSON")
    l.add_argument("--support-dir", help="cohort dir; supports built from ground truth")
    l.add_argument("--support-ids", help="comma-separated subject ids for supports")
    l.add_argument("--k", type=int, default=5, help="support count (default 5)")
    l.add_argument("--emit-support", help="write the assembled support descriptor here")
    l.add_argument("--query", action="append", help="query volume header (repeatable)")
    l.add_argument("--query-dir", help="directory of query volumes")
    l.add_argument("--query-ids", help="comma-separated subject ids for queries")
    l.add_argument("--mode", choices=("wpl", "spl"), default="wpl")
    l.add_argument("--n", type=float, default=6.0, help="segment interval in mm (spl)")
    l.add_argument("--max-steps", type=int, default=3)
    l.add_argument("--random-start", action="store_true",
                   help="start agents at random positions instead of the center")
    l.add_argument("--no-refine", action="store_true",
                   help="skip similarity refinement, keep the coarse estimate")
    l.add_argument("--out", required=True)
    l.set_defaults(func=cmd_localize)

    pr = sub.add_parser("prompt", parents=[common],
                        help="turn localized landmarks into per-slice bbox prompts")
    pr.add_argument("--landmarks", nargs="+", required=True,
                    help="landmark JSON files from localize")
    pr.add_argument("--margin", type=int, default=10,
                    help="prompt margin in pixels per side (default 10)")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prompt)

    e = sub.add_parser("eval", parents=[common],
                       help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="directory of landmark JSONs")
    e.add_argument("--gt-dir", required=True, help="cohort dir with ground truth")
    e.add_argument("--margin", type=int, default=10,
                   help="prompt margin used for the box-clip Dice (default 10)")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.strict:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
        os.environ["ANATOMAP_NUM_THREADS"] = "1"
    elif args.jobs:
        os.environ["ANATOMAP_NUM_THREADS"] = str(args.jobs)
    if "numpy" in sys.modules and args.strict:
        print("warning: numpy already loaded; BLAS thread caps may not apply",
              file=sys.stderr)

    from . import errors
    try:
        return args.func(args)
    except errors.NanLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, errors.AnatomapError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
