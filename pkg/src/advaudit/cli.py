"""Command line front end: train models, run campaigns, audit the artifacts.

A campaign directory is self-describing: raw float32 .npy sidecars under
images/ are the audit source of truth, PNGs sit next to them for viewing,
ledger.csv records per-round norms, and manifest.json echoes the resolved
configuration plus sha256 digests of every artifact. No timestamps go into
any artifact, so reruns with the same flags are byte-identical regardless
of --jobs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np
from PIL import Image

from .adaptive import MODES, AdaptiveConfig, adaptive_attack
from .attack import AttackConfig
from .audit import (DEFAULT_TOLERANCE, FINAL_DIR, ORIGINALS_DIR,
                    audit_campaign, envelope_violations, fit_growth_law_ledger,
                    round_dir, sample_name, verify_budget)
from .data import Dataset, load_cifar, midgray, synth_blobs
from .models import (EnsembleModel, ModelConfig, PlainModel, TrainConfig,
                     load_model, save_model, train)

SCHEMA_VERSION = 1

MODEL_WEIGHTS = "weights.bin"
MODEL_CONFIG = "config.json"


def parse_intensity(text: str) -> float:
    """Accept plain floats or pixel fractions like 8/255."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _parse_resolutions(text: str) -> tuple:
    try:
        vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"bad resolution list {text!r}; expected e.g. 16,8,4")
    if not vals:
        raise ValueError("resolution list is empty")
    return vals


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _to_png(img: np.ndarray) -> Image.Image | None:
    # PNGs are a viewing aid; only the usual channel counts map to one
    arr = (np.rint(np.clip(img, 0.0, 1.0) * 255.0)).astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    if arr.shape[0] == 3:
        return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    return None


def _write_image_dir(dirpath, images: np.ndarray, sample_ids):
    os.makedirs(dirpath, exist_ok=True)
    for i, sid in enumerate(sample_ids):
        stem = os.path.join(dirpath, sample_name(int(sid)))
        np.save(stem + ".npy", images[i].astype(np.float32))
        png = _to_png(images[i])
        if png is not None:
            png.save(stem + ".png")


def _json_dump(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared flags
# ---------------------------------------------------------------------------

def _add_dataset_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--data", default="synth",
                   choices=["synth", "midgray", "cifar10", "cifar100"])
    g.add_argument("--data-path", help="binary batch file for the cifar variants")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--per-class", type=int, default=8,
                   help="samples per class (total count for midgray)")
    g.add_argument("--side", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--limit", type=int, help="keep only the first N samples")


def _load_dataset(args) -> Dataset:
    if args.data == "synth":
        ds = synth_blobs(args.classes, args.per_class, side=args.side,
                         seed=args.data_seed, noise=args.noise)
    elif args.data == "midgray":
        ds = midgray(args.per_class, side=args.side)
    else:
        if not args.data_path:
            raise ValueError(f"--data {args.data} needs --data-path")
        ds = load_cifar(args.data_path, args.data)
    if args.limit is not None:
        if args.limit < 1:
            raise ValueError(f"--limit must be >= 1, got {args.limit}")
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    return ds


def _dataset_manifest(args) -> dict:
    doc = {"data": args.data, "seed": args.data_seed, "limit": args.limit}
    if args.data == "synth":
        doc.update(classes=args.classes, per_class=args.per_class,
                   side=args.side, noise=args.noise)
    elif args.data == "midgray":
        doc.update(count=args.per_class, side=args.side)
    else:
        doc["path"] = os.path.abspath(args.data_path)
    return doc


def _load_model_dir(path):
    ckpt = os.path.join(path, MODEL_WEIGHTS)
    cfg = os.path.join(path, MODEL_CONFIG)
    for f in (ckpt, cfg):
        if not os.path.exists(f):
            raise FileNotFoundError(f"model file missing: {f}")
    return load_model(ckpt, cfg)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    ds = _load_dataset(args)
    resolutions = _parse_resolutions(args.resolutions)
    heads = 1 if args.arch == "plain" else args.heads
    if args.arch == "plain" and len(resolutions) != 1:
        raise ValueError("a plain model takes exactly one resolution")
    cfg = ModelConfig(resolutions=resolutions, in_channels=ds.images.shape[1],
                      num_classes=args.classes, channels=args.channels,
                      blocks=args.blocks, heads=heads,
                      aggregation=args.aggregation)
    model_cls = PlainModel if args.arch == "plain" else EnsembleModel
    model = model_cls(cfg, seed=args.seed)

    tc = TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                     batch_size=args.train_bs, seed=args.seed)
    accuracy = train(model, ds.images, ds.labels, tc)

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, MODEL_WEIGHTS)
    cfg_path = os.path.join(args.out, MODEL_CONFIG)
    save_model(model, ckpt, cfg_path)
    _json_dump(os.path.join(args.out, "manifest.json"), {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "arch": args.arch,
        "architecture": cfg.to_dict(),
        "train": {"epochs": args.epochs, "learning_rate": args.lr,
                  "batch_size": args.train_bs, "seed": args.seed},
        "dataset": _dataset_manifest(args),
        "train_accuracy": accuracy,
        "artifacts": {MODEL_WEIGHTS: _sha256(ckpt), MODEL_CONFIG: _sha256(cfg_path)},
    })
    print(f"trained {args.arch} model: accuracy {accuracy:.3f} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def _prepare_campaign_dir(out, force: bool):
    if os.path.isdir(out) and os.listdir(out):
        if not force:
            raise ValueError(f"campaign dir {out} is not empty; pass --force to overwrite")
        for root, _, files in os.walk(out):
            for f in files:
                os.unlink(os.path.join(root, f))
    os.makedirs(out, exist_ok=True)


def cmd_attack(args) -> int:
    model = _load_model_dir(args.model)
    ds = _load_dataset(args)
    epsilon = parse_intensity(args.epsilon)
    step = parse_intensity(args.step_size) if args.step_size else None

    inner = AttackConfig(epsilon=epsilon, step_size=step, num_steps=args.pgd_steps,
                         num_eot=args.num_eot, max_shift=args.max_shift,
                         seed=args.seed, random_start=args.random_start)
    cfg = AdaptiveConfig(inner, num_rounds=args.num_rounds, batch_size=args.bs,
                         mode=args.mode)

    _prepare_campaign_dir(args.out, args.force)
    ids = np.arange(len(ds))
    _write_image_dir(os.path.join(args.out, ORIGINALS_DIR), ds.images, ids)

    def on_round(rnd, images, report):
        _write_image_dir(os.path.join(args.out, round_dir(rnd)), images, ids)
        print(f"round {rnd:3d}: max linf {report.max_linf:.6f} "
              f"({report.max_linf / epsilon if epsilon else 0.0:.2f} eps), "
              f"success rate {report.success_rate:.2f}")

    result = adaptive_attack(model, ds.images, ds.labels, cfg,
                             force_reattack=args.force_reattack,
                             jobs=args.jobs, round_callback=on_round)

    _write_image_dir(os.path.join(args.out, FINAL_DIR), result.final_images, ids)
    ledger_path = os.path.join(args.out, "ledger.csv")
    result.ledger.to_csv(ledger_path)

    report_path = os.path.join(args.out, "report.json")
    _json_dump(report_path, {
        "schema_version": SCHEMA_VERSION,
        "mode": args.mode,
        "epsilon": epsilon,
        "rounds": [r.to_dict() for r in result.reports],
        "budget_violations": [v.to_dict() for v in
                              verify_budget(result.ledger, epsilon)],
        "envelope_violations": [v.to_dict() for v in
                                envelope_violations(result.ledger, epsilon)],
        "growth": (fit_growth_law_ledger(result.ledger).to_dict()
                   if cfg.num_rounds >= 2 else None),
        "success_count": int(result.state.success.sum()),
        "num_samples": len(ds),
    })

    artifacts = {"ledger.csv": _sha256(ledger_path),
                 "report.json": _sha256(report_path)}
    for root, _, files in os.walk(os.path.join(args.out, "images")):
        for f in sorted(files):
            full = os.path.join(root, f)
            artifacts[os.path.relpath(full, args.out)] = _sha256(full)
    _json_dump(os.path.join(args.out, "manifest.json"), {
        "schema_version": SCHEMA_VERSION,
        "command": "attack",
        "epsilon": epsilon,
        "mode": args.mode,
        "num_rounds": args.num_rounds,
        "batch_size": args.bs,
        "pgd_steps": args.pgd_steps,
        "num_eot": args.num_eot,
        "max_shift": args.max_shift,
        "step_size": step,
        "random_start": args.random_start,
        "force_reattack": args.force_reattack,
        "seed": args.seed,
        "model": {"path": os.path.abspath(args.model),
                  "weights_sha256": _sha256(os.path.join(args.model, MODEL_WEIGHTS))},
        "dataset": _dataset_manifest(args),
        "artifacts": artifacts,
    })
    print(f"campaign complete: {result.state.success.sum()}/{len(ds)} samples "
          f"flipped over {cfg.num_rounds} rounds -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def cmd_audit(args) -> int:
    epsilon = parse_intensity(args.epsilon) if args.epsilon else None
    report = audit_campaign(args.campaign, epsilon=epsilon,
                            tolerance=args.tolerance, quantize=args.quantize)
    if args.out:
        _json_dump(args.out, {"schema_version": SCHEMA_VERSION, **report.to_dict()})

    print(f"audit of {args.campaign}: epsilon {report.epsilon:.6f}, "
          f"tolerance {report.tolerance:.3g}"
          + (", 8-bit quantized" if report.quantized else ""))
    if report.growth is not None:
        print(f"growth fit: slope {report.growth.slope:.6f} per round over "
              f"{report.growth.rounds} rounds (rms residual {report.growth.residual:.2e})")
    for v in report.violations[:args.max_print]:
        print(f"VIOLATION sample {v.sample_id} round {v.round}: "
              f"linf {v.linf:.6f} = {v.factor:.2f} x epsilon")
    for o in report.orphans[:args.max_print]:
        print(f"ORPHAN {o}")
    for m in report.mismatches[:args.max_print]:
        print(f"MISMATCH {m}")
    hidden = (len(report.violations) + len(report.orphans)
              + len(report.mismatches)) - 3 * args.max_print
    if hidden > 0:
        print(f"... and more (truncated at {args.max_print} per kind)")
    if report.ok:
        print("audit clean: every stored image respects the budget")
        return 0
    print(f"audit FAILED: {len(report.violations)} violations, "
          f"{len(report.orphans)} orphans, {len(report.mismatches)} mismatches")
    return 1


# ---------------------------------------------------------------------------
# dump-images
# ---------------------------------------------------------------------------

def cmd_dump_images(args) -> int:
    if args.amplification <= 0:
        raise ValueError(f"--amplification must be > 0, got {args.amplification}")
    sub = FINAL_DIR if args.round is None else round_dir(args.round)
    stem = sample_name(args.sample)
    orig_path = os.path.join(args.campaign, ORIGINALS_DIR, stem + ".npy")
    adv_path = os.path.join(args.campaign, sub, stem + ".npy")
    for p in (orig_path, adv_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"no stored image: {p}")
    orig = np.load(orig_path).astype(np.float64)
    adv = np.load(adv_path).astype(np.float64)

    diff = np.clip(0.5 + args.amplification * (adv - orig), 0.0, 1.0)
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    for name, img in [("original", orig), ("adversarial", adv), ("diff", diff)]:
        png = _to_png(img)
        if png is None:
            raise ValueError(f"cannot render {img.shape[0]}-channel images as PNG")
        path = os.path.join(args.out, f"{stem}_{name}.png")
        png.save(path)
        wrote.append(path)
    print("wrote " + ", ".join(wrote))
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def _expand_config(argv) -> list:
    """Splice --config FILE contents into argv at the flag's position.

    The file is a JSON object whose keys are long flag names (underscores
    allowed). Behaves as if the settings were typed where --config appears,
    so later command line flags override the file.
    """
    out = []
    i = 0
    while i < len(argv):
        if argv[i] != "--config":
            out.append(argv[i])
            i += 1
            continue
        if i + 1 >= len(argv):
            raise ValueError("--config needs a file path")
        with open(argv[i + 1]) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError(f"{argv[i + 1]}: config must be a JSON object")
        for key, val in doc.items():
            flag = "--" + str(key).replace("_", "-")
            if isinstance(val, bool):
                if val:
                    out.append(flag)
            elif val is not None:
                out.extend([flag, str(val)])
        i += 2
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advaudit",
                                 description="multi-round attack campaigns "
                                             "with byte-level budget audits")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="JSON file of flag settings, spliced in place")
    _add_dataset_args(p)
    p.add_argument("--arch", default="ensemble", choices=["ensemble", "plain"])
    p.add_argument("--resolutions", default="16,8,4",
                   help="comma list, native resolution first")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--heads", type=int, default=3)
    p.add_argument("--aggregation", default="mean", choices=["mean", "median"])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--train-bs", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model directory to create")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run a multi-round campaign")
    p.add_argument("--config", help="JSON file of flag settings, spliced in place")
    _add_dataset_args(p)
    p.add_argument("--model", required=True, help="model directory from train")
    p.add_argument("--out", required=True, help="campaign directory to create")
    p.add_argument("--epsilon", default="8/255",
                   help="perturbation budget, float or fraction (default 8/255)")
    p.add_argument("--num-rounds", type=int, default=20)
    p.add_argument("--bs", type=int, default=32, help="attack batch size")
    p.add_argument("--pgd-steps", type=int, default=40)
    p.add_argument("--num-eot", type=int, default=10)
    p.add_argument("--max-shift", type=int, default=2)
    p.add_argument("--step-size", help="PGD step, float or fraction (default epsilon/4)")
    p.add_argument("--mode", default="CORRECTED", choices=list(MODES))
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--force-reattack", action="store_true",
                   help="re-attack successful samples every round")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty campaign directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("audit", help="recompute norms from stored images")
    p.add_argument("--config", help="JSON file of flag settings, spliced in place")
    p.add_argument("--campaign", required=True)
    p.add_argument("--epsilon", help="override the manifest budget")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--quantize", action="store_true",
                   help="snap images to the 8-bit grid before measuring")
    p.add_argument("--max-print", type=int, default=20)
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("dump-images", help="export original/adversarial/diff PNGs")
    p.add_argument("--config", help="JSON file of flag settings, spliced in place")
    p.add_argument("--campaign", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--round", type=int, help="round number (default: final images)")
    p.add_argument("--amplification", type=float, default=10.0,
                   help="gain applied to the difference image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_images)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = build_parser().parse_args(_expand_config(argv))
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
