"""Command line entry point: ``ticketlab <command> --config exp.json``.

Exit code 0 on success; on failure a JSON object ``{"error", "message"}`` is
written to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .checkpoint import DigestMismatch, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, build_task_datasets, bundle
from .data import ImagePair, load_png_dir, save_png
from .model import MicroPromptNet, describe
from .pruning import SparsityMask, compression_rate, format_compression, sparsity
from .train import DataBundle, EvalRecord, RunCheckpoint, evaluate_tasks, lth_run, oneshot_run

log = logging.getLogger("ticketlab")

EVAL_SCHEMA = {
    "type": "object",
    "required": ["kind", "fraction", "surviving_prunable", "surviving_params", "total_params",
                 "sparsity", "compression", "tasks", "psnr", "ssim"],
    "properties": {
        "kind": {"enum": ["magnitude", "random", "checkpoint"]},
        "fraction": {"type": ["number", "null"]},
        "surviving_prunable": {"type": "integer"},
        "surviving_params": {"type": "integer"},
        "total_params": {"type": "integer"},
        "sparsity": {"type": "number"},
        "compression": {"type": "string", "pattern": "^x[0-9]+\\.[0-9]{2}$"},
        "psnr": {"type": ["number", "string"]},
        "ssim": {"type": "number"},
        "tasks": {"type": "object"},
    },
}


class CLIError(Exception):
    pass


def jsonable(obj):
    """Replace non-finite floats by strings so output stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def _dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    return cfg


# datagen ------------------------------------------------------------------------

def _manifest_entry(p: ImagePair, split: str) -> dict:
    return {"source": p.source, "split": split, "task": p.task,
            "spec": p.spec.to_dict() if p.spec else None,
            "seed": p.spec.seed if p.spec else None, "aug_seed": p.aug_seed}


def cmd_datagen(args) -> dict:
    cfg = _load_config(args)
    root = Path(cfg.data.root)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise CLIError(f"output directory {root} is not empty; use --force to overwrite")
        shutil.rmtree(root)
    sets = build_task_datasets(cfg.data)
    combined = []
    for task, splits in sets.items():
        entries = []
        for split, pairs in splits.items():
            d = root / task / split
            d.mkdir(parents=True, exist_ok=True)
            for p in pairs:
                save_png(d / f"{p.source}_clean.png", p.clean)
                save_png(d / f"{p.source}_degraded.png", p.degraded)
                entries.append(_manifest_entry(p, split))
        (root / task / "manifest.json").write_text(json.dumps(entries, indent=1) + "\n")
        combined += entries
    b = bundle(sets, cfg.data.seed)
    all_dir = root / "all"
    all_dir.mkdir(parents=True, exist_ok=True)
    all_train = [_manifest_entry(p, "train") for p in b.train]
    (all_dir / "manifest.json").write_text(json.dumps(
        {"train": all_train, "val": [_manifest_entry(p, "val") for p in b.val],
         "test": [e for e in combined if e["split"] == "test"]}, indent=1) + "\n")
    (root / "manifest.json").write_text(json.dumps(
        {"config_digest": cfg.digest(), "data": cfg.data.to_dict(), "pairs": combined}, indent=1) + "\n")
    counts = {t: {s: len(v) for s, v in sp.items()} for t, sp in sets.items()}
    return {"root": str(root), "counts": counts, "all_in_one_train": len(all_train)}


def load_bundle(cfg: ExperimentConfig) -> DataBundle:
    root = Path(cfg.data.root)
    if not (root / "manifest.json").exists():
        raise CLIError(f"no dataset at {root}; run `ticketlab datagen` first")
    sets = {}
    for task in cfg.data.tasks:
        manifest = {e["source"]: e for e in json.loads((root / task / "manifest.json").read_text())}
        sets[task] = {}
        for split in ("train", "val", "test"):
            ds = load_png_dir(root / task / split, task=task, split=split)
            for p in ds.pairs:
                e = manifest.get(p.source)
                if e is not None:
                    p.aug_seed = int(e["aug_seed"])
                    p.spec = data_mod.DegradationSpec.from_dict(e["spec"]) if e["spec"] else None
            sets[task][split] = ds.pairs
        if not sets[task]["train"]:
            raise CLIError(f"no training pairs for task {task} under {root / task / 'train'}")
    return bundle(sets, cfg.data.seed)


# training ---------------------------------------------------------------------

def _round_dir(run_dir: Path, k: int) -> Path:
    return run_dir / f"round_{k:03d}"


def _append_jsonl(path: Path, obj) -> None:
    with open(path, "a") as fh:
        fh.write(_dumps(obj) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _latest_round(run_dir: Path) -> int | None:
    rounds = sorted(int(p.name.split("_")[1]) for p in run_dir.glob("round_*") if (p / "meta.json").exists())
    return rounds[-1] if rounds else None


def _run(cfg: ExperimentConfig, args, max_rounds: int | None = None) -> dict:
    run_dir = Path(cfg.report.run_dir)
    digest = cfg.digest()
    prune_cfg = cfg.prune
    if max_rounds is not None:
        prune_cfg = type(prune_cfg).from_dict({**prune_cfg.to_dict(), "max_rounds": max_rounds})
    resume = None
    if run_dir.exists() and any(run_dir.iterdir()):
        if getattr(args, "resume", False):
            k = _latest_round(run_dir)
            if k is None:
                raise CLIError(f"nothing to resume in {run_dir}")
            resume = load_checkpoint(_round_dir(run_dir, k), digest, args.override_digest)
            for name in ("log.jsonl", "rounds.jsonl"):
                kept = [r for r in _read_jsonl(run_dir / name) if r["round"] <= k]
                (run_dir / name).write_text("".join(_dumps(r) + "\n" for r in kept))
            for stale in run_dir.glob("round_*"):
                if int(stale.name.split("_")[1]) > k:
                    shutil.rmtree(stale)
            (run_dir / "status.json").unlink(missing_ok=True)
        elif args.force:
            shutil.rmtree(run_dir)
        else:
            raise CLIError(f"run directory {run_dir} is not empty; use --force or --resume")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.json")
    data = load_bundle(cfg)

    def on_epoch(rec):
        _append_jsonl(run_dir / "log.jsonl", {**rec, "config_digest": digest})

    def on_round(ckpt: RunCheckpoint):
        save_checkpoint(_round_dir(run_dir, ckpt.round), ckpt)
        _append_jsonl(run_dir / "rounds.jsonl", {**ckpt.record, "config_digest": digest})
        log.info("round %d: sparsity %.3f psnr %.2f", ckpt.round, ckpt.record["sparsity"],
                 ckpt.record["psnr"])

    res = lth_run(cfg.model, prune_cfg, cfg.train, data, digest, resume=resume,
                  on_round=on_round, on_epoch=on_epoch)
    (run_dir / "status.json").write_text(_dumps({"complete": True, "config_digest": digest}) + "\n")
    rows = _read_jsonl(run_dir / "rounds.jsonl")
    return {"run_dir": str(run_dir), "rounds_executed": len(rows) - 1, "new_rounds": len(res.records),
            "final": rows[-1] if rows else None}


def cmd_train(args) -> dict:
    return _run(_load_config(args), args, max_rounds=0)


def cmd_lth(args) -> dict:
    return _run(_load_config(args), args)


def _eval_payload(kind: str, fraction, net: MicroPromptNet, mask: SparsityMask,
                  per_task: dict[str, EvalRecord]) -> dict:
    store = net.params
    nonprunable = store.total_count() - store.prunable_count()
    surv = mask.survivors()
    return {
        "kind": kind, "fraction": fraction,
        "surviving_prunable": surv, "surviving_params": surv + nonprunable,
        "total_params": store.total_count(), "sparsity": sparsity(mask),
        "compression": format_compression(store.total_count(), surv + nonprunable),
        "compression_prunable": compression_rate(store.prunable_count(), max(surv, 1)),
        "psnr": float(np.mean([r.psnr for r in per_task.values()])),
        "ssim": float(np.mean([r.ssim for r in per_task.values()])),
        "tasks": {t: r.to_dict() for t, r in per_task.items()},
    }


def cmd_oneshot(args) -> dict:
    cfg = _load_config(args)
    run_dir = Path(cfg.report.run_dir)
    src = Path(args.checkpoint) if args.checkpoint else _round_dir(run_dir, 0)
    if not (src / "meta.json").exists():
        raise CLIError(f"dense checkpoint {src} not found; run `ticketlab train` first")
    ckpt = load_checkpoint(src, cfg.digest(), args.override_digest)
    if ckpt.round != 0:
        raise CLIError(f"{src} is round {ckpt.round}; one-shot baselines start from the dense round 0")
    data = load_bundle(cfg)
    dense = MicroPromptNet(cfg.model, ckpt.theta)
    net, mask, per_task = oneshot_run(dense, args.kind, args.fraction, cfg.train, data)
    out = run_dir / f"oneshot_{args.kind}_{args.fraction:g}"
    save_checkpoint(out, RunCheckpoint(ckpt.theta0, net.params, mask, 0, ckpt.seeds, ckpt.config_digest),
                    {"oneshot": {"kind": args.kind, "fraction": args.fraction}})
    payload = _eval_payload(args.kind, args.fraction, net, mask, per_task)
    (out / "eval.json").write_text(_dumps(payload) + "\n")
    return payload


def cmd_eval(args) -> dict:
    cfg = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint, cfg.digest(), args.override_digest)
    if args.data:
        task = args.task or data_mod.TASKS[-1]
        test = {task: load_png_dir(args.data, task=task, split="test").pairs}
    else:
        test = load_bundle(cfg).test
    net = MicroPromptNet(cfg.model, ckpt.theta)
    per_task = evaluate_tasks(net, test, ckpt.mask, cfg.train.clamp_eval, -1)
    return _eval_payload("checkpoint", None, net, ckpt.mask, per_task)


def build_report(run_dir: Path) -> tuple[list[dict], bool]:
    rows = _read_jsonl(run_dir / "rounds.jsonl")
    complete = (run_dir / "status.json").exists()
    table = []
    for r in sorted(rows, key=lambda r: r["round"]):
        for task, m in sorted(r["tasks"].items()):
            table.append({"round": r["round"], "task": task, "surviving_params": r["surviving_params"],
                          "surviving_prunable": r["surviving_prunable"], "sparsity": r["sparsity"],
                          "psnr": m["psnr"], "ssim": m["ssim"]})
    return table, complete


REPORT_FIELDS = ["round", "task", "surviving_params", "surviving_prunable", "sparsity", "psnr", "ssim"]


def read_report_csv(path: Path) -> list[dict]:
    conv = {"round": int, "surviving_params": int, "surviving_prunable": int,
            "sparsity": float, "psnr": float, "ssim": float, "task": str}
    with open(path, newline="") as fh:
        return [{k: conv[k](v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cmd_report(args) -> dict:
    run_dir = Path(args.run_dir) if args.run_dir else Path(_load_config(args).report.run_dir)
    table, complete = build_report(run_dir)
    if not table:
        raise CLIError(f"no completed rounds in {run_dir}")
    if not complete:
        log.warning("run in %s is incomplete; writing a partial report", run_dir)
    with open(run_dir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    (run_dir / "report.json").write_text(_dumps({"complete": complete, "rows": table}) + "\n")
    return {"rows": len(table), "complete": complete, "csv": str(run_dir / "report.csv"),
            "json": str(run_dir / "report.json")}


def cmd_describe(args) -> dict:
    from .model import init_params

    cfg = _load_config(args)
    return describe(init_params(cfg.model, cfg.train.seed))


# plumbing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ticketlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="overrides train.seed and data.seed")
        p.add_argument("--force", action="store_true", help="overwrite non-empty outputs")
        p.add_argument("--override-digest", action="store_true",
                       help="load checkpoints written under a different config")
        return p

    common(sub.add_parser("datagen", help="synthesize train/val/test PNGs and manifests"))
    common(sub.add_parser("train", help="train the dense network only (round 0)"))
    p = common(sub.add_parser("lth", help="iterative prune-and-rewind run"))
    p.add_argument("--resume", action="store_true", help="continue from the latest round checkpoint")
    p = common(sub.add_parser("oneshot", help="one-shot pruning baseline from the dense checkpoint"))
    p.add_argument("--kind", choices=["magnitude", "random"], default="magnitude")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--checkpoint", help="dense checkpoint dir (default <run_dir>/round_000)")
    p = common(sub.add_parser("eval", help="PSNR/SSIM of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory of *_clean/*_degraded PNG pairs (default: config test sets)")
    p.add_argument("--task", choices=list(data_mod.TASKS))
    p = common(sub.add_parser("report", help="per-round CSV/JSON table for plotting"))
    p.add_argument("--run-dir")
    common(sub.add_parser("describe", help="architecture summary as JSON"))
    return parser


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "lth": cmd_lth, "oneshot": cmd_oneshot,
            "eval": cmd_eval, "report": cmd_report, "describe": cmd_describe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (CLIError, DigestMismatch, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(jsonable(result), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
