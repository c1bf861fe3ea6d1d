"""Command-line entry point: one experiment = one JSON config, overridable by
dotted-path --set flags; every run emits a RunManifest alongside its outputs.

Subcommands: ingest, synth, pretrain, align, finetune, eval, report.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, aligner, edf, nn, pipeline, synth

log = logging.getLogger("sleepalign")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config


def _load_config(args) -> dict:
    config = {}
    if getattr(args, "config", None):
        config = json.loads(Path(args.config).read_text())
    return _apply_overrides(config, getattr(args, "set", None) or [])


def _require(config: dict, *keys: str):
    missing = [k for k in keys if _dig(config, k) is None]
    if missing:
        raise SystemExit(f"config missing required keys: {missing}")


def _dig(config: dict, dotted: str):
    node = config
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return None
        node = node[p]
    return node


def _write_manifest(out_dir: Path, subcommand: str, config: dict,
                    inputs: list[Path], outputs: list[Path], seed: int,
                    started: float):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "input_hashes": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "tool_version": __version__,
        "wall_clock": round(time.perf_counter() - started, 4),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _train_config(config: dict, seed: int) -> pipeline.TrainConfig:
    tc = dict(config.get("train", {}))
    tc.setdefault("seed", seed)
    return pipeline.TrainConfig(**tc)


def _policy(config: dict) -> aligner.SelectionPolicy:
    return aligner.SelectionPolicy(**config.get("policy", {}))


def cmd_ingest(args) -> int:
    started = time.perf_counter()
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = Path(args.edf).read_bytes()
    header, signals = edf.parse_edf(raw)
    channel = edf.select_channel(signals, args.channel)
    channel = edf.resample(channel, edf.TARGET_HZ)
    labels = edf.read_hypnogram(args.hypnogram) if args.hypnogram else None
    dataset = edf.segment(channel, labels, domain=args.domain,
                          subject_id=args.subject or Path(args.edf).stem)
    dataset.provenance.update({
        "edf_file": str(args.edf),
        "hypnogram_file": str(args.hypnogram) if args.hypnogram else None,
        "resampled_to_hz": edf.TARGET_HZ,
    })
    edf.save_dataset(dataset, out_dir)
    inputs = [Path(args.edf)] + ([Path(args.hypnogram)] if args.hypnogram else [])
    _write_manifest(out_dir, "ingest", config, inputs,
                    [out_dir / "epochs.npy", out_dir / "dataset.json",
                     out_dir / "manifest.json"], args.seed, started)
    print(f"ingested {len(dataset)} epochs -> {out_dir}")
    return 0


def cmd_synth(args) -> int:
    started = time.perf_counter()
    config = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    shift = synth.shift_preset(config.get("shift", "identity"))
    dataset = synth.gen_domain(
        n_per_class=int(config.get("n_per_class", 10)),
        shift=shift,
        seed=args.seed,
        domain=config.get("domain", "source"),
    )
    edf.save_dataset(dataset, out_dir)
    _write_manifest(out_dir, "synth", config, [],
                    [out_dir / "epochs.npy", out_dir / "dataset.json"],
                    args.seed, started)
    print(f"generated {len(dataset)} synthetic epochs -> {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.perf_counter()
    config = _load_config(args)
    _require(config, "dataset")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = edf.load_dataset(config["dataset"])
    cfg = _train_config(config, args.seed)
    model = pipeline.pretrain(dataset, cfg)
    ckpt = out_dir / "model.ckpt"
    nn.save_checkpoint(model, ckpt, train_config=dataclasses.asdict(cfg))
    _write_manifest(out_dir, "pretrain", config,
                    [Path(config["dataset"]) / "epochs.npy"],
                    [ckpt], args.seed, started)
    print(f"pretrained checkpoint -> {ckpt}")
    return 0


def _load_align_parts(config: dict):
    model = nn.load_checkpoint(config["checkpoint"])
    source = edf.load_dataset(config["source"])
    target = edf.load_dataset(config["target"])
    return model, source, target


def cmd_align(args) -> int:
    started = time.perf_counter()
    config = _load_config(args)
    _require(config, "checkpoint", "source", "target")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, source, target = _load_align_parts(config)
    policy = _policy(config)
    source_feats = nn.extract_features(model, source)
    target_feats = nn.extract_features(model, target)
    batches = aligner.make_batches(source, source_feats,
                                   int(config.get("batch_size", aligner.DEFAULT_BATCH_SIZE)))
    rewards = aligner.score_batches(batches, target_feats, policy=policy)
    selection = aligner.select(rewards, policy)
    csv_path = out_dir / "scoring.csv"
    json_path = out_dir / "scoring_summary.json"
    aligner.write_scoring_report(rewards, selection, policy, csv_path, json_path)
    _write_manifest(out_dir, "align", config,
                    [Path(config["checkpoint"])], [csv_path, json_path],
                    args.seed, started)
    print(f"scored {len(rewards)} batches, selected {len(selection.selected_ids)} -> {csv_path}")
    return 0


def cmd_finetune(args) -> int:
    started = time.perf_counter()
    config = _load_config(args)
    _require(config, "checkpoint", "source", "target")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, source, target = _load_align_parts(config)
    policy = _policy(config)
    cfg = _train_config(config, args.seed)
    outcome = pipeline.selective_finetune(
        model, source, target, policy, cfg,
        batch_size=int(config.get("batch_size", aligner.DEFAULT_BATCH_SIZE)))
    ckpt = out_dir / "model.ckpt"
    nn.save_checkpoint(outcome.model, ckpt, train_config=dataclasses.asdict(cfg))
    csv_path = out_dir / "scoring.csv"
    json_path = out_dir / "scoring_summary.json"
    aligner.write_scoring_report(outcome.rewards, outcome.selection, policy,
                                 csv_path, json_path)
    _write_manifest(out_dir, "finetune", config,
                    [Path(config["checkpoint"])], [ckpt, csv_path, json_path],
                    args.seed, started)
    if outcome.warnings:
        print(f"warning: {outcome.warnings}", file=sys.stderr)
    print(f"finetuned checkpoint -> {ckpt}")
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    config = _load_config(args)
    _require(config, "checkpoint", "dataset")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = nn.load_checkpoint(config["checkpoint"])
    dataset = edf.load_dataset(config["dataset"])
    report = pipeline.evaluate(model, dataset,
                               protocol=config.get("protocol", ""), seed=args.seed)
    json_path = out_dir / "eval_report.json"
    csv_path = out_dir / "confusion.csv"
    pipeline.save_report(report, json_path, csv_path)
    _write_manifest(out_dir, "eval", config, [Path(config["checkpoint"])],
                    [json_path, csv_path], args.seed, started)
    print(f"accuracy {report.accuracy:.4f} macro-F1 {report.macro_f1:.4f} -> {json_path}")
    return 0


def cmd_report(args) -> int:
    """Aggregate eval_report.json files into one comparison table."""
    rows = []
    for path in args.reports:
        data = json.loads(Path(path).read_text())
        rows.append((data.get("protocol") or Path(path).parent.name,
                     data["accuracy"], data["macro_f1"]))
    print(f"{'protocol':<24}{'accuracy':>10}{'macro_f1':>10}")
    for name, acc, f1 in rows:
        print(f"{name:<24}{acc:>10.4f}{f1:>10.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sleepalign",
        description="Selective transfer learning for sleep staging",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config key (dotted path, JSON value)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel batch scoring bound (1 = sequential)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ingest", help="parse an EDF + hypnogram into an epoch dataset")
    p.add_argument("--edf", required=True)
    p.add_argument("--hypnogram")
    p.add_argument("--channel", required=True)
    p.add_argument("--domain", default="source", choices=["source", "target"])
    p.add_argument("--subject")
    common(p)
    p.set_defaults(func=cmd_ingest)

    for name, fn, help_text in [
        ("synth", cmd_synth, "generate a synthetic labeled dataset"),
        ("pretrain", cmd_pretrain, "pre-train the staging model"),
        ("align", cmd_align, "score and select source batches against a target"),
        ("finetune", cmd_finetune, "selectively fine-tune a checkpoint"),
        ("eval", cmd_eval, "evaluate a checkpoint on labeled data"),
    ]:
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="tabulate evaluation reports")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SLEEPALIGN_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out) if getattr(args, "out", None) else None
    try:
        return args.func(args)
    except (edf.EdfError, nn.NnError, aligner.AlignerError,
            pipeline.PipelineError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        # do not leave partial outputs behind
        if out_dir is not None and out_dir.exists():
            for p in out_dir.glob("*"):
                if p.is_file() and p.name != "run_manifest.json":
                    p.unlink()
        return 1


if __name__ == "__main__":
    sys.exit(main())
