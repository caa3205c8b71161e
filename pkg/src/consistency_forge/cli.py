"""Operator surface: data generation, training, evaluation, plotting.

Run-directory layout: a canonical config copy, a manifest tying outputs
to the config hash and seed, plus checkpoints/, metrics/ and reports/.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, SEED_ENV_VAR, load_config, make_schedule
from .errors import ConfigError, DataError, ForgeError, NumericError
from .evaluation import (
    energy_scatter,
    evaluate_structures,
    load_per_molecule_csv,
    save_report,
    save_scatter_csv,
)
from .model import load_checkpoint
from .plots import energy_scatter_svg, loss_curves_svg, rmsd_distribution_svg
from .synth import build_corpus, load_corpus
from .train import baseline_pair_run, finetune, multitask_weights, train


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def _load_run_config(args) -> RunConfig:
    return load_config(args.config, args.set or [])


def _write_manifest(out_dir: Path, command: str, run: RunConfig, seed: int,
                    extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    run.write(out_dir / "config.ini")
    manifest = {
        "command": command,
        "config_hash": run.config_hash(),
        "seed": seed,
        "package_version": __version__,
    }
    manifest.update(extra or {})
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_gen_data(args) -> int:
    run = _load_run_config(args)
    seed = _env_seed()
    if seed is not None:
        run = load_config(args.config, (args.set or []) + [f"corpus.seed={seed}"])
    out_dir = Path(args.out)
    report = build_corpus(run.corpus, out_dir)
    hashes = {
        p.name: _file_sha256(p) for p in sorted(out_dir.glob("*.jsonl"))
    }
    _write_manifest(out_dir, "gen-data", run, run.corpus.seed,
                    {"generation_report": report, "data_hashes": hashes})
    print(f"wrote corpus to {out_dir} "
          f"(median degradation RMSD {report['degradation_rmsd']['median']:.3f} A)")
    return 0


def _parse_seeds(args, default_seed: int) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    return [default_seed + k for k in range(5)]


def cmd_train(args) -> int:
    run = _load_run_config(args)
    seed = _env_seed()
    if seed is not None:
        run = load_config(args.config, (args.set or []) + [f"train.seed={seed}"])
    corpus = load_corpus(Path(args.data))
    out_dir = Path(args.out)

    if args.arm == "paired":
        seeds = _parse_seeds(args, run.train.seed)
        report = baseline_pair_run(run, corpus, out_dir, seeds)
        _write_manifest(out_dir, "train", run, run.train.seed,
                        {"arm": "paired", "seeds": seeds})
        for sampler, entry in report["paired"].items():
            print(f"paired[{sampler}]: mean delta {entry['mean_delta']:.4f} A, "
                  f"wins {entry['wins']}/{entry['n']}, p={entry['p_value']}")
        return 0

    if args.arm == "multitask":
        weights = multitask_weights(run.weights)
        use_force = False
    else:
        weights = run.weights
        use_force = run.train.use_force_loss
    result = train(run, corpus, out_dir, weights=weights, use_force=use_force,
                   tag=args.arm, resume=args.resume)
    if args.finetune_split:
        result = finetune(run, result.model, corpus, out_dir,
                          split=args.finetune_split, tag=f"{args.arm}_finetuned")
    _write_manifest(out_dir, "train", run, run.train.seed,
                    {"arm": args.arm, "checkpoint": str(result.checkpoint_path)})
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_evaluate(args) -> int:
    run = _load_run_config(args)
    seed = _env_seed()
    if seed is not None:
        run = load_config(args.config, (args.set or []) + [f"eval.seed={seed}"])
    model, meta = load_checkpoint(Path(args.checkpoint))
    corpus = load_corpus(Path(args.data))
    sched = make_schedule(run.schedule.__class__(**meta["schedule"]))
    eval_cfg = run.eval
    if args.sampler:
        eval_cfg = dataclasses.replace(eval_cfg, sampler=args.sampler)
    if args.n_samples:
        eval_cfg = dataclasses.replace(eval_cfg, n_samples=args.n_samples)
    if eval_cfg.coverage_delta is not None:
        delta = eval_cfg.coverage_delta
    elif corpus.generation_report is not None:
        delta = float(corpus.generation_report["degradation_rmsd"]["median"])
    else:
        delta = 0.25
    out_dir = Path(args.out)
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    report = evaluate_structures(model, corpus.split("test"), sched, run.sampling,
                                 eval_cfg, coverage_delta=delta)
    prefix = f"eval_{eval_cfg.sampler}"
    csv_path, json_path = save_report(report, reports_dir, prefix)
    pairs = energy_scatter(model, corpus.split("test"), sched, run.sampling, eval_cfg)
    scatter_csv = reports_dir / f"{prefix}_scatter.csv"
    save_scatter_csv(pairs, scatter_csv)
    energy_scatter_svg(pairs, reports_dir / f"{prefix}_scatter.svg")
    _write_manifest(out_dir, "evaluate", run, eval_cfg.seed,
                    {"checkpoint": str(args.checkpoint),
                     "checkpoint_config_hash": meta["config_hash"],
                     "sampler": eval_cfg.sampler, "coverage_delta": delta})
    agg = report.aggregates()
    print(f"evaluated {agg['n_molecules']} molecules with {eval_cfg.sampler} sampler")
    print(f"rmsd mean {agg['rmsd_mean_mean']:.4f} A, min {agg['rmsd_min_mean']:.4f} A, "
          f"coverage@{delta:.3g} {agg['coverage_mean']:.3f}")
    print(f"reports: {csv_path}, {json_path}")
    return 0


def cmd_plot(args) -> int:
    base = Path(args.report_dir)
    if not base.exists():
        raise DataError(f"report directory not found: {base}")
    search_dirs = [base, base / "reports", base / "metrics"]
    per_mol = sorted({p for d in search_dirs if d.is_dir()
                      for p in d.glob("eval_*_per_molecule.csv")})
    scatters = sorted({p for d in search_dirs if d.is_dir()
                       for p in d.glob("*scatter.csv")})
    metrics = sorted({p for d in search_dirs if d.is_dir()
                      for p in d.glob("*.csv")
                      if p.name not in {q.name for q in per_mol}
                      and "scatter" not in p.name and "per_molecule" not in p.name
                      and "paired" not in p.name})
    out_dir = Path(args.out) if args.out else base
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if per_mol:
        values = {}
        for path in per_mol:
            rows = load_per_molecule_csv(path)
            label = path.stem.replace("_per_molecule", "")
            values[label] = [float(r["rmsd_mean"]) for r in rows]
        target = out_dir / "rmsd_distribution.svg"
        rmsd_distribution_svg(values, target)
        made.append(target)
    for path in scatters:
        rows = load_per_molecule_csv(path)
        pairs = [(r["id"], float(r["e_pred_at_gen"]), float(r["e_pred_at_eq"]))
                 for r in rows]
        target = out_dir / (path.stem + ".svg")
        energy_scatter_svg(pairs, target)
        made.append(target)
    for path in metrics:
        try:
            target = out_dir / f"loss_curves_{path.stem}.svg"
            loss_curves_svg(path, target)
            made.append(target)
        except (DataError, KeyError, ValueError):
            continue
    if not made:
        raise DataError(f"no plottable reports found under {base}")
    for p in made:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consistency-forge",
        description="physics-consistency training for molecular energy and "
                    "equilibrium-structure prediction on synthetic corpora",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="key=value config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")

    p = sub.add_parser("gen-data", help="generate the synthetic two-fidelity corpus")
    add_common(p)
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model (one arm or the paired experiment)")
    add_common(p)
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--arm", choices=("multitask", "consistency", "paired"),
                   default="consistency")
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds for --arm paired (default: seed..seed+4)")
    p.add_argument("--resume", action="store_true",
                   help="resume from the last saved train state")
    p.add_argument("--finetune-split", default=None,
                   help="after training, fine-tune on this split (e.g. finetune)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    add_common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sampler", choices=("denoising", "ddim"), default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("plot", help="render figures from a run or report directory")
    p.add_argument("report_dir")
    p.add_argument("--out", default=None, help="figure output directory (default: report dir)")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except ForgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
