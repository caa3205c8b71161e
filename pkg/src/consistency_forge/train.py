"""Two-stage training orchestration, fine-tuning, and the paired
baseline experiment.

Stage 1 optimizes the multi-task loss over all parameters; stage 2 adds
the consistency losses (structure-decoder only) and, when enabled, the
force loss (encoder + energy head). The optimizer is Adam with linear
warmup followed by linear decay. All stochastic draws come from named
numpy streams derived from the seed, so runs are bit-reproducible;
arms of the paired experiment share the stage-1 state and the stage-2
data-order stream, which isolates the effect of the consistency losses.
"""
from __future__ import annotations

import base64
import copy
import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .config import RunConfig, make_schedule, schedule_meta
from .errors import ConfigError, DataError, NumericError
from .evaluation import EvalReport, evaluate_structures, save_report
from .losses import (
    LossWeights,
    denoising_loss_batch,
    force_loss_batch,
    multi_task_loss_batch,
    optimality_consistency_loss_batch,
    score_consistency_loss_batch,
)
from .model import GraphBatch, JointModel, save_checkpoint, state_hash
from .synth import Corpus, LabeledSample

METRICS_COLUMNS = (
    "step", "stage", "loss_total", "loss_energy", "loss_denoise",
    "loss_optim", "loss_score", "loss_force", "lr", "seed",
)

STREAM_BATCH, STREAM_NOISE, STREAM_CONSISTENCY, STREAM_FORCE = 10, 11, 12, 13


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    model: JointModel


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def _lr_at(step: int, warmup: int, total: int, peak: float) -> float:
    if total <= 0:
        return peak
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total <= warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


def _pad_coords(coords_list: list[np.ndarray], amax: int) -> torch.Tensor:
    out = np.zeros((len(coords_list), amax, 3))
    for k, c in enumerate(coords_list):
        out[k, : len(c)] = c
    return torch.from_numpy(out)


class _PaddedSet:
    """Records pre-padded to a common atom count for cheap batch assembly."""

    def __init__(self, records: list[LabeledSample], with_forces: bool = False):
        self.records = records
        self.n = len(records)
        if not records:
            return
        amax = max(r.graph.atom_count for r in records)
        self.atom_types = np.zeros((self.n, amax), dtype=np.int64)
        self.bond_order = np.zeros((self.n, amax, amax), dtype=np.int64)
        self.mask = np.zeros((self.n, amax), dtype=np.float64)
        self.coords = np.zeros((self.n, amax, 3), dtype=np.float64)
        self.energies = np.full(self.n, np.nan)
        self.forces = np.zeros((self.n, amax, 3), dtype=np.float64) if with_forces else None
        for k, r in enumerate(records):
            a = r.graph.atom_count
            self.atom_types[k, :a] = r.graph.atom_types
            self.bond_order[k, :a, :a] = r.graph.bond_order_matrix()
            self.mask[k, :a] = 1.0
            self.coords[k, :a] = r.coords
            if r.energy is not None:
                self.energies[k] = r.energy
            if with_forces and r.forces is not None:
                self.forces[k, :a] = r.forces

    def batch(self, idx: np.ndarray):
        gb = GraphBatch.from_padded(
            self.atom_types[idx], self.bond_order[idx], self.mask[idx]
        )
        return gb, torch.from_numpy(self.coords[idx])


class _TrainData:
    """Indexed views of the corpus splits used during training."""

    def __init__(self, records: list[LabeledSample], force_records: list[LabeledSample]):
        if not records:
            raise DataError("training split has no structure records")
        self.records = records
        self._eq = _PaddedSet(records)
        self.force_records = force_records
        self._force = _PaddedSet(force_records, with_forces=True)

    def batch(self, idx: np.ndarray):
        gb, coords = self._eq.batch(idx)
        labels = torch.from_numpy(self._eq.energies[idx])
        return gb, coords, labels

    def force_batch(self, idx: np.ndarray):
        gb, coords = self._force.batch(idx)
        forces = torch.from_numpy(self._force.forces[idx])
        return gb, coords, forces


class TrainerState:
    """Model + optimizer + RNG streams; snapshotable for arm sharing and
    resumable from disk."""

    def __init__(self, run: RunConfig, seed: int):
        self.run = run
        self.seed = seed
        self.sched = make_schedule(run.schedule)
        run.consistency.validate_for(self.sched)
        torch.manual_seed(seed)
        self.model = JointModel(run.model)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=run.train.lr_peak, foreach=True)
        self.streams = {
            key: _stream(seed, key)
            for key in (STREAM_BATCH, STREAM_NOISE, STREAM_CONSISTENCY, STREAM_FORCE)
        }
        self.step = 0
        self.rows: list[dict] = []

    def snapshot(self) -> dict:
        return {
            "step": self.step,
            "model": copy.deepcopy(self.model.state_dict()),
            "opt": copy.deepcopy(self.opt.state_dict()),
            "rng": {k: copy.deepcopy(g.bit_generator.state) for k, g in self.streams.items()},
            "rows": copy.deepcopy(self.rows),
        }

    def restore(self, snap: dict) -> None:
        self.step = snap["step"]
        self.model.load_state_dict(copy.deepcopy(snap["model"]))
        self.opt.load_state_dict(copy.deepcopy(snap["opt"]))
        for k, state in snap["rng"].items():
            self.streams[int(k)].bit_generator.state = copy.deepcopy(state)
        self.rows = copy.deepcopy(snap["rows"])


def _state_to_disk(state: TrainerState, path: Path) -> None:
    buf = io.BytesIO()
    torch.save({"model": state.model.state_dict(), "opt": state.opt.state_dict()}, buf)
    payload = {
        "step": state.step,
        "seed": state.seed,
        "blob": base64.b64encode(buf.getvalue()).decode("ascii"),
        "rng": {str(k): g.bit_generator.state for k, g in state.streams.items()},
        "rows": state.rows,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def _state_from_disk(state: TrainerState, path: Path) -> None:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload["seed"] != state.seed:
        raise ConfigError(
            f"resume state was written with seed {payload['seed']}, not {state.seed}"
        )
    blob = torch.load(io.BytesIO(base64.b64decode(payload["blob"])), weights_only=True)
    state.model.load_state_dict(blob["model"])
    state.opt.load_state_dict(blob["opt"])
    for k, st in payload["rng"].items():
        state.streams[int(k)].bit_generator.state = st
    state.step = payload["step"]
    state.rows = payload["rows"]


def write_metrics(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([
                row["step"], row["stage"],
                repr(row["loss_total"]), repr(row["loss_energy"]),
                repr(row["loss_denoise"]), repr(row["loss_optim"]),
                repr(row["loss_score"]), repr(row["loss_force"]),
                repr(row["lr"]), row["seed"],
            ])


def _run_steps(
    state: TrainerState,
    data: _TrainData,
    weights: LossWeights,
    use_force: bool,
    stage: int,
    n_steps: int,
    lr_total: int,
    lr_warmup: int,
    lr_peak: float,
    checkpoint_cb=None,
) -> None:
    run = state.run
    sched = state.sched
    bsz = run.train.batch_size
    consistency_on = stage >= 2 and (weights.lambda_optim > 0 or weights.lambda_score > 0)
    force_on = stage >= 2 and use_force and weights.lambda_force > 0
    if force_on and not data.force_records:
        raise DataError("force loss enabled but the corpus has no force records")
    pure_consistency = (
        stage >= 2 and weights.lambda_energy == 0 and weights.lambda_denoise == 0
        and not force_on
    )
    frozen_ref = None
    if pure_consistency and run.train.mask_check_every > 0:
        part = state.model.partition()
        frozen_ref = state_hash({**part.encoder, **part.energy})

    end = state.step + n_steps
    while state.step < end:
        lr = _lr_at(state.step, lr_warmup, lr_total, lr_peak)
        for grp in state.opt.param_groups:
            grp["lr"] = lr
        state.opt.zero_grad(set_to_none=True)

        idx = state.streams[STREAM_BATCH].integers(0, len(data.records), size=bsz)
        gb, coords, labels = data.batch(idx)
        rng_noise = state.streams[STREAM_NOISE]
        t = torch.from_numpy(rng_noise.integers(1, sched.steps + 1, size=gb.size))
        eps = torch.from_numpy(
            rng_noise.standard_normal((gb.size, gb.max_atoms, 3))
        ) * gb.mask.unsqueeze(-1)
        total, parts = multi_task_loss_batch(
            state.model, gb, coords, labels, t, eps, sched, weights
        )
        row = {
            "step": state.step, "stage": stage,
            "loss_energy": parts["energy"], "loss_denoise": parts["denoise"],
            "loss_optim": 0.0, "loss_score": 0.0, "loss_force": 0.0,
            "lr": lr, "seed": state.seed,
        }

        if consistency_on:
            rng_cons = state.streams[STREAM_CONSISTENCY]
            cidx = rng_cons.integers(0, len(data.records), size=bsz)
            cgb, ccoords, _ = data.batch(cidx)
            if weights.lambda_optim > 0:
                optim_per = optimality_consistency_loss_batch(
                    state.model, cgb, sched, run.consistency, rng_cons
                )
                optim_mean = optim_per.mean()
                total = total + weights.lambda_optim * optim_mean
                row["loss_optim"] = float(optim_mean.detach())
            if weights.lambda_score > 0:
                score_per = score_consistency_loss_batch(
                    state.model, cgb, ccoords, sched, run.consistency, rng_cons
                )
                score_mean = score_per.mean()
                total = total + weights.lambda_score * score_mean
                row["loss_score"] = float(score_mean.detach())

        if force_on:
            rng_force = state.streams[STREAM_FORCE]
            fidx = rng_force.integers(0, len(data.force_records), size=min(bsz, len(data.force_records)))
            fgb, fcoords, fforces = data.force_batch(fidx)
            force_per = force_loss_batch(state.model, fgb, fcoords, fforces)
            force_mean = force_per.mean()
            total = total + weights.lambda_force * force_mean
            row["loss_force"] = float(force_mean.detach())

        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {state.step}"
                + (f"; last-good checkpoint: {checkpoint_cb(None)}" if checkpoint_cb else "")
            )
        total.backward()
        if run.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(state.model.parameters(), run.train.grad_clip)
        state.opt.step()

        row["loss_total"] = float(total.detach())
        state.rows.append(row)
        state.step += 1

        if frozen_ref is not None and state.step % run.train.mask_check_every == 0:
            part = state.model.partition()
            if state_hash({**part.encoder, **part.energy}) != frozen_ref:
                raise NumericError(
                    "gradient isolation violated: encoder/energy parameters "
                    f"changed during a consistency-only stage at step {state.step}"
                )
        if checkpoint_cb is not None and (
            state.step % run.train.checkpoint_every == 0 or state.step == end
        ):
            checkpoint_cb(state)


def multitask_weights(weights: LossWeights) -> LossWeights:
    return replace(weights, lambda_optim=0.0, lambda_score=0.0, lambda_force=0.0)


def train(
    run: RunConfig,
    corpus: Corpus,
    out_dir: Path,
    *,
    seed: int | None = None,
    weights: LossWeights | None = None,
    use_force: bool | None = None,
    tag: str = "train",
    resume: bool = False,
) -> TrainResult:
    """Stage-1 multi-task training followed by stage-2 consistency (and
    optional force) training; writes periodic checkpoints, a resumable
    train state, the final checkpoint, and the metrics CSV."""
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    metrics_dir = out_dir / "metrics"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_dir.mkdir(parents=True, exist_ok=True)
    seed = run.train.seed if seed is None else seed
    weights = run.weights if weights is None else weights
    use_force = run.train.use_force_loss if use_force is None else use_force

    data = _TrainData(corpus.equilibrium_records("train"), corpus.force_records("train"))
    state = TrainerState(run, seed)
    state_path = ckpt_dir / f"{tag}_state.json"
    metrics_path = metrics_dir / f"{tag}.csv"
    if resume and state_path.exists():
        _state_from_disk(state, state_path)

    last_ckpt: list[Path | None] = [None]

    def checkpoint_cb(st):
        if st is None:
            return last_ckpt[0]
        path = ckpt_dir / f"{tag}_step{st.step:06d}.ckpt.json"
        save_checkpoint(st.model, path, schedule_meta(run.schedule), run.config_hash(),
                        extra={"tag": tag, "seed": seed, "step": st.step})
        _state_to_disk(st, state_path)
        write_metrics(st.rows, metrics_path)
        last_ckpt[0] = path
        return path

    total = run.train.stage1_steps + run.train.stage2_steps
    lr_args = dict(lr_total=total, lr_warmup=run.train.warmup_steps, lr_peak=run.train.lr_peak)
    if state.step < run.train.stage1_steps:
        _run_steps(state, data, multitask_weights(weights), False, 1,
                   run.train.stage1_steps - state.step, checkpoint_cb=checkpoint_cb, **lr_args)
    if state.step < total:
        _run_steps(state, data, weights, use_force, 2,
                   total - state.step, checkpoint_cb=checkpoint_cb, **lr_args)

    final_path = ckpt_dir / f"{tag}.ckpt.json"
    save_checkpoint(state.model, final_path, schedule_meta(run.schedule), run.config_hash(),
                    extra={"tag": tag, "seed": seed, "step": state.step})
    write_metrics(state.rows, metrics_path)
    return TrainResult(final_path, metrics_path, state.model)


def finetune(
    run: RunConfig,
    model: JointModel,
    corpus: Corpus,
    out_dir: Path,
    *,
    seed: int | None = None,
    split: str = "finetune",
    tag: str = "finetune",
    steps: int | None = None,
) -> TrainResult:
    """Continue training an existing model on high-fidelity equilibrium
    structures with the multi-task loss (denoising + energy when labels
    are present); all parameters trainable."""
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    metrics_dir = out_dir / "metrics"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_dir.mkdir(parents=True, exist_ok=True)
    seed = run.train.seed if seed is None else seed
    steps = run.train.finetune_steps if steps is None else steps

    records = [
        s for s in corpus.equilibrium_records(split) if s.fidelity == "high"
    ]
    if not records:
        raise DataError(f"split {split!r} has no high-fidelity equilibria to fine-tune on")
    data = _TrainData(records, [])

    state = TrainerState(run, seed)
    state.model.load_state_dict(copy.deepcopy(model.state_dict()))
    state.opt = torch.optim.Adam(state.model.parameters(), lr=run.train.finetune_lr, foreach=True)
    metrics_path = metrics_dir / f"{tag}.csv"
    if steps > 0:
        _run_steps(
            state, data, multitask_weights(run.weights), False, 3, steps,
            lr_total=steps, lr_warmup=min(run.train.finetune_warmup, max(steps - 1, 0)),
            lr_peak=run.train.finetune_lr,
        )
    final_path = ckpt_dir / f"{tag}.ckpt.json"
    save_checkpoint(state.model, final_path, schedule_meta(run.schedule), run.config_hash(),
                    extra={"tag": tag, "seed": seed, "step": state.step})
    write_metrics(state.rows, metrics_path)
    return TrainResult(final_path, metrics_path, state.model)


# -- paired baseline experiment ------------------------------------------------


def paired_t_one_sided(baseline: list[float], treated: list[float]) -> dict:
    """Paired t statistic for mean(baseline - treated) > 0."""
    base = np.asarray(baseline, dtype=np.float64)
    trt = np.asarray(treated, dtype=np.float64)
    deltas = base - trt
    out = {
        "n": int(deltas.size),
        "mean_delta": float(deltas.mean()),
        "wins": int((deltas > 0).sum()),
    }
    if deltas.size >= 2 and np.std(deltas, ddof=1) > 0:
        t_stat, p = stats.ttest_rel(base, trt, alternative="greater")
        out["t_stat"] = float(t_stat)
        out["p_value"] = float(p)
    else:
        out["t_stat"] = None
        out["p_value"] = None
    return out


def baseline_pair_run(
    run: RunConfig,
    corpus: Corpus,
    out_dir: Path,
    seeds: list[int],
    samplers: tuple[str, ...] = ("denoising", "ddim"),
) -> dict:
    """Train the multi-task and consistency arms from a shared stage-1
    checkpoint for each seed, evaluate both with identical evaluation
    noise, and emit the paired per-molecule and per-seed report."""
    if not seeds:
        raise ConfigError("baseline_pair_run needs at least one seed")
    out_dir = Path(out_dir)
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    sched = make_schedule(run.schedule)
    test_set = corpus.split("test")

    per_seed = []
    pair_rows = []
    arm_reports: dict[tuple[int, str, str], EvalReport] = {}
    for seed in seeds:
        data = _TrainData(corpus.equilibrium_records("train"), corpus.force_records("train"))
        state = TrainerState(run, seed)
        lr_args = dict(
            lr_total=run.train.stage1_steps + run.train.stage2_steps,
            lr_warmup=run.train.warmup_steps, lr_peak=run.train.lr_peak,
        )
        _run_steps(state, data, multitask_weights(run.weights), False, 1,
                   run.train.stage1_steps, **lr_args)
        stage1_snap = state.snapshot()
        stage1_path = out_dir / "checkpoints" / f"stage1_seed{seed}.ckpt.json"
        stage1_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state.model, stage1_path, schedule_meta(run.schedule),
                        run.config_hash(), extra={"tag": "stage1", "seed": seed})
        part = state.model.partition()
        stage1_hash = state_hash(
            {**part.encoder, **part.energy, **part.structure}
        )

        arms = {}
        for arm, arm_weights in (
            ("multitask", multitask_weights(run.weights)),
            ("consistency", run.weights),
        ):
            state.restore(stage1_snap)
            _run_steps(state, data, arm_weights, False, 2,
                       run.train.stage2_steps, **lr_args)
            ckpt = out_dir / "checkpoints" / f"{arm}_seed{seed}.ckpt.json"
            save_checkpoint(state.model, ckpt, schedule_meta(run.schedule),
                            run.config_hash(), extra={"tag": arm, "seed": seed})
            write_metrics(state.rows, out_dir / "metrics" / f"{arm}_seed{seed}.csv")
            evals = {}
            for sampler in samplers:
                rep = evaluate_structures(
                    state.model, test_set, sched, run.sampling, run.eval,
                    coverage_delta=_resolve_delta(run, corpus, out_dir),
                    sampler=sampler,
                )
                save_report(rep, reports_dir, f"eval_{arm}_{sampler}_seed{seed}")
                arm_reports[(seed, arm, sampler)] = rep
                evals[sampler] = rep.aggregates()
            arms[arm] = {"checkpoint": str(ckpt), "eval": evals}

        for sampler in samplers:
            mt = {r.mol_id: r for r in arm_reports[(seed, "multitask", sampler)].records}
            cons = {r.mol_id: r for r in arm_reports[(seed, "consistency", sampler)].records}
            for mol_id in sorted(set(mt) & set(cons)):
                pair_rows.append({
                    "seed": seed, "sampler": sampler, "id": mol_id,
                    "rmsd_mean_multitask": mt[mol_id].rmsd_mean,
                    "rmsd_mean_consistency": cons[mol_id].rmsd_mean,
                    "delta": mt[mol_id].rmsd_mean - cons[mol_id].rmsd_mean,
                })
        per_seed.append({"seed": seed, "stage1_checkpoint": str(stage1_path),
                         "stage1_hash": stage1_hash, "arms": arms})

    paired = {}
    for sampler in samplers:
        mt_means = [
            arm_reports[(s, "multitask", sampler)].aggregates()["rmsd_mean_mean"]
            for s in seeds
        ]
        cons_means = [
            arm_reports[(s, "consistency", sampler)].aggregates()["rmsd_mean_mean"]
            for s in seeds
        ]
        paired[sampler] = paired_t_one_sided(mt_means, cons_means)
        paired[sampler]["multitask_means"] = mt_means
        paired[sampler]["consistency_means"] = cons_means

    egap_summary = {}
    for arm in ("multitask", "consistency"):
        vals = [
            arm_reports[(s, arm, samplers[0])].aggregates()["egap_mean"] for s in seeds
        ]
        egap_summary[arm] = {"per_seed": vals,
                             "mean": float(np.mean([v for v in vals if v is not None]))}

    report = {
        "config_hash": run.config_hash(),
        "seeds": list(seeds),
        "per_seed": per_seed,
        "paired": paired,
        "egap": egap_summary,
    }
    with open(reports_dir / "paired_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(reports_dir / "paired_per_molecule.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "sampler", "id", "rmsd_mean_multitask",
                         "rmsd_mean_consistency", "delta"])
        for row in pair_rows:
            writer.writerow([row["seed"], row["sampler"], row["id"],
                             repr(row["rmsd_mean_multitask"]),
                             repr(row["rmsd_mean_consistency"]), repr(row["delta"])])
    return report


def _resolve_delta(run: RunConfig, corpus: Corpus, out_dir: Path = None) -> float:
    """Coverage threshold: configured value, else the corpus-level median
    degradation RMSD (the fidelity gap under test), else a fixed fallback."""
    if run.eval.coverage_delta is not None:
        return run.eval.coverage_delta
    if corpus.generation_report is not None:
        return float(corpus.generation_report["degradation_rmsd"]["median"])
    return 0.25
