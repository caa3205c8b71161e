"""Training objectives: denoising and multi-task losses, the two
consistency losses with their gradient-isolation semantics, and the
force-matching loss.

Gradient isolation: both consistency losses detach the shared-encoder
features fed to the structure decoder and evaluate the energy model with
its parameters recorded as constants, so their gradients reach only the
structure-decoder parameters while input gradients keep flowing into the
decoder output.

Batched functions take padded (B, A, 3) tensors plus a GraphBatch and
return per-molecule loss vectors; thin single-molecule wrappers expose
the same math for one structure. ``energy_fn``/``denoiser_fn`` hooks let
tests substitute analytic oracles for the trained heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .errors import ConfigError, DataError
from .model import GraphBatch, JointModel, _masked_center, frozen_params
from .molecule import MoleculeGraph


@dataclass(frozen=True)
class LossWeights:
    lambda_energy: float = 1.0
    lambda_denoise: float = 0.01
    lambda_optim: float = 0.1
    lambda_score: float = 1.0
    lambda_force: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class ConsistencyConfig:
    tau_optim_lo: int = 400
    tau_optim_hi: int = 700
    tau_score_lo: int = 5
    tau_score_hi: int = 300
    kT: float = 0.1  # eV
    sigma_max: float = 0.1  # Angstrom
    score_reference: str = "perturbed"  # or "clean"

    def __post_init__(self):
        if not (1 <= self.tau_optim_lo <= self.tau_optim_hi):
            raise ConfigError("tau_optim range must satisfy 1 <= lo <= hi")
        if not (1 <= self.tau_score_lo <= self.tau_score_hi):
            raise ConfigError("tau_score range must satisfy 1 <= lo <= hi")
        if self.kT <= 0:
            raise ConfigError(f"kT must be > 0, got {self.kT}")
        if self.sigma_max <= 0:
            raise ConfigError(f"sigma_max must be > 0, got {self.sigma_max}")
        if self.score_reference not in ("perturbed", "clean"):
            raise ConfigError(f"unknown score_reference {self.score_reference!r}")

    def validate_for(self, sched: NoiseSchedule) -> None:
        if self.tau_optim_hi > sched.steps - 1 or self.tau_score_hi > sched.steps - 1:
            raise ConfigError("consistency tau ranges must lie within [1, T-1]")


def _alpha_bar(sched: NoiseSchedule, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(sched.alpha_bar)[t].to(dtype)


def _masked_sqnorm(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return (x * x * mask.to(x.dtype).unsqueeze(-1)).sum(dim=(1, 2))


def perturb_batch(
    s0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    ab = _alpha_bar(sched, t, s0.dtype)[:, None, None]
    return torch.sqrt(ab) * s0 + torch.sqrt(1.0 - ab) * eps


def denoising_loss_batch(
    model: JointModel,
    batch,
    s0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    denoiser_fn=None,
) -> torch.Tensor:
    """Per-molecule [ab_t/(1-ab_t)] * ||denoise(perturb(s0, t, eps), t) - s0||^2
    with both structures centered before comparison."""
    if (t < 1).any() or (t > sched.steps).any():
        raise DataError("denoising loss requires steps t in [1, T]")
    s0 = s0.to(model.dtype)
    eps = eps.to(model.dtype)
    ab = _alpha_bar(sched, t, s0.dtype)
    rt = perturb_batch(s0, t, eps, sched)
    denoiser_fn = denoiser_fn or model.denoise_batch
    out = denoiser_fn(batch, rt, t)
    mask = batch.masks(s0.dtype)[0]
    s0c = _masked_center(s0, mask)
    return (ab / (1.0 - ab)) * _masked_sqnorm(out - s0c, mask)


def multi_task_loss_batch(
    model: JointModel,
    batch,
    s0: torch.Tensor,
    energy_labels: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    weights: LossWeights,
) -> tuple[torch.Tensor, dict]:
    """Weighted energy absolute error + denoising loss, averaged over the
    batch. Molecules with NaN energy labels skip the energy term and are
    counted in parts["missing_energy"]."""
    label_ok = torch.isfinite(energy_labels)
    e_pred = model.energy_batch(batch, s0)
    abs_err = torch.where(label_ok, (e_pred - torch.nan_to_num(energy_labels)).abs(),
                          torch.zeros_like(e_pred))
    n_labeled = int(label_ok.sum())
    energy_term = abs_err.sum() / max(n_labeled, 1)
    denoise_per = denoising_loss_batch(model, batch, s0, t, eps, sched)
    denoise_term = denoise_per.mean()
    total = weights.lambda_energy * energy_term + weights.lambda_denoise * denoise_term
    parts = {
        "energy": float(energy_term.detach()),
        "denoise": float(denoise_term.detach()),
        "missing_energy": int(batch.size - n_labeled),
    }
    return total, parts


def optimality_consistency_loss_batch(
    model: JointModel,
    batch,
    sched: NoiseSchedule,
    cfg: ConsistencyConfig,
    rng: np.random.Generator,
    energy_fn=None,
) -> torch.Tensor:
    """Increase-after-perturbation hinge, one (eps, eta, tau) draw per
    molecule: max{0, E(R0_hat) - E(R0_hat + eta)} with encoder features
    detached and energy-model parameters recorded as constants, so only
    structure-decoder parameters receive gradients."""
    b, a = batch.size, batch.max_atoms
    mask3 = batch.mask.unsqueeze(-1)
    tau = torch.from_numpy(
        rng.integers(cfg.tau_optim_lo, cfg.tau_optim_hi + 1, size=b)
    )
    eps = torch.from_numpy(rng.standard_normal((b, a, 3))) * mask3
    # per-element variance from Unif(0, sigma_max^2]
    var = (1.0 - torch.from_numpy(rng.random((b, a, 3)))) * cfg.sigma_max**2
    eta = torch.from_numpy(rng.standard_normal((b, a, 3))) * torch.sqrt(var) * mask3

    r0_hat = model.denoise_batch(batch, eps, tau, detach_features=True)
    partition = model.partition()
    if energy_fn is None:
        energy_fn = model.energy_batch
    with frozen_params(partition, {"encoder", "energy"}):
        e_pred = energy_fn(batch, r0_hat)
        e_pert = energy_fn(batch, r0_hat + eta)
    return torch.clamp(e_pred - e_pert, min=0.0)


def score_consistency_loss_batch(
    model: JointModel,
    batch,
    s0: torch.Tensor,
    sched: NoiseSchedule,
    cfg: ConsistencyConfig,
    rng: np.random.Generator,
    energy_fn=None,
    denoiser_fn=None,
) -> torch.Tensor:
    """Match the denoiser-implied score at a small step tau against the
    Boltzmann score -grad E / kT from the energy head (gradient detached);
    only structure-decoder parameters receive gradients."""
    if cfg.tau_score_lo < 1:
        raise DataError("score consistency requires tau >= 1")
    b, a = batch.size, batch.max_atoms
    mask3 = batch.mask.unsqueeze(-1)
    tau = torch.from_numpy(
        rng.integers(cfg.tau_score_lo, cfg.tau_score_hi + 1, size=b)
    )
    eps = torch.from_numpy(rng.standard_normal((b, a, 3))) * mask3
    if cfg.score_reference == "perturbed":
        r_tau = perturb_batch(s0, tau, eps, sched).detach()
    else:
        r_tau = s0.detach()

    if energy_fn is None:
        energy_fn = model.energy_batch
    x = r_tau.clone().requires_grad_(True)
    e = energy_fn(batch, x)
    (grad_e,) = torch.autograd.grad(e.sum(), x)
    f_bar = (grad_e * mask3).detach()

    denoiser_fn = denoiser_fn or model.denoise_batch
    r0_hat = denoiser_fn(batch, r_tau, tau, detach_features=True)
    ab = _alpha_bar(sched, tau)[:, None, None]
    implied_score = (torch.sqrt(ab) * r0_hat - r_tau) / (1.0 - ab)
    resid = implied_score + f_bar / cfg.kT
    return _masked_sqnorm(resid, batch.mask)


def force_loss_batch(
    model: JointModel,
    batch,
    coords: torch.Tensor,
    forces: torch.Tensor,
    energy_fn=None,
) -> torch.Tensor:
    """||grad_R E + F||^2 per molecule; differentiating it propagates into
    encoder and energy-decoder parameters (second-order pass)."""
    if forces.shape != coords.shape:
        raise DataError(f"force shape {tuple(forces.shape)} != coords shape {tuple(coords.shape)}")
    if energy_fn is None:
        energy_fn = model.energy_batch
    x = coords.clone().requires_grad_(True)
    e = energy_fn(batch, x)
    (grad_e,) = torch.autograd.grad(e.sum(), x, create_graph=True)
    resid = grad_e + forces
    return _masked_sqnorm(resid, batch.mask)


# -- single-molecule wrappers -------------------------------------------------


def _single(graph: MoleculeGraph, coords) -> tuple[GraphBatch, torch.Tensor]:
    batch = GraphBatch.single(graph)
    arr = np.asarray(coords, dtype=np.float64)
    return batch, torch.from_numpy(arr.copy())[None]


def denoising_loss(model, graph, s0, t: int, eps, sched) -> torch.Tensor:
    batch, s0_t = _single(graph, s0)
    eps_t = torch.from_numpy(np.asarray(eps, dtype=np.float64).copy())[None]
    return denoising_loss_batch(
        model, batch, s0_t, torch.tensor([int(t)]), eps_t, sched
    )[0]


def multi_task_loss(model, graph, s0, energy_label, t: int, eps, sched,
                    weights: LossWeights) -> tuple[torch.Tensor, dict]:
    batch, s0_t = _single(graph, s0)
    eps_t = torch.from_numpy(np.asarray(eps, dtype=np.float64).copy())[None]
    label = torch.tensor([float("nan") if energy_label is None else float(energy_label)])
    return multi_task_loss_batch(
        model, batch, s0_t, label, torch.tensor([int(t)]), eps_t, sched, weights
    )


def optimality_consistency_loss(model, graph, sched, cfg, rng, energy_fn=None) -> torch.Tensor:
    batch = GraphBatch.single(graph)
    return optimality_consistency_loss_batch(model, batch, sched, cfg, rng, energy_fn)[0]


def score_consistency_loss(model, graph, s0, sched, cfg, rng,
                           energy_fn=None, denoiser_fn=None) -> torch.Tensor:
    batch, s0_t = _single(graph, s0)
    return score_consistency_loss_batch(
        model, batch, s0_t, sched, cfg, rng, energy_fn, denoiser_fn
    )[0]


def force_loss(model, graph, coords, forces, energy_fn=None) -> torch.Tensor:
    batch, c = _single(graph, coords)
    f = torch.from_numpy(np.asarray(forces, dtype=np.float64).copy())[None]
    return force_loss_batch(model, batch, c, f, energy_fn)[0]
