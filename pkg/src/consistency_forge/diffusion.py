"""Discrete-time diffusion machinery: noise schedule, forward kernel,
denoiser/score conversion, and the three generation procedures.

Conventions (DDPM-style discrete time):
  - beta[k] is the noise increment of step k+1, k = 0..T-1.
  - alpha_bar[t] = prod_{s<t} (1 - beta[s]), t = 0..T, alpha_bar[0] = 1.
  - perturb at step t:  R_t = sqrt(alpha_bar[t]) R_0 + sqrt(1-alpha_bar[t]) eps.

A denoiser is any callable ``model(graph, x, t) -> x0_hat`` where x has
shape (n, A, 3) (batched over n independent samples of one molecule) and
t is an integer step. Samplers only interact with models through this
protocol, so analytic oracles can stand in for trained networks.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .geom import center


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized beta_t / alpha_bar_t tables; the single source of
    diffusion-time truth."""

    steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.steps < 2 or beta.shape != (self.steps,) or ab.shape != (self.steps + 1,):
            raise ConfigError("schedule arrays inconsistent with step count")
        if not ((beta > 0).all() and (beta < 1).all()):
            raise ConfigError("beta values must lie in (0, 1)")
        if not (np.diff(ab) < 0).all():
            raise ConfigError("alpha_bar must be strictly decreasing")
        if abs(ab[0] - 1.0) > 0.0:
            raise ConfigError("alpha_bar[0] must be exactly 1")
        prod = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
        if np.abs(prod - ab).max() > 1e-12:
            raise ConfigError("alpha_bar does not match the cumulative product of (1 - beta)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", ab)

    def check_step(self, t: int, min_t: int = 0) -> int:
        t = int(t)
        if not (min_t <= t <= self.steps):
            raise DataError(f"diffusion step {t} outside [{min_t}, {self.steps}]")
        return t


def make_sigmoid_schedule(
    steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    logit_lo: float = -6.0,
    logit_hi: float = 6.0,
) -> NoiseSchedule:
    """Sigmoid beta schedule: beta[k] = beta_start + (beta_end - beta_start)
    * logistic(l(k)) with l mapping k in [0, T-1] linearly onto
    [logit_lo, logit_hi].

    Note the logistic never reaches 0/1, so the endpoints sit slightly
    inside (beta_start, beta_end).
    """
    if steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )
    k = np.arange(steps, dtype=np.float64)
    logits = logit_lo + (logit_hi - logit_lo) * k / (steps - 1)
    beta = beta_start + (beta_end - beta_start) / (1.0 + np.exp(-logits))
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
    return NoiseSchedule(steps=steps, beta=beta, alpha_bar=alpha_bar)


def perturb(s0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward kernel sample: sqrt(ab_t) s0 + sqrt(1 - ab_t) eps."""
    t = sched.check_step(t)
    s0 = np.asarray(s0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != s0.shape:
        raise DataError(f"noise shape {eps.shape} != structure shape {s0.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * s0 + np.sqrt(1.0 - ab) * eps


def score_from_denoiser(
    s_out: np.ndarray, r_t: np.ndarray, t: int, sched: NoiseSchedule
) -> np.ndarray:
    """Convert a denoiser output into the implied score:
    (sqrt(ab_t) * s_out - r_t) / (1 - ab_t). Undefined at t = 0."""
    t = sched.check_step(t, min_t=1)
    ab = sched.alpha_bar[t]
    return (np.sqrt(ab) * np.asarray(s_out) - np.asarray(r_t)) / (1.0 - ab)


def _initial_draw(rng: np.random.Generator, n_samples: int, atom_count: int) -> np.ndarray:
    return rng.standard_normal((n_samples, atom_count, 3))


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite state at diffusion step t={t}")


def _finalize(x: np.ndarray, center_output: bool) -> np.ndarray:
    if center_output:
        x = x - x.mean(axis=1, keepdims=True)
    return x


def sample_reverse_sde(
    model,
    graph,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    n_samples: int = 1,
    center_output: bool = True,
) -> np.ndarray:
    """Euler-Maruyama integration of the reverse-time SDE from a standard
    Gaussian draw down to step 0, with the model score substituted via
    score_from_denoiser. Returns (n_samples, A, 3)."""
    a = len(graph.atom_types)
    x = _initial_draw(rng, n_samples, a)
    for t in range(sched.steps, 0, -1):
        beta = sched.beta[t - 1]
        score = score_from_denoiser(model(graph, x, t), x, t, sched)
        noise = rng.standard_normal(x.shape)
        x = x + beta * (0.5 * x + score) + np.sqrt(beta) * noise
        _check_finite(x, t - 1)
    return _finalize(x, center_output)


def ddim_step_grid(steps: int, n_steps: int) -> np.ndarray:
    """Uniform integration sub-grid from T down to 0, inclusive."""
    grid = np.unique(np.round(np.linspace(0, steps, n_steps + 1)).astype(int))
    return grid[::-1]


def sample_ddim(
    model,
    graph,
    sched: NoiseSchedule,
    n_steps: int,
    rng: np.random.Generator,
    n_samples: int = 1,
    center_output: bool = True,
) -> np.ndarray:
    """Deterministic probability-flow integration on a uniform sub-grid of
    n_steps steps (the DDIM update); the initial Gaussian draw is the only
    randomness."""
    if not (1 <= n_steps <= sched.steps):
        raise ConfigError(f"n_steps must lie in [1, {sched.steps}], got {n_steps}")
    a = len(graph.atom_types)
    x = _initial_draw(rng, n_samples, a)
    grid = ddim_step_grid(sched.steps, n_steps)
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        ab_cur = sched.alpha_bar[t_cur]
        ab_next = sched.alpha_bar[t_next]
        x0_hat = model(graph, x, int(t_cur))
        eps_hat = (x - np.sqrt(ab_cur) * x0_hat) / np.sqrt(1.0 - ab_cur)
        x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
        _check_finite(x, int(t_next))
    return _finalize(x, center_output)


def sample_denoise_oneshot(
    model,
    graph,
    sched: NoiseSchedule,
    tau_gen: int,
    rng: np.random.Generator,
    n_samples: int = 1,
    center_output: bool = True,
) -> np.ndarray:
    """One-shot generation: a single denoiser evaluation on a Gaussian draw
    at a large step tau_gen < T."""
    tau = sched.check_step(tau_gen, min_t=1)
    if tau >= sched.steps:
        raise ConfigError(f"tau_gen must be < T={sched.steps} (got {tau})")
    a = len(graph.atom_types)
    eps = _initial_draw(rng, n_samples, a)
    out = np.asarray(model(graph, eps, tau), dtype=np.float64)
    _check_finite(out, tau)
    return _finalize(out, center_output)


def schedule_to_text(sched: NoiseSchedule) -> str:
    """Plain-text table (step, beta, alpha_bar) for golden-file tests.

    Row t holds beta[t-1] and alpha_bar[t]; alpha_bar[0] = 1 is implicit.
    Floats are written with shortest round-trip repr, so dump -> load -> dump
    is byte-stable.
    """
    buf = io.StringIO()
    buf.write(f"# noise schedule T={sched.steps}\n")
    buf.write("# step beta alpha_bar\n")
    for t in range(1, sched.steps + 1):
        buf.write(f"{t} {sched.beta[t - 1]!r} {sched.alpha_bar[t]!r}\n")
    return buf.getvalue()


def schedule_from_text(text: str) -> NoiseSchedule:
    """Inverse of schedule_to_text; validates the cumulative-product invariant."""
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"malformed schedule row: {line!r}")
        rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
    if not rows:
        raise DataError("empty schedule table")
    rows.sort()
    steps = rows[-1][0]
    if [r[0] for r in rows] != list(range(1, steps + 1)):
        raise DataError("schedule table has missing or duplicate steps")
    beta = np.array([r[1] for r in rows])
    alpha_bar = np.concatenate(([1.0], [r[2] for r in rows]))
    return NoiseSchedule(steps=steps, beta=beta, alpha_bar=alpha_bar)
