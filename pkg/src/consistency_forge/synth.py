"""Synthetic molecular worlds with analytic energy oracles.

The oracle plays the role of the expensive reference method: bond and
angle terms are harmonic, plus a 1/r^12 repulsion between atoms at graph
distance >= 3. High-fidelity data are exact minimizations of the oracle;
low-fidelity structures come from minimizing a slightly biased copy of
the oracle (systematic structural error with accurate energy labels,
mirroring the two-fidelity dataset this package studies).

Force-field constants are looked up in a per-corpus random table keyed by
element types, so the potential is a deterministic function of the
molecular graph and a model can learn the energy landscape across
molecules. Units are eV and Angstrom throughout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from .errors import ConfigError, DataError, NumericError
from .geom import aligned_rmsd, center
from .molecule import MoleculeGraph

BOND_K_RANGE = (5.0, 20.0)  # eV / A^2
BOND_D0_RANGE = (1.0, 1.8)  # A
ANGLE_K_RANGE = (1.0, 5.0)  # eV / rad^2
ANGLE_T0_RANGE = (1.6, 2.1)  # rad
REPULSION_C = 1.0  # eV * A^12


@dataclass(frozen=True)
class OraclePotential:
    """Analytic energy: sum_b k_b (d - d0)^2 + sum_a k_a (theta - theta0)^2
    + sum_nb c / r^12. Exactly invariant to rigid motion."""

    bonds: tuple[tuple[int, int], ...]
    k_b: np.ndarray
    d0: np.ndarray
    angles: tuple[tuple[int, int, int], ...]  # (i, j, k) with center j
    k_a: np.ndarray
    theta0: np.ndarray
    rep_pairs: tuple[tuple[int, int], ...]
    c_rep: np.ndarray

    def __post_init__(self):
        for name in ("k_b", "d0", "k_a", "theta0", "c_rep"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if (self.k_b <= 0).any() or (self.k_a < 0).any() or (self.c_rep < 0).any():
            raise ConfigError("potential constants must be positive")
        idx = {
            "bi": np.array([b[0] for b in self.bonds], dtype=np.intp),
            "bj": np.array([b[1] for b in self.bonds], dtype=np.intp),
            "ai": np.array([a[0] for a in self.angles], dtype=np.intp),
            "aj": np.array([a[1] for a in self.angles], dtype=np.intp),
            "ak": np.array([a[2] for a in self.angles], dtype=np.intp),
            "pi": np.array([p[0] for p in self.rep_pairs], dtype=np.intp),
            "pj": np.array([p[1] for p in self.rep_pairs], dtype=np.intp),
        }
        object.__setattr__(self, "_idx", idx)

    def energy_force(self, coords: np.ndarray) -> tuple[float, np.ndarray]:
        """Energy (eV) and exact analytic force F = -grad E (eV/A)."""
        x = np.asarray(coords, dtype=np.float64)
        grad = np.zeros_like(x)
        idx = self._idx
        e = 0.0
        if self.bonds:
            bi, bj = idx["bi"], idx["bj"]
            dv = x[bi] - x[bj]
            d = np.sqrt((dv * dv).sum(axis=1))
            if (d < 1e-8).any():
                raise DataError("coincident bonded atoms")
            dd = d - self.d0
            e += float((self.k_b * dd * dd).sum())
            g = (2.0 * self.k_b * dd / d)[:, None] * dv
            np.add.at(grad, bi, g)
            np.add.at(grad, bj, -g)
        if self.angles:
            ai, aj, ak = idx["ai"], idx["aj"], idx["ak"]
            u = x[ai] - x[aj]
            v = x[ak] - x[aj]
            nu = np.sqrt((u * u).sum(axis=1))
            nv = np.sqrt((v * v).sum(axis=1))
            if (nu < 1e-8).any() or (nv < 1e-8).any():
                raise DataError("coincident atoms in angle term")
            uh = u / nu[:, None]
            vh = v / nv[:, None]
            cos_t = np.clip((uh * vh).sum(axis=1), -1.0, 1.0)
            theta = np.arccos(cos_t)
            sin_t = np.maximum(np.sqrt(1.0 - cos_t * cos_t), 1e-8)
            dt = theta - self.theta0
            e += float((self.k_a * dt * dt).sum())
            coeff = 2.0 * self.k_a * dt
            dth_di = (cos_t[:, None] * uh - vh) / (nu * sin_t)[:, None]
            dth_dk = (cos_t[:, None] * vh - uh) / (nv * sin_t)[:, None]
            np.add.at(grad, ai, coeff[:, None] * dth_di)
            np.add.at(grad, ak, coeff[:, None] * dth_dk)
            np.add.at(grad, aj, -coeff[:, None] * (dth_di + dth_dk))
        if self.rep_pairs:
            pi, pj = idx["pi"], idx["pj"]
            dv = x[pi] - x[pj]
            r2 = (dv * dv).sum(axis=1)
            if (r2 < 1e-16).any():
                raise DataError("coincident nonbonded atoms")
            r12 = r2**6
            e += float((self.c_rep / r12).sum())
            g = (-12.0 * self.c_rep / (r12 * r2))[:, None] * dv
            np.add.at(grad, pi, g)
            np.add.at(grad, pj, -g)
        return e, -grad

    def energy(self, coords: np.ndarray) -> float:
        return self.energy_force(coords)[0]


def oracle_energy_force(p: OraclePotential, coords: np.ndarray) -> tuple[float, np.ndarray]:
    return p.energy_force(coords)


@dataclass(frozen=True)
class ForceFieldTable:
    """Element-keyed constants so every molecule sharing a corpus draws its
    potential deterministically from its graph."""

    bond: dict  # (z_lo, z_hi, order) -> (k_b, d0)
    angle: dict  # (z_center, z_lo, z_hi) -> (k_a, theta0)

    @classmethod
    def random(cls, rng: np.random.Generator, n_elements: int,
               orders: tuple[int, ...] = (1, 2, 3)) -> "ForceFieldTable":
        bond = {}
        for za in range(n_elements):
            for zb in range(za, n_elements):
                for o in orders:
                    bond[(za, zb, o)] = (
                        rng.uniform(*BOND_K_RANGE),
                        rng.uniform(*BOND_D0_RANGE),
                    )
        angle = {}
        for zc in range(n_elements):
            for za in range(n_elements):
                for zb in range(za, n_elements):
                    angle[(zc, za, zb)] = (
                        rng.uniform(*ANGLE_K_RANGE),
                        rng.uniform(*ANGLE_T0_RANGE),
                    )
        return cls(bond=bond, angle=angle)


def build_potential(graph: MoleculeGraph, rng: np.random.Generator | None = None,
                    table: ForceFieldTable | None = None) -> OraclePotential:
    """Assemble the oracle for a graph, drawing constants from the table
    (preferred) or i.i.d. from the documented ranges."""
    types = graph.atom_types
    bonds = []
    k_b = []
    d0 = []
    for i, j, o in graph.bonds:
        bonds.append((i, j))
        if table is not None:
            za, zb = sorted((int(types[i]), int(types[j])))
            kb, dd = table.bond[(za, zb, min(int(o), 3))]
        else:
            kb, dd = rng.uniform(*BOND_K_RANGE), rng.uniform(*BOND_D0_RANGE)
        k_b.append(kb)
        d0.append(dd)
    adj = graph.adjacency()
    angles = []
    k_a = []
    theta0 = []
    for j in range(graph.atom_count):
        nb = sorted(adj[j])
        for ii in range(len(nb)):
            for kk in range(ii + 1, len(nb)):
                i, k = nb[ii], nb[kk]
                angles.append((i, j, k))
                if table is not None:
                    za, zb = sorted((int(types[i]), int(types[k])))
                    ka, t0 = table.angle[(int(types[j]), za, zb)]
                else:
                    ka, t0 = rng.uniform(*ANGLE_K_RANGE), rng.uniform(*ANGLE_T0_RANGE)
                k_a.append(ka)
                theta0.append(t0)
    gdist = graph.graph_distances()
    rep = [
        (i, j)
        for i in range(graph.atom_count)
        for j in range(i + 1, graph.atom_count)
        if gdist[i, j] >= 3
    ]
    return OraclePotential(
        bonds=tuple(bonds),
        k_b=np.array(k_b),
        d0=np.array(d0),
        angles=tuple(angles),
        k_a=np.array(k_a),
        theta0=np.array(theta0),
        rep_pairs=tuple(rep),
        c_rep=np.full(len(rep), REPULSION_C),
    )


def generate_molecule(
    rng: np.random.Generator,
    atom_range: tuple[int, int] = (4, 9),
    n_elements: int = 4,
    table: ForceFieldTable | None = None,
) -> tuple[MoleculeGraph, OraclePotential]:
    """Random connected tree-plus-chords molecule with its oracle.
    Deterministic given the generator state."""
    lo, hi = atom_range
    if not (2 <= lo <= hi <= 16):
        raise ConfigError(f"atom_range must satisfy 2 <= lo <= hi <= 16, got {atom_range}")
    a = int(rng.integers(lo, hi + 1))
    types = rng.integers(0, n_elements, size=a)
    bonds = {}
    for i in range(1, a):
        parent = int(rng.integers(0, i))
        order = int(rng.choice([1, 2, 3], p=[0.7, 0.2, 0.1]))
        bonds[(min(parent, i), max(parent, i))] = order
    n_chords = int(rng.integers(0, max(a // 4, 1) + 1))
    candidates = [
        (i, j) for i in range(a) for j in range(i + 1, a) if (i, j) not in bonds
    ]
    for _ in range(n_chords):
        if not candidates:
            break
        idx = int(rng.integers(0, len(candidates)))
        bonds[candidates.pop(idx)] = 1
    graph = MoleculeGraph(
        atom_types=types,
        bonds=tuple((i, j, o) for (i, j), o in sorted(bonds.items())),
    )
    return graph, build_potential(graph, rng=rng, table=table)


def initial_embedding(graph: MoleculeGraph, p: OraclePotential,
                      rng: np.random.Generator) -> np.ndarray:
    """Breadth-first placement at nominal bond lengths in random directions;
    a sane minimization start that avoids coincident atoms."""
    d0_by_bond = {b: d for b, d in zip(p.bonds, p.d0)}
    coords = np.zeros((graph.atom_count, 3))
    adj = graph.adjacency()
    placed = {0}
    queue = [0]
    while queue:
        u = queue.pop(0)
        for v in sorted(adj[u]):
            if v in placed:
                continue
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            d0 = d0_by_bond.get((min(u, v), max(u, v)), 1.4)
            coords[v] = coords[u] + direction * d0
            placed.add(v)
            queue.append(v)
    return coords + rng.normal(0.0, 0.05, coords.shape)


def minimize_exact(
    p: OraclePotential,
    s_init: np.ndarray,
    max_iters: int = 2000,
    tol: float = 1e-6,
) -> np.ndarray:
    """Quasi-Newton minimization until the max-abs force component drops
    below tol (eV/A); returns the centered minimizer."""
    if tol <= 0:
        raise ConfigError(f"tol must be > 0, got {tol}")
    shape = np.asarray(s_init).shape

    def fun(flat):
        e, f = p.energy_force(flat.reshape(shape))
        return e, -f.ravel()

    res = scipy_minimize(
        fun,
        np.asarray(s_init, dtype=np.float64).ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iters, "gtol": tol, "ftol": 1e-18},
    )
    coords = res.x.reshape(shape)
    _, force = p.energy_force(coords)
    fmax = float(np.abs(force).max())
    if fmax >= tol:
        raise NumericError(
            f"minimization did not converge in {max_iters} iterations; "
            f"final max-abs force {fmax:.3e} eV/A"
        )
    return center(coords)


def find_equilibrium(
    p: OraclePotential,
    graph: MoleculeGraph,
    rng: np.random.Generator,
    n_restarts: int = 10,
    jitter: float = 0.3,
    tol: float = 1e-6,
) -> np.ndarray:
    """Best-of-n local minimizations from a deterministic embedding plus
    jittered replicas; the lowest-energy basin is the ground truth."""
    base = initial_embedding(graph, p, rng)
    best = None
    best_e = np.inf
    for k in range(n_restarts):
        start = base if k == 0 else base + rng.normal(0.0, jitter, base.shape)
        try:
            m = minimize_exact(p, start, tol=tol)
        except (NumericError, DataError):
            continue
        e = p.energy(m)
        if e < best_e:
            best, best_e = m, e
    if best is None:
        raise NumericError("no restart converged while locating the equilibrium")
    return best


def degrade_structure(
    p: OraclePotential,
    s_eq: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    d0_sigma: float = 0.05,
    theta0_sigma: float = 0.05,
    loose_tol: float = 5e-2,
    start_jitter: float = 0.3,
) -> np.ndarray:
    """Low-fidelity structure: either stop optimization early
    (truncated_opt) or exactly minimize a structurally biased copy of the
    oracle (biased_potential)."""
    if mode == "truncated_opt":
        start = s_eq + rng.normal(0.0, start_jitter, np.asarray(s_eq).shape)
        return minimize_exact(p, start, tol=loose_tol)
    if mode == "biased_potential":
        biased = OraclePotential(
            bonds=p.bonds,
            k_b=p.k_b,
            d0=np.maximum(p.d0 + rng.normal(0.0, d0_sigma, p.d0.shape), 0.5),
            angles=p.angles,
            k_a=p.k_a,
            theta0=np.clip(
                p.theta0 + rng.normal(0.0, theta0_sigma, p.theta0.shape), 0.2, np.pi - 0.2
            ),
            rep_pairs=p.rep_pairs,
            c_rep=p.c_rep,
        )
        return minimize_exact(biased, s_eq)
    raise ConfigError(f"unknown degradation mode {mode!r}")


def sample_off_equilibrium(
    p: OraclePotential,
    s_eq: np.ndarray,
    kT_sample: float,
    n: int,
    rng: np.random.Generator,
    step: float = 1e-3,
    burn_in: int = 2000,
    thin: int = 200,
) -> list[tuple[np.ndarray, float, np.ndarray]]:
    """Overdamped Langevin samples at temperature kT_sample, thinned for
    decorrelation; each labeled with exact (E, F)."""
    if kT_sample <= 0:
        raise ConfigError(f"kT_sample must be > 0, got {kT_sample}")
    x = np.asarray(s_eq, dtype=np.float64).copy()
    noise_scale = np.sqrt(2.0 * step * kT_sample)
    out = []
    total = burn_in + n * thin
    for it in range(total):
        _, f = p.energy_force(x)
        x = x + step * f + noise_scale * rng.standard_normal(x.shape)
        if not np.isfinite(x).all() or np.abs(x).max() > 1e3:
            raise NumericError(f"Langevin trajectory diverged at iteration {it}")
        if it >= burn_in and (it - burn_in + 1) % thin == 0:
            e, f_lab = p.energy_force(x)
            out.append((center(x.copy()), e, f_lab))
    return out


# -- labeled samples and corpus files -----------------------------------------


@dataclass(frozen=True)
class LabeledSample:
    """One heterogeneous data record: a structure with its energy, optional
    forces, fidelity tag and kind."""

    mol_id: str
    graph: MoleculeGraph
    coords: np.ndarray
    energy: float
    forces: np.ndarray | None
    fidelity: str  # high | low
    kind: str  # equilibrium | off_equilibrium

    def to_record(self) -> dict:
        return {
            "id": self.mol_id,
            "atoms": [int(z) for z in self.graph.atom_types],
            "bonds": [[i, j, o] for i, j, o in self.graph.bonds],
            "coords": [[float(v) for v in row] for row in self.coords],
            "energy": float(self.energy),
            "forces": None if self.forces is None
            else [[float(v) for v in row] for row in self.forces],
            "fidelity": self.fidelity,
            "kind": self.kind,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledSample":
        graph = MoleculeGraph(
            atom_types=np.array(rec["atoms"], dtype=np.int64),
            bonds=tuple((int(i), int(j), int(o)) for i, j, o in rec["bonds"]),
        )
        forces = rec.get("forces")
        return cls(
            mol_id=rec["id"],
            graph=graph,
            coords=np.array(rec["coords"], dtype=np.float64),
            energy=float(rec["energy"]),
            forces=None if forces is None else np.array(forces, dtype=np.float64),
            fidelity=rec["fidelity"],
            kind=rec["kind"],
        )


def write_jsonl(samples: list[LabeledSample], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def read_jsonl(path: Path) -> list[LabeledSample]:
    samples = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    samples.append(LabeledSample.from_record(json.loads(line)))
                except (KeyError, ValueError) as e:
                    raise DataError(f"{path}:{line_no}: malformed record ({e})") from None
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None
    return samples


@dataclass
class Corpus:
    splits: dict = field(default_factory=dict)
    generation_report: dict | None = None

    def split(self, name: str) -> list[LabeledSample]:
        if name not in self.splits:
            raise DataError(f"corpus has no split {name!r}")
        return self.splits[name]

    def equilibrium_records(self, name: str) -> list[LabeledSample]:
        return [s for s in self.split(name) if s.kind == "equilibrium"]

    def force_records(self, name: str) -> list[LabeledSample]:
        return [
            s for s in self.split(name)
            if s.kind == "off_equilibrium" and s.forces is not None
        ]


def load_corpus(data_dir: Path) -> Corpus:
    data_dir = Path(data_dir)
    splits = {}
    for name in ("train", "val", "test", "finetune"):
        path = data_dir / f"{name}.jsonl"
        if path.exists():
            splits[name] = read_jsonl(path)
    if not splits:
        raise DataError(f"no dataset splits found under {data_dir}")
    report = None
    report_path = data_dir / "generation_report.json"
    if report_path.exists():
        with open(report_path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    return Corpus(splits=splits, generation_report=report)


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 1
    n_train: int = 500
    n_val: int = 50
    n_test: int = 50
    n_finetune: int = 100
    atom_min: int = 4
    atom_max: int = 9
    n_elements: int = 4
    degrade_mode: str = "biased_potential"
    d0_bias_sigma: float = 0.08
    theta0_bias_sigma: float = 0.1
    rmsd_band_lo: float = 0.05
    rmsd_band_hi: float = 0.4
    force_fraction: float = 0.5
    force_records_per_molecule: int = 1
    offeq_kT: float = 0.1
    test_offeq_records: int = 2
    n_restarts: int = 10

    def __post_init__(self):
        if min(self.n_train, self.n_test) < 1 or min(self.n_val, self.n_finetune) < 0:
            raise ConfigError("split sizes must be positive (val/finetune may be 0)")
        if not (2 <= self.atom_min <= self.atom_max <= 16):
            raise ConfigError("atom range must satisfy 2 <= min <= max <= 16")
        if not (0.0 <= self.force_fraction <= 1.0):
            raise ConfigError("force_fraction must lie in [0, 1]")
        if not (0.0 < self.rmsd_band_lo < self.rmsd_band_hi):
            raise ConfigError("rmsd band must satisfy 0 < lo < hi")
        if self.degrade_mode not in ("biased_potential", "truncated_opt"):
            raise ConfigError(f"unknown degrade_mode {self.degrade_mode!r}")


def _molecule_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def build_corpus(cfg: CorpusConfig, out_dir: Path) -> dict:
    """Generate train/val/test(/finetune) JSONL splits plus a generation
    report. Deterministic: identical config and seed give byte-identical
    files. Each molecule owns a derived RNG stream keyed by its index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = ForceFieldTable.random(
        np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,))),
        cfg.n_elements,
    )
    split_plan = (
        [("train", cfg.n_train), ("val", cfg.n_val),
         ("test", cfg.n_test), ("finetune", cfg.n_finetune)]
    )
    n_total = sum(n for _, n in split_plan)
    force_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    n_force = int(round(cfg.force_fraction * cfg.n_train))
    force_ids = set(force_rng.permutation(cfg.n_train)[:n_force].tolist())

    samples: dict[str, list[LabeledSample]] = {name: [] for name, _ in split_plan}
    rmsds = []
    energy_gaps = []
    retries = 0
    out_of_band = 0
    index = 0
    for split_name, count in split_plan:
        for k in range(count):
            rng = _molecule_rng(cfg.seed, index)
            mol_id = f"mol-{index:05d}"
            accepted = None
            fallback = None
            for attempt in range(16):
                if attempt % 8 == 0 or fallback is None:
                    try:
                        graph, potential = generate_molecule(
                            rng, (cfg.atom_min, cfg.atom_max), cfg.n_elements, table
                        )
                        s_eq = find_equilibrium(
                            potential, graph, rng, n_restarts=cfg.n_restarts
                        )
                        e_eq = potential.energy(s_eq)
                    except NumericError:
                        retries += 1
                        continue
                try:
                    degraded = degrade_structure(
                        potential, s_eq, cfg.degrade_mode, rng,
                        d0_sigma=cfg.d0_bias_sigma,
                        theta0_sigma=cfg.theta0_bias_sigma,
                    )
                except NumericError:
                    retries += 1
                    continue
                rmsd = aligned_rmsd(degraded, s_eq)
                gap = potential.energy(degraded) - e_eq
                fallback = (graph, potential, s_eq, e_eq, degraded, rmsd, gap)
                if cfg.rmsd_band_lo <= rmsd <= cfg.rmsd_band_hi and gap > 0:
                    accepted = fallback
                    break
                retries += 1
            if accepted is None:
                if fallback is None:
                    raise NumericError(
                        f"could not generate an acceptable molecule for {mol_id}"
                    )
                out_of_band += 1
                accepted = fallback
            graph, potential, s_eq, e_eq, degraded, rmsd, gap = accepted
            rmsds.append(rmsd)
            energy_gaps.append(gap)

            if split_name in ("train", "val"):
                samples[split_name].append(LabeledSample(
                    mol_id=mol_id, graph=graph, coords=degraded,
                    energy=potential.energy(degraded), forces=None,
                    fidelity="low", kind="equilibrium",
                ))
                want_force = (
                    split_name == "train" and k in force_ids
                    and cfg.force_records_per_molecule > 0
                )
                if want_force:
                    offeq = sample_off_equilibrium(
                        potential, s_eq, cfg.offeq_kT,
                        cfg.force_records_per_molecule, rng,
                    )
                    for coords, e, f in offeq:
                        samples[split_name].append(LabeledSample(
                            mol_id=mol_id, graph=graph, coords=coords,
                            energy=e, forces=f, fidelity="high",
                            kind="off_equilibrium",
                        ))
            else:
                samples[split_name].append(LabeledSample(
                    mol_id=mol_id, graph=graph, coords=s_eq, energy=e_eq,
                    forces=None, fidelity="high", kind="equilibrium",
                ))
                if split_name == "test" and cfg.test_offeq_records > 0:
                    offeq = sample_off_equilibrium(
                        potential, s_eq, cfg.offeq_kT, cfg.test_offeq_records, rng
                    )
                    for coords, e, f in offeq:
                        samples[split_name].append(LabeledSample(
                            mol_id=mol_id, graph=graph, coords=coords,
                            energy=e, forces=f, fidelity="high",
                            kind="off_equilibrium",
                        ))
            index += 1

    for name, _ in split_plan:
        if samples[name]:
            write_jsonl(samples[name], out_dir / f"{name}.jsonl")

    rmsds_arr = np.array(rmsds)
    report = {
        "n_molecules": n_total,
        "splits": {name: len(samples[name]) for name, _ in split_plan},
        "degradation_rmsd": {
            "mean": float(rmsds_arr.mean()),
            "median": float(np.median(rmsds_arr)),
            "min": float(rmsds_arr.min()),
            "max": float(rmsds_arr.max()),
        },
        "energy_gap": {
            "mean": float(np.mean(energy_gaps)),
            "min": float(np.min(energy_gaps)),
        },
        "retries": retries,
        "out_of_band": out_of_band,
        "force_molecules": len(force_ids),
    }
    with open(out_dir / "generation_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
