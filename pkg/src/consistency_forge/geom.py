"""Rigid-motion utilities: centering, uniform rotations, Kabsch alignment, RMSD.

Structures are plain (A, 3) float64 arrays of Cartesian coordinates in
Angstrom; rows are atoms. All functions are pure and safe for concurrent
use as long as each caller owns its random generator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

ROTATION_TOL = 1e-10


def as_structure(coords) -> np.ndarray:
    """Validate and return coordinates as a float64 (A, 3) array.

    Raises DataError on non-finite entries, wrong shape, or fewer than
    two atoms.
    """
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"structure must have shape (A, 3), got {arr.shape}")
    if arr.shape[0] < 2:
        raise DataError(f"structure needs at least 2 atoms, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise DataError("structure contains non-finite coordinates")
    return arr


def center(coords: np.ndarray) -> np.ndarray:
    """Remove the centroid: returned coordinates have zero column means."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords.mean(axis=0, keepdims=True)


def is_rotation(q: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    """True if q is a proper rotation: orthogonal with determinant +1."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (3, 3):
        return False
    ortho = np.abs(q.T @ q - np.eye(3)).max() < tol
    return bool(ortho and abs(np.linalg.det(q) - 1.0) < tol)


def sample_rotation_uniform(rng: np.random.Generator) -> np.ndarray:
    """Draw a Haar-uniform rotation matrix from SO(3).

    Uses the unit-quaternion construction: a 4D standard normal draw,
    normalized, gives a uniform quaternion, which maps to a uniform
    rotation.
    """
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class KabschResult:
    """Optimal rigid superposition of `moving` onto `target`.

    aligned = moving @ rotation.T + translation. `degenerate` marks
    coincident/collinear inputs where the minimizer is valid but not
    unique.
    """

    rotation: np.ndarray
    translation: np.ndarray
    aligned: np.ndarray
    degenerate: bool


def kabsch_align(moving: np.ndarray, target: np.ndarray) -> KabschResult:
    """Best proper rotation + translation mapping `moving` onto `target`.

    Rows correspond atom-by-atom. Reflections are excluded by the
    determinant sign correction on the SVD, so mirror images keep a
    positive residual.
    """
    moving = as_structure(moving)
    target = as_structure(target)
    if moving.shape != target.shape:
        raise DataError(
            f"atom count mismatch: {moving.shape[0]} vs {target.shape[0]}"
        )
    mv_mean = moving.mean(axis=0)
    tg_mean = target.mean(axis=0)
    x = moving - mv_mean
    y = target - tg_mean
    h = x.T @ y
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    scale = max(s[0], 1.0)
    degenerate = bool(s[1] <= 1e-9 * scale)
    translation = tg_mean - rot @ mv_mean
    aligned = moving @ rot.T + translation
    return KabschResult(rot, translation, aligned, degenerate)


def aligned_rmsd(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """RMSD (Angstrom) after optimal rigid superposition; symmetric in (a, b).

    `mask` selects the atom subset used both for the alignment and the
    deviation (e.g. heavy atoms only). Default: all atoms.
    """
    a = as_structure(a)
    b = as_structure(b)
    if a.shape != b.shape:
        raise DataError(f"atom count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (a.shape[0],):
            raise DataError("mask length must equal atom count")
        if mask.sum() < 2:
            raise DataError("mask must keep at least 2 atoms")
        a = a[mask]
        b = b[mask]
    res = kabsch_align(a, b)
    diff = res.aligned - b
    return float(np.sqrt((diff * diff).sum() / a.shape[0]))
