"""Discrete measures, scaled-Gaussian references, and quadrature surrogates.

Conventions used throughout the package:

- A discrete measure is a pair (atoms, weights): atoms is an (m, n) float
  array of pairwise-distinct support points, weights an (m,) array of
  strictly positive probabilities summing to one.
- The reference law is always rho * N(0, I_n) with rho in (0, 1].  Its
  numerical surrogate is a QuadratureRule (nodes, weights) whose first two
  moments match the reference up to the rule's moment_tol.
- All arrays are float64 and frozen (writeable=False) after construction,
  so every type here is safe to share across threads.

Quadrature kinds:

- "panel-legendre" (n = 1): composite Gauss-Legendre against the Gaussian
  density on [-8.5*rho, 8.5*rho], mirrored about 0 so that 0 is a panel
  boundary.  This keeps kinked integrands such as |y| (which drive the
  convex-order checks) accurate to ~1e-15, which tensor Gauss-Hermite
  cannot do at any affordable node count.
- "tensor-hermite" (n = 2, 3): tensor Gauss-Hermite, exact for polynomials.
- "monte-carlo" (n >= 4): seeded, moment-matched sample (empirical mean
  removed, covariance whitened), so the rule invariants hold exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss

WEIGHT_SUM_TOL = 1e-12
ATOM_SEP_TOL = 1e-12
CENTERED_TOL = 1e-10
QUAD_WEIGHT_TOL = 1e-14

# (nodes per axis / per 1-D rule, moment_tol) per accuracy tier.
TIER_NODES = {"fast": 64, "standard": 128, "high": 256}
TIER_MOMENT_TOL = {"fast": 1e-6, "standard": 1e-9, "high": 1e-12}
MC_MIN_NODES = 100_000
MC_MOMENT_TOL = 1e-3
PANEL_SPAN = 8.5  # half-width of the 1-D panel rule, in units of rho
PANEL_ORDER = 8  # Gauss-Legendre points per panel


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported probability measure sum_i p_i delta_{x_i} on R^n."""

    atoms: np.ndarray  # (m, n)
    weights: np.ndarray  # (m,)
    centered: bool = False

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if atoms.ndim != 2:
            raise ValueError("atoms must be an (m, n) array")
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{atoms.shape[0]} atoms but {weights.shape[0]} weights"
            )
        if atoms.shape[0] == 0:
            raise ValueError("measure needs at least one atom")
        if np.any(weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(
                f"weights sum to {weights.sum()!r}, not 1 within {WEIGHT_SUM_TOL}"
            )
        if atoms.shape[0] > 1:
            diffs = np.abs(atoms[:, None, :] - atoms[None, :, :]).max(axis=2)
            np.fill_diagonal(diffs, np.inf)
            if diffs.min() <= ATOM_SEP_TOL:
                raise ValueError("atoms are not pairwise distinct (merge first)")
        if self.centered:
            bary = weights @ atoms
            if np.linalg.norm(bary) > CENTERED_TOL:
                raise ValueError(
                    f"measure flagged centered but barycenter norm is "
                    f"{np.linalg.norm(bary):.3e}"
                )
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    def barycenter(self) -> np.ndarray:
        return self.weights @ self.atoms

    def second_moment(self) -> float:
        """E|X|^2 = sum_i p_i |x_i|^2."""
        return float(self.weights @ np.sum(self.atoms**2, axis=1))

    @classmethod
    def from_points(cls, atoms, weights, centered=False, merge_tol=ATOM_SEP_TOL,
                    normalize=False):
        """Build a measure, merging atoms closer than merge_tol (max-norm).

        Merged atoms keep the weight-averaged location and the summed weight.
        With normalize=True the weights are rescaled to sum to one; the
        rescaling factor is available via ``load_measure``.
        """
        atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
        weights = np.asarray(weights, dtype=float).ravel()
        if np.any(weights <= 0):
            raise ValueError("weights must be strictly positive")
        if normalize:
            weights = weights / weights.sum()
        # Greedy merge: scan atoms, fold each into the first earlier
        # representative within merge_tol.
        kept_atoms: list[np.ndarray] = []
        kept_w: list[float] = []
        for x, p in zip(atoms, weights):
            for j, y in enumerate(kept_atoms):
                if np.abs(x - y).max() <= merge_tol:
                    w_new = kept_w[j] + p
                    kept_atoms[j] = (kept_w[j] * y + p * x) / w_new
                    kept_w[j] = w_new
                    break
            else:
                kept_atoms.append(np.array(x, dtype=float))
                kept_w.append(float(p))
        w = np.array(kept_w)
        # Renormalize away the rounding drift introduced by merging.
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            if not normalize:
                raise ValueError(
                    f"weights sum to {w.sum()!r}; pass normalize=True to rescale"
                )
            w = w / w.sum()
        return cls(np.array(kept_atoms), w, centered=centered)


def load_measure(obj: dict):
    """Load {"dim", "atoms", "weights"} JSON data.

    Returns (measure, corrections) where corrections records the weight
    normalization factor and the number of merged atoms.
    """
    dim = int(obj["dim"])
    if dim < 1:
        raise ValueError("dim must be a positive integer")
    atoms = np.asarray(obj["atoms"], dtype=float)
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.shape[1] != dim:
        raise ValueError(f"atoms have dimension {atoms.shape[1]}, expected {dim}")
    weights = np.asarray(obj["weights"], dtype=float)
    total = float(weights.sum())
    measure = DiscreteMeasure.from_points(atoms, weights, normalize=True)
    corrections = {
        "weight_normalization": total,
        "merged_atoms": int(len(weights) - measure.n_atoms),
    }
    return measure, corrections


@dataclass(frozen=True)
class GaussianReference:
    """The dominating law rho * N(0, I_n)."""

    dim: int
    scale: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"scale must lie in (0, 1], got {self.scale}")


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights surrogate for expectations over rho * N(0, I_n)."""

    nodes: np.ndarray  # (K, n)
    weights: np.ndarray  # (K,)
    kind: str
    moment_tol: float
    rho: float
    seed: int | None = None

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape[0] != weights.shape[0]:
            raise ValueError("node/weight count mismatch")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "nodes", _frozen(nodes))
        object.__setattr__(self, "weights", _frozen(weights))
        res = self.moment_residuals()
        if res["weight_sum"] > QUAD_WEIGHT_TOL:
            raise ValueError(f"weights sum off by {res['weight_sum']:.3e}")
        if res["mean"] > self.moment_tol or res["second"] > self.moment_tol:
            raise ValueError(
                f"moment residuals mean={res['mean']:.3e} "
                f"second={res['second']:.3e} exceed moment_tol={self.moment_tol}"
            )

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def moment_residuals(self) -> dict:
        w, y = self.weights, self.nodes
        mean = y.T @ w
        second = np.einsum("k,ki,kj->ij", w, y, y)
        return {
            "weight_sum": abs(float(w.sum()) - 1.0),
            "mean": float(np.linalg.norm(mean)),
            "second": float(
                np.abs(second - self.rho**2 * np.eye(self.dim)).max()
            ),
        }

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over nodes; values has shape (K,) or (K, ...)."""
        return np.tensordot(self.weights, np.asarray(values), axes=(0, 0))


def _panel_rule_1d(scale: float, n_nodes: int, moment_tol: float) -> QuadratureRule:
    n_panels_half = n_nodes // (2 * PANEL_ORDER)
    t, w = leggauss(PANEL_ORDER)
    edges = np.linspace(0.0, PANEL_SPAN, n_panels_half + 1)
    a, b = edges[:-1, None], edges[1:, None]
    x = (0.5 * (b - a) * t[None, :] + 0.5 * (a + b)).ravel()
    ww = (0.5 * (b - a) * w[None, :]).ravel() * np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
    nodes = np.concatenate([-x[::-1], x])
    weights = np.concatenate([ww[::-1], ww])
    weights = weights / weights.sum()
    return QuadratureRule(
        nodes=scale * nodes[:, None],
        weights=weights,
        kind="panel-legendre",
        moment_tol=moment_tol,
        rho=scale,
    )


def _tensor_hermite(dim: int, scale: float, per_axis: int,
                    moment_tol: float) -> QuadratureRule:
    t, w = hermgauss(per_axis)
    axis_nodes = t * np.sqrt(2.0) * scale
    axis_weights = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([axis_nodes] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = axis_weights
    for _ in range(dim - 1):
        weights = np.kron(weights, axis_weights)
    weights = weights / weights.sum()
    return QuadratureRule(
        nodes=nodes,
        weights=weights,
        kind="tensor-hermite",
        moment_tol=moment_tol,
        rho=scale,
    )


def _monte_carlo(dim: int, scale: float, n_nodes: int, seed: int) -> QuadratureRule:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_nodes, dim))
    z -= z.mean(axis=0)
    cov = z.T @ z / n_nodes
    z = z @ np.linalg.inv(np.linalg.cholesky(cov)).T
    return QuadratureRule(
        nodes=scale * z,
        weights=np.full(n_nodes, 1.0 / n_nodes),
        kind="monte-carlo",
        moment_tol=MC_MOMENT_TOL,
        rho=scale,
        seed=seed,
    )


def build_quadrature(dim: int, scale: float, accuracy: str = "standard",
                     seed: int = 0) -> QuadratureRule:
    """Build the numerical surrogate for rho * N(0, I_dim).

    accuracy in {"fast", "standard", "high"} selects 64/128/256 nodes per
    axis with moment tolerances 1e-6/1e-9/1e-12 (deterministic rules).
    Dimensions >= 4 fall back to a seeded moment-matched Monte-Carlo rule
    with at least 1e5 nodes and moment_tol 1e-3.
    """
    if dim < 1:
        raise ValueError("dim must be a positive integer")
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    if accuracy not in TIER_NODES:
        raise ValueError(f"unknown accuracy tier {accuracy!r}")
    n_axis = TIER_NODES[accuracy]
    tol = TIER_MOMENT_TOL[accuracy]
    if dim == 1:
        return _panel_rule_1d(scale, n_axis, tol)
    if dim <= 3:
        return _tensor_hermite(dim, scale, n_axis, tol)
    return _monte_carlo(dim, scale, max(MC_MIN_NODES, n_axis**2), seed)


@dataclass(frozen=True)
class Partition:
    """Disjoint cells (index lists) covering the atoms of a measure."""

    cells: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        cells = tuple(tuple(int(i) for i in c) for c in self.cells)
        if len(cells) == 0:
            raise ValueError("partition must have at least one cell")
        flat = [i for c in cells for i in c]
        if len(flat) != len(set(flat)):
            raise ValueError("partition cells must be disjoint")
        object.__setattr__(self, "cells", cells)

    def validate_against(self, m: int):
        flat = sorted(i for c in self.cells for i in c)
        if flat != list(range(m)):
            raise ValueError(f"partition does not cover indices 0..{m - 1}")

    @classmethod
    def singletons(cls, m: int) -> "Partition":
        return cls(tuple((i,) for i in range(m)))

    @classmethod
    def single_cell(cls, m: int) -> "Partition":
        return cls((tuple(range(m)),))


def gauge_basis(weights: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of {u in R^m : <weights, u> = 0}.

    This is the per-component building block of the gauge subspace on which
    the dual potentials live.
    """
    p = np.asarray(weights, dtype=float)
    m = len(p)
    proj = np.eye(m) - np.outer(p, p) / (p @ p)
    q, r = np.linalg.qr(proj)
    keep = np.abs(np.diag(r)) > 1e-12
    return q[:, keep]


def potential_basis(weights: np.ndarray, dim: int) -> np.ndarray:
    """Basis of the full gauge subspace for (U, V) potentials.

    Potentials are flattened atom-major as (U_i, V_i1..V_in) per atom; the
    returned matrix has shape (m*(1+dim), (m-1)*(1+dim)).
    """
    u_basis = gauge_basis(weights)
    m = len(weights)
    width = 1 + dim
    basis = np.zeros((m * width, (m - 1) * width))
    for c in range(width):
        rows = c + width * np.arange(m)
        basis[rows, c * (m - 1): (c + 1) * (m - 1)] = u_basis
    return basis


def center(measure: DiscreteMeasure) -> DiscreteMeasure:
    """Shift atoms by the barycenter so the output is centered.

    Idempotent: inputs whose barycenter is already below 1e-13 are returned
    with unchanged atoms.
    """
    bary = measure.barycenter()
    if np.linalg.norm(bary) <= 1e-13:
        if measure.centered:
            return measure
        return dataclasses.replace(measure, centered=True)
    return DiscreteMeasure(measure.atoms - bary, measure.weights, centered=True)


def coarsen_cx(measure: DiscreteMeasure, partition: Partition) -> DiscreteMeasure:
    """Conditional expectation onto a partition of the atom indices.

    Each nonempty cell becomes one atom at the cell's weighted barycenter,
    carrying the cell's total mass.  The result is dominated in the convex
    order by the input (Jensen), which the cxorder module can certify.
    """
    partition.validate_against(measure.n_atoms)
    atoms, weights = [], []
    for cell in partition.cells:
        if not cell:
            continue
        idx = np.array(cell, dtype=int)
        mass = measure.weights[idx].sum()
        atoms.append(measure.weights[idx] @ measure.atoms[idx] / mass)
        weights.append(mass)
    return DiscreteMeasure.from_points(
        np.array(atoms), np.array(weights), centered=measure.centered,
        normalize=True,
    )
