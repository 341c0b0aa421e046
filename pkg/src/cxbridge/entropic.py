"""Dual potentials of the entropic martingale coupling.

Given a centered discrete measure mu = sum_i p_i delta_{x_i} dominated with
slack by the reference rho * N(0, I_n), the coupling is parametrized by
potentials (U, V) through the exponential-family posterior weights

    f_i(y) = exp(U_i + <V_i, y>) / sum_j p_j exp(U_j + <V_j, y>),

and the correct potentials are the unique maximizer over the gauge subspace
S = {sum p_i U_i = 0, sum p_i V_i = 0} of the concave objective

    g(U, V) = sum_i p_i (U_i + <V_i, x_i>)
              - E[ log sum_j p_j exp(U_j + <V_j, Y>) ].

At the maximum, E[f_i(Y)] = 1 and E[Y f_i(Y)] = x_i, so p_i f_i(y) is the
posterior probability of atom i given the Gaussian point y, and the
conditional law of Y given atom i has the log-concave density f_i against
the reference.  Every expectation is evaluated with stable log-sum-exp
under a QuadratureRule; maximization is damped Newton on S with the
explicit softmax-covariance Hessian, falling back to backtracking gradient
ascent when the Hessian is near-singular.

Divergence of the iterates (norm past norm_cap while g still climbs) is
the numerical signature that the domination-with-slack hypothesis fails,
and is raised as NotDominatedSuspected rather than guessed around.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, log_ndtr

from .measures import (
    DiscreteMeasure,
    GaussianReference,
    QuadratureRule,
    build_quadrature,
    potential_basis,
)

GAUGE_TOL = 1e-12
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class NotDominatedSuspected(RuntimeError):
    """Fit iterates diverged: coercivity (hence domination with slack) suspect."""

    def __init__(self, message, potentials=None, report=None):
        super().__init__(message)
        self.potentials = potentials
        self.report = report


class NonConverged(RuntimeError):
    """Iteration cap reached before the gradient tolerance; best iterate kept."""

    def __init__(self, message, potentials=None, report=None):
        super().__init__(message)
        self.potentials = potentials
        self.report = report


@dataclass(frozen=True)
class DualPotentials:
    """Gauge-fixed potentials (U, V): sum p_i U_i = 0 and sum p_i V_i = 0."""

    U: np.ndarray  # (m,)
    V: np.ndarray  # (m, n)

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float).ravel()
        V = np.atleast_2d(np.asarray(self.V, dtype=float))
        if V.shape[0] != U.shape[0]:
            raise ValueError("U and V must have one row per atom")
        U.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    def check_gauge(self, weights: np.ndarray):
        p = np.asarray(weights, dtype=float)
        scale = max(1.0, float(np.abs(self.U).max(initial=0.0)),
                    float(np.abs(self.V).max(initial=0.0)))
        if abs(p @ self.U) > GAUGE_TOL * scale:
            raise ValueError(f"U violates gauge: sum p_i U_i = {p @ self.U:.3e}")
        if np.linalg.norm(p @ self.V) > GAUGE_TOL * scale:
            raise ValueError("V violates gauge")

    def norm(self) -> float:
        return float(np.sqrt(self.U @ self.U + np.sum(self.V**2)))


@dataclass(frozen=True)
class FitConfig:
    slack: float = 0.05
    grad_tol: float = 1e-8
    norm_cap: float = 1e3
    max_iters: int = 200
    accuracy: str = "high"

    def __post_init__(self):
        if not 0.0 < self.slack < 1.0:
            raise ValueError("slack must lie in (0, 1)")


@dataclass(frozen=True)
class FitReport:
    g_value: float
    grad_norm: float
    residual_ef: np.ndarray  # per-atom |E f_i - 1|
    residual_mean: np.ndarray  # per-atom ||E[Y f_i] - x_i||
    iterations: int
    status: str

    def max_residuals(self) -> tuple[float, float]:
        return float(self.residual_ef.max()), float(self.residual_mean.max())

    def as_dict(self) -> dict:
        return {
            "g_value": self.g_value,
            "grad_norm": self.grad_norm,
            "residual_ef_max": float(self.residual_ef.max()),
            "residual_mean_max": float(self.residual_mean.max()),
            "iterations": self.iterations,
            "status": self.status,
        }


class PosteriorWeights:
    """Evaluator for the posterior weights of fitted (or any) potentials.

    posterior(y)[i] = p_i f_i(y) is a probability vector over atoms for any
    y, summing to one by construction of the softmax.
    """

    def __init__(self, measure: DiscreteMeasure, potentials: DualPotentials):
        if potentials.V.shape != measure.atoms.shape:
            raise ValueError("potential/measure shape mismatch")
        self.measure = measure
        self.potentials = potentials
        self._log_p = np.log(measure.weights)

    def logits(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.potentials.U[None, :] + y @ self.potentials.V.T

    def log_posterior(self, y: np.ndarray) -> np.ndarray:
        lw = self._log_p[None, :] + self.logits(y)
        return lw - logsumexp(lw, axis=1, keepdims=True)

    def posterior(self, y: np.ndarray) -> np.ndarray:
        s = np.exp(self.log_posterior(y))
        return s / s.sum(axis=1, keepdims=True)

    def f_values(self, y: np.ndarray) -> np.ndarray:
        """f_i(y) for each atom: posterior divided by the prior weight."""
        return self.posterior(y) / self.measure.weights[None, :]

    def log_f(self, y: np.ndarray) -> np.ndarray:
        return self.log_posterior(y) - self._log_p[None, :]


def _softmax_terms(potentials, measure, quad):
    """Shared pieces: lse (K,), posterior s (K, m) under the quadrature."""
    logits = potentials.U[None, :] + quad.nodes @ potentials.V.T
    lw = np.log(measure.weights)[None, :] + logits
    lse = logsumexp(lw, axis=1)
    s = np.exp(lw - lse[:, None])
    return lse, s


def eval_g(potentials: DualPotentials, measure: DiscreteMeasure,
           quad: QuadratureRule) -> float:
    """The concave dual objective, log-sum-exp stabilized."""
    lse, _ = _softmax_terms(potentials, measure, quad)
    linear = measure.weights @ (
        potentials.U + np.sum(potentials.V * measure.atoms, axis=1)
    )
    return float(linear - quad.weights @ lse)


def grad_g(potentials: DualPotentials, measure: DiscreteMeasure,
           quad: QuadratureRule):
    """Euclidean gradient of g: (gU, gV) with one row per atom.

    gU_i = p_i (1 - E[f_i(Y)]) and gV_i = p_i (x_i - E[Y f_i(Y)]); these
    match central finite differences of eval_g componentwise.
    """
    _, s = _softmax_terms(potentials, measure, quad)
    p, x = measure.weights, measure.atoms
    w, y = quad.weights, quad.nodes
    gU = p - w @ s
    gV = p[:, None] * x - (s * w[:, None]).T @ y
    return gU, gV


def hessian_g(potentials: DualPotentials, measure: DiscreteMeasure,
              quad: QuadratureRule) -> np.ndarray:
    """Explicit Hessian of g, flattened atom-major as (U_i, V_i) blocks.

    H = -E[(diag(s) - s s^T) (x) a a^T] with a(y) = (1, y); negative
    semidefinite since g is concave.
    """
    _, s = _softmax_terms(potentials, measure, quad)
    w, y = quad.weights, quad.nodes
    m, n = measure.atoms.shape
    a = np.concatenate([np.ones((len(w), 1)), y], axis=1)  # (K, 1+n)
    sa = s[:, :, None] * a[:, None, :]  # (K, m, 1+n)
    flat = sa.reshape(len(w), m * (1 + n))
    t2 = (flat * w[:, None]).T @ flat
    ws = w[:, None] * s
    aa = a[:, :, None] * a[:, None, :]
    t1 = np.tensordot(ws, aa, axes=(0, 0))  # (m, 1+n, 1+n)
    h = t2.copy()
    width = 1 + n
    for i in range(m):
        sl = slice(i * width, (i + 1) * width)
        h[sl, sl] -= t1[i]
    return h


def verify_constraints(potentials: DualPotentials, measure: DiscreteMeasure,
                       quad: QuadratureRule, n_random: int = 100,
                       seed: int = 0):
    """Residuals of the coupling constraints under the quadrature.

    Returns (residual_ef, residual_mean, unity_max): per-atom |E f_i - 1|,
    per-atom ||E[Y f_i] - x_i||, and the worst deviation of
    sum_i p_i f_i(y) from 1 over n_random Gaussian points.
    """
    pw = PosteriorWeights(measure, potentials)
    _, s = _softmax_terms(potentials, measure, quad)
    p, x = measure.weights, measure.atoms
    w, y = quad.weights, quad.nodes
    ef = (w @ s) / p
    eyf = ((s * w[:, None]).T @ y) / p[:, None]
    residual_ef = np.abs(ef - 1.0)
    residual_mean = np.linalg.norm(eyf - x, axis=1)
    rng = np.random.default_rng(seed)
    pts = quad.rho * rng.standard_normal((n_random, measure.dim))
    unity = (measure.weights[None, :] * pw.f_values(pts)).sum(axis=1)
    return residual_ef, residual_mean, float(np.abs(unity - 1.0).max())


def fit_potentials(measure: DiscreteMeasure, gref: GaussianReference,
                   config: FitConfig = FitConfig(),
                   quad: QuadratureRule | None = None):
    """Maximize g over the gauge subspace; returns (potentials, report).

    The caller is responsible for the domination-with-slack hypothesis
    X <=cx (1 - slack) * rho * G (e.g. via cxorder.max_dominated_scale);
    without it the maximizer may not exist, which surfaces as
    NotDominatedSuspected when the iterates run past norm_cap with g still
    increasing.  Hitting max_iters raises NonConverged carrying the best
    iterate.
    """
    if measure.dim != gref.dim:
        raise ValueError("measure/reference dimension mismatch")
    if np.linalg.norm(measure.barycenter()) > 1e-10:
        raise ValueError("fit_potentials requires a centered measure")
    if quad is None:
        quad = build_quadrature(gref.dim, gref.scale, config.accuracy)
    m, n = measure.atoms.shape
    if m == 1:
        pot = DualPotentials(np.zeros(1), np.zeros((1, n)))
        ef, emean, _ = verify_constraints(pot, measure, quad)
        report = FitReport(0.0, 0.0, ef, emean, 0, "converged")
        return pot, report

    basis = potential_basis(measure.weights, n)
    z = np.zeros(basis.shape[1])

    def unpack(zv):
        theta = (basis @ zv).reshape(m, 1 + n)
        return DualPotentials(theta[:, 0], theta[:, 1:])

    def g_of(zv):
        return eval_g(unpack(zv), measure, quad)

    g_hist: list[float] = []
    pot = unpack(z)
    g_val = g_of(z)
    iterations = 0
    converged = False
    grad_norm = np.inf
    for iterations in range(1, config.max_iters + 1):
        pot = unpack(z)
        gU, gV = grad_g(pot, measure, quad)
        grad_theta = np.concatenate([gU[:, None], gV], axis=1).ravel()
        gz = basis.T @ grad_theta
        grad_norm = float(np.linalg.norm(gz))
        if grad_norm <= config.grad_tol:
            converged = True
            break
        h = basis.T @ hessian_g(pot, measure, quad) @ basis
        step = None
        jitter = 0.0
        for _ in range(6):
            try:
                step = np.linalg.solve(-(h - jitter * np.eye(len(h))), gz)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and step @ gz > 0:
                break
            jitter = max(jitter * 10.0, 1e-10)
            step = None
        if step is None:
            step = gz  # gradient ascent fallback
        tt = 1.0
        slope = float(step @ gz)
        accepted = False
        for _ in range(50):
            g_new = g_of(z + tt * step)
            if g_new >= g_val + 1e-4 * tt * slope:
                accepted = True
                break
            tt *= 0.5
        if not accepted:
            # Also try a plain gradient step before giving up on progress.
            tt = 1.0 / max(1.0, np.linalg.norm(gz))
            g_new = g_of(z + tt * gz)
            if g_new <= g_val:
                break
            step = gz
        z = z + tt * step
        g_val = g_new
        g_hist.append(g_val)
        theta_norm = float(np.linalg.norm(basis @ z))
        if theta_norm > config.norm_cap:
            increasing = len(g_hist) < 10 or g_hist[-1] > g_hist[-10]
            if increasing:
                raise NotDominatedSuspected(
                    f"iterate norm {theta_norm:.3e} exceeds norm_cap with g "
                    f"still increasing: domination with slack {config.slack} "
                    "is suspect",
                    potentials=unpack(z),
                    report=None,
                )

    pot = unpack(z)
    ef, emean, _ = verify_constraints(pot, measure, quad)
    report = FitReport(
        g_value=g_val,
        grad_norm=grad_norm,
        residual_ef=ef,
        residual_mean=emean,
        iterations=iterations,
        status="converged" if converged else "max_iters",
    )
    if not converged:
        raise NonConverged(
            f"no convergence in {config.max_iters} iterations "
            f"(grad norm {grad_norm:.3e})",
            potentials=pot,
            report=report,
        )
    pot.check_gauge(measure.weights)
    return pot, report


class PosteriorSampler:
    """Stream of (label, y): y ~ rho*N(0, I) exactly, label ~ p_i f_i(y)."""

    def __init__(self, potentials: DualPotentials, measure: DiscreteMeasure,
                 gref: GaussianReference, seed: int = 0):
        if measure.dim != gref.dim:
            raise ValueError("measure/reference dimension mismatch")
        self.weights = PosteriorWeights(measure, potentials)
        self.gref = gref
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def sample(self, n: int):
        """Vectorized draw: returns (labels (n,), points (n, dim))."""
        y = self.gref.scale * self._rng.standard_normal((n, self.gref.dim))
        post = self.weights.posterior(y)
        cum = np.cumsum(post, axis=1)
        cum[:, -1] = 1.0
        u = self._rng.random(n)
        labels = (u[:, None] > cum).sum(axis=1)
        return labels, y

    def __iter__(self):
        while True:
            labels, y = self.sample(1024)
            for i in range(len(labels)):
                yield int(labels[i]), y[i]


def posterior_label_sampler(potentials: DualPotentials,
                            measure: DiscreteMeasure,
                            gref: GaussianReference,
                            seed: int = 0) -> PosteriorSampler:
    return PosteriorSampler(potentials, measure, gref, seed)


@dataclass(frozen=True)
class ConditionalLaw:
    """A 1-D conditional density on a grid, with exact tail models.

    density is normalized; log_density_fn evaluates the normalized log
    density anywhere.  Outside [grid[0], grid[-1]] the density equals
    exp(tilt_log_c) * exp(tilt_beta * y) * gaussian_density_rho(y) up to
    the relative error tail_rel_err (exact for single-atom and pure
    Gaussian laws), which is what makes far-tail transport maps accurate.
    """

    grid: np.ndarray
    density: np.ndarray
    rho: float
    tilt_left: tuple[float, float]  # (log_c, beta), normalized
    tilt_right: tuple[float, float]
    mean: float
    norm_factor: float  # integral of the unnormalized density
    log_density_fn: object = field(repr=False, compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        dens = np.asarray(self.density, dtype=float)
        if grid.ndim != 1 or grid.shape != dens.shape:
            raise ValueError("grid/density shape mismatch")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        grid.setflags(write=False)
        dens.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", dens)

    def log_density(self, y):
        return self.log_density_fn(np.asarray(y, dtype=float))

    def tail_mass_below(self, y: float) -> float:
        log_c, beta = self.tilt_left
        br = beta * self.rho
        return float(np.exp(log_c + 0.5 * br**2
                            + log_ndtr(y / self.rho - br)))

    def tail_mass_above(self, y: float) -> float:
        log_c, beta = self.tilt_right
        br = beta * self.rho
        return float(np.exp(log_c + 0.5 * br**2
                            + log_ndtr(-(y / self.rho - br))))

    def grid_mass(self) -> float:
        """Simpson integral of the density over the grid."""
        from scipy.integrate import simpson

        return float(simpson(self.density, x=self.grid))

    def log_concavity_margin(self) -> float:
        """min over interior grid points of -(log density)'' (finite diff)."""
        ld = np.log(self.density)
        h = np.diff(self.grid)
        second = (ld[2:] - 2 * ld[1:-1] + ld[:-2]) / (h[1:] * h[:-1])
        return float((-second).min())


def _dominant_tilt(potentials, measure, side: str):
    """Asymptotically dominant softmax branch: argmax of V (right) or of
    -V (left), ties broken by the larger log p + U."""
    v = potentials.V[:, 0]
    key = v if side == "right" else -v
    score = key * 1e18 + (np.log(measure.weights) + potentials.U)
    j = int(np.argmax(score))
    return j


def conditional_density(potentials: DualPotentials, measure: DiscreteMeasure,
                        gref: GaussianReference, i: int,
                        n_points: int = 4097, span: float = 10.0,
                        mass_tol: float = 1e-10) -> ConditionalLaw:
    """Normalized density of Y given atom i: f_i(y) * gaussian_rho(y), 1-D.

    The returned law integrates to 1 within 1e-8 on its grid and is
    1/rho^2-uniformly log-concave (checked by finite differences).  Raises
    if the tail model puts more than mass_tol outside the grid span.
    """
    if measure.dim != 1:
        raise ValueError("conditional_density grids are 1-D only")
    if not 0 <= i < measure.n_atoms:
        raise IndexError(f"atom index {i} out of range")
    rho = gref.scale
    pw = PosteriorWeights(measure, potentials)
    grid = np.linspace(-span, span, n_points)

    def log_unnorm(y):
        y = np.asarray(y, dtype=float)
        lf = pw.log_f(y.reshape(-1, 1))[:, i]
        ld = lf - 0.5 * (y.ravel() / rho) ** 2 - np.log(rho) - _LOG_SQRT_2PI
        return ld.reshape(y.shape)

    # Total mass: composite Gauss-Legendre panels between grid points plus
    # the exact tilt tails, so normalization is good far beyond grid
    # resolution.
    gl_x, gl_w = np.polynomial.legendre.leggauss(8)
    a, b = grid[:-1, None], grid[1:, None]
    pts = 0.5 * (b - a) * gl_x[None, :] + 0.5 * (a + b)
    vals = np.exp(log_unnorm(pts.ravel())).reshape(pts.shape)
    panel = ((0.5 * (b - a) * gl_w[None, :]) * vals).sum(axis=1)

    j_r = _dominant_tilt(potentials, measure, "right")
    j_l = _dominant_tilt(potentials, measure, "left")
    log_p = np.log(measure.weights)
    beta_r = float(potentials.V[i, 0] - potentials.V[j_r, 0])
    log_c_r = float(potentials.U[i] - potentials.U[j_r] - log_p[j_r])
    beta_l = float(potentials.V[i, 0] - potentials.V[j_l, 0])
    log_c_l = float(potentials.U[i] - potentials.U[j_l] - log_p[j_l])

    def tilt_mass(log_c, beta, lower):
        br = beta * rho
        z = span / rho - br if not lower else -span / rho - br
        lt = log_ndtr(-z) if not lower else log_ndtr(z)
        return np.exp(log_c + 0.5 * br**2 + lt)

    tail_l = tilt_mass(log_c_l, beta_l, lower=True)
    tail_r = tilt_mass(log_c_r, beta_r, lower=False)
    total = float(panel.sum() + tail_l + tail_r)
    if tail_l + tail_r > mass_tol * total:
        raise ValueError(
            f"density mass outside grid span: {(tail_l + tail_r) / total:.3e}"
        )
    log_total = np.log(total)

    def log_norm_density(y):
        return log_unnorm(y) - log_total

    density = np.exp(log_norm_density(grid))
    # Mean over the same panels plus tilt-tail first moments.
    mean_panels = ((0.5 * (b - a) * gl_w[None, :]) * vals * pts).sum()

    def tilt_mean(log_c, beta, lower):
        # int y c e^{beta y} phi_rho(y) dy over the tail, via the shifted
        # Gaussian N(beta rho^2, rho^2).
        br = beta * rho
        mu_s = beta * rho**2
        zz = (span / rho - br) if not lower else (-span / rho - br)
        amp = np.exp(log_c + 0.5 * br**2)
        phi_z = np.exp(-0.5 * zz**2) / np.sqrt(2 * np.pi)
        if lower:
            return amp * (mu_s * np.exp(log_ndtr(zz)) - rho * phi_z)
        return amp * (mu_s * np.exp(log_ndtr(-zz)) + rho * phi_z)

    mean = (mean_panels + tilt_mean(log_c_l, beta_l, True)
            + tilt_mean(log_c_r, beta_r, False)) / total

    law = ConditionalLaw(
        grid=grid,
        density=density,
        rho=rho,
        tilt_left=(log_c_l - log_total, beta_l),
        tilt_right=(log_c_r - log_total, beta_r),
        mean=float(mean),
        norm_factor=total,
        log_density_fn=log_norm_density,
    )
    if abs(law.grid_mass() + law.tail_mass_below(-span)
           + law.tail_mass_above(span) - 1.0) > 1e-8:
        raise ValueError("normalized density does not integrate to 1 on grid")
    margin = law.log_concavity_margin()
    if margin < 1.0 / rho**2 - 1e-3:
        raise ValueError(
            f"conditional law fails uniform log-concavity: margin {margin:.6f}"
        )
    return law


def gaussian_conditional_law(mean: float, std: float, n_points: int = 4097,
                             span: float = 10.0) -> ConditionalLaw:
    """Exact N(mean, std^2) as a ConditionalLaw (std <= 1 for Caffarelli)."""
    grid = np.linspace(-span, span, n_points)

    def log_density(y):
        y = np.asarray(y, dtype=float)
        return -0.5 * ((y - mean) / std) ** 2 - np.log(std) - _LOG_SQRT_2PI

    beta = mean / std**2
    log_c = -0.5 * mean**2 / std**2
    return ConditionalLaw(
        grid=grid,
        density=np.exp(log_density(grid)),
        rho=std,
        tilt_left=(log_c, beta),
        tilt_right=(log_c, beta),
        mean=float(mean),
        norm_factor=1.0,
        log_density_fn=log_density,
    )
