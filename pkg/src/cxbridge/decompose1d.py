"""One-dimensional realization of the three-Gaussian decomposition.

Pipeline per draw, for a centered discrete measure dominated with slack by
the standard Gaussian (rho = 1):

1. draw a label i ~ p;
2. the fitted conditional law of Y given atom i is 1-uniformly log-concave,
   so its monotone rearrangement F_i = Q_i o Phi (Q_i the conditional
   quantile) is a 1-Lipschitz transport map from N(0, 1);
3. simulate a Brownian path B on [0, 1]; the heat-semigroup gradient
   sigma_t = d/dx E[F_i(x + sqrt(1-t) Z)] at x = B_t is the martingale
   representation integrand of F_i(B_1);
4. split the stochastic integral: with C >= Lip(F_i) and an independent
   Brownian path B',

       y = sum (sigma/C) dB + sum sqrt(1 - sigma^2/C^2) dB',
       z = sum (sigma/C) dB - sum sqrt(1 - sigma^2/C^2) dB',

   both exactly standard normal (each increment is conditionally normal
   with variance dt), with y + z = (2/C) sum sigma dB ~ F_i(B_1) - x_i
   for C = 2 (a 1-Lipschitz map is 2-Lipschitz, so the lemma's average
   becomes a sum).

The emitted tuple (x, y, z, s = x+y+z) realizes s ~ N(0,1) with
E[s | x] = x, i.e. x = s + (-y) + (-z) writes the discrete draw as a sum
of three standard Gaussians.  The per-path residual
r = |F_i(B_1) - x_i - (C/2)(y+z)| is reported, never hidden.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss
from scipy.special import log_ndtr, ndtri

from .entropic import ConditionalLaw, DualPotentials, conditional_density
from .measures import DiscreteMeasure, GaussianReference, build_quadrature

_GH_T, _GH_W = hermgauss(64)
_GH_Z = _GH_T * np.sqrt(2.0)
_GH_WN = _GH_W / np.sqrt(np.pi)
_GL_T, _GL_W = leggauss(8)

SLOPE_CAP = 1.0 + 1e-3
PUSHFORWARD_MEAN_TOL = 1e-5


@dataclass(frozen=True)
class MonotoneMap1D:
    """Grid transport map: linear interpolation, affine extension outside."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or len(grid) < 4:
            raise ValueError("map needs matching 1-D grid/values, >= 4 points")
        dg = np.diff(grid)
        if np.any(dg <= 0):
            raise ValueError("map grid must be strictly increasing")
        dv = np.diff(values)
        if np.any(dv < -1e-12 * max(1.0, np.abs(values).max())):
            raise ValueError("map values must be nondecreasing")
        slopes = np.maximum(dv, 0.0) / dg
        grid.setflags(write=False)
        values.setflags(write=False)
        slopes.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_slopes", slopes)

    @property
    def max_slope(self) -> float:
        return float(self._slopes.max())

    @property
    def spacing(self) -> float:
        return float(np.diff(self.grid).min())

    @property
    def span(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.grid, self.values)
        lo, hi = self.grid[0], self.grid[-1]
        below = x < lo
        above = x > hi
        if np.any(below):
            out = np.where(below, self.values[0] + self._slopes[0] * (x - lo), out)
        if np.any(above):
            out = np.where(above, self.values[-1] + self._slopes[-1] * (x - hi), out)
        return out

    def prime(self, x):
        """Piecewise-constant derivative (boundary slopes outside the grid)."""
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(self.grid, x, side="right") - 1,
                      0, len(self._slopes) - 1)
        return self._slopes[idx]

    def mean_under_gaussian(self) -> float:
        rule = build_quadrature(1, 1.0, "high")
        return float(rule.weights @ self(rule.nodes[:, 0]))


class IdentityMap:
    max_slope = 1.0

    def __call__(self, x):
        return np.asarray(x, dtype=float)

    def prime(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def heat_gradient(self, s, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def mean_under_gaussian(self):
        return 0.0


class AbsMap:
    max_slope = 1.0

    def __call__(self, x):
        return np.abs(np.asarray(x, dtype=float))

    def prime(self, x):
        return np.sign(np.asarray(x, dtype=float))

    def heat_gradient(self, s, x):
        x = np.asarray(x, dtype=float)
        if s <= 0:
            return np.sign(x)
        # d/dx E|x + s Z| = 2 Phi(x/s) - 1
        return np.exp(log_ndtr(x / s)) - np.exp(log_ndtr(-x / s))

    def mean_under_gaussian(self):
        return float(np.sqrt(2.0 / np.pi))


class AffineMap:
    def __init__(self, slope: float, intercept: float = 0.0):
        self.slope = float(slope)
        self.intercept = float(intercept)
        self.max_slope = abs(self.slope)

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept

    def prime(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.slope)

    def heat_gradient(self, s, x):
        return np.full_like(np.asarray(x, dtype=float), self.slope)

    def mean_under_gaussian(self):
        return self.intercept


def named_map(name: str, **kwargs):
    if name == "identity":
        return IdentityMap()
    if name == "abs":
        return AbsMap()
    if name == "affine":
        return AffineMap(kwargs.get("slope", 1.0), kwargs.get("intercept", 0.0))
    raise ValueError(f"unknown named map {name!r}")


def _panel_integral(law: ConditionalLaw, a, b):
    """Gauss-Legendre integral of the law density over [a, b], vectorized."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    pts = 0.5 * (b - a)[..., None] * _GL_T + 0.5 * (a + b)[..., None]
    vals = np.exp(law.log_density(pts.ravel())).reshape(pts.shape)
    return ((0.5 * (b - a))[..., None] * _GL_W * vals).sum(axis=-1)


def _invert_tail(law: ConditionalLaw, target, lower: bool):
    """Closed-form quantile in the tilt-tail region."""
    log_c, beta = law.tilt_left if lower else law.tilt_right
    br = beta * law.rho
    # target = exp(log_c + br^2/2) * Phi(+-(y/rho - br))
    arg = np.asarray(target) * np.exp(-log_c - 0.5 * br**2)
    z = ndtri(np.clip(arg, 1e-310, 1 - 1e-16))
    if lower:
        return law.rho * (z + br)
    return law.rho * (-z + br)


def caffarelli_map_1d(law: ConditionalLaw, grid: np.ndarray | None = None,
                      slope_cap: float = SLOPE_CAP) -> MonotoneMap1D:
    """Monotone rearrangement F = Q_law o Phi from N(0, 1) to the law.

    The law must be 1-uniformly log-concave (margin >= 1 - 1e-3), so F is
    1-Lipschitz (Caffarelli).  The CDF is accumulated from whichever tail
    is nearer — panel Gauss-Legendre between grid points anchored by the
    exact tilt tails — keeping full relative precision, and inverted by
    bracketed Newton, so closed-form Gaussian targets are reproduced to
    ~1e-9 across the whole default span.
    """
    if law.log_concavity_margin() < 1.0 - 1e-3:
        raise ValueError("law is not 1-uniformly log-concave")
    tail_outside = law.tail_mass_below(law.grid[0]) + law.tail_mass_above(law.grid[-1])
    if tail_outside > 1e-10:
        raise ValueError(
            f"density mass outside grid span: {tail_outside:.3e}"
        )
    if grid is None:
        grid = np.linspace(-10.0, 10.0, 4097)
    grid = np.asarray(grid, dtype=float)

    yg = law.grid
    panels = _panel_integral(law, yg[:-1], yg[1:])
    tail_l = law.tail_mass_below(yg[0])
    tail_r = law.tail_mass_above(yg[-1])
    cl = tail_l + np.concatenate([[0.0], np.cumsum(panels)])
    sr = tail_r + np.concatenate([[0.0], np.cumsum(panels[::-1])])[::-1]
    total = tail_l + panels.sum() + tail_r

    values = np.empty_like(grid)
    dens = lambda y: np.exp(law.log_density(y))

    def solve_panel(idx, delta, from_left):
        """Find y with mass delta inward from the panel edge (safeguarded
        Newton on the panel integral, frozen once |f| hits roundoff)."""
        lo0 = yg[idx].astype(float)
        hi0 = yg[idx + 1].astype(float)
        lo, hi = lo0.copy(), hi0.copy()
        frac = np.clip(delta / np.maximum(panels[idx], 1e-300), 0.0, 1.0)
        y = lo + frac * (hi - lo) if from_left else hi - frac * (hi - lo)
        active = np.ones(y.shape, dtype=bool)
        f_tol = 1e-15 * delta + 1e-305
        for _ in range(12):
            if not active.any():
                break
            ya = y[active]
            if from_left:
                f = _panel_integral(law, lo0[active], ya) - delta[active]
            else:
                f = delta[active] - _panel_integral(law, ya, hi0[active])
            done = np.abs(f) <= f_tol[active]
            # Bracket update: f is increasing in y for both orientations.
            la, ha = lo[active], hi[active]
            ha = np.where(f > 0, ya, ha)
            la = np.where(f < 0, ya, la)
            step = f / np.maximum(dens(ya), 1e-300)
            y_new = ya - step
            outside = (y_new < la) | (y_new > ha) | ~np.isfinite(y_new)
            y_new = np.where(outside, 0.5 * (la + ha), y_new)
            y_new = np.where(done, ya, y_new)
            lo[active], hi[active] = la, ha
            y[active] = y_new
            still = np.zeros(y.shape, dtype=bool)
            still[active] = ~done
            active = still
        return y

    left = grid <= 0.0
    if np.any(left):
        u = np.exp(log_ndtr(grid[left])) * total
        in_tail = u <= cl[0]
        out = np.empty(u.shape)
        if np.any(in_tail):
            out[in_tail] = _invert_tail(law, u[in_tail], lower=True)
        if np.any(~in_tail):
            ui = u[~in_tail]
            idx = np.clip(np.searchsorted(cl, ui, side="right") - 1, 0,
                          len(panels) - 1)
            out[~in_tail] = solve_panel(idx, ui - cl[idx], from_left=True)
        values[left] = out
    right = ~left
    if np.any(right):
        us = np.exp(log_ndtr(-grid[right])) * total
        in_tail = us <= sr[-1]
        out = np.empty(us.shape)
        if np.any(in_tail):
            out[in_tail] = _invert_tail(law, us[in_tail], lower=False)
        if np.any(~in_tail):
            ui = us[~in_tail]
            # sr is decreasing; find panel with sr[idx+1] <= ui < sr[idx].
            idx = np.clip(len(sr) - 1 - np.searchsorted(sr[::-1], ui,
                                                        side="right"),
                          0, len(panels) - 1)
            out[~in_tail] = solve_panel(idx, ui - sr[idx + 1], from_left=False)
        values[right] = out

    fmap = MonotoneMap1D(grid, values)
    if fmap.max_slope > slope_cap:
        raise ValueError(
            f"transport map slope {fmap.max_slope:.6f} exceeds the "
            f"Caffarelli cap {slope_cap}"
        )
    push_mean = fmap.mean_under_gaussian()
    if abs(push_mean - law.mean) > PUSHFORWARD_MEAN_TOL:
        raise ValueError(
            f"pushforward mean {push_mean:.3e} misses target {law.mean:.3e}"
        )
    return fmap


def heat_gradient(psi, t: float, x):
    """sigma = d/dx E[psi(x + sqrt(1-t) Z)], Z standard normal.

    Closed form for the named maps; for grid maps, 64-node Gauss-Hermite
    over the piecewise-constant derivative, switching to the direct slope
    psi'(x) once sqrt(1-t) falls below the grid spacing.
    """
    if t >= 1.0:
        raise ValueError("heat_gradient requires t < 1")
    s = float(np.sqrt(1.0 - t))
    scalar = np.isscalar(x)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if hasattr(psi, "heat_gradient"):
        out = psi.heat_gradient(s, x)
    else:
        out = _heat_gradient_grid(psi, s, x)
    return float(out[0]) if scalar else out


def _heat_gradient_grid(psi: MonotoneMap1D, s: float, x: np.ndarray):
    if s < psi.spacing:
        return psi.prime(x)
    pts = x[:, None] + s * _GH_Z[None, :]
    return psi.prime(pts.ravel()).reshape(pts.shape) @ _GH_WN


@dataclass(frozen=True)
class SplitPathConfig:
    """Configuration of the Brownian split of one Lipschitz map."""

    psi: object
    c_lip: float
    steps: int = 4096
    seed: int = 0
    mean: float | None = None
    inner_nodes: int = 64

    def __post_init__(self):
        if self.steps < 2 or self.steps & (self.steps - 1):
            raise ValueError("steps must be a power of two >= 2")
        if self.c_lip <= 0:
            raise ValueError("c_lip must be positive")
        if self.psi is not None and hasattr(self.psi, "max_slope"):
            if self.psi.max_slope > self.c_lip * (1 + 1e-9):
                raise ValueError(
                    f"declared c_lip {self.c_lip} below observed max slope "
                    f"{self.psi.max_slope}"
                )

    def resolved_mean(self) -> float:
        if self.mean is not None:
            return float(self.mean)
        return float(self.psi.mean_under_gaussian())


@dataclass(frozen=True)
class SplitSample:
    g: float  # terminal Brownian point B_1
    x: float
    y: float
    residual: float
    exited: bool = False


# sigma-table policy for grid maps: interpolate a per-step table while the
# heat kernel is wide, evaluate directly once it gets narrow.
_TABLE_SPAN = 8.5
_TABLE_SIZE = 2048
_TABLE_MIN_S = 16.0 * (2 * _TABLE_SPAN / (_TABLE_SIZE - 1))


class _SigmaEvaluator:
    """Per-map sigma(t_k, x) evaluator with per-step tables for grid maps."""

    def __init__(self, psi, steps: int):
        self.psi = psi
        self.steps = steps
        self.closed_form = hasattr(psi, "heat_gradient")
        self.s_values = np.sqrt(1.0 - np.arange(steps) / steps)
        if not self.closed_form:
            self.table_x = np.linspace(-_TABLE_SPAN, _TABLE_SPAN, _TABLE_SIZE)
            self.tables = np.zeros((steps, _TABLE_SIZE), dtype=np.float32)
            for k, s in enumerate(self.s_values):
                if s >= _TABLE_MIN_S:
                    self.tables[k] = _heat_gradient_grid(psi, s, self.table_x)

    def __call__(self, k: int, b: np.ndarray) -> np.ndarray:
        s = self.s_values[k]
        if self.closed_form:
            return self.psi.heat_gradient(s, b)
        if s >= _TABLE_MIN_S:
            return np.interp(b, self.table_x, self.tables[k].astype(float))
        if s >= self.psi.spacing:
            return _heat_gradient_grid(self.psi, s, b)
        return self.psi.prime(b)


def _draw_generator(seed: int, index: int) -> np.random.Generator:
    # Counter-based: one Philox stream per (master seed, draw index), so the
    # sample stream is order-independent and parallelizable.
    return np.random.Generator(
        np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, index])
    )


def _simulate_split(psi, c: float, mean: float, steps: int,
                    db: np.ndarray, dbp: np.ndarray,
                    sigma_eval: _SigmaEvaluator):
    """Vectorized split over a batch of pre-drawn increments."""
    n = db.shape[0]
    sa = np.zeros(n)
    sb = np.zeros(n)
    b = np.zeros(n)
    exited = np.zeros(n, dtype=bool)
    span = getattr(psi, "span", None)
    for k in range(steps):
        sig = sigma_eval(k, b)
        a = sig / c
        amax = np.abs(a).max(initial=0.0)
        if amax > 1.0 + 1e-6:
            raise ValueError(
                f"heat gradient {amax * c:.6f} exceeds declared c_lip {c}"
            )
        a = np.clip(a, -1.0, 1.0)
        comp = np.sqrt(1.0 - a * a)
        sa += a * db[:, k]
        sb += comp * dbp[:, k]
        b += db[:, k]
        if span is not None:
            exited |= (b < span[0]) | (b > span[1])
    x = sa + sb
    y = sa - sb
    residual = np.abs(np.asarray(psi(b)) - mean - 0.5 * c * (x + y))
    return b, x, y, residual, exited


def split_samples(cfg: SplitPathConfig, n: int, start_index: int = 0,
                  chunk: int = 2048) -> dict:
    """Draw n split samples; returns arrays g, x, y, residual, exited."""
    mean = cfg.resolved_mean()
    sigma_eval = _SigmaEvaluator(cfg.psi, cfg.steps)
    sdt = np.sqrt(1.0 / cfg.steps)
    out = {key: [] for key in ("g", "x", "y", "residual", "exited")}
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        nn = hi - lo
        db = np.empty((nn, cfg.steps))
        dbp = np.empty((nn, cfg.steps))
        for d in range(nn):
            gen = _draw_generator(cfg.seed, start_index + lo + d)
            incs = gen.standard_normal(2 * cfg.steps) * sdt
            db[d] = incs[: cfg.steps]
            dbp[d] = incs[cfg.steps:]
        g, x, y, r, ex = _simulate_split(
            cfg.psi, cfg.c_lip, mean, cfg.steps, db, dbp, sigma_eval
        )
        out["g"].append(g)
        out["x"].append(x)
        out["y"].append(y)
        out["residual"].append(r)
        out["exited"].append(ex)
    return {k: np.concatenate(v) for k, v in out.items()}


def lipschitz_split_sample(cfg: SplitPathConfig,
                           draw_index: int = 0) -> SplitSample:
    """One realization of the Lipschitz-image split (see module docstring)."""
    res = split_samples(cfg, 1, start_index=draw_index)
    return SplitSample(
        g=float(res["g"][0]),
        x=float(res["x"][0]),
        y=float(res["y"][0]),
        residual=float(res["residual"][0]),
        exited=bool(res["exited"][0]),
    )


class ThreeGaussianSampler:
    """Stream of (x, y, z, s): x ~ measure, y, z, s standard normal,
    s = x + y + z with E[s | x] = x up to the reported path residual."""

    PIPELINE_C_LIP = 2.0

    def __init__(self, measure: DiscreteMeasure, potentials: DualPotentials,
                 cfg: SplitPathConfig, seed: int = 0):
        if measure.dim != 1:
            raise ValueError("three-Gaussian decomposition is 1-D only")
        self.measure = measure
        self.potentials = potentials
        self.cfg = cfg
        self.seed = seed
        gref = GaussianReference(1, 1.0)
        self.maps = []
        self.means = measure.atoms[:, 0].copy()
        for i in range(measure.n_atoms):
            law = conditional_density(potentials, measure, gref, i)
            self.maps.append(caffarelli_map_1d(law))
        self._sigma_evals = [
            _SigmaEvaluator(fmap, cfg.steps) for fmap in self.maps
        ]
        self._cum_p = np.cumsum(measure.weights)
        self._cum_p[-1] = 1.0

    def sample(self, n: int, start_index: int = 0, chunk: int = 2048) -> dict:
        """Vectorized draws; per-draw streams are keyed by (seed, index)."""
        steps = self.cfg.steps
        sdt = np.sqrt(1.0 / steps)
        keys = ("label", "x", "y", "z", "s", "residual", "b1", "exited")
        out = {key: [] for key in keys}
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            nn = hi - lo
            labels = np.empty(nn, dtype=int)
            db = np.empty((nn, steps))
            dbp = np.empty((nn, steps))
            for d in range(nn):
                gen = _draw_generator(self.seed, start_index + lo + d)
                labels[d] = np.searchsorted(self._cum_p, gen.random(),
                                            side="right")
                incs = gen.standard_normal(2 * steps) * sdt
                db[d] = incs[:steps]
                dbp[d] = incs[steps:]
            xs = self.means[labels]
            ys = np.empty(nn)
            zs = np.empty(nn)
            rs = np.empty(nn)
            b1 = np.empty(nn)
            ex = np.zeros(nn, dtype=bool)
            for i in np.unique(labels):
                sel = labels == i
                g, y, z, r, e = _simulate_split(
                    self.maps[i], self.PIPELINE_C_LIP, self.means[i],
                    steps, db[sel], dbp[sel], self._sigma_evals[i],
                )
                ys[sel], zs[sel], rs[sel], b1[sel], ex[sel] = y, z, r, g, e
            vals = {
                "label": labels, "x": xs, "y": ys, "z": zs,
                "s": xs + ys + zs, "residual": rs, "b1": b1, "exited": ex,
            }
            for key in keys:
                out[key].append(vals[key])
        return {k: np.concatenate(v) for k, v in out.items()}

    def __iter__(self):
        index = 0
        while True:
            batch = self.sample(1024, start_index=index)
            for j in range(len(batch["x"])):
                yield (batch["x"][j], batch["y"][j], batch["z"][j],
                       batch["s"][j])
            index += 1024


def three_gaussian_sampler(measure: DiscreteMeasure,
                           potentials: DualPotentials,
                           cfg: SplitPathConfig,
                           seed: int = 0) -> ThreeGaussianSampler:
    return ThreeGaussianSampler(measure, potentials, cfg, seed)
