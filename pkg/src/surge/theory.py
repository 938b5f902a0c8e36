"""Monte-Carlo lab for the optimal compensator scale.

A :class:`GradMomentModel` describes the population of (g_b, g_a) pairs:

    g_b = (g* - delta_b) + noise_b,    g_a = mu_a + noise_a

with independent zero-mean Gaussian noises (isotropic, or diagonal in the
``diag`` variant). The mean squared error of ``g_b + lam * g_a`` against g*
is quadratic in ``lam``; its minimizer has the closed form

    lam* = <delta_b, mu_a> / (|mu_a|^2 + tr Var(g_a))

which this module checks against a brute-force grid search over the
empirical error of sampled pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from surge import kernels


class DegenerateModelError(ValueError):
    """The auxiliary gradient has zero mean and zero variance."""


class BracketError(ValueError):
    """The grid minimum sits on an endpoint of the search range."""


def philox(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class GradMomentModel:
    """Population moments of the two gradient branches.

    ``sigma_b`` and ``sigma_a`` are scalar stds (isotropic noise) or length-d
    arrays of per-coordinate stds (diagonal variant). When ``bias_bound`` is
    given, |delta_b| <= bias_bound * sqrt(d) is enforced.
    """

    g_star: np.ndarray
    delta_b: np.ndarray
    mu_a: np.ndarray
    sigma_b: float | np.ndarray = 0.0
    sigma_a: float | np.ndarray = 0.0
    bias_bound: float | None = None

    def __post_init__(self):
        self.g_star = np.asarray(self.g_star, dtype=np.float64).ravel()
        self.delta_b = np.asarray(self.delta_b, dtype=np.float64).ravel()
        self.mu_a = np.asarray(self.mu_a, dtype=np.float64).ravel()
        d = self.g_star.size
        if d < 1 or self.delta_b.size != d or self.mu_a.size != d:
            raise ValueError("g_star, delta_b and mu_a must be nonempty vectors of equal length")
        for name in ("sigma_b", "sigma_a"):
            s = np.asarray(getattr(self, name), dtype=np.float64)
            if s.ndim > 1 or (s.ndim == 1 and s.size != d):
                raise ValueError(f"{name} must be a scalar or a length-{d} vector")
            if np.any(s < 0) or not np.all(np.isfinite(s)):
                raise ValueError(f"{name} must be finite and >= 0")
            setattr(self, name, float(s) if s.ndim == 0 else s)
        if self.bias_bound is not None:
            limit = self.bias_bound * np.sqrt(d)
            if np.linalg.norm(self.delta_b) > limit * (1 + 1e-12):
                raise ValueError(f"|delta_b| = {np.linalg.norm(self.delta_b):.6g} exceeds C*sqrt(d) = {limit:.6g}")

    @property
    def d(self) -> int:
        return self.g_star.size

    @property
    def mu_b(self) -> np.ndarray:
        return self.g_star - self.delta_b

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.sigma_a) == 1 or np.ndim(self.sigma_b) == 1

    def trace_var_a(self) -> float:
        return float(np.sum(np.broadcast_to(np.square(self.sigma_a), (self.d,))))

    def trace_var_b(self) -> float:
        return float(np.sum(np.broadcast_to(np.square(self.sigma_b), (self.d,))))

    def to_dict(self) -> dict:
        def enc(v):
            return v.tolist() if isinstance(v, np.ndarray) else v
        return {
            "d": self.d,
            "g_star": enc(self.g_star),
            "delta_b": enc(self.delta_b),
            "mu_a": enc(self.mu_a),
            "sigma_b": enc(self.sigma_b),
            "sigma_a": enc(self.sigma_a),
            "bias_bound": self.bias_bound,
        }


def random_model(d, seed, bias_bound=1.0, cos_range=(0.3, 0.95), rho_range=(0.05, 2.0),
                 diagonal=False) -> GradMomentModel:
    """A random moment model with a controlled bias/compensator alignment.

    The cosine between delta_b and mu_a is drawn from ``cos_range`` and the
    noise ratio d*sigma_a^2/|mu_a|^2 from ``rho_range``, so lam* is bounded
    away from zero and the Monte-Carlo estimate is well conditioned.
    """
    if d < 2:
        raise ValueError("random_model needs d >= 2")
    rng = philox(seed)
    g_star = rng.standard_normal(d)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    delta_b = u * rng.uniform(0.2, 1.0) * bias_bound * np.sqrt(d)
    v = rng.standard_normal(d)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    c = rng.uniform(*cos_range)
    mu_a = (c * u + np.sqrt(1 - c * c) * v) * np.linalg.norm(delta_b) * rng.uniform(0.5, 2.0)
    rho = rng.uniform(*rho_range)
    sigma_a = np.sqrt(rho * (mu_a @ mu_a) / d)
    sigma_b = rng.uniform(0.1, 1.0) * np.linalg.norm(delta_b) / np.sqrt(d)
    if diagonal:
        w = rng.uniform(0.25, 1.75, d)
        sigma_a = sigma_a * np.sqrt(w / w.mean())
        sigma_b = sigma_b * np.sqrt(rng.uniform(0.25, 1.75, d))
    return GradMomentModel(g_star, delta_b, mu_a, sigma_b, sigma_a, bias_bound=bias_bound)


def sample_gradient_pairs(model: GradMomentModel, n, seed):
    """Draw ``n`` independent (g_b, g_a) pairs; returns two (n, d) arrays."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = philox(seed)
    z_b = rng.standard_normal((n, model.d))
    z_a = rng.standard_normal((n, model.d))
    g_b = model.mu_b + z_b * model.sigma_b
    g_a = model.mu_a + z_a * model.sigma_a
    return g_b, g_a


def lambda_star_analytic(model: GradMomentModel) -> float:
    denom = float(model.mu_a @ model.mu_a) + model.trace_var_a()
    if not denom > 0:
        raise DegenerateModelError("degenerate compensator: |mu_a|^2 + tr Var(g_a) == 0")
    return float(model.delta_b @ model.mu_a) / denom


def expected_error_analytic(model: GradMomentModel, lam) -> float:
    """Population error |lam*mu_a - delta_b|^2 + tr Var(g_b) + lam^2 tr Var(g_a)."""
    r = lam * model.mu_a - model.delta_b
    return float(r @ r) + model.trace_var_b() + lam * lam * model.trace_var_a()


def expected_error_empirical(samples, g_star, lam) -> float:
    """Mean of |g_b + lam*g_a - g*|^2 over the samples (direct evaluation)."""
    g_b, g_a = samples
    if len(g_b) == 0:
        raise ValueError("no samples")
    r = g_b + lam * g_a - np.asarray(g_star)
    return float(np.einsum("ij,ij->", r, r)) / len(g_b)


def error_curve(samples, g_star, lams):
    """Empirical error on a grid of scales.

    Uses the per-sample expansion |r|^2 + 2 lam <r, g_a> + lam^2 |g_a|^2 with
    r = g_b - g*, so the samples are reduced once whatever the grid size.
    """
    g_b, g_a = samples
    a, b, c = kernels.pair_moments(g_b, g_a, np.asarray(g_star, dtype=np.float64))
    lams = np.asarray(lams, dtype=np.float64)
    return a + 2.0 * lams * b + lams * lams * c


def parabola_vertex(xs, ys) -> float:
    """Abscissa of the vertex of the parabola through three points."""
    (x0, x1, x2), (y0, y1, y2) = xs, ys
    den = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / den
    b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / den
    if a <= 0:
        raise ValueError("points are not convex; no minimum vertex")
    return -b / (2 * a)


@dataclass
class OracleResult:
    lam: float          # grid argmin
    refined: float      # parabola vertex through the argmin and its neighbours
    grid: np.ndarray
    curve: np.ndarray
    expansions: int = 0


def lambda_star_grid_oracle(samples, g_star, lam_range, resolution=2001) -> OracleResult:
    lo, hi = map(float, lam_range)
    if not hi > lo or resolution < 3:
        raise ValueError("need lam_range with hi > lo and resolution >= 3")
    grid = np.linspace(lo, hi, int(resolution))
    curve = error_curve(samples, g_star, grid)
    i = int(np.argmin(curve))
    if i == 0 or i == len(grid) - 1:
        raise BracketError(f"bracket too small: minimum at endpoint {grid[i]:.6g} of [{lo:.6g}, {hi:.6g}]")
    try:
        refined = parabola_vertex(grid[i - 1:i + 2], curve[i - 1:i + 2])
    except ValueError:
        refined = float(grid[i])
    return OracleResult(float(grid[i]), float(refined), grid, curve)


def lambda_star_oracle(samples, g_star, center=0.0, half_width=1.0, resolution=2001,
                       max_expansions=30) -> OracleResult:
    """Grid oracle over [center - w, center + w], doubling w on endpoint hits."""
    w = float(half_width)
    for k in range(max_expansions + 1):
        try:
            res = lambda_star_grid_oracle(samples, g_star, (center - w, center + w), resolution)
        except BracketError:
            w *= 2.0
            continue
        res.expansions = k
        return res
    raise BracketError(f"no interior minimum within half-width {w / 2:.6g} of {center}")


def count_local_minima(curve) -> int:
    c = np.asarray(curve)
    inner = (c[1:-1] < c[:-2]) & (c[1:-1] <= c[2:])
    return int(np.sum(inner))


def cosine_similarity(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine_similarity: zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def corollary_terms(model: GradMomentModel) -> dict:
    """Alignment c, bias ratio kappa, noise ratio rho and the implied eta."""
    nd, na, nb = (np.linalg.norm(v) for v in (model.delta_b, model.mu_a, model.mu_b))
    if na == 0 or nb == 0:
        raise ValueError("norm_ratio_approx: mu_a and mu_b must be nonzero")
    c = 0.0 if nd == 0 else float(model.delta_b @ model.mu_a) / (nd * na)
    kappa = nd / nb
    rho = model.trace_var_a() / (na * na)
    return {"cos": c, "kappa": kappa, "rho": rho, "eta": kappa * c / (1 + rho)}


def norm_ratio_approx(model: GradMomentModel):
    """(lam_approx, eta) with lam_approx = eta * |mu_b| / |mu_a|."""
    t = corollary_terms(model)
    lam = t["eta"] * np.linalg.norm(model.mu_b) / np.linalg.norm(model.mu_a)
    return float(lam), t["eta"]


def run_experiment(model: GradMomentModel, n, seed, resolution=2001, curve_points=41) -> dict:
    """Sample, run the oracle and return a JSON-ready report."""
    samples = sample_gradient_pairs(model, n, seed)
    analytic = lambda_star_analytic(model)
    oracle = lambda_star_oracle(samples, model.g_star, center=analytic, resolution=resolution)
    approx, eta = norm_ratio_approx(model)
    idx = np.linspace(0, len(oracle.grid) - 1, curve_points).round().astype(int)
    g_b = samples[0]
    cos_bs = float(np.mean(
        (g_b @ model.g_star) / (np.linalg.norm(g_b, axis=1) * np.linalg.norm(model.g_star) + 1e-300)))
    return {
        "model": model.to_dict(),
        "n": int(n),
        "seed": int(seed),
        "lambda_star_analytic": analytic,
        "lambda_star_oracle": oracle.lam,
        "lambda_star_oracle_refined": oracle.refined,
        "relative_error": abs(analytic - oracle.lam) / max(abs(analytic), 1e-6),
        "lambda_approx": approx,
        "eta_implied": eta,
        "corollary_terms": corollary_terms(model),
        "mean_cos_gb_gstar": cos_bs,
        "grid_expansions": oracle.expansions,
        "mse_curve": {"lambda": oracle.grid[idx].tolist(), "mse": oracle.curve[idx].tolist()},
    }


def theory_report(d=32, n=100_000, seed=0, n_models=1, resolution=2001) -> dict:
    runs = [run_experiment(random_model(d, seed * 1000 + i), n, seed * 1000 + i + 500, resolution)
            for i in range(n_models)]
    errs = [r["relative_error"] for r in runs]
    return {"d": d, "n": n, "seed": seed, "n_models": n_models,
            "max_relative_error": max(errs), "runs": runs}


def dumps_report(report) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
