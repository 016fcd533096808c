"""Maximum simulated likelihood estimation, robust covariance and draw-based SEs."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize, stats

from .choice import FREE_TAIL, Theta
from .draws import DrawSet, make_drawset
from .likelihood import wll

log = logging.getLogger(__name__)

HESSIAN_STEP = 1e-4
N_LOG_PARAMS = 4  # log sd_beta, log sd_alpha, log sigma_eta, log scale_mu


@dataclass
class EstimationConfig:
    R: int = 500
    seed: int = 0
    starts: int = 1
    tol: float = 1e-5
    rel_tol: float = 1e-9
    max_iter: int = 1000
    polish_iter: int = 30
    start_spread: float = 0.5
    threads: int = 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def default_start(n_gamma: int, names=()) -> Theta:
    return Theta(np.zeros(n_gamma), mu_beta=-1.0, sigma_beta=0.5, mu_alpha=-1.0,
                 sigma_alpha=0.5, sigma_eta=0.5, scale_mu=1.0, names=tuple(names))


def _snap(x: np.ndarray) -> np.ndarray:
    """Round-trip through the reported scale so a saved report reproduces x exactly."""
    return Theta.from_report(Theta.from_free(x).to_report()).to_free()


def numerical_hessian(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                      step: float = HESSIAN_STEP) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised."""
    n = len(x)
    Hm = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        Hm[:, k] = (grad(x + e) - grad(x - e)) / (2 * step)
    return 0.5 * (Hm + Hm.T)


@dataclass
class SandwichInfo:
    hessian: np.ndarray
    condition_number: float
    pseudo_inverse: bool


def sandwich_from_parts(hessian: np.ndarray, scores: np.ndarray, weights: np.ndarray):
    """``H^-1 G H^-1`` with ``G = sum_i w_i^2 s_i s_i'``.

    Falls back to a pseudo-inverse (flagged) when H is singular.
    """
    ws = scores * weights[:, None]
    G = ws.T @ ws
    cond = float(np.linalg.cond(hessian))
    pinv = not np.isfinite(cond) or cond > 1e14
    if pinv:
        warnings.warn("Hessian is singular; using pseudo-inverse", RuntimeWarning)
        Hinv = np.linalg.pinv(hessian)
    else:
        Hinv = np.linalg.inv(hessian)
    cov = Hinv @ G @ Hinv
    cov = 0.5 * (cov + cov.T)
    return cov, SandwichInfo(hessian, cond, pinv)


def sandwich_covariance(theta_hat, ds, draws: DrawSet, threads: int = 1,
                        step: float = HESSIAN_STEP):
    """Robust covariance of the free parameters at ``theta_hat``."""
    x = theta_hat.to_free() if isinstance(theta_hat, Theta) else np.asarray(theta_hat, float)
    rep = wll(x, ds, draws, threads=threads)
    gmax = float(np.max(np.abs(rep.gradient)))
    if gmax > 1e-3:
        warnings.warn(f"sandwich evaluated away from a stationary point (|g|max={gmax:.2e})",
                      RuntimeWarning)
    Hm = numerical_hessian(lambda z: wll(z, ds, draws, threads=threads).gradient, x, step)
    return sandwich_from_parts(Hm, rep.scores, ds.weight)


def report_jacobian(x: np.ndarray) -> np.ndarray:
    """d(report scale)/d(free scale), diagonal."""
    d = np.ones(len(x))
    k = len(x) - len(FREE_TAIL)
    for off in (1, 3, 4, 5):
        d[k + off] = math.exp(x[k + off])
    return d


def propagate_uncertainty(theta_hat, covariance: np.ndarray, functional: Callable,
                          n_draws: int = 100, seed: int = 0, names=()):
    """Point value and draw-based standard error of ``functional(Theta)``.

    Parameter vectors are drawn from N(theta_hat, covariance) on the free
    scale. Draws where the functional raises are skipped and counted.
    Returns ``(point, se, n_failed)``.
    """
    x = theta_hat.to_free() if isinstance(theta_hat, Theta) else np.asarray(theta_hat, float)
    if isinstance(theta_hat, Theta) and not names:
        names = theta_hat.names
    point = np.asarray(functional(Theta.from_free(x, names)), dtype=float)
    rng = np.random.default_rng(seed)
    cov = 0.5 * (covariance + covariance.T)
    sample = rng.multivariate_normal(x, cov, size=n_draws, method="eigh")
    values, failed = [], 0
    for xs in sample:
        try:
            values.append(np.asarray(functional(Theta.from_free(xs, names)), dtype=float))
        except (ValueError, FloatingPointError, ArithmeticError):
            failed += 1
    if len(values) < 2:
        raise ValueError("uncertainty propagation: fewer than two successful draws")
    se = np.std(np.array(values), axis=0, ddof=1)
    if point.ndim == 0:
        return float(point), float(se), failed
    return point, se, failed


@dataclass
class EstimationResult:
    theta_hat: Theta
    covariance: np.ndarray
    loglik: float
    gradient_norm: float
    iterations: int
    converged: bool
    standard_errors: np.ndarray          # reported scale
    seed: int
    R: int
    free_standard_errors: np.ndarray = None
    message: str = ""
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    starts: list = field(default_factory=list)

    def table(self) -> list[dict]:
        """Rows of (name, estimate, se, z, p, stars) on the reported scale."""
        rows = []
        for name, est, se in zip(self.theta_hat.report_names(), self.theta_hat.to_report(),
                                 self.standard_errors):
            z = est / se if se > 0 else math.nan
            p = 2 * stats.norm.sf(abs(z)) if se > 0 else math.nan
            stars = "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""
            rows.append({"parameter": name, "estimate": float(est), "std_error": float(se),
                         "z": float(z), "p_value": float(p), "stars": stars})
        return rows

    def to_dict(self) -> dict:
        x = self.theta_hat.to_free()
        return {
            "parameters": {
                "names": self.theta_hat.report_names(),
                "free_names": self.theta_hat.free_names(),
                "reported": self.theta_hat.to_report().tolist(),
                "free": x.tolist(),
                "std_errors": self.standard_errors.tolist(),
                "free_std_errors": self.free_standard_errors.tolist(),
            },
            "covariance": self.covariance.tolist(),
            "loglik": self.loglik,
            "convergence": {
                "converged": self.converged, "iterations": self.iterations,
                "gradient_norm": self.gradient_norm, "message": self.message,
            },
            "diagnostics": self.diagnostics,
            "config": self.config,
            "seed": self.seed, "R": self.R,
            "starts": self.starts,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationResult":
        par = d["parameters"]
        n_g = len(par["names"]) - len(FREE_TAIL)
        theta = Theta.from_report(par["reported"], par["names"][:n_g])
        conv = d["convergence"]
        return cls(theta, np.array(d["covariance"]), d["loglik"], conv["gradient_norm"],
                   conv["iterations"], conv["converged"], np.array(par["std_errors"]),
                   d["seed"], d["R"], np.array(par["free_std_errors"]), conv["message"],
                   d.get("diagnostics", {}), d.get("config", {}), d.get("starts", []))

    @classmethod
    def load(cls, path: str | Path) -> "EstimationResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _maximize(x0, ds, draws, cfg: EstimationConfig):
    """BFGS on the mean loglikelihood, then chord-Newton polishing on the sum."""
    wsum = float(ds.weight.sum())
    calls = {"n": 0}

    def f(x):
        calls["n"] += 1
        try:
            rep = wll(x, ds, draws, threads=cfg.threads)
        except (ValueError, FloatingPointError):
            return np.inf, np.zeros_like(x)
        if not np.isfinite(rep.value) or not np.all(np.isfinite(rep.gradient)):
            return np.inf, np.zeros_like(x)
        return -rep.value / wsum, -rep.gradient / wsum

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(f, x0, jac=True, method="BFGS",
                                options={"gtol": cfg.tol / wsum, "maxiter": cfg.max_iter})
    x = _snap(res.x)
    iterations = int(res.nit)
    rep = wll(x, ds, draws, threads=cfg.threads)
    last_rel = math.inf
    Hm = None
    for _ in range(cfg.polish_iter):
        gmax = float(np.max(np.abs(rep.gradient)))
        if gmax < cfg.tol and last_rel < cfg.rel_tol:
            break
        if Hm is None:
            Hm = numerical_hessian(lambda z: wll(z, ds, draws, threads=cfg.threads).gradient, x)
        try:
            step = -np.linalg.solve(Hm, rep.gradient)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(Hm, rep.gradient, rcond=None)[0]
        t, moved = 1.0, False
        for _ in range(20):
            xn = _snap(x + t * step)
            try:
                rn = wll(xn, ds, draws, threads=cfg.threads)
            except ValueError:
                t *= 0.5
                continue
            if np.isfinite(rn.value) and rn.value >= rep.value:
                moved = True
                break
            t *= 0.5
        iterations += 1
        if not moved:
            last_rel = 0.0
            break
        last_rel = abs(rn.value - rep.value) / max(abs(rep.value), 1e-300)
        if t < 1.0:
            Hm = None
        x, rep = xn, rn
    gmax = float(np.max(np.abs(rep.gradient)))
    converged = gmax < cfg.tol and last_rel < cfg.rel_tol
    return x, rep, iterations, converged, gmax, res.message, calls["n"]


def estimate(ds, config: EstimationConfig | None = None, draws: DrawSet | None = None,
             start: Theta | None = None) -> EstimationResult:
    """Maximise the weighted simulated loglikelihood from one or more starts.

    The first start is ``start`` (or :func:`default_start`); further starts
    perturb it with seeded normal noise. The best start wins. Non-convergence
    is reported through ``converged=False`` rather than an exception.
    """
    cfg = config or EstimationConfig()
    if cfg.R < 50:
        raise ValueError("estimation needs R >= 50")
    if draws is None:
        draws = make_drawset(ds.n_households, cfg.R, cfg.seed)
    names = ds.term_names
    base = (start or default_start(ds.n_terms, names)).to_free()
    rng = np.random.default_rng([cfg.seed, 12345])
    best, summaries = None, []
    for s in range(max(1, cfg.starts)):
        x0 = base if s == 0 else base + rng.normal(0.0, cfg.start_spread, len(base))
        out = _maximize(x0, ds, draws, cfg)
        x, rep, iters, conv, gmax, msg, n_calls = out
        summaries.append({"start": s, "loglik": rep.value, "converged": conv,
                          "gradient_norm": gmax, "iterations": iters, "evaluations": n_calls})
        log.info("start %d: loglik %.6f |g|=%.2e converged=%s", s, rep.value, gmax, conv)
        if best is None or rep.value > best[1].value:
            best = out

    x, rep, iters, conv, gmax, msg, _ = best
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        Hm = numerical_hessian(lambda z: wll(z, ds, draws, threads=cfg.threads).gradient, x)
        cov, info = sandwich_from_parts(Hm, rep.scores, ds.weight)
    free_se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    theta = Theta.from_free(x, names)
    diagnostics = {
        "hessian_condition_number": info.condition_number,
        "pseudo_inverse": info.pseudo_inverse,
        "clamp_count": rep.clamp_count,
        "floored_households": rep.floored,
        "warnings": [str(w.message) for w in caught],
        "n_households": ds.n_households,
        "n_alternatives": ds.n_alternatives,
    }
    return EstimationResult(
        theta_hat=theta, covariance=cov, loglik=rep.value, gradient_norm=gmax,
        iterations=iters, converged=conv, standard_errors=free_se * report_jacobian(x),
        seed=cfg.seed, R=cfg.R, free_standard_errors=free_se, message=str(msg),
        diagnostics=diagnostics, config=cfg.to_dict(), starts=summaries,
    )
