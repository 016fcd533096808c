"""Structural equations: indirect utility, logit choice probabilities and VKT.

Utility of household i for car j, given random coefficients beta > 0,
alpha < 0 and driving taste eta::

    u = -(1/beta) exp(-beta (y - r) - gX - eta) - (1/alpha) exp(alpha p)

Roy's identity turns this into annual driving ``ln KM = beta (y - r) + gX +
alpha p + eta``. Choice probabilities are a logit in ``u / scale_mu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

# exponent cap inside the first utility term
EXP_CLAMP = 700.0

FREE_TAIL = ("mu_beta", "log_sigma_beta", "mu_alpha", "log_sigma_alpha",
             "log_sigma_eta", "log_scale_mu")
REPORT_TAIL = ("mu_beta", "sigma_beta", "mu_alpha", "sigma_alpha",
               "sigma_eta", "scale_mu")


@dataclass(frozen=True, eq=False)
class Theta:
    """Model parameters.

    ``mu_*``/``sigma_*`` for beta and alpha are the mean and standard deviation
    of the underlying normal: ``beta = exp(N(mu_beta, sigma_beta^2))`` and
    ``alpha = -exp(N(mu_alpha, sigma_alpha^2))``. ``sigma_eta`` is the standard
    deviation of the driving taste and ``scale_mu`` the logit scale.
    """

    gamma: np.ndarray
    mu_beta: float
    sigma_beta: float
    mu_alpha: float
    sigma_alpha: float
    sigma_eta: float
    scale_mu: float
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).copy()
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        if not np.all(np.isfinite(gamma)):
            raise ValueError("gamma must be finite")
        for name in ("sigma_beta", "sigma_alpha", "sigma_eta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.scale_mu > 0:
            raise ValueError("scale_mu must be > 0")
        if not (np.isfinite(self.mu_beta) and np.isfinite(self.mu_alpha)):
            raise ValueError("mu_beta and mu_alpha must be finite")
        if self.names and len(self.names) != len(gamma):
            raise ValueError("names must match gamma length")

    @property
    def n_free(self) -> int:
        return len(self.gamma) + len(FREE_TAIL)

    def free_names(self) -> list[str]:
        g = list(self.names) or [f"gamma[{k}]" for k in range(len(self.gamma))]
        return g + list(FREE_TAIL)

    def report_names(self) -> list[str]:
        g = list(self.names) or [f"gamma[{k}]" for k in range(len(self.gamma))]
        return g + list(REPORT_TAIL)

    def to_free(self) -> np.ndarray:
        """Unconstrained vector: gamma, mu_beta, log sd_beta, mu_alpha,
        log sd_alpha, log sigma_eta, log scale_mu."""
        with np.errstate(divide="ignore"):
            tail = [self.mu_beta, np.log(self.sigma_beta), self.mu_alpha,
                    np.log(self.sigma_alpha), np.log(self.sigma_eta), np.log(self.scale_mu)]
        return np.concatenate([self.gamma, tail])

    @classmethod
    def from_free(cls, x, names=()) -> "Theta":
        x = np.asarray(x, dtype=float)
        k = len(x) - len(FREE_TAIL)
        mb, lsb, ma, lsa, lse, lmu = x[k:]
        return cls(x[:k], mb, float(np.exp(lsb)), ma, float(np.exp(lsa)),
                   float(np.exp(lse)), float(np.exp(lmu)), tuple(names))

    def to_report(self) -> np.ndarray:
        """Parameters on the reported scale (sds and scale, not their logs)."""
        return np.concatenate([self.gamma, [self.mu_beta, self.sigma_beta, self.mu_alpha,
                                            self.sigma_alpha, self.sigma_eta, self.scale_mu]])

    @classmethod
    def from_report(cls, x, names=()) -> "Theta":
        x = np.asarray(x, dtype=float)
        k = len(x) - len(REPORT_TAIL)
        return cls(x[:k], *map(float, x[k:]), names=tuple(names))

    def replace(self, **changes) -> "Theta":
        d = dict(gamma=self.gamma, mu_beta=self.mu_beta, sigma_beta=self.sigma_beta,
                 mu_alpha=self.mu_alpha, sigma_alpha=self.sigma_alpha,
                 sigma_eta=self.sigma_eta, scale_mu=self.scale_mu, names=self.names)
        d.update(changes)
        return Theta(**d)

    def mean_beta(self) -> float:
        return float(np.exp(self.mu_beta + 0.5 * self.sigma_beta**2))

    def mean_alpha(self) -> float:
        return float(-np.exp(self.mu_alpha + 0.5 * self.sigma_alpha**2))

    def to_dict(self) -> dict:
        return {
            "gamma": dict(zip(self.report_names()[: len(self.gamma)], map(float, self.gamma))),
            "mu_beta": self.mu_beta, "sigma_beta": self.sigma_beta,
            "mu_alpha": self.mu_alpha, "sigma_alpha": self.sigma_alpha,
            "sigma_eta": self.sigma_eta, "scale_mu": self.scale_mu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        names = tuple(d["gamma"])
        return cls(np.array([d["gamma"][n] for n in names]), d["mu_beta"], d["sigma_beta"],
                   d["mu_alpha"], d["sigma_alpha"], d["sigma_eta"], d["scale_mu"], names)


def materialize_coefficients(theta: Theta, z_beta, z_alpha):
    """Lognormal beta and negative-lognormal alpha from standard-normal draws."""
    beta = np.exp(theta.mu_beta + theta.sigma_beta * np.asarray(z_beta))
    alpha = -np.exp(theta.mu_alpha + theta.sigma_alpha * np.asarray(z_alpha))
    return beta, alpha


def _check_finite(*arrays):
    for a in arrays:
        if np.any(np.isnan(a)):
            raise ValueError("NaN input to utility evaluation")


def systematic_utility(y_minus_r, gx, p, beta, alpha, eta, *, return_clamped=False):
    """Indirect utility (all inputs broadcast).

    The exponent of the income term is capped at ``EXP_CLAMP``; with
    ``return_clamped=True`` a boolean mask of capped entries is also returned.
    """
    _check_finite(y_minus_r, gx, p, beta, alpha, eta)
    beta = np.asarray(beta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(beta <= 0) or np.any(alpha >= 0):
        raise ValueError("utility needs beta > 0 and alpha < 0")
    expo = -beta * y_minus_r - gx - eta
    clamped = expo > EXP_CLAMP
    with np.errstate(over="ignore"):
        u = -np.exp(np.minimum(expo, EXP_CLAMP)) / beta - np.exp(alpha * p) / alpha
    if return_clamped:
        return u, clamped
    return u


def log_vkt(y_minus_r, gx, p, beta, alpha, eta=0.0):
    """Log annual driving implied by Roy's identity."""
    return beta * y_minus_r + gx + alpha * p + eta


def expected_vkt(log_vkt_mean, sigma_eta):
    """Mean of a lognormal VKT whose log has the given mean and sd ``sigma_eta``."""
    return np.exp(log_vkt_mean + 0.5 * sigma_eta**2)


def choice_probabilities(u, scale_mu: float, axis: int = -1):
    """Logit probabilities of ``u / scale_mu`` along ``axis`` (log-sum-exp form)."""
    v = np.asarray(u, dtype=float) / scale_mu
    return np.exp(v - logsumexp(v, axis=axis, keepdims=True))


def log_choice_probabilities(u, scale_mu: float, axis: int = -1):
    v = np.asarray(u, dtype=float) / scale_mu
    return v - logsumexp(v, axis=axis, keepdims=True)


def household_arrays(theta: Theta, ds, draws, rows=None):
    """Per-draw quantities for a block of households.

    Returns ``(beta, alpha, y_minus_r, gx)`` with shapes (n, R), (n, R),
    (n, J), (n, J). ``ds`` is a PreparedDataset, ``draws`` a DrawSet covering
    the same households.
    """
    rows = slice(None) if rows is None else rows
    beta, alpha = materialize_coefficients(theta, draws.beta[rows], draws.alpha[rows])
    y_minus_r = ds.income[rows, None] - ds.rent[None, :]
    gx = np.zeros((len(ds.income[rows]), ds.n_alternatives))
    H = ds.H[rows]
    for k in range(ds.n_terms):
        gx += np.multiply.outer(H[:, k] * theta.gamma[k], ds.V[:, k])
    return beta, alpha, y_minus_r, gx


def simulate_choice_and_vkt(theta: Theta, ds, draws, rows=None):
    """Simulated choice probabilities and expected VKT per (household, draw, car).

    Driving taste enters utility through the eta draw ``sigma_eta * z``;
    expected VKT integrates eta analytically given (beta, alpha).
    Returns ``(P, EKM)`` each shaped (n, R, J), VKT in the model's km units.
    """
    beta, alpha, ymr, gx = household_arrays(theta, ds, draws, rows)
    rows = slice(None) if rows is None else rows
    eta = theta.sigma_eta * draws.eta[rows]
    b, a = beta[:, :, None], alpha[:, :, None]
    u = systematic_utility(ymr[:, None, :], gx[:, None, :], ds.opcost[None, None, :],
                           b, a, eta[:, :, None])
    P = choice_probabilities(u, theta.scale_mu)
    m = log_vkt(ymr[:, None, :], gx[:, None, :], ds.opcost[None, None, :], b, a)
    return P, expected_vkt(m, theta.sigma_eta)
