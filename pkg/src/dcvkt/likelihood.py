"""Weighted simulated full-information loglikelihood and its analytic gradient.

For each draw r of (beta, alpha) the driving taste is fixed at the residual
implied by the observed km of the chosen car::

    eta_r = ln KM_obs - beta_r (y - r_j*) - gX_ij* - alpha_r p_j*

The same eta_r enters every alternative's utility, so the household
likelihood is ``mean_r P_j*r(eta_r) * phi(eta_r; 0, sigma_eta)``.

Gradients are taken with respect to the free vector of
:meth:`Theta.to_free`.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .choice import EXP_CLAMP, FREE_TAIL, Theta

LIK_FLOOR = 1e-300
LOG_FLOOR = math.log(LIK_FLOOR)
BLOCK = 64
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class LikelihoodReport:
    value: float
    gradient: np.ndarray | None
    contributions: np.ndarray          # unweighted ln L_i
    scores: np.ndarray | None          # unweighted d ln L_i / d free, shape (N, P)
    clamp_count: int
    floored: int
    household_ids: list | None = None


def _block(x: np.ndarray, ds, z1: np.ndarray, z2: np.ndarray, rows: slice,
           want_grad: bool):
    K = ds.n_terms
    gamma = x[:K]
    mb, lsb, ma, lsa, lse, lmu = x[K:]
    sb, sa, se, mu = np.exp(lsb), np.exp(lsa), np.exp(lse), np.exp(lmu)

    H = ds.H[rows]
    V = ds.V
    ch = ds.chosen[rows]
    lnkm = ds.log_km[rows]
    n = len(ch)
    R = z1.shape[1]
    ar = np.arange(n)

    beta = np.exp(mb + sb * z1)                       # (n, R)
    alpha = -np.exp(ma + sa * z2)                     # (n, R)
    gx = np.zeros((n, ds.n_alternatives))
    for k in range(K):
        gx += np.multiply.outer(H[:, k] * gamma[k], V[:, k])
    dy = ds.income[rows, None] - ds.rent[None, :]     # (n, J)
    p = ds.opcost
    dy_ch = dy[ar, ch]
    gx_ch = gx[ar, ch]
    p_ch = p[ch]

    eta = lnkm[:, None] - beta * dy_ch[:, None] - gx_ch[:, None] - alpha * p_ch[:, None]
    # income-term exponent: -(beta dy + gx) - eta; for the chosen car it is alpha p* - ln KM
    expo = (beta[:, :, None] * (dy_ch[:, None] - dy)[:, None, :]
            + (gx_ch[:, None] - gx)[:, None, :]
            + (alpha * p_ch[:, None] - lnkm[:, None])[:, :, None])
    clamped = expo > EXP_CLAMP
    E = np.exp(np.minimum(expo, EXP_CLAMP))
    S = np.exp(alpha[:, :, None] * p[None, None, :])
    with np.errstate(over="ignore"):
        u = -E / beta[:, :, None] - S / alpha[:, :, None]
    v = u / mu
    lse_v = logsumexp(v, axis=2)
    logP_ch = v[ar, :, ch] - lse_v                    # (n, R)
    logphi = -_HALF_LOG_2PI - lse - 0.5 * (eta / se) ** 2
    ell = logP_ch + logphi
    logL = logsumexp(ell, axis=1) - math.log(R)
    floored = logL < LOG_FLOOR
    logL = np.where(floored, LOG_FLOOR, logL)
    n_clamped = int(clamped.sum())
    if not want_grad:
        return logL, None, n_clamped, int(floored.sum())

    q = np.exp(ell - logsumexp(ell, axis=1, keepdims=True))   # posterior draw weights
    P = np.exp(v - lse_v[:, :, None])
    Ec = np.where(clamped, 0.0, E)
    A = P * Ec / beta[:, :, None]                     # (n, R, J)
    sumA = A.sum(axis=2)
    S_ch = S[ar, :, ch]
    E_ch = E[ar, :, ch]
    ratio = eta / se**2

    # beta: d ln P*/d beta + d ln phi/d beta, per draw
    g_beta = ((E_ch / beta**2 - sumA / beta + dy_ch[:, None] * sumA
               - (A * dy[:, None, :]).sum(axis=2)) / mu
              + ratio * dy_ch[:, None])
    # alpha
    inv_a = 1.0 / alpha
    dS = S * ((inv_a**2)[:, :, None] - p[None, None, :] * inv_a[:, :, None])
    g_alpha = ((-(E_ch / beta) * p_ch[:, None] + S_ch * (inv_a**2 - p_ch[:, None] * inv_a)
                + p_ch[:, None] * sumA - (P * dS).sum(axis=2)) / mu
               + ratio * p_ch[:, None])

    score = np.empty((n, K + len(FREE_TAIL)))
    Aq = (q[:, :, None] * A).sum(axis=1)
    sAq = Aq.sum(axis=1)
    qeta = (q * ratio).sum(axis=1)
    for k in range(K):
        xch = H[:, k] * V[ch, k]
        score[:, k] = (xch * sAq - H[:, k] * (Aq * V[None, :, k]).sum(axis=1)) / mu + qeta * xch
    score[:, K] = (q * g_beta * beta).sum(axis=1)
    score[:, K + 1] = (q * g_beta * beta * sb * z1).sum(axis=1)
    score[:, K + 2] = (q * g_alpha * alpha).sum(axis=1)
    score[:, K + 3] = (q * g_alpha * alpha * sa * z2).sum(axis=1)
    score[:, K + 4] = (q * (-1.0 + (eta / se) ** 2)).sum(axis=1)
    v_ch = v[ar, :, ch]
    Pv = np.where(P > 0, P * v, 0.0)
    score[:, K + 5] = -(q * (v_ch - Pv.sum(axis=2))).sum(axis=1)
    return logL, score, n_clamped, int(floored.sum())


def household_terms(theta_or_free, ds, draws, want_grad: bool = True, threads: int = 1):
    """Per-household ln L_i and scores, computed block by block.

    Results do not depend on ``threads``: blocks are fixed-size and every
    household's numbers are computed independently of its neighbours.
    """
    x = theta_or_free.to_free() if isinstance(theta_or_free, Theta) else np.asarray(
        theta_or_free, dtype=float)
    if not np.exp(x[-2]) > 0:
        raise ValueError("sigma_eta must be > 0")
    N = ds.n_households
    if draws.n_households != N:
        raise ValueError(f"draws cover {draws.n_households} households, data has {N}")
    z1, z2 = draws.beta, draws.alpha
    blocks = [slice(s, min(s + BLOCK, N)) for s in range(0, N, BLOCK)]

    def run(sl):
        return _block(x, ds, z1[sl], z2[sl], sl, want_grad)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(sl) for sl in blocks]
    logL = np.concatenate([p[0] for p in parts])
    scores = np.concatenate([p[1] for p in parts]) if want_grad else None
    clamp = sum(p[2] for p in parts)
    floored = sum(p[3] for p in parts)
    return logL, scores, clamp, floored


def _exact_sum(values: np.ndarray) -> float:
    # correctly rounded, hence independent of household order
    return math.fsum(values.tolist())


def wll(theta_or_free, ds, draws, want_grad: bool = True, threads: int = 1) -> LikelihoodReport:
    """Weighted simulated loglikelihood ``sum_i w_i ln L_i`` and its gradient."""
    try:
        logL, scores, clamp, floored = household_terms(theta_or_free, ds, draws,
                                                       want_grad, threads)
    except FloatingPointError as exc:  # pragma: no cover
        raise ValueError(f"likelihood evaluation failed: {exc}") from exc
    w = ds.weight
    value = _exact_sum(w * logL)
    grad = None
    if want_grad:
        ws = w[:, None] * scores
        grad = np.array([_exact_sum(ws[:, k]) for k in range(ws.shape[1])])
    return LikelihoodReport(value, grad, logL, scores, clamp, floored,
                            list(ds.households["household_id"]))


def joint_likelihood_household(i: int, theta: Theta, ds, draws) -> float:
    """Simulated joint likelihood (not log) of household ``i``."""
    sub = ds.subset([i])
    logL, _, _, _ = household_terms(theta, sub, draws.subset([i]), want_grad=False)
    return float(np.exp(logL[0]))
