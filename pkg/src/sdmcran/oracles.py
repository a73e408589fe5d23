"""Reference filters used to cross-check the particle filter.

Both work on a single channel with a scalar AR(1) phase
theta_m = rho theta_{m-1} + w_m, stationary variance ``phase_var``:

* :func:`grid_loglik` evaluates the exact predictive likelihoods of
  y_m = exp(j theta_m) x_m + z_m on a dense phase grid;
* :func:`kalman_loglik` is exact for the linearised observation
  y_m = (1 + j theta_m) x_m + z_m.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm


def grid_loglik(y, x, rho: float, phase_var: float, noise_var: float, n_grid: int = 2048,
                width: float = 8.0) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    sd = np.sqrt(phase_var)
    theta = np.linspace(-width * sd, width * sd, n_grid)
    innov_sd = sd * np.sqrt(1 - rho * rho)
    # row i -> column j transition probabilities, normalised per row
    logT = norm.logpdf(theta[None, :], loc=rho * theta[:, None], scale=innov_sd)
    logT -= logsumexp(logT, axis=1, keepdims=True)
    T = np.exp(logT)
    prior = norm.logpdf(theta, scale=sd)
    logpred = prior - logsumexp(prior)
    out = np.empty(len(y))
    base = -np.log(np.pi * noise_var)
    rot = np.exp(1j * theta)
    for m in range(len(y)):
        d = y[m] - x[m] * rot
        loglik = base - (d.real**2 + d.imag**2) / noise_var
        joint = logpred + loglik
        out[m] = logsumexp(joint)
        post = joint - out[m]
        shift = post.max()
        pred = np.exp(post - shift) @ T
        logpred = np.log(np.maximum(pred, 1e-300)) + shift
    return out


def kalman_loglik(y, x, rho: float, phase_var: float, noise_var: float) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    q = phase_var * (1 - rho * rho)
    mean, var = 0.0, phase_var
    r = noise_var / 2
    out = np.empty(len(y))
    for m in range(len(y)):
        if m:
            mean, var = rho * mean, rho * rho * var + q
        h = np.array([-x[m].imag, x[m].real])
        v = np.array([(y[m] - x[m]).real, (y[m] - x[m]).imag])
        innov = v - h * mean
        Sm = var * np.outer(h, h) + r * np.eye(2)
        Si = np.linalg.inv(Sm)
        out[m] = -np.log(2 * np.pi) - 0.5 * np.log(np.linalg.det(Sm)) - 0.5 * innov @ Si @ innov
        gain = var * h @ Si
        mean = mean + gain @ innov
        var = var - gain @ h * var
    return out


def linear_model_kalman_loglik(y, x, model) -> np.ndarray:
    """Exact predictive log-likelihoods for y_m = (I + j J_m) x_m + z_m.

    ``model`` is a particle-filter hidden model (any group size); every real
    hidden process is an AR(mu) recursion, stacked here in companion form.
    ``y`` and ``x`` have shape (G, M).
    """
    from .particle import _basis, _process_tables

    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    G, M = y.shape
    specs, coeff, sd = _process_tables(model)
    P = len(specs)
    mu = max(model.phi.mu, 1)
    coeff = coeff if coeff.shape[1] else np.zeros((P, 1))
    n = P * mu
    F = np.zeros((n, n))
    Qn = np.zeros((n, n))
    for p in range(P):
        o = p * mu
        F[o, o:o + mu] = coeff[p]
        F[o + np.arange(1, mu), o + np.arange(mu - 1)] = 1.0
        Qn[o, o] = sd[p] ** 2
    P0 = np.zeros((n, n))
    for p, spec in enumerate(specs):
        o = p * mu
        if spec.mu:
            P0[o:o + mu, o:o + mu] = spec.stationary_cov()
        else:
            P0[o, o] = spec.component_innovation_var
    basis = _basis(model)
    pick = np.arange(P) * mu
    r = model.noise_var / 2
    mean, cov = np.zeros(n), P0
    first = True
    out = np.empty(M)
    for m in range(M):
        if first and model.phi.mu:
            # the stored window holds lags 1..mu; step it forward once
            mean, cov = F @ mean, F @ cov @ F.T + Qn
        elif not first:
            mean, cov = F @ mean, F @ cov @ F.T + Qn
        first = False
        Hc = 1j * np.einsum("pij,j->ip", basis, x[:, m])
        H = np.zeros((2 * G, n))
        H[:, pick] = np.concatenate([Hc.real, Hc.imag], axis=0)
        v = y[:, m] - x[:, m]
        innov = np.concatenate([v.real, v.imag]) - H @ mean
        Sm = H @ cov @ H.T + r * np.eye(2 * G)
        Lc = np.linalg.cholesky(Sm)
        a = np.linalg.solve(Lc, innov)
        out[m] = -G * np.log(2 * np.pi) - np.sum(np.log(np.diag(Lc))) - 0.5 * a @ a
        K = np.linalg.solve(Sm, H @ cov).T
        mean = mean + K @ innov
        cov = cov - K @ H @ cov
        cov = (cov + cov.T) / 2
    return out
