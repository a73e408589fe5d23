"""Fitting CRAN parameters from training pairs.

The noise variance comes from the norm statistic ||y|| given ||x||, which is
blind to any unitary rotation; the mean phase from the input/output
correlation angle; the two scales and the whitening tap from a coordinate
search that minimises the particle-filter estimate of h_q(Y|X).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ive

from .core import RandomStream
from .cran import CranParams, whiten
from .errors import EstimationError, EstimationWarning
from .particle import ReceiverAlgo, conditional_entropy

COARSE_DECADES = (-1.0, -0.5, 0.0, 0.5, 1.0)
FINE_DECADES = (-0.2, -0.1, 0.0, 0.1, 0.2)
COARSE_TAPS = (-0.3, -0.15, 0.0, 0.15, 0.3)
FINE_TAP_STEPS = (-0.05, -0.025, 0.0, 0.025, 0.05)


@dataclass
class TrainingSet:
    """Training pairs (x, y), each of shape (2S, M), plus the ACF geometry."""

    pairs: list
    S: int
    mu: int
    base_r: np.ndarray
    base_s: np.ndarray

    def __post_init__(self):
        self.base_r = np.asarray(self.base_r, dtype=float)
        self.base_s = np.asarray(self.base_s, dtype=float)
        if not self.pairs:
            raise EstimationError("empty training set")
        shapes = {np.shape(p[0]) for p in self.pairs} | {np.shape(p[1]) for p in self.pairs}
        if len(shapes) != 1:
            raise EstimationError(f"training sequences differ in shape: {sorted(shapes)}")
        if next(iter(shapes))[0] != 2 * self.S:
            raise EstimationError("sequence rows must equal 2S")
        if len(self.base_r) != self.mu + 1 or len(self.base_s) != self.mu + 1:
            raise EstimationError("base_r/base_s must cover lags 0..mu")

    @property
    def n_symbols(self) -> int:
        return int(np.shape(self.pairs[0][0])[1])

    def stacked(self):
        return (np.stack([np.asarray(p[0], dtype=complex) for p in self.pairs]),
                np.stack([np.asarray(p[1], dtype=complex) for p in self.pairs]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for x, y in self.pairs:
            h.update(np.ascontiguousarray(x, dtype=complex).tobytes())
            h.update(np.ascontiguousarray(y, dtype=complex).tobytes())
        return h.hexdigest()[:16]


def _norm_loglik(log_s2, nx2, ny2, dof_half):
    """Mean log-likelihood of ||y||^2 given ||x||^2 for y ~ CN(Ux, s2 I), up to constants."""
    s2 = np.exp(log_s2)
    arg = 2 * np.sqrt(nx2 * ny2) / s2
    with np.errstate(divide="ignore"):
        logI = np.log(ive(dof_half - 1, arg)) + arg
    return float(np.mean(-(nx2 + ny2) / s2 - np.log(s2) + logI))


def norm_ml_variance(x: np.ndarray, y: np.ndarray, n_grid: int = 61, lower_ratio: float = 1e-8) -> float:
    """ML noise variance per complex dimension from the vector norms.

    ``x`` and ``y`` have shape (..., D, M): columns are D-dimensional
    vectors.  2||y||^2/s2 is noncentral chi-squared with 2D degrees of
    freedom and noncentrality 2||x||^2/s2 for any unitary rotation of x.
    """
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    D = x.shape[-2]
    nx2 = np.sum(np.abs(x) ** 2, axis=-2).ravel()
    ny2 = np.sum(np.abs(y) ** 2, axis=-2).ravel()
    keep = nx2 > 0
    if not np.any(keep):
        raise EstimationError("all input vectors are zero")
    nx2, ny2 = nx2[keep], ny2[keep]
    hi = max(float(np.mean(ny2)), float(np.mean(nx2)), 1e-300) / D * 4
    lo = hi * lower_ratio
    grid = np.linspace(np.log(lo), np.log(hi), n_grid)
    vals = np.array([_norm_loglik(g, nx2, ny2, D) for g in grid])
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    if i == 0:
        warnings.warn("noise-variance estimate driven to the lower search bound (noise-free data?)",
                      EstimationWarning)
        return float(lo)
    if i == n_grid - 1:
        raise EstimationError(f"noise-variance likelihood increasing up to the upper bound {hi:.3g}")
    d = np.diff(vals)
    sign_changes = int(np.sum((d[:-1] > 0) & (d[1:] < 0)))
    if sign_changes > 1:
        raise EstimationError(f"noise-variance likelihood not unimodal on the search grid "
                              f"({sign_changes} local maxima)")
    res = minimize_scalar(lambda g: -_norm_loglik(g, nx2, ny2, D), bounds=(grid[i - 1], grid[i + 1]),
                          method="bounded", options={"xatol": 1e-7})
    return float(np.exp(res.x))


def _grouped(a: np.ndarray, group: int) -> np.ndarray:
    n, C, M = a.shape
    if C % group:
        raise EstimationError(f"group size {group} does not divide {C} channels")
    return a.reshape(n * (C // group), group, M)


def estimate_sigma_z(train: TrainingSet, group: Optional[int] = None) -> float:
    """Noise variance per complex dimension from the norms of ``group``-channel vectors.

    With the default group of all 2S channels the statistic is blind to the
    rotation.  A receiver that processes smaller groups separately sees the
    crosstalk that leaks across group boundaries as noise, and its own model
    variance is estimated with its own grouping.
    """
    xs, ys = train.stacked()
    g = 2 * train.S if group is None else group
    return norm_ml_variance(_grouped(xs, g), _grouped(ys, g))


def estimate_mean_phase(train: TrainingSet, threshold: float = 0.1) -> np.ndarray:
    """Angle of sum_m y_i[m] x_i[m]^* for each channel i."""
    xs, ys = train.stacked()
    corr = np.sum(ys * xs.conj(), axis=(0, 2))
    scale = np.sqrt(np.sum(np.abs(ys) ** 2, axis=(0, 2)) * np.sum(np.abs(xs) ** 2, axis=(0, 2)))
    if np.any(scale == 0):
        raise EstimationError("zero symbols in training data")
    rho = np.abs(corr) / scale
    if np.any(rho < threshold):
        warnings.warn(f"weak input/output correlation {rho.min():.3f}; mean-phase estimate unreliable",
                      EstimationWarning)
    return np.angle(corr)


def filtered_noise_var(train: TrainingSet, mean_diag, tap: float, group: Optional[int] = None) -> float:
    """Noise variance seen by the filter after mean-phase removal and whitening."""
    xs, ys = train.stacked()
    ys = ys * np.exp(-1j * np.asarray(mean_diag))[None, :, None]
    xt, yt = whiten(xs, tap)[..., 1:-1], whiten(ys, tap)[..., 1:-1]
    g = 2 * train.S if group is None else group
    return norm_ml_variance(_grouped(xt, g), _grouped(yt, g))


@dataclass
class FitResult:
    params: CranParams
    h_q: float
    surface: list
    certificate: dict
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "h_q_bits": self.h_q, "surface": self.surface,
                "certificate": self.certificate, "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _evaluate(args):
    train_pairs, params, kind, n_particles, seed, path = args
    est = conditional_entropy(train_pairs, params, ReceiverAlgo(kind), n_particles, RandomStream(seed, path))
    return est.bits, est.stderr


class _Surface:
    """Memoised h_q evaluations with common random numbers."""

    def __init__(self, train, base, algo, n_particles, stream, workers):
        self.train, self.base, self.algo = train, base, algo
        self.n_particles, self.stream, self.workers = n_particles, stream, workers
        self.values = {}
        self.noise = {}

    def params_at(self, point):
        sphi, sj, tap = point
        if tap not in self.noise:
            self.noise[tap] = (self.base.sigma_z2 if tap == 0 else
                               filtered_noise_var(self.train, self.base.mean_diag, tap,
                                                  self.algo.grouping(self.train.S)))
        return self.base.replace(sigma_phi2=sphi, sigma_j2=sj, whitening_tap=tap,
                                 filter_noise_var=self.noise[tap])

    def evaluate(self, points):
        todo = [p for p in dict.fromkeys(points) if p not in self.values]
        jobs = [(self.train.pairs, self.params_at(p), self.algo.kind, self.n_particles,
                 self.stream.seed, self.stream.path) for p in todo]
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(self.workers) as ex:
                results = list(ex.map(_evaluate, jobs))
        else:
            results = [_evaluate(j) for j in jobs]
        for p, r in zip(todo, results):
            self.values[p] = r
        return [self.values[p][0] for p in points]

    def best(self):
        return min(self.values, key=lambda p: self.values[p][0])


def _key(v: float) -> float:
    return float(f"{v:.6g}")


def _search_axis(surface, current, axis, candidates, boundary=None, label=""):
    pts = []
    for c in candidates:
        p = list(current)
        p[axis] = _key(c)
        pts.append(tuple(p))
    vals = surface.evaluate(pts)
    i = int(np.argmin(vals))
    if boundary is not None and pts[i][axis] in boundary:
        warnings.warn(f"{label} search hit the grid boundary at {pts[i][axis]:g}; widen the grid",
                      EstimationWarning)
    return pts[i]


def fit_scales(train: TrainingSet, algo: ReceiverAlgo, sigma_z2: Optional[float] = None,
               mean_diag=None, n_particles: int = 256, stream: Optional[RandomStream] = None,
               center: tuple = (1.0, 1.0), taps: Sequence[float] = COARSE_TAPS, workers: int = 1,
               fit_tap: bool = True, fit_scale_axes: bool = True) -> FitResult:
    """Coordinate search over (sigma_phi2, sigma_j2, whitening tap) minimising h_q(Y|X).

    Two refinement levels per axis: a coarse decade grid around ``center``
    (plus zero), then a fine grid around the coarse optimum.  All points share
    one random stream so that differences are not swamped by Monte-Carlo noise.
    """
    stream = stream or RandomStream(0, ("fit", algo.kind))
    if sigma_z2 is None:
        sigma_z2 = estimate_sigma_z(train, algo.grouping(train.S))
    if mean_diag is None:
        mean_diag = estimate_mean_phase(train)
    base = CranParams(S=train.S, mu=train.mu, mean_diag=mean_diag, sigma_phi2=center[0], sigma_j2=center[1],
                      base_r=train.base_r, base_s=train.base_s, noise_acf=[sigma_z2], algo=algo.kind)
    surf = _Surface(train, base, algo, n_particles, stream.child("hq"), workers)
    axes = ([0] + ([1] if algo.has_rotation else [])) if fit_scale_axes else []
    current = (_key(center[0]), _key(center[1]) if algo.has_rotation else 0.0, 0.0)
    surf.evaluate([current])
    for ax in axes:
        grid = [0.0] + [center[ax] * 10**d for d in COARSE_DECADES]
        current = _search_axis(surf, current, ax, grid, {_key(grid[-1])}, "sigma_phi2" if ax == 0 else "sigma_j2")
    if fit_tap:
        current = _search_axis(surf, current, 2, taps, {_key(min(taps)), _key(max(taps))} - {0.0}, "whitening")
    for ax in axes:
        v = current[ax]
        grid = [v * 10**d for d in FINE_DECADES] if v > 0 else [0.0] + [center[ax] * 10**d for d in (-2.0, -1.5)]
        current = _search_axis(surf, current, ax, grid)
    if fit_tap:
        lim = 0.4
        grid = [t for t in (current[2] + s for s in FINE_TAP_STEPS) if abs(t) < lim]
        current = _search_axis(surf, current, 2, grid)
    best = surf.best()
    params = surf.params_at(best)
    h, se = surf.values[best]
    surface = [{"sigma_phi2": p[0], "sigma_j2": p[1], "whitening_tap": p[2], "h_q_bits": v[0], "stderr": v[1]}
               for p, v in surf.values.items()]
    cert = {"n_points": len(surf.values), "min_h_q_bits": h,
            "max_h_q_bits": max(v[0] for v in surf.values.values()),
            "is_minimum": all(h <= v[0] for v in surf.values.values())}
    prov = {"data_hash": train.digest(), "seed": stream.seed, "stream": stream.stream_id,
            "n_particles": n_particles, "algo": algo.kind, "sigma_z2": float(sigma_z2)}
    return FitResult(params, float(h), surface, cert, prov)


def fit_all(train: TrainingSet, algos: Sequence[ReceiverAlgo], n_particles: int = 256,
            stream: Optional[RandomStream] = None, workers: int = 1, **kw) -> dict:
    """Shared mean phase, then a noise variance and scale fit per receiver family."""
    stream = stream or RandomStream(0, ("fit",))
    mean = estimate_mean_phase(train)
    return {a.kind: fit_scales(train, a, estimate_sigma_z(train, a.grouping(train.S)), mean, n_particles,
                               stream.child(a.kind), workers=workers, **kw)
            for a in algos}
