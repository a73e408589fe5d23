"""Regular-perturbation coefficient calculus for strongly coupled SDM links.

Coefficients follow the first-order NLI expansion: for interferer channel c,

    X[c; 0, k, k'] = gamma*kappa * int_0^L dz int dt |s(z,t)|^2
                     s(z, t - kT - d_c(z)) s*(z, t - k'T - d_c(z))

with walk-off shift d_c(z) = tau_c - beta2 * Omega_c * z and s(z, t) the
dispersed unit-energy sinc pulse.  All times in ps, lengths in km.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import fresnel

from .core import RandomStream, cscg
from .errors import AccuracyError
from .fiber import CouplingSpec
from .wdm import WdmSpec

Shift = Union[float, Callable[[float], float]]


def dispersed_sinc(t, z_km: float, beta2: float, T: float) -> np.ndarray:
    """Unit-energy sinc pulse after dispersion D_z, evaluated in closed form.

    s(z, t) = sqrt(T) int_{-B/2}^{B/2} exp(j(2 pi^2 beta2 z f^2 + 2 pi f t)) df,
    written with Fresnel integrals after completing the square.
    """
    t = np.asarray(t, dtype=float)
    B = 1.0 / T
    a = 2 * np.pi**2 * beta2 * z_km
    if abs(a) < 1e-9 * T**2:
        return np.sinc(t / T) / np.sqrt(T)
    c = np.pi * t / a
    scale = np.sqrt(2 * abs(a) / np.pi)
    S2, C2 = fresnel((B / 2 + c) * scale)
    S1, C1 = fresnel((-B / 2 + c) * scale)
    integral = np.sqrt(np.pi / (2 * abs(a))) * ((C2 - C1) + 1j * np.sign(a) * (S2 - S1))
    return np.sqrt(T) * np.exp(-1j * np.pi**2 * t**2 / a) * integral


def pulse_spread_ps(beta2: float, T: float, z_km: float) -> float:
    """Half-width of the dispersed pulse: group-delay spread across the band."""
    return np.pi * abs(beta2) * z_km / T


def _as_fn(shift: Shift) -> Callable[[float], float]:
    return shift if callable(shift) else (lambda z, v=float(shift): v)


def _a_midpoint(spec, T, s, sp, n, k, kp, t1, t2, t3, n_z, os_, margin):
    f1, f2, f3 = _as_fn(t1), _as_fn(t2), _as_fn(t3)
    b_s, b_sp = spec.beta2[s], spec.beta2[sp]
    h = spec.length_km / n_z
    dt = T / os_
    total = 0.0j
    for i in range(n_z):
        z = (i + 0.5) * h
        centres = [0.0, n * T + f1(z), k * T + f2(z), kp * T + f3(z)]
        spread = max(pulse_spread_ps(b_s, T, z), pulse_spread_ps(b_sp, T, z))
        lo = min(centres) - spread - margin * T
        hi = max(centres) + spread + margin * T
        t = np.arange(math.floor(lo / dt), math.ceil(hi / dt) + 1) * dt
        val = (np.conj(dispersed_sinc(t, z, b_s, T))
               * dispersed_sinc(t - centres[1], z, b_s, T)
               * dispersed_sinc(t - centres[2], z, b_sp, T)
               * np.conj(dispersed_sinc(t - centres[3], z, b_sp, T)))
        total += spec.gains(z)[sp] * val.sum() * dt
    return spec.gamma * spec.f[s, sp] * total * h


def compute_A(spec: CouplingSpec, wdm: WdmSpec, s: int, sp: int, n: int, k: int, kp: int,
              t1: Shift = 0.0, t2: Shift = 0.0, t3: Shift = 0.0, *, tol: float = 1e-4,
              n_z: int = 64, oversampling: int = 8, margin: float = 24.0, max_refine: int = 6) -> complex:
    """Generic NLI kernel A^{[s,s']}_{n,k,k'}(t1, t2, t3) by double quadrature.

    Shifts may be constants or callables of z (km), which is how walk-off
    enters the C and D coefficients.  The z-grid (midpoint rule) and the time
    window are refined together until successive results agree to ``tol``
    (relative); otherwise :class:`AccuracyError` is raised.  Modes are zero
    based.
    """
    if spec.gamma == 0:
        return 0.0j
    T = wdm.symbol_period_ps
    prev = _a_midpoint(spec, T, s, sp, n, k, kp, t1, t2, t3, n_z, oversampling, margin)
    scale = abs(spec.gamma * spec.f[s, sp]) * spec.length_km / T
    for _ in range(max_refine):
        n_z *= 2
        margin *= 1.5
        cur = _a_midpoint(spec, T, s, sp, n, k, kp, t1, t2, t3, n_z, oversampling, margin)
        if abs(cur - prev) <= tol * max(abs(cur), 1e-9 * scale):
            return complex(cur)
        prev = cur
    raise AccuracyError(f"A[{n},{k},{kp}] did not converge to {tol:g} after {max_refine} refinements")


def walkoff_symbols(spec: CouplingSpec, wdm: WdmSpec, c: int) -> float:
    omega = 2 * np.pi * (wdm.carrier_thz(c) - wdm.carrier_thz(0))
    return abs(spec.beta2_mean * omega) * spec.length_km / wdm.symbol_period_ps


def truncation_bound(spec: CouplingSpec, wdm: WdmSpec, extra: int = 8) -> int:
    """Largest |k| retained: walk-off of the farthest interferer plus a margin."""
    return int(math.ceil(max(walkoff_symbols(spec, wdm, c) for c in wdm.interferers))) + extra


@dataclass
class NliCoefficients:
    """X[c; 0, k, k'] matrices for each interferer channel, k and k' in [-K, K].

    ``X[c][k + K, k' + K]`` stores X_{c;0,k,k'}.
    """

    X: dict
    K: int
    T: float
    quadrature: dict = field(default_factory=dict)
    spec_hash: str = ""

    def coefficient(self, c, k, kp) -> complex:
        return complex(self.X[c][k + self.K, kp + self.K])

    @property
    def channels(self):
        return tuple(sorted(self.X))


def _x_matrix(spec, wdm, c, K, n_z, os_, margin, diagonal_only=False):
    T = wdm.symbol_period_ps
    beta2 = spec.beta2_mean
    omega_c = 2 * np.pi * (wdm.carrier_thz(c) - wdm.carrier_thz(0))
    tau = wdm.delay(c)
    h = spec.length_km / n_z
    dt = T / os_
    ks = np.arange(-K, K + 1)
    X = np.zeros((2 * K + 1,) * 2 if not diagonal_only else (2 * K + 1,), dtype=complex)
    spread = pulse_spread_ps(beta2, T, spec.length_km)
    half = int(math.ceil((spread + margin * T) / dt))
    t = np.arange(-half, half + 1) * dt
    for i in range(n_z):
        z = (i + 0.5) * h
        d = tau - beta2 * omega_c * z
        p = np.abs(dispersed_sinc(t, z, beta2, T)) ** 2
        # one evaluation on an extended grid serves every shift k*T + d
        j0 = -half - os_ * K
        ext = np.arange(j0, half + os_ * K + 1) * dt - d
        s_ext = dispersed_sinc(ext, z, beta2, T)
        idx = (np.arange(2 * half + 1)[:, None] - os_ * ks[None, :]) + os_ * K
        G = s_ext[idx]
        w = spec.gains(z)[0]
        if diagonal_only:
            X += w * (p[:, None] * np.abs(G) ** 2).sum(axis=0)
        else:
            X += w * ((G * p[:, None]).T @ G.conj())
    return spec.gamma * spec.kappa * X * h * dt


def compute_X(spec: CouplingSpec, wdm: WdmSpec, K: Optional[int] = None, *, n_z: Optional[int] = None,
              oversampling: int = 8, margin: float = 16.0, tol: float = 1e-4,
              diagonal_only: bool = False, max_refine: int = 4) -> NliCoefficients:
    """Strong-coupling coefficients X[c; 0, k, k'] for every interferer.

    The z-grid starts at roughly four points per collision length and is
    doubled until the Richardson error estimate falls below ``tol`` relative
    to the largest coefficient.
    """
    if spec.regime != "strong":
        raise ValueError("compute_X specialises the strong-coupling coefficients")
    K = truncation_bound(spec, wdm) if K is None else K
    T = wdm.symbol_period_ps
    out = {}
    used = {}
    for c in wdm.interferers:
        if n_z is None:
            collision_km = T / max(abs(spec.beta2_mean * 2 * np.pi * (wdm.carrier_thz(c) - wdm.carrier_thz(0))), 1e-12)
            nz = int(max(16, math.ceil(4 * spec.length_km / collision_km)))
        else:
            nz = n_z
        prev = _x_matrix(spec, wdm, c, K, nz, oversampling, margin, diagonal_only)
        for _ in range(max_refine):
            nz *= 2
            cur = _x_matrix(spec, wdm, c, K, nz, oversampling, margin, diagonal_only)
            err = np.max(np.abs(cur - prev)) / 3
            prev = cur
            if err <= tol * np.max(np.abs(cur)):
                break
        else:
            raise AccuracyError(f"X for channel {c} did not converge (Richardson error {err:.3g})")
        out[c] = prev if not diagonal_only else np.diag(prev)
        used[c] = nz
    quad = {"n_z": used, "oversampling": oversampling, "margin_symbols": margin, "tol": tol,
            "diagonal_only": diagonal_only}
    return NliCoefficients(X=out, K=K, T=T, quadrature=quad, spec_hash=coefficient_key(spec, wdm, K))


def coefficient_key(spec: CouplingSpec, wdm: WdmSpec, K: int) -> str:
    payload = {"spec": spec.digest(), "channels": list(wdm.channels), "spacing": wdm.spacing_thz,
               "B": wdm.bandwidth_thz, "Q": wdm.subcarriers, "delays": np.round(wdm.delays_ps, 9).tolist(), "K": K}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


_MAGIC = b"SDMX1\n"
_ROW = np.dtype([("c", "<i4"), ("k", "<i4"), ("kp", "<i4"), ("re", "<f8"), ("im", "<f8")])


def save_coefficients(path, coeffs: NliCoefficients) -> None:
    """Binary table of (c, k, k', re, im) rows after a one-line JSON header."""
    rows = []
    ks = np.arange(-coeffs.K, coeffs.K + 1)
    kk, kkp = np.meshgrid(ks, ks, indexing="ij")
    for c, X in sorted(coeffs.X.items()):
        arr = np.empty(X.size, dtype=_ROW)
        arr["c"] = c
        arr["k"] = kk.ravel()
        arr["kp"] = kkp.ravel()
        arr["re"] = X.real.ravel()
        arr["im"] = X.imag.ravel()
        rows.append(arr)
    header = {"spec_hash": coeffs.spec_hash, "K": coeffs.K, "T_ps": coeffs.T,
              "quadrature": {k: (v if not isinstance(v, dict) else {str(a): b for a, b in v.items()})
                             for k, v in coeffs.quadrature.items()}}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.concatenate(rows).tobytes())


def load_coefficients(path, expected_hash: Optional[str] = None) -> NliCoefficients:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a coefficient cache file")
    rest = data[len(_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if expected_hash is not None and header["spec_hash"] != expected_hash:
        raise ValueError("coefficient cache was built for a different link")
    table = np.frombuffer(rest[nl + 1:], dtype=_ROW)
    K = header["K"]
    n = 2 * K + 1
    X = {}
    for c in np.unique(table["c"]):
        sel = table[table["c"] == c]
        M = np.zeros((n, n), dtype=complex)
        M[sel["k"] + K, sel["kp"] + K] = sel["re"] + 1j * sel["im"]
        X[int(c)] = M
    return NliCoefficients(X=X, K=K, T=header["T_ps"], quadrature=header["quadrature"], spec_hash=header["spec_hash"])


# ---------------------------------------------------------------------------
# covariance functions

@dataclass
class CovarianceModel:
    """r[l], s[l] on lags 0..len-1 (both even in l) and the diagonal mean of J."""

    r: np.ndarray
    s: np.ndarray
    mean_diag: float
    mode: str
    S: int
    diagnostics: dict = field(default_factory=dict)

    def r_at(self, lag) -> np.ndarray:
        lag = np.abs(np.asarray(lag))
        return np.where(lag < len(self.r), self.r[np.minimum(lag, len(self.r) - 1)], 0.0)

    def s_at(self, lag) -> np.ndarray:
        lag = np.abs(np.asarray(lag))
        return np.where(lag < len(self.s), self.s[np.minimum(lag, len(self.s) - 1)], 0.0)

    def truncated(self, mu: int) -> "CovarianceModel":
        return CovarianceModel(self.r_at(np.arange(mu + 1)), self.s_at(np.arange(mu + 1)),
                               self.mean_diag, self.mode, self.S, dict(self.diagnostics))


def _lagged_sum(A, B, lag):
    """sum_{k,k'} A[k,k'] * B[k-lag, k'-lag] over the overlapping index range."""
    if lag == 0:
        return np.sum(A * B)
    return np.sum(A[lag:, lag:] * B[:-lag, :-lag])


def covariance_exact(X: NliCoefficients, energies: dict, ell_max: int, S: int) -> CovarianceModel:
    """r[l] and s[l] from exact coefficients; ``energies`` maps c -> (E_c, Q_c)."""
    missing = [c for c in X.channels if c not in energies]
    if missing:
        raise ValueError(f"energies missing for interferer channels {missing}")
    r = np.zeros(ell_max + 1, dtype=complex)
    s = np.zeros(ell_max + 1, dtype=complex)
    mean = 0.0j
    for c, Xc in X.X.items():
        E, Q = energies[c]
        d = np.diag(Xc)
        mean += E * d.sum()
        for lag in range(ell_max + 1):
            if lag > Xc.shape[0] - 1:
                continue
            full = _lagged_sum(Xc, Xc.conj(), lag)
            diag = np.sum(d[lag:] * d[: len(d) - lag])
            r[lag] += (Q - E**2) * diag + E**2 * (full - np.sum(d[lag:] * d[: len(d) - lag].conj()))
            s[lag] += E**2 * full
    mean *= 1 + 2 * S
    diag = {"mean_imag_residue": float(abs(mean.imag)),
            "r_imag_residue": float(np.max(np.abs(r.imag))), "s_imag_residue": float(np.max(np.abs(s.imag)))}
    return CovarianceModel(r.real.copy(), s.real.copy(), float(mean.real), "exact", S, diag)


def interferer_offsets(wdm: WdmSpec, q: int = 0) -> list[tuple[int, float]]:
    """(channel, angular offset rad/ps) of every interfering (sub)carrier seen by COI subcarrier q."""
    f0 = wdm.carrier_thz(0, q)
    return [(c, 2 * np.pi * (wdm.carrier_thz(c, qq) - f0)) for c in wdm.interferers for qq in range(wdm.subcarriers)]


def covariance_approx(spec: CouplingSpec, wdm: WdmSpec, energies: dict, ell_max: int,
                      S: Optional[int] = None, subcarrier: int = 0) -> CovarianceModel:
    """Large-accumulated-dispersion closed forms (triangular windows)."""
    S = spec.S if S is None else S
    beta2 = spec.beta2_mean
    if beta2 == 0:
        raise ZeroDivisionError("large-dispersion covariance is singular for beta2 = 0")
    T = wdm.symbol_period_ps
    L = spec.length_km
    gk = spec.gamma * spec.kappa
    lags = np.arange(ell_max + 1)
    r = np.zeros(ell_max + 1)
    s = np.zeros(ell_max + 1)
    mean = 0.0
    for c, omega in interferer_offsets(wdm, subcarrier):
        if c not in energies:
            raise ValueError(f"energies missing for interferer channel {c}")
        E, Q = energies[c]
        w = abs(beta2 * omega)
        if w == 0:
            raise ZeroDivisionError("interferer at zero frequency offset")
        tri = np.clip(1 - lags * T / (w * L), 0, None)
        r += (Q - E**2) / w * tri
        s += E**2 / w * tri
        mean += E
    pref = gk**2 * L / T
    # mean counts each WDM channel once per subcarrier; per-subcarrier energies already carry the split
    return CovarianceModel(pref * r, pref * s, (1 + 2 * S) * gk * L / T * mean / wdm.subcarriers,
                           "large_dispersion", S)


@dataclass(frozen=True)
class JmCovariance:
    """Second-order description of the 2S x 2S matrix J_m."""

    S: int
    r: np.ndarray
    s: np.ndarray

    @property
    def diagonal_acf(self):
        return (3 + 2 * self.S) * self.r

    @property
    def offdiagonal_acf(self):
        return self.s

    @property
    def diagonal_cross(self):
        return (2 + 2 * self.S) * self.r

    def acf(self, i, k, ip, kp) -> np.ndarray:
        """r_{i k i' k'}[l] = cov(J_ik[m], J_i'k'[m + l]) for lags 0..len-1."""
        if i == k and ip == kp:
            return self.diagonal_acf if i == ip else self.diagonal_cross
        if i != k and (i, k) == (ip, kp):
            return self.s
        return np.zeros_like(self.r)


def jm_covariance_structure(cov: CovarianceModel, S: int) -> JmCovariance:
    return JmCovariance(S, np.asarray(cov.r, float), np.asarray(cov.s, float))


# ---------------------------------------------------------------------------
# Monte-Carlo construction of J_m straight from the coefficient sums

def sample_j_entries(X: NliCoefficients, S: int, n_symbols: int, energy: float, stream: RandomStream,
                     chunk: int = 8192) -> np.ndarray:
    """Draw CSCG interferer symbols and build J_m (mean included) for m < n_symbols.

    For channels i, k (rows of the 2S stack) define
    B_ik[m] = sum_c sum_{k,k'} X[c;0,k,k'] b_i[c, k+m] b_k*[c, k'+m].
    Then J_ii = 2 B_ii + sum_{i' != i} B_i'i' and J_ik = B_ik for i != k.
    Interferer sequences are periodic with period ``n_symbols``.
    Returns an array of shape (n_symbols, 2S, 2S).
    """
    G = 2 * S
    K = X.K
    n = 2 * K + 1
    rng = stream.rng()
    Bmat = np.zeros((n_symbols, G, G), dtype=complex)
    for c in X.channels:
        Xc = X.X[c]
        b = cscg(rng, (G, n_symbols), energy)
        ext = np.concatenate([b[:, -K:], b, b[:, :K]], axis=1) if K else b
        for start in range(0, n_symbols, chunk):
            stop = min(start + chunk, n_symbols)
            W = np.stack([np.lib.stride_tricks.sliding_window_view(ext[i], n)[start:stop] for i in range(G)])
            WX = W @ Xc
            Bmat[start:stop] += np.einsum("imk,jmk->mij", WX, W.conj())
    J = Bmat.copy()
    diagB = np.einsum("mii->mi", Bmat).real
    total = diagB.sum(axis=1, keepdims=True)
    idx = np.arange(G)
    J[:, idx, idx] = diagB + total
    return J
