"""Correlated rotation-and-additive-noise (CRAN) channel model.

    y_m = exp(j J_m) x_m + z_m

J_m is Hermitian 2S x 2S.  Its diagonal is built from 2S real Gauss-Markov
processes Phi_i (J_ii = 2 Phi_i + sum_{i' != i} Phi_i'); each upper entry
J_ik, i < k, is an independent circular complex Gauss-Markov process.  z_m is
CSCG with a short real ACF.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_toeplitz
from scipy.signal import lfilter, lfiltic

from .core import RandomStream
from .errors import DomainError, ModelError


def hidden_dimension(S: int) -> dict:
    """Counts of hidden independent real Gauss-Markov processes for S modes."""
    G = 2 * S
    phase = G
    rotation = G * (G - 1)
    additive = 2 * G
    return {"phase": phase, "rotation": rotation, "rotation_phase": phase + rotation,
            "additive": additive, "total": phase + rotation + additive}


@dataclass(frozen=True)
class MarkovSpec:
    """Order-mu autoregression matched to an ACF on lags 0..mu.

    For ``kind == "complex"`` the ACF is E[X_m X*_{m+l}]; real and imaginary
    parts are independent with half of it each.
    """

    mu: int
    acf: np.ndarray
    ar_coeffs: np.ndarray
    innovation_var: float
    kind: str = "real"

    def stationary_cov(self) -> np.ndarray:
        """Covariance of a window of mu consecutive values (per real component)."""
        part = self.acf / 2 if self.kind == "complex" else self.acf
        idx = np.arange(self.mu)
        return part[np.abs(idx[:, None] - idx[None, :])] if self.mu else np.zeros((0, 0))

    @property
    def component_innovation_var(self) -> float:
        return self.innovation_var / 2 if self.kind == "complex" else self.innovation_var

    def simulate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Stationary sample path of length n (starts from the stationary law)."""
        parts = 2 if self.kind == "complex" else 1
        sd = np.sqrt(self.component_innovation_var)
        den = np.concatenate([[1.0], -self.ar_coeffs])
        out = np.empty((parts, n))
        for p in range(parts):
            eps = sd * rng.standard_normal(n)
            if self.mu:
                hist = _stationary_window(self, rng, ())
                zi = lfiltic([1.0], den, hist)
                out[p] = lfilter([1.0], den, eps, zi=zi)[0]
            else:
                out[p] = eps
        return out[0] + 1j * out[1] if parts == 2 else out[0]


def _stationary_window(spec: MarkovSpec, rng, shape):
    """Draw lag windows (most recent first) from the stationary law."""
    if spec.mu == 0:
        return np.zeros(shape + (0,))
    cov = spec.stationary_cov()
    Lc = np.linalg.cholesky(cov + 1e-300 * np.eye(spec.mu)) if np.any(cov) else np.zeros_like(cov)
    return rng.standard_normal(shape + (spec.mu,)) @ Lc.T


def fit_markov(acf, kind: str = "real") -> MarkovSpec:
    """Yule-Walker AR(mu) fit reproducing ``acf`` on lags 0..mu (mu = len(acf) - 1).

    An all-zero ACF yields the degenerate zero process.
    """
    acf = np.asarray(acf, dtype=float)
    mu = len(acf) - 1
    if mu < 0:
        raise ModelError("empty ACF")
    if np.all(acf == 0):
        return MarkovSpec(mu, acf, np.zeros(mu), 0.0, kind)
    if acf[0] <= 0:
        raise ModelError("ACF at lag 0 must be positive")
    if mu == 0:
        return MarkovSpec(0, acf, np.zeros(0), float(acf[0]), kind)
    toe = acf[np.abs(np.arange(mu + 1)[:, None] - np.arange(mu + 1)[None, :])]
    try:
        np.linalg.cholesky(toe)
    except np.linalg.LinAlgError as exc:
        raise ModelError("ACF is not positive definite on lags 0..mu") from exc
    coeffs = solve_toeplitz(acf[:mu], acf[1:])
    innov = float(acf[0] - coeffs @ acf[1:])
    if innov <= 0:
        raise ModelError("non-positive innovation variance")
    return MarkovSpec(mu, acf, coeffs, innov, kind)


def diag_mixing(G: int) -> np.ndarray:
    """Matrix taking Phi (G,) to diag(J): 2 Phi_i + sum_{i' != i} Phi_i'."""
    return np.eye(G) + np.ones((G, G))


def assemble_J(phi, offdiag, S: Optional[int] = None) -> np.ndarray:
    """Hermitian J from Phi (..., G) and upper entries (..., G(G-1)/2) in row-major order."""
    phi = np.asarray(phi, dtype=float)
    G = phi.shape[-1] if S is None else 2 * S
    if phi.shape[-1] != G:
        raise ValueError(f"expected {G} phase processes, got {phi.shape[-1]}")
    offdiag = np.asarray(offdiag, dtype=complex)
    iu = np.triu_indices(G, 1)
    if offdiag.shape[-1] != len(iu[0]):
        raise ValueError(f"expected {len(iu[0])} off-diagonal entries, got {offdiag.shape[-1]}")
    J = np.zeros(phi.shape[:-1] + (G, G), dtype=complex)
    idx = np.arange(G)
    J[..., idx, idx] = phi @ diag_mixing(G).T
    J[..., iu[0], iu[1]] = offdiag
    J[..., iu[1], iu[0]] = offdiag.conj()
    return J


def unitary_exp(J, tol: float = 1e-10) -> np.ndarray:
    """exp(jJ) for Hermitian J via eigendecomposition (batched over leading axes)."""
    J = np.asarray(J, dtype=complex)
    if np.max(np.abs(J - np.swapaxes(J.conj(), -1, -2)), initial=0.0) > tol:
        raise DomainError("J is not Hermitian")
    w, V = np.linalg.eigh(J)
    return (V * np.exp(1j * w)[..., None, :]) @ np.swapaxes(V.conj(), -1, -2)


def expj_action(J: np.ndarray, x: np.ndarray, tol: float = 1e-13) -> np.ndarray:
    """exp(jJ) x for batched Hermitian J (..., G, G) and x (..., G) by Taylor series.

    The series is summed until the largest term drops below ``tol``; it is
    used where J is small and an eigendecomposition per matrix would dominate.
    """
    x = np.asarray(x, dtype=complex)
    out = np.array(np.broadcast_to(x, np.broadcast_shapes(J.shape[:-1], x.shape)), dtype=complex)
    term = out.copy()
    scale = max(float(np.max(np.abs(out), initial=0.0)), 1e-300)
    for n in range(1, 200):
        term = np.einsum("...ij,...j->...i", J, term) * (1j / n)
        out += term
        if np.max(np.abs(term), initial=0.0) <= tol * scale:
            break
    return out


# ---------------------------------------------------------------------------
# whitening and noise shaping

def whitening_taps(a: float) -> np.ndarray:
    """Symmetric real unit-energy 3-tap filter (a, b, a), b = sqrt(1 - 2 a^2)."""
    if 2 * a * a >= 1:
        raise DomainError("whitening tap too large for a unit-energy filter")
    b = np.sqrt(1 - 2 * a * a)
    if b <= 2 * abs(a):
        raise DomainError("whitening filter must be invertible (|a| < 1/sqrt(6))")
    return np.array([a, b, a])


def whiten(seq: np.ndarray, a: float) -> np.ndarray:
    """Filter sequences along the last axis with (a, b, a), zero-padded at the edges."""
    if a == 0:
        return np.array(seq, dtype=complex)
    h = whitening_taps(a)
    seq = np.asarray(seq, dtype=complex)
    out = h[1] * seq
    out[..., 1:] += h[0] * seq[..., :-1]
    out[..., :-1] += h[2] * seq[..., 1:]
    return out


def whitening_log_gain(a: float) -> float:
    """int_{-1/2}^{1/2} log2 |H(f)|^2 df for H(f) = b + 2 a cos(2 pi f)."""
    if a == 0:
        return 0.0
    _, b, _ = whitening_taps(a)
    return 2 * np.log2((b + np.sqrt(b * b - 4 * a * a)) / 2)


def ma_shaping_filter(acf) -> np.ndarray:
    """Minimum-phase MA taps g with sum_k g_k g_{k+l} = acf[l] (spectral factorisation)."""
    acf = np.asarray(acf, dtype=float)
    L = len(acf) - 1
    if L == 0 or np.all(acf[1:] == 0):
        return np.concatenate([[np.sqrt(acf[0])], np.zeros(L)])
    poly = np.concatenate([acf[::-1], acf[1:]])
    roots = np.roots(poly)
    inside = roots[np.abs(roots) < 1]
    if len(inside) != L:
        raise ModelError("noise ACF has no minimum-phase factor (PSD not strictly positive)")
    g = np.real(np.poly(inside))
    g *= np.sqrt(acf[0] / np.sum(g * g))
    return g


# ---------------------------------------------------------------------------
# parameters

ALGO_KINDS = ("memoryless_1p", "cpan_1p", "cpan_2p", "cran_sdm")


@dataclass
class CranParams:
    """Fitted mismatched-model parameters.

    ``base_r``/``base_s`` are r[l], s[l] on lags 0..mu; the hidden processes
    use ACFs sigma_phi2 * base_r (Phi_i) and sigma_j2 * base_s (J_ik).
    ``noise_acf`` is r_Z on lags 0..L.  ``filter_noise_var`` is the per
    complex dimension noise variance after whitening (defaults to
    noise_acf[0]).  ``phi_scale`` converts the theory diagonal ACF into the
    per-process Phi ACF of the receiver family (1 for the full model).
    """

    S: int
    mu: int
    mean_diag: np.ndarray
    sigma_phi2: float
    sigma_j2: float
    base_r: np.ndarray
    base_s: np.ndarray
    noise_acf: np.ndarray
    whitening_tap: float = 0.0
    filter_noise_var: Optional[float] = None
    algo: str = "cran_sdm"
    n_ase: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean_diag = np.broadcast_to(np.asarray(self.mean_diag, dtype=float), (2 * self.S,)).copy()
        self.base_r = np.asarray(self.base_r, dtype=float)
        self.base_s = np.asarray(self.base_s, dtype=float)
        self.noise_acf = np.atleast_1d(np.asarray(self.noise_acf, dtype=float))
        if len(self.base_r) != self.mu + 1 or len(self.base_s) != self.mu + 1:
            raise ModelError("base_r and base_s must cover lags 0..mu")
        if self.algo not in ALGO_KINDS:
            raise ModelError(f"unknown receiver family {self.algo!r}")
        if self.sigma_phi2 < 0 or self.sigma_j2 < 0:
            raise ModelError("scales must be non-negative")
        if self.n_ase is not None and self.noise_acf[0] < self.n_ase:
            raise ModelError("noise_acf[0] cannot be below the ASE floor n_ase")
        whitening_taps(self.whitening_tap)

    @property
    def sigma_z2(self) -> float:
        return float(self.noise_acf[0])

    @property
    def model_noise_var(self) -> float:
        return float(self.sigma_z2 if self.filter_noise_var is None else self.filter_noise_var)

    def replace(self, **changes) -> "CranParams":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return CranParams(**kw)

    def phi_markov(self, phi_scale: float = 1.0) -> MarkovSpec:
        return fit_markov(self.sigma_phi2 * phi_scale * self.base_r, "real")

    def offdiag_markov(self) -> MarkovSpec:
        return fit_markov(self.sigma_j2 * self.base_s, "complex")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CranParams":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CranParams":
        return cls.from_dict(json.loads(text))


def colored_cscg(rng: np.random.Generator, shape, noise_acf) -> np.ndarray:
    """CSCG sequences (last axis is time) with ACF ``noise_acf`` on lags 0..L."""
    g = ma_shaping_filter(noise_acf)
    L = len(g) - 1
    n = shape[-1]
    w = (rng.standard_normal(shape[:-1] + (n + L,)) + 1j * rng.standard_normal(shape[:-1] + (n + L,))) / np.sqrt(2)
    out = np.zeros(shape, dtype=complex)
    for k, gk in enumerate(g):
        out += gk * w[..., L - k: L - k + n]
    return out


def sample_channel(x: np.ndarray, params: CranParams, stream: RandomStream) -> tuple[np.ndarray, dict]:
    """Draw y from the full CRAN model for inputs ``x`` of shape (2S, M).

    Returns y and the hidden trajectory: ``phi`` (M, 2S), ``offdiag``
    (M, n_pairs), ``J`` (M, 2S, 2S) with mean included, and noise ``z`` (2S, M).
    """
    x = np.asarray(x, dtype=complex)
    G, M = x.shape
    if G != 2 * params.S:
        raise ValueError("input rows must equal 2S")
    rng = stream.rng()
    n_pairs = G * (G - 1) // 2
    phi_spec = params.phi_markov()
    off_spec = params.offdiag_markov()
    phi = np.stack([phi_spec.simulate(M, rng) for _ in range(G)], axis=1) if M else np.zeros((0, G))
    off = (np.stack([off_spec.simulate(M, rng) for _ in range(n_pairs)], axis=1)
           if n_pairs else np.zeros((M, 0), dtype=complex))
    J = assemble_J(phi, off)
    idx = np.arange(G)
    J[:, idx, idx] += params.mean_diag
    z = colored_cscg(rng, (G, M), params.noise_acf)
    y = np.einsum("mij,jm->im", unitary_exp(J), x) + z
    return y, {"phi": phi, "offdiag": off, "J": J, "z": z}
