"""Particle-filter estimates of mismatched entropies and achievable rates.

All entropies are in bits per 2S-dimensional vector symbol; the division by
2S to bits/s/Hz/channel happens only in :func:`achievable_rate`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import RandomStream
from .cran import (ALGO_KINDS, CranParams, MarkovSpec, _stationary_window, diag_mixing, expj_action,
                   fit_markov, unitary_exp, whiten, whitening_log_gain)
from .errors import FilterError, RateWarning

LOG2E = np.log2(np.e)


@dataclass(frozen=True)
class ReceiverAlgo:
    kind: str

    def __post_init__(self):
        if self.kind not in ALGO_KINDS:
            raise ValueError(f"unknown receiver algorithm {self.kind!r}")

    def grouping(self, S: int) -> int:
        """Number of channels processed jointly by one filter."""
        return {"memoryless_1p": 1, "cpan_1p": 1, "cpan_2p": 2, "cran_sdm": 2 * S}[self.kind]

    def phi_scale(self, S: int) -> float:
        """Per-Phi ACF multiplier that makes sigma_phi2 = 1 the theory diagonal ACF (3 + 2S) r."""
        return {"memoryless_1p": 3 + 2 * S, "cpan_1p": 3 + 2 * S,
                "cpan_2p": (3 + 2 * S) / 5, "cran_sdm": 1.0}[self.kind]

    @property
    def has_rotation(self) -> bool:
        return self.kind == "cran_sdm"


ALGOS = tuple(ReceiverAlgo(k) for k in ALGO_KINDS)


@dataclass(frozen=True)
class HiddenModel:
    """Hidden Gauss-Markov structure of one filter group of G channels.

    ``mixing`` maps the n_phi real phase processes to diag(J); ``pairs``
    lists the (i, k) positions of complex off-diagonal processes.
    """

    G: int
    mixing: np.ndarray
    phi: MarkovSpec
    off: Optional[MarkovSpec]
    pairs: tuple
    noise_var: float

    @property
    def n_phi(self) -> int:
        return self.mixing.shape[1]

    @property
    def n_real(self) -> int:
        return self.n_phi + 2 * len(self.pairs)


def scalar_phase_model(acf, noise_var: float) -> HiddenModel:
    """Single-channel phase-noise model with phase ACF ``acf`` on lags 0..mu."""
    return HiddenModel(1, np.ones((1, 1)), fit_markov(acf), None, (), float(noise_var))


def model_for(params: CranParams, algo: ReceiverAlgo) -> HiddenModel:
    G = algo.grouping(params.S)
    phi = params.phi_markov(algo.phi_scale(params.S))
    if algo.kind == "cran_sdm":
        iu = np.triu_indices(G, 1)
        pairs = tuple(zip(iu[0].tolist(), iu[1].tolist()))
        return HiddenModel(G, diag_mixing(G), phi, params.offdiag_markov(), pairs, params.model_noise_var)
    mixing = diag_mixing(2) if algo.kind == "cpan_2p" else np.ones((1, 1))
    return HiddenModel(G, mixing, phi, None, (), params.model_noise_var)


def _process_tables(model: HiddenModel):
    specs = [model.phi] * model.n_phi + [model.off] * (2 * len(model.pairs))
    mu = model.phi.mu
    coeff = np.array([s.ar_coeffs for s in specs]).reshape(len(specs), mu)
    sd = np.sqrt([s.component_innovation_var for s in specs])
    return specs, coeff, sd


def _systematic_resample(logw, rng, rows):
    B, N = logw.shape
    w = np.exp(logw[rows] - logsumexp(logw[rows], axis=1, keepdims=True))
    cw = np.cumsum(w, axis=1)
    cw[:, -1] = 1.0
    nb = len(rows)
    pos = (rng.random((nb, 1)) + np.arange(N)[None, :]) / N
    offs = np.arange(nb)[:, None]
    idx = np.searchsorted((cw + offs).ravel(), (pos + offs).ravel()).reshape(nb, N) - offs * N
    return np.minimum(idx, N - 1)


def _basis(model: HiddenModel) -> np.ndarray:
    """Hermitian matrices E_p with J = sum_p h_p E_p for the real hidden values h_p."""
    G = model.G
    E = np.zeros((model.n_real, G, G), dtype=complex)
    for p in range(model.n_phi):
        E[p][np.diag_indices(G)] = model.mixing[:, p]
    for q, (i, k) in enumerate(model.pairs):
        re, im = model.n_phi + 2 * q, model.n_phi + 2 * q + 1
        E[re, i, k] = E[re, k, i] = 1.0
        E[im, i, k], E[im, k, i] = 1j, -1j
    return E


@dataclass
class ParticleEnsemble:
    """Particles (lag windows of the real hidden processes) and log-weights.

    ``windows`` has shape (N_p, P, mu), most recent value first.
    """

    windows: np.ndarray
    log_weights: np.ndarray

    @property
    def count(self) -> int:
        return len(self.log_weights)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def resample(self, rng: np.random.Generator) -> "ParticleEnsemble":
        idx = _systematic_resample(self.log_weights[None, :], rng, np.array([0]))[0]
        return ParticleEnsemble(self.windows[idx], np.full(self.count, -np.log(self.count)))


def particle_loglik(y: np.ndarray, x: np.ndarray, model: HiddenModel, n_particles: int,
                    rng: np.random.Generator, resample_threshold: float = 0.5,
                    rotation: str = "exp", proposal: str = "linearized",
                    return_ensembles: bool = False, companion: bool = False):
    """Predictive log-likelihoods ln q(y_m | y^{m-1}, x^m) from an SIR filter.

    ``y`` and ``x`` have shape (B, G, M) for B independent sequences.  The
    per-particle observation density is CSCG around exp(jJ_m) x_m (or
    (I + jJ_m) x_m when ``rotation == "linear"``) with variance
    ``model.noise_var`` per complex dimension.  Returns an array (B, M).

    ``proposal="prior"`` is the plain bootstrap filter.  The default draws
    the innovations from the Gaussian posterior of the observation linearised
    around the weighted-mean prediction, and corrects with importance weights
    that use the exact likelihood, so the estimator targets the same model.
    Resampling happens when ESS < resample_threshold * N_p; a threshold of 1
    or more resamples at every step.

    With ``companion=True`` (exp rotation only) the same particles also
    carry importance weights for the linearised observation model, and the
    function returns the pair (exp, linear) of log-likelihood arrays.  The
    two estimates share almost all of their Monte-Carlo error.
    """
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    B, G, M = y.shape
    if G != model.G:
        raise ValueError(f"group size {G} does not match model ({model.G})")
    if rotation not in ("exp", "linear") or proposal not in ("prior", "linearized"):
        raise ValueError("rotation must be exp|linear and proposal prior|linearized")
    if companion and rotation != "exp":
        raise ValueError("the linear companion needs the exp rotation model")
    N = int(n_particles)
    s2 = model.noise_var
    if s2 <= 0:
        raise FilterError("noise variance must be positive")
    specs, coeff, sd = _process_tables(model)
    P = len(specs)
    mu = model.phi.mu
    hist = np.zeros((B, N, P, mu))
    for p, spec in enumerate(specs):
        hist[:, :, p, :] = _stationary_window(spec, rng, (B, N))
    basis = _basis(model)
    logw = np.full((B, N), -np.log(N))
    out = np.empty((B, M))
    if companion:
        logw_lin = logw.copy()
        out_lin = np.empty((B, M))
    const = -G * np.log(np.pi * s2)
    eyeP = np.eye(P)

    n_phi = model.n_phi
    pi_ = np.array([a for a, _ in model.pairs], dtype=int)
    pk_ = np.array([b for _, b in model.pairs], dtype=int)
    di = np.arange(G)

    def assemble(vals):
        J = np.zeros(vals.shape[:-1] + (G, G), dtype=complex)
        J[..., di, di] = vals[..., :n_phi] @ model.mixing.T
        if len(pi_):
            off = vals[..., n_phi::2] + 1j * vals[..., n_phi + 1::2]
            J[..., pi_, pk_] = off
            J[..., pk_, pi_] = off.conj()
        return J

    def rotate(vals, xm, how=rotation):
        J = assemble(vals)
        if how == "linear":
            return xm[:, None, :] + 1j * (J @ xm[:, None, :, None])[..., 0], J
        if G == 1:
            return xm[:, None, :] * np.exp(1j * J[..., 0, 0])[..., None], J
        return expj_action(J, np.broadcast_to(xm[:, None, :], (B, N, G))), J

    for m in range(M):
        xm, ym = x[:, :, m], y[:, :, m]
        pred = np.zeros((B, N, P))
        for lag in range(mu):
            pred += hist[..., lag] * coeff[:, lag]
        eps = rng.standard_normal((B, N, P))
        log_corr = 0.0
        if proposal == "prior":
            new = pred + sd * eps
        else:
            mean_pred, Jpred = rotate(pred, xm)
            w = np.exp(logw)
            w /= w.sum(axis=1, keepdims=True)
            Jbar = np.einsum("bn,bnij->bij", w, Jpred)
            xhat = xm if rotation == "linear" else (unitary_exp(Jbar) @ xm[..., None])[..., 0]
            Hc = 1j * np.einsum("pij,bj->bip", basis, xhat)          # (B, G, P)
            H = np.concatenate([Hc.real, Hc.imag], axis=1) * sd       # scaled by D^1/2
            A = eyeP + (2 / s2) * (np.swapaxes(H, 1, 2) @ H)
            La = np.linalg.cholesky(A)
            LinvT = np.swapaxes(np.linalg.inv(La), 1, 2)
            resid = ym[:, None, :] - mean_pred
            rr = np.concatenate([resid.real, resid.imag], axis=-1)   # (B, N, 2G)
            g = (2 / s2) * (rr @ H)
            mv = (g @ LinvT) @ np.swapaxes(LinvT, 1, 2)
            v = mv + eps @ np.swapaxes(LinvT, 1, 2)
            new = pred + sd * v
            log_corr = (-0.5 * np.sum(v * v, axis=-1) + 0.5 * np.sum(eps * eps, axis=-1)
                        - np.sum(np.log(np.diagonal(La, axis1=-2, axis2=-1)), axis=-1)[:, None])
        if mu:
            hist = np.concatenate([new[..., None], hist[..., :-1]], axis=-1)
        mean, _ = rotate(new, xm)
        r = ym[:, None, :] - mean
        ll = const - np.sum(r.real**2 + r.imag**2, axis=-1) / s2
        joint = logw + ll + log_corr
        pred_ll = logsumexp(joint, axis=1)
        if not np.all(np.isfinite(pred_ll)):
            raise FilterError(f"all particle weights underflowed at symbol {m}", symbol_index=m)
        out[:, m] = pred_ll
        logw = joint - pred_ll[:, None]
        if companion:
            lin, _ = rotate(new, xm, "linear")
            r = ym[:, None, :] - lin
            joint = logw_lin + const - np.sum(r.real**2 + r.imag**2, axis=-1) / s2 + log_corr
            out_lin[:, m] = logsumexp(joint, axis=1)
            logw_lin = joint - out_lin[:, m, None]
        ess = 1.0 / np.sum(np.exp(2 * logw), axis=1)
        rows = np.nonzero(ess < resample_threshold * N)[0] if resample_threshold < 1 else np.arange(B)
        if len(rows):
            idx = _systematic_resample(logw, rng, rows)
            if mu:
                hist[rows] = hist[rows[:, None], idx]
            if companion:
                # resampled by the exp weights: the linear weights keep their ratio to them
                ratio = logw_lin[rows[:, None], idx] - logw[rows[:, None], idx]
                logw_lin[rows] = ratio - logsumexp(ratio, axis=1, keepdims=True)
            logw[rows] = -np.log(N)
    if companion:
        out = (out, out_lin)
    if return_ensembles:
        return out, [ParticleEnsemble(hist[b], logw[b]) for b in range(B)]
    return out


def linear_kalman_loglik(y: np.ndarray, x: np.ndarray, model: HiddenModel) -> np.ndarray:
    """Exact ln q(y_m | y^{m-1}, x^m) when exp(jJ) is replaced by I + jJ.

    The hidden AR processes are stacked in companion form; ``y`` and ``x``
    have shape (B, G, M).  Used as the control variate of the particle
    estimate.
    """
    y = np.asarray(y, dtype=complex)
    x = np.asarray(x, dtype=complex)
    B, G, M = y.shape
    specs, coeff, sd = _process_tables(model)
    P = len(specs)
    mu = model.phi.mu
    L = max(mu, 1)
    n = P * L
    F = np.zeros((n, n))
    Qn = np.zeros(n)
    P0 = np.zeros((n, n))
    for p, spec in enumerate(specs):
        o = p * L
        if mu:
            F[o, o:o + mu] = coeff[p]
            F[o + np.arange(1, mu), o + np.arange(mu - 1)] = 1.0
            P0[o:o + mu, o:o + mu] = spec.stationary_cov()
        else:
            P0[o, o] = sd[p] ** 2
        Qn[o] = sd[p] ** 2
    pick = np.arange(P) * L
    basis = _basis(model)
    mean = np.zeros((B, n))
    cov = np.broadcast_to(F @ P0 @ F.T + np.diag(Qn) if mu else P0, (B, n, n)).copy()
    r = model.noise_var / 2
    eye = np.eye(2 * G)
    out = np.empty((B, M))
    for m in range(M):
        if m:
            mean = mean @ F.T
            cov = F @ cov @ F.T
            cov[:, np.arange(n), np.arange(n)] += Qn
        Hc = 1j * np.einsum("pij,bj->bip", basis, x[:, :, m])
        Hs = np.concatenate([Hc.real, Hc.imag], axis=1)          # (B, 2G, P)
        v = y[:, :, m] - x[:, :, m]
        innov = np.concatenate([v.real, v.imag], axis=1) - np.einsum("bkp,bp->bk", Hs, mean[:, pick])
        CH = cov[:, :, pick] @ np.swapaxes(Hs, 1, 2)             # (B, n, 2G)
        Sm = Hs @ CH[:, pick, :] + r * eye
        Lc = np.linalg.cholesky(Sm)
        a = np.linalg.solve(Lc, innov[..., None])[..., 0]
        out[:, m] = (-G * np.log(2 * np.pi) - np.sum(np.log(np.diagonal(Lc, axis1=1, axis2=2)), axis=1)
                     - 0.5 * np.sum(a * a, axis=1))
        K = np.swapaxes(np.linalg.solve(Sm, np.swapaxes(CH, 1, 2)), 1, 2)  # (B, n, 2G)
        mean = mean + np.einsum("bnk,bk->bn", K, innov)
        cov = cov - K @ np.swapaxes(CH, 1, 2)
        cov = (cov + np.swapaxes(cov, 1, 2)) / 2
    return out


def memoryless_loglik(y: np.ndarray, x: np.ndarray, phase_var: float, noise_var: float,
                      points_per_width: int = 8, max_points: int = 4001) -> np.ndarray:
    """ln q(y|x) for y = exp(j theta) x + z with i.i.d. theta ~ N(0, phase_var).

    The phase integral uses a trapezoid rule fine enough to resolve both the
    prior and the likelihood peak.
    """
    y = np.asarray(y, dtype=complex).ravel()
    x = np.asarray(x, dtype=complex).ravel()
    base = -np.log(np.pi * noise_var)
    if phase_var <= 0:
        return base - np.abs(y - x) ** 2 / noise_var
    sd = np.sqrt(phase_var)
    like_width = np.sqrt(noise_var / 2) / max(float(np.max(np.abs(x))), 1e-300)
    step = min(sd, like_width) / points_per_width
    half = min(int(np.ceil(8 * sd / step)), max_points // 2)
    theta = np.linspace(-8 * sd, 8 * sd, 2 * half + 1)
    dth = theta[1] - theta[0]
    logprior = -0.5 * theta**2 / phase_var - 0.5 * np.log(2 * np.pi * phase_var) + np.log(dth)
    out = np.empty(len(y))
    chunk = max(1, 2_000_000 // len(theta))
    rot = np.exp(1j * theta)
    for a in range(0, len(y), chunk):
        yy, xx = y[a:a + chunk, None], x[a:a + chunk, None]
        d = yy - xx * rot[None, :]
        out[a:a + chunk] = logsumexp(logprior - (d.real**2 + d.imag**2) / noise_var, axis=1) + base
    return out


@dataclass
class EntropyEstimate:
    bits: float
    stderr: float
    per_sequence: np.ndarray = field(repr=False)
    method: str = "particle"


# below this index the linearised model is close enough to serve as a control variate
CONTROL_MAX_INDEX = 0.02


def linearization_index(model: HiddenModel, x: np.ndarray) -> float:
    """Size of the neglected second-order rotation term relative to the noise.

    With lam = max_i sum_k E|J_ik|^2 under the stationary law, the term
    (J^2 / 2) x has power of order lam^2 E|x|^2 / 4 per channel; the index
    divides that by the noise variance.
    """
    var_phi = model.phi.acf[0] if len(model.phi.acf) else 0.0
    lam = float(np.max((model.mixing**2).sum(axis=1))) * var_phi
    if model.pairs:
        lam += (model.G - 1) * float(model.off.acf[0])
    return lam**2 * float(np.mean(np.abs(x) ** 2)) / (4 * model.noise_var)


def _stack_pairs(test):
    pairs = getattr(test, "pairs", test)
    xs = np.stack([np.asarray(p[0], dtype=complex) for p in pairs])
    ys = np.stack([np.asarray(p[1], dtype=complex) for p in pairs])
    return xs, ys


def prepare_observations(test, params: CranParams):
    """Remove the mean phase, apply the whitening filter and drop edge symbols."""
    xs, ys = _stack_pairs(test)
    ys = ys * np.exp(-1j * params.mean_diag)[None, :, None]
    a = params.whitening_tap
    xt, yt = whiten(xs, a), whiten(ys, a)
    return xt[..., 1:-1], yt[..., 1:-1]


def conditional_entropy(test, params: CranParams, algo: ReceiverAlgo, n_particles: int = 512,
                        stream: Optional[RandomStream] = None, resample_threshold: float = 0.5,
                        rotation: str = "exp", estimator: str = "auto") -> EntropyEstimate:
    """h_q(Y|X) in bits per vector symbol, averaged over the test sequences.

    ``estimator`` picks how the particle filter is used: ``plain`` is the
    filter alone; ``control`` adds the exact Kalman log-likelihood of the
    linearised model and subtracts the filter's own estimate of it (same
    particles), which removes most of the finite-N_p bias when the rotation
    is nearly linear; ``auto`` uses ``control`` for the full rotation model
    when :func:`linearization_index` is below ``CONTROL_MAX_INDEX``.  The
    scalar and two-phase filters are accurate on their own, and for them the
    companion weights only add noise.
    """
    if estimator not in ("auto", "plain", "control"):
        raise ValueError(f"unknown estimator {estimator!r}")
    xt, yt = prepare_observations(test, params)
    n_seq, C, M = xt.shape
    if C != 2 * params.S:
        raise ValueError("sequence rows must equal 2S")
    G = algo.grouping(params.S)
    if algo.kind == "memoryless_1p":
        var = params.sigma_phi2 * algo.phi_scale(params.S) * params.base_r[0]
        ll = memoryless_loglik(yt, xt, var, params.model_noise_var).reshape(n_seq, C, M)
        per_seq = -ll.sum(axis=(1, 2)) * LOG2E / M
        method = "quadrature"
    else:
        stream = stream or RandomStream(0, ("pf",))
        model = model_for(params, algo)
        ng = C // G
        yb = yt.reshape(n_seq * ng, G, M)
        xb = xt.reshape(n_seq * ng, G, M)
        if estimator == "auto":
            linear_enough = linearization_index(model, xb) < CONTROL_MAX_INDEX
            estimator = "control" if linear_enough and model.pairs and rotation == "exp" else "plain"
        if estimator == "control":
            if rotation != "exp":
                raise ValueError("the control-variate estimator needs the exp rotation")
            ll_exp, ll_lin = particle_loglik(yb, xb, model, n_particles, stream.rng(), resample_threshold,
                                             rotation, companion=True)
            ll = linear_kalman_loglik(yb, xb, model) + ll_exp - ll_lin
        else:
            ll = particle_loglik(yb, xb, model, n_particles, stream.rng(), resample_threshold, rotation)
        method = estimator
        per_seq = -ll.reshape(n_seq, ng * M).sum(axis=1) * LOG2E / M
    per_seq = per_seq - C * whitening_log_gain(params.whitening_tap)
    stderr = float(np.std(per_seq, ddof=1) / np.sqrt(n_seq)) if n_seq > 1 else float("nan")
    return EntropyEstimate(float(np.mean(per_seq)), stderr, per_seq, method)


def output_entropy(params: CranParams, algo: Optional[ReceiverAlgo] = None, energy: float = 0.0) -> float:
    """Gaussian output entropy 2S log2(pi e (E + sigma_Z^2)) per vector symbol."""
    return 2 * params.S * float(np.log2(np.pi * np.e * (energy + params.sigma_z2)))


@dataclass
class RateResult:
    rate: float
    h_cond: float
    h_out: float
    stderr: float
    n_sequences: int


def achievable_rate(test, params: CranParams, algo: ReceiverAlgo, energy: float, n_particles: int = 512,
                    stream: Optional[RandomStream] = None) -> RateResult:
    """Mismatched rate [h_q(Y) - h_q(Y|X)] / 2S in bits/s/Hz/channel."""
    hc = conditional_entropy(test, params, algo, n_particles, stream)
    ho = output_entropy(params, algo, energy)
    n = 2 * params.S
    rate = (ho - hc.bits) / n
    if rate < 0:
        warnings.warn(f"negative mismatched rate {rate:.3f} for {algo.kind}", RateWarning)
    return RateResult(rate, hc.bits, ho, hc.stderr / n, len(hc.per_sequence))
