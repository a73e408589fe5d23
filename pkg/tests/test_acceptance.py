"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 8 runs the desk-scale sweep (about an hour on one core).  Its
simulation cache and fits live in ``$SDMCRAN_DESK_DIR`` (default
``~/.cache/sdmcran/desk``) so a rerun only repeats what is missing.
Criterion 9 is the full-scale run; it is skipped unless
``SDMCRAN_FULLSCALE=1``.
"""

import os
import warnings
from pathlib import Path

import numpy as np
import pytest

from sdmcran.core import ModeField, RandomStream, cscg, dbm_to_watts
from sdmcran.cran import CranParams, hidden_dimension, sample_channel
from sdmcran.errors import EstimationWarning
from sdmcran.estimation import TrainingSet, estimate_sigma_z, fit_scales
from sdmcran.experiments import ExperimentConfig, desk_config, run_pipeline
from sdmcran.fiber import CouplingSpec, SsfmConfig, dispersion_only, first_order_perturbation, propagate
from sdmcran.kernels import (compute_X, covariance_approx, covariance_exact, jm_covariance_structure,
                             sample_j_entries)
from sdmcran.oracles import grid_loglik, kalman_loglik
from sdmcran.particle import ReceiverAlgo, conditional_entropy, particle_loglik, scalar_phase_model
from sdmcran.wdm import WdmSpec, draw_delays, modulate, random_frame

from conftest import mc_acf

L2E = np.log2(np.e)


def report(n, ok, detail):
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_criterion_1_awgn_sanity():
    # gamma = 0: every receiver must find log2(1 + SNR) on the full simulate/fit/rate pipeline
    cfg = ExperimentConfig(modes=2, length_km=10.0, step_km=1.0, gamma_per_w_per_km=0.0, channels=(0,),
                           train_sequences=4, test_sequences=4, train_symbols=512, test_symbols=512,
                           n_particles=64, fit_particles=32)
    worst = 0.0
    for snr_db in (5, 10, 15):
        p = snr_db + 10 * np.log10(cfg.n_ase_w_per_hz * cfg.bandwidth_ghz * 1e9) + 30
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EstimationWarning)
            res = run_pipeline(cfg.with_overrides(powers_dbm=(float(p),)))
        target = np.log2(1 + 10 ** (snr_db / 10))
        worst = max(worst, max(abs(r["rate_bits"] - target) for r in res["rates"]))
    report(1, worst < 0.05, f"largest |rate - log2(1+SNR)| = {worst:.4f} bit")


def test_criterion_2_perturbation_order():
    wdm = draw_delays(WdmSpec(channels=(0, 1)), RandomStream(2, ("delays",)))
    frame = random_frame(wdm, 2, 256, 0.0, RandomStream(2, ("symbols",)))
    u0 = modulate(frame, wdm, 8)
    cfg = SsfmConfig(step_km=0.5, noise_on=False)
    res = []
    for gamma in (1.27, 1.27 / 2):
        spec = CouplingSpec.strong(2, -21.7, gamma, 1.0, 100.0)
        lin = dispersion_only(u0, spec, spec.length_km).samples
        du = first_order_perturbation(u0, spec, cfg).samples
        res.append(np.linalg.norm(propagate(u0, spec, cfg).samples - lin - gamma * du))
    ratio = res[0] / res[1]
    report(2, 3.3 <= ratio <= 4.7, f"residual ratio {ratio:.3f} when gamma is halved")


def test_criterion_3_covariance_oracle():
    wdm = WdmSpec(channels=(-1, 0, 1))
    spec = CouplingSpec.strong(2, -21.7, 1.27, 1.0, 100.0)
    E = float(dbm_to_watts(-8.0)) * wdm.T
    energies = {c: (E, 2 * E * E) for c in wdm.interferers}
    X = compute_X(spec, wdm)
    theory = jm_covariance_structure(covariance_exact(X, energies, 3, 2), 2)
    J = sample_j_entries(X, 2, 2**17, E, RandomStream(1, ("mc",)))
    d = np.einsum("mii->mi", J).real
    acf = mc_acf((d - d.mean(axis=0)).T, [0, 1, 2])
    err = np.max(np.abs(acf / theory.diagonal_acf[:3] - 1))
    approx = covariance_approx(spec, wdm, energies, 2)
    same = np.allclose(approx.r, approx.s, rtol=1e-12)
    report(3, err < 0.05 and same, f"max ACF error {100 * err:.2f}% over lags 0..2; approx r == s: {same}")


def test_criterion_4_hidden_dimension():
    got = [hidden_dimension(S) for S in (1, 2, 3)]
    ok = all(d["rotation_phase"] == 4 * S * S and d["additive"] == 4 * S and d["total"] == 4 * S * (S + 1)
             and d["phase"] == 2 * S and d["rotation"] == 2 * S * (2 * S - 1) for S, d in zip((1, 2, 3), got))
    report(4, ok, "totals " + ", ".join(str(d["total"]) for d in got) + " for S = 1, 2, 3")


def test_criterion_5_single_mode_diagonal():
    r = np.array([0.02, 0.015, 0.01])
    p = CranParams(S=1, mu=2, mean_diag=0.0, sigma_phi2=1.0, sigma_j2=1.0, base_r=r, base_s=r, noise_acf=[1e-3])
    x = np.ones((2, 400_000), complex)
    _, hid = sample_channel(x, p, RandomStream(5, ("diag",)))
    d = np.einsum("mii->mi", hid["J"]).real
    acf = mc_acf(d.T, [0, 1, 2])
    err = np.max(np.abs(acf / (5 * r) - 1))
    report(5, err < 0.03, f"max |ACF / 5r - 1| = {100 * err:.2f}%")


def test_criterion_6_filter_oracles():
    rho, pv, s2, M = 0.95, 0.02, 0.01, 1000
    rng = np.random.default_rng(3)
    from sdmcran.cran import fit_markov

    th = fit_markov([pv, rho * pv]).simulate(M, rng)
    x = cscg(rng, M, 1.0)
    z = cscg(rng, M, s2)
    model = scalar_phase_model([pv, rho * pv], s2)
    y = np.exp(1j * th) * x + z
    grid = -grid_loglik(y, x, rho, pv, s2).mean() * L2E
    pf = -particle_loglik(y[None, None], x[None, None], model, 512, np.random.default_rng(1)).mean() * L2E
    gap = abs(pf - grid)
    yl = (1 + 1j * th) * x + z
    exact = kalman_loglik(yl, x, rho, pv, s2).sum()
    runs = [particle_loglik(yl[None, None], x[None, None], model, 512, np.random.default_rng(10 + i),
                            rotation="linear").sum() for i in range(10)]
    se = np.std(runs, ddof=1) / np.sqrt(len(runs))
    z_score = abs(np.mean(runs) - exact) / se
    report(6, gap < 0.02 and z_score < 3,
           f"grid gap {gap:.4f} bit; linear model {z_score:.2f} standard errors from Kalman")


def test_criterion_7_estimator_recovery():
    # S = 1 keeps the fit inside the time budget; the search and the statistics are the same for any S
    S, M, snr = 1, 1024, 300
    br = 3e-3 * np.array([1, 0.9, 0.8])
    truth = CranParams(S=S, mu=2, mean_diag=0.05, sigma_phi2=1.5, sigma_j2=0.6, base_r=br, base_s=br,
                       noise_acf=[1 / snr])
    st = RandomStream(7, ("t",))
    pairs = []
    for i in range(16):
        x = cscg(st.child("x", i).rng(), (2 * S, M), 1.0)
        y, _ = sample_channel(x, truth, st.child("y", i))
        pairs.append((x, y))
    train = TrainingSet(pairs, S, 2, br, br)
    s2 = estimate_sigma_z(train)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        fit = fit_scales(train, ReceiverAlgo("cran_sdm"), s2, n_particles=256, stream=st.child("f"))
    ref = conditional_entropy(train, truth.replace(mean_diag=fit.params.mean_diag), ReceiverAlgo("cran_sdm"), 256,
                              st.child("f", "hq")).bits
    e_s2 = abs(s2 * snr - 1)
    e_phi = abs(fit.params.sigma_phi2 / 1.5 - 1)
    e_j = abs(fit.params.sigma_j2 / 0.6 - 1)
    dh = abs(fit.h_q - ref)
    report(7, e_s2 < 0.02 and e_phi < 0.25 and e_j < 0.25 and dh < 0.02,
           f"sigma_Z2 {100 * e_s2:.2f}%, sigma_phi2 {100 * e_phi:.1f}%, sigma_J2 {100 * e_j:.1f}%, "
           f"h_q gap {dh:.4f} bit")


ORDER = ("cran_sdm", "cpan_2p", "cpan_1p", "memoryless_1p")


def _unimodal(v):
    i = int(np.argmax(v))
    return all(a <= b for a, b in zip(v[:i], v[1:i + 1])) and all(a >= b for a, b in zip(v[i:], v[i + 1:]))


@pytest.mark.slow
def test_criterion_8_desk_ordering():
    out = Path(os.environ.get("SDMCRAN_DESK_DIR", Path.home() / ".cache" / "sdmcran" / "desk"))
    cfg = desk_config()
    res = run_pipeline(cfg, out)
    table = {(r["algo"], r["power_dbm"]): r for r in res["rates"]}
    powers = sorted(cfg.powers_dbm)
    bad = []
    for p in powers:
        for hi, lo in zip(ORDER, ORDER[1:]):
            a, b = table[(hi, p)], table[(lo, p)]
            if a["rate_bits"] < b["rate_bits"] - np.hypot(a["mc_stderr"], b["mc_stderr"]):
                bad.append(f"{hi} < {lo} at {p:g} dBm")
    for algo in ORDER:
        if not _unimodal([table[(algo, p)]["rate_bits"] for p in powers]):
            bad.append(f"{algo} not unimodal")
    peaks = ", ".join(f"{a} {max(table[(a, p)]['rate_bits'] for p in powers):.3f}" for a in ORDER)
    report(8, not bad, "; ".join(bad) if bad else f"ordered and unimodal; peaks {peaks}")


# published peak values of the full-scale run
FULL_PEAKS = {("memoryless_1p", 1): (7.71, -10.0), ("cran_sdm", 1): (8.24, -8.0), ("cran_sdm", 4): (8.31, -8.0)}


@pytest.mark.fullscale
@pytest.mark.skipif(os.environ.get("SDMCRAN_FULLSCALE") != "1", reason="full-scale run; set SDMCRAN_FULLSCALE=1")
def test_criterion_9_full_scale():
    out = Path(os.environ.get("SDMCRAN_FULL_DIR", Path.home() / ".cache" / "sdmcran" / "full"))
    cfg = ExperimentConfig(subcarriers=(1, 4), algos=("memoryless_1p", "cran_sdm"))
    rows = run_pipeline(cfg, out, workers=os.cpu_count() or 1)["rates"]
    curve = lambda a, q: sorted((r["power_dbm"], r["rate_bits"]) for r in rows if r["algo"] == a and r["subcarriers"] == q)
    bad = []
    for (a, q), (peak, at) in FULL_PEAKS.items():
        p, v = max(curve(a, q), key=lambda t: t[1])
        if abs(v - peak) > 0.1 or p != at:
            bad.append(f"{a}/{q}: peak {v:.3f} at {p:g} dBm")
    gain = max(v for _, v in curve("cran_sdm", 1)) - max(v for _, v in curve("memoryless_1p", 1))
    if abs(gain - 0.5) > 0.1:
        bad.append(f"rate gain {gain:.3f}")
    # 4SC power gain: from the memoryless peak to the power where SDM-CRAN first reaches the same rate
    p_mem, v_mem = max(curve("memoryless_1p", 4), key=lambda t: t[1])
    pts = curve("cran_sdm", 4)
    cross = next((p0 + (v_mem - v0) / (v1 - v0) * (p1 - p0)
                  for (p0, v0), (p1, v1) in zip(pts, pts[1:]) if v0 <= v_mem <= v1), np.nan)
    dp = p_mem - cross
    if not abs(dp - 1.4) <= 0.3:
        bad.append(f"4SC power gain {dp:.2f} dB at rate {v_mem:.3f}")
    report(9, not bad, "; ".join(bad) or f"rate gain {gain:.3f}, 4SC power gain {dp:.2f} dB")
