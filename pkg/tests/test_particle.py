import numpy as np
import pytest
from scipy.integrate import quad

from sdmcran.core import RandomStream, cscg
from sdmcran.cran import CranParams, fit_markov, sample_channel
from sdmcran.errors import FilterError, RateWarning
from sdmcran.oracles import grid_loglik, kalman_loglik, linear_model_kalman_loglik
from sdmcran.particle import (ALGOS, CONTROL_MAX_INDEX, ReceiverAlgo, achievable_rate, conditional_entropy,
                              linear_kalman_loglik, linearization_index, memoryless_loglik, model_for,
                              output_entropy, particle_loglik, scalar_phase_model)

L2E = np.log2(np.e)


def awgn_params(S=2, noise=0.1):
    z = np.zeros(3)
    return CranParams(S=S, mu=2, mean_diag=0.0, sigma_phi2=0.0, sigma_j2=0.0, base_r=z, base_s=z,
                      noise_acf=[noise])


def scalar_phase_data(M=1000, rho=0.95, pv=0.02, s2=0.01, seed=3, linear=False):
    rng = np.random.default_rng(seed)
    th = fit_markov([pv, rho * pv]).simulate(M, rng)
    x = (rng.standard_normal(M) + 1j * rng.standard_normal(M)) / np.sqrt(2)
    z = (rng.standard_normal(M) + 1j * rng.standard_normal(M)) * np.sqrt(s2 / 2)
    y = ((1 + 1j * th) if linear else np.exp(1j * th)) * x + z
    return x, y


def desk_like_params():
    # two modes, weak rotations, high SNR: the regime where the plain filter drifts with N_p
    r = np.array([1.9e-5, 1.3e-5, 0.7e-5])
    return CranParams(S=2, mu=2, mean_diag=0.0, sigma_phi2=1.0, sigma_j2=1.0, base_r=r, base_s=r,
                      noise_acf=[1.24e-5], n_ase=1.18e-5)


def test_receiver_algo_grouping():
    assert [a.grouping(2) for a in ALGOS] == [1, 1, 2, 4]
    assert ReceiverAlgo("cran_sdm").grouping(3) == 6
    assert ReceiverAlgo("cran_sdm").has_rotation and not ReceiverAlgo("cpan_2p").has_rotation
    with pytest.raises(ValueError):
        ReceiverAlgo("cpan_3p")


def test_awgn_entropy_equals_same_data_closed_form():
    p = awgn_params(noise=0.1)
    rng = np.random.default_rng(0)
    pairs = []
    for i in range(3):
        x = cscg(rng, (4, 200), 1.0)
        pairs.append((x, x + cscg(rng, (4, 200), 0.1)))
    # edge symbols are dropped; the density is exact, so the filter must reproduce it to rounding
    oracle = np.mean([np.sum(np.log(np.pi * 0.1) + np.abs(y - x)[:, 1:-1] ** 2 / 0.1) * L2E / 198
                      for x, y in pairs])
    for algo in ALGOS:
        est = conditional_entropy(pairs, p, algo, 16, RandomStream(1))
        assert est.bits == pytest.approx(oracle, abs=1e-9), algo.kind


def test_output_entropy():
    p = awgn_params(S=2, noise=1.0)
    assert output_entropy(p) == pytest.approx(4 * np.log2(np.pi * np.e))
    assert output_entropy(awgn_params(S=1, noise=0.5), energy=1.5) == pytest.approx(2 * np.log2(2 * np.pi * np.e))
    # Monte-Carlo: -E log2 of the CSCG density of the output
    v = 2.0 + 0.1
    y = cscg(np.random.default_rng(1), (4, 200_000), v)
    mc = np.mean(np.sum(np.log(np.pi * v) + np.abs(y) ** 2 / v, axis=0)) * L2E
    # per-vector spread is 2 log2(e) bits, so the standard error is 0.0065
    assert output_entropy(awgn_params(noise=0.1), energy=2.0) == pytest.approx(mc, abs=0.035)


def test_awgn_rate_at_10db():
    p = awgn_params(S=1, noise=0.1)
    rng = np.random.default_rng(2)
    pairs = []
    for _ in range(4):
        x = cscg(rng, (2, 4000), 1.0)
        pairs.append((x, x + cscg(rng, (2, 4000), 0.1)))
    res = achievable_rate(pairs, p, ReceiverAlgo("cpan_1p"), 1.0, 8, RandomStream(3))
    assert res.rate == pytest.approx(np.log2(11), abs=0.02)
    assert res.n_sequences == 4


def test_particle_filter_matches_grid_oracle():
    rho, pv, s2 = 0.95, 0.02, 0.01
    x, y = scalar_phase_data(rho=rho, pv=pv, s2=s2)
    grid = -grid_loglik(y, x, rho, pv, s2).mean() * L2E
    ll = particle_loglik(y[None, None], x[None, None], scalar_phase_model([pv, rho * pv], s2), 512,
                         np.random.default_rng(1))
    assert -ll.mean() * L2E == pytest.approx(grid, abs=0.005)


def test_particle_filter_matches_kalman_on_linear_model():
    rho, pv, s2 = 0.95, 0.02, 0.01
    x, y = scalar_phase_data(rho=rho, pv=pv, s2=s2, linear=True)
    exact = kalman_loglik(y, x, rho, pv, s2).sum()
    ll = particle_loglik(y[None, None], x[None, None], scalar_phase_model([pv, rho * pv], s2), 512,
                         np.random.default_rng(4), rotation="linear")
    # the run-to-run spread of the total is about 0.7 nats
    assert ll.sum() == pytest.approx(exact, abs=3.0)


def test_linear_kalman_scalar_and_batched_agree_with_oracles():
    rho, pv, s2 = 0.9, 0.05, 0.02
    x, y = scalar_phase_data(M=300, rho=rho, pv=pv, s2=s2, linear=True)
    m = scalar_phase_model([pv, rho * pv], s2)
    np.testing.assert_allclose(linear_kalman_loglik(y[None, None], x[None, None], m)[0],
                               kalman_loglik(y, x, rho, pv, s2), atol=1e-9)
    # full model, S = 1 (two channels, one complex off-diagonal process), memory 2
    r = np.array([0.02, 0.015, 0.008])
    p = CranParams(S=1, mu=2, mean_diag=0.0, sigma_phi2=1.0, sigma_j2=0.7, base_r=r, base_s=r, noise_acf=[0.05])
    model = model_for(p, ReceiverAlgo("cran_sdm"))
    rng = np.random.default_rng(5)
    xs = cscg(rng, (3, 2, 60), 1.0)
    ys = xs + cscg(rng, (3, 2, 60), 0.3)
    got = linear_kalman_loglik(ys, xs, model)
    for b in range(3):
        np.testing.assert_allclose(got[b], linear_model_kalman_loglik(ys[b], xs[b], model), atol=1e-9)


def test_companion_estimates_share_particles():
    x, y = scalar_phase_data(M=200)
    m = scalar_phase_model([0.02, 0.019], 0.01)
    a, b = particle_loglik(y[None, None], x[None, None], m, 64, np.random.default_rng(0), companion=True)
    plain = particle_loglik(y[None, None], x[None, None], m, 64, np.random.default_rng(0))
    np.testing.assert_allclose(a, plain)
    assert a.shape == b.shape == (1, 200)
    with pytest.raises(ValueError):
        particle_loglik(y[None, None], x[None, None], m, 64, np.random.default_rng(0), rotation="linear",
                        companion=True)


def test_linearization_index():
    m = scalar_phase_model([0.05, 0.04], 0.1)
    x = np.full((1, 1, 10), 2.0 + 0j)
    assert linearization_index(m, x) == pytest.approx(0.05**2 * 4 / 0.4)
    p = desk_like_params()
    full = model_for(p, ReceiverAlgo("cran_sdm"))
    x = np.ones((1, 4, 5), complex)
    # diag(J) variance 7 r0 per entry, plus 3 off-diagonal entries of variance r0 in a row
    lam = 7 * p.base_r[0] + 3 * p.base_r[0]
    assert linearization_index(full, x) == pytest.approx(lam**2 / (4 * 1.24e-5))


def synthetic_full_model_pairs(p, n=4, M=512, power_w=10**-0.8 * 1e-3):
    E = power_w * 20.0
    pairs = []
    for i in range(n):
        x = cscg(np.random.default_rng(i), (4, M), E)
        y, _ = sample_channel(x, p, RandomStream(1, ("syn", i)))
        pairs.append((x, y))
    return pairs


@pytest.mark.slow
def test_particle_count_doubling_changes_little():
    p = desk_like_params()
    pairs = synthetic_full_model_pairs(p)
    algo = ReceiverAlgo("cran_sdm")
    a = conditional_entropy(pairs, p, algo, 256, RandomStream(5, (256,)))
    b = conditional_entropy(pairs, p, algo, 512, RandomStream(5, (512,)))
    assert a.method == b.method == "control"
    assert abs(a.bits - b.bits) < 0.01


def test_estimator_choice():
    p = desk_like_params()
    pairs = synthetic_full_model_pairs(p, n=2, M=64)
    est = lambda algo, **kw: conditional_entropy(pairs, p, ReceiverAlgo(algo), 32, RandomStream(0), **kw)
    assert est("cran_sdm").method == "control"
    assert est("cran_sdm", rotation="linear").method == "plain"
    assert est("cpan_2p").method == "plain"
    assert est("memoryless_1p").method == "quadrature"
    big = p.replace(sigma_phi2=300.0, sigma_j2=300.0)
    xb = np.stack([x for x, _ in pairs]).reshape(-1, 4, 64)
    assert linearization_index(model_for(big, ReceiverAlgo("cran_sdm")), xb) > CONTROL_MAX_INDEX
    assert conditional_entropy(pairs, big, ReceiverAlgo("cran_sdm"), 32, RandomStream(0)).method == "plain"
    with pytest.raises(ValueError):
        est("cran_sdm", estimator="both")
    with pytest.raises(ValueError):
        est("cran_sdm", estimator="control", rotation="linear")


def test_resampling_threshold_does_not_bias():
    x, y = scalar_phase_data(M=1000)
    m = scalar_phase_model([0.02, 0.019], 0.01)
    h = [-particle_loglik(y[None, None], x[None, None], m, 512, np.random.default_rng(7), thr).mean() * L2E
         for thr in (0.5, 1.0)]
    assert abs(h[0] - h[1]) < 0.01


def test_filter_error_reports_symbol():
    x, y = scalar_phase_data(M=20)
    y = y.copy()
    y[7] = 1e200
    with np.errstate(all="ignore"), pytest.raises(FilterError) as info:
        particle_loglik(y[None, None], x[None, None], scalar_phase_model([0.02, 0.019], 0.01), 32,
                        np.random.default_rng(0))
    assert info.value.symbol_index == 7
    with pytest.raises(FilterError):
        particle_loglik(y[None, None], x[None, None], scalar_phase_model([0.02, 0.019], 0.0), 32,
                        np.random.default_rng(0))


def test_ensembles_and_resampling():
    x, y = scalar_phase_data(M=50)
    m = scalar_phase_model([0.02, 0.019, 0.017], 0.01)
    _, ens = particle_loglik(y[None, None], x[None, None], m, 128, np.random.default_rng(0),
                             return_ensembles=True)
    e = ens[0]
    assert e.count == 128 and e.windows.shape == (128, 1, 2)
    assert 1.0 <= e.ess <= 128 + 1e-9
    assert e.weights.sum() == pytest.approx(1.0)
    r = e.resample(np.random.default_rng(1))
    np.testing.assert_allclose(r.weights, 1 / 128)
    assert r.ess == pytest.approx(128)
    # every resampled window is one of the originals
    orig = {tuple(w.ravel()) for w in e.windows}
    assert all(tuple(w.ravel()) in orig for w in r.windows)


def test_memoryless_matches_quadrature():
    rng = np.random.default_rng(8)
    x = cscg(rng, 6, 1.0)
    y = x * np.exp(1j * rng.normal(0, 0.3, 6)) + cscg(rng, 6, 0.05)
    got = memoryless_loglik(y, x, 0.09, 0.05)
    for k in range(6):
        f = lambda t: (np.exp(-t * t / 0.18) / np.sqrt(2 * np.pi * 0.09)
                       * np.exp(-abs(y[k] - x[k] * np.exp(1j * t)) ** 2 / 0.05) / (np.pi * 0.05))
        assert got[k] == pytest.approx(np.log(quad(f, -3, 3, limit=200)[0]), abs=1e-6)
    np.testing.assert_allclose(memoryless_loglik(y, x, 0.0, 0.05),
                               -np.log(np.pi * 0.05) - np.abs(y - x) ** 2 / 0.05)


def test_negative_rate_warns():
    p = awgn_params(S=1, noise=0.01)
    rng = np.random.default_rng(9)
    x = cscg(rng, (2, 300), 1.0)
    pairs = [(x, x + cscg(rng, (2, 300), 1.0))]  # model noise far below the real noise
    with pytest.warns(RateWarning):
        res = achievable_rate(pairs, p, ReceiverAlgo("cpan_1p"), 1.0, 8, RandomStream(0))
    assert res.rate < 0


def test_row_count_checked():
    p = awgn_params(S=2)
    x = np.zeros((2, 10), complex)
    with pytest.raises(ValueError):
        conditional_entropy([(x, x)], p, ReceiverAlgo("cpan_1p"), 8)
