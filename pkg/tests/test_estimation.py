import warnings

import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.stats import ncx2, unitary_group

from sdmcran.core import RandomStream, cscg
from sdmcran.cran import CranParams, sample_channel
from sdmcran.errors import EstimationError, EstimationWarning
from sdmcran.estimation import (TrainingSet, estimate_mean_phase, estimate_sigma_z, filtered_noise_var, fit_all,
                                fit_scales, norm_ml_variance)
from sdmcran.particle import ReceiverAlgo


def rotated_pairs(n=3, D=4, M=2000, s2=0.05, seed=0):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for _ in range(n):
        x = cscg(rng, (D, M), 1.0)
        U = unitary_group.rvs(D, size=M, random_state=rng)  # a fresh rotation per symbol
        ys.append(np.einsum("mij,jm->im", U, x) + cscg(rng, (D, M), s2))
        xs.append(x)
    return np.array(xs), np.array(ys)


def test_norm_ml_variance_is_blind_to_rotation():
    xs, ys = rotated_pairs(s2=0.05)
    # seed-to-seed spread of this estimate is 1.5% (20 seeds, mean 0.0501)
    assert norm_ml_variance(xs, ys) == pytest.approx(0.05, rel=0.05)


def test_norm_ml_variance_matches_noncentral_chi2_oracle():
    xs, ys = rotated_pairs(n=1, D=2, M=500, s2=0.2, seed=1)
    nx2 = np.sum(np.abs(xs[0]) ** 2, axis=0)
    ny2 = np.sum(np.abs(ys[0]) ** 2, axis=0)

    def nll(log_s2):
        s2 = np.exp(log_s2)
        return -np.sum(ncx2.logpdf(2 * ny2 / s2, 4, 2 * nx2 / s2) + np.log(2 / s2))

    oracle = np.exp(minimize_scalar(nll, bounds=(np.log(1e-3), np.log(10.0)), method="bounded",
                                    options={"xatol": 1e-9}).x)
    assert norm_ml_variance(xs, ys) == pytest.approx(oracle, rel=1e-5)


def test_norm_ml_variance_edge_cases():
    x = cscg(np.random.default_rng(2), (1, 4, 100), 1.0)
    with pytest.warns(EstimationWarning):
        v = norm_ml_variance(x, x)
    assert v < 1e-6
    with pytest.raises(EstimationError):
        norm_ml_variance(np.zeros((4, 10)), np.ones((4, 10)))


def params(S=1, sphi=1.0, sj=0.0, noise=0.01, mean=0.0, r=(0.01, 0.009, 0.008)):
    return CranParams(S=S, mu=2, mean_diag=mean, sigma_phi2=sphi, sigma_j2=sj, base_r=list(r), base_s=list(r),
                      noise_acf=[noise])


def training(p, n=2, M=256, seed=0, E=1.0):
    pairs = []
    for i in range(n):
        x = cscg(np.random.default_rng([seed, i]), (2 * p.S, M), E)
        y, _ = sample_channel(x, p, RandomStream(seed, ("train", i)))
        pairs.append((x, y))
    return TrainingSet(pairs, p.S, p.mu, p.base_r, p.base_s)


def test_training_set_validation_and_digest():
    t = training(params(), n=2, M=16)
    assert t.n_symbols == 16 and len(t.digest()) == 16
    assert t.digest() == training(params(), n=2, M=16).digest()
    assert t.digest() != training(params(), n=2, M=16, seed=1).digest()
    x = np.zeros((2, 8), complex)
    with pytest.raises(EstimationError):
        TrainingSet([], 1, 2, [1, 1, 1], [1, 1, 1])
    with pytest.raises(EstimationError):
        TrainingSet([(x, x), (x[:, :4], x[:, :4])], 1, 2, [1, 1, 1], [1, 1, 1])
    with pytest.raises(EstimationError):
        TrainingSet([(x, x)], 2, 2, [1, 1, 1], [1, 1, 1])
    with pytest.raises(EstimationError):
        TrainingSet([(x, x)], 1, 2, [1, 1], [1, 1, 1])


def test_sigma_z_with_rotation_and_grouping():
    t = training(params(S=2, sphi=1.0, sj=1.0, noise=0.02, r=(0.02, 0.018, 0.016)), n=2, M=2000)
    assert estimate_sigma_z(t) == pytest.approx(0.02, rel=0.04)
    # per-channel norms see the crosstalk from the other modes as extra noise
    assert estimate_sigma_z(t, group=1) > 1.5 * estimate_sigma_z(t)
    with pytest.raises(EstimationError):
        estimate_sigma_z(t, group=3)


def test_mean_phase():
    mean = np.array([0.3, -0.2])
    t = training(params(sphi=0.0, mean=mean), n=2, M=500)
    np.testing.assert_allclose(estimate_mean_phase(t), mean, atol=0.02)
    noisy = training(params(sphi=0.0, noise=1e4), n=1, M=500)
    with pytest.warns(EstimationWarning):
        estimate_mean_phase(noisy)
    z = np.zeros((2, 10), complex)
    with pytest.raises(EstimationError):
        estimate_mean_phase(TrainingSet([(z, z)], 1, 2, [1, 1, 1], [1, 1, 1]))


def test_filtered_noise_var_without_tap_uses_trimmed_data():
    t = training(params(sphi=0.0, noise=0.03, mean=0.1), n=2, M=400)
    xs, ys = t.stacked()
    direct = norm_ml_variance(xs[..., 1:-1], ys[..., 1:-1] * np.exp(-0.1j))
    assert filtered_noise_var(t, np.full(2, 0.1), 0.0) == pytest.approx(direct, rel=1e-9)
    # white noise through a unit-energy FIR filter keeps its variance
    assert filtered_noise_var(t, np.full(2, 0.1), 0.2) == pytest.approx(0.03, rel=0.1)


@pytest.mark.slow
def test_fit_recovers_phase_scale():
    # sigma_phi2 = 1 generates the data; the coarse-then-fine search should land within a fine step or two
    t = training(params(sphi=1.0, noise=0.01), n=2, M=300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        fit = fit_scales(t, ReceiverAlgo("cpan_1p"), n_particles=64, stream=RandomStream(1), fit_tap=False)
    assert 10**-0.5 <= fit.params.sigma_phi2 <= 10**0.5
    assert fit.certificate["is_minimum"]
    assert fit.certificate["n_points"] == len(fit.surface)
    assert fit.h_q == min(s["h_q_bits"] for s in fit.surface)
    assert fit.provenance["data_hash"] == t.digest()
    # no phase noise in the data: zero or the smallest scale wins
    quiet = training(params(sphi=0.0, noise=0.01), n=2, M=300, seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        fit0 = fit_scales(quiet, ReceiverAlgo("cpan_1p"), n_particles=64, stream=RandomStream(1), fit_tap=False)
    assert fit0.params.sigma_phi2 <= 0.1


def test_fit_all_and_result_json():
    t = training(params(sphi=1.0), n=1, M=64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EstimationWarning)
        fits = fit_all(t, [ReceiverAlgo("memoryless_1p"), ReceiverAlgo("cpan_1p")], 16, RandomStream(2),
                       fit_tap=False)
    assert set(fits) == {"memoryless_1p", "cpan_1p"}
    assert fits["cpan_1p"].params.algo == "cpan_1p"
    back = CranParams.from_dict(fits["cpan_1p"].to_dict()["params"])
    assert back.sigma_phi2 == fits["cpan_1p"].params.sigma_phi2
    assert '"certificate"' in fits["cpan_1p"].to_json()
