import numpy as np
import pytest
import scipy.stats
from numpy.testing import assert_allclose
from scipy.stats import qmc

from ldaf import _kernels_py
from ldaf._backend import active, active_name
from ldaf.manifold import basis_embed
from ldaf.pushforward import MarginalMoments
from ldaf.quadrature import (
    LossKind,
    expected_risk,
    expected_risk_grad,
    expected_risk_per_datum,
    gauss_icdf,
    mc_expected_risk,
    resolve_threads,
    sobol_points,
    standardized_logits,
)

from oracles import binary_zero_one_risk, normal_cdf


def make_moments(rng, c, spread=1.0, shift_scale=1.0):
    mean = rng.standard_normal(c - 1)
    a = rng.standard_normal((c - 1, c - 1))
    cov = a @ a.T + 0.05 * np.eye(c - 1)
    cov *= spread
    return MarginalMoments(
        mean_hat=mean,
        cov_hat=cov,
        chol=np.linalg.cholesky(cov),
        logits_shift=shift_scale * basis_embed(rng.standard_normal(c - 1)),
    )


def test_sobol_first_points():
    assert_allclose(sobol_points(1, 3).ravel(), [0.5, 0.75, 0.25], rtol=0)
    assert_allclose(sobol_points(2, 1)[0], [0.5, 0.5], rtol=0)


def test_sobol_matches_scipy():
    for dim in (1, 2, 5, 16):
        # power-of-two draw, then drop the all-zeros index-0 point
        want = qmc.Sobol(dim, scramble=False).random(256)[1:129]
        got = sobol_points(dim, 128)
        assert_allclose(got, want, rtol=0, atol=0)


def test_sobol_shift_and_range():
    pts = sobol_points(3, 1000, seed_shift=7)
    assert pts.shape == (1000, 3)
    assert pts.min() > 0.0 and pts.max() < 1.0
    again = sobol_points(3, 1000, seed_shift=7)
    assert np.array_equal(pts, again)
    other = sobol_points(3, 1000, seed_shift=8)
    assert not np.array_equal(pts, other)


def test_sobol_beats_uniform_on_product():
    # empirical integration of f(z) = z1*z2 against the exact 1/4
    pts = sobol_points(2, 1024)
    qmc_err = abs(np.mean(pts[:, 0] * pts[:, 1]) - 0.25)
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        u = rng.random((1024, 2))
        mc_err = abs(np.mean(u[:, 0] * u[:, 1]) - 0.25)
        wins += int(qmc_err < mc_err)
    assert wins >= 18


def test_gauss_icdf_values():
    assert gauss_icdf(0.5) == 0.0
    assert abs(gauss_icdf(0.975) - 1.959964) < 1e-6
    grid = np.linspace(1e-9, 1.0 - 1e-9, 20001)
    z = gauss_icdf(grid)
    # round trip through a high-precision normal CDF
    back = scipy.stats.norm.cdf(z)
    assert np.abs(back - grid).max() <= 1e-12
    for bad in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            gauss_icdf(bad)


def test_standardized_logits_mean_point():
    rng = np.random.default_rng(0)
    mom = make_moments(rng, c=4)
    u = np.full(3, 0.5)
    want = basis_embed(mom.mean_hat) + mom.logits_shift
    assert_allclose(standardized_logits(mom, u), want, rtol=1e-12)
    # logits live in shift + zero-sum space
    got = standardized_logits(mom, rng.random(3))
    assert abs((got - mom.logits_shift).sum()) < 1e-10


def test_standardized_logits_zero_cov_constant():
    rng = np.random.default_rng(1)
    mom = make_moments(rng, c=3)
    frozen = MarginalMoments(
        mean_hat=mom.mean_hat,
        cov_hat=np.zeros((2, 2)),
        chol=np.zeros((2, 2)),
        logits_shift=mom.logits_shift,
    )
    ref = standardized_logits(frozen, np.array([0.3, 0.9]))
    for _ in range(5):
        here = standardized_logits(frozen, rng.random(2))
        assert_allclose(here, ref, rtol=0, atol=0)


def test_zero_one_exact_for_separated_mean():
    # vanishingly small covariance, mean argmax equals the label
    mom = MarginalMoments(
        mean_hat=np.array([3.0]),
        cov_hat=np.array([[1e-20]]),
        chol=np.array([[1e-10]]),
        logits_shift=np.zeros(2),
    )
    est = expected_risk([mom], np.array([0]), LossKind.ZERO_ONE, 256)
    assert est.value == 0.0
    flipped = expected_risk([mom], np.array([1]), LossKind.ZERO_ONE, 256)
    assert flipped.value == 1.0


def test_binary_zero_one_matches_closed_form():
    # one-dimensional 01 risk is a step integrand: with 2^13 points the
    # counting error is bounded by 2^-13 per instance and averages half
    # that, so the mean error sits below 1e-4
    rng = np.random.default_rng(2)
    errs = []
    for _ in range(40):
        mom = make_moments(rng, c=2)
        label = int(rng.integers(2))
        est = expected_risk([mom], np.array([label]), LossKind.ZERO_ONE, 2**13)
        want = binary_zero_one_risk(mom, label)
        errs.append(abs(est.value - want))
    assert max(errs) <= 2.0**-13 + 1e-6
    assert np.mean(errs) <= 1e-4


def test_cross_entropy_qmc_vs_large_mc():
    rng = np.random.default_rng(3)
    moms = [make_moments(rng, c=3) for _ in range(4)]
    labels = rng.integers(0, 3, size=4)
    qmc_est = expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 2**13)
    n_mc = 10**6
    mc_est = mc_expected_risk(moms, labels, LossKind.CROSS_ENTROPY, n_mc, rng_seed=5)
    # spread of the integrand for the standard error scale
    per = expected_risk_per_datum(moms, labels, LossKind.CROSS_ENTROPY, 2**13)
    reps = np.array([
        mc_expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 4096, rng_seed=s).value
        for s in range(16)
    ])
    se = reps.std(ddof=1) * np.sqrt(4096.0 / n_mc)
    assert abs(qmc_est.value - mc_est.value) <= 3.0 * se + 1e-9
    assert per.shape == (4,)


def test_zero_one_risk_within_unit_interval():
    rng = np.random.default_rng(4)
    for trial in range(10):
        c = int(rng.integers(2, 6))
        moms = [make_moments(rng, c=c, spread=10.0 ** rng.integers(-2, 3))]
        label = np.array([int(rng.integers(c))])
        est = expected_risk(moms, label, LossKind.ZERO_ONE, 512)
        assert 0.0 <= est.value <= 1.0


def test_qmc_determinism():
    rng = np.random.default_rng(5)
    moms = [make_moments(rng, c=3) for _ in range(3)]
    labels = np.array([0, 1, 2])
    a = expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 1024)
    b = expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 1024)
    assert a.value == b.value
    # thread fan-out must not change the reduction
    t1 = expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 1024, threads=1)
    t4 = expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 1024, threads=4)
    assert t1.value == t4.value == a.value


def test_error_estimate_replicates():
    rng = np.random.default_rng(6)
    moms = [make_moments(rng, c=3)]
    labels = np.array([1])
    plain = expected_risk(moms, labels, LossKind.CROSS_ENTROPY, 2048)
    est = expected_risk(
        moms, labels, LossKind.CROSS_ENTROPY, 2048, with_error_estimate=True
    )
    assert est.value == plain.value
    assert est.error_estimate is not None and est.error_estimate >= 0.0
    assert est.error_estimate < 0.05


def test_mc_seeded_determinism_and_consistency():
    rng = np.random.default_rng(7)
    mom = make_moments(rng, c=2)
    label = np.array([0])
    a = mc_expected_risk([mom], label, LossKind.ZERO_ONE, 4096, rng_seed=42)
    b = mc_expected_risk([mom], label, LossKind.ZERO_ONE, 4096, rng_seed=42)
    assert a.value == b.value
    want = binary_zero_one_risk(mom, 0)
    big = mc_expected_risk([mom], label, LossKind.ZERO_ONE, 10**6, rng_seed=1)
    se = np.sqrt(max(want * (1 - want), 1e-12) / 10**6)
    assert abs(big.value - want) <= 4.0 * se + 1e-6


def test_mc_variance_scaling():
    rng = np.random.default_rng(8)
    moms = [make_moments(rng, c=3)]
    labels = np.array([2])
    counts = [2**6, 2**8, 2**10, 2**12, 2**14]
    stds = []
    for n in counts:
        reps = np.array([
            mc_expected_risk(
                moms, labels, LossKind.CROSS_ENTROPY, n, rng_seed=100 * n + s
            ).value
            for s in range(48)
        ])
        stds.append(reps.std(ddof=1))
    slope = np.polyfit(np.log(counts), np.log(stds), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_grad_rejects_zero_one():
    rng = np.random.default_rng(9)
    moms = [make_moments(rng, c=3)]
    with pytest.raises(ValueError):
        expected_risk_grad(moms, np.array([0]), LossKind.ZERO_ONE, 64)


def test_grad_zero_upstream():
    rng = np.random.default_rng(10)
    moms = [make_moments(rng, c=3)]
    grads = expected_risk_grad(
        moms, np.array([1]), LossKind.CROSS_ENTROPY, 64, upstream=0.0
    )
    for gm, gc, gs in grads:
        assert not gm.any() and not gc.any() and not gs.any()


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    mom = make_moments(rng, c=3)
    label = np.array([1])
    pts = sobol_points(2, 256)

    def risk_of(mean, chol, shift):
        m2 = MarginalMoments(
            mean_hat=mean, cov_hat=chol @ chol.T, chol=chol, logits_shift=shift
        )
        return expected_risk(
            [m2], label, LossKind.CROSS_ENTROPY, 256, points=pts
        ).value

    (gm, gc, gs), = expected_risk_grad(
        [mom], label, LossKind.CROSS_ENTROPY, 256, points=pts
    )
    h = 1e-6
    for idx in range(2):
        e = np.zeros(2)
        e[idx] = h
        fd = (
            risk_of(mom.mean_hat + e, mom.chol, mom.logits_shift)
            - risk_of(mom.mean_hat - e, mom.chol, mom.logits_shift)
        ) / (2 * h)
        assert abs(fd - gm[idx]) <= 1e-4 * max(1.0, abs(fd))
    for i in range(2):
        for j in range(i + 1):
            e = np.zeros((2, 2))
            e[i, j] = h
            fd = (
                risk_of(mom.mean_hat, mom.chol + e, mom.logits_shift)
                - risk_of(mom.mean_hat, mom.chol - e, mom.logits_shift)
            ) / (2 * h)
            assert abs(fd - gc[i, j]) <= 1e-4 * max(1.0, abs(fd))
    for idx in range(3):
        e = np.zeros(3)
        e[idx] = h
        fd = (
            risk_of(mom.mean_hat, mom.chol, mom.logits_shift + e)
            - risk_of(mom.mean_hat, mom.chol, mom.logits_shift - e)
        ) / (2 * h)
        assert abs(fd - gs[idx]) <= 1e-4 * max(1.0, abs(fd))


def test_binary_margin_gradient_analytic():
    # smooth closed form in one dimension: d/dmu E[softplus margin]
    # cross-entropy for c=2 is softplus of the signed logit gap
    mu, sigma = 0.4, 0.8
    mom = MarginalMoments(
        mean_hat=np.array([mu]),
        cov_hat=np.array([[sigma**2]]),
        chol=np.array([[sigma]]),
        logits_shift=np.zeros(2),
    )
    pts = sobol_points(1, 2**14)
    (gm, _, _), = expected_risk_grad(
        [mom], np.array([0]), LossKind.CROSS_ENTROPY, 2**14, points=pts
    )
    # E[l] = E[log(1+exp(-2(mu+sigma z)))]; dE/dmu = E[-2 sigmoid(-2 x)]
    z = gauss_icdf(pts[:, 0])
    x = mu + sigma * z
    want = np.mean(-2.0 / (1.0 + np.exp(2.0 * x)))
    assert abs(gm[0] - want) < 1e-10


def test_commutation_sum_of_gradients():
    # gradient of the QMC sum equals the QMC sum of per-point gradients
    # computed one point at a time, bit for bit
    rng = np.random.default_rng(12)
    moms = [make_moments(rng, c=3) for _ in range(3)]
    labels = np.array([0, 2, 1])
    n = 64
    m = len(moms)
    pts = sobol_points(2, n)
    # upstream m*n cancels the built-in 1/(m*n), leaving the raw sums
    whole = expected_risk_grad(
        moms, labels, LossKind.CROSS_ENTROPY, n, points=pts,
        upstream=float(m * n),
    )
    for i in range(m):
        acc = None
        for j in range(n):
            (gm, gc, gs), = expected_risk_grad(
                [moms[i]],
                labels[i : i + 1],
                LossKind.CROSS_ENTROPY,
                1,
                points=pts[j : j + 1],
                upstream=1.0,
            )
            term = (gm, gc, gs)
            acc = term if acc is None else tuple(a + t for a, t in zip(acc, term))
        for got, part in zip(whole[i], acc):
            assert np.array_equal(got, part)


def test_backend_parity():
    compiled = pytest.importorskip("ldaf._kernels")
    rng = np.random.default_rng(13)
    u = rng.random(4096)
    assert_allclose(
        compiled.gauss_icdf(u), _kernels_py.gauss_icdf(u), atol=1e-14
    )
    z = rng.standard_normal((512, 2))
    mean = rng.standard_normal(2)
    a = rng.standard_normal((2, 2))
    chol = np.linalg.cholesky(a @ a.T + 0.1 * np.eye(2))
    shift = basis_embed(rng.standard_normal(2))
    for kern in ("zero_one_risk", "cross_entropy_risk"):
        vc = getattr(compiled, kern)(z, mean, chol, shift, 1)
        vp = getattr(_kernels_py, kern)(z, mean, chol, shift, 1)
        assert abs(vc - vp) < 1e-12
    gc_ = compiled.cross_entropy_grad(z, mean, chol, shift, 1)
    gp = _kernels_py.cross_entropy_grad(z, mean, chol, shift, 1)
    for a_, b_ in zip(gc_, gp):
        assert_allclose(a_, b_, atol=1e-12)


def test_resolve_threads(monkeypatch):
    assert resolve_threads(3) == 3
    monkeypatch.setenv("LDAF_THREADS", "2")
    assert resolve_threads(None) == 2
    monkeypatch.delenv("LDAF_THREADS")
    assert resolve_threads(None) >= 1
    with pytest.raises(ValueError):
        resolve_threads(0)
    assert active_name() in ("compiled", "pure-python")
    assert active() is not None
