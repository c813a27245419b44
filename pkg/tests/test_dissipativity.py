import numpy as np
import pytest

from mgcodesign import dissipativity as diss
from mgcodesign.errors import (
    NonPositiveGammaError,
    OutputPenaltyNotNegativeError,
    SupplyRateError,
)


def freq_response_real_min(A, B, C, D, n_points=2000):
    """Sampled positive-realness oracle: min Re G(jw) over a log grid."""
    A, B, C, D = (np.atleast_2d(m) for m in (A, B, C, D))
    n = A.shape[0]
    worst = np.inf
    for w in np.logspace(-3, 6, n_points):
        G = C @ np.linalg.solve(1j * w * np.eye(n) - A, B) + D
        worst = min(worst, G.real[0, 0])
    return worst


def random_stable_siso(rng, n):
    A = rng.normal(size=(n, n))
    # shift to Hurwitz
    shift = max(np.linalg.eigvals(A).real.max(), 0.0) + rng.uniform(0.2, 2.0)
    A -= shift * np.eye(n)
    B = rng.normal(size=(n, 1))
    C = rng.normal(size=(1, n))
    return A, B, C, np.zeros((1, 1))


class TestSupplyRates:
    def test_passive_blocks(self):
        X = diss.make_supply_rate("passive", dim=1)
        np.testing.assert_array_equal(X.full(), [[0.0, 0.5], [0.5, 0.0]])

    def test_ifofp_blocks(self):
        X = diss.make_supply_rate("ifofp", dim=1, nu=-1.0, rho=0.5)
        np.testing.assert_array_equal(X.full(), [[1.0, 0.5], [0.5, -0.5]])

    def test_l2gain_blocks(self):
        X = diss.make_supply_rate("l2gain", dim=1, gamma=2.0)
        np.testing.assert_array_equal(X.full(), [[4.0, 0.0], [0.0, -1.0]])

    def test_nonpositive_gamma(self):
        with pytest.raises(NonPositiveGammaError):
            diss.l2gain(0.0)

    def test_asymmetric_rejected(self):
        with pytest.raises(SupplyRateError):
            diss.SupplyRate(
                uu=np.zeros((1, 1)), uy=np.array([[0.5]]),
                yu=np.array([[0.3]]), yy=np.zeros((1, 1)),
            )


class TestCheckXeid:
    def test_passive_feasible(self):
        cert = diss.check_xeid(-1.0, 1.0, 1.0, 0.0, diss.passive(1))
        assert cert is not None
        # P = 0.5 is the unique storage here
        np.testing.assert_allclose(cert.P[0, 0], 0.5, atol=1e-5)
        assert cert.residual >= -1e-7

    def test_ifofp_feasible(self):
        X = diss.ifofp(-1.0, 0.5, 1)
        cert = diss.check_xeid(-1.0, 1.0, 1.0, 0.0, X)
        assert cert is not None
        # oracle: at P=0.5 the dissipation matrix is diag(0.5, 1)
        M = diss.dissipation_matrix(-1.0, 1.0, 1.0, 0.0, X, 0.5)
        np.testing.assert_allclose(M, np.diag([0.5, 1.0]), atol=1e-12)

    def test_unstable_infeasible(self):
        X = diss.ifofp(-1.0, 0.5, 1)
        cert = diss.check_xeid(1.0, 1.0, 1.0, 0.0, X)
        assert cert is None

    def test_feedthrough_supported(self):
        # static system y = u: passive with any P
        cert = diss.check_xeid(-1.0, 0.0, 0.0, 1.0, diss.passive(1))
        assert cert is not None

    def test_frequency_oracle_agreement_sample(self):
        rng = np.random.default_rng(20240811)
        agree = 0
        for _ in range(25):
            A, B, C, D = random_stable_siso(rng, rng.integers(2, 5))
            sampled = freq_response_real_min(A, B, C, D, n_points=400)
            cert = diss.check_xeid(A, B, C, D, diss.passive(1))
            assert (cert is not None) == (sampled >= -1e-6)
            agree += 1
        assert agree == 25

    def test_monotone_in_indices(self):
        rng = np.random.default_rng(3)
        found = 0
        while found < 5:
            A, B, C, D = random_stable_siso(rng, 3)
            cert = diss.check_xeid(A, B, C, D, diss.ifofp(-1.0, 0.1, 1))
            if cert is None:
                continue
            found += 1
            weaker = diss.check_xeid(A, B, C, D, diss.ifofp(-2.0, 0.05, 1))
            assert weaker is not None


class TestSynthLocalXeid:
    def test_reference_instance(self):
        X = diss.ifofp(-1.0, 1.0, 1)
        res = diss.synth_local_xeid(0.0, 1.0, X)
        assert res is not None
        assert res.residual >= -1e-9
        # the known hand point (P=1, K=-2) also satisfies the same LMI
        P, K = 1.0, -2.0
        M = np.array(
            [
                [1.0, P, 0.0],
                [P, -2 * (0.0 * P + 1.0 * K), -1.0 + 0.5 * P],
                [0.0, -1.0 + 0.5 * P, 1.0],
            ]
        )
        minors = [M[0, 0], np.linalg.det(M[:2, :2]), np.linalg.det(M)]
        np.testing.assert_allclose(minors, [1.0, 3.0, 2.75], atol=1e-12)
        assert np.linalg.eigvalsh(M)[0] >= 0.0

    def test_l2gain_admissible(self):
        res = diss.synth_local_xeid(0.0, 1.0, diss.l2gain(2.0, 1))
        assert res is not None

    def test_passive_rejected(self):
        with pytest.raises(OutputPenaltyNotNegativeError):
            diss.synth_local_xeid(0.0, 1.0, diss.passive(1))

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        successes = 0
        for _ in range(8):
            n = int(rng.integers(1, 4))
            A = rng.normal(size=(n, n))
            B = rng.normal(size=(n, n))
            X = diss.ifofp(float(-rng.uniform(0.5, 2.0)), float(rng.uniform(0.2, 1.0)), n)
            res = diss.synth_local_xeid(A, B, X)
            if res is None:
                continue
            successes += 1
            A_cl = A + B @ res.L
            cert = diss.check_xeid(A_cl, np.eye(n), np.eye(n), np.zeros((n, n)), X)
            assert cert is not None
        assert successes >= 4
