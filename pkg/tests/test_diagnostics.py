import numpy as np
import pytest

from ssnocc.diagnostics import ConstantChainWarning, ess, rhat


class TestRhat:
    def test_identical_stationary_chains(self):
        rng = np.random.default_rng(1)
        chain = rng.standard_normal(5000)
        # AR(1)-free copies of the same stationary draw stream
        r = rhat(np.stack([chain, chain]))
        assert 1.0 <= r <= 1.01

    def test_two_well_mixed_chains(self):
        rng = np.random.default_rng(2)
        r = rhat(rng.standard_normal((2, 2000)))
        assert 1.0 <= r < 1.01

    def test_disjoint_constant_chains(self):
        r = rhat(np.stack([np.zeros(200), np.full(200, 5.0)]))
        assert r > 2.0

    def test_shifted_chains_flagged_large(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal(1000)
        b = rng.standard_normal(1000) + 10.0
        assert rhat(np.stack([a, b])) > 1.5

    def test_constant_everywhere_returns_one_with_flag(self):
        with pytest.warns(ConstantChainWarning):
            r = rhat(np.ones((2, 100)))
        assert r == 1.0

    def test_needs_two_chains(self):
        with pytest.raises(ValueError):
            rhat(np.ones((1, 50)))


class TestEss:
    def test_iid_draws_near_total(self):
        rng = np.random.default_rng(4)
        e = ess(rng.standard_normal((2, 1000)))
        assert 1600 <= e <= 2400

    def test_autocorrelated_draws_reduced(self):
        rng = np.random.default_rng(5)
        n = 4000
        x = np.empty((2, n))
        for c in range(2):
            z = 0.0
            for t in range(n):
                z = 0.9 * z + rng.standard_normal()
                x[c, t] = z
        e = ess(x)
        # AR(1) with rho=0.9 has ESS ~ N*(1-rho)/(1+rho) ~ N/19
        assert e < 0.2 * 2 * n

    def test_constant_chain_returns_count_with_flag(self):
        with pytest.warns(ConstantChainWarning):
            e = ess(np.ones((2, 100)))
        assert e == 200.0

    def test_capped_at_total(self):
        rng = np.random.default_rng(6)
        assert ess(rng.standard_normal((2, 500))) <= 1000.0

    def test_single_chain_supported(self):
        rng = np.random.default_rng(7)
        e = ess(rng.standard_normal(1000))
        assert 700 <= e <= 1000
