import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privlora.attacks import (
    CountingOracle, ExtractionError, LweSampleSet, alg1_convert, auc, centered_mod, clwe_sample,
    extract_plain_linear, extraction_residuals, make_pll_oracle, periodic_score, solve_matrix_residual,
    uniform_range_test,
)
from privlora.pll import PllConfig, pll_init

frac = np.vectorize(Fraction, otypes=[object])


class TestPlainExtraction:
    @pytest.mark.parametrize("seed", range(5))
    def test_exact_in_n_queries(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(16, 16))
        oracle = CountingOracle(lambda x: x @ a)
        est = extract_plain_linear(oracle, 16)
        assert oracle.calls == 16
        assert np.array_equal(est, a)

    def test_verify_detects_randomized_oracle(self, rng):
        oracle = CountingOracle(lambda x: x + rng.normal(size=x.shape))
        with pytest.raises(ExtractionError):
            extract_plain_linear(oracle, 4, verify=True)

    def test_verify_doubles_queries(self):
        oracle = CountingOracle(lambda x: 2 * x)
        extract_plain_linear(oracle, 5, verify=True)
        assert oracle.calls == 10


class TestPllExtraction:
    def test_default_config_resists(self, rng):
        w = pll_init(PllConfig(16, 16), rng)
        stats = extraction_residuals(make_pll_oracle(w, rng), 16, 200, truth=w.matrix)
        assert stats.queries == 200 * 17 * 2
        assert stats.disagreement_rate > 0.99
        assert stats.residual_variance > 0
        assert stats.max_error > 0.1

    def test_degenerate_layer_is_extractable(self, rng):
        # p_bern = 1 and k = 0: the layer becomes a fixed affine map and the attack succeeds
        w = pll_init(PllConfig(8, 8, q=4.0, p_bern=1.0), rng)
        stats = extraction_residuals(make_pll_oracle(w, rng, zero_mask=True), 8, 20, truth=w.matrix)
        assert stats.disagreement_rate == 0
        assert stats.residual_variance < 1e-20
        assert stats.max_error < 1e-9

    def test_demodulated_oracle_in_range(self, rng):
        w = pll_init(PllConfig(8, 4, q=2.0), rng)
        oracle = make_pll_oracle(w, rng, demodulated=True)
        ys = np.array([oracle(rng.normal(size=8)) for _ in range(50)])
        assert ys.min() >= -1.0 and ys.max() < 1.0

    def test_zero_trials(self, rng):
        w = pll_init(PllConfig(4, 4), rng)
        stats = extraction_residuals(make_pll_oracle(w, rng), 4, 0)
        assert stats.queries == 0 and math.isnan(stats.residual_variance)


class TestSamplers:
    def test_clwe_shapes_and_secret(self, rng):
        s = clwe_sample(8, 5, 30, gamma=2 * math.sqrt(8), beta=0.0, rng=rng)
        assert s.a.shape == (8, 5) and s.b.shape == (30, 5) and s.e.shape == (30, 5)
        assert np.linalg.norm(s.s) == pytest.approx(1.0)
        assert np.allclose(s.b, centered_mod(s.params["gamma"] * (s.s @ s.a), 1.0))

    def test_lwe_integer(self, rng):
        s = clwe_sample(6, 4, 10, 0.0, 1.0, tag="lwe", rng=rng, q=97)
        assert np.all(s.a == np.round(s.a)) and np.all(s.e == np.round(s.e))
        assert np.allclose(centered_mod(s.b - s.s @ s.a - s.e, 97), 0)

    @pytest.mark.parametrize("kw", [dict(tag="bogus"), dict(beta=-1.0), dict(gamma=1.0), dict(m=0),
                                    dict(tag="lwe")])
    def test_invalid(self, kw):
        args = dict(m=8, n=4, t=5, gamma=10.0, beta=0.1)
        args.update(kw)
        with pytest.raises(ValueError):
            clwe_sample(**args)

    def test_periodic_score(self):
        assert periodic_score(np.zeros((2, 5))).tolist() == [1.0, 1.0]
        assert periodic_score(np.full(4, 0.5))[0] == pytest.approx(-1.0)

    def test_auc_extremes(self):
        assert auc([2, 3, 4], [0, 1]) == 1.0
        assert auc([0, 1], [2, 3]) == 0.0


def exact_clwe(rng, m, n, t, gamma):
    """CLWE samples with beta = 0 over exact rationals."""
    a = frac(rng.standard_normal((m, n)))
    s = frac(rng.standard_normal(m) / 4)
    gamma = Fraction(gamma)
    b = centered_mod(gamma * (s @ a), Fraction(1))
    return LweSampleSet(a, b, s, np.zeros((t, n), dtype=object), "clwe", dict(gamma=gamma, m=m, n=n, t=t))


class TestAlgorithmOne:
    @pytest.mark.parametrize("seed", range(10))
    def test_identity_exact(self, seed):
        rng = np.random.default_rng(seed)
        samples = exact_clwe(rng, 5, 3, 1, Fraction(9, 2))
        samples.b = np.repeat(samples.b[None, :], 4, axis=0)
        q = Fraction(7, 3)
        conv = alg1_convert(samples, q, xs=frac(rng.standard_normal((4, 5))))
        assert all(v == 0 for v in solve_matrix_residual(conv).ravel())

    def test_identity_float(self, rng):
        s = clwe_sample(16, 8, 50, gamma=2 * math.sqrt(16), beta=0.0, rng=rng)
        conv = alg1_convert(s, 5.0, rng)
        assert np.abs(solve_matrix_residual(conv)).max() < 1e-9

    def test_uniform_input_gives_uniform_output(self, rng):
        s = clwe_sample(16, 8, 500, gamma=8.0, beta=0.0, tag="uniform", rng=rng)
        conv = alg1_convert(s, 3.0, rng)
        b = np.array([smp.b for smp in conv.samples])
        assert uniform_range_test(b, -1.5, 1.5)
        with pytest.raises(ValueError):
            solve_matrix_residual(conv)

    def test_noise_appears_scaled(self, rng):
        s = clwe_sample(8, 4, 100, gamma=6.0, beta=1e-4, rng=rng)
        conv = alg1_convert(s, 2.0, rng)
        resid = solve_matrix_residual(conv)
        assert np.allclose(resid, centered_mod(2.0 * s.e, 2.0), atol=1e-9)


class TestUniformRangeTest:
    def test_accepts_uniform(self, rng):
        assert uniform_range_test(rng.uniform(-1, 1, 5000), -1, 1)

    def test_rejects_shifted_and_out_of_range(self, rng):
        assert not uniform_range_test(rng.uniform(-0.8, 1, 5000), -1, 1)
        assert not uniform_range_test([0.0, 1.0], -1, 1)
        assert not uniform_range_test([], -1, 1)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), seed=st.integers(0, 2 ** 32 - 1))
def test_plain_extraction_property(m, n, seed):
    a = np.random.default_rng(seed).normal(size=(m, n))
    oracle = CountingOracle(lambda x: x @ a)
    assert np.array_equal(extract_plain_linear(oracle, m), a) and oracle.calls == m
