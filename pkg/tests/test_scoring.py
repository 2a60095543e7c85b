import math

import mpmath
import numpy as np
import pytest

from oodseg.scoring import (
    hybrid_score,
    log_sum_exp,
    max_logit_score,
    msp_score,
    score_map,
    unnorm_nll_score,
)


def lse_highprec(values):
    """Extended-precision log-sum-exp oracle."""
    with mpmath.workdps(50):
        return float(mpmath.log(mpmath.fsum(mpmath.exp(v) for v in values)))


class TestLogSumExp:
    def test_two_zeros(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)

    def test_shift_identity_no_overflow(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(
            1000 + math.log(2), rel=1e-15
        )

    def test_highprec_oracle(self):
        v = [2.0, 0.0, -1.0]
        assert log_sum_exp(v) == pytest.approx(lse_highprec(v), abs=1e-14)

    def test_huge_magnitudes_finite(self):
        assert np.isfinite(log_sum_exp([1e8, -1e8, 0.0]))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            log_sum_exp([np.inf, 0.0])


class TestMsp:
    def test_uniform_k4(self):
        assert msp_score([1.0, 1.0, 1.0, 1.0]) == pytest.approx(0.75, abs=1e-15)

    def test_uniform_k2(self):
        assert msp_score([3.0, 3.0]) == pytest.approx(0.5, abs=1e-15)

    def test_highprec_oracle(self):
        with mpmath.workdps(50):
            expected = float(
                1 - mpmath.exp(10) / (mpmath.exp(10) + 1 + 1)
            )
        assert msp_score([10.0, 0.0, 0.0]) == pytest.approx(expected, abs=1e-15)

    def test_shift_invariance(self):
        v = np.array([0.3, -1.2, 2.5])
        assert msp_score(v) == pytest.approx(msp_score(v + 17.0), abs=1e-12)


class TestMaxLogit:
    def test_definition(self):
        assert max_logit_score([2.0, 0.0, -1.0]) == -2.0
        assert max_logit_score([-5.0, -5.0, -5.0]) == 5.0

    def test_shift_lowers_score_by_constant(self):
        assert max_logit_score([3.0, 1.0, 0.0]) == -3.0
        assert max_logit_score([2.0, 0.0, -1.0]) == -2.0


class TestUnnormNll:
    def test_two_zeros(self):
        assert unnorm_nll_score([0.0, 0.0]) == pytest.approx(-math.log(2), abs=1e-15)

    def test_shared_oracle(self):
        v = [2.0, 0.0, -1.0]
        assert unnorm_nll_score(v) == pytest.approx(-lse_highprec(v), abs=1e-14)

    def test_sandwich_bounds(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            v = rng.normal(scale=5, size=rng.integers(2, 8))
            k = len(v)
            ml = max_logit_score(v)
            nll = unnorm_nll_score(v)
            assert ml - math.log(k) - 1e-12 <= nll <= ml + 1e-12


class TestHybrid:
    def test_closed_form(self):
        assert hybrid_score(0.0, [0.0, 0.0]) == pytest.approx(
            -2 * math.log(2), abs=1e-14
        )

    def test_highprec_oracle(self):
        with mpmath.workdps(50):
            expected = float(
                mpmath.log(mpmath.sigmoid(4)) - mpmath.log(mpmath.fsum(
                    [mpmath.exp(2), 1, mpmath.exp(-1)]
                ))
            )
        assert hybrid_score(4.0, [2.0, 0.0, -1.0]) == pytest.approx(expected, abs=1e-14)

    def test_strictly_increasing_in_ood_logit(self):
        logits = [1.0, -0.5, 0.2]
        zs = np.linspace(-6, 6, 25)
        scores = [hybrid_score(z, logits) for z in zs]
        assert np.all(np.diff(scores) > 0)

    def test_strictly_decreasing_in_single_logit(self):
        base = np.array([1.0, -0.5, 0.2])
        scores = []
        for delta in np.linspace(0, 3, 10):
            v = base.copy()
            v[1] += delta
            scores.append(hybrid_score(0.5, v))
        assert np.all(np.diff(scores) < 0)

    def test_finite_at_extreme_logits(self):
        assert np.isfinite(hybrid_score(-1e4, [1e4, -1e4]))
        assert np.isfinite(hybrid_score(1e4, [-1e4, -1e4]))


class TestShiftRelation:
    def test_constant_shift_effects(self):
        rng = np.random.default_rng(22)
        v = rng.normal(size=5)
        c = 2.75
        assert max_logit_score(v + c) == pytest.approx(max_logit_score(v) - c, abs=1e-12)
        assert unnorm_nll_score(v + c) == pytest.approx(
            unnorm_nll_score(v) - c, abs=1e-12
        )
        assert msp_score(v + c) == pytest.approx(msp_score(v), abs=1e-12)


class TestScoreMap:
    def test_single_pixel_reduces_to_scalar(self):
        v = np.array([[[2.0, 0.0, -1.0]]])
        z = np.array([[0.7]])
        assert score_map(v, "msp")[0, 0] == pytest.approx(msp_score([2, 0, -1]))
        assert score_map(v, "max_logit")[0, 0] == -2.0
        assert score_map(v, "unnorm_nll")[0, 0] == pytest.approx(
            unnorm_nll_score([2, 0, -1])
        )
        assert score_map(v, "hybrid", z)[0, 0] == pytest.approx(
            hybrid_score(0.7, [2, 0, -1])
        )

    def test_constant_volume_constant_map(self):
        v = np.tile(np.array([1.0, 0.0, -1.0]), (4, 5, 1))
        out = score_map(v, "msp")
        assert np.all(out == out[0, 0])

    def test_elementwise_matches_scalar_loop(self):
        rng = np.random.default_rng(23)
        v = rng.normal(size=(16, 16, 5))
        z = rng.normal(size=(16, 16))
        for kind, fn in [
            ("msp", lambda p: msp_score(v[p])),
            ("max_logit", lambda p: max_logit_score(v[p])),
            ("unnorm_nll", lambda p: unnorm_nll_score(v[p])),
            ("hybrid", lambda p: hybrid_score(z[p], v[p])),
        ]:
            out = score_map(v, kind, ood_logits=z)
            for p in [(0, 0), (3, 7), (15, 15), (8, 2)]:
                assert out[p] == pytest.approx(fn(p), abs=1e-12)

    def test_hybrid_requires_ood(self):
        with pytest.raises(ValueError):
            score_map(np.zeros((2, 2, 3)), "hybrid")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            score_map(np.zeros((2, 2, 3)), "energy")
