from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trunccert.errors import (
    ModelError,
    NegativeOffDiagonal,
    NegativeRate,
    NonPositivePrice,
    RowSumViolation,
    SingularVolatility,
    UnboundedPayoff,
)
from trunccert.model import (
    GrowthBounds,
    Payoff,
    PriceField,
    RegimeModel,
    TruncatedDomain,
    check_growth_bounds,
    evaluate_payoff,
    load_problem,
    payoff_growth_bounds,
    problem_from_dict,
    validate_model,
)

from conftest import random_model


class TestValidateModel:
    def test_valid_two_regime(self):
        m = validate_model(RegimeModel(r=[0.05, 0.02], sigma=[np.diag([0.2]), np.diag([0.4])],
                                       generator=[[-1, 1], [1, -1]]))
        assert m.validated
        np.testing.assert_allclose(m.exit_rates, [1.0, 1.0])
        np.testing.assert_allclose(m.a[:, 0, 0], [0.04, 0.16])

    def test_row_sum(self):
        with pytest.raises(RowSumViolation) as exc:
            validate_model(RegimeModel(r=[0.0, 0.0], sigma=[0.2, 0.2], generator=[[-1, 0.5], [1, -1]]))
        assert exc.value.row == 0
        assert exc.value.total == pytest.approx(-0.5)

    def test_zero_sigma(self):
        with pytest.raises(SingularVolatility) as exc:
            validate_model(RegimeModel(r=[0.0, 0.0], sigma=[0.2, 0.0], generator=[[-1, 1], [1, -1]]))
        assert exc.value.regime == 1

    def test_negative_offdiagonal(self):
        with pytest.raises(NegativeOffDiagonal) as exc:
            validate_model(RegimeModel(r=[0.0, 0.0], sigma=[0.2, 0.2], generator=[[1, -1], [1, -1]]))
        assert (exc.value.row, exc.value.col) == (0, 1)

    def test_negative_rate(self):
        with pytest.raises(NegativeRate):
            validate_model(RegimeModel(r=[-0.01], sigma=[0.2], generator=[[0.0]]))

    def test_idempotent(self):
        m = validate_model(RegimeModel(r=[0.05], sigma=[0.2], generator=[[0.0]]))
        again = validate_model(m)
        assert again == m and again.validated

    def test_shape_mismatch(self):
        with pytest.raises(ModelError):
            RegimeModel(r=[0.05, 0.02], sigma=[0.2], generator=[[0.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_diffusion_symmetric_positive(self, seed):
        m = random_model(np.random.default_rng(seed), 3, 2)
        for a in m.a:
            assert np.max(np.abs(a - a.T)) <= 1e-14
            assert np.all(np.linalg.eigvalsh(a) > 0)

    def test_immutable(self):
        m = validate_model(RegimeModel(r=[0.05], sigma=[0.2], generator=[[0.0]]))
        with pytest.raises(ValueError):
            m.r[0] = 1.0


class TestPayoff:
    def test_basket_call_bounds(self):
        g = payoff_growth_bounds(Payoff("basket-call", 100.0, (0.5, 0.5)))
        assert (g.k1, g.k2, g.k3, g.k4) == (0.0, (0.5, 0.5), 100.0, (0.5, 0.5))

    def test_basket_put_bounds(self):
        g = payoff_growth_bounds(Payoff("basket-put", 100.0, (0.5, 0.5)))
        assert (g.k1, g.k2, g.k3, g.k4) == (100.0, (0.0, 0.0), 0.0, (-0.5, -0.5))

    def test_vanilla_call_bounds(self):
        g = payoff_growth_bounds(Payoff("vanilla-call", 100.0))
        assert (g.k1, g.k2, g.k3, g.k4) == (0.0, (1.0,), 100.0, (1.0,))

    def test_custom_needs_bounds(self):
        p = Payoff("custom-table", table=([0.0, 1.0], [0.0, 1.0]))
        with pytest.raises(UnboundedPayoff):
            payoff_growth_bounds(p)

    def test_custom_bounds_sampled(self):
        p = Payoff("custom-table", table=([0.0, 10.0, 20.0], [0.0, 0.0, 10.0]))
        assert check_growth_bounds(p, GrowthBounds(0.0, 1.0, 10.0, 0.0), 1, 10.0)
        assert not check_growth_bounds(p, GrowthBounds(0.0, 0.1, 0.0, 0.0), 1, 10.0)

    @pytest.mark.parametrize("s,expected", [(110.0, 10.0), (90.0, 0.0)])
    def test_call_values(self, s, expected):
        assert evaluate_payoff(Payoff("vanilla-call", 100.0), [s]) == expected

    def test_basket_value(self):
        assert evaluate_payoff(Payoff("basket-call", 100.0, (0.5, 0.5)), [120.0, 100.0]) == 10.0

    def test_nonpositive_price(self):
        with pytest.raises(NonPositivePrice):
            evaluate_payoff(Payoff("vanilla-call", 100.0), [0.0])

    @pytest.mark.parametrize("kind", ["basket-call", "basket-put", "vanilla-call", "vanilla-put"])
    @pytest.mark.parametrize("seed", range(3))
    def test_envelope_exact(self, kind, seed):
        d = 1 if kind.startswith("vanilla") else 3
        w = np.random.default_rng(seed).uniform(0.1, 1.0, d)
        K = 100.0
        p = Payoff(kind, K, w if d > 1 else (1.0,))
        g = payoff_growth_bounds(p, d)
        s = np.random.default_rng(seed + 10).uniform(0.0, 10 * K, (1000, d))
        val = p.value(s)
        assert np.all(val >= 0)
        assert np.all(g.lower(s) <= val) and np.all(val <= g.upper(s))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e4), st.floats(0.0, 1e3))
    def test_lipschitz_call(self, s, K):
        p = Payoff("vanilla-call", K)
        assert abs(p.value([[s]])[0] - p.value([[s * 1.01]])[0]) <= 0.01 * s + 1e-9


class TestDomainAndField:
    def test_domain_invariants(self):
        with pytest.raises(ModelError):
            TruncatedDomain([1.0], [1.0], 1.0)
        with pytest.raises(ModelError):
            TruncatedDomain([0.0], [1.0], 0.0)

    def test_gamma_excludes_zero_facet(self):
        dom = TruncatedDomain([0.0, 1.0], [10.0, 10.0], 1.0)
        pts = np.array([[0.0, 5.0], [10.0, 5.0], [5.0, 1.0], [5.0, 5.0]])
        assert dom.on_gamma(pts).tolist() == [False, True, True, False]

    def test_field_log_interpolation_exact_on_log_linear(self):
        s = np.exp(np.linspace(0.0, 3.0, 7))
        t = np.array([0.0, 1.0])
        vals = np.log(s)[None, :, None] * np.array([1.0, 2.0])[:, None, None]
        f = PriceField(t, (s,), vals)
        x = np.exp(1.234)
        assert f.at(0.5, [x])[0] == pytest.approx(1.5 * 1.234, rel=1e-12)

    def test_field_rejects_nonfinite(self):
        with pytest.raises(ModelError):
            PriceField(np.array([0.0, 1.0]), (np.array([1.0, 2.0]),), np.full((2, 2, 1), np.nan))


class TestConfig:
    CFG = {"d": 1, "k": 2, "r": [0.05, 0.02], "sigma": [[[0.2]], [[0.4]]], "lambda": [[-1, 1], [1, -1]],
           "payoff": {"kind": "vanilla-call", "strike": 100}, "domain": {"s_lo": [0], "s_hi": [200], "T": 1}}

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(self.CFG))
        prob = load_problem(path)
        assert prob.model.k == 2 and prob.payoff.strike == 100 and prob.domain.T == 1.0

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        with pytest.raises(ModelError):
            load_problem(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_problem(tmp_path / "nope.json")

    def test_dimension_mismatch(self):
        cfg = dict(self.CFG, domain={"s_lo": [0, 0], "s_hi": [1, 1], "T": 1})
        with pytest.raises(ModelError):
            problem_from_dict(cfg)
