from __future__ import annotations

import warnings

import numpy as np
import pytest

from trunccert.errors import CFLWarning, ModelError, ProbeOutsideDomain
from trunccert.fd import (
    BoundaryData,
    FdConfig,
    Probe,
    dirichlet_mask,
    matched_config,
    measured_truncation_error,
    read_binary,
    sample_field,
    solve_ibvp,
    space_grids,
    write_binary,
)
from trunccert.model import Payoff, RegimeModel, TruncatedDomain, validate_model

from conftest import BS_REFERENCE

DOM = TruncatedDomain([0.0], [200.0], 1.0)
EXACT = BoundaryData("frozen-bsm")


def _centre_error(model, payoff, config):
    field = solve_ibvp(model, payoff, DOM, EXACT, config)
    return sample_field(field, 0.0, [100.0])[0, 0] - BS_REFERENCE


class TestConfig:
    @pytest.mark.parametrize("kw", [{"M": 0}, {"N": (2,)}, {"scheme": "explicit"}, {"coupling": "none"}])
    def test_invalid(self, kw):
        with pytest.raises(ModelError):
            FdConfig(**kw)

    def test_custom_needs_callable(self):
        with pytest.raises(ModelError):
            BoundaryData("custom-grid")

    def test_dirichlet_mask_excludes_zero_facet(self):
        grids = space_grids(TruncatedDomain([0.0, 1.0], [2.0, 3.0], 1.0), FdConfig(N=(5,)))
        mask = dirichlet_mask(TruncatedDomain([0.0, 1.0], [2.0, 3.0], 1.0), grids).reshape(5, 5)
        assert mask[-1].all() and mask[:, -1].all() and mask[:, 0].all()
        assert not mask[0, 1:-1].any()


class TestSolve:
    def test_black_scholes_centre(self, bs_model, call100):
        err = _centre_error(bs_model, call100, FdConfig(200, (201,)))
        assert abs(err) <= 1e-2 * BS_REFERENCE

    def test_zero_problem(self, two_regime):
        field = solve_ibvp(two_regime, Payoff("vanilla-call", 1e9), DOM, BoundaryData("zero"), FdConfig(50, (51,)))
        assert np.all(field.values == 0.0)

    @pytest.mark.parametrize("scheme", ["crank-nicolson", "implicit-euler"])
    @pytest.mark.parametrize("coupling", ["implicit-block", "explicit-lagged"])
    def test_linear_payoff_exact(self, two_regime, scheme, coupling):
        p = Payoff("vanilla-call", 0.0)
        field = solve_ibvp(two_regime, p, DOM, BoundaryData("payoff-extension"), FdConfig(40, (41,), scheme, coupling))
        s = field.s_grid[0][None, :, None]
        np.testing.assert_allclose(field.values, np.broadcast_to(s, field.values.shape), atol=1e-10)

    def test_linear_payoff_two_dim(self):
        sig = np.array([[[0.2, 0.0], [0.1, 0.3]], [[0.3, 0.0], [-0.1, 0.25]]])
        m = validate_model(RegimeModel(r=[0.02, 0.05], sigma=sig, generator=[[-1, 1], [1, -1]]))
        p = Payoff("basket-call", 0.0, (1.0, 0.0))
        dom = TruncatedDomain([0.0, 0.0], [50.0, 50.0], 1.0)
        field = solve_ibvp(m, p, dom, BoundaryData("payoff-extension"), FdConfig(20, (21,)))
        s1 = field.s_grid[0][None, :, None, None]
        np.testing.assert_allclose(field.values, np.broadcast_to(s1, field.values.shape), atol=1e-10)

    def test_maximum_principle(self, two_regime):
        for p in (Payoff("vanilla-call", 100.0), Payoff("vanilla-put", 100.0)):
            field = solve_ibvp(two_regime, p, DOM, BoundaryData("payoff-extension"),
                               FdConfig(100, (101,), "implicit-euler"))
            assert field.values.min() >= -1e-12

    def test_regime_symmetric(self, call100):
        m = validate_model(RegimeModel(r=[0.05, 0.05], sigma=[0.2, 0.2], generator=[[-3, 3], [3, -3]]))
        field = solve_ibvp(m, call100, DOM, BoundaryData(), FdConfig(100, (101,)))
        np.testing.assert_allclose(field.values[..., 0], field.values[..., 1], atol=1e-11)

    def test_custom_grid_matches_kind(self, two_regime, call100):
        conf = FdConfig(50, (51,))
        env = solve_ibvp(two_regime, call100, DOM, BoundaryData(), conf)
        custom = BoundaryData("custom-grid", lambda t, s, i: s[:, 0] - 0.0 * t)
        cust = solve_ibvp(two_regime, call100, DOM, custom, conf)
        # call growth bounds are k1 = 0, k2 = 1, so both boundaries are h = s
        np.testing.assert_allclose(env.values, cust.values, atol=1e-12)


class TestRefinement:
    @pytest.mark.parametrize("scheme,coupling,factor", [
        ("crank-nicolson", "implicit-block", 3.0),
        ("implicit-euler", "implicit-block", 2.0),
        ("crank-nicolson", "explicit-lagged", 2.0),
    ])
    def test_error_reduction(self, bs_model, call100, scheme, coupling, factor):
        coarse = abs(_centre_error(bs_model, call100, FdConfig(100, (101,), scheme, coupling)))
        fine = abs(_centre_error(bs_model, call100, FdConfig(200, (201,), scheme, coupling)))
        assert coarse / fine >= factor


class TestCfl:
    def test_warns_when_coupling_stiff(self, call100):
        m = validate_model(RegimeModel(r=[0.05, 0.02], sigma=[0.2, 0.4], generator=[[-50, 50], [50, -50]]))
        with pytest.warns(CFLWarning):
            solve_ibvp(m, call100, DOM, BoundaryData(), FdConfig(10, (21,), coupling="explicit-lagged"))

    def test_silent_for_implicit(self, call100):
        m = validate_model(RegimeModel(r=[0.05, 0.02], sigma=[0.2, 0.4], generator=[[-50, 50], [50, -50]]))
        with warnings.catch_warnings():
            warnings.simplefilter("error", CFLWarning)
            solve_ibvp(m, call100, DOM, BoundaryData(), FdConfig(10, (21,)))


class TestMeasured:
    def test_identical_domains(self, two_regime, call100):
        err, _, _ = measured_truncation_error(two_regime, call100, DOM, DOM, BoundaryData(), FdConfig(50, (51,)),
                                              [Probe(0.0, (100.0,), 0), Probe(0.5, (150.0,), 1)])
        np.testing.assert_array_equal(err, 0.0)

    def test_far_boundary_probe(self, two_regime, call100):
        big = TruncatedDomain([0.0], [800.0], 1.0)
        conf = FdConfig(50, (51,))
        err, _, large = measured_truncation_error(two_regime, call100, DOM, big, BoundaryData(), conf,
                                                  [Probe(0.0, (200.0,), 1)])
        h = BoundaryData().evaluate(two_regime, call100, 1.0, 0.0, [[200.0]])[0, 1]
        assert err[0] == pytest.approx(abs(h - sample_field(large, 0.0, [200.0])[0, 1]), abs=1e-12)

    def test_probe_outside(self, two_regime, call100):
        with pytest.raises(ProbeOutsideDomain):
            measured_truncation_error(two_regime, call100, DOM, DOM, BoundaryData(), FdConfig(10, (11,)),
                                      [Probe(0.0, (250.0,), 0)])

    def test_domains_must_nest(self, two_regime, call100):
        with pytest.raises(ModelError):
            measured_truncation_error(two_regime, call100, TruncatedDomain([0.0], [400.0], 1.0), DOM,
                                      BoundaryData(), FdConfig(10, (11,)), [])

    def test_matched_spacing(self):
        conf = matched_config(FdConfig(10, (41,)), DOM, TruncatedDomain([0.0], [800.0], 1.0))
        assert conf.N == (161,) and conf.M == 10

    def test_truncation_error_shrinks_with_domain(self, two_regime, call100):
        big = TruncatedDomain([0.0], [1600.0], 1.0)
        near, _, _ = measured_truncation_error(two_regime, call100, TruncatedDomain([0.0], [150.0], 1.0), big,
                                               BoundaryData(), FdConfig(100, (76,)), [Probe(0.0, (100.0,), 0)])
        far, _, _ = measured_truncation_error(two_regime, call100, TruncatedDomain([0.0], [400.0], 1.0), big,
                                              BoundaryData(), FdConfig(100, (201,)), [Probe(0.0, (100.0,), 0)])
        assert far[0] < near[0]


def test_binary_roundtrip(tmp_path, two_regime, call100):
    field = solve_ibvp(two_regime, call100, DOM, BoundaryData(), FdConfig(10, (11,)))
    path = tmp_path / "f.bin"
    write_binary(field, path)
    assert path.read_bytes()[:4] == b"TCRT"
    back = read_binary(path)
    np.testing.assert_array_equal(back.values, field.values)
    np.testing.assert_array_equal(back.t_grid, field.t_grid)
    np.testing.assert_array_equal(back.s_grid[0], field.s_grid[0])


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ModelError):
        read_binary(path)
