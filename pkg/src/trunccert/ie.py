"""Integral-equation solver: Picard iteration of the regime-coupling operator.

The operator maps a field phi to

    e^{-lam_i (T-t)} eta_i(t, s)
      + int_0^{T-t} e^{-(lam_i + r_i) v} sum_{j != i} lam_ij E_i[phi(t+v, X_v, j) | X_0 = s] dv

and is a contraction in the linear-growth weighted sup norm.  The inner
expectation uses Gauss-Hermite nodes and multilinear log-space
interpolation of phi; the outer integral is composite Simpson in v.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .bsm import MAX_QUADRATURE_DIM, eta
from .errors import ModelError, NoConvergence, QuadratureDimension
from .kernel import quadrature_points
from .model import Payoff, PriceField, RegimeModel, TruncatedDomain, log_grid

_DEFAULT_ORDER = {1: 48, 2: 16, 3: 8}


@dataclass(frozen=True)
class IeConfig:
    n_t: int = 21
    n_s: tuple = (81,)
    s_ranges: Optional[tuple] = None
    v_panels: int = 8
    x_order: Optional[int] = None
    tol: float = 1e-8
    max_iter: int = 60
    workers: int = 1
    n_sd: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "n_s", tuple(int(n) for n in np.atleast_1d(self.n_s)))
        if self.tol <= 0:
            raise ModelError("ie tol must be positive")
        if self.n_t < 2 or any(n < 2 for n in self.n_s):
            raise ModelError("ie grids need at least two nodes per axis")
        if self.v_panels < 2:
            raise ModelError("ie v_panels must be >= 2")
        if self.max_iter < 1:
            raise ModelError("ie max_iter must be >= 1")

    def order(self, d: int) -> int:
        return self.x_order if self.x_order is not None else _DEFAULT_ORDER.get(d, 8)


@dataclass
class IterRecord:
    iteration: int
    v_norm_diff: float
    wall_time_ms: float


@dataclass
class IeResult:
    """Solved field plus per-iteration report.

    Norms are sups over the finite grid only, not the unbounded domain.
    """

    field: PriceField
    report: list = field(default_factory=list)
    converged: bool = False
    out_of_range: int = 0
    eta_values: Optional[np.ndarray] = None

    @property
    def ratios(self) -> np.ndarray:
        diffs = np.array([rec.v_norm_diff for rec in self.report])
        ok = diffs[:-1] > 0
        return diffs[1:][ok] / diffs[:-1][ok]


def _check_dim(model: RegimeModel):
    if model.d > MAX_QUADRATURE_DIM:
        raise QuadratureDimension(f"integral-equation solve supports d <= {MAX_QUADRATURE_DIM}, got d={model.d}")


def build_grids(model: RegimeModel, domain: TruncatedDomain, config: IeConfig):
    """Uniform time grid and per-dimension log-spaced price grids."""
    _check_dim(model)
    t_grid = np.linspace(0.0, domain.T, config.n_t)
    n_s = config.n_s if len(config.n_s) == model.d else config.n_s * model.d
    grids = []
    for l in range(model.d):
        if config.s_ranges is not None:
            lo, hi = config.s_ranges[l]
        else:
            sd = np.sqrt(model.max_diag_diffusion(l) * domain.T)
            lo_interest = max(domain.s_lo[l], domain.s_hi[l] * 1e-2)
            lo = lo_interest * np.exp(-config.n_sd * sd)
            hi = domain.s_hi[l] * np.exp(config.n_sd * sd)
        grids.append(log_grid(lo, hi, n_s[l]))
    return t_grid, tuple(grids)


def v_norm(field: PriceField) -> float:
    """Discrete sup of |phi| / (1 + ||s||_1) over all nodes and regimes."""
    weight = 1.0 + np.abs(field.nodes()).sum(axis=-1)
    return float(np.max(np.abs(field.values) / weight[None, ..., None]))


def _diff_field(a: PriceField, b: PriceField) -> PriceField:
    return PriceField(a.t_grid, a.s_grid, a.values - b.values)


def eta_grid(model: RegimeModel, payoff: Payoff, T: float, t_grid, s_grids, order: int) -> np.ndarray:
    """Frozen-regime values eta_i(t, s) on the full grid, shape (n_t, ..., k)."""
    nodes = np.stack(np.meshgrid(*s_grids, indexing="ij"), axis=-1)
    flat = nodes.reshape(-1, model.d)
    out = np.empty((len(t_grid),) + nodes.shape[:-1] + (model.k,))
    for n, t in enumerate(t_grid):
        for i in range(model.k):
            out[n, ..., i] = np.asarray(eta(model, payoff, T, t, flat, i, order)).reshape(nodes.shape[:-1])
    return out


def _seed(model: RegimeModel, t_grid, T: float, eta_vals: np.ndarray) -> np.ndarray:
    decay = np.exp(-np.outer(T - np.asarray(t_grid), model.exit_rates))
    shape = (len(t_grid),) + (1,) * (eta_vals.ndim - 2) + (model.k,)
    return decay.reshape(shape) * eta_vals


def _simpson(n_panels: int, length: float):
    m = 2 * n_panels
    v = np.linspace(0.0, length, m + 1)
    w = np.ones(m + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return v, w * (length / m) / 3.0


def _interp_log(logs, values, pts):
    """Multilinear interpolation in log coordinates with linear extrapolation.

    ``values`` is (n_1, ..., n_d, c), ``pts`` is (m, d); returns (m, c).
    """
    if len(logs) == 1:
        g = logs[0]
        x = pts[:, 0]
        idx = np.clip(np.searchsorted(g, x) - 1, 0, g.size - 2)
        w = (x - g[idx]) / (g[idx + 1] - g[idx])
        return values[idx] * (1.0 - w)[:, None] + values[idx + 1] * w[:, None]
    rgi = RegularGridInterpolator(logs, values, method="linear", bounds_error=False, fill_value=None)
    return rgi(pts)


_NEGLIGIBLE_WEIGHT = 1e-12


def _coupling(field: PriceField, eta_vals: np.ndarray, t: float, pts: np.ndarray, eta_pts: np.ndarray,
              model: RegimeModel, config: IeConfig, T: float):
    """Integral term at time ``t`` for start points ``pts`` (m, d), every regime.

    The inner expectation is split as
    E_i[phi_j(t+v, X_v)] = E_i[(phi_j - eta_i)(t+v, X_v)] + e^{r_i v} eta_i(t, s),
    using that the discounted frozen-regime value is a martingale; only the
    smooth deviation phi_j - eta_i is interpolated.  ``eta_pts`` holds
    eta_i(t, pts).  At v = 0 the expectation is replaced by its limit.
    """
    rem = T - t
    k = model.k
    acc = np.zeros((pts.shape[0], k))
    if rem <= 0:
        return acc, 0
    off = model.generator - np.diag(np.diag(model.generator))
    active = [i for i in range(k) if np.any(off[i] > 0)]
    if not active:
        return acc, 0
    order = config.order(model.d)
    aux = PriceField(field.t_grid, field.s_grid, eta_vals)
    logs = tuple(np.log(g) for g in field.s_grid)
    lo = np.array([g[0] for g in logs])
    hi = np.array([g[-1] for g in logs])
    v_nodes, v_weights = _simpson(config.v_panels, rem)
    oor = 0
    for vm, wm in zip(v_nodes, v_weights):
        phi_sl = field.slice_at(t + vm)
        eta_sl = aux.slice_at(t + vm)
        for i in active:
            dev = phi_sl - eta_sl[..., i:i + 1]
            if vm == 0.0:
                inner = _interp_log(logs, dev, np.log(pts)) + eta_pts[:, i:i + 1]
            else:
                x, w = quadrature_points(pts, model, i, vm, order)
                lx = np.log(x)
                outside = np.any((lx < lo) | (lx > hi), axis=-1) & (w >= _NEGLIGIBLE_WEIGHT)[None, :]
                oor += int(np.count_nonzero(outside))
                vals = _interp_log(logs, dev, lx.reshape(-1, model.d)).reshape(x.shape[0], x.shape[1], k)
                inner = np.einsum("nqj,q->nj", vals, w) + np.exp(model.r[i] * vm) * eta_pts[:, i:i + 1]
            decay = np.exp(-(model.exit_rates[i] + model.r[i]) * vm)
            acc[:, i] += wm * decay * (inner @ off[i])
    return acc, oor


def apply_A(field: PriceField, model: RegimeModel, payoff: Payoff, config: IeConfig, T: float,
            eta_vals: Optional[np.ndarray] = None):
    """One application of the operator; returns (new field, out-of-range count)."""
    _check_dim(model)
    if eta_vals is None:
        eta_vals = eta_grid(model, payoff, T, field.t_grid, field.s_grid, config.order(model.d))
    n_t = field.t_grid.size

    nodes = field.nodes().reshape(-1, model.d)
    shape = field.values.shape[1:]

    def work(n):
        acc, oor = _coupling(field, eta_vals, field.t_grid[n], nodes, eta_vals[n].reshape(-1, model.k),
                             model, config, T)
        return acc.reshape(shape), oor

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(work, range(n_t)))
    else:
        parts = [work(n) for n in range(n_t)]
    values = _seed(model, field.t_grid, T, eta_vals) + np.stack([p[0] for p in parts])
    if payoff.structured:
        # the operator is positive and structured payoffs are >= 0; drop interpolation undershoot
        np.maximum(values, 0.0, out=values)
    if field.t_grid[-1] >= T:
        term = payoff.value(field.nodes())
        values[-1] = term[..., None]
    return PriceField(field.t_grid, field.s_grid, values), sum(p[1] for p in parts)


def solve_ie(model: RegimeModel, payoff: Payoff, domain: TruncatedDomain, config: IeConfig = IeConfig(),
             raise_on_failure: bool = True) -> IeResult:
    """Picard iteration from phi_0 = eta until the V-norm step drops below tol."""
    t_grid, s_grids = build_grids(model, domain, config)
    T = domain.T
    eta_vals = eta_grid(model, payoff, T, t_grid, s_grids, config.order(model.d))
    values = eta_vals.copy()
    term = payoff.value(np.stack(np.meshgrid(*s_grids, indexing="ij"), axis=-1))
    values[-1] = term[..., None]
    phi = PriceField(t_grid, s_grids, values)
    result = IeResult(field=phi, eta_values=eta_vals)
    for it in range(1, config.max_iter + 1):
        start = time.perf_counter()
        new, oor = apply_A(phi, model, payoff, config, T, eta_vals)
        diff = v_norm(_diff_field(new, phi))
        result.report.append(IterRecord(it, diff, 1e3 * (time.perf_counter() - start)))
        result.out_of_range += oor
        phi = new
        if diff < config.tol:
            result.converged = True
            break
    result.field = phi
    if not result.converged and raise_on_failure:
        raise NoConvergence(result.report[-1].v_norm_diff, len(result.report))
    return result


def evaluate(result: IeResult, model: RegimeModel, payoff: Payoff, config: IeConfig, T: float, t: float, s):
    """Price at arbitrary points by one operator application on the solved field.

    ``s`` is (d,) or (m, d); returns (k,) or (m, k).  Off-grid values come
    from the integral representation itself rather than from interpolating
    the output field.
    """
    s = np.asarray(s, dtype=float)
    pts = s.reshape(-1, model.d)
    if t >= T:
        out = np.repeat(payoff.value(pts)[:, None], model.k, axis=1)
    else:
        order = config.order(model.d)
        eta_pts = np.stack([np.atleast_1d(eta(model, payoff, T, t, pts, i, order)) for i in range(model.k)], axis=1)
        fld = result.field
        eta_vals = result.eta_values
        if eta_vals is None:
            eta_vals = eta_grid(model, payoff, T, fld.t_grid, fld.s_grid, order)
        acc, _ = _coupling(fld, eta_vals, t, pts, eta_pts, model, config, T)
        out = np.exp(-model.exit_rates * (T - t))[None, :] * eta_pts + acc
    return out.reshape(model.k) if s.ndim == 1 else out


def contraction_bound(model: RegimeModel, T: float) -> float:
    """sup_t int_0^{T-t} lam_i e^{-lam_i v} dv = max_i (1 - e^{-lam_i T})."""
    return float(np.max(1.0 - np.exp(-model.exit_rates * T)))
