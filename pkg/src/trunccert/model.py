"""Market model, payoff, truncated domain and discrete price field types."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import (
    ModelError,
    NegativeOffDiagonal,
    NegativeRate,
    NonPositivePrice,
    RowSumViolation,
    SingularVolatility,
    UnboundedPayoff,
)

ROW_SUM_TOL = 1e-12
COND_MAX = 1e12

PAYOFF_KINDS = ("basket-call", "basket-put", "vanilla-call", "vanilla-put", "custom-table")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RegimeModel:
    """Regime-switching market with ``k`` regimes and ``d`` assets.

    ``sigma`` has shape (k, d, d), ``generator`` is the k x k rate matrix.
    Derived ``a`` (diffusion matrices) and ``exit_rates`` are filled on
    construction; :func:`validate_model` checks the invariants.
    """

    r: np.ndarray
    sigma: np.ndarray
    generator: np.ndarray
    validated: bool = False
    a: np.ndarray = field(init=False, repr=False)
    exit_rates: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        r = _frozen(np.atleast_1d(self.r))
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim == 1:
            sigma = sigma.reshape(-1, 1, 1)
        lam = np.array(self.generator, dtype=float)
        if lam.ndim == 0:
            lam = lam.reshape(1, 1)
        k = r.shape[0]
        if sigma.ndim != 3 or sigma.shape[0] != k or sigma.shape[1] != sigma.shape[2]:
            raise ModelError(f"sigma must have shape (k, d, d) with k={k}, got {sigma.shape}")
        if lam.shape != (k, k):
            raise ModelError(f"generator must have shape ({k}, {k}), got {lam.shape}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "sigma", _frozen(sigma))
        object.__setattr__(self, "generator", _frozen(lam))
        object.__setattr__(self, "a", _frozen(np.einsum("ilj,imj->ilm", sigma, sigma)))
        object.__setattr__(self, "exit_rates", _frozen(np.abs(np.diag(lam))))

    @property
    def k(self) -> int:
        return self.r.shape[0]

    @property
    def d(self) -> int:
        return self.sigma.shape[1]

    def max_diag_diffusion(self, l: int) -> float:
        return float(np.max(self.a[:, l, l]))

    def __eq__(self, other):
        if not isinstance(other, RegimeModel):
            return NotImplemented
        return (
            np.array_equal(self.r, other.r)
            and np.array_equal(self.sigma, other.sigma)
            and np.array_equal(self.generator, other.generator)
        )

    __hash__ = None


def validate_model(model: RegimeModel) -> RegimeModel:
    """Check generator, rates and volatilities; return a model flagged valid."""
    lam = model.generator
    k = model.k
    for i in range(k):
        for j in range(k):
            if i != j and lam[i, j] < 0:
                raise NegativeOffDiagonal(i, j, float(lam[i, j]))
    for i in range(k):
        total = float(np.sum(lam[i]))
        if abs(total) > ROW_SUM_TOL:
            raise RowSumViolation(i, total)
    for i in range(k):
        if model.r[i] < 0:
            raise NegativeRate(i, float(model.r[i]))
    for i in range(k):
        sv = np.linalg.svd(model.sigma[i], compute_uv=False)
        cond = np.inf if sv[-1] == 0 else sv[0] / sv[-1]
        if not np.isfinite(cond) or cond > COND_MAX:
            raise SingularVolatility(i, float(cond))
        eig = np.linalg.eigvalsh(model.a[i])
        if eig[0] <= 0:
            raise SingularVolatility(i, float(cond))
    if model.validated:
        return model
    return replace(model, validated=True)


@dataclass(frozen=True)
class GrowthBounds:
    """Linear envelope ``-k3 + k4.s <= K(s) <= k1 + k2.s``."""

    k1: float
    k2: tuple
    k3: float
    k4: tuple

    def __post_init__(self):
        object.__setattr__(self, "k2", tuple(float(x) for x in np.atleast_1d(self.k2)))
        object.__setattr__(self, "k4", tuple(float(x) for x in np.atleast_1d(self.k4)))
        if self.k1 < 0 or self.k3 < 0:
            raise ModelError("k1 and k3 must be non-negative")

    def upper(self, s) -> np.ndarray:
        return self.k1 + np.asarray(s, dtype=float) @ np.asarray(self.k2)

    def lower(self, s) -> np.ndarray:
        return -self.k3 + np.asarray(s, dtype=float) @ np.asarray(self.k4)


@dataclass(frozen=True)
class Payoff:
    """Terminal payoff K(s).

    Structured kinds are basket/vanilla calls and puts on ``weights . s``.
    ``custom-table`` is a piecewise-linear table over one asset (``table`` =
    (nodes, values)) or an arbitrary vectorised ``func``; either way the
    user must supply ``growth``.
    """

    kind: str
    strike: float = 0.0
    weights: tuple = (1.0,)
    growth: Optional[GrowthBounds] = None
    table: Optional[tuple] = None
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ModelError(f"unknown payoff kind {self.kind!r}")
        object.__setattr__(self, "weights", tuple(float(w) for w in np.atleast_1d(self.weights)))
        if self.kind.startswith("vanilla") and len(self.weights) != 1:
            raise ModelError("vanilla payoffs are single-asset")
        if self.kind != "custom-table" and self.strike < 0:
            raise ModelError("strike must be non-negative")
        if self.kind == "custom-table":
            if self.table is None and self.func is None:
                raise ModelError("custom-table payoff needs a table or func")
            if self.table is not None:
                nodes, vals = (np.asarray(x, dtype=float) for x in self.table)
                if nodes.ndim != 1 or nodes.shape != vals.shape or np.any(np.diff(nodes) <= 0):
                    raise ModelError("custom table needs increasing nodes and matching values")
                if np.any(vals < 0):
                    raise ModelError("custom table values must be non-negative")
                object.__setattr__(self, "table", (_frozen(nodes), _frozen(vals)))

    @property
    def structured(self) -> bool:
        return self.kind != "custom-table"

    @property
    def is_call(self) -> bool:
        return self.kind.endswith("call")

    def value(self, s) -> np.ndarray:
        """Vectorised K over the last axis of ``s``; accepts zero coordinates."""
        s = np.asarray(s, dtype=float)
        if self.kind == "custom-table":
            if self.func is not None:
                return np.asarray(self.func(s), dtype=float)
            nodes, vals = self.table
            x = s[..., 0]
            out = np.interp(x, nodes, vals)
            if nodes.size > 1:
                slope = (vals[-1] - vals[-2]) / (nodes[-1] - nodes[-2])
                out = np.where(x > nodes[-1], vals[-1] + slope * (x - nodes[-1]), out)
            return np.maximum(out, 0.0)
        basket = s @ np.asarray(self.weights)
        if self.is_call:
            return np.maximum(basket - self.strike, 0.0)
        return np.maximum(self.strike - basket, 0.0)


def payoff_growth_bounds(payoff: Payoff, d: Optional[int] = None) -> GrowthBounds:
    """Linear growth constants of a payoff."""
    if not payoff.structured:
        if payoff.growth is None:
            raise UnboundedPayoff("custom-table payoff requires user-declared growth bounds")
        return payoff.growth
    w = np.asarray(payoff.weights)
    if d is not None and w.size != d:
        raise ModelError(f"payoff has {w.size} weights but model has d={d}")
    zero = np.zeros_like(w)
    if payoff.is_call:
        return GrowthBounds(0.0, w, payoff.strike, w)
    return GrowthBounds(payoff.strike, zero, 0.0, -w)


def check_growth_bounds(payoff: Payoff, bounds: GrowthBounds, d: int, scale: float, n: int = 1000,
                        seed: int = 0) -> bool:
    """Sample s in (0, 10*scale)^d and test the linear envelope."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, 10.0 * scale, size=(n, d))
    s = np.where(s == 0.0, np.finfo(float).tiny, s)
    val = payoff.value(s)
    return bool(np.all(bounds.lower(s) <= val) and np.all(val <= bounds.upper(s)))


def evaluate_payoff(payoff: Payoff, s) -> float:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s <= 0):
        raise NonPositivePrice(f"payoff evaluated at non-positive price {s}")
    return float(payoff.value(s))


@dataclass(frozen=True, eq=False)
class TruncatedDomain:
    """Box ``prod_l (s_lo_l, s_hi_l)`` with horizon ``T``."""

    s_lo: np.ndarray
    s_hi: np.ndarray
    T: float

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.s_lo))
        hi = _frozen(np.atleast_1d(self.s_hi))
        if lo.shape != hi.shape:
            raise ModelError("s_lo and s_hi must have the same length")
        if np.any(lo < 0):
            raise ModelError("s_lo must be non-negative")
        if np.any(lo >= hi):
            raise ModelError("need s_lo < s_hi in every dimension")
        if not self.T > 0:
            raise ModelError("horizon T must be positive")
        object.__setattr__(self, "s_lo", lo)
        object.__setattr__(self, "s_hi", hi)
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return self.s_lo.shape[0]

    def interior(self, t: float, s) -> bool:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return bool(0.0 <= t < self.T and np.all(s > self.s_lo) and np.all(s < self.s_hi))

    def closure(self, t: float, s) -> bool:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return bool(0.0 <= t <= self.T and np.all(s >= self.s_lo) and np.all(s <= self.s_hi))

    def on_gamma(self, s) -> np.ndarray:
        """Mask of points on Gamma = boundary of R inside the open orthant."""
        s = np.asarray(s, dtype=float)
        on_edge = np.any(np.isclose(s, self.s_hi) | ((self.s_lo > 0) & np.isclose(s, self.s_lo)), axis=-1)
        return on_edge & np.all(s > 0, axis=-1)

    def scaled(self, s_hi) -> "TruncatedDomain":
        return TruncatedDomain(self.s_lo, s_hi, self.T)


@dataclass(frozen=True, eq=False)
class PriceField:
    """Values on (time, space multi-index, regime) with log-space interpolation.

    ``values`` has shape (n_t, n_1, ..., n_d, k). Interpolation is multilinear
    in ln s over the strictly positive nodes (linear extrapolation outside),
    and linear in t.
    """

    t_grid: np.ndarray
    s_grid: tuple
    values: np.ndarray

    def __post_init__(self):
        t = _frozen(self.t_grid)
        grids = tuple(_frozen(g) for g in self.s_grid)
        vals = _frozen(self.values)
        shape = (t.size,) + tuple(g.size for g in grids)
        if vals.shape[:-1] != shape:
            raise ModelError(f"values shape {vals.shape} inconsistent with grids {shape}")
        if np.any(np.diff(t) <= 0) or any(np.any(np.diff(g) <= 0) for g in grids):
            raise ModelError("grids must be strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise ModelError("price field contains non-finite values")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "s_grid", grids)
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return len(self.s_grid)

    @property
    def k(self) -> int:
        return self.values.shape[-1]

    def _positive(self):
        masks = [g > 0 for g in self.s_grid]
        logs = tuple(np.log(g[m]) for g, m in zip(self.s_grid, masks))
        idx = np.ix_(*[np.flatnonzero(m) for m in masks])
        return logs, idx

    def slice_at(self, t: float) -> np.ndarray:
        """Values at time ``t`` (linear in t), shape (n_1, ..., n_d, k)."""
        tg = self.t_grid
        if t <= tg[0]:
            return self.values[0]
        if t >= tg[-1]:
            return self.values[-1]
        b = int(np.searchsorted(tg, t))
        a = b - 1
        w = (t - tg[a]) / (tg[b] - tg[a])
        return (1.0 - w) * self.values[a] + w * self.values[b]

    def interpolator(self, t: float) -> RegularGridInterpolator:
        logs, idx = self._positive()
        sl = self.slice_at(t)[idx]
        return RegularGridInterpolator(logs, sl, method="linear", bounds_error=False, fill_value=None)

    def at(self, t: float, s, regime: Optional[int] = None):
        """Interpolate at time ``t`` and points ``s`` (..., d)."""
        s = np.asarray(s, dtype=float)
        pts = np.log(np.atleast_2d(s.reshape(-1, self.d)))
        out = self.interpolator(t)(pts)
        out = out.reshape(s.shape[:-1] + (self.k,)) if s.ndim > 1 else out.reshape(self.k)
        return out if regime is None else out[..., regime]

    def nodes(self) -> np.ndarray:
        """All spatial nodes, shape (n_1, ..., n_d, d)."""
        mesh = np.meshgrid(*self.s_grid, indexing="ij")
        return np.stack(mesh, axis=-1)


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def model_from_dict(cfg: dict) -> RegimeModel:
    try:
        d = int(cfg["d"])
        k = int(cfg["k"])
        sigma = np.array(cfg["sigma"], dtype=float).reshape(k, d, d)
        lam = np.array(cfg["lambda"], dtype=float).reshape(k, k)
        r = np.array(cfg["r"], dtype=float).reshape(k)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed model block: {exc}") from exc
    return validate_model(RegimeModel(r=r, sigma=sigma, generator=lam))


def payoff_from_dict(cfg: dict) -> Payoff:
    try:
        kind = cfg["kind"]
        growth = None
        if "growth" in cfg:
            g = cfg["growth"]
            growth = GrowthBounds(g["k1"], g["k2"], g["k3"], g["k4"])
        table = None
        if "table" in cfg:
            table = (cfg["table"]["nodes"], cfg["table"]["values"])
        return Payoff(kind=kind, strike=float(cfg.get("strike", 0.0)),
                      weights=tuple(cfg.get("weights", (1.0,))), growth=growth, table=table)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed payoff block: {exc}") from exc


def domain_from_dict(cfg: dict) -> TruncatedDomain:
    try:
        return TruncatedDomain(cfg["s_lo"], cfg["s_hi"], cfg["T"])
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed domain block: {exc}") from exc


@dataclass(frozen=True)
class Problem:
    model: RegimeModel
    payoff: Payoff
    domain: TruncatedDomain
    bounds: GrowthBounds
    raw: dict


def problem_from_dict(cfg: dict) -> Problem:
    if "payoff" not in cfg or "domain" not in cfg:
        raise ModelError("config needs 'payoff' and 'domain' blocks")
    model = model_from_dict(cfg)
    payoff = payoff_from_dict(cfg["payoff"])
    domain = domain_from_dict(cfg["domain"])
    if domain.d != model.d:
        raise ModelError(f"domain has d={domain.d}, model has d={model.d}")
    bounds = payoff_growth_bounds(payoff, model.d)
    scale = max(payoff.strike, float(np.max(domain.s_hi)) / 10.0, 1.0)
    if not check_growth_bounds(payoff, bounds, model.d, scale):
        raise ModelError("payoff violates its declared growth bounds on the validation sample")
    return Problem(model, payoff, domain, bounds, cfg)


def load_problem(path) -> Problem:
    """Read a JSON config file. ``OSError`` propagates for I/O failures."""
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"config is not valid JSON: {exc}") from exc
    return problem_from_dict(cfg)


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.exp(np.linspace(np.log(lo), np.log(hi), n))


def as_points(s: Sequence, d: int) -> np.ndarray:
    return np.asarray(s, dtype=float).reshape(-1, d)
