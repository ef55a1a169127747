"""Domain-truncation error bounds.

The interior error of a Dirichlet-truncated solve is bounded by the far-field
boundary discrepancy times a decay factor per dimension.  Two decay factors
are available: ``psi_kan`` (Gaussian-in-log, valid only on the subdomain
where ln(s^u/s) + D (T - t) >= 0) and ``psi_bar`` (valid everywhere);
``psi_hat`` takes the smaller one where both apply.

The supersolutions y_l behind these bounds are exposed too, with a
constructive parameter choice and an exact residual check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AnchorInfeasible, InvalidSupersolution, ModelError, ProbeOutsideDomain, ToleranceUnreachable
from .fd import BoundaryData
from .model import GrowthBounds, Payoff, RegimeModel, TruncatedDomain, payoff_growth_bounds

RESIDUAL_TOL = 1e-12
ANCHOR_SLACK = 1.1
GAMMA_SHRINK = 0.9
K_CAP = 2.0**200
MAX_EXP = 700.0  # beyond this exp(max_a / D) overflows; tiny D > 0 takes the verified search instead


def diffusion_gap(model: RegimeModel, l: int) -> float:
    """D_l = min_i (a_ll(i) - 2 r(i)); round-off-level gaps are snapped to 0."""
    a = model.a[:, l, l]
    gap = a - 2.0 * model.r
    noise = 8.0 * np.finfo(float).eps * (a + 2.0 * np.abs(model.r))
    return float(np.min(np.where(np.abs(gap) <= noise, 0.0, gap)))


def growth_envelope(model: RegimeModel, bounds: GrowthBounds, t, s, T: float):
    """(lower, upper) linear-growth envelope of the exact solution at (t, s)."""
    disc = np.exp(-float(np.min(model.r)) * (T - np.asarray(t, dtype=float)))
    s = np.asarray(s, dtype=float)
    lin_up = s @ np.asarray(bounds.k2)
    lin_lo = s @ np.asarray(bounds.k4)
    return -bounds.k3 * disc + lin_lo, bounds.k1 * disc + lin_up


# --------------------------------------------------------------------------
# far-field boundary discrepancy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FarBound:
    value: float
    value_v1: float
    coarse: float
    argmax_t: float
    argmax_s: tuple


def gamma_grid(domain: TruncatedDomain, n: int) -> np.ndarray:
    """Points on Gamma: far facets s_l = s^u_l, and near facets s_l = s^b_l > 0."""
    d = domain.d
    axes = [np.linspace(domain.s_lo[l], domain.s_hi[l], n) for l in range(d)]
    pts = []
    for l in range(d):
        others = [axes[m] for m in range(d) if m != l]
        mesh = np.stack(np.meshgrid(*others, indexing="ij"), axis=-1).reshape(-1, d - 1) if others \
            else np.zeros((1, 0))
        for face in [domain.s_hi[l]] + ([domain.s_lo[l]] if domain.s_lo[l] > 0 else []):
            p = np.insert(mesh, l, face, axis=1)
            pts.append(p)
    out = np.concatenate(pts)
    return out[np.all(out > 0, axis=1)]


def _far_sup(model, payoff, bounds, boundary, domain, t0, n_t, n_s, reference):
    T = domain.T
    times = np.linspace(t0, T, n_t)
    pts = gamma_grid(domain, n_s)
    weight = 1.0 + pts.sum(axis=1)
    best, best_v1, arg = 0.0, 0.0, (t0, tuple(pts[0]))
    for t in times:
        h = boundary.evaluate(model, payoff, T, t, pts, bounds)
        if reference is None:
            lo, up = growth_envelope(model, bounds, t, pts, T)
            gap = np.maximum(np.abs(up[:, None] - h), np.abs(lo[:, None] - h))
        else:
            ref = np.column_stack([np.asarray(reference(t, pts, i), dtype=float).reshape(-1)
                                   for i in range(model.k)])
            gap = np.abs(ref - h)
        g = gap.max(axis=1)
        j = int(np.argmax(g))
        if g[j] > best:
            best, arg = float(g[j]), (float(t), tuple(pts[j]))
        best_v1 = max(best_v1, float(np.max(g / weight)))
    return best, best_v1, arg


def far_boundary_bound(model: RegimeModel, payoff: Payoff, boundary: BoundaryData, domain: TruncatedDomain,
                       t0: float = 0.0, n_t: int = 33, n_s: int = 33, bounds: Optional[GrowthBounds] = None,
                       reference: Optional[Callable] = None) -> FarBound:
    """sup over [t0, T] x Gamma x regimes of the envelope distance to h.

    Evaluated on a grid and re-evaluated on a 4x finer grid; the larger value
    is returned.  With ``reference(t, s, i)`` the distance |reference - h| is
    used instead of the envelope distance.
    """
    bounds = bounds if bounds is not None else payoff_growth_bounds(payoff, model.d)
    coarse, coarse_v1, arg_c = _far_sup(model, payoff, bounds, boundary, domain, t0, n_t, n_s, reference)
    fine, fine_v1, arg_f = _far_sup(model, payoff, bounds, boundary, domain, t0, 4 * (n_t - 1) + 1,
                                    4 * (n_s - 1) + 1, reference)
    arg = arg_f if fine >= coarse else arg_c
    return FarBound(max(coarse, fine), max(coarse_v1, fine_v1), coarse, arg[0], arg[1])


# --------------------------------------------------------------------------
# supersolutions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SupersolutionParams:
    l: int
    D: float
    gamma: float
    k: float
    eps: float
    max_a: float
    anchor: Optional[tuple] = None


def _caps(D: float, max_a: float, rho: float):
    return (1.0 + D * rho) / (2.0 * max_a), rho / 2.0


def default_anchor(model: RegimeModel, l: int, domain: TruncatedDomain):
    """Midpoint in s, and the earliest t with ln(s^u/s) >= -1.1 D (T - t)."""
    D = diffusion_gap(model, l)
    s_hat = 0.5 * (domain.s_lo[l] + domain.s_hi[l])
    ell = np.log(domain.s_hi[l] / s_hat)
    if D >= 0:
        return 0.0, s_hat
    t_hat = max(0.0, domain.T - ell / (ANCHOR_SLACK * (-D)))
    return t_hat, s_hat


def supersolution_params(model: RegimeModel, l: int, domain: TruncatedDomain,
                         anchor: Optional[tuple] = None) -> SupersolutionParams:
    """Parameters making y_l a supersolution on (0, T) x R."""
    D = diffusion_gap(model, l)
    max_a = model.max_diag_diffusion(l)
    T = domain.T
    if D > 0 and max_a / D < MAX_EXP:
        gamma = 1.0 / (2.0 * max_a)
        k = float(np.exp(max_a / D))
        eps = np.log(k) / (max_a + abs(D))
        return SupersolutionParams(l, D, gamma, k, eps, max_a)
    t_hat, s_hat = anchor if anchor is not None else default_anchor(model, l, domain)
    ell = np.log(domain.s_hi[l] / s_hat)
    if not (0.0 <= t_hat < T) or not (s_hat > 0) or not ell > -D * (T - t_hat):
        raise AnchorInfeasible(f"anchor (t={t_hat}, s={s_hat}) violates ln(s^u/s) > -D (T - t) with D={D}")
    rho = (T - t_hat) / ell
    gamma = GAMMA_SHRINK * min(_caps(D, max_a, rho))
    k = 2.0
    while k <= K_CAP:
        params = SupersolutionParams(l, D, gamma, k, rho * np.log(k), max_a, (t_hat, s_hat))
        if max_bracket(params, model, T) <= 0.0:
            return params
        k *= 2.0
    raise InvalidSupersolution(f"no k <= {K_CAP:g} yields a supersolution for dimension {l}")


def y_eval(params: SupersolutionParams, T: float, s_u: float, t, s_l):
    tau = T + params.eps - np.asarray(t, dtype=float)
    L = np.log(np.asarray(s_l, dtype=float) / (params.k * s_u))
    return np.exp(-params.gamma * L**2 / tau) / np.sqrt(tau)


def _bracket(params, a, r, tau, L):
    g = params.gamma
    return g * (2 * a * g - 1) * L**2 + g * (a - 2 * r) * tau * L + (0.5 - g * a - r * tau) * tau


def supersolution_residual(params: SupersolutionParams, model: RegimeModel, T: float, s_u: float, t, s_l, i: int):
    """(d_t + L) y_l in regime i, i.e. y_l / tau^2 times the closed-form bracket."""
    tau = T + params.eps - np.asarray(t, dtype=float)
    L = np.log(np.asarray(s_l, dtype=float) / (params.k * s_u))
    a = model.a[i, params.l, params.l]
    y = y_eval(params, T, s_u, t, s_l)
    return y / tau**2 * _bracket(params, a, model.r[i], tau, L)


def max_bracket(params: SupersolutionParams, model: RegimeModel, T: float, n_tau: int = 2001) -> float:
    """sup of the bracket over s in (0, s^u], t in [0, T] and all regimes.

    For fixed tau the bracket is quadratic in L = ln(s/(k s^u)) <= -ln k, so
    the sup over s is taken exactly; tau is swept on a dense grid.
    """
    tau = np.linspace(params.eps, T + params.eps, n_tau)
    L_max = -np.log(params.k)
    worst = -np.inf
    g = params.gamma
    for i in range(model.k):
        a = model.a[i, params.l, params.l]
        r = model.r[i]
        c2 = g * (2 * a * g - 1)
        c1 = g * (a - 2 * r) * tau
        c0 = (0.5 - g * a - r * tau) * tau
        end = c2 * L_max**2 + c1 * L_max + c0
        if c2 < 0:
            L_star = -c1 / (2 * c2)
            vertex = c0 - c1**2 / (4 * c2)
            val = np.where(L_star <= L_max, vertex, end)
        elif c2 == 0:
            val = np.where(c1 > 0, end, np.where(c1 == 0, c0, np.inf))
        else:
            val = np.full_like(tau, np.inf)
        worst = max(worst, float(np.max(val)))
    return worst


def h_ratio(params: SupersolutionParams, T: float, s_u: float, t, s_l):
    """y_l(t, s) / min over [t, T] of y_l on the far facet (min is at an endpoint)."""
    t = np.asarray(t, dtype=float)
    num = y_eval(params, T, s_u, t, s_l)
    den = np.minimum(y_eval(params, T, s_u, t, s_u), y_eval(params, T, s_u, T, s_u))
    return num / den


def abstract_near_field(params: Sequence[SupersolutionParams], weights: Sequence[float], boundary_ratio_sup: float,
                        model: RegimeModel, domain: TruncatedDomain, t: float, s) -> float:
    """boundary_ratio_sup * sum_l C_l y_l(t, s), after checking every y_l."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    total = 0.0
    for p, c in zip(params, weights):
        if c < 0:
            raise ModelError("near-field weights must be non-negative")
        if max_bracket(p, model, domain.T) > RESIDUAL_TOL:
            raise InvalidSupersolution(f"y_{p.l} is not a supersolution")
        total += c * float(y_eval(p, domain.T, domain.s_hi[p.l], t, s[p.l]))
    return boundary_ratio_sup * total


# --------------------------------------------------------------------------
# closed-form decay factors
# --------------------------------------------------------------------------

def _ell(domain: TruncatedDomain, l: int, s_l):
    return np.log(domain.s_hi[l] / np.asarray(s_l, dtype=float))


def psi_bar(model: RegimeModel, l: int, t, s_l, domain: TruncatedDomain):
    """Globally valid decay factor."""
    D = diffusion_gap(model, l)
    Dp = max(D, 0.0)
    A = model.max_diag_diffusion(l)
    tau = domain.T - np.asarray(t, dtype=float)
    ell = _ell(domain, l, s_l)
    num = -ell * (Dp / A * ell + 2.0) + (A + abs(D)) * tau
    den = 2.0 * (Dp * tau + A / (A + Dp))
    return np.exp(num / den)


def psi_kan(model: RegimeModel, l: int, t, s_l, domain: TruncatedDomain):
    """Gaussian-in-log decay factor; meaningful as a bound only on the in_domain_D set."""
    D = diffusion_gap(model, l)
    A = model.max_diag_diffusion(l)
    tau = domain.T - np.asarray(t, dtype=float)
    ell = _ell(domain, l, s_l)
    tau_b, ell_b = np.broadcast_arrays(tau, ell)
    out = np.empty(np.shape(tau_b))
    live = tau_b > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.exp(-ell_b * (ell_b + min(0.0, D) * tau_b) / (2.0 * A * tau_b))
    out[live] = val[live]
    out[~live] = np.where(ell_b[~live] <= 0, 1.0, 0.0)
    return out if out.ndim else float(out)


def in_domain_D(model: RegimeModel, t, s, domain: TruncatedDomain):
    """ln(s^u_l / s_l) + D_l (T - t) >= 0 for every l; s has shape (..., d)."""
    s = np.asarray(s, dtype=float)
    tau = domain.T - np.asarray(t, dtype=float)
    ok = True
    for l in range(model.d):
        ok = ok & (_ell(domain, l, s[..., l]) + diffusion_gap(model, l) * tau >= 0)
    return ok


def psi_hat(model: RegimeModel, l: int, t, s, domain: TruncatedDomain):
    """min(psi_kan, psi_bar) inside the validity set of psi_kan, psi_bar outside."""
    s = np.asarray(s, dtype=float)
    pb = psi_bar(model, l, t, s[..., l], domain)
    pk = psi_kan(model, l, t, s[..., l], domain)
    return np.where(in_domain_D(model, t, s, domain), np.minimum(pk, pb), pb)


@dataclass
class CompareGrid:
    t: np.ndarray
    s: np.ndarray
    psi: np.ndarray
    psi_bar: np.ndarray
    psi_hat: np.ndarray
    in_D: np.ndarray

    @property
    def diff(self) -> np.ndarray:
        return self.psi - self.psi_bar


def compare_grid(model: RegimeModel, domain: TruncatedDomain, n_t: int = 200, n_s: int = 200, l: int = 0,
                 s_rest=None) -> CompareGrid:
    """psi, psi_bar, psi_hat over t in [0, T] x s_l in (0, s^u] (other coordinates fixed)."""
    t = np.linspace(0.0, domain.T, n_t)
    s = np.linspace(0.0, domain.s_hi[l], n_s + 1)[1:]
    tt, ss = np.meshgrid(t, s, indexing="ij")
    pts = np.empty(tt.shape + (model.d,))
    rest = np.asarray(s_rest if s_rest is not None else 0.5 * domain.s_hi, dtype=float)
    pts[...] = rest
    pts[..., l] = ss
    pk = psi_kan(model, l, tt, ss, domain)
    pb = psi_bar(model, l, tt, ss, domain)
    inside = in_domain_D(model, tt, pts, domain)
    ph = np.where(inside, np.minimum(pk, pb), pb)
    return CompareGrid(tt, ss, pk, pb, ph, inside)


# --------------------------------------------------------------------------
# certification
# --------------------------------------------------------------------------

@dataclass
class BoundReport:
    t: float
    s: tuple
    regime: int
    psi: tuple
    psi_bar: tuple
    psi_hat: tuple
    in_D: bool
    far_bound: float
    far_bound_v1: float
    certified: float
    certified_psi_bar_only: float
    extras: dict = field(default_factory=dict)


def _require_zero_floor(domain: TruncatedDomain):
    if np.any(domain.s_lo > 0):
        raise ModelError("certification needs s_lo = 0: the decay factors cover far facets only")


def _report(model, payoff, boundary, domain, t, s, i, bounds, reference, n_t, n_s) -> BoundReport:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    far = far_boundary_bound(model, payoff, boundary, domain, t0=t, n_t=n_t, n_s=n_s, bounds=bounds,
                             reference=reference)
    pk = tuple(float(psi_kan(model, l, t, s[l], domain)) for l in range(model.d))
    pb = tuple(float(psi_bar(model, l, t, s[l], domain)) for l in range(model.d))
    inside = bool(in_domain_D(model, t, s, domain))
    ph = tuple(min(a, b) if inside else b for a, b in zip(pk, pb))
    return BoundReport(float(t), tuple(s), int(i), pk, pb, ph, inside, far.value, far.value_v1,
                       far.value * sum(ph), far.value * sum(pb))


def certify_point(model: RegimeModel, payoff: Payoff, boundary: BoundaryData, domain: TruncatedDomain, t: float,
                  s, i: int = 0, bounds: Optional[GrowthBounds] = None, reference: Optional[Callable] = None,
                  n_t: int = 33, n_s: int = 33) -> BoundReport:
    """Certified |exact - truncated| at an interior point."""
    _require_zero_floor(domain)
    if not domain.interior(t, s):
        raise ProbeOutsideDomain(f"probe t={t}, s={s} is not interior to the truncated domain")
    return _report(model, payoff, boundary, domain, t, s, i, bounds, reference, n_t, n_s)


@dataclass(frozen=True)
class SizeResult:
    c: float
    s_hi: tuple
    achieved: float


def size_domain(model: RegimeModel, payoff: Payoff, boundary: BoundaryData, T: float, t: float, s, i: int,
                tolerance: float, bounds: Optional[GrowthBounds] = None, cap: float = 2.0**20,
                rel_tol: float = 1e-10, n_t: int = 33, n_s: int = 33) -> SizeResult:
    """Smallest c >= 1 with certified bound <= tolerance for s^u = c * s (doubling, then bisection)."""
    if not tolerance > 0:
        raise ModelError("tolerance must be positive")
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s <= 0):
        raise ModelError("probe prices must be positive")

    def bound(c):
        dom = TruncatedDomain(np.zeros_like(s), c * s, T)
        return _report(model, payoff, boundary, dom, t, s, i, bounds, None, n_t, n_s).certified

    b1 = bound(1.0)
    if b1 <= tolerance:
        return SizeResult(1.0, tuple(s), b1)
    lo, hi = 1.0, 2.0
    b_hi = bound(hi)
    while b_hi > tolerance:
        if hi >= cap:
            raise ToleranceUnreachable(b_hi, tolerance)
        lo, hi = hi, min(2.0 * hi, cap)
        b_hi = bound(hi)
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        b_mid = bound(mid)
        if b_mid <= tolerance:
            hi, b_hi = mid, b_mid
        else:
            lo = mid
    return SizeResult(hi, tuple(hi * s), b_hi)
