"""Theta-scheme finite differences for the truncated boundary-value problem.

The k coupled equations

    d_t psi_i + sum_l r_i s_l d_l psi_i + 1/2 sum_lm a_lm(i) s_l s_m d_lm psi_i
        - r_i psi_i + sum_j lam_ij psi_j = 0

are marched backward from psi(T) = K on a uniform box grid.  Nodes on the
artificial boundary (faces s_l = s_hi_l, and faces s_l = s_lo_l > 0) carry
Dirichlet data h.  On faces s_l = 0 every s_l-term vanishes, so the interior
stencil reduces to the degenerate equation there without extra data.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .bsm import eta
from .errors import CFLWarning, LinearSolveFailure, ModelError, ProbeOutsideDomain
from .model import GrowthBounds, Payoff, PriceField, RegimeModel, TruncatedDomain, payoff_growth_bounds

BOUNDARY_KINDS = ("payoff-extension", "discounted-linear-envelope", "zero", "custom-grid", "frozen-bsm")
SCHEMES = {"implicit-euler": 1.0, "crank-nicolson": 0.5}
COUPLINGS = ("implicit-block", "explicit-lagged")


@dataclass(frozen=True)
class BoundaryData:
    """Artificial boundary data h(t, s, i) on Gamma.

    ``custom-grid`` takes ``func(t, s, i)`` with s of shape (m, d);
    ``frozen-bsm`` uses the frozen-regime value eta_i (exact when k = 1).
    """

    kind: str = "discounted-linear-envelope"
    func: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in BOUNDARY_KINDS:
            raise ModelError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "custom-grid" and self.func is None:
            raise ModelError("custom-grid boundary needs a callable")

    def evaluate(self, model: RegimeModel, payoff: Payoff, T: float, t: float, s,
                 bounds: Optional[GrowthBounds] = None) -> np.ndarray:
        """Values (m, k) at points s (m, d)."""
        s = np.asarray(s, dtype=float).reshape(-1, model.d)
        m, k = s.shape[0], model.k
        if self.kind == "zero":
            return np.zeros((m, k))
        if self.kind == "payoff-extension":
            return np.repeat(payoff.value(s)[:, None], k, axis=1)
        if self.kind == "discounted-linear-envelope":
            b = bounds if bounds is not None else payoff_growth_bounds(payoff, model.d)
            disc = np.exp(-float(np.min(model.r)) * (T - t))
            return np.repeat((b.k1 * disc + s @ np.asarray(b.k2))[:, None], k, axis=1)
        if self.kind == "frozen-bsm":
            if m == 0:
                return np.zeros((0, k))
            return np.stack([np.atleast_1d(eta(model, payoff, T, t, s, i)) for i in range(k)], axis=1)
        out = np.empty((m, k))
        for i in range(k):
            out[:, i] = np.asarray(self.func(t, s, i), dtype=float).reshape(m)
        return out


@dataclass(frozen=True)
class FdConfig:
    M: int = 200
    N: tuple = (201,)
    scheme: str = "crank-nicolson"
    coupling: str = "implicit-block"
    rannacher: int = 2

    def __post_init__(self):
        object.__setattr__(self, "N", tuple(int(n) for n in np.atleast_1d(self.N)))
        if self.M < 1:
            raise ModelError("fd M must be >= 1")
        if any(n < 3 for n in self.N):
            raise ModelError("fd needs N_l >= 3 nodes per dimension")
        if self.scheme not in SCHEMES:
            raise ModelError(f"unknown scheme {self.scheme!r}")
        if self.coupling not in COUPLINGS:
            raise ModelError(f"unknown coupling {self.coupling!r}")

    def nodes_for(self, d: int) -> tuple:
        return self.N if len(self.N) == d else self.N * d


def space_grids(domain: TruncatedDomain, config: FdConfig) -> tuple:
    n = config.nodes_for(domain.d)
    return tuple(np.linspace(domain.s_lo[l], domain.s_hi[l], n[l]) for l in range(domain.d))


def dirichlet_mask(domain: TruncatedDomain, grids) -> np.ndarray:
    """Boolean mask over the flattened node set: True on Gamma."""
    shape = tuple(g.size for g in grids)
    mask = np.zeros(shape, dtype=bool)
    for l, g in enumerate(grids):
        sl = [slice(None)] * len(grids)
        sl[l] = -1
        mask[tuple(sl)] = True
        if domain.s_lo[l] > 0:
            sl[l] = 0
            mask[tuple(sl)] = True
    return mask.ravel()


def _operators(model: RegimeModel, grids, interior: np.ndarray, explicit_coupling: bool):
    """Sparse implicit and explicit parts of the spatial operator.

    Unknowns are ordered regime-major: index = i * n_nodes + node.  Only
    interior rows are populated; cross derivatives always go explicit.
    """
    d, k = model.d, model.k
    shape = tuple(g.size for g in grids)
    n_nodes = int(np.prod(shape))
    h = np.array([g[1] - g[0] for g in grids])
    multi = np.indices(shape).reshape(d, -1).T
    coords = np.stack([grids[l][multi[:, l]] for l in range(d)], axis=1)
    strides = np.array([int(np.prod(shape[l + 1:])) for l in range(d)])
    rows_i = np.flatnonzero(interior)
    ci, cj, cv = [], [], []
    ei, ej, ev = [], [], []

    def add(store, r, c, v):
        keep = v != 0
        store[0].append(r[keep])
        store[1].append(c[keep])
        store[2].append(v[keep])

    impl = (ci, cj, cv)
    expl = (ei, ej, ev)
    for i in range(k):
        off = i * n_nodes
        a = model.a[i]
        diag = np.full(rows_i.size, -model.r[i] - model.exit_rates[i])
        for l in range(d):
            s_l = coords[rows_i, l]
            live = s_l > 0
            r_ = rows_i[live]
            s_ = s_l[live]
            drift = model.r[i] * s_ / (2 * h[l])
            diff = 0.5 * a[l, l] * s_**2 / h[l] ** 2
            add(impl, off + r_, off + r_ + strides[l], drift + diff)
            add(impl, off + r_, off + r_ - strides[l], diff - drift)
            diag[live] -= 2 * diff
        add(impl, off + rows_i, off + rows_i, diag)
        for l in range(d):
            for m in range(l + 1, d):
                live = (coords[rows_i, l] > 0) & (coords[rows_i, m] > 0)
                r_ = rows_i[live]
                c = a[l, m] * coords[r_, l] * coords[r_, m] / (4 * h[l] * h[m])
                for sl_, sm_, sign in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                    add(expl, off + r_, off + r_ + sl_ * strides[l] + sm_ * strides[m], sign * c)
        for j in range(k):
            if j == i or model.generator[i, j] == 0:
                continue
            vals = np.full(rows_i.size, model.generator[i, j])
            add(expl if explicit_coupling else impl, off + rows_i, j * n_nodes + rows_i, vals)
    size = k * n_nodes

    def build(store):
        if not store[0]:
            return sp.csr_matrix((size, size))
        return sp.csr_matrix((np.concatenate(store[2]), (np.concatenate(store[0]), np.concatenate(store[1]))),
                             shape=(size, size))

    return build(impl), build(expl), coords


def solve_ibvp(model: RegimeModel, payoff: Payoff, domain: TruncatedDomain,
               boundary: BoundaryData = BoundaryData(), config: FdConfig = FdConfig(),
               bounds: Optional[GrowthBounds] = None) -> PriceField:
    """Backward theta-scheme march; returns values at every time level."""
    d, k = model.d, model.k
    if domain.d != d:
        raise ModelError("domain and model dimensions differ")
    grids = space_grids(domain, config)
    shape = tuple(g.size for g in grids)
    n_nodes = int(np.prod(shape))
    gamma = dirichlet_mask(domain, grids)
    interior = ~gamma
    explicit = config.coupling == "explicit-lagged"
    L_imp, L_exp, coords = _operators(model, grids, interior, explicit)
    T = domain.T
    dt = T / config.M
    if explicit and np.max(model.exit_rates) * dt > 1:
        warnings.warn(f"explicit regime coupling with lam_max*dt = {np.max(model.exit_rates) * dt:.3g} > 1",
                      CFLWarning, stacklevel=2)
    t_grid = np.linspace(0.0, T, config.M + 1)
    size = k * n_nodes
    gamma_all = np.tile(gamma, k)
    keep = sp.diags((~gamma_all).astype(float))
    eye = sp.identity(size, format="csr")
    bnodes = coords[gamma]

    factors = {}

    def factor(theta, step):
        if theta not in factors:
            A = (eye - theta * dt * (keep @ L_imp)).tocsc()
            try:
                factors[theta] = splu(A)
            except RuntimeError as exc:
                cond = float(np.linalg.cond(A.toarray())) if size <= 2000 else float("inf")
                raise LinearSolveFailure(step, cond) from exc
        return factors[theta]

    values = np.empty((config.M + 1, n_nodes, k))
    psi = np.repeat(payoff.value(coords)[:, None], k, axis=1)
    if bnodes.size:
        psi[gamma] = boundary.evaluate(model, payoff, T, T, bnodes, bounds)
    values[-1] = psi
    base_theta = SCHEMES[config.scheme]
    vec = psi.T.ravel()
    for step, n in enumerate(range(config.M - 1, -1, -1)):
        theta = 1.0 if (base_theta < 1 and step < config.rannacher) else base_theta
        rhs = vec + (1 - theta) * dt * (L_imp @ vec) + dt * (L_exp @ vec)
        if bnodes.size:
            h = boundary.evaluate(model, payoff, T, t_grid[n], bnodes, bounds)
            rhs = rhs.reshape(k, n_nodes)
            rhs[:, gamma] = h.T
            rhs = rhs.ravel()
        vec = factor(theta, step).solve(rhs)
        if not np.all(np.isfinite(vec)):
            raise LinearSolveFailure(step, float("inf"))
        values[n] = vec.reshape(k, n_nodes).T
    return PriceField(t_grid, grids, values.reshape((config.M + 1,) + shape + (k,)))


def sample_field(field: PriceField, t: float, s) -> np.ndarray:
    """Multilinear interpolation in (t, s) on the FD grid; returns (m, k)."""
    s = np.asarray(s, dtype=float).reshape(-1, field.d)
    axes = (field.t_grid,) + tuple(field.s_grid)
    rgi = RegularGridInterpolator(axes, field.values, method="linear")
    pts = np.column_stack([np.full(s.shape[0], t), s])
    return rgi(pts)


def matched_config(config: FdConfig, small: TruncatedDomain, large: TruncatedDomain) -> FdConfig:
    """Node counts on ``large`` that keep the spacing used on ``small``."""
    n = config.nodes_for(small.d)
    out = []
    for l in range(small.d):
        ds = (small.s_hi[l] - small.s_lo[l]) / (n[l] - 1)
        out.append(int(round((large.s_hi[l] - large.s_lo[l]) / ds)) + 1)
    return FdConfig(config.M, tuple(out), config.scheme, config.coupling, config.rannacher)


@dataclass(frozen=True)
class Probe:
    t: float
    s: tuple
    regime: int = 0


def measured_truncation_error(model: RegimeModel, payoff: Payoff, domain_small: TruncatedDomain,
                              domain_large: TruncatedDomain, boundary: BoundaryData, config: FdConfig,
                              probes, bounds: Optional[GrowthBounds] = None):
    """|psi_small - psi_large| at each probe; also returns both fields."""
    if np.any(domain_large.s_lo > domain_small.s_lo) or np.any(domain_large.s_hi < domain_small.s_hi) \
            or domain_large.T != domain_small.T:
        raise ModelError("small domain must lie inside the large one with the same horizon")
    probes = [p if isinstance(p, Probe) else Probe(*p) for p in probes]
    for p in probes:
        if not domain_small.closure(p.t, p.s):
            raise ProbeOutsideDomain(f"probe t={p.t}, s={p.s} lies outside the small domain")
    small = solve_ibvp(model, payoff, domain_small, boundary, config, bounds)
    large = solve_ibvp(model, payoff, domain_large, boundary, matched_config(config, domain_small, domain_large),
                       bounds)
    out = np.empty(len(probes))
    for n, p in enumerate(probes):
        a = sample_field(small, p.t, p.s)[0, p.regime]
        b = sample_field(large, p.t, p.s)[0, p.regime]
        out[n] = abs(a - b)
    return out, small, large


# --------------------------------------------------------------------------
# dumps
# --------------------------------------------------------------------------

MAGIC = b"TCRT"
VERSION = 1


def write_binary(field: PriceField, path) -> None:
    """16-byte header (magic, uint16 version, uint16 d, uint32 k, uint32 n_t), then grids and values."""
    d, k, nt = field.d, field.k, field.t_grid.size
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HHII", VERSION, d, k, nt))
        fh.write(struct.pack(f"<{d}I", *[g.size for g in field.s_grid]))
        fh.write(np.ascontiguousarray(field.t_grid, dtype="<f8").tobytes())
        for g in field.s_grid:
            fh.write(np.ascontiguousarray(g, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_binary(path) -> PriceField:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ModelError("not a field dump (bad magic)")
    version, d, k, nt = struct.unpack("<HHII", raw[4:16])
    if version != VERSION:
        raise ModelError(f"unsupported dump version {version}")
    pos = 16
    counts = struct.unpack(f"<{d}I", raw[pos:pos + 4 * d])
    pos += 4 * d

    def take(n):
        nonlocal pos
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        return arr

    t_grid = take(nt)
    grids = tuple(take(c) for c in counts)
    values = take(nt * int(np.prod(counts)) * k).reshape((nt,) + tuple(counts) + (k,))
    return PriceField(t_grid.copy(), tuple(g.copy() for g in grids), values.copy())
