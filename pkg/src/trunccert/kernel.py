"""Frozen-regime lognormal transition density, quadrature and sampling.

For regime ``i`` and elapsed time ``v`` the asset vector started at ``s``
is ``exp(Z)`` with ``Z ~ N(ln s + (r - diag(a)/2) v, v a)``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import CholeskyFailure, DegenerateTime, NonPositiveCoordinate, QuadratureDivergence
from .model import RegimeModel

DEFAULT_ORDER = 48
_CHUNK = 2_000_000


def _check_time(v):
    if np.any(np.asarray(v) <= 0):
        raise DegenerateTime(f"elapsed time must be positive, got {v}")


def _check_positive(*arrays):
    for arr in arrays:
        if np.any(np.asarray(arr) <= 0):
            raise NonPositiveCoordinate("coordinates must be strictly positive")


def log_shift(model: RegimeModel, i: int, v: float) -> np.ndarray:
    return (model.r[i] - 0.5 * np.diag(model.a[i])) * v


def log_transition_density(x, s, model: RegimeModel, i: int, v: float) -> np.ndarray:
    """ln alpha(x, s, i, v), vectorised over the leading axes of x and s."""
    _check_time(v)
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    _check_positive(x, s)
    d = model.d
    a = model.a[i]
    w = np.log(x / s) - log_shift(model, i, v)
    a_inv = np.linalg.inv(a)
    quad = np.einsum("...l,lm,...m->...", w, a_inv, w) / v
    _, logdet_a = np.linalg.slogdet(a)
    logdet = d * np.log(v) + logdet_a
    return -0.5 * quad - 0.5 * logdet - 0.5 * d * np.log(2 * np.pi) - np.sum(np.log(x), axis=-1)


def transition_density(x, s, model: RegimeModel, i: int, v: float) -> np.ndarray:
    return np.exp(log_transition_density(x, s, model, i, v))


@lru_cache(maxsize=32)
def gauss_hermite_rule(d: int, order: int):
    """Tensor Gauss-Hermite rule for E[f(xi)], xi ~ N(0, I_d).

    Returns nodes (q, d) and weights (q,) summing to one.
    """
    y, w = np.polynomial.hermite.hermgauss(order)
    y = y * np.sqrt(2.0)
    w = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([y] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def cholesky_factor(model: RegimeModel, i: int) -> np.ndarray:
    try:
        return np.linalg.cholesky(model.a[i])
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(f"diffusion matrix of regime {i} is not SPD") from exc


def quadrature_points(s, model: RegimeModel, i: int, v: float, order: int = DEFAULT_ORDER):
    """Lognormal quadrature nodes for every start point.

    ``s`` has shape (n, d); returns x of shape (n, q, d) and weights (q,).
    """
    _check_time(v)
    s = np.asarray(s, dtype=float)
    xi, w = gauss_hermite_rule(model.d, order)
    chol = cholesky_factor(model, i)
    offs = log_shift(model, i, v) + np.sqrt(v) * xi @ chol.T
    logx = np.log(s)[:, None, :] + offs[None, :, :]
    return np.exp(logx), w


def expectation(f, s, model: RegimeModel, i: int, v: float, order: int = DEFAULT_ORDER) -> np.ndarray:
    """E[f(X_v) | X_0 = s] in the frozen regime, for each row of ``s`` (n, d)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    q = order ** model.d
    rows = max(1, _CHUNK // q)
    out = np.empty(s.shape[0])
    for start in range(0, s.shape[0], rows):
        x, w = quadrature_points(s[start:start + rows], model, i, v, order)
        out[start:start + rows] = f(x) @ w
    return out


def moment_identity_residual(s, model: RegimeModel, i: int, v: float, order: int = DEFAULT_ORDER) -> float:
    """|int (1 + sum x) alpha dx - (1 + sum s e^{r v})| by Gauss-Hermite."""
    s = np.asarray(s, dtype=float).reshape(1, model.d)
    _check_positive(s)
    val = expectation(lambda x: 1.0 + x.sum(axis=-1), s, model, i, v, order)[0]
    if not np.isfinite(val):
        raise QuadratureDivergence("moment quadrature produced a non-finite value")
    target = 1.0 + float(np.sum(s)) * np.exp(model.r[i] * v)
    return abs(val - target)


def sample_step(s, model: RegimeModel, i: int, v: float, rng: np.random.Generator) -> np.ndarray:
    """Draw X_v given X_0 = s (rows of s) in regime i."""
    _check_time(v)
    s = np.asarray(s, dtype=float)
    chol = cholesky_factor(model, i)
    flat = s.reshape(-1, model.d)
    z = rng.standard_normal(flat.shape)
    logx = np.log(flat) + log_shift(model, i, v) + np.sqrt(v) * z @ chol.T
    return np.exp(logx).reshape(s.shape)


# --------------------------------------------------------------------------
# log-derivatives of alpha and the generator identity
# --------------------------------------------------------------------------

def _centred(x, s, model, i, v):
    _check_time(v)
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    _check_positive(x, s)
    return np.log(x / s) - log_shift(model, i, v)


def g1(x, s, model: RegimeModel, i: int, v: float) -> np.ndarray:
    """(d alpha / d v) / alpha."""
    w = _centred(x, s, model, i, v)
    a_inv = np.linalg.inv(model.a[i])
    drift = model.r[i] - 0.5 * np.diag(model.a[i])
    aw = w @ a_inv
    return (-0.5 * model.d / v
            + 0.5 * np.einsum("...l,...l->...", aw, w) / v**2
            + np.einsum("...l,l->...", aw, drift) / v)


def g2(x, s, model: RegimeModel, i: int, v: float) -> np.ndarray:
    """(d alpha / d s_l) / alpha for every l, shape (..., d)."""
    w = _centred(x, s, model, i, v)
    s = np.asarray(s, dtype=float)
    a_inv = np.linalg.inv(model.a[i])
    return (w @ a_inv) / (v * s)


def dg2_ds(x, s, model: RegimeModel, i: int, v: float) -> np.ndarray:
    """d g2^l / d s_m, shape (..., d, d) indexed [l, m]."""
    s = np.broadcast_to(np.asarray(s, dtype=float), np.broadcast(np.asarray(x), np.asarray(s)).shape)
    a_inv = np.linalg.inv(model.a[i])
    g = g2(x, s, model, i, v)
    out = -a_inv / v / (s[..., :, None] * s[..., None, :])
    diag = -g / s
    idx = np.arange(model.d)
    out[..., idx, idx] += diag
    return out


def generator_identity_residual(x, s, model: RegimeModel, i: int, v: float) -> np.ndarray:
    """Absolute value of -g1 + r sum s g2 + 1/2 sum s s a (dg2 + g2 g2)."""
    s_b = np.broadcast_to(np.asarray(s, dtype=float), np.broadcast(np.asarray(x), np.asarray(s)).shape)
    a = model.a[i]
    g = g2(x, s_b, model, i, v)
    second = dg2_ds(x, s_b, model, i, v) + g[..., :, None] * g[..., None, :]
    ss = s_b[..., :, None] * s_b[..., None, :]
    bracket = (-g1(x, s_b, model, i, v)
               + model.r[i] * np.sum(s_b * g, axis=-1)
               + 0.5 * np.sum(ss * a * second, axis=(-2, -1)))
    return np.abs(bracket)
