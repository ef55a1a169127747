"""Frozen-regime Black-Scholes-Merton value used as the Picard seed."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .errors import QuadratureDimension
from .kernel import DEFAULT_ORDER, expectation, log_shift
from .model import Payoff, RegimeModel

MAX_QUADRATURE_DIM = 3
_Z_CUT = 12.0


def _split_expectation_1d(payoff: Payoff, pts, model: RegimeModel, i: int, tau: float, order: int):
    """E[K(X_tau)] for d=1 with Gauss-Legendre panels either side of the payoff kink in z."""
    vol = np.sqrt(model.a[i, 0, 0]) * np.sqrt(tau)
    base = np.log(pts[:, 0]) + log_shift(model, i, tau)[0]
    w = payoff.weights[0]
    with np.errstate(divide="ignore"):
        z_kink = (np.log(payoff.strike / w) - base) / vol if w > 0 and payoff.strike > 0 else np.full(base.shape, np.inf)
    z_kink = np.clip(z_kink, -_Z_CUT, _Z_CUT)
    nodes, weights = np.polynomial.legendre.leggauss(order)
    out = np.zeros(pts.shape[0])
    for lo, hi in ((np.full_like(z_kink, -_Z_CUT), z_kink), (z_kink, np.full_like(z_kink, _Z_CUT))):
        half = 0.5 * (hi - lo)
        z = 0.5 * (hi + lo)[:, None] + half[:, None] * nodes[None, :]
        x = np.exp(base[:, None] + vol * z)
        f = payoff.value(x.reshape(-1, 1)).reshape(x.shape)
        dens = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        out += half * ((f * dens) @ weights)
    return out


def black_scholes(s, strike, r, vol, tau, call=True):
    """Vectorised Black-Scholes price without dividends."""
    s = np.asarray(s, dtype=float)
    tau = np.asarray(tau, dtype=float)
    disc_k = strike * np.exp(-r * tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = vol * np.sqrt(tau)
        d1 = (np.log(s / strike) + (r + 0.5 * vol**2) * tau) / sd
        d2 = d1 - sd
    if strike == 0:
        price = s if call else np.zeros_like(s)
        return np.where(tau > 0, price, np.maximum(s - strike, 0.0) if call else np.maximum(strike - s, 0.0))
    if call:
        price = s * ndtr(d1) - disc_k * ndtr(d2)
        terminal = np.maximum(s - strike, 0.0)
    else:
        price = disc_k * ndtr(-d2) - s * ndtr(-d1)
        terminal = np.maximum(strike - s, 0.0)
    return np.where(tau > 0, price, terminal)


def eta(model: RegimeModel, payoff: Payoff, T: float, t: float, s, i: int, order: int = DEFAULT_ORDER):
    """Price at time ``t`` if regime ``i`` were frozen until ``T``.

    ``s`` is (d,) for a single point or (n, d); the result is a float or (n,).
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    pts = s.reshape(-1, model.d)
    tau = T - t
    if tau <= 0:
        out = payoff.value(pts)
    elif payoff.kind in ("vanilla-call", "vanilla-put") and model.d == 1:
        vol = np.sqrt(model.a[i, 0, 0])
        out = black_scholes(pts[:, 0], payoff.strike, model.r[i], vol, tau, call=payoff.is_call)
    elif payoff.structured and model.d == 1:
        out = np.exp(-model.r[i] * tau) * _split_expectation_1d(payoff, pts, model, i, tau, order)
    else:
        if model.d > MAX_QUADRATURE_DIM:
            raise QuadratureDimension(f"quadrature supports d <= {MAX_QUADRATURE_DIM}, got d={model.d}")
        out = np.exp(-model.r[i] * tau) * expectation(payoff.value, pts, model, i, tau, order)
    out = np.maximum(out, 0.0)
    return float(out[0]) if single else out
