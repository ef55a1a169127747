"""Monte Carlo pricing under the regime chain plus conditional lognormal steps.

Paths are simulated in fixed-size batches, each with its own counter-based
Philox stream keyed by (seed, batch index).  Batch statistics are merged in
batch order, so estimates do not depend on the number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernel import cholesky_factor, log_shift
from .model import Payoff, RegimeModel

DEFAULT_BATCH = 50_000


@dataclass(frozen=True)
class ChainPath:
    """Jump times in (t, T) and the visited states (``states[0]`` is the start)."""

    times: tuple
    states: tuple

    @property
    def n_jumps(self) -> int:
        return len(self.times)

    def state_at(self, u: float) -> int:
        return self.states[int(np.searchsorted(self.times, u, side="right"))]


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int


def _jump_probs(model: RegimeModel) -> np.ndarray:
    lam = model.generator
    probs = np.zeros_like(lam)
    for i in range(model.k):
        if model.exit_rates[i] > 0:
            row = np.where(np.arange(model.k) == i, 0.0, lam[i])
            probs[i] = row / model.exit_rates[i]
    return probs


def simulate_chain(model: RegimeModel, t: float, T: float, i0: int, rng: np.random.Generator) -> ChainPath:
    """Exponential holding times with rate lam_i, jumps to j with prob lam_ij / lam_i."""
    cum = np.cumsum(_jump_probs(model), axis=1)
    times, states = [], [int(i0)]
    u = t
    state = int(i0)
    while True:
        rate = model.exit_rates[state]
        if rate <= 0:
            break
        u += rng.exponential(1.0 / rate)
        if u >= T:
            break
        state = min(int(np.searchsorted(cum[state], rng.random(), side="right")), model.k - 1)
        times.append(u)
        states.append(state)
    return ChainPath(tuple(times), tuple(states))


def batch_rng(seed: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, batch], dtype=np.uint64)))


def simulate_terminal(model: RegimeModel, tau: float, s, i0: int, n: int, rng: np.random.Generator):
    """Terminal prices (n, d) and accumulated int r(X_u) du (n,) over horizon ``tau``."""
    d, k = model.d, model.k
    s = np.asarray(s, dtype=float).reshape(d)
    logs = np.tile(np.log(s), (n, 1))
    state = np.full(n, int(i0))
    elapsed = np.zeros(n)
    int_r = np.zeros(n)
    probs = _jump_probs(model)
    cum = np.cumsum(probs, axis=1)
    chols = [cholesky_factor(model, i) for i in range(k)]
    drifts = [log_shift(model, i, 1.0) for i in range(k)]
    active = np.ones(n, dtype=bool)
    while np.any(active):
        rates = model.exit_rates[state]
        e = rng.standard_exponential(n)
        with np.errstate(divide="ignore"):
            hold = np.where(rates > 0, e / np.where(rates > 0, rates, 1.0), np.inf)
        remaining = tau - elapsed
        dt = np.where(active, np.minimum(hold, remaining), 0.0)
        z = rng.standard_normal((n, d))
        u = rng.random(n)
        for i in range(k):
            m = active & (state == i)
            if not np.any(m):
                continue
            logs[m] += drifts[i] * dt[m, None] + np.sqrt(dt[m, None]) * (z[m] @ chols[i].T)
            int_r[m] += model.r[i] * dt[m]
        jumped = active & (hold < remaining)
        elapsed = np.where(active, elapsed + dt, elapsed)
        if np.any(jumped):
            nxt = np.sum(u[jumped, None] >= cum[state[jumped]], axis=1)
            state[jumped] = np.minimum(nxt, k - 1)
        active = jumped
    return np.exp(logs), int_r


def _moments(x: np.ndarray):
    n = x.size
    mean = float(np.mean(x)) if n else 0.0
    m2 = float(np.sum((x - mean) ** 2)) if n else 0.0
    return n, mean, m2


def _merge(parts):
    """Chan's pairwise update, applied in fixed batch order."""
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in parts:
        if nb == 0:
            continue
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta * delta * n * nb / tot
        n = tot
    return n, mean, m2


def _estimate(sample: Callable[[int, np.random.Generator], np.ndarray], n_paths: int, seed: int,
              workers: int, batch_size: int) -> McEstimate:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    sizes = [batch_size] * (n_paths // batch_size)
    if n_paths % batch_size:
        sizes.append(n_paths % batch_size)

    def run(b):
        return _moments(sample(sizes[b], batch_rng(seed, b)))

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    n, mean, m2 = _merge(parts)
    var = m2 / (n - 1) if n > 1 else 0.0
    return McEstimate(mean, float(np.sqrt(max(var, 0.0) / n)), n, seed)


def price_mc(model: RegimeModel, payoff: Payoff, T: float, t: float, s, i: int, n_paths: int, seed: int = 0,
             workers: int = 1, batch_size: int = DEFAULT_BATCH) -> McEstimate:
    """E[exp(-int_t^T r) K(S_T) | S_t = s, X_t = i]."""
    tau = T - t

    def sample(n, rng):
        st, int_r = simulate_terminal(model, tau, s, i, n, rng)
        return np.exp(-int_r) * payoff.value(st)

    return _estimate(sample, n_paths, seed, workers, batch_size)


def martingale_residual(model: RegimeModel, l: int, T: float, t: float, s, i: int, n_paths: int,
                        seed: int = 0, discounted: bool = True, workers: int = 1,
                        batch_size: int = DEFAULT_BATCH) -> float:
    """(mean of [exp(-int r)] S_l(T) - s_l) / stderr."""
    tau = T - t
    s = np.asarray(s, dtype=float)

    def sample(n, rng):
        st, int_r = simulate_terminal(model, tau, s, i, n, rng)
        out = st[:, l]
        return np.exp(-int_r) * out if discounted else out

    est = _estimate(sample, n_paths, seed, workers, batch_size)
    if est.stderr == 0:
        return 0.0 if est.mean == s[l] else float(np.sign(est.mean - s[l]) * np.inf)
    return (est.mean - float(s[l])) / est.stderr


def price_reference(model: RegimeModel, payoff: Payoff, T: float, n_paths: int, seed: int = 0,
                    workers: int = 1) -> Callable:
    """Callable (t, s, i) -> MC price, usable as an oracle for boundary data."""

    def ref(t, s, i=0):
        return price_mc(model, payoff, T, t, s, i, n_paths, seed, workers).mean

    return ref
