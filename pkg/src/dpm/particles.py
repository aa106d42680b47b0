"""Particle filter for the latent propensity of one customer.

Weights are kept in log space and renormalised by max-subtraction every step.
Process noise is drawn antithetically (``z`` and ``-z`` halves), which keeps
the marginal of every particle exact and makes the unweighted particle mean
follow the noise-free recursion.
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass
from typing import Hashable, Optional

import numba
import numpy as np

from .model import ContractError, CustomerHistory, ModelParams, PropensityPath, make_path, touch_drive

PATH_MODES = ("posterior-mean", "map-ancestral")


class DegenerateLikelihoodError(RuntimeError):
    """All particle weights vanished (non-finite likelihood) at day ``t``."""

    def __init__(self, t: int, customer: Hashable = None):
        self.t = t
        self.customer = customer
        who = f" for customer {customer}" if customer is not None else ""
        super().__init__(f"degenerate particle likelihood at day {t}{who}")


class PriorFallbackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FilterConfig:
    particle_count: int = 1000
    resample_threshold: float = 0.5
    path_mode: str = "posterior-mean"
    seed: int = 0

    def __post_init__(self):
        if int(self.particle_count) < 2:
            raise ContractError("particle_count must be at least 2")
        if not 0.0 < float(self.resample_threshold) <= 1.0:
            raise ContractError("resample_threshold must lie in (0, 1]")
        if self.path_mode not in PATH_MODES:
            raise ContractError(f"path_mode must be one of {PATH_MODES}")


@dataclass
class ParticleSet:
    values: np.ndarray
    weights: np.ndarray
    ancestry: Optional[list] = None
    prior_fallback: bool = False
    resampled: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.values.shape[0] < 2 or self.values.shape != self.weights.shape:
            raise ContractError("need at least 2 particles with matching weights")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def ess(self) -> float:
        return 1.0 / float(self.weights @ self.weights)

    def mean(self) -> float:
        return float(self.weights @ self.values)


def customer_rng(seed: int, customer_id: Hashable, *extra: int) -> np.random.Generator:
    """Generator for one customer, derived from the run seed and a stable hash of the id."""
    key = zlib.crc32(repr(customer_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key, *extra]))


def antithetic_normals(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normals along the last axis, second half mirroring the first."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    n = shape[-1]
    half = rng.standard_normal(shape[:-1] + (n // 2,))
    parts = [half, -half]
    if n % 2:
        parts.append(rng.standard_normal(shape[:-1] + (1,)))
    return np.concatenate(parts, axis=-1)


@numba.njit(cache=True, nogil=True)
def _step(x, logw, s, w, anc, drive_t, y_t, c, phi, thr, u, noise, use_lik):
    """Advance particles in place by one day.

    On entry ``w`` holds the normalised weights matching ``logw``. Returns
    ``(status, predicted, mean)``: status is -1 for a degenerate likelihood,
    1 if resampling occurred and 0 otherwise; ``predicted`` is the weighted
    purchase probability before conditioning on ``y_t``.
    """
    P = x.shape[0]
    pred = 0.0
    for i in range(P):
        si = c + phi * x[i] + drive_t
        s[i] = si
        e = math.exp(-abs(si))
        if si >= 0:
            pred += w[i] / (1.0 + e)
        else:
            pred += w[i] * e / (1.0 + e)
        if use_lik:
            # log-sigmoid of +s (purchase) or -s (no purchase)
            z = si if y_t == 1 else -si
            if z >= 0:
                logw[i] -= math.log1p(e)
            else:
                logw[i] += z - math.log1p(e)
    mx = -np.inf
    for i in range(P):
        if logw[i] > mx:
            mx = logw[i]
    if not math.isfinite(mx):
        return -1, pred, 0.0
    tot = 0.0
    for i in range(P):
        w[i] = math.exp(logw[i] - mx)
        tot += w[i]
    ss = 0.0
    for i in range(P):
        w[i] /= tot
        ss += w[i] * w[i]
    status = 0
    if 1.0 / ss < thr * P:
        status = 1
        cum = w[0]
        j = 0
        for i in range(P):
            ui = (u + i) / P
            while ui > cum and j < P - 1:
                j += 1
                cum += w[j]
            anc[i] = j
        for i in range(P):
            x[i] = s[anc[i]]
        for i in range(P):
            s[i] = x[i]
            w[i] = 1.0 / P
            logw[i] = 0.0
    else:
        shift = mx + math.log(tot)
        for i in range(P):
            anc[i] = i
            logw[i] -= shift
    mean = 0.0
    for i in range(P):
        x[i] = s[i] + noise[i]
        mean += w[i] * x[i]
    return status, pred, mean


@numba.njit(cache=True, nogil=True)
def _run(x, drive, y, c, phi, thr, u, noise, use_lik, track, xs, ancs, w):
    """Filter a whole history; returns (failed_day or -1, means, predicted).

    ``x`` and ``w`` hold the final particles and normalised weights on return.
    """
    P = x.shape[0]
    T = drive.shape[0]
    logw = np.zeros(P)
    for i in range(P):
        w[i] = 1.0 / P
    s = np.empty(P)
    anc = np.empty(P, dtype=np.int64)
    means = np.empty(T)
    pred = np.empty(T + 1)
    for t in range(T):
        # touches of day t drive day t+1; day 1 has no preceding touches
        d = drive[t - 1] if t > 0 else 0.0
        status, p, mval = _step(x, logw, s, w, anc, d, y[t], c, phi, thr, u[t], noise[t], use_lik)
        if status < 0:
            return t, means, pred
        pred[t] = p
        means[t] = mval
        if track:
            for i in range(P):
                xs[t, i] = x[i]
                ancs[t, i] = anc[i]
    acc = 0.0
    dT = drive[T - 1]
    for i in range(P):
        si = c + phi * x[i] + dT
        e = math.exp(-abs(si))
        acc += w[i] * (1.0 / (1.0 + e) if si >= 0 else e / (1.0 + e))
    pred[T] = acc
    return -1, means, pred


def init_particles(params: ModelParams, config: FilterConfig, rng: np.random.Generator) -> ParticleSet:
    """Draw particles from the stationary law of the touch-free recursion."""
    P = int(config.particle_count)
    fallback = not params.stationary
    if fallback:
        warnings.warn(
            f"|phi| = {abs(params.phi):.3g} >= 1; using a standard normal prior",
            PriorFallbackWarning,
            stacklevel=2,
        )
    values = params.prior_mean() + params.prior_std() * antithetic_normals(rng, P)
    return ParticleSet(values, np.full(P, 1.0 / P), prior_fallback=fallback)


def filter_step(
    params: ModelParams,
    particles: ParticleSet,
    r_t,
    m_t,
    y_next: int,
    rng: np.random.Generator,
    threshold: float = 0.5,
    use_likelihood: bool = True,
) -> ParticleSet:
    """Condition on the next purchase flag and propagate particles one day.

    ``r_t``/``m_t`` are the touches of the current day (zeros before day 1).
    """
    r_t = np.asarray(r_t, dtype=float).reshape(-1)
    m_t = np.asarray(m_t, dtype=float).reshape(-1)
    if r_t.shape[0] != params.K or m_t.shape[0] != params.L:
        raise ContractError("touch vector dimensions do not match params")
    P = particles.size
    drive = float(params.alpha @ r_t + params.beta @ m_t)
    x = particles.values.copy()
    w = particles.weights / particles.weights.sum()
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    s = np.empty(P)
    anc = np.empty(P, dtype=np.int64)
    u = rng.random()
    noise = antithetic_normals(rng, P)
    status, _, _ = _step(
        x, logw, s, w, anc, drive, int(y_next), params.c, params.phi,
        float(threshold), u, noise, bool(use_likelihood),
    )
    if status < 0:
        raise DegenerateLikelihoodError(-1)
    ancestry = None
    if particles.ancestry is not None:
        ancestry = particles.ancestry + [anc.copy()]
    return ParticleSet(x, w.copy(), ancestry, particles.prior_fallback, status == 1)


@dataclass
class FilterRun:
    """Raw output of one filtering pass over a history."""

    means: np.ndarray
    predicted: np.ndarray
    x0: float
    prior_fallback: bool
    positions: Optional[np.ndarray] = None
    ancestors: Optional[np.ndarray] = None
    final_weights: Optional[np.ndarray] = None


def run_filter(
    params: ModelParams,
    history: CustomerHistory,
    config: FilterConfig,
    rng: Optional[np.random.Generator] = None,
    use_likelihood: bool = True,
    track: bool = False,
) -> FilterRun:
    """Filter a full history. ``predicted[t]`` is P(purchase on day t+1 | days 1..t)."""
    if rng is None:
        rng = customer_rng(config.seed, history.id)
    drive = touch_drive(params, history).astype(float)
    P = int(config.particle_count)
    T = history.T
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PriorFallbackWarning)
        init = init_particles(params, config, rng)
    u = rng.random(T)
    noise = antithetic_normals(rng, (T, P))
    xs = np.empty((T, P)) if track else np.empty((0, 0))
    ancs = np.empty((T, P), dtype=np.int64) if track else np.empty((0, 0), dtype=np.int64)
    x = init.values.copy()
    w = np.empty(P)
    failed, means, pred = _run(
        x, drive, history.y, params.c, params.phi, float(config.resample_threshold),
        u, noise, bool(use_likelihood), bool(track), xs, ancs, w,
    )
    if failed >= 0:
        raise DegenerateLikelihoodError(int(failed) + 1, history.id)
    run = FilterRun(means, pred, params.prior_mean(), init.prior_fallback, final_weights=w)
    if track:
        run.positions = xs
        run.ancestors = ancs
    return run


def _map_path(run: FilterRun, weights: np.ndarray) -> np.ndarray:
    T = run.positions.shape[0]
    i = int(np.argmax(weights))
    path = np.empty(T)
    for t in range(T - 1, -1, -1):
        path[t] = run.positions[t, i]
        i = int(run.ancestors[t, i])
    return path


def estimate_path(
    params: ModelParams,
    history: CustomerHistory,
    config: FilterConfig,
    rng: Optional[np.random.Generator] = None,
    use_likelihood: bool = True,
) -> PropensityPath:
    """Estimate the latent path and return it with recomputed predictive states."""
    run = run_filter(params, history, config, rng, use_likelihood, track=config.path_mode == "map-ancestral")
    if config.path_mode == "posterior-mean":
        x = run.means
    else:
        x = _map_path(run, run.final_weights)
    return make_path(params, history, x, run.x0)
