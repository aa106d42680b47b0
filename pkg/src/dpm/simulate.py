"""Synthetic customer histories drawn from the model itself.

Touch counts are Poisson draws clipped at a per-channel cap, independent
across channels and days. In targeted mode the rate of every targetable
channel is multiplied by ``exp(targeting * (mu_t - level))`` where ``mu_t`` is
the propensity implied by the customer's observable touch history (the
noise-free recursion) or, with ``targeting_signal="latent"``, the latent state
itself. Negative ``targeting`` sends targetable touches to customers with low
propensity.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numba
import numpy as np

from .model import ContractError, CustomerHistory, ModelParams

# Table 3 channel means and maxima, ordered r.1..r.3, m.1..m.3
PRODUCT_A = {
    "rates": (0.0010, 0.0044, 0.0004, 0.0165, 0.0354, 0.0003),
    "caps": (2, 3, 1, 1, 1, 1),
    "daily_purchase_rate": 0.0001,
}
PRODUCT_B = {
    "rates": (0.0115, 0.0057, 0.0027, 0.0168, 0.0229, 0.0032),
    "caps": (3, 2, 2, 1, 1, 1),
    "daily_purchase_rate": 0.0004,
}
PROFILES = {"product-a": PRODUCT_A, "product-b": PRODUCT_B}


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    true_params: ModelParams
    n_customers: int
    horizon: int
    touch_rates: tuple = PRODUCT_B["rates"]
    touch_caps: tuple = PRODUCT_B["caps"]
    seed: int = 0
    targeting: float = 0.0
    targeting_signal: str = "observable"
    process_noise: bool = True
    segment: Optional[str] = None
    first_id: int = 1

    def __post_init__(self):
        K, L = self.true_params.K, self.true_params.L
        rates = tuple(float(v) for v in self.touch_rates)
        caps = tuple(int(v) for v in self.touch_caps)
        object.__setattr__(self, "touch_rates", rates)
        object.__setattr__(self, "touch_caps", caps)
        if len(rates) != K + L or len(caps) != K + L:
            raise ContractError(f"need {K + L} touch rates and caps")
        if any(r < 0 for r in rates) or any(c < 1 for c in caps):
            raise ContractError("touch rates must be >= 0 and caps >= 1")
        if self.horizon < 1 or self.n_customers < 0:
            raise ContractError("horizon must be >= 1 and n_customers >= 0")
        if not self.true_params.stationary:
            raise ContractError("the simulator requires |phi| < 1")
        if self.targeting_signal not in ("observable", "latent"):
            raise ContractError("targeting_signal must be 'observable' or 'latent'")


@numba.njit(cache=True, nogil=True)
def _poisson_inv(u, lam, cap):
    # inverse CDF of Poisson(lam) clipped at cap
    if lam <= 0.0:
        return 0
    p = math.exp(-lam)
    cdf = p
    k = 0
    while u > cdf and k < cap:
        k += 1
        p *= lam / k
        cdf += p
    return k


@numba.njit(cache=True, nogil=True)
def _simulate_one(c, phi, coef, K, rates, caps, targeting, latent_signal, noise_on, z0, ut, uy, z, counts):
    """Fill ``counts`` (T x (K+L)); returns the number of observed days and whether the last is a purchase."""
    T = uy.shape[0]
    J = rates.shape[0]
    level = c / (1.0 - phi)
    sd0 = 1.0 / math.sqrt(1.0 - phi * phi)
    x = level + (sd0 * z0 if noise_on else 0.0)
    mu = level
    drive = 0.0
    for t in range(T):
        s = c + phi * x + drive
        mu = c + phi * mu + drive
        if s >= 0:
            p = 1.0 / (1.0 + math.exp(-s))
        else:
            e = math.exp(s)
            p = e / (1.0 + e)
        x = s + (z[t] if noise_on else 0.0)
        signal = (x if latent_signal else mu) - level
        drive = 0.0
        for j in range(J):
            lam = rates[j]
            if j >= K and targeting != 0.0:
                lam = lam * math.exp(min(targeting * signal, 50.0))
            k = _poisson_inv(ut[t, j], lam, caps[j])
            counts[t, j] = k
            drive += coef[j] * k
        if uy[t] < p:
            return t + 1, True
    return T, False


def _draws(seed: int, index: int, T: int, J: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 7, index]))
    z0 = rng.standard_normal()
    ut = rng.random((T, J))
    uy = rng.random(T)
    z = rng.standard_normal(T)
    return z0, ut, uy, z


def simulate_customer(config: SimConfig, index: int) -> CustomerHistory:
    p = config.true_params
    T, K = config.horizon, p.K
    J = K + p.L
    z0, ut, uy, z = _draws(config.seed, index, T, J)
    counts = np.zeros((T, J), dtype=np.int64)
    n, bought = _simulate_one(
        p.c, p.phi, np.concatenate([p.alpha, p.beta]), K,
        np.asarray(config.touch_rates, dtype=float), np.asarray(config.touch_caps, dtype=np.int64),
        float(config.targeting), config.targeting_signal == "latent", bool(config.process_noise),
        z0, ut, uy, z, counts,
    )
    y = np.zeros(n, dtype=np.int8)
    if bought:
        y[-1] = 1
    return CustomerHistory(
        id=config.first_id + index,
        r=counts[:n, :K],
        m=counts[:n, K:],
        y=y,
        segment=config.segment,
    )


def generate(config: SimConfig, threads: int = 1) -> list[CustomerHistory]:
    """Simulate ``n_customers`` histories; output order and content do not depend on ``threads``."""
    idx = range(config.n_customers)
    if threads <= 1:
        return [simulate_customer(config, i) for i in idx]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: simulate_customer(config, i), idx, chunksize=64))


def daily_purchase_rate(dataset: Sequence[CustomerHistory]) -> float:
    days = sum(h.T for h in dataset)
    return sum(int(h.purchased) for h in dataset) / days if days else 0.0


def clipped_poisson_mean(lam: float, cap: int) -> float:
    """``E[min(N, cap)]`` for ``N ~ Poisson(lam)``."""
    k = np.arange(cap)
    pmf = np.exp(-lam + k * math.log(lam) - np.array([math.lgamma(i + 1) for i in k])) if lam > 0 else (k == 0) * 1.0
    return float((k * pmf).sum() + cap * (1.0 - pmf.sum()))


def calibrate_offset(
    params: ModelParams,
    touch_rates: Sequence[float],
    touch_caps: Sequence[int],
    horizon: int,
    target_daily_rate: float,
    seed: int = 0,
    pilot_days: int = 100_000,
    max_steps: int = 30,
    bracket: tuple = (-30.0, 5.0),
    **sim_options,
) -> float:
    """Bisect the offset ``c`` so that a pilot simulation hits the target daily purchase rate.

    ``params.c`` is ignored. The same pilot seed is used for every evaluation,
    which makes the simulated rate monotone in ``c``.
    """
    if not 0.0 < target_daily_rate < 0.5:
        raise ContractError("target daily rate must lie in (0, 0.5)")
    n = max(1, math.ceil(pilot_days / horizon))

    def rate(c: float) -> float:
        p = ModelParams(c, params.phi, params.alpha, params.beta)
        cfg = SimConfig(p, n, horizon, tuple(touch_rates), tuple(touch_caps), seed, **sim_options)
        return daily_purchase_rate(generate(cfg))

    lo, hi = bracket
    if rate(lo) > target_daily_rate or rate(hi) < target_daily_rate:
        raise CalibrationError(f"target rate {target_daily_rate} is not reachable for c in {bracket}")
    log_target = math.log(target_daily_rate)
    mid = 0.5 * (lo + hi)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if r > 0 and abs(math.log(r) - log_target) < 0.01:
            break
        if r < target_daily_rate:
            lo = mid
        else:
            hi = mid
    return mid


def with_offset(config: SimConfig, c: float) -> SimConfig:
    p = config.true_params
    return replace(config, true_params=ModelParams(c, p.phi, p.alpha, p.beta))
