"""Skellam and diffnomial probability laws.

The diffnomial is the posterior law of hidden Poisson sources given their
signed mixture; its expectation kernel (`posterior_source_mean`) is the
common E-step ingredient of both inference algorithms.  Sign convention
throughout: ``s = 0`` is the additive source row, ``s = 1`` the
subtractive one, so an observation decomposes as ``x = sum(z[0]) -
sum(z[1])``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .specfun import bessel_ratio, log_0f1, log_gamma

__all__ = [
    "SkellamParams",
    "SourceRates",
    "skellam_log_pmf",
    "skellam_sample",
    "posterior_source_mean",
    "diffnomial_log_pmf",
]


@dataclass(frozen=True)
class SkellamParams:
    """Rates of the two Poisson variables whose difference is observed."""

    lambda0: float
    lambda1: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda0) and np.isfinite(self.lambda1)):
            raise ValueError("rates must be finite")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("rates must be nonnegative")

    @property
    def mean(self) -> float:
        return self.lambda0 - self.lambda1

    @property
    def variance(self) -> float:
        return self.lambda0 + self.lambda1


class SourceRates:
    """Rates lambda[s, n] of 2 x N hidden Poisson sources."""

    def __init__(self, rates):
        rates = np.asarray(rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != 2:
            raise ValueError("rates must have shape (2, N)")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise ValueError("rates must be finite and nonnegative")
        self.rates = rates

    @property
    def marginals(self) -> np.ndarray:
        """Row sums (lambda_bar_0, lambda_bar_1)."""
        return self.rates.sum(axis=1)

    def __repr__(self):
        return f"SourceRates({self.rates!r})"


def _as_rates(rates) -> SourceRates:
    return rates if isinstance(rates, SourceRates) else SourceRates(rates)


def _check_integer(x) -> int:
    if not float(x).is_integer():
        raise ValueError(f"x must be an integer, got {x}")
    return int(x)


def _xlogy(x: float, y: float) -> float:
    """x * log(y) with the 0 * log 0 = 0 convention; -inf when x > 0, y = 0."""
    if x == 0.0:
        return 0.0
    return x * np.log(y) if y > 0 else -np.inf


def skellam_log_pmf(x, params: SkellamParams) -> float:
    """ln P(X = x) for X ~ Skellam(lambda0, lambda1).

    Impossible outcomes (a strictly signed x whose side has zero rate)
    return -inf rather than raising, so likelihood sums stay total.
    """
    x = _check_integer(x)
    l0, l1 = params.lambda0, params.lambda1
    ax = abs(x)
    out = log_0f1(ax + 1.0, l0 * l1) - log_gamma(ax + 1.0)
    out += -l0 + _xlogy(max(x, 0), l0)
    out += -l1 + _xlogy(max(-x, 0), l1)
    return float(out)


def skellam_sample(params: SkellamParams, rng: np.random.Generator, size=None):
    """Draw X0 - X1 with X_s ~ Poisson(lambda_s) from a seeded generator."""
    x0 = rng.poisson(params.lambda0, size=size)
    x1 = rng.poisson(params.lambda1, size=size)
    diff = x0 - x1
    return int(diff) if size is None else diff


def posterior_source_mean(x, rates) -> np.ndarray:
    """Expected hidden sources <Z_sn | sum_n Z_0n - Z_1n = x>.

    The Bessel-ratio denominator depends only on the two marginal rates,
    so it is computed once and shared across all N sources.
    """
    x = _check_integer(x)
    rates = _as_rates(rates)
    lbar = rates.marginals
    if lbar[0] == 0.0 and lbar[1] == 0.0:
        if x != 0:
            raise ValueError(f"observation {x} impossible under zero rates")
        return np.zeros_like(rates.rates)
    maxpart = np.array([max(x, 0), max(-x, 0)], dtype=float)
    if np.any((lbar == 0.0) & (maxpart > 0.0)):
        raise ValueError(f"observation {x} impossible: required marginal is zero")
    prod = lbar[0] * lbar[1]
    root = np.sqrt(prod)
    denom = abs(x) + 1.0 + root * bessel_ratio(abs(x) + 1.0, 2.0 * root)
    with np.errstate(invalid="ignore"):
        direct = np.where(maxpart > 0.0, maxpart / np.where(lbar > 0, lbar, 1.0), 0.0)
    factor = direct + lbar[::-1] / denom
    return rates.rates * factor[:, None]


def diffnomial_log_pmf(z, x, rates) -> float:
    """ln P(Z = z | sum_n Z_0n - Z_1n = x) for hidden sources with the
    given rates; -inf when z violates the sum constraint or requires a
    zero-rate source."""
    x = _check_integer(x)
    rates = _as_rates(rates)
    z = np.asarray(z)
    if z.shape != rates.rates.shape:
        raise ValueError("z must match the shape of the rates")
    if np.any(z < 0) or not np.all(np.equal(np.mod(z, 1), 0)):
        raise ValueError("z must contain nonnegative integers")
    z = z.astype(float)
    if int(z[0].sum() - z[1].sum()) != x:
        return -np.inf
    lbar = rates.marginals
    maxpart = np.array([max(x, 0), max(-x, 0)], dtype=float)
    # Conditioning event has zero probability: treat like any other
    # impossible configuration.
    if np.any((lbar == 0.0) & (maxpart > 0.0)):
        return -np.inf
    log_norm = (
        log_gamma(abs(x) + 1.0)
        - sum(_xlogy(maxpart[s], lbar[s]) for s in range(2))
        - log_0f1(abs(x) + 1.0, lbar[0] * lbar[1])
    )
    out = log_norm
    for zs, ls in zip(z.ravel(), rates.rates.ravel()):
        out += _xlogy(zs, ls) - log_gamma(zs + 1.0)
        if out == -np.inf:
            return -np.inf
    return float(out)
