"""Batch and online hyperparameter estimation from converged variational
posteriors.

Sufficient statistics are exponentially forgotten averages of posterior
expectations, one accumulator per hyperparameter slot; shape updates go
through the inverse digamma, rate updates are closed-form, and both are
fixed-point iterated per outer step.  Every update leaves the total
normalized bound (summed over the stream, posteriors frozen)
nondecreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
from scipy.special import psi

from .exceptions import ConfigError
from .model import Dataset, HyperParams
from .specfun import inverse_digamma
from .vbem import PosteriorApprox, VbemConfig, vbem_fit

__all__ = ["SuffStats", "init_suffstats", "accumulate", "update_gamma_hypers",
           "update_dirichlet_hypers", "online_learn", "OnlineStepRecord"]

INNER_TOL = 1e-10
INNER_MAX_ITERS = 500


@dataclass(frozen=True)
class SuffStats:
    """Per-slot accumulators.

    ``gamma_acc[a]`` lives on activation shape slots (image of the
    upsilon map), ``xi_acc[a]`` on atom shape slots (image of phi), and
    ``delta_acc[b]`` on rate slots; entries outside the relevant image
    stay zero.  ``learning_rate=None`` means the decaying schedule
    c = 1/(T+1), which reproduces plain batch averaging."""

    gamma_acc: np.ndarray
    delta_acc: np.ndarray
    xi_acc: np.ndarray
    count: int
    learning_rate: float | None = None

    def __post_init__(self):
        if self.learning_rate is not None and not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.count < 0:
            raise ConfigError("count must be >= 0")

    def next_rate(self) -> float:
        return (self.learning_rate if self.learning_rate is not None
                else 1.0 / (self.count + 1))


def _slot_sums(values: np.ndarray, slot_map: np.ndarray, n_slots: int) -> np.ndarray:
    """Sum ``values`` into slots through ``slot_map`` (inverse-image sums)."""
    return np.bincount(slot_map.ravel(), weights=values.ravel(),
                       minlength=n_slots)


def _slot_counts(slot_map: np.ndarray, n_slots: int) -> np.ndarray:
    return np.bincount(slot_map.ravel(), minlength=n_slots)


def _posterior_contributions(hyper: HyperParams, post: PosteriorApprox):
    """Per-slot sums of the posterior expectations feeding the three
    accumulators."""
    n_alpha = hyper.alpha.size
    n_beta = hyper.beta.size
    gamma_term = psi(post.alpha_hat_act) - np.log(post.beta_hat_act)
    delta_term = post.alpha_hat_act / post.beta_hat_act
    col_tot = post.alpha_hat_atoms.sum(axis=(0, 1))
    xi_term = psi(post.alpha_hat_atoms) - psi(col_tot)
    return (
        _slot_sums(gamma_term, hyper.upsilon_map, n_alpha),
        _slot_sums(delta_term, hyper.omega_map, n_beta),
        _slot_sums(xi_term, hyper.phi_map, n_alpha),
    )


def _prior_as_posterior(hyper: HyperParams) -> PosteriorApprox:
    if np.any(hyper.activation_rates() <= 0.0):
        raise ConfigError(
            "hyperparameter learning requires strictly positive rate priors"
        )
    return PosteriorApprox(
        alpha_hat_act=hyper.activation_shapes().copy(),
        beta_hat_act=hyper.activation_rates().copy(),
        alpha_hat_atoms=hyper.atom_shapes().copy(),
    )


def init_suffstats(hyper: HyperParams,
                   learning_rate: float | None = None) -> SuffStats:
    """Accumulators seeded by one pseudo-observation whose posterior
    equals the prior (posterior rates = prior rates, shapes = prior
    shapes), counted as T = 1."""
    g, d, x = _posterior_contributions(hyper, _prior_as_posterior(hyper))
    return SuffStats(gamma_acc=g, delta_acc=d, xi_acc=x, count=1,
                     learning_rate=learning_rate)


def accumulate(stats: SuffStats, hyper: HyperParams,
               post: PosteriorApprox) -> SuffStats:
    """Fold one converged posterior into the accumulators with rate
    c = learning_rate (or 1/(T+1)): acc <- (1-c) acc + c * contribution."""
    i, k, j = hyper.dims
    if post.dims != (i, k, j):
        raise ConfigError("posterior dimensions disagree with the slot maps")
    c = stats.next_rate()
    g, d, x = _posterior_contributions(hyper, post)
    return replace(stats,
                   gamma_acc=(1.0 - c) * stats.gamma_acc + c * g,
                   delta_acc=(1.0 - c) * stats.delta_acc + c * d,
                   xi_acc=(1.0 - c) * stats.xi_acc + c * x,
                   count=stats.count + 1)


def update_gamma_hypers(hyper: HyperParams, stats: SuffStats) -> HyperParams:
    """Coupled shape/rate refresh for activation priors.

    psi(alpha_a) = (sum over upsilon^-1(a) of ln beta_omega + gamma_a) /
    |upsilon^-1(a)| and beta_b = (sum over omega^-1(b) of alpha) /
    delta_b, alternated to a joint fixed point."""
    n_alpha, n_beta = hyper.alpha.size, hyper.beta.size
    act_counts = _slot_counts(hyper.upsilon_map, n_alpha)
    act_slots = act_counts > 0
    rate_counts = _slot_counts(hyper.omega_map, n_beta)
    if np.any(rate_counts == 0):
        raise ConfigError("every rate slot must map to at least one activation")
    if np.any(stats.delta_acc[rate_counts > 0] <= 0.0):
        raise ConfigError("delta accumulator must be strictly positive")
    alpha = hyper.alpha.copy()
    beta = hyper.beta.copy()
    for _ in range(INNER_MAX_ITERS):
        log_beta_sums = _slot_sums(np.log(beta)[hyper.omega_map],
                                   hyper.upsilon_map, n_alpha)
        target = np.where(act_slots,
                          (log_beta_sums + stats.gamma_acc)
                          / np.maximum(act_counts, 1), 0.0)
        new_alpha = np.where(act_slots, inverse_digamma(target), alpha)
        alpha_sums = _slot_sums(new_alpha[hyper.upsilon_map], hyper.omega_map,
                                n_beta)
        new_beta = alpha_sums / stats.delta_acc
        change = max(np.max(np.abs(new_alpha - alpha)),
                     np.max(np.abs(new_beta - beta)))
        alpha, beta = new_alpha, new_beta
        if change <= INNER_TOL:
            break
    return HyperParams(alpha=alpha, beta=beta, phi_map=hyper.phi_map,
                       upsilon_map=hyper.upsilon_map, omega_map=hyper.omega_map)


def update_dirichlet_hypers(hyper: HyperParams, stats: SuffStats) -> HyperParams:
    """Shape refresh for atom priors: psi(alpha_a) = (sum over phi^-1(a)
    of psi(column total of current alphas) + xi_a)/|phi^-1(a)|, iterated
    to a fixed point (the right side depends on the current shapes)."""
    n_alpha = hyper.alpha.size
    counts = _slot_counts(hyper.phi_map, n_alpha)
    atom_slots = counts > 0
    alpha = hyper.alpha.copy()
    for _ in range(INNER_MAX_ITERS):
        atom_alpha = alpha[hyper.phi_map]              # (2, I, K)
        col_tot = atom_alpha.sum(axis=(0, 1))          # (K,)
        psi_tot = np.broadcast_to(psi(col_tot), atom_alpha.shape)
        rhs = _slot_sums(psi_tot, hyper.phi_map, n_alpha) + stats.xi_acc
        target = np.where(atom_slots, rhs / np.maximum(counts, 1), 0.0)
        new_alpha = np.where(atom_slots, inverse_digamma(target), alpha)
        change = np.max(np.abs(new_alpha - alpha))
        alpha = new_alpha
        if change <= INNER_TOL:
            break
    return HyperParams(alpha=alpha, beta=hyper.beta, phi_map=hyper.phi_map,
                       upsilon_map=hyper.upsilon_map, omega_map=hyper.omega_map)


@dataclass(frozen=True)
class OnlineStepRecord:
    """Snapshot emitted after each stream step."""

    step: int
    hyper: HyperParams
    elbo: float
    converged: bool
    metrics: dict = field(default_factory=dict)


def online_learn(datasets: Iterable[Dataset], hyper0: HyperParams,
                 learning_rate: float | None = None,
                 vbem_config: VbemConfig | None = None,
                 metrics_fn: Callable[[int, HyperParams, PosteriorApprox], dict] | None = None,
                 ) -> list[OnlineStepRecord]:
    """Stream loop: fit the variational posterior under the current
    prior, fold it into the accumulators, refresh Gamma then Dirichlet
    hyperparameters, and snapshot.

    ``metrics_fn`` may compute per-step diagnostics (e.g. error against
    known ground-truth hyperparameters)."""
    hyper = hyper0
    stats = init_suffstats(hyper0, learning_rate=learning_rate)
    records: list[OnlineStepRecord] = []
    for step, dataset in enumerate(datasets, start=1):
        try:
            result = vbem_fit(dataset, hyper, vbem_config)
        except Exception as exc:
            raise type(exc)(f"stream step {step}: {exc}") from exc
        stats = accumulate(stats, hyper, result.posterior)
        hyper = update_gamma_hypers(hyper, stats)
        hyper = update_dirichlet_hypers(hyper, stats)
        metrics = (metrics_fn(step, hyper, result.posterior)
                   if metrics_fn is not None else {})
        records.append(OnlineStepRecord(step=step, hyper=hyper,
                                        elbo=result.final_elbo,
                                        converged=result.converged,
                                        metrics=metrics))
    return records
