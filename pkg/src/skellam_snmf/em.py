"""Maximum a posteriori estimation by multiplicative EM updates.

One iteration forms the rate tensor ``lambda_bar``, derives a
multiplicative factor ``U`` per hidden-source cell (Bessel-ratio kernel
for integer observations, the closed-form square-root kernel in the
real-valued limit, exactly 1 for unobserved cells), contracts it against
the current factors, and applies the prior-shifted update with an
optional floor ``epsilon`` that guards shape hyperparameters below one.
The posterior objective never decreases along the iteration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .divergence import skellam_divergence
from .exceptions import ConfigError, NumericalError
from .model import (
    Activations,
    Atoms,
    Dataset,
    FactorModel,
    HyperParams,
    Mode,
    reconstruct,
    validate,
)
from .specfun import bessel_ratio, log_0f1, log_gamma

__all__ = ["EmConfig", "EmState", "EmResult", "em_objective", "em_step",
           "em_fit", "initial_model"]

DEFAULT_EPSILON = 1e-12


@dataclass(frozen=True)
class EmConfig:
    """Knobs of the EM loop.

    ``epsilon_floor=None`` resolves against the hyperparameters: 0 when
    every shape is >= 1 (no floor needed), 1e-12 otherwise.  ``mode=None``
    runs in the dataset's declared mode; passing a mode explicitly allows
    e.g. the integer-observation update rules on real-valued data, which
    is well defined and occasionally useful.
    """

    max_iters: int = 10000
    rel_tol: float = 1e-8
    epsilon_floor: float | None = None
    update_atoms: bool = True
    update_activations: bool = True
    mode: Mode | None = None
    seed: int = 0
    init: str = "random"  # "random" | "prior"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ConfigError("rel_tol must be >= 0")
        if self.epsilon_floor is not None and self.epsilon_floor < 0:
            raise ConfigError("epsilon_floor must be >= 0")
        if self.init not in ("random", "prior"):
            raise ConfigError(f"unknown init strategy {self.init!r}")

    def resolve_epsilon(self, hyper: HyperParams) -> float:
        if self.epsilon_floor is None:
            return 0.0 if np.all(hyper.alpha >= 1.0) else DEFAULT_EPSILON
        if self.epsilon_floor == 0.0 and np.any(hyper.alpha < 1.0):
            raise ConfigError(
                "epsilon_floor=0 requires all shape hyperparameters >= 1"
            )
        return self.epsilon_floor

    def resolve_mode(self, dataset: Dataset) -> Mode:
        return dataset.mode if self.mode is None else Mode(self.mode)


@dataclass(frozen=True)
class EmState:
    """Current factors plus the objective trace (one value per completed
    iteration, evaluated at that iteration's incoming parameters)."""

    model: FactorModel
    objective_trace: tuple = ()
    iteration: int = 0


@dataclass(frozen=True)
class EmResult:
    model: FactorModel
    objective_trace: np.ndarray
    converged: bool
    n_iterations: int
    wall_times: np.ndarray = field(default_factory=lambda: np.array([]))

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[-1])


def xlogy_signed(a, b):
    """a*log(b) with 0*log(0)=0 and a>0, b=0 -> -inf (scipy's xlogy gives
    nan there)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((a > 0) & (b == 0.0), -np.inf, xlogy(a, b))


def _check_dims(model: FactorModel, dataset: Dataset, hyper: HyperParams):
    mismatches = [p for p in validate(model, hyper, dataset) if "disagree" in p]
    if mismatches:
        raise ValueError("; ".join(mismatches))


def _objective_from_rates(lam_bar, theta, lam, dataset, hyper, mode: Mode) -> float:
    x_obs = dataset.x[dataset.mask]
    l0 = lam_bar[0][dataset.mask]
    l1 = lam_bar[1][dataset.mask]
    if mode is Mode.INTEGER:
        sig = l0 * l1
        ax = np.abs(x_obs)
        terms = log_0f1(ax + 1.0, sig) - log_gamma(ax + 1.0)
        terms = terms - l0 + xlogy_signed(np.maximum(x_obs, 0.0), l0)
        terms = terms - l1 + xlogy_signed(np.maximum(-x_obs, 0.0), l1)
        data_term = float(np.sum(terms))
    else:
        data_term = -float(np.sum(skellam_divergence(x_obs, l0, l1)))
    # The objective genuinely diverges to +inf where a parameter sits at 0
    # with a shape below one (that is what the epsilon floor prevents).
    act_shapes = hyper.activation_shapes()
    atom_shapes = hyper.atom_shapes()
    if (np.any((lam == 0.0) & (act_shapes < 1.0))
            or np.any((theta == 0.0) & (atom_shapes < 1.0))):
        return np.inf
    prior_act = (float(np.sum(xlogy_signed(act_shapes - 1.0, lam)))
                 - float(np.sum(hyper.activation_rates() * lam)))
    prior_atoms = float(np.sum(xlogy_signed(atom_shapes - 1.0, theta)))
    total = data_term + prior_act + prior_atoms
    return -np.inf if np.isnan(total) else total


def em_objective(model: FactorModel, dataset: Dataset, hyper: HyperParams,
                 mode: Mode | None = None) -> float:
    """Posterior objective: data log-likelihood (integer mode) or negated
    divergence sum (real limit), plus Gamma/Dirichlet log-prior terms.
    The parameter-free constant is dropped."""
    _check_dims(model, dataset, hyper)
    lam_bar, _ = reconstruct(model)
    return _objective_from_rates(lam_bar, model.atoms.theta,
                                 model.activations.lam, dataset, hyper,
                                 mode or dataset.mode)


def _multiplicative_factor(lam_bar, dataset: Dataset, mode: Mode) -> np.ndarray:
    """U[s, i, j]: 1 off the mask, the posterior-mean ratio kernels on it.

    A zero marginal rate under a matching nonzero observation makes the
    model impossible; a zero marginal otherwise zeroes all its underlying
    source rates, so U is set to 0 there to keep contractions finite."""
    mask = dataset.mask
    x_obs = dataset.x[mask]
    l = np.stack([lam_bar[0][mask], lam_bar[1][mask]])
    maxpart = np.stack([np.maximum(x_obs, 0.0), np.maximum(-x_obs, 0.0)])
    if np.any((l == 0.0) & (maxpart > 0.0)):
        raise NumericalError(
            "zero reconstructed marginal rate under a nonzero observation"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = np.where(maxpart > 0.0, maxpart / l, 0.0)
    if mode is Mode.INTEGER:
        sig = l[0] * l[1]
        root = np.sqrt(sig)
        denom = np.abs(x_obs) + 1.0 + root * bessel_ratio(np.abs(x_obs) + 1.0,
                                                          2.0 * root)
        bessel_part = l[::-1] / denom
    else:
        denom = np.abs(x_obs) + np.sqrt(x_obs * x_obs + 4.0 * l[0] * l[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            bessel_part = np.where(denom > 0.0, 2.0 * l[::-1] / denom, 0.0)
    u_obs = np.where(l == 0.0, 0.0, direct + bessel_part)
    u = np.ones((2,) + dataset.shape)
    u[0][mask] = u_obs[0]
    u[1][mask] = u_obs[1]
    return u


def _em_iteration(theta, lam, dataset, hyper, mode, eps, update_atoms,
                  update_activations, iteration):
    lam_bar = np.einsum("sik,kj->sij", theta, lam)
    objective = _objective_from_rates(lam_bar, theta, lam, dataset, hyper, mode)
    u = _multiplicative_factor(lam_bar, dataset, mode)
    if update_activations:
        u_act = np.einsum("sij,sik->kj", u, theta)
        lam_new = np.maximum(lam * u_act + hyper.activation_shapes() - 1.0, eps)
        lam_new = lam_new / (1.0 + hyper.activation_rates())
    else:
        lam_new = lam
    if update_atoms:
        u_atoms = np.einsum("sij,kj->sik", u, lam)
        raw = np.maximum(theta * u_atoms + hyper.atom_shapes() - 1.0, eps)
        colsums = raw.sum(axis=(0, 1))
        if np.any(colsums <= 0.0):
            raise NumericalError("atom column collapsed to zero mass",
                                 iteration=iteration)
        theta_new = raw / colsums
    else:
        theta_new = theta
    return objective, theta_new, lam_new


def em_step(state: EmState, dataset: Dataset, hyper: HyperParams,
            config: EmConfig) -> EmState:
    """One full EM iteration; records the objective at the incoming
    parameters and returns the updated state."""
    objective, theta_new, lam_new = _em_iteration(
        state.model.atoms.theta, state.model.activations.lam, dataset, hyper,
        config.resolve_mode(dataset), config.resolve_epsilon(hyper),
        config.update_atoms, config.update_activations, state.iteration,
    )
    model = FactorModel(Atoms(theta_new), Activations(lam_new))
    return EmState(model=model,
                   objective_trace=state.objective_trace + (objective,),
                   iteration=state.iteration + 1)


def initial_model(dataset: Dataset, hyper: HyperParams, config: EmConfig,
                  fixed_atoms: Atoms | None = None) -> FactorModel:
    """Starting point: seeded random draw (flat Dirichlet columns,
    unit-shape Gamma activations at the data scale) or the prior-mean
    strategy."""
    i, k, j = hyper.dims
    rng = np.random.default_rng(config.seed)
    if config.init == "prior":
        atom_shapes = hyper.atom_shapes()
        theta = atom_shapes / atom_shapes.sum(axis=(0, 1))
        lam = hyper.activation_shapes() / (1.0 + hyper.activation_rates())
    else:
        theta = rng.dirichlet(np.ones(2 * i), size=k).T.reshape(2, i, k)
        observed = np.abs(dataset.x[dataset.mask])
        scale = float(observed.mean()) + 1.0 if observed.size else 1.0
        lam = rng.gamma(shape=1.0, scale=scale, size=(k, j))
    if fixed_atoms is not None:
        theta = fixed_atoms.theta
    return FactorModel(Atoms(theta), Activations(lam))


def em_fit(dataset: Dataset, hyper: HyperParams, config: EmConfig | None = None,
           init: FactorModel | None = None) -> EmResult:
    """Iterate EM until the relative objective change drops below
    ``rel_tol`` or ``max_iters`` is reached.

    The returned trace holds the objective at the start of every
    iteration plus a final evaluation at the returned model."""
    config = config or EmConfig()
    eps = config.resolve_epsilon(hyper)
    mode = config.resolve_mode(dataset)
    model = init if init is not None else initial_model(dataset, hyper, config)
    problems = validate(model, hyper, dataset)
    if problems:
        raise ValueError("; ".join(problems))
    theta = model.atoms.theta
    lam = model.activations.lam
    trace: list[float] = []
    wall: list[float] = []
    start = time.perf_counter()
    converged = False
    iterations = 0
    for it in range(config.max_iters):
        f, theta, lam = _em_iteration(theta, lam, dataset, hyper, mode, eps,
                                      config.update_atoms,
                                      config.update_activations, it)
        if not np.isfinite(f):
            raise NumericalError("objective became non-finite", iteration=it)
        trace.append(f)
        wall.append(time.perf_counter() - start)
        iterations = it + 1
        if it >= 1 and abs(trace[-1] - trace[-2]) / (abs(trace[-2]) + 1.0) < config.rel_tol:
            converged = True
            break
    final_model = FactorModel(Atoms(theta), Activations(lam))
    trace.append(em_objective(final_model, dataset, hyper, mode))
    wall.append(time.perf_counter() - start)
    return EmResult(model=final_model, objective_trace=np.array(trace),
                    converged=converged, n_iterations=iterations,
                    wall_times=np.array(wall))
