"""Core data model: factor tensors, shared-slot hyperparameter maps,
observation masks, and their JSON round trip.

Conventions: rows are attributes (``I``), columns are instances (``J``),
components are indexed by ``k``.  Atoms ``theta[s, i, k]`` are
dimensionless and normalized to sum to one over ``(s, i)`` per component;
activations ``lam[k, j]`` carry the physical dimension of the data.  The
signed dictionary is ``W = theta[0] - theta[1]``.

Construction only enforces shapes and finiteness; value-level invariants
(normalization, nonnegativity, map disjointness) are checked by
:func:`validate`, which reports violations instead of raising, so that
deliberately broken objects can be built and diagnosed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Mode",
    "Atoms",
    "Activations",
    "HyperParams",
    "Dataset",
    "FactorModel",
    "reconstruct",
    "split_atoms",
    "validate",
]

NORMALIZATION_ATOL = 1e-12


class Mode(str, enum.Enum):
    """Observation model: integer counts (one replicate) or the
    real-valued infinite-replication limit."""

    INTEGER = "integer"
    REAL_LIMIT = "real"


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


def _freeze_int(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=int, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Atoms:
    """Nonnegative tensor theta with shape (2, I, K)."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 3 or theta.shape[0] != 2:
            raise ValueError("theta must have shape (2, I, K)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        object.__setattr__(self, "theta", _freeze(theta))

    @property
    def n_attributes(self) -> int:
        return self.theta.shape[1]

    @property
    def n_components(self) -> int:
        return self.theta.shape[2]

    @property
    def w(self) -> np.ndarray:
        """Signed dictionary theta_0 - theta_1, shape (I, K)."""
        return self.theta[0] - self.theta[1]


@dataclass(frozen=True)
class Activations:
    """Nonnegative loading matrix lam with shape (K, J)."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim != 2:
            raise ValueError("lam must have shape (K, J)")
        if not np.all(np.isfinite(lam)):
            raise ValueError("lam must be finite")
        object.__setattr__(self, "lam", _freeze(lam))

    @property
    def n_components(self) -> int:
        return self.lam.shape[0]

    @property
    def n_instances(self) -> int:
        return self.lam.shape[1]


@dataclass(frozen=True)
class HyperParams:
    """Shape slots ``alpha``, rate slots ``beta`` and the index maps that
    assign one slot to every parameter coordinate.

    ``phi_map`` (2, I, K) and ``upsilon_map`` (K, J) both index ``alpha``
    but must have disjoint images (Dirichlet and Gamma shapes never share
    a slot); ``omega_map`` (K, J) indexes ``beta``.  ``beta`` entries may
    be zero, which is the improper flat prior used by unregularized fits;
    sampling from the generative model requires them strictly positive.
    """

    alpha: np.ndarray
    beta: np.ndarray
    phi_map: np.ndarray
    upsilon_map: np.ndarray
    omega_map: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        beta = np.asarray(self.beta, dtype=float).ravel()
        phi = np.asarray(self.phi_map, dtype=int)
        ups = np.asarray(self.upsilon_map, dtype=int)
        omg = np.asarray(self.omega_map, dtype=int)
        if phi.ndim != 3 or phi.shape[0] != 2:
            raise ValueError("phi_map must have shape (2, I, K)")
        if ups.ndim != 2 or omg.shape != ups.shape:
            raise ValueError("upsilon_map and omega_map must share shape (K, J)")
        if phi.shape[2] != ups.shape[0]:
            raise ValueError("phi_map and upsilon_map disagree on K")
        for name, m, n in (("phi_map", phi, alpha.size),
                           ("upsilon_map", ups, alpha.size),
                           ("omega_map", omg, beta.size)):
            if m.size and (m.min() < 0 or m.max() >= n):
                raise ValueError(f"{name} indexes out of range")
        object.__setattr__(self, "alpha", _freeze(alpha))
        object.__setattr__(self, "beta", _freeze(beta))
        object.__setattr__(self, "phi_map", _freeze_int(phi))
        object.__setattr__(self, "upsilon_map", _freeze_int(ups))
        object.__setattr__(self, "omega_map", _freeze_int(omg))

    # -- broadcast views ------------------------------------------------
    def atom_shapes(self) -> np.ndarray:
        """alpha[phi_map], shape (2, I, K)."""
        return self.alpha[self.phi_map]

    def activation_shapes(self) -> np.ndarray:
        """alpha[upsilon_map], shape (K, J)."""
        return self.alpha[self.upsilon_map]

    def activation_rates(self) -> np.ndarray:
        """beta[omega_map], shape (K, J)."""
        return self.beta[self.omega_map]

    @property
    def dims(self):
        two, i, k = self.phi_map.shape
        return i, k, self.upsilon_map.shape[1]

    # -- the two experimental slot layouts -------------------------------
    @staticmethod
    def per_coordinate(atom_alpha, act_alpha, act_beta, n_instances: int) -> "HyperParams":
        """Every atom coordinate gets its own shape slot; activations
        share one shape and one rate slot per component."""
        atom_alpha = np.asarray(atom_alpha, dtype=float)
        act_alpha = np.asarray(act_alpha, dtype=float).ravel()
        act_beta = np.asarray(act_beta, dtype=float).ravel()
        if atom_alpha.ndim != 3 or atom_alpha.shape[0] != 2:
            raise ValueError("atom_alpha must have shape (2, I, K)")
        k = atom_alpha.shape[2]
        if act_alpha.size != k or act_beta.size != k:
            raise ValueError("act_alpha and act_beta must have one entry per component")
        n_atom = atom_alpha.size
        phi = np.arange(n_atom).reshape(atom_alpha.shape)
        ups = n_atom + np.repeat(np.arange(k)[:, None], n_instances, axis=1)
        omg = np.repeat(np.arange(k)[:, None], n_instances, axis=1)
        return HyperParams(
            alpha=np.concatenate([atom_alpha.ravel(), act_alpha]),
            beta=act_beta,
            phi_map=phi,
            upsilon_map=ups,
            omega_map=omg,
        )

    @staticmethod
    def shared(n_attributes: int, n_components: int, n_instances: int,
               atom_alpha: float = 1.0, act_alpha: float = 1.0,
               act_beta: float = 0.0) -> "HyperParams":
        """One shape slot for all atoms, one for all activations, one
        rate slot: the layout behind the CLI's scalar shortcut flags."""
        phi = np.zeros((2, n_attributes, n_components), dtype=int)
        ups = np.ones((n_components, n_instances), dtype=int)
        omg = np.zeros((n_components, n_instances), dtype=int)
        return HyperParams(
            alpha=np.array([atom_alpha, act_alpha]),
            beta=np.array([act_beta]),
            phi_map=phi,
            upsilon_map=ups,
            omega_map=omg,
        )


@dataclass(frozen=True)
class Dataset:
    """Observed matrix, boolean observation mask, and observation mode."""

    x: np.ndarray
    mask: np.ndarray
    mode: Mode

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError("x must be a matrix")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError("mask must match the data shape")
        if not np.all(np.isfinite(x[mask])):
            raise ValueError("observed entries must be finite")
        object.__setattr__(self, "x", _freeze(x))
        m = mask.copy()
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "mode", Mode(self.mode))

    @classmethod
    def from_matrix(cls, x, mask=None, mode: Mode | None = None) -> "Dataset":
        """Full-observation dataset; mode inferred as INTEGER iff every
        observed entry is integral, unless given explicitly."""
        x = np.asarray(x, dtype=float)
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        if mode is None:
            observed = x[np.asarray(mask, dtype=bool)]
            integral = observed.size == 0 or np.all(np.mod(observed, 1.0) == 0)
            mode = Mode.INTEGER if integral else Mode.REAL_LIMIT
        return cls(x=x, mask=mask, mode=mode)

    @property
    def shape(self):
        return self.x.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    def observed_pairs(self) -> np.ndarray:
        """(n_observed, 2) array of (i, j) index pairs."""
        return np.argwhere(self.mask)


@dataclass(frozen=True)
class FactorModel:
    """An (atoms, activations) pair with matching component count."""

    atoms: Atoms
    activations: Activations

    def __post_init__(self):
        if self.atoms.n_components != self.activations.n_components:
            raise ValueError("atoms and activations disagree on K")

    @property
    def w(self) -> np.ndarray:
        return self.atoms.w

    @property
    def dims(self):
        return (self.atoms.n_attributes, self.atoms.n_components,
                self.activations.n_instances)


def reconstruct(model: FactorModel):
    """Forward model: rate tensor lambda_bar[s, i, j] = sum_k theta[s, i, k]
    lam[k, j] and the signed reconstruction x_hat = lambda_bar[0] -
    lambda_bar[1]."""
    lam_bar = np.einsum("sik,kj->sij", model.atoms.theta, model.activations.lam)
    return lam_bar, lam_bar[0] - lam_bar[1]


def split_atoms(w) -> Atoms:
    """Split a signed dictionary into normalized nonnegative atoms:
    theta[s, :, k] proportional to the positive/negative part of column k.

    Exactly one of theta[0, i, k], theta[1, i, k] is nonzero wherever
    w[i, k] is nonzero, and every column sums to one over (s, i)."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2:
        raise ValueError("w must be a matrix (I, K)")
    norms = np.abs(w).sum(axis=0)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize an all-zero dictionary column")
    pos = np.clip(w, 0.0, None) / norms
    neg = np.clip(-w, 0.0, None) / norms
    return Atoms(theta=np.stack([pos, neg]))


def validate(model: FactorModel | None = None,
             hyper: HyperParams | None = None,
             dataset: Dataset | None = None) -> list[str]:
    """Check every value-level invariant; returns a list of violation
    descriptions (empty means everything holds)."""
    problems: list[str] = []
    if model is not None:
        theta = model.atoms.theta
        if np.any(theta < 0):
            problems.append("atoms contain negative entries")
        colsums = theta.sum(axis=(0, 1))
        bad = np.abs(colsums - 1.0) > NORMALIZATION_ATOL
        for k in np.nonzero(bad)[0]:
            problems.append(
                f"atom column {k} sums to {colsums[k]:.12g}, expected 1"
            )
        if np.any(model.activations.lam < 0):
            problems.append("activations contain negative entries")
    if hyper is not None:
        if np.any(hyper.alpha <= 0):
            problems.append("shape hyperparameters must be > 0")
        if np.any(hyper.beta < 0):
            problems.append("rate hyperparameters must be >= 0")
        shared = set(np.unique(hyper.phi_map)) & set(np.unique(hyper.upsilon_map))
        if shared:
            problems.append(
                f"phi and upsilon images overlap on slots {sorted(shared)}"
            )
    if dataset is not None and dataset.mode is Mode.INTEGER:
        observed = dataset.x[dataset.mask]
        if observed.size and np.any(np.mod(observed, 1.0) != 0):
            problems.append("integer-mode dataset has non-integral entries")
    if model is not None and hyper is not None:
        i, k, j = hyper.dims
        if (i, k) != (model.atoms.n_attributes, model.atoms.n_components):
            problems.append("hyperparameter maps disagree with atoms on (I, K)")
        if (k, j) != model.activations.lam.shape:
            problems.append("hyperparameter maps disagree with activations on (K, J)")
    if model is not None and dataset is not None:
        i, _, j = model.dims
        if dataset.shape != (i, j):
            problems.append("dataset shape disagrees with the model")
    return problems
