"""Serving-set selection, spreading matrices, precoders and uplink combiners."""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ParameterError, check_complex_array, check_count

GRAM_COND_LIMIT = 1e12
RIDGE_SCALE = 1e-12


class IllConditionedWarning(RuntimeWarning):
    """A Gram matrix had to be regularized before inversion."""


@dataclass(frozen=True)
class AssociationMap:
    """Boolean serving mask ``mask[k, m]`` (True when AP ``m`` serves MS ``k``)."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ParameterError("association mask must be K x M")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def served_by_ap(self):
        return [np.flatnonzero(self.mask[:, m]).tolist() for m in range(self.mask.shape[1])]

    @property
    def serving_aps(self):
        return [np.flatnonzero(self.mask[k]).tolist() for k in range(self.mask.shape[0])]

    @property
    def orphans(self):
        return np.flatnonzero(~self.mask.any(axis=1))

    @classmethod
    def cell_free(cls, n_users, n_aps):
        return cls(np.ones((n_users, n_aps), dtype=bool))


def parse_mode(mode):
    """Normalize ``"cf" | "topn:<N>" | ("topn", N) | "above_average"``."""
    if isinstance(mode, tuple):
        name, *args = mode
    else:
        name, _, arg = str(mode).strip().lower().partition(":")
        args = [arg] if arg else []
    name = name.lower()
    if name == "cf" and not args:
        return ("cf",)
    if name == "above_average" and not args:
        return ("above_average",)
    if name == "topn" and len(args) == 1:
        try:
            n = int(args[0])
        except (TypeError, ValueError):
            raise ParameterError(f"bad TopN size in association mode {mode!r}") from None
        if n <= 0:
            raise ParameterError("TopN needs N >= 1")
        return ("topn", n)
    raise ParameterError(f"unknown association mode {mode!r}")


def build_association(estimated_channels, mode="cf"):
    """Serving sets from Frobenius norms of the channel estimates.

    ``topn:N``: each AP serves its N strongest users, ties going to the lower
    user index. ``above_average``: each AP serves users whose norm strictly
    exceeds that AP's mean norm.
    """
    est = np.asarray(getattr(estimated_channels, "estimated_channels", estimated_channels))
    if est.ndim != 4:
        raise ParameterError("estimated channels must have shape (K, M, N_AP, N_MS)")
    mode = parse_mode(mode)
    K, M = est.shape[:2]
    if mode[0] == "cf":
        return AssociationMap.cell_free(K, M)
    norms = np.linalg.norm(est, axis=(2, 3))
    mask = np.zeros((K, M), dtype=bool)
    if mode[0] == "topn":
        n = min(mode[1], K)
        order = np.argsort(-norms, axis=0, kind="stable")[:n]
        np.put_along_axis(mask, order, True, axis=0)
    else:
        mask = norms > norms.mean(axis=0, keepdims=True)
    return AssociationMap(mask)


def spreading_matrix(n_streams, n_ms_antennas):
    """``I_P kron 1_{N_MS/P}``: groups of N_MS/P antennas carry one stream each."""
    n_streams = check_count(n_streams, "n_streams")
    n_ms_antennas = check_count(n_ms_antennas, "n_ms_antennas")
    if n_ms_antennas % n_streams:
        raise ParameterError(f"{n_streams} streams do not divide {n_ms_antennas} antennas")
    return np.kron(np.eye(n_streams), np.ones((n_ms_antennas // n_streams, 1)))


def padded_spreading(streams, n_ms_antennas):
    """Stack of per-user spreading matrices zero-padded to the largest order.

    Returns ``(L, active)`` with ``L`` of shape (K, N_MS, P) and ``active``
    a (K, P) mask of real streams.
    """
    streams = np.asarray(streams, dtype=int)
    P = int(streams.max())
    L = np.zeros((len(streams), n_ms_antennas, P))
    active = np.zeros((len(streams), P), dtype=bool)
    for k, p in enumerate(streams):
        L[k, :, :p] = spreading_matrix(int(p), n_ms_antennas)
        active[k, :p] = True
    return L, active


def _regularized_solve(gram, rhs):
    """Solve ``gram x = rhs`` over a batch, ridging ill-conditioned systems."""
    cond = np.linalg.cond(gram)
    bad = ~np.isfinite(cond) | (cond > GRAM_COND_LIMIT)
    if np.any(bad):
        dim = gram.shape[-1]
        ridge = RIDGE_SCALE * np.real(np.trace(gram, axis1=-2, axis2=-1)) / dim
        ridge = np.where(bad, np.maximum(ridge, np.finfo(float).tiny), 0.0)
        gram = gram + ridge[..., None, None] * np.eye(dim)
        warnings.warn(f"{int(bad.sum())} Gram matrices regularized before inversion",
                      IllConditionedWarning, stacklevel=3)
    return np.linalg.solve(gram, rhs), bad


def downlink_precoder(G_hat, L):
    """Channel inversion precoder ``Q = G (G^H G)^{-1} L``.

    Works on a single (N_AP, N_MS) matrix or any batch with matching ``L``.
    """
    G_hat = np.asarray(G_hat, dtype=complex)
    gram = np.swapaxes(G_hat.conj(), -1, -2) @ G_hat
    L = np.broadcast_to(np.asarray(L, dtype=complex), gram.shape[:-1] + (np.shape(L)[-1],))
    x, _ = _regularized_solve(gram, L)
    return G_hat @ x


def uplink_combiner(G_hat, L):
    """Combiner ``(L^H G^H G L)^{-1} L^H G^H`` of shape (P, N_AP)."""
    G_hat = np.asarray(G_hat, dtype=complex)
    GL = G_hat @ np.asarray(L, dtype=complex)
    GL_h = np.swapaxes(GL.conj(), -1, -2)
    x, _ = _regularized_solve(GL_h @ GL, GL_h)
    return x


@dataclass(frozen=True)
class Beamformers:
    """Precoders ``Q[k, m]`` (N_AP x P) and combiners ``C[k, m]`` (P x N_AP).

    Defined for every pair so CF and UC share one computation; the
    association mask selects which ones are used. Stream dimensions are
    zero-padded to the largest multiplexing order.
    """

    precoders: np.ndarray
    combiners: np.ndarray
    spreading: np.ndarray
    active_streams: np.ndarray
    regularized: np.ndarray


def build_beamformers(estimated_channels, streams):
    est = check_complex_array(estimated_channels, 4, "estimated_channels")
    K, M, n_ap, n_ms = est.shape
    L, active = padded_spreading(np.broadcast_to(streams, (K,)), n_ms)
    P = L.shape[-1]
    gram = np.swapaxes(est.conj(), -1, -2) @ est
    x, bad_q = _regularized_solve(gram, np.broadcast_to(L[:, None], (K, M, n_ms, P)).astype(complex))
    Q = est @ x
    C = np.zeros((K, M, P, n_ap), dtype=complex)
    bad_c = np.zeros((K, M), dtype=bool)
    for p in np.unique(active.sum(axis=1)):
        users = np.flatnonzero(active.sum(axis=1) == p)
        GL = est[users] @ L[users, None, :, :p]
        GL_h = np.swapaxes(GL.conj(), -1, -2)
        comb, bad = _regularized_solve(GL_h @ GL, GL_h)
        C[users, :, :p, :] = comb
        bad_c[users] = bad
    return Beamformers(Q, C, L, active, bad_q | bad_c)


class ServingClusterer(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`build_association`.

    ``fit`` takes a (K, M, N_AP, N_MS) array of channel estimates and stores
    ``association_``; ``transform`` returns the boolean K x M serving mask
    for the estimates it is given.
    """

    def __init__(self, mode="cf"):
        self.mode = mode

    def fit(self, X, y=None):
        X = check_complex_array(X, 4, "X")
        self.association_ = build_association(X, self.mode)
        self.n_users_, self.n_aps_ = X.shape[:2]
        return self

    def transform(self, X):
        check_is_fitted(self, "association_")
        X = check_complex_array(X, 4, "X")
        return np.array(build_association(X, self.mode).mask)
