"""Achievable downlink/uplink rates, their log-det split and concave minorizers.

Stream dimensions are zero-padded to the largest multiplexing order ``P``.
Padded slots carry an identity noise block and zero signal, so they add
exactly nothing to any log-determinant below.

Downlink effective terms ``a[k, j, m] = L_k^H G_km^H Q_jm`` (P x P) are
zero where AP ``m`` does not serve user ``j``; uplink terms are
``b[k, j] = sum_{m in M(k)} C_km G_jm L_j``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import ParameterError

LN2 = np.log(2.0)
ETA_FLOOR_REL = 1e-12


def _herm(x):
    return np.swapaxes(x.conj(), -1, -2)


def _logdet(m):
    sign, val = np.linalg.slogdet(m)
    return val


def _pad_identity(active):
    return np.einsum("kp,pq->kpq", (~active).astype(float), np.eye(active.shape[1]))


@dataclass(frozen=True)
class PowerAllocation:
    """Downlink coefficients ``dl`` (K x M) and uplink powers ``ul`` (K,), in watts."""

    dl: np.ndarray = None
    ul: np.ndarray = None


@dataclass(frozen=True)
class DlEffectiveChannels:
    a: np.ndarray
    mask: np.ndarray
    noise: np.ndarray
    tx_weight: np.ndarray
    bandwidth_hz: float
    active: np.ndarray

    @property
    def n_users(self):
        return self.a.shape[0]

    @property
    def n_aps(self):
        return self.a.shape[2]

    @classmethod
    def from_terms(cls, a, sigma2_z, bandwidth_hz=1.0, mask=None, streams=None,
                   n_ms_antennas=None, tx_weight=None):
        """Assemble from raw ``a[k, j, m]`` terms (mainly for synthetic instances).

        Without ``streams``/``n_ms_antennas`` the spreading matrices are taken
        as identities, so the noise matrix is ``sigma2_z * I``.
        """
        a = np.asarray(a, dtype=complex)
        K, _, M, P, _ = a.shape
        mask = np.ones((K, M), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        streams = np.full(K, P) if streams is None else np.broadcast_to(streams, (K,))
        n_ms = P if n_ms_antennas is None else n_ms_antennas
        active = np.arange(P)[None, :] < np.asarray(streams)[:, None]
        ltl = (n_ms / np.asarray(streams, dtype=float))[:, None, None] * np.eye(P)
        noise = sigma2_z * ltl * active[:, :, None] * active[:, None, :] + _pad_identity(active)
        a = a * mask[None, :, :, None, None]
        a = a * active[:, None, None, :, None] * active[None, :, None, None, :]
        w = np.ones((K, M)) if tx_weight is None else np.asarray(tx_weight, dtype=float)
        return cls(a, mask, noise, w, float(bandwidth_hz), active)

    def normalized(self):
        """Same channel with powers measured as radiated power ``eta * tx_weight``."""
        scale = np.where(self.mask, 1.0 / np.sqrt(np.where(self.tx_weight > 0, self.tx_weight, 1.0)), 0.0)
        return DlEffectiveChannels(self.a * scale[None, :, :, None, None], self.mask,
                                   self.noise, np.ones_like(self.tx_weight),
                                   self.bandwidth_hz, self.active)


@dataclass(frozen=True)
class UlEffectiveChannels:
    b: np.ndarray
    noise: np.ndarray
    bandwidth_hz: float
    active: np.ndarray
    orphan: np.ndarray
    n_ms_antennas: int = None

    @property
    def n_users(self):
        return self.b.shape[0]

    @classmethod
    def from_terms(cls, b, noise, bandwidth_hz=1.0):
        b = np.asarray(b, dtype=complex)
        K, _, P, _ = b.shape
        noise = np.asarray(noise, dtype=complex)
        active = np.ones((K, P), dtype=bool)
        return cls(b, noise, float(bandwidth_hz), active, np.zeros(K, dtype=bool), P)


def dl_effective_channels(channels, association, beamformers, sigma2_z, bandwidth_hz):
    """Downlink terms ``L_k^H G_km^H Q_jm`` for all users and serving APs."""
    G = channels.true_channels
    L = beamformers.spreading
    mask = np.asarray(getattr(association, "mask", association), dtype=bool)
    H = np.einsum("kap,kmba->kmpb", L, G.conj())  # L_k^H G_km^H, (K, M, P, N_AP)
    Q = beamformers.precoders * mask[:, :, None, None]
    a = np.einsum("kmpb,jmbq->kjmpq", H, Q)
    active = beamformers.active_streams
    noise = sigma2_z * np.einsum("kap,kaq->kpq", L, L) + _pad_identity(active)
    tx_weight = np.real(np.einsum("kmap,kmap->km", Q, Q.conj()))
    return DlEffectiveChannels(a, mask, noise.astype(complex), tx_weight,
                               float(bandwidth_hz), active)


def ul_effective_channels(channels, association, beamformers, sigma2_w, bandwidth_hz):
    """Uplink terms ``B[k, j]`` and combined noise matrices ``G_k``.

    Users without any serving AP get zero terms and an identity noise block,
    which pins their rate at exactly zero.
    """
    G = channels.true_channels
    L = beamformers.spreading
    mask = np.asarray(getattr(association, "mask", association), dtype=bool)
    C = beamformers.combiners * mask[:, :, None, None]
    GL = np.einsum("jmab,jbq->jmaq", G, L)
    b = np.einsum("kmpa,jmaq->kjpq", C, GL)
    active = beamformers.active_streams
    noise = sigma2_w * np.einsum("kmpa,kmqa->kpq", C, C.conj())
    orphan = ~mask.any(axis=1)
    P = L.shape[-1]
    noise[orphan] = np.eye(P)
    noise = noise + _pad_identity(active) * (~orphan)[:, None, None]
    return UlEffectiveChannels(b, noise, float(bandwidth_hz), active, orphan, L.shape[1])


# ---------------------------------------------------------------- downlink


def _dl_mix(eff, eta):
    amp = np.sqrt(np.maximum(np.asarray(eta, dtype=float), 0.0)) * eff.mask
    return np.einsum("jm,kjmpq->kjpq", amp, eff.a)


def _dl_covariances(eff, eta):
    X = _dl_mix(eff, eta)
    gram = np.einsum("kjpq,kjrq->kjpr", X, X.conj())
    S = eff.noise + gram.sum(axis=1)
    own = gram[np.arange(len(X)), np.arange(len(X))]
    return X, S, S - own


def dl_rates(eff, eta):
    """Per-user downlink rates ``W log2 |I + R_k^{-1} A_kk A_kk^H|`` in bit/s.

    Evaluated in the whitened form ``|I + C^{-1} A A^H C^{-H}|`` with
    ``R_k = C C^H``, which avoids forming an explicit inverse.
    """
    X, S, R = _dl_covariances(eff, eta)
    K = len(X)
    own = X[np.arange(K), np.arange(K)]
    chol = np.linalg.cholesky(R)
    white = np.linalg.solve(chol, own)
    inner = np.eye(own.shape[-1]) + white @ _herm(white)
    return eff.bandwidth_hz * _logdet(inner) / LN2


def dl_user_rate(eff, eta, k):
    return float(dl_rates(eff, eta)[k])


def dl_g_terms(eff, eta):
    """The two log-det terms ``(g1, g2)`` per user, built from the double sum
    over AP pairs ``sqrt(eta_jm eta_jl) a_kjm a_kjl^H``."""
    amp = np.sqrt(np.maximum(np.asarray(eta, dtype=float), 0.0)) * eff.mask
    pair = np.einsum("jm,jl,kjmpq,kjlrq->kjpr", amp, amp, eff.a, eff.a.conj())
    K = pair.shape[0]
    total = eff.noise + pair.sum(axis=1)
    others = total - pair[np.arange(K), np.arange(K)]
    scale = eff.bandwidth_hz / LN2
    return scale * _logdet(total), scale * _logdet(others)


def _floored(eta, ref=None):
    # coefficients can be far below one watt (tr(QQ^H) ~ 1/beta), so the
    # default reference is the allocation's own scale
    if ref is None:
        ref = float(eta.max()) if eta.max() > 0 else 1.0
    return np.maximum(eta, ETA_FLOOR_REL * np.max(ref))


def dl_g_gradient(eff, eta, k, own=True, p_max=None):
    """Gradient of ``g1`` (``own=True``) or ``g2`` for user ``k`` w.r.t. all
    ``eta[j, m]``; shape (K, M), zero outside the serving mask.

    ``sqrt(eta)`` is not differentiable at 0, so entries are evaluated at
    ``max(eta, 1e-12 * ref)`` with ``ref`` the given ``p_max`` or the largest
    entry of ``eta``.
    """
    eta = np.asarray(eta, dtype=float)
    eta_c = _floored(eta, p_max)
    X = _dl_mix(eff, eta_c)[k]
    keep = np.ones(len(X), dtype=bool)
    if not own:
        keep[k] = False
    S = eff.noise[k] + np.einsum("jpq,jrq->pr", X[keep], X[keep].conj())
    S_inv = np.linalg.inv(S)
    # Re tr(S^-1 a_kjm X_kj^H) / sqrt(eta_jm)
    val = np.real(np.einsum("rp,jmpq,jrq->jm", S_inv, eff.a[k], X.conj()))
    grad = val / np.sqrt(eta_c) * eff.mask * keep[:, None]
    return eff.bandwidth_hz / LN2 * grad


def dl_g2_gradient(eff, eta, k, block_m=None, p_max=None):
    grad = dl_g_gradient(eff, eta, k, own=False, p_max=p_max)
    return grad if block_m is None else grad[:, block_m]


def dl_rate_gradient(eff, eta, k, p_max=None):
    return (dl_g_gradient(eff, eta, k, own=True, p_max=p_max)
            - dl_g_gradient(eff, eta, k, own=False, p_max=p_max))


def dl_tangent_bound(eff, eta, anchor, k, block_m=None, p_max=None):
    """``g1(eta) - g2(anchor) - grad g2(anchor) . (eta - anchor)``.

    The linearization is taken over the AP block ``block_m`` (all variables
    when ``None``); ``eta`` must equal ``anchor`` outside that block. This
    only bounds the rate from below where ``g2`` is concave on the block,
    which holds when no interferer is served by a second AP; see
    :func:`dl_surrogate` for a bound valid everywhere.
    """
    eta = np.asarray(eta, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    g1, _ = dl_g_terms(eff, eta)
    _, g2_0 = dl_g_terms(eff, anchor)
    grad = dl_g2_gradient(eff, anchor, k, p_max=p_max)
    step = eta - anchor
    if block_m is not None:
        outside = np.ones(eta.shape[1], dtype=bool)
        outside[block_m] = False
        if np.any(step[:, outside]):
            raise ParameterError("eta and anchor differ outside the linearized block")
    return float(g1[k] - g2_0[k] - np.sum(grad * step))


class DlMinorizer:
    """Concave quadratic minorizer of every user's downlink rate at an anchor.

    Works in amplitude variables ``s = sqrt(eta)``. Each rate satisfies

        R_k(s) >= W/ln2 * (log|W_k| + P - tr(W_k E_k(s)))

    for any ``U_k`` and ``W_k > 0``, with ``E_k(s) = I - U^H A_kk - A_kk^H U
    + U^H S_k(s) U``. Choosing ``U_k = S_k^{-1} A_kk`` and ``W_k = E_k^{-1}``
    at the anchor makes the bound tight there with matching gradient, and
    ``E_k`` is a convex quadratic in ``s``.
    """

    def __init__(self, eff, anchor):
        self.eff = eff
        s0 = np.sqrt(np.maximum(np.asarray(anchor, dtype=float), 0.0)) * eff.mask
        X, S, _ = _dl_covariances(eff, s0**2)
        K, P = len(X), X.shape[-1]
        own = X[np.arange(K), np.arange(K)]
        U = np.linalg.solve(S, own)
        E = np.eye(P) - _herm(own) @ U
        E = 0.5 * (E + _herm(E))
        Wt = np.linalg.inv(E)
        Wt = 0.5 * (Wt + _herm(Wt))
        self.s0 = s0
        self.U = U
        self.Wt = Wt
        self.scale = eff.bandwidth_hz / LN2
        self.F = np.einsum("kap,kjmaq->kjmpq", U.conj(), eff.a)  # U_k^H a_kjm
        self.T = np.einsum("jm,kjmpq->kjpq", s0, self.F)
        noise_term = np.real(np.einsum("kpq,kaq,kab,kbp->k", Wt, U.conj(), eff.noise, U))
        self.base = _logdet(Wt) + P - np.real(np.trace(Wt, axis1=1, axis2=2)) - noise_term

    def value(self, eta):
        """Minorizer value per user (bit/s) at ``eta``."""
        s = np.sqrt(np.maximum(np.asarray(eta, dtype=float), 0.0)) * self.eff.mask
        T = np.einsum("jm,kjmpq->kjpq", s, self.F)
        K = len(T)
        own = T[np.arange(K), np.arange(K)]
        lin = 2.0 * np.real(np.einsum("kpq,kqp->k", self.Wt, own))
        quad = np.real(np.einsum("kpq,kjqr,kjpr->k", self.Wt, T, T.conj()))
        return self.scale * (self.base + lin - quad)

    def block_quadratic(self, pairs):
        """Per-user quadratic ``c_k + l_k . x - x^T Q_k x`` over block amplitudes.

        ``pairs`` is a (V, 2) array of ``(j, m)`` indices; every other
        amplitude stays at the anchor. Returns ``(c, l, Q)`` with shapes
        (K,), (K, V), (K, V, V).
        """
        pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
        j, m = pairs[:, 0], pairs[:, 1]
        K = self.F.shape[0]
        Fv = self.F[:, j, m]  # (K, V, P, P)
        T0 = self.T.copy()
        np.add.at(T0, (slice(None), j), -self.s0[j, m][None, :, None, None] * Fv)
        Wt = self.Wt
        own0 = T0[np.arange(K), np.arange(K)]
        c = (self.base
             + 2.0 * np.real(np.einsum("kpq,kqp->k", Wt, own0))
             - np.real(np.einsum("kpq,kjqr,kjpr->k", Wt, T0, T0.conj())))
        own_sel = (j[None, :] == np.arange(K)[:, None])
        lin_own = 2.0 * np.real(np.einsum("kpq,kvqp->kv", Wt, Fv)) * own_sel
        T0v = T0[:, j]  # (K, V, P, P)
        lin_cross = 2.0 * np.real(np.einsum("kpq,kvqr,kvpr->kv", Wt, T0v, Fv.conj()))
        same_j = (j[:, None] == j[None, :])
        quad = np.real(np.einsum("kpq,kvqr,kwpr->kvw", Wt, Fv, Fv.conj())) * same_j
        return self.scale * c, self.scale * (lin_own - lin_cross), self.scale * quad


def dl_surrogate(eff, eta, anchor, k=None):
    """Downlink rate minorizer at ``anchor`` evaluated at ``eta`` (bit/s).

    Lower-bounds the rate everywhere, equals it at the anchor and shares its
    gradient there. Returns user ``k``'s value or the full vector.
    """
    vals = DlMinorizer(eff, anchor).value(eta)
    return vals if k is None else float(vals[k])


def dl_surrogate_gradient(eff, eta, anchor, k, p_max=None):
    """Analytic gradient in ``eta`` of user ``k``'s minorizer, shape (K, M)."""
    mz = DlMinorizer(eff, anchor)
    eta = np.asarray(eta, dtype=float)
    eta_c = _floored(eta, p_max)
    s = np.sqrt(eta_c) * eff.mask
    T = np.einsum("jm,kjmpq->kjpq", s, mz.F)[k]
    Wt, F = mz.Wt[k], mz.F[k]
    d_own = np.zeros(F.shape[:2])
    d_own[k] = 2.0 * np.real(np.einsum("pq,mqp->m", Wt, F[k]))
    d_quad = 2.0 * np.real(np.einsum("pq,jqr,jmpr->jm", Wt, T, F.conj()))
    grad_s = mz.scale * (d_own - d_quad)
    return grad_s / (2.0 * np.sqrt(eta_c)) * eff.mask


def sqrt_product_hessian(x, y):
    """Hessian of ``sqrt(x * y)``; negative semidefinite for x, y > 0."""
    r = np.sqrt(x * y)
    return np.array([[-y**2, x * y], [x * y, -x**2]]) / (4.0 * r**3)


# ------------------------------------------------------------------ uplink


def _ul_grams(eff):
    return np.einsum("kjpq,kjrq->kjpr", eff.b, eff.b.conj())


def ul_rates(eff, eta):
    """Per-user uplink rates ``W log2 |I + eta_k R_k^{-1} B_kk B_kk^H|`` (bit/s)."""
    eta = np.maximum(np.asarray(eta, dtype=float), 0.0)
    grams = _ul_grams(eff)
    K = len(grams)
    weighted = eta[None, :, None, None] * grams
    R = eff.noise + weighted.sum(axis=1) - weighted[np.arange(K), np.arange(K)]
    own = np.sqrt(eta)[:, None, None] * eff.b[np.arange(K), np.arange(K)]
    chol = np.linalg.cholesky(R)
    white = np.linalg.solve(chol, own)
    inner = np.eye(own.shape[-1]) + white @ _herm(white)
    rates = eff.bandwidth_hz * _logdet(inner) / LN2
    return np.where(eff.orphan, 0.0, rates)


def ul_user_rate(eff, eta, k):
    return float(ul_rates(eff, eta)[k])


def ul_g_terms(eff, eta):
    eta = np.maximum(np.asarray(eta, dtype=float), 0.0)
    grams = _ul_grams(eff)
    K = len(grams)
    total = eff.noise + np.einsum("j,kjpq->kpq", eta, grams)
    others = total - eta[:, None, None] * grams[np.arange(K), np.arange(K)]
    scale = eff.bandwidth_hz / LN2
    return scale * _logdet(total), scale * _logdet(others)


def ul_g_gradients(eff, eta, own=True):
    """Gradients ``d g[k] / d eta[j]`` for every user at once, shape (K, K)."""
    eta = np.maximum(np.asarray(eta, dtype=float), 0.0)
    grams = _ul_grams(eff)
    K = len(grams)
    keep = np.ones((K, K))
    if not own:
        np.fill_diagonal(keep, 0.0)
    S = eff.noise + np.einsum("kj,j,kjpq->kpq", keep, eta, grams)
    S_inv = np.linalg.inv(S)
    grad = np.real(np.einsum("kpq,kjqp->kj", S_inv, grams)) * keep
    return eff.bandwidth_hz / LN2 * grad


def ul_g2_gradient(eff, eta, k):
    return ul_g_gradients(eff, eta, own=False)[k]


def ul_rate_gradient(eff, eta, k):
    return ul_g_gradients(eff, eta, own=True)[k] - ul_g_gradients(eff, eta, own=False)[k]


def ul_surrogate(eff, eta, anchor, k=None):
    """``g1(eta) - g2(anchor) - grad g2(anchor) . (eta - anchor)`` per user.

    Uplink ``g2`` is a log-det of a matrix affine in the powers with PSD
    coefficients, hence concave, so this is a global lower bound.
    """
    eta = np.asarray(eta, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    g1, _ = ul_g_terms(eff, eta)
    _, g2_0 = ul_g_terms(eff, anchor)
    grad = ul_g_gradients(eff, anchor, own=False)
    vals = g1 - g2_0 - grad @ (eta - anchor)
    vals = np.where(eff.orphan, 0.0, vals)
    return vals if k is None else float(vals[k])
