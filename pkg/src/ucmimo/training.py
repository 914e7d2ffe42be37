"""Uplink training with pseudo-noise pilots and pilot-matched channel estimation."""

from dataclasses import dataclass

import numpy as np
from scipy.signal import max_len_seq

from ._validation import ParameterError, check_count, check_positive, check_rng
from .geometry import complex_normal


@dataclass(frozen=True)
class NoiseModel:
    sigma2_w: float
    sigma2_z: float

    def __post_init__(self):
        check_positive(self.sigma2_w, "sigma2_w")
        check_positive(self.sigma2_z, "sigma2_z")


@dataclass(frozen=True)
class PilotBook:
    """Per-user pilot matrices ``pilots[k]`` of shape (N_MS, tau_p)."""

    pilots: np.ndarray
    train_powers: np.ndarray

    def __post_init__(self):
        pilots = np.asarray(self.pilots, dtype=complex)
        if pilots.ndim != 3:
            raise ParameterError("pilots must have shape (K, N_MS, tau_p)")
        K, n_ms, tau_p = pilots.shape
        if tau_p < n_ms:
            raise ParameterError("tau_p must be >= N_MS")
        powers = np.broadcast_to(np.asarray(self.train_powers, dtype=float), (K,)).copy()
        if np.any(powers <= 0):
            raise ParameterError("training powers must be > 0")
        pilots.setflags(write=False)
        powers.setflags(write=False)
        object.__setattr__(self, "pilots", pilots)
        object.__setattr__(self, "train_powers", powers)

    @property
    def tau_p(self):
        return self.pilots.shape[2]

    def cross_products(self):
        """``C[j, k] = Phi_j @ Phi_k^H`` for every user pair."""
        return np.einsum("jat,kbt->jkab", self.pilots, self.pilots.conj())


def noise_variance(psd_dbm_hz=-174.0, bandwidth_hz=20e6, noise_figure_db=9.0):
    """Thermal noise power in watts over ``bandwidth_hz``."""
    bandwidth_hz = check_positive(bandwidth_hz, "bandwidth_hz")
    return 10.0 ** ((psd_dbm_hz - 30.0) / 10.0) * bandwidth_hz * 10.0 ** (noise_figure_db / 10.0)


def _symmetric_orthonormalize(rows):
    # (R R^H)^{-1/2} R: the orthonormal set closest to the original rows
    gram = rows @ rows.conj().T
    w, v = np.linalg.eigh(gram)
    if w.min() <= 1e-10 * w.max():
        raise ParameterError("pilot rows are linearly dependent; increase tau_p")
    return (v / np.sqrt(w)) @ v.conj().T @ rows


def _independent_rows(shifted, start, count):
    """``count`` truncated shifts beginning at ``start``; dependent ones are skipped.

    Truncation can make nominal shifts linearly dependent. The full circulant
    of an m-sequence is nonsingular, so scanning onwards always completes.
    """
    n_seq = len(shifted)
    nominal = shifted[(start + np.arange(count)) % n_seq]
    if np.linalg.matrix_rank(nominal) == count:
        return nominal
    picked = []
    for s in (start + np.arange(n_seq)) % n_seq:
        trial = np.array(picked + [shifted[s]])
        if np.linalg.matrix_rank(trial) == len(trial):
            picked.append(shifted[s])
            if len(picked) == count:
                return trial
    raise ParameterError("cannot find enough independent pilot rows; increase tau_p")


def generate_pilots(n_users, n_ms_antennas, tau_p, train_power=0.1, seed=None,
                    orthogonalize="user"):
    """Build pilots from cyclic shifts of one binary m-sequence.

    User ``k``, antenna row ``r`` uses shift ``k * n_ms_antennas + r`` of a
    length ``2**n - 1 >= tau_p`` sequence truncated to ``tau_p`` chips; if
    those truncated rows are linearly dependent the next shifts are used.
    Rows are then orthonormalized within each user (``orthogonalize="user"``)
    or jointly across all users (``"all"``, needs ``K * N_MS <= tau_p``).
    ``seed`` picks the LFSR start state; ``None`` keeps the all-ones state.
    """
    K = check_count(n_users, "n_users")
    n_ms = check_count(n_ms_antennas, "n_ms_antennas")
    tau_p = check_count(tau_p, "tau_p")
    if tau_p < n_ms:
        raise ParameterError(f"tau_p={tau_p} < N_MS={n_ms}: orthonormal rows impossible")
    if orthogonalize not in ("user", "all"):
        raise ParameterError("orthogonalize must be 'user' or 'all'")
    if orthogonalize == "all" and K * n_ms > tau_p:
        raise ParameterError("joint orthogonalization needs K * N_MS <= tau_p")

    nbits = max(2, int(np.ceil(np.log2(tau_p + 1))))
    state = None
    if seed is not None:
        rng = check_rng(seed)
        state = rng.integers(0, 2, size=nbits)
        if not state.any():
            state[0] = 1
    seq, _ = max_len_seq(nbits, state=state)
    chips = 1.0 - 2.0 * seq.astype(float)
    n_seq = len(chips)

    shifted = np.stack([np.roll(chips, -s)[:tau_p] for s in range(n_seq)])
    if orthogonalize == "all":
        rows = _symmetric_orthonormalize(_independent_rows(shifted, 0, K * n_ms))
        pilots = rows.reshape(K, n_ms, tau_p)
    else:
        pilots = np.stack([
            _symmetric_orthonormalize(_independent_rows(shifted, k * n_ms, n_ms))
            for k in range(K)
        ])
    return PilotBook(pilots.astype(complex), np.full(K, float(train_power)))


def training_observation(channels, pilot_book, sigma2_w, ap=None, rng_seed=None):
    """Received pilot block(s) ``Y_m = sum_k sqrt(p_k) G_km Phi_k + W_m``.

    ``channels`` is the (K, M, N_AP, N_MS) true channel array (or a
    ``ChannelSet``). Returns (N_AP, tau_p) for a single ``ap`` index,
    otherwise (M, N_AP, tau_p).
    """
    G = getattr(channels, "true_channels", channels)
    G = np.asarray(G)
    rng = check_rng(rng_seed)
    if ap is not None:
        G = G[:, ap:ap + 1]
    amp = np.sqrt(pilot_book.train_powers)
    clean = np.einsum("k,kmab,kbt->mat", amp, G, pilot_book.pilots)
    noise = complex_normal(rng, clean.shape, sigma2_w) if sigma2_w > 0 else 0.0
    Y = clean + noise
    return Y[0] if ap is not None else Y


def pm_estimate(Y, pilot_book, k=None):
    """Pilot-matched estimate ``Y Phi_k^H / sqrt(p_k)``.

    With a single AP block ``Y`` of shape (N_AP, tau_p) and an integer ``k``
    returns one (N_AP, N_MS) matrix. With ``k=None`` returns all users; a
    stacked ``Y`` of shape (M, N_AP, tau_p) yields (K, M, N_AP, N_MS).
    """
    Y = np.asarray(Y)
    phi_h = pilot_book.pilots.conj()
    scale = 1.0 / np.sqrt(pilot_book.train_powers)
    if k is not None:
        return scale[k] * Y @ phi_h[k].T
    if Y.ndim == 2:
        return np.einsum("k,at,kbt->kab", scale, Y, phi_h)
    return np.einsum("k,mat,kbt->kmab", scale, Y, phi_h)


def contamination_terms(channels, pilot_book):
    """Noise-free estimation error ``sum_{j != k} sqrt(p_j/p_k) G_jm Phi_j Phi_k^H``."""
    G = np.asarray(getattr(channels, "true_channels", channels))
    cross = pilot_book.cross_products()
    K = len(cross)
    cross = cross * (1.0 - np.eye(K))[:, :, None, None]
    ratio = np.sqrt(pilot_book.train_powers[:, None] / pilot_book.train_powers[None, :])
    return np.einsum("jk,jmab,jkbc->kmac", ratio, G, cross)


def estimate_channels(channels, pilot_book, sigma2_w, rng_seed=None):
    """Run training at every AP and return a ChannelSet carrying the estimates."""
    Y = training_observation(channels, pilot_book, sigma2_w, rng_seed=rng_seed)
    return channels.with_estimates(pm_estimate(Y, pilot_book))
