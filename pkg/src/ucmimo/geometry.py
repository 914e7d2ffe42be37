"""Network layout, large-scale fading and Rayleigh small-scale fading.

All randomness is drawn from explicitly passed generators (or seeds), so a
fixed seed reproduces a drop bit-for-bit.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import (
    ParameterError,
    check_count,
    check_fraction,
    check_positive,
    check_rng,
)

BETA_FLOOR = 1e-30
COV_JITTER = 1e-10


def _frozen(arr):
    arr = np.array(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetworkTopology:
    """AP and MS positions on a wrap-around square plus antenna layout."""

    side_m: float
    ap_positions: np.ndarray
    ms_positions: np.ndarray
    n_ap_antennas: int = 4
    n_ms_antennas: int = 2
    multiplexing_orders: np.ndarray = None

    def __post_init__(self):
        side = check_positive(self.side_m, "side_m")
        ap = np.asarray(self.ap_positions, dtype=float).reshape(-1, 2)
        ms = np.asarray(self.ms_positions, dtype=float).reshape(-1, 2)
        if len(ap) < 1 or len(ms) < 1:
            raise ParameterError("need at least one AP and one MS")
        for name, pts in (("ap_positions", ap), ("ms_positions", ms)):
            if np.any(pts < 0) or np.any(pts >= side):
                raise ParameterError(f"{name} must lie in [0, side_m)^2")
        n_ap = check_count(self.n_ap_antennas, "n_ap_antennas")
        n_ms = check_count(self.n_ms_antennas, "n_ms_antennas")
        streams = self.multiplexing_orders
        if streams is None:
            streams = n_ms
        streams = np.broadcast_to(np.asarray(streams), (len(ms),)).astype(int)
        if np.any(streams < 1) or np.any(n_ms % streams != 0):
            raise ParameterError(
                "every multiplexing order must be a positive divisor of n_ms_antennas"
            )
        if n_ap < n_ms:
            raise ParameterError("channel inversion needs n_ap_antennas >= n_ms_antennas")
        object.__setattr__(self, "side_m", side)
        object.__setattr__(self, "ap_positions", _frozen(ap))
        object.__setattr__(self, "ms_positions", _frozen(ms))
        object.__setattr__(self, "n_ap_antennas", n_ap)
        object.__setattr__(self, "n_ms_antennas", n_ms)
        object.__setattr__(self, "multiplexing_orders", _frozen(streams))

    @property
    def n_aps(self):
        return len(self.ap_positions)

    @property
    def n_users(self):
        return len(self.ms_positions)


@dataclass(frozen=True)
class PathLossParams:
    """Three-slope path loss and two-component shadowing parameters.

    Breakpoints are given in meters, but the log-distance terms use
    ``d / distance_unit_m``: the constant ``L`` is calibrated for
    kilometres, so the default unit is 1000 m.
    """

    carrier_mhz: float = 1900.0
    h_ap_m: float = 15.0
    h_ms_m: float = 1.65
    d0_m: float = 10.0
    d1_m: float = 50.0
    sigma_sh_db: float = 8.0
    delta: float = 0.5
    d_decorr_m: float = 100.0
    distance_unit_m: float = 1000.0

    def __post_init__(self):
        check_positive(self.carrier_mhz, "carrier_mhz")
        check_positive(self.h_ap_m, "h_ap_m")
        check_positive(self.h_ms_m, "h_ms_m")
        check_positive(self.d0_m, "d0_m")
        check_positive(self.d1_m, "d1_m")
        if self.d0_m >= self.d1_m:
            raise ParameterError("need 0 < d0_m < d1_m")
        check_positive(self.sigma_sh_db, "sigma_sh_db", strict=False)
        check_fraction(self.delta, "delta")
        check_positive(self.d_decorr_m, "d_decorr_m")
        check_positive(self.distance_unit_m, "distance_unit_m")


@dataclass(frozen=True)
class LargeScaleGains:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 2 or not np.all(np.isfinite(beta)) or np.any(beta <= 0):
            raise ParameterError("beta must be a K x M matrix of positive finite gains")
        object.__setattr__(self, "beta", _frozen(beta))


@dataclass(frozen=True)
class ChannelSet:
    """True channels ``G[k, m]`` and, once trained, their estimates.

    Both arrays have shape ``(K, M, N_AP, N_MS)``.
    """

    true_channels: np.ndarray
    estimated_channels: np.ndarray = field(default=None)

    def __post_init__(self):
        g = np.asarray(self.true_channels)
        if g.ndim != 4:
            raise ParameterError("true_channels must have shape (K, M, N_AP, N_MS)")
        object.__setattr__(self, "true_channels", _frozen(g.astype(complex)))
        if self.estimated_channels is not None:
            est = np.asarray(self.estimated_channels)
            if est.shape != g.shape:
                raise ParameterError("estimated_channels shape differs from true_channels")
            object.__setattr__(self, "estimated_channels", _frozen(est.astype(complex)))

    def with_estimates(self, estimated):
        return ChannelSet(self.true_channels, estimated)

    def with_perfect_csi(self):
        return ChannelSet(self.true_channels, self.true_channels)


def place_nodes(side_m, n_aps, n_users, rng_seed=None, n_ap_antennas=4,
                n_ms_antennas=2, multiplexing_orders=None):
    """Drop APs and MSs i.i.d. uniformly over ``[0, side_m)^2``."""
    side_m = check_positive(side_m, "side_m")
    n_aps = check_count(n_aps, "n_aps")
    n_users = check_count(n_users, "n_users")
    rng = check_rng(rng_seed)
    ap = rng.uniform(0.0, side_m, size=(n_aps, 2))
    ms = rng.uniform(0.0, side_m, size=(n_users, 2))
    # uniform() is half-open in theory; guard the rounding edge
    ap = np.minimum(ap, np.nextafter(side_m, 0.0))
    ms = np.minimum(ms, np.nextafter(side_m, 0.0))
    return NetworkTopology(side_m, ap, ms, n_ap_antennas, n_ms_antennas,
                           multiplexing_orders)


def torus_distance(p, q, side_m):
    """Euclidean distance on the wrap-around square; broadcasts over leading axes."""
    delta = np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float))
    delta = np.minimum(delta, side_m - delta)
    return np.sqrt(np.sum(delta**2, axis=-1))


def pairwise_torus_distance(a, b, side_m):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return torus_distance(a[:, None, :], b[None, :, :], side_m)


def path_loss_constant(params):
    """Frequency/height dependent constant ``L`` of the three-slope model, in dB."""
    f = check_positive(params.carrier_mhz, "carrier_mhz")
    h_ap = check_positive(params.h_ap_m, "h_ap_m")
    h_ms = check_positive(params.h_ms_m, "h_ms_m")
    lf = np.log10(f)
    return (46.3 + 33.9 * lf - 13.82 * np.log10(h_ap)
            - (1.11 * lf - 0.7) * h_ms + 1.56 * lf - 0.8)


def path_loss_db(d_m, params):
    """Three-slope path loss (negative dB) for distance(s) ``d_m``."""
    d = np.asarray(d_m, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise ParameterError("distances must be finite and > 0")
    L = path_loss_constant(params)
    unit = params.distance_unit_m
    d0, d1 = params.d0_m, params.d1_m
    ld, ld0, ld1 = np.log10(d / unit), np.log10(d0 / unit), np.log10(d1 / unit)
    far = -L - 35.0 * ld
    mid = -L - 15.0 * ld1 - 20.0 * ld
    near = -L - 15.0 * ld1 - 20.0 * ld0
    out = np.where(d > d1, far, np.where(d > d0, mid, near))
    return out if out.ndim else float(out)


def path_loss_matrix(topology, params):
    """K x M path loss in dB using horizontal torus distances.

    Co-located nodes fall in the constant near branch, so zero distance is
    mapped to ``d0`` rather than rejected.
    """
    d = pairwise_torus_distance(topology.ms_positions, topology.ap_positions,
                                topology.side_m)
    return path_loss_db(np.maximum(d, params.d0_m * 0.5), params)


def exponential_covariance(points, side_m, d_decorr_m):
    d = pairwise_torus_distance(points, points, side_m)
    return 2.0 ** (-d / d_decorr_m)


def correlated_gaussian(cov, rng, size=None):
    """Zero-mean Gaussian samples with covariance ``cov``.

    Returns shape ``(n,)`` or ``(size, n)``. Falls back to a jittered
    Cholesky factor, then to an eigendecomposition, for semidefinite kernels.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            factor = np.linalg.cholesky(cov + COV_JITTER * np.eye(n))
        except np.linalg.LinAlgError as exc:
            w, v = np.linalg.eigh(cov)
            if w.min() < -1e-8 * max(1.0, w.max()):
                raise RuntimeError("shadowing covariance is not positive semidefinite") from exc
            factor = v * np.sqrt(np.clip(w, 0.0, None))
    shape = (n,) if size is None else (size, n)
    white = rng.standard_normal(shape)
    return white @ factor.T


def _location_field(points, side_m, d_decorr_m, rng, size):
    # sample once per distinct location so co-located nodes share a value exactly
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    cov = exponential_covariance(unique, side_m, d_decorr_m)
    return correlated_gaussian(cov, rng, size)[..., inverse.reshape(-1)]


def shadowing_field(topology, params, rng_seed=None, size=None):
    """Two-component correlated shadowing ``z`` of shape (K, M) or (size, K, M).

    ``z[k, m] = sqrt(delta) * a[m] + sqrt(1 - delta) * b[k]`` with ``a`` and
    ``b`` drawn independently from exponential-in-distance covariances.
    """
    rng = check_rng(rng_seed)
    a = _location_field(topology.ap_positions, topology.side_m, params.d_decorr_m, rng, size)
    b = _location_field(topology.ms_positions, topology.side_m, params.d_decorr_m, rng, size)
    z = (np.sqrt(params.delta) * a[..., None, :]
         + np.sqrt(1.0 - params.delta) * b[..., :, None])
    return z


def large_scale_gains(path_loss, z, sigma_sh_db):
    """Linear gains ``10^(PL/10) * 10^(sigma_sh * z / 10)``, floored at 1e-30."""
    path_loss = np.asarray(path_loss, dtype=float)
    z = np.asarray(z, dtype=float)
    if path_loss.shape != z.shape:
        raise ParameterError("path loss and shadowing matrices must have equal shape")
    beta = 10.0 ** ((path_loss + sigma_sh_db * z) / 10.0)
    return LargeScaleGains(np.maximum(beta, BETA_FLOOR))


def complex_normal(rng, shape, variance=1.0):
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_channels(gains, topology, rng_seed=None):
    """Rayleigh channels ``G[k, m] = sqrt(beta[k, m]) * H[k, m]``."""
    rng = check_rng(rng_seed)
    beta = gains.beta if isinstance(gains, LargeScaleGains) else np.asarray(gains)
    K, M = beta.shape
    if (K, M) != (topology.n_users, topology.n_aps):
        raise ParameterError("gain matrix does not match topology dimensions")
    h = complex_normal(rng, (K, M, topology.n_ap_antennas, topology.n_ms_antennas))
    return ChannelSet(np.sqrt(beta)[:, :, None, None] * h)
