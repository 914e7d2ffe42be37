"""Uniform power baselines and successive lower-bound maximization (SLM).

Downlink powers are optimized block by block (per AP by default). Each
block step maximizes a concave minorizer of the objective that is tight at
the current point, so the true objective never decreases. The uplink uses a
single block over all users' powers.
"""

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ParameterError, check_budget_vector, check_count, check_positive
from .rates import (
    DlEffectiveChannels,
    DlMinorizer,
    PowerAllocation,
    UlEffectiveChannels,
    dl_rates,
    ul_g_gradients,
    ul_g_terms,
    ul_rates,
)

BLOCK_MODES = ("per_ap", "single", "per_scalar")
OBJECTIVES = ("sum", "min")
DL_BUDGETS = ("radiated", "coefficient")
SOFTMIN_SHRINK = 10.0
EPIGRAPH_MAX_VARS = 256


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules and line-search constants.

    ``max_outer`` caps full sweeps over the blocks, ``max_sweeps`` caps the
    minorize/maximize repetitions inside one block and ``max_inner`` caps
    projected-gradient iterations per concave subproblem.

    ``block_mode=None`` picks per-AP blocks for sum-rate and a single block
    for max-min. ``n_starts > 1`` adds random feasible starts drawn from
    ``start_seed`` after the uniform one and keeps the best run; half of
    them use log-uniform power levels spanning four decades.
    """

    outer_tol: float = 1e-4
    inner_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 200
    max_sweeps: int = 20
    step_init: float = 1.0
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    block_mode: str = None
    time_limit_s: float = None
    n_starts: int = 1
    start_seed: int = 0

    def __post_init__(self):
        check_positive(self.outer_tol, "outer_tol")
        check_positive(self.inner_tol, "inner_tol")
        check_count(self.max_outer, "max_outer")
        check_count(self.max_inner, "max_inner")
        check_count(self.max_sweeps, "max_sweeps")
        check_positive(self.step_init, "step_init")
        for name in ("armijo_c", "armijo_shrink"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ParameterError(f"{name} must lie in (0, 1), got {value!r}")
        if self.block_mode is not None and self.block_mode not in BLOCK_MODES:
            raise ParameterError(f"block_mode must be one of {BLOCK_MODES} or None")
        check_count(self.n_starts, "n_starts")
        if int(self.start_seed) < 0:
            raise ParameterError("start_seed must be >= 0")
        if self.time_limit_s is not None:
            check_positive(self.time_limit_s, "time_limit_s")


@dataclass
class OptimizationTrace:
    objective_per_iteration: list = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False
    constraint_violation_max: float = 0.0
    timed_out: bool = False

    def to_dict(self):
        return {
            "objective_per_iteration": [float(v) for v in self.objective_per_iteration],
            "sweeps": self.sweeps,
            "converged": self.converged,
            "constraint_violation_max": float(self.constraint_violation_max),
            "timed_out": self.timed_out,
        }


# --------------------------------------------------------------- baselines


def uniform_dl(association, precoders, p_max):
    """Each AP splits its budget evenly over its served users.

    ``eta[k, m] = p_max[m] / (|K(m)| tr(Q_km Q_km^H))`` for served pairs, so
    the radiated power of every AP equals its budget. ``precoders`` is either
    the (K, M, N_AP, P) precoder array or a (K, M) array of traces.
    """
    mask = np.asarray(getattr(association, "mask", association), dtype=bool)
    K, M = mask.shape
    p_max = check_budget_vector(p_max, M, "p_max")
    precoders = np.asarray(getattr(precoders, "precoders", precoders))
    if precoders.ndim == 4:
        weight = np.real(np.einsum("kmap,kmap->km", precoders, precoders.conj()))
    else:
        weight = np.asarray(precoders, dtype=float)
    usable = mask & (weight > 0)
    if np.any(mask & ~usable):
        warnings.warn("zero-trace precoder: pair left unserved", RuntimeWarning, stacklevel=2)
    count = usable.sum(axis=0)
    share = np.divide(p_max, count, out=np.zeros(M), where=count > 0)
    return PowerAllocation(dl=np.divide(share[None, :], weight, out=np.zeros((K, M)),
                                        where=usable))


def uniform_ul(n_users, n_ms_antennas, p_max):
    """Every MS transmits ``p_max / N_MS``."""
    n_users = check_count(n_users, "n_users")
    n_ms_antennas = check_count(n_ms_antennas, "n_ms_antennas")
    return PowerAllocation(ul=check_budget_vector(p_max, n_users, "p_max") / n_ms_antennas)


# ------------------------------------------------------------- projections


def project_capped_simplex(v, budget):
    """Euclidean projection onto ``{w >= 0, sum(w) <= budget}``."""
    budget = check_positive(budget, "budget")
    v = np.asarray(v, dtype=float)
    w = np.maximum(v, 0.0)
    if w.sum() <= budget:
        return w
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - budget
    idx = np.arange(1, len(u) + 1)
    rho = np.flatnonzero(u - css / idx > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_box(v, upper):
    return np.clip(np.asarray(v, dtype=float), 0.0, upper)


def project_orthant_ball(v, radius_sq):
    """Projection onto ``{x >= 0, |x|^2 <= radius_sq}``: clamp, then shrink."""
    w = np.maximum(np.asarray(v, dtype=float), 0.0)
    norm_sq = float(w @ w)
    if norm_sq > radius_sq:
        w = w * np.sqrt(max(radius_sq, 0.0) / norm_sq)
    return w


def project_grouped_balls(v, groups, radius_sq):
    """Apply :func:`project_orthant_ball` to every group of entries at once.

    ``groups[i]`` is the group index of entry ``i``; ``radius_sq[g]`` the
    squared radius of group ``g``.
    """
    w = np.maximum(np.asarray(v, dtype=float), 0.0)
    norm_sq = np.bincount(groups, weights=w * w, minlength=len(radius_sq))
    shrink = np.ones_like(norm_sq)
    over = norm_sq > radius_sq
    shrink[over] = np.sqrt(np.maximum(radius_sq[over], 0.0) / norm_sq[over])
    return w * shrink[groups]


# ------------------------------------------------------------ inner solvers


def _stationarity(x, g, project, scale):
    gmax = np.max(np.abs(g))
    if gmax == 0:
        return 0.0
    return np.max(np.abs(project(x + (scale / gmax) * g) - x)) / scale


def solve_concave_block(objective_fn, gradient_fn, budget=None, start=None, cfg=None,
                        project=None, scale=None):
    """Projected gradient ascent with Armijo backtracking.

    Maximizes a concave ``objective_fn`` over the capped simplex
    ``{x >= 0, sum(x) <= budget}`` unless another ``project`` is given. Trial
    steps start from a Barzilai-Borwein estimate. Stops when the scaled
    projected-gradient step falls below ``cfg.inner_tol`` or after
    ``cfg.max_inner`` iterations. The result is feasible and never worse
    than ``start``.
    """
    cfg = cfg or SolverConfig()
    if project is None:
        if budget is None:
            raise ParameterError("need a budget or a projection")
        project = lambda v: project_capped_simplex(v, budget)  # noqa: E731
    if start is None:
        raise ParameterError("solve_concave_block needs a starting point")
    x = project(np.asarray(start, dtype=float))
    f = float(objective_fn(x))
    if not np.isfinite(f):
        raise ParameterError("objective is not finite at the starting point")
    if scale is None:
        scale = budget if budget is not None else max(float(np.max(np.abs(x))), 1.0)
    g = np.asarray(gradient_fn(x), dtype=float)
    step = None
    prev = None
    for _ in range(cfg.max_inner):
        if _stationarity(x, g, project, scale) < cfg.inner_tol:
            break
        if step is None:
            step = cfg.step_init * scale / max(np.max(np.abs(g)), 1e-300)
        elif prev is not None:
            dx, dg = x - prev[0], g - prev[1]
            curv = -float(dx @ dg)
            if curv > 0:
                step = float(dx @ dx) / curv
        accepted = False
        for _ in range(60):
            trial = project(x + step * g)
            f_trial = float(objective_fn(trial))
            if np.isfinite(f_trial) and f_trial >= f + cfg.armijo_c * float(g @ (trial - x)):
                accepted = True
                break
            step *= cfg.armijo_shrink
        if not accepted or np.array_equal(trial, x):
            break
        prev = (x, g)
        x, f = trial, f_trial
        g = np.asarray(gradient_fn(x), dtype=float)
    return x, f


def _epigraph_maxmin(values_fn, gradients_fn, x, scale, ref, cfg, upper, constraint):
    """SLSQP on ``max t  s.t.  f_k(x) >= t`` with ``x`` and ``f`` rescaled to O(1)."""
    n = len(x)

    def unpack(z):
        return np.maximum(z[:-1], 0.0) * scale

    def fun(z):
        return -z[-1]

    def fun_grad(z):
        out = np.zeros_like(z)
        out[-1] = -1.0
        return out

    def epi(z):
        return np.asarray(values_fn(unpack(z)), dtype=float) / ref - z[-1]

    def epi_jac(z):
        jac = np.asarray(gradients_fn(unpack(z)), dtype=float) * (scale / ref)
        return np.hstack([jac, -np.ones((jac.shape[0], 1))])

    cons = [{"type": "ineq", "fun": epi, "jac": epi_jac}]
    if constraint is not None:
        c_fun, c_jac = constraint
        cons.append({"type": "ineq",
                     "fun": lambda z: c_fun(unpack(z)) / scale**2,
                     "jac": lambda z: np.hstack([c_jac(unpack(z)) / scale,
                                                 np.zeros((len(c_fun(unpack(z))), 1))])})
    hi = np.broadcast_to(np.inf if upper is None else upper / scale, (n,))
    bounds = [(0.0, None if not np.isfinite(h) else h) for h in hi] + [(None, None)]
    z0 = np.append(x / scale, float(np.min(values_fn(x))) / ref)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(fun, z0, jac=fun_grad, bounds=bounds, constraints=cons, method="SLSQP",
                       options={"maxiter": cfg.max_inner, "ftol": cfg.inner_tol * 1e-3})
    return unpack(res.x)


def solve_maxmin_block(values_fn, gradients_fn, project, start, cfg=None, scale=1.0, *,
                       upper=None, constraint=None):
    """Maximize ``min_k f_k(x)`` for concave ``f_k`` over a convex set.

    ``values_fn`` returns the vector of ``f_k``; ``gradients_fn`` their
    gradients as rows. The feasible set is ``x >= 0``, ``x <= upper`` and
    ``c(x) >= 0`` for ``constraint = (c, jacobian_of_c)``; ``project`` maps
    onto it. Blocks of up to ``EPIGRAPH_MAX_VARS`` variables are solved in
    epigraph form by SLSQP. Larger blocks, or SLSQP points that do not
    improve on ``start``, fall back to the concave soft-min
    ``-mu log sum exp(-f_k / mu)``, which underestimates the minimum by at
    most ``mu log K``; each soft-min stage runs projected gradient ascent
    and warm starts the next with a smaller ``mu``. Returns the best point
    by the true minimum, never worse than ``start``.
    """
    cfg = cfg or SolverConfig()
    x = project(np.asarray(start, dtype=float))
    vals = np.asarray(values_fn(x), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ParameterError("objective is not finite at the starting point")
    best = [float(vals.min()), x]
    ref = max(float(np.max(np.abs(vals))), 1e-300)

    if len(x) <= EPIGRAPH_MAX_VARS and len(vals) > 1:
        cand = project(_epigraph_maxmin(values_fn, gradients_fn, x, scale, ref, cfg,
                                        upper, constraint))
        v = np.asarray(values_fn(cand), dtype=float)
        if np.all(np.isfinite(v)) and v.min() > best[0]:
            return cand, float(v.min())

    def track(point, v):
        f = float(v.min())
        if f > best[0]:
            best[0], best[1] = f, point

    n = len(vals)
    if n == 1:
        stages = [ref]
    else:
        spread = float(vals.max() - vals.min())
        mu = max(spread, 1e-3 * ref) / np.log(n)
        stages = []
        while mu > cfg.inner_tol * ref / np.log(n) and len(stages) < 12:
            stages.append(mu)
            mu /= SOFTMIN_SHRINK
        stages.append(mu)

    # the stages share one max_inner budget
    stage_cfg = replace(cfg, max_inner=max(1, -(-cfg.max_inner // len(stages))))
    for mu in stages:
        def objective(point, mu=mu):
            v = np.asarray(values_fn(point), dtype=float)
            if not np.all(np.isfinite(v)):
                return -np.inf
            track(point, v)
            lo = v.min()
            return lo - mu * np.log(np.sum(np.exp(-(v - lo) / mu)))

        def gradient(point, mu=mu):
            v = np.asarray(values_fn(point), dtype=float)
            w = np.exp(-(v - v.min()) / mu)
            return (w / w.sum()) @ gradients_fn(point)

        x, _ = solve_concave_block(objective, gradient, start=x, cfg=stage_cfg,
                                   project=project, scale=scale)
    return best[1], best[0]


# ---------------------------------------------------------------- downlink


def _dl_blocks(mask, mode):
    pairs = np.argwhere(mask)  # rows (j, m), sorted by j then m
    if mode == "single":
        return [pairs]
    if mode == "per_scalar":
        order = np.lexsort((pairs[:, 0], pairs[:, 1]))
        return [pairs[i:i + 1] for i in order]
    return [pairs[pairs[:, 1] == m] for m in range(mask.shape[1]) if np.any(pairs[:, 1] == m)]


def _objective(rates, kind, users):
    if kind == "sum":
        return float(np.sum(rates))
    return float(np.min(rates[users])) if len(users) else 0.0


def _deadline(cfg, deadline):
    if cfg.time_limit_s is not None:
        own = time.monotonic() + cfg.time_limit_s
        deadline = own if deadline is None else min(deadline, own)
    return deadline


START_DECADES = 4.0


def _random_fractions(rng, size, index):
    # odd starts spend the whole budget; even ones a log-uniform share of it,
    # since interference-limited optima often switch transmitters nearly off
    if index % 2 == 0:
        return np.ones(size)
    return 10.0 ** -rng.uniform(0.0, START_DECADES, size)


def _dl_extra_starts(mask, p_max, cfg):
    """Random feasible starts (Dirichlet split per AP), seeded by ``cfg``."""
    rng = np.random.default_rng(cfg.start_seed)
    for i in range(cfg.n_starts - 1):
        rho = np.zeros(mask.shape)
        fractions = _random_fractions(rng, mask.shape[1], i)
        for m in range(mask.shape[1]):
            users = np.flatnonzero(mask[:, m])
            if len(users):
                rho[users, m] = rng.dirichlet(np.ones(len(users))) * p_max[m] * fractions[m]
        yield rho


def _slm_dl(eff, association, p_max, cfg, block_mode, kind, budget, start, deadline):
    if not isinstance(eff, DlEffectiveChannels):
        raise ParameterError("expected DlEffectiveChannels")
    if budget not in DL_BUDGETS:
        raise ParameterError(f"budget must be one of {DL_BUDGETS}")
    cfg = cfg or SolverConfig()
    if block_mode is not None:
        cfg = replace(cfg, block_mode=block_mode)
    if cfg.block_mode is None:
        # cyclic blocks stall on the nonsmooth min, so max-min uses one block
        cfg = replace(cfg, block_mode="per_ap" if kind == "sum" else "single")
    deadline = _deadline(cfg, deadline)
    K, M = eff.mask.shape
    p_max = check_budget_vector(p_max, M, "p_max")
    mask = eff.mask
    if association is not None:
        mask = mask & np.asarray(getattr(association, "mask", association), dtype=bool)
    weight = np.where(mask, eff.tx_weight, 0.0) if budget == "radiated" else mask * 1.0
    work = eff.normalized() if budget == "radiated" else eff
    mask = mask & (weight > 0)
    users = np.flatnonzero(mask.any(axis=1))

    # everything below runs on radiated power rho = weight * eta
    if start is None:
        rho = uniform_dl(mask, np.where(mask, 1.0, 0.0), p_max).dl
    else:
        rho = np.asarray(start, dtype=float) * weight
        load = rho.sum(axis=0)
        if np.any(load > p_max * (1 + 1e-9)) or np.any(rho < 0):
            raise ParameterError("starting allocation is infeasible")

    problem = (work, mask, p_max, cfg, kind, users, deadline)
    best_rho, best = _dl_run(problem, rho * mask)
    for extra in _dl_extra_starts(mask, p_max, cfg):
        if best.timed_out:
            break
        cand_rho, cand = _dl_run(problem, extra)
        if cand.objective_per_iteration[-1] > best.objective_per_iteration[-1]:
            cand.timed_out = cand.timed_out or best.timed_out
            best_rho, best = cand_rho, cand

    eta = np.divide(best_rho, weight, out=np.zeros((K, M)), where=mask)
    load = (eta * weight).sum(axis=0)
    best.constraint_violation_max = float(max(np.max(load - p_max), 0.0))
    return PowerAllocation(dl=eta), best


def _extrapolate(evaluate, project, x, x_new, f_new, max_doublings=40):
    """Push along the minorize/maximize direction while the true objective rises.

    MM steps shrink near boundary optima (at high SNR a power grows by a
    factor of about ``1 + 1/SNR`` per step). Doubling the step and keeping
    only true improvements restores fast progress without losing ascent.
    """
    d = x_new - x
    best_x, best_f = x_new, f_new
    t = 2.0
    for _ in range(max_doublings):
        trial = project(x + t * d)
        if np.array_equal(trial, best_x):
            break
        f = evaluate(trial)
        if not f > best_f:
            break
        best_x, best_f = trial, f
        t *= 2.0
    return best_x, best_f


def _dl_run(problem, rho):
    work, mask, p_max, cfg, kind, users, deadline = problem
    f = _objective(dl_rates(work, rho), kind, users)
    trace = OptimizationTrace([f])
    blocks = _dl_blocks(mask, cfg.block_mode)
    for sweep in range(cfg.max_outer):
        for pairs in blocks:
            j, m = pairs[:, 0], pairs[:, 1]

            def evaluate(x, rho=rho):
                trial = rho.copy()
                trial[j, m] = x**2
                return _objective(dl_rates(work, trial), kind, users)

            for _ in range(cfg.max_sweeps):
                if deadline is not None and time.monotonic() > deadline:
                    trace.timed_out = True
                    break
                x0, x, project = _dl_block_step(work, rho, pairs, mask, p_max, cfg, kind, users)
                f_new = evaluate(x, rho)
                # the minorizer guarantees ascent; a drop can only be round-off
                if not f_new > f:
                    break
                x, f_new = _extrapolate(lambda v: evaluate(v, rho), project, x0, x, f_new)
                gain = f_new - f
                rho = rho.copy()
                rho[j, m] = x**2
                f = f_new
                if gain <= cfg.outer_tol * abs(f):
                    break
            if trace.timed_out:
                break
        trace.objective_per_iteration.append(f)
        trace.sweeps = sweep + 1
        prev = trace.objective_per_iteration[-2]
        if trace.timed_out:
            break
        if abs(f - prev) <= cfg.outer_tol * max(abs(prev), 1e-300):
            trace.converged = True
            break
    return rho, trace


def _dl_block_step(work, rho, pairs, mask, p_max, cfg, kind, users):
    """One minorize-maximize step on a block of amplitudes ``sqrt(rho)``.

    Returns the block's start and new amplitudes plus its projection.
    """
    j, m = pairs[:, 0], pairs[:, 1]
    aps = np.unique(m)
    mz = DlMinorizer(work, rho)
    c, lin, quad = mz.block_quadratic(pairs)
    in_block = np.zeros_like(mask)
    in_block[j, m] = True
    residual = p_max - np.where(in_block, 0.0, rho).sum(axis=0)
    residual = np.maximum(residual, 0.0)
    groups = np.searchsorted(aps, m)
    radius_sq = residual[aps]

    def project(x):
        return project_grouped_balls(x, groups, radius_sq)

    x0 = np.sqrt(rho[j, m])
    scale = float(np.sqrt(max(residual[aps].max(), 1e-300)))
    if kind == "sum":
        lin_s, quad_s = lin.sum(axis=0), quad.sum(axis=0)
        obj = lambda x: float(lin_s @ x - x @ quad_s @ x)  # noqa: E731
        grad = lambda x: lin_s - 2.0 * quad_s @ x  # noqa: E731
        x, _ = solve_concave_block(obj, grad, start=x0, cfg=cfg, project=project, scale=scale)
    else:
        lin_u, quad_u, c_u = lin[users], quad[users], c[users]

        def values(x):
            return c_u + lin_u @ x - (quad_u @ x) @ x

        def grads(x):
            return lin_u - 2.0 * (quad_u @ x)

        def ball(x):
            return radius_sq - np.bincount(groups, weights=x * x, minlength=len(aps))

        def ball_jac(x):
            jac = np.zeros((len(aps), len(x)))
            jac[groups, np.arange(len(x))] = -2.0 * x
            return jac

        x, _ = solve_maxmin_block(values, grads, project, x0, cfg, scale,
                                  constraint=(ball, ball_jac))
    return x0, x, project


def slm_sum_rate_dl(eff, association, p_max, cfg=None, block_mode=None, *,
                    budget="radiated", start=None, deadline=None):
    """Downlink sum-rate maximization; returns ``(PowerAllocation, trace)``.

    ``association`` (mask or AssociationMap, or None) further restricts the
    served pairs of ``eff``. ``block_mode`` overrides ``cfg.block_mode``.
    With ``budget="radiated"`` the per-AP constraint bounds the radiated
    power ``sum_k eta_km tr(Q_km Q_km^H)``; ``"coefficient"`` bounds
    ``sum_k eta_km`` directly. Starts from the uniform allocation unless
    ``start`` is given.
    """
    return _slm_dl(eff, association, p_max, cfg, block_mode, "sum", budget, start, deadline)


def slm_min_rate_dl(eff, association, p_max, cfg=None, block_mode=None, *,
                    budget="radiated", start=None, deadline=None):
    """Downlink max-min rate; users with no serving AP are left out of the min."""
    return _slm_dl(eff, association, p_max, cfg, block_mode, "min", budget, start, deadline)


# ------------------------------------------------------------------ uplink


def _slm_ul(eff, p_max, cfg, kind, start, deadline):
    if not isinstance(eff, UlEffectiveChannels):
        raise ParameterError("expected UlEffectiveChannels")
    cfg = cfg or SolverConfig()
    deadline = _deadline(cfg, deadline)
    K = eff.n_users
    p_max = check_budget_vector(p_max, K, "p_max")
    users = np.flatnonzero(~eff.orphan)
    if start is None:
        start = uniform_ul(K, eff.n_ms_antennas or 1, p_max).ul
    eta = np.asarray(start, dtype=float).copy()
    if np.any(eta < 0) or np.any(eta > p_max * (1 + 1e-12)):
        raise ParameterError("starting allocation is infeasible")

    problem = (eff, p_max, cfg, kind, users, deadline)
    best_eta, best = _ul_run(problem, np.minimum(eta, p_max))
    rng = np.random.default_rng(cfg.start_seed)
    for i in range(cfg.n_starts - 1):
        if best.timed_out:
            break
        if i % 2 == 0:
            extra = rng.uniform(0.0, p_max)
        else:
            extra = p_max * _random_fractions(rng, K, 1)
        cand_eta, cand = _ul_run(problem, extra)
        if cand.objective_per_iteration[-1] > best.objective_per_iteration[-1]:
            best_eta, best = cand_eta, cand
    best.constraint_violation_max = float(max(np.max(best_eta - p_max), -np.min(best_eta), 0.0))
    return PowerAllocation(ul=best_eta), best


def _ul_run(problem, eta):
    eff, p_max, cfg, kind, users, deadline = problem
    project = lambda v: project_box(v, p_max)  # noqa: E731
    scale = float(p_max.max())
    f = _objective(ul_rates(eff, eta), kind, users)
    trace = OptimizationTrace([f])
    for sweep in range(cfg.max_outer):
        if deadline is not None and time.monotonic() > deadline:
            trace.timed_out = True
            break
        anchor = eta
        _, g2_0 = ul_g_terms(eff, anchor)
        grad2 = ul_g_gradients(eff, anchor, own=False)

        def values(x):
            g1, _ = ul_g_terms(eff, x)
            return (g1 - g2_0 - grad2 @ (x - anchor))[users]

        def grads(x):
            return (ul_g_gradients(eff, x, own=True) - grad2)[users]

        if kind == "sum":
            eta_new, _ = solve_concave_block(lambda x: values(x).sum(),
                                             lambda x: grads(x).sum(axis=0),
                                             start=anchor, cfg=cfg, project=project,
                                             scale=scale)
        else:
            eta_new, _ = solve_maxmin_block(values, grads, project, anchor, cfg, scale,
                                             upper=p_max)
        f_new = _objective(ul_rates(eff, eta_new), kind, users)
        f_prev = f
        if f_new > f:
            eta, f = _extrapolate(lambda v: _objective(ul_rates(eff, v), kind, users),
                                  project, anchor, eta_new, f_new)
        trace.objective_per_iteration.append(f)
        trace.sweeps = sweep + 1
        if abs(f - f_prev) <= cfg.outer_tol * max(abs(f_prev), 1e-300):
            trace.converged = True
            break
    return eta, trace


def slm_sum_rate_ul(eff, p_max, cfg=None, start=None, deadline=None):
    """Uplink sum-rate maximization under ``0 <= eta_k <= p_max[k]``.

    Starts from the uniform allocation ``p_max / N_MS`` unless ``start`` is
    given.
    """
    return _slm_ul(eff, p_max, cfg, "sum", start, deadline)


def slm_min_rate_ul(eff, p_max, cfg=None, start=None, deadline=None):
    return _slm_ul(eff, p_max, cfg, "min", start, deadline)


# -------------------------------------------------------------- estimators


class _PowerControlBase(BaseEstimator):
    def _solver_config(self):
        return SolverConfig(outer_tol=self.outer_tol, inner_tol=self.inner_tol,
                            max_outer=self.max_outer, max_inner=self.max_inner,
                            max_sweeps=self.max_sweeps, step_init=self.step_init,
                            armijo_c=self.armijo_c, armijo_shrink=self.armijo_shrink,
                            block_mode=getattr(self, "block_mode", None),
                            time_limit_s=self.time_limit_s, n_starts=self.n_starts,
                            start_seed=self.start_seed)

    def _check_objective(self):
        if self.objective not in ("uniform",) + OBJECTIVES:
            raise ParameterError(
                f"objective must be 'uniform', 'sum' or 'min', got {self.objective!r}")

    def score(self, X, y=None):
        """Sum or minimum rate (bit/s) of the fitted allocation on ``X``."""
        rates = self.predict(X)
        if self.objective == "min":
            return float(np.min(rates))
        return float(np.sum(rates))


class DownlinkPowerControl(_PowerControlBase):
    """Per-AP downlink power allocation as an estimator.

    ``fit`` takes a :class:`~ucmimo.rates.DlEffectiveChannels` instance and
    stores ``eta_`` (K x M), ``trace_`` and ``rates_``. ``predict`` returns
    per-user rates of ``eta_`` on the given channel.
    """

    def __init__(self, objective="sum", p_max=0.2, budget="radiated", block_mode=None,
                 outer_tol=1e-4, inner_tol=1e-6, max_outer=50, max_inner=200, max_sweeps=20,
                 step_init=1.0, armijo_c=1e-4, armijo_shrink=0.5, time_limit_s=None,
                 n_starts=1, start_seed=0):
        self.objective = objective
        self.p_max = p_max
        self.budget = budget
        self.block_mode = block_mode
        self.outer_tol = outer_tol
        self.inner_tol = inner_tol
        self.max_outer = max_outer
        self.max_inner = max_inner
        self.max_sweeps = max_sweeps
        self.step_init = step_init
        self.armijo_c = armijo_c
        self.armijo_shrink = armijo_shrink
        self.time_limit_s = time_limit_s
        self.n_starts = n_starts
        self.start_seed = start_seed

    def fit(self, X, y=None):
        self._check_objective()
        if not isinstance(X, DlEffectiveChannels):
            raise ParameterError("X must be a DlEffectiveChannels instance")
        cfg = self._solver_config()
        if self.objective == "uniform":
            weight = X.tx_weight if self.budget == "radiated" else np.ones_like(X.tx_weight)
            alloc, self.trace_ = uniform_dl(X.mask, weight, self.p_max), None
        else:
            solver = slm_sum_rate_dl if self.objective == "sum" else slm_min_rate_dl
            alloc, self.trace_ = solver(X, None, self.p_max, cfg, budget=self.budget)
        self.eta_ = alloc.dl
        self.rates_ = dl_rates(X, self.eta_)
        return self

    def predict(self, X):
        check_is_fitted(self, "eta_")
        return dl_rates(X, self.eta_)


class UplinkPowerControl(_PowerControlBase):
    """Uplink per-MS power allocation as an estimator; see DownlinkPowerControl."""

    def __init__(self, objective="sum", p_max=0.1, n_ms_antennas=2, outer_tol=1e-4,
                 inner_tol=1e-6, max_outer=50, max_inner=200, max_sweeps=20, step_init=1.0,
                 armijo_c=1e-4, armijo_shrink=0.5, time_limit_s=None, n_starts=1,
                 start_seed=0):
        self.objective = objective
        self.p_max = p_max
        self.n_ms_antennas = n_ms_antennas
        self.outer_tol = outer_tol
        self.inner_tol = inner_tol
        self.max_outer = max_outer
        self.max_inner = max_inner
        self.max_sweeps = max_sweeps
        self.step_init = step_init
        self.armijo_c = armijo_c
        self.armijo_shrink = armijo_shrink
        self.time_limit_s = time_limit_s
        self.n_starts = n_starts
        self.start_seed = start_seed

    def fit(self, X, y=None):
        self._check_objective()
        if not isinstance(X, UlEffectiveChannels):
            raise ParameterError("X must be an UlEffectiveChannels instance")
        cfg = self._solver_config()
        start = uniform_ul(X.n_users, self.n_ms_antennas, self.p_max)
        if self.objective == "uniform":
            alloc, self.trace_ = start, None
        else:
            solver = slm_sum_rate_ul if self.objective == "sum" else slm_min_rate_ul
            alloc, self.trace_ = solver(X, self.p_max, cfg, start=start.ul)
        self.eta_ = alloc.ul
        self.rates_ = ul_rates(X, self.eta_)
        return self

    def predict(self, X):
        check_is_fitted(self, "eta_")
        return ul_rates(X, self.eta_)
