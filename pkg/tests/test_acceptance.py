"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section of the
terminal summary (see conftest.py).
"""

import functools
import time

import numpy as np
from _support import (
    BANDWIDTH,
    grid_dl,
    grid_ul,
    instance,
    oracle_dl_rate,
    oracle_dl_terms,
    random_feasible_dl,
    record,
)

from ucmimo.association import downlink_precoder, spreading_matrix, uplink_combiner
from ucmimo.cli import main as cli_main
from ucmimo.geometry import (
    ChannelSet,
    NetworkTopology,
    PathLossParams,
    complex_normal,
    path_loss_constant,
    path_loss_db,
    shadowing_field,
    torus_distance,
)
from ucmimo.optimize import (
    SolverConfig,
    slm_min_rate_dl,
    slm_min_rate_ul,
    slm_sum_rate_dl,
    slm_sum_rate_ul,
)
from ucmimo.rates import (
    dl_g_terms,
    dl_rates,
    dl_surrogate,
    dl_surrogate_gradient,
    ul_g_gradients,
    ul_g_terms,
    ul_rates,
    ul_surrogate,
)
from ucmimo.simulate import SimulationConfig, run_campaign, run_drop
from ucmimo.training import PilotBook, estimate_channels, generate_pilots


def criterion(number, limit_s=None):
    """Time a check returning ``(passed, detail)``, record it, then assert."""

    def decorate(check):
        @functools.wraps(check)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                passed, detail = check(*args, **kwargs)
            except Exception as exc:
                record(number, False, f"error: {exc!r}", time.perf_counter() - start)
                raise
            elapsed = time.perf_counter() - start
            if limit_s is not None and elapsed >= limit_s:
                passed, detail = False, f"{detail}; runtime {elapsed:.1f}s over {limit_s}s"
            record(number, passed, detail, elapsed)
            assert passed, detail

        return run

    return decorate


def _random_instance(rng):
    """Random small drop: K <= 4 users, M <= 6 APs, mixed association and CSI."""
    K, M = int(rng.integers(1, 5)), int(rng.integers(1, 7))
    mode = str(rng.choice(["cf", "topn:1", "topn:2", "above_average"]))
    csi = str(rng.choice(["estimated", "perfect"]))
    streams = int(rng.choice([1, 2]))
    tau_p = int(rng.integers(2, 9))
    return instance(int(rng.integers(2**31)), n_users=K, n_aps=M, mode=mode, csi=csi,
                    streams=streams, tau_p=tau_p)


# ------------------------------------------------------------ 1: channel


@criterion(1, limit_s=30)
def test_channel_model_suite():
    worst_jump = 0.0
    for unit in (1.0, 1000.0):
        p = PathLossParams(distance_unit_m=unit)
        L = path_loss_constant(p)
        for d in (p.d0_m, p.d1_m):
            below = path_loss_db(np.nextafter(d, 0), p)
            above = path_loss_db(np.nextafter(d, np.inf), p)
            worst_jump = max(worst_jump, abs(above - below))
        # the three closed-form branches evaluated right at the breakpoints
        u = lambda x: np.log10(x / unit)  # noqa: E731
        far_d1 = -L - 35 * u(p.d1_m)
        mid_d1 = -L - 15 * u(p.d1_m) - 20 * u(p.d1_m)
        mid_d0 = -L - 15 * u(p.d1_m) - 20 * u(p.d0_m)
        near = -L - 10 * np.log10((p.d1_m / unit) ** 1.5 * (p.d0_m / unit) ** 2)
        worst_jump = max(worst_jump, abs(far_d1 - mid_d1), abs(mid_d0 - near))
    continuity_ok = worst_jump <= 1e-9

    # a cluster straddling the wrap-around corner, so every pair is strongly correlated
    rng = np.random.default_rng(11)
    side = 1000.0
    ap = (np.array([985.0, 985.0]) + rng.uniform(0, 50, (5, 2))) % side
    ms = (np.array([985.0, 985.0]) + rng.uniform(0, 50, (4, 2))) % side
    topo = NetworkTopology(side, ap, ms)
    params = PathLossParams()
    n = 100_000
    z = shadowing_field(topo, params, 2024, size=n).reshape(n, -1)
    emp = z.T @ z / n
    d_ap = torus_distance(ap[:, None], ap[None], side)
    d_ms = torus_distance(ms[:, None], ms[None], side)
    theory = (params.delta * 2.0 ** (-d_ap / params.d_decorr_m)[None, :, None, :]
              + (1 - params.delta) * 2.0 ** (-d_ms / params.d_decorr_m)[:, None, :, None])
    theory = theory.reshape(z.shape[1], z.shape[1])
    cov_err = float(np.max(np.abs(emp - theory) / theory))
    var_err = float(np.max(np.abs(np.diag(emp) - 1.0)))
    passed = continuity_ok and cov_err < 0.05 and var_err < 0.02
    return passed, (f"breakpoint jump {worst_jump:.1e} dB, covariance max rel err {cov_err:.3f}, "
                    f"variance max err {var_err:.4f} over {n} samples")


# --------------------------------------------------------- 2: estimation


@criterion(2, limit_s=10)
def test_estimation_suite():
    rng = np.random.default_rng(2)
    exact_err = 0.0
    for _ in range(100):
        n_ms = int(rng.choice([1, 2]))
        K = int(rng.integers(1, 5))
        tau_p = K * n_ms + int(rng.integers(0, 4))
        book = generate_pilots(K, n_ms, tau_p, orthogonalize="all")
        book = PilotBook(book.pilots, rng.uniform(0.01, 0.2, K))
        G = complex_normal(rng, (K, int(rng.integers(1, 5)), 4, n_ms))
        est = estimate_channels(ChannelSet(G), book, 0.0).estimated_channels
        exact_err = max(exact_err, float(np.abs(est - G).max()))

    contam_err, smallest = 0.0, np.inf
    for _ in range(100):
        n_ms = 2
        K = int(rng.integers(2, 5))
        tau_p = int(rng.integers(n_ms, K * n_ms))
        book = generate_pilots(K, n_ms, tau_p, seed=int(rng.integers(1000)))
        p = rng.uniform(0.01, 0.2, K)
        book = PilotBook(book.pilots, p)
        M = int(rng.integers(1, 4))
        G = complex_normal(rng, (K, M, 4, n_ms))
        est = estimate_channels(ChannelSet(G), book, 0.0).estimated_channels
        phi = book.pilots
        for k in range(K):
            for m in range(M):
                cross = sum(np.sqrt(p[j] / p[k]) * G[j, m] @ phi[j] @ phi[k].conj().T
                            for j in range(K) if j != k)
                contam_err = max(contam_err, float(np.abs((est[k, m] - G[k, m]) - cross).max()))
                smallest = min(smallest, float(np.abs(cross).max()))
    passed = exact_err <= 1e-10 and contam_err <= 1e-10 and smallest > 0
    return passed, (f"orthogonal-pilot max err {exact_err:.1e}, contamination residual "
                    f"max err {contam_err:.1e} (smallest cross-term {smallest:.2e})")


# -------------------------------------------------------- 3: beamforming


@criterion(3, limit_s=10)
def test_beamforming_identities():
    rng = np.random.default_rng(3)
    worst_q = worst_c = 0.0
    count = 0
    while count < 1000:
        n_ms = int(rng.choice([1, 2, 4]))
        n_ap = int(rng.integers(n_ms, 9))
        streams = int(rng.choice([d for d in (1, 2, 4) if n_ms % d == 0]))
        G = complex_normal(rng, (n_ap, n_ms), variance=10.0 ** rng.uniform(-12, 0))
        L = spreading_matrix(streams, n_ms)
        if np.linalg.cond(G) > 1e3:
            continue  # only well-conditioned instances count
        scale = np.linalg.norm(G)
        Q = downlink_precoder(G, L)
        C = uplink_combiner(G, L)
        worst_q = max(worst_q, np.linalg.norm(G.conj().T @ Q - L))
        worst_c = max(worst_c, np.linalg.norm(C @ G @ L - np.eye(streams)))
        assert np.isfinite(scale)
        count += 1
    passed = worst_q < 1e-10 and worst_c < 1e-10
    return passed, f"max |G^H Q - L| {worst_q:.1e}, max |C G L - I| {worst_c:.1e} on {count} instances"


# ---------------------------------------------------------- 4: dual path


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)


@criterion(4)
def test_rate_dual_path_identity():
    rng = np.random.default_rng(4)
    worst_dl = worst_ul = worst_oracle = worst_orphan = 0.0
    for _ in range(200):
        drop, links = _random_instance(rng)
        mask = links.dl.mask
        served = mask.any(axis=1)
        eta = random_feasible_dl(rng, mask, links.dl.tx_weight, 0.2)
        direct = dl_rates(links.dl, eta)
        g1, g2 = dl_g_terms(links.dl, eta)
        worst_dl = max(worst_dl, float(np.max(_rel(direct, g1 - g2)[served], initial=0)))
        # unserved users: both forms are zero up to cancellation in g1 - g2
        worst_orphan = max(worst_orphan, float(np.max((np.abs(g1 - g2) / np.abs(g1))[~served], initial=0)))
        ch = drop.channels
        L = links.beamformers.spreading
        A = oracle_dl_terms(ch.true_channels, ch.estimated_channels, mask, L)
        loops = oracle_dl_rate(A, eta, mask, drop.noise.sigma2_z, L)
        worst_oracle = max(worst_oracle, float(np.max(_rel(direct, loops)[served], initial=0)))

        p = rng.uniform(0.005, 0.1, links.ul.n_users)
        direct = ul_rates(links.ul, p)
        g1, g2 = ul_g_terms(links.ul, p)
        ok = ~links.ul.orphan
        worst_ul = max(worst_ul, float(np.max(_rel(direct, g1 - g2)[ok], initial=0)))
        assert np.all(direct[~ok] == 0) and np.all((g1 - g2)[~ok] == 0)
    passed = max(worst_dl, worst_ul, worst_oracle, worst_orphan) <= 1e-9
    return passed, (f"max rel diff DL {worst_dl:.1e}, UL {worst_ul:.1e}, "
                    f"DL vs loop oracle {worst_oracle:.1e}, unserved DL {worst_orphan:.1e} "
                    f"(200 instances)")


# --------------------------------------------------------- 5: surrogates


def _fd_gradient(f, x, variables, rel=1e-6):
    out = np.zeros(len(variables))
    for i, idx in enumerate(variables):
        h = rel * x.flat[idx]
        up, down = x.copy(), x.copy()
        up.flat[idx] += h
        down.flat[idx] -= h
        out[i] = (f(up) - f(down)) / (2 * h)
    return out


@criterion(5)
def test_surrogate_properties():
    rng = np.random.default_rng(5)
    worst_gap = np.inf
    worst_touch = worst_grad = 0.0
    points = 0
    for _ in range(25):
        _, links = _random_instance(rng)
        dl, ul = links.dl, links.ul
        mask, w = dl.mask, dl.tx_weight
        served = mask.any(axis=1)
        K = dl.n_users
        anchor = random_feasible_dl(rng, mask, w, 0.2)
        p_anchor = rng.uniform(0.005, 0.1, K)
        for _ in range(20):
            eta = random_feasible_dl(rng, mask, w, 0.2)
            eta[rng.uniform(size=eta.shape) < 0.2] = 0.0  # boundary points too
            gap = (dl_rates(dl, eta) - dl_surrogate(dl, eta, anchor)) / BANDWIDTH
            p = rng.uniform(0.0, 0.1, K)
            gap_ul = (ul_rates(ul, p) - ul_surrogate(ul, p, p_anchor)) / BANDWIDTH
            worst_gap = min(worst_gap, float(gap.min()), float(gap_ul.min()))
            points += 2
        # tightness at the anchor
        worst_touch = max(worst_touch,
                          float(np.max(_rel(dl_surrogate(dl, anchor, anchor), dl_rates(dl, anchor))[served], initial=0)),
                          float(np.max(_rel(ul_surrogate(ul, p_anchor, p_anchor), ul_rates(ul, p_anchor))[~ul.orphan], initial=0)))
        # gradient match at the anchor
        variables = np.flatnonzero(mask)
        grad2 = ul_g_gradients(ul, p_anchor, own=False)
        for k in np.flatnonzero(served):
            analytic = dl_surrogate_gradient(dl, anchor, anchor, k).flat[variables]
            fd_rate = _fd_gradient(lambda e: dl_rates(dl, e)[k], anchor, variables)
            fd_sur = _fd_gradient(lambda e: dl_surrogate(dl, e, anchor, k), anchor, variables)
            scale = max(np.linalg.norm(fd_rate), 1e-300)
            worst_grad = max(worst_grad, np.linalg.norm(analytic - fd_rate) / scale,
                             np.linalg.norm(fd_sur - fd_rate) / scale)
        for k in np.flatnonzero(~ul.orphan):
            analytic = ul_g_gradients(ul, p_anchor, own=True)[k] - grad2[k]
            fd_rate = _fd_gradient(lambda e: ul_rates(ul, e)[k], p_anchor, range(K))
            worst_grad = max(worst_grad, np.linalg.norm(analytic - fd_rate) / np.linalg.norm(fd_rate))
    passed = worst_gap >= -1e-9 and worst_touch <= 1e-9 and worst_grad < 1e-4
    return passed, (f"min bound gap {worst_gap:.2e} bit/s/Hz at {points} points, anchor rel err "
                    f"{worst_touch:.1e}, gradient rel err {worst_grad:.1e}")


# -------------------------------------------------------- 6: monotonicity


def _served_objective(rates, kind, users):
    r = rates[users]
    if r.size == 0:
        return 0.0
    return float(r.sum() if kind == "sum" else r.min())


@criterion(6)
def test_monotone_traces_and_feasibility():
    rng = np.random.default_rng(6)
    worst_drop = 0.0
    worst_violation = 0.0
    worst_report = 0.0
    runs = 0
    for _ in range(50):
        K, M = int(rng.integers(2, 5)), int(rng.integers(2, 7))
        mode = str(rng.choice(["cf", "topn:1", "topn:2"]))
        _, links = instance(int(rng.integers(2**31)), n_users=K, n_aps=M, mode=mode,
                            csi=str(rng.choice(["estimated", "perfect"])))
        p_ap, p_ms = np.full(M, 0.2), np.full(K, 0.1)
        users_dl = np.flatnonzero(links.dl.mask.any(axis=1))
        users_ul = np.flatnonzero(~links.ul.orphan)
        for solver, kind, direction in ((slm_sum_rate_dl, "sum", "dl"), (slm_min_rate_dl, "min", "dl"),
                                        (slm_sum_rate_ul, "sum", "ul"), (slm_min_rate_ul, "min", "ul")):
            if direction == "dl":
                alloc, trace = solver(links.dl, links.association, p_ap)
                eta = alloc.dl
                load = (eta * links.dl.tx_weight).sum(axis=0)
                violation = max(float(np.max(load - p_ap)), float(-eta.min()),
                                float(np.abs(eta[~links.dl.mask]).max(initial=0)))
                final = _served_objective(dl_rates(links.dl, eta), kind, users_dl)
            else:
                alloc, trace = solver(links.ul, p_ms)
                eta = alloc.ul
                violation = max(float(np.max(eta - p_ms)), float(-eta.min()))
                final = _served_objective(ul_rates(links.ul, eta), kind, users_ul)
            t = np.asarray(trace.objective_per_iteration)
            rel_drop = np.max((t[:-1] - t[1:]) / np.maximum(np.abs(t[:-1]), 1e-300), initial=0.0)
            worst_drop = max(worst_drop, float(rel_drop))
            worst_violation = max(worst_violation, violation, 0.0)
            worst_report = max(worst_report, abs(final - t[-1]) / max(abs(final), 1e-300))
            runs += 1
    passed = worst_drop <= 1e-6 and worst_violation <= 1e-9 and worst_report <= 1e-9
    return passed, (f"max relative trace decrease {worst_drop:.1e}, max constraint violation "
                    f"{worst_violation:.1e} W, trace/allocation mismatch {worst_report:.1e} "
                    f"({runs} runs)")


# -------------------------------------------------------- 7: grid oracle


@criterion(7, limit_s=300)
def test_grid_oracle_equivalence():
    cases = []
    for seed in range(8):
        cases.append(("dl", instance(100 + seed, n_users=2, n_aps=2, mode="cf")[1]))
    for seed in range(4):
        cases.append(("dl", instance(200 + seed, n_users=3, n_aps=3, mode="topn:1")[1]))
    for K in (2, 3, 4):
        for seed in range(4):
            cases.append(("ul", instance(300 + 10 * K + seed, n_users=K, n_aps=4, mode="topn:2")[1]))
    multi, single = SolverConfig(n_starts=8), SolverConfig()
    worst = np.inf
    single_ok = total = 0
    for direction, links in cases:
        for kind in ("sum", "min"):
            if direction == "dl":
                p = np.full(links.dl.n_aps, 0.2)
                solver = slm_sum_rate_dl if kind == "sum" else slm_min_rate_dl
                oracle = grid_dl(links.dl, 0.2, kind)
                value = solver(links.dl, links.association, p, multi)[1].objective_per_iteration[-1]
                one = solver(links.dl, links.association, p, single)[1].objective_per_iteration[-1]
            else:
                p = np.full(links.ul.n_users, 0.1)
                solver = slm_sum_rate_ul if kind == "sum" else slm_min_rate_ul
                oracle = grid_ul(links.ul, 0.1, kind)
                value = solver(links.ul, p, multi)[1].objective_per_iteration[-1]
                one = solver(links.ul, p, single)[1].objective_per_iteration[-1]
            ratio = value / oracle if oracle > 0 else 1.0
            worst = min(worst, ratio)
            single_ok += (one >= 0.99 * oracle)
            total += 1
    passed = worst >= 0.99
    return passed, (f"worst SLM/grid ratio {worst:.4f} over {total} problems with 8 starts "
                    f"(single start within 1% on {single_ok}/{total})")


# ------------------------------------------------ 8: baseline dominance


@criterion(8)
def test_baseline_dominance():
    cfg = SimulationConfig({
        "geometry.n_aps": 20, "geometry.n_users": 4, "geometry.n_ap_antennas": 4,
        "geometry.n_ms_antennas": 2, "geometry.multiplexing_order": 2, "training.tau_p": 8,
        "association.mode": "topn:2", "run.n_drops": 50, "run.csi": ["estimated"],
    })
    report = run_campaign(cfg, workers=1)
    shares = {}
    for direction in ("dl", "ul"):
        uni = report.rates("uniform", "estimated", direction)
        sr = report.rates("srmax", "estimated", direction)
        mr = report.rates("mrmax", "estimated", direction)
        shares[f"{direction} sum"] = float(np.mean(sr.sum(axis=1) >= uni.sum(axis=1)))
        shares[f"{direction} min"] = float(np.mean(mr.min(axis=1) >= uni.min(axis=1)))
    n_ok = len(report.successful)
    passed = n_ok == 50 and min(shares.values()) >= 0.95
    detail = ", ".join(f"{k} {v:.0%}" for k, v in shares.items())
    return passed, f"drops where SLM >= uniform: {detail} ({n_ok} drops)"


# ------------------------------------------------------- 9: UC vs CF


@criterion(9, limit_s=600)
def test_user_centric_beats_cell_free_uplink():
    base = {"geometry.n_aps": 20, "geometry.n_users": 5, "training.tau_p": 8, "run.n_drops": 50,
            "run.strategies": ["uniform"], "run.csi": ["estimated"], "run.directions": ["ul"]}
    uc = run_campaign(SimulationConfig({**base, "association.mode": "topn:2"}), workers=1)
    cf = run_campaign(SimulationConfig({**base, "association.mode": "cf"}), workers=1)
    med_uc = float(np.median(uc.cdf_samples("uniform", "estimated", "ul")))
    med_cf = float(np.median(cf.cdf_samples("uniform", "estimated", "ul")))
    identical = all(
        run_drop(SimulationConfig({**base, "association.mode": "cf", "run.directions": ["dl", "ul"]}), d).rows
        == run_drop(SimulationConfig({**base, "association.mode": "topn:5", "run.directions": ["dl", "ul"]}), d).rows
        for d in range(50))
    n = len(uc.successful)
    passed = med_uc > med_cf and identical and n >= 50 and len(cf.successful) >= 50
    return passed, (f"median UL user rate UC {med_uc / 1e6:.2f} vs CF {med_cf / 1e6:.2f} Mbit/s "
                    f"over {n} drops; CF == TopN(K) bit-exact on every drop: {identical}")


# ------------------------------------------- 10: estimated vs perfect CSI


@criterion(10)
def test_estimation_penalty():
    cfg = SimulationConfig({"geometry.n_aps": 20, "geometry.n_users": 5, "training.tau_p": 8,
                            "association.mode": "topn:2", "run.n_drops": 50})
    assert cfg["training.tau_p"] < cfg["geometry.n_users"] * cfg["geometry.n_ms_antennas"]
    report = run_campaign(cfg, workers=1)
    parts, passed = [], len(report.successful) == 50
    for strategy in ("uniform", "srmax", "mrmax"):
        for direction in ("dl", "ul"):
            est = report.rates(strategy, "estimated", direction).mean()
            perf = report.rates(strategy, "perfect", direction).mean()
            passed = passed and est < perf
            parts.append(f"{strategy}/{direction} {est / perf:.2f}")
    return passed, "mean rate estimated/perfect: " + ", ".join(parts)


# ------------------------------------------------------ 11: determinism


@criterion(11)
def test_end_to_end_determinism(tmp_path, capsys):
    config = tmp_path / "c.toml"
    config.write_text("[geometry]\nn_aps = 8\nn_users = 3\n[training]\ntau_p = 4\n"
                      '[association]\nmode = "topn:2"\n')
    codes = []
    for workers in (1, 2):
        codes.append(cli_main(["--config", str(config), "--drops", "4", "--seed", "9",
                               "--workers", str(workers), "--out", str(tmp_path / f"w{workers}")]))
    capsys.readouterr()
    a = (tmp_path / "w1" / "rates.csv").read_bytes()
    b = (tmp_path / "w2" / "rates.csv").read_bytes()
    passed = codes == [0, 0] and a == b
    return passed, f"rates.csv byte-identical for 1 vs 2 workers: {a == b} ({len(a)} bytes)"
