"""Acceptance criteria, one test per criterion.

Each test records a ``CRITERION k PASS|FAIL`` line; the lines are printed in
the pytest terminal summary (see ``conftest.py``) and when this file is run
as a script. Criterion 7 reads the stored desk-scale study in
``results/desk_study`` unless ``GPAFT_FULL_STUDY=1`` asks for a fresh run.
"""

import json
import math
import os
import time
from fractions import Fraction
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from conftest import design, random_completed, random_params, random_stack

import gpaft
from gpaft.cli import main as cli_main
from gpaft.kernels import KernelStack, assemble_covariance, normalized_rbf, pathway_stack
from gpaft.metrics import brier, censoring_km, integrated_brier, uno_c_index
from gpaft.mstep import ModelParams, maximize, mc_objective, single_kernel_maximize, variance_score
from gpaft.predict import predict_log_time
from gpaft.simulate import SimConfig, gompertz_times, replication_rng, simulate_dataset
from gpaft.tmvn import TruncatedMvnSpec, gibbs_sample, mcse_spectral

ROOT = Path(__file__).resolve().parents[1]
TOY = Path(gpaft.__file__).parent / "toy"
LINES = []


def report(k, ok, detail):
    line = f"CRITERION {k:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    LINES.append(line)
    print(line)
    return ok


# 1 -------------------------------------------------------------------------
def test_c1_mm_monotonicity():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, total_iters = 0.0, 0
    for k in range(100):
        n = int(rng.integers(5, 51))
        M = (1, 2, 4)[k % 3]
        s_r = (1, 10)[(k // 3) % 2]
        stack, _ = random_stack(rng, n, M, p=3)
        Z = design(rng, n, q=1)
        c = random_completed(rng, n, s_r, float(rng.uniform(0.1, 0.6)))
        state = maximize(random_params(rng, 2, M), stack, Z, c)
        tr = np.array(state.trace)
        worst = min(worst, float(np.min(np.diff(tr) / abs(tr[0]), initial=0.0)))
        total_iters += state.inner_iters
    elapsed = time.perf_counter() - start
    ok = worst >= -1e-10 and elapsed < 120
    assert report(1, ok, f"100 instances, {total_iters} inner iterations, worst relative "
                         f"step {worst:.2e} (bound -1e-10), {elapsed:.1f} s (bound 120 s)")


# 2 -------------------------------------------------------------------------
def test_c2_fast_path_equivalence():
    rng = np.random.default_rng(202)
    worst_ll, worst_ratio, boundary = 0.0, 0.0, 0
    for _ in range(25):
        n = int(rng.integers(10, 41))
        stack, _ = random_stack(rng, n, 1)
        Z = design(rng, n)
        # completions drawn from the model itself, so that the optimum is
        # interior and the variance ratio is identified
        c = random_completed(rng, n, int(rng.integers(1, 20)))
        L = np.linalg.cholesky(1.5 * stack[0].values + 0.5 * np.eye(n))
        T = Z @ [5.0, 0.3, -0.2] + (L @ rng.standard_normal((n, c.size))).T
        c = type(c)(T[0, c.partition.observed_idx], c.partition,
                    T[:, c.partition.censored_idx])
        init = ModelParams(np.zeros(3), [float(rng.uniform(0.2, 2))], float(rng.uniform(0.2, 1)))
        fast = single_kernel_maximize(init, stack[0], Z, c, tol=1e-14, max_inner=5000)
        # the MM default tolerance stops early on flat ridges; run both to
        # numerical convergence so that the optimizers, not their stopping
        # rules, are compared
        slow = maximize(init, stack, Z, c, tol=1e-14, max_inner=50_000)
        worst_ll = max(worst_ll, abs(fast.loglik - slow.loglik))
        rf = fast.params.sigma2[0] / fast.params.noise2
        rs = slow.params.sigma2[0] / slow.params.noise2
        if rf == 0.0:
            # optimum on the boundary: the fast path lands on 0 exactly while
            # the multiplicative MM update only approaches it, so a relative
            # gap is undefined; require MM to be within 1e-8 of 0 instead
            boundary += 1
            gap = 0.0 if rs < 1e-8 else math.inf
        else:
            gap = abs(rf - rs) / rf
        worst_ratio = max(worst_ratio, gap)
    ok = worst_ll <= 1e-6 and worst_ratio <= 1e-3
    assert report(2, ok, f"25 instances ({boundary} with boundary optimum), max |dloglik| "
                         f"{worst_ll:.2e} (bound 1e-6), max relative variance-ratio gap "
                         f"{worst_ratio:.2e} (bound 1e-3)")


# 3 -------------------------------------------------------------------------
def _rejection_oracle(mean, cov, lower, n, rng):
    kept = []
    while sum(len(k) for k in kept) < n:
        z = rng.multivariate_normal(mean, cov, size=n)
        kept.append(z[np.all(z >= lower, axis=1)])
    return np.vstack(kept)[:n]


def test_c3_sampler():
    rng = np.random.default_rng(303)
    violations = 0
    # (a) half-normal
    spec = TruncatedMvnSpec([0.0], [[1.0]], [0.0], [np.inf])
    g = gibbs_sample(spec, 100_000, thin=10, burnin=100, rng=rng)
    violations += int(np.sum(g.draws < 0))
    err_a = abs(g.draws.mean() - math.sqrt(2 / math.pi))
    # (b) correlated 2-D on the positive quadrant
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    spec = TruncatedMvnSpec([0.0, 0.0], cov, [0.0, 0.0], [np.inf, np.inf])
    g2 = gibbs_sample(spec, 100_000, thin=10, burnin=100, rng=rng)
    violations += int(np.sum(g2.draws < 0))
    oracle = _rejection_oracle(np.zeros(2), cov, np.zeros(2), 1_000_000, rng)
    z = []
    for j in range(2):
        se = math.hypot(mcse_spectral(g2.draws[:, j]), oracle[:, j].std() / 1000.0)
        z.append(abs(g2.draws[:, j].mean() - oracle[:, j].mean()) / se)
    # (c) random boxes, all bound types
    for _ in range(200):
        d = int(rng.integers(1, 7))
        A = rng.standard_normal((d, d))
        C = A @ A.T + 0.05 * np.eye(d)
        lo = rng.normal(0, 3, d)
        kind = rng.integers(0, 3, d)
        lower = np.where(kind == 2, -np.inf, lo)
        upper = np.where(kind == 0, np.inf, lo + rng.exponential(1.0, d) + 1e-9)
        s = TruncatedMvnSpec(rng.normal(0, 4, d), C, lower, upper)
        dr = gibbs_sample(s, 300, thin=2, burnin=5, rng=rng).draws
        violations += int(np.sum((dr < lower) | (dr > upper)))
    ok = err_a <= 0.01 and max(z) <= 3 and violations == 0
    assert report(3, ok, f"(a) |mean - sqrt(2/pi)| = {err_a:.4f} (bound 0.01); (b) mean gaps "
                         f"{z[0]:.2f}, {z[1]:.2f} MCSE (bound 3); (c) {violations} bound "
                         "violations")


# 4 -------------------------------------------------------------------------
def _exact_km(times, ind, t):
    s = Fraction(1)
    for u in sorted({x for x, d in zip(times, ind) if d}):
        if u > t:
            break
        s *= 1 - Fraction(sum(1 for x, d in zip(times, ind) if x == u and d),
                          sum(1 for x in times if x >= u))
    return s


def _exact_c(risk, times, events, tau):
    cens = [1 - e for e in events]
    num = den = Fraction(0)
    for i in range(len(times)):
        if not events[i] or times[i] >= tau:
            continue
        H = _exact_km(times, cens, times[i])
        if H == 0:
            continue
        for j in range(len(times)):
            if times[i] < times[j]:
                den += 1 / H**2
                num += (1 if risk[i] > risk[j] else Fraction(1, 2) if risk[i] == risk[j]
                        else 0) / H**2
    return num / den


def test_c4_metric_oracles():
    import warnings
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(3, 31))
        t = rng.integers(1, 25, n).astype(float)
        e = rng.integers(0, 2, n)
        e[np.argmin(t)] = 1
        r = np.round(rng.standard_normal(n), 1)
        tau = float(t.max()) + 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = uno_c_index(r, t, e, tau, censoring_km(t, e))
        want = _exact_c(list(r), list(t), list(e), tau)
        worst = max(worst, float(abs(Fraction(got) - want)))
    t = np.array([1.0, 2.0, 3.0, 4.0])
    e = np.array([1, 0, 1, 1])
    b = brier(2.5, np.array([0.2, 0.5, 0.6, 0.9]), t, e, censoring_km(t, e))
    b_hand = (0.2**2 + 0.4**2 * 1.5 + 0.1**2 * 1.5) / 4
    tau = 5.0
    grid = np.linspace(tau / 1000, tau, 1000)
    ibs = integrated_brier(lambda s: np.full(4, 1 - math.sqrt(s / tau)), np.full(4, 99.0),
                           np.ones(4, int), tau, grid)
    ok = worst <= 1e-12 and b == b_hand and abs(ibs - 0.5) <= 1e-3
    assert report(4, ok, f"C-index vs exact rational enumeration, max gap {worst:.1e} "
                         f"over 50 instances (float round-off); Brier {b:.6f} vs hand "
                         f"{b_hand:.6f}; IBS on B(t)=t/tau {ibs:.5f}")


# 5 -------------------------------------------------------------------------
def test_c5_kriging():
    rng = np.random.default_rng(505)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(5, 21))
        X = rng.standard_normal((n, 6))
        stack = pathway_stack(X, [[0, 1, 2], [3, 4, 5]], include_complement=False)
        Z = np.column_stack([np.ones(n), rng.standard_normal(n)])
        p = ModelParams(rng.normal(size=2), rng.uniform(0.2, 2, 2), float(rng.uniform(0.05, 1)))
        fit = SimpleNamespace(params=p, T_bar=rng.normal(4, 1, n))
        xs, zs = rng.standard_normal((3, 6)), np.column_stack([np.ones(3), rng.normal(size=3)])
        pred = predict_log_time(fit, stack, Z, zs, xs, X)
        A = np.vstack([X, xs])
        K = p.noise2 * np.eye(n + 3)
        for s2, g in zip(p.sigma2, stack):
            d2 = ((A[:, None, g.mask] - A[None, :, g.mask]) ** 2).sum(-1)
            K += s2 * np.exp(-d2 / g.norm_denominator)
        mu = np.concatenate([Z @ p.beta, zs @ p.beta])
        Kinv = np.linalg.inv(K[:n, :n])
        m = mu[n:] + K[n:, :n] @ Kinv @ (fit.T_bar - mu[:n])
        v = np.diag(K[n:, n:] - K[n:, :n] @ Kinv @ K[:n, n:])
        worst = max(worst, np.max(np.abs(pred.mean_log_time - m)),
                    np.max(np.abs(pred.var_log_time - v)))
    # prior reversion and noiseless interpolation
    X = rng.standard_normal((8, 4))
    st = KernelStack((normalized_rbf(X),))
    fit0 = SimpleNamespace(params=ModelParams([1.5], [0.0], 0.7), T_bar=rng.normal(3, 1, 8))
    p0 = predict_log_time(fit0, st, np.ones((8, 1)), [1.0], rng.standard_normal(4), X)
    prior_ok = p0.mean_log_time == 1.5 and abs(p0.var_log_time - 0.7) < 1e-14
    fit1 = SimpleNamespace(params=ModelParams([0.0], [1.0], 1e-8), T_bar=fit0.T_bar)
    gap = max(abs(predict_log_time(fit1, st, np.ones((8, 1)), [1.0], X[i], X).mean_log_time
                  - fit1.T_bar[i]) for i in range(8))
    ok = worst <= 1e-8 and prior_ok and gap <= 1e-3
    assert report(5, ok, f"30 instances vs dense conditioning, max gap {worst:.1e} (bound "
                         f"1e-8); prior reversion {'holds' if prior_ok else 'fails'}; "
                         f"noiseless interpolation gap {gap:.1e} (bound 1e-3)")


# 6 -------------------------------------------------------------------------
def test_c6_score_check():
    rng = np.random.default_rng(606)
    worst, checked = 0.0, 0
    for _ in range(20):
        n = int(rng.integers(15, 36))
        M = int(rng.integers(1, 4))
        stack, _ = random_stack(rng, n, M)
        Z = design(rng, n)
        c = random_completed(rng, n, int(rng.integers(5, 30)))
        opt = maximize(random_params(rng, 3, M), stack, Z, c, tol=1e-14, max_inner=20_000).params
        score = variance_score(opt, stack, Z, c)
        comps = list(opt.sigma2) + [opt.noise2]
        Omega = assemble_covariance(stack, opt.sigma2, opt.noise2).inverse()
        grams = [g.values for g in stack] + [np.eye(n)]
        for i, v in enumerate(comps):
            if v < 1e-3:
                continue  # boundary component: the score need not vanish
            h = 1e-4 * v
            up, dn = list(comps), list(comps)
            up[i] += h
            dn[i] -= h
            fd = (mc_objective(ModelParams(opt.beta, up[:-1], up[-1]), stack, Z, c)
                  - mc_objective(ModelParams(opt.beta, dn[:-1], dn[-1]), stack, Z, c)) / (2 * h)
            # at an interior optimum the score is a difference of two terms of
            # size tr(W k)/2; measure the error against that scale
            scale = max(abs(fd), 0.5 * float(np.sum(Omega * grams[i])))
            worst = max(worst, abs(score[i] - fd) / scale)
            checked += 1
    ok = worst <= 1e-4 and checked > 0
    assert report(6, ok, f"{checked} interior components on 20 fitted instances, max relative "
                         f"gap {worst:.1e} (bound 1e-4)")


# 7 -------------------------------------------------------------------------
def test_c7_simulation_recovery(tmp_path):
    study = ROOT / "results" / "desk_study" / "study.json"
    if os.environ.get("GPAFT_FULL_STUDY") == "1":
        import subprocess
        import sys
        subprocess.run([sys.executable, str(ROOT / "scripts" / "run_simulation.py"),
                        "--out", str(tmp_path)], check=True)
        study = tmp_path / "study.json"
    if not study.exists():
        report(7, False, "no study results; run scripts/run_simulation.py "
                         "--out results/desk_study")
        pytest.fail("desk study results missing")
    doc = json.loads(study.read_text())
    chk = doc["checks"]
    c = chk["mean_c_index"]
    hours = doc["wall_seconds"] / 3600
    jobs, cpus = doc["jobs"], doc.get("cpus", "?")
    ok_a = chk["c_index_ordering"]
    ok_b = chk["imputation_ordering"]
    ok_t = hours < 2
    detail = (f"(a) mean C-index GPR:K {c['GPR:K']:.4f}, LMM:K {c['LMM:K']:.4f}, GPR:I "
              f"{c['GPR:I']:.4f} -> {'ordered' if ok_a else 'NOT ordered'}; (b) GPR:K "
              f"imputation beats IPW in {chk['frac_reps_gprk_corr_above_ipw']:.0%} of reps "
              f"(bound 80%); runtime {hours:.2f} h with --jobs {jobs} on {cpus} CPU(s) "
              f"(bound 2 h); censoring {doc.get('censoring_frac', float('nan')):.2f}")
    assert report(7, ok_a and ok_b and ok_t, detail)


# 8 -------------------------------------------------------------------------
def test_c8_censoring_rate():
    cfg = SimConfig(n=513, p=20483, train_size=413, test_size=100, seed=808)
    fr = [1 - simulate_dataset(cfg, replication_rng(cfg.seed, r)).delta.mean()
          for r in range(100)]
    m = float(np.mean(fr))
    assert report(8, 0.55 <= m <= 0.70, f"mean censored fraction {m:.4f} over 100 full-scale "
                                         "replications (bound [0.55, 0.70])")


# 9 -------------------------------------------------------------------------
def test_c9_gompertz_baseline():
    s = gompertz_times(np.zeros(100_000), np.random.default_rng(909))
    m, sd = float(s.mean()), float(s.std())
    ok = abs(m - 1400) <= 30 and abs(sd - 1200) <= 50
    assert report(9, ok, f"W=0 times: mean {m:.1f} (target 1400 +/- 30), sd {sd:.1f} (target "
                         "1200 +/- 50); the stated alpha and lambda imply mean ~1716, sd ~814")


# 10 ------------------------------------------------------------------------
def test_c10_determinism(tmp_path):
    toy = [str(TOY / f) for f in ("survival.csv", "covariates.csv", "expression.csv")]
    runs = {
        "fit": ["fit", "--survival", toy[0], "--covariates", toy[1], "--expression", toy[2],
                "--seed", "5"],
        "simulate": ["simulate", "--model", "1", "--reps", "2", "--seed", "5", "--n", "40",
                     "--p", "60", "--train-size", "30", "--test-size", "10", "--s1", "20",
                     "--s-max", "80", "--methods", "GPR:K", "LMM:K", "GPR:I"],
    }
    same = {}
    for name, args in runs.items():
        outs = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            assert cli_main(args + ["--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        same[name] = outs[0] == outs[1]
    model = str(tmp_path / "fit0")
    pred_args = ["predict", "--model", model, "--covariates", toy[1], "--expression", toy[2],
                 "--times", "100", "1000"]
    outs = []
    for k in range(2):
        out = tmp_path / f"pred{k}"
        assert cli_main(pred_args + ["--out", str(out)]) == 0
        ev = tmp_path / f"eval{k}"
        assert cli_main(["evaluate", "--predictions", str(out / "predictions.csv"),
                         "--survival", toy[0], "--out", str(ev)]) == 0
        outs.append({p.name: p.read_bytes() for d in (out, ev) for p in sorted(d.iterdir())})
    same["predict+evaluate"] = outs[0] == outs[1]
    ok = all(same.values())
    assert report(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                    for k, v in same.items()))


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
