"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (shown in the terminal summary) before asserting.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, CONFIGS
from restraj import gp as gpmod
from restraj import nn as nnmod
from restraj import planner
from restraj.cli import default_nn_config
from restraj.dataset import (
    GridConfig,
    build_dataset,
    enumerate_specs,
    load_dataset,
    load_grid,
    save_dataset,
)
from restraj.dynamics import double_integrator, pendulum, two_link
from restraj.ocp import TranscriptionConfig, gradient_check, solve_ocp, transcribe
from restraj.planner import PlanRequest, plan
from restraj.prior import ProblemSpec, cubic_prior, scaling

pytestmark = pytest.mark.slow


def verdict(number: int, ok: bool, detail: str, elapsed: float, budget: float):
    ok = ok and elapsed < budget
    line = (f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail} "
            f"[{elapsed:.1f} s, budget {budget:.0f} s]")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_pendulum_specs(rng, count):
    return [ProblemSpec(rng.uniform(1.0, 1.5), [rng.uniform(-np.pi / 4, np.pi / 4)],
                        [rng.uniform(-np.pi / 4, np.pi / 4)]) for _ in range(count)]


@pytest.fixture(scope="module")
def trained(pendulum_dataset):
    """Default-configured regressors on the training split, with their fit time."""
    t0 = time.perf_counter()
    nn = nnmod.train_dataset(pendulum_dataset, default_nn_config(1))
    gp = gpmod.fit_dataset(pendulum_dataset, gpmod.GpConfig())
    return nn, gp, time.perf_counter() - t0


def test_criterion_1_hard_boundaries(trained):
    nn, gp, _ = trained
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    specs = random_pendulum_specs(rng, 200)
    m = pendulum()
    h = 1e-6
    worst_q = worst_v = worst_fd = 0.0
    for reg in (nn, gp):
        for resolution in (10, 100, 500):
            for i, spec in enumerate(specs):
                res = plan(PlanRequest(spec, resolution, seed=i), m, reg)
                q = np.stack([t.q for t in res.samples + [res.best]])
                v = np.stack([t.v for t in res.samples + [res.best]])
                worst_q = max(worst_q, np.abs(q[:, 0] - spec.q0).max(), np.abs(q[:, -1] - spec.qf).max())
                worst_v = max(worst_v, np.abs(v[:, [0, -1]]).max())
        # small-step differences of the composed position function itself
        ends = np.array([0.0, h, 1.0 - h, 1.0])
        for i, spec in enumerate(specs):
            latents = planner.as_regressor(reg).sample_latent(ends, spec, 10, seed=i)
            q = cubic_prior(spec, ends)[None] + scaling(ends)[None, :, None] * latents
            fd = np.maximum(np.abs(q[:, 1] - q[:, 0]), np.abs(q[:, -1] - q[:, -2])) / (h * spec.tf)
            worst_fd = max(worst_fd, fd.max())
    ok = worst_q <= 1e-6 and worst_v <= 1e-3 and worst_fd <= 1e-3
    verdict(1, ok, f"max |q-q_bc| {worst_q:.1e} rad, max boundary |v| {worst_v:.1e} rad/s, "
            f"max finite-difference |v| {worst_fd:.1e} rad/s over 200 specs x 2 x 3",
            time.perf_counter() - t0, 60)


def test_criterion_2_naive_regressors_violate_boundaries(pendulum_dataset, trained):
    nn, gp, _ = trained
    t0 = time.perf_counter()
    outside = enumerate_specs(load_grid(CONFIGS / "outside_pendulum.json"))
    res = planner.ablate_naive(pendulum_dataset, default_nn_config(1), gpmod.GpConfig(),
                               outside=outside, residual_nn=nn, residual_gp=gp)
    n_in, g_in = res.naive_nn_inside.mean_position, res.naive_gp_inside.mean_position
    r_nn, r_gp = res.residual_nn_inside.mean_position, res.residual_gp_inside.mean_position
    ok = n_in > 0.01 and g_in > 0.01 and r_nn <= 1e-6 and r_gp <= 1e-6
    verdict(2, ok, f"naive NN {n_in:.3f} rad, naive GP {g_in:.3f} rad inside "
            f"(outside {res.naive_nn_outside.mean_position:.3f} / "
            f"{res.naive_gp_outside.mean_position:.3f}); residual {max(r_nn, r_gp):.1e} rad",
            time.perf_counter() - t0, 600)


def test_criterion_3_kernel_and_posterior_boundaries():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_k = worst_d = worst_fd = worst_post = 0.0
    h = 1e-6
    for trial in range(50):
        ls = rng.uniform(0.2, 3.0, 4)
        sf2 = rng.uniform(0.1, 5.0)
        x = np.column_stack([rng.random(6), rng.normal(size=(6, 3))])
        for b in (0.0, 1.0):
            xb = x.copy()
            xb[:, 0] = b
            worst_k = max(worst_k, np.abs(gpmod.kernel(xb, x, ls, sf2)).max())
            worst_d = max(worst_d, np.abs(gpmod.kernel_d10(xb, x, ls, sf2)).max(),
                          np.abs(gpmod.kernel_d11(xb, x, ls, sf2)).max())
        a, c = x[0], x[1]
        e = np.zeros(4)
        e[0] = h
        fd10 = (gpmod.kernel(a + e, c, ls, sf2) - gpmod.kernel(a - e, c, ls, sf2)) / (2 * h)
        fd11 = (gpmod.kernel_d10(a, c + e, ls, sf2) - gpmod.kernel_d10(a, c - e, ls, sf2)) / (2 * h)
        worst_fd = max(worst_fd, abs(fd10 - gpmod.kernel_d10(a, c, ls, sf2)),
                       abs(fd11 - gpmod.kernel_d11(a, c, ls, sf2)))

        X = np.column_stack([rng.random(25), rng.normal(size=(25, 3))])
        Y = rng.normal(size=(25, 1))
        m = gpmod.fit(X, Y, gpmod.GpConfig(epochs=0))
        g = m.joints[0]
        g.log_ls, g.log_sf2, g.log_sn2 = np.log(ls), np.log(sf2), np.log(rng.uniform(1e-6, 1e-1))
        m.refactor()
        spec = ProblemSpec(rng.uniform(0.5, 2.0), [rng.normal()], [rng.normal()])
        xi = np.array([0.0, 0.3, 0.7, 1.0])
        mean, std = m.predict(xi, spec)
        draws = m.sample(xi, spec, 20, seed=trial)
        worst_post = max(worst_post, np.abs(mean[[0, -1]]).max(), np.abs(std[[0, -1]]).max(),
                         np.abs(draws[:, [0, -1]]).max())
    ok = worst_k == 0.0 and worst_d <= 1e-12 and worst_fd <= 1e-5 and worst_post <= 1e-5
    verdict(3, ok, f"|k| {worst_k:.1e}, |dk| {worst_d:.1e} at boundaries, derivative-kernel "
            f"FD error {worst_fd:.1e}, posterior mean/std/samples {worst_post:.1e}",
            time.perf_counter() - t0, 60)


def test_criterion_4_free_model_matches_cubic():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = worst_ratio = 0.0
    converged = True
    # trapezoidal transcription error is O(h^2); 200 nodes/s keeps fast, large moves in tolerance
    for _ in range(20):
        spec = ProblemSpec(rng.uniform(0.5, 2.0), [rng.uniform(-2, 2)], [rng.uniform(-2, 2)])
        errs = []
        for rate in (100.0, 200.0):
            sol = solve_ocp(double_integrator(), spec, TranscriptionConfig(rate=rate))
            converged &= sol.converged
            xi = sol.trajectory.t / spec.tf
            xi[-1] = 1.0
            errs.append(np.abs(sol.trajectory.q - cubic_prior(spec, xi)).max())
        worst = max(worst, errs[1])
        worst_ratio = max(worst_ratio, errs[1] / max(errs[0], 1e-15))
    ok = converged and worst <= 1e-4 and worst_ratio <= 0.3
    verdict(4, ok, f"max deviation from the cubic {worst:.1e} rad over 20 specs at 200 nodes/s "
            f"(error ratio vs 100 nodes/s <= {worst_ratio:.2f}, second order)",
            time.perf_counter() - t0, 120)


def test_criterion_5_pendulum_ocp_quality(pendulum_dataset):
    t0 = time.perf_counter()
    cfg = TranscriptionConfig()
    lines, ok = [], True
    worst_change = worst_defect = 0.0
    for spec in pendulum_dataset.specs:
        K = cfg.intervals(spec.tf)
        coarse = solve_ocp(pendulum(), spec, TranscriptionConfig(K=K))
        fine = solve_ocp(pendulum(), spec, TranscriptionConfig(K=2 * K))
        if not coarse.converged:
            continue
        change = abs(coarse.objective - fine.objective) / fine.objective
        worst_change = max(worst_change, change)
        worst_defect = max(worst_defect, coarse.defect_norm)
        ok &= (coarse.objective <= coarse.prior_energy + 1e-6 and coarse.defect_norm <= cfg.defect_tol
               and fine.converged and change <= 0.01)
        lines.append(coarse.savings)
    ok &= len(lines) == len(pendulum_dataset.specs)
    verdict(5, ok, f"{len(lines)}/8 converged, savings {min(lines):.1f}-{max(lines):.1f}%, "
            f"max defect {worst_defect:.1e}, max K->2K energy change {100 * worst_change:.2f}%",
            time.perf_counter() - t0, 600)


def test_criterion_6_learning_quality(pendulum_dataset, trained):
    nn, gp, fit_time = trained
    t0 = time.perf_counter()
    m = pendulum()
    test = pendulum_dataset.trajectories("test")
    ocp = np.array([pendulum_dataset.meta["trajectories"][i]["savings"] for i in test])
    parts, ok = [], True
    for name, reg in (("NN", nn), ("GP", gp)):
        res = [plan(PlanRequest(pendulum_dataset.specs[i], 100, seed=0), m, reg) for i in test]
        best = np.array([r.sample_best_savings for r in res])
        mean = np.array([r.mean_savings for r in res])
        ratio = best.mean() / ocp.mean()
        ok &= ratio >= 0.7 and best.mean() >= mean.mean()
        parts.append(f"{name} best {best.mean():.1f}% (per traj {np.round(best, 1).tolist()}) "
                     f"mean {mean.mean():.1f}% = {100 * ratio:.0f}% of OCP")
    verdict(6, ok, f"OCP {ocp.mean():.1f}% on {len(test)} test trajectories; " + "; ".join(parts),
            time.perf_counter() - t0 + fit_time, 900)


def test_criterion_7_active_learning(pendulum_dataset):
    t0 = time.perf_counter()
    ds = pendulum_dataset
    X, y = ds.inputs(), ds.r
    nn = nnmod.train(X, y, default_nn_config(1))
    gp = gpmod.fit(X, y, gpmod.GpConfig())
    candidates = enumerate_specs(load_grid(CONFIGS / "outside_pendulum.json"))
    parts, ok = [], True
    for name, reg in (("NN", nn), ("GP", gp)):
        _, rep = planner.active_learn(reg, pendulum(), candidates, 4, train_X=X, train_y=y)
        pre, post, ocp = (float(np.mean(v)) for v in (rep.pre_savings, rep.post_savings,
                                                      rep.ocp_savings))
        ok &= len(rep.selected) == 4 and post > pre and post >= 0.8 * ocp
        parts.append(f"{name} {pre:.1f}% -> {post:.1f}% vs OCP {ocp:.1f}%")
    verdict(7, ok, f"{len(candidates)} candidates, k=4: " + "; ".join(parts),
            time.perf_counter() - t0, 900)


def small_two_link_dataset():
    grid = GridConfig.from_dict({
        "name": "two_link_small", "rate": 100, "tf": {"range": [2.5, 2.5], "count": 1},
        "q0": [{"range": [0, 0], "count": 1}, {"range": [0, 0.8], "count": 2}],
        "qf": [{"range": [1.5, 3.0], "count": 2}, {"range": [0.8, 0.8], "count": 1}],
        "filters": []})
    return build_dataset(two_link(), grid)


def test_criterion_8_latency(trained):
    nn, gp, _ = trained
    t0 = time.perf_counter()
    ds2 = small_two_link_dataset()
    cfg2 = nnmod.MlpConfig(**{**default_nn_config(2).__dict__, "epochs": 20})
    nn2 = nnmod.train(ds2.inputs(), ds2.r, cfg2)
    gp2 = gpmod.fit(ds2.inputs(), ds2.r, gpmod.GpConfig(epochs=5, max_rows=1000))
    cases = [("pendulum", pendulum(), ProblemSpec(1.0, [0.2], [-0.6]), nn, gp),
             ("2-link", two_link(), ProblemSpec(2.5, [0.0, 0.4], [2.0, 0.8]), nn2, gp2)]
    parts, ok = [], True
    for name, m, spec, rn, rg in cases:
        sn = planner.bench_latency(PlanRequest(spec, 100), m, rn, repetitions=100)
        sg = planner.bench_latency(PlanRequest(spec, 100), m, rg, repetitions=30)
        ok &= sn.passed
        parts.append(f"{name} NN p99 {1e3 * sn.p99:.1f} ms, GP p99 {1e3 * sg.p99:.1f} ms "
                     f"({'within' if sg.passed else 'over'} bound) vs {1e3 * sn.limit:.0f} ms")
    verdict(8, ok, "; ".join(parts), time.perf_counter() - t0, 120)


def test_criterion_9_numerical_hygiene(tmp_path, pendulum_dataset, trained):
    nn, gp, _ = trained
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    small = nnmod.train(pendulum_dataset.inputs()[:40], pendulum_dataset.r[:40],
                        nnmod.MlpConfig(hidden=8, members=3, epochs=2))
    X = np.column_stack([rng.random(12), rng.normal(size=(12, 3))])
    nn_err = nnmod.gradient_check(small, X, rng.normal(size=(12, 1)) * 0.1)
    nlp_err = max(gradient_check(transcribe(pendulum(), ProblemSpec(1.0, [0.1], [0.8]),
                                            TranscriptionConfig(K=10)), rng=1),
                  gradient_check(transcribe(two_link(gravity=9.81),
                                            ProblemSpec(1.0, [0.1, -0.2], [0.8, 0.5]),
                                            TranscriptionConfig(K=10)), rng=2))
    save_dataset(pendulum_dataset, tmp_path / "ds")
    ds_rt = load_dataset(tmp_path / "ds") == pendulum_dataset
    nnmod.save_ensemble(nn, tmp_path / "nn.bin")
    gpmod.save_gp(gp, tmp_path / "gp.bin")
    nn_back, gp_back = nnmod.load_ensemble(tmp_path / "nn.bin"), gpmod.load_gp(tmp_path / "gp.bin")
    xi = np.linspace(0, 1, 50)
    spec = pendulum_dataset.specs[0]
    model_rt = (all(np.array_equal(a, b) for a, b in zip(nn.params, nn_back.params))
                and np.array_equal(nn.predict(xi, spec)[0], nn_back.predict(xi, spec)[0])
                and np.array_equal(gp.predict(xi, spec)[0], gp_back.predict(xi, spec)[0]))
    rebuilt = build_dataset(pendulum(), load_grid(CONFIGS / "grid_pendulum.json"))
    cfg = nnmod.MlpConfig(hidden=8, members=3, epochs=5)
    again = [nnmod.train(pendulum_dataset.inputs(), pendulum_dataset.r, cfg) for _ in range(2)]
    plans = [plan(PlanRequest(spec, 100, seed=7), pendulum(), gp) for _ in range(2)]
    repro = (rebuilt == pendulum_dataset
             and all(np.array_equal(a, b) for a, b in zip(again[0].params, again[1].params))
             and np.array_equal(plans[0].best.q, plans[1].best.q)
             and np.array_equal(plans[0].energies, plans[1].energies))
    ok = nn_err <= 1e-5 and nlp_err <= 1e-5 and ds_rt and model_rt and repro
    verdict(9, ok, f"backprop rel err {nn_err:.1e}, NLP rel err {nlp_err:.1e}, "
            f"round-trips {'exact' if ds_rt and model_rt else 'differ'}, "
            f"seeded reruns {'identical' if repro else 'differ'}",
            time.perf_counter() - t0, 600)
