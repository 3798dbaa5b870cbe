"""Acceptance gate: nine end-to-end criteria, one pass/fail line each.

Each criterion prints its verdict directly to the terminal (bypassing
capture) so a `pytest tests/test_acceptance.py` run shows nine lines.
"""

import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import fd_gradient, random_state, rel_err
from parvikit.core import KernelConfig, ParticleState
from parvikit.dynamics import (
    CANONICAL_METHODS,
    DynamicsConfig,
    FirstVariation,
    StepRng,
    dk_resample,
    first_order_step,
    kwgad_step,
    make_stepper,
    parse_method,
    sgad_step,
    wgad_step,
)
from parvikit.harness import ExperimentConfig, run_experiment, write_csv
from parvikit.metrics import (
    WeightedCloud,
    wasserstein2_exact,
    wasserstein2_sinkhorn,
)
from parvikit.smoothing import first_variation, stein_kernel
from parvikit.targets import GaussianTarget, gmm_target, gp_target, sg_target, synthetic_gp_data


@contextmanager
def criterion(number, label, capfd):
    def emit(verdict):
        with capfd.disabled():
            print("%s criterion %d: %s" % (verdict, number, label), flush=True)

    try:
        yield
    except Exception:
        emit("FAIL")
        raise
    emit("PASS")


def _soak_state(m=16, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return ParticleState(
        positions=rng.normal(size=(m, d)),
        velocities=np.zeros((m, d)),
        weights=np.full(m, 1.0 / m),
    )


def test_criterion_1_algebraic_property_suite(capfd):
    with criterion(1, "algebraic/property suite (mass, sign, DK, stationarity, Jacobi)", capfd):
        # CPU time, not wall time: the budget is this suite's own compute and
        # must not flake when the host core is contended by other processes
        start = time.process_time()
        target = gmm_target(2)
        cfg = DynamicsConfig(
            eta_pos=1e-3, eta_vel=0.05, gamma=10.0, eta_wei=1e-6,
            warmup=False, total_steps=10000,
        )
        m = 16
        for name in CANONICAL_METHODS:
            spec = parse_method(name)
            stepper = make_stepper(name, target, cfg, KernelConfig(), StepRng(0))
            state = _soak_state(m=m)
            # steppers return fresh weight arrays, so collecting references and
            # checking in bulk observes every per-step weight vector
            weight_log = []
            for _ in range(10000):
                state = stepper(state)
                weight_log.append(state.weights)
            weights = np.array(weight_log)
            assert np.abs(weights.sum(axis=1) - 1.0).max() <= 1e-12, name
            assert weights.min() >= 0.0, name
            if spec.weight_mode in ("DK", "fixed") or spec.kind in ("svgd", "wnes"):
                # DK and fixed-weight methods keep the weights uniform
                assert np.all(weights == weights[:, :1]), name

        # dissipation-sign identity for the CA multiplicative direction
        rng = np.random.default_rng(0)
        for _ in range(1000):
            w = rng.random(12) + 0.01
            w = w / w.sum()
            u = rng.normal(size=12) * 5.0
            eta = float(rng.uniform(0.0, 0.5))
            delta = -eta * (u - w @ u) * w
            lhs = float(u @ delta)
            rhs = -eta * float(w @ u**2 - (w @ u) ** 2)
            assert abs(lhs - rhs) <= 1e-10 * max(abs(rhs), 1.0)
            assert lhs <= 1e-15

        # stationarity: zero drive, constant u, zero velocities -> identity step
        state = random_state(6, 2, seed=1, nonuniform=True)
        fv = FirstVariation(u=np.full(6, 2.2), grad_u=np.zeros((6, 2)))
        ca = DynamicsConfig(weight_mode="CA", eta_wei=0.1, warmup=False)
        for step_fn in (wgad_step, kwgad_step, first_order_step):
            out = step_fn(state, fv, ca, StepRng(0))
            assert np.array_equal(out.positions, state.positions)
            assert np.array_equal(out.velocities, state.velocities)
            assert np.allclose(out.weights, state.weights, atol=1e-15)
        out = sgad_step(state, fv, ca, StepRng(0), h=2.0)
        assert np.array_equal(out.positions, state.positions)

        # Jacobi bit-reproducibility: per-particle sub-updates read only the
        # frozen iteration-k state, so recomputing rows in a permuted order
        # reproduces the vectorized step bit-for-bit
        cfg_j = DynamicsConfig(eta_pos=0.1, eta_vel=0.5, gamma=0.4)
        state = random_state(8, 3, seed=2, with_velocity=True)
        grad = np.random.default_rng(3).normal(size=(8, 3))
        fv = FirstVariation(u=np.random.default_rng(4).normal(size=8), grad_u=grad)
        full = wgad_step(state, fv, cfg_j, StepRng(0))
        pos = np.empty_like(state.positions)
        vel = np.empty_like(state.velocities)
        decay = 1.0 - cfg_j.gamma * cfg_j.eta_vel
        for i in np.random.default_rng(5).permutation(8):
            pos[i] = state.positions[i] + cfg_j.eta_pos * state.velocities[i]
            vel[i] = decay * state.velocities[i] - cfg_j.eta_vel * grad[i]
        assert np.array_equal(full.positions, pos)
        assert np.array_equal(full.velocities, vel)

        assert time.process_time() - start < 30.0


def test_criterion_2_gradient_oracles(capfd):
    with criterion(2, "gradient oracles vs central finite differences", capfd):
        start = time.process_time()
        target = gmm_target(2)
        h = 1.5

        def eval_point_u(rule, state, z):
            x, w = state.positions, state.weights
            if rule == "KSDD":
                return sum(
                    w[j] * stein_kernel(x[j], z, target, h)
                    for j in range(state.num_particles)
                )
            k_row = np.exp(-((z[None, :] - x) ** 2).sum(axis=1) / h)
            mix_z = float(k_row @ w)
            pot = -target.log_density(z)
            if rule == "GFSD":
                return pot + np.log(mix_z)
            kmat = np.exp(-(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)) / h)
            mix = kmat @ w
            return pot + np.log(mix_z) + float(k_row @ (w / mix))

        for rule, tol, eps in (("BLOB", 1e-5, 1e-5), ("GFSD", 1e-5, 1e-5), ("KSDD", 1e-4, 1e-4)):
            for seed in range(20):
                state = random_state(3, 2, seed=seed, nonuniform=True)
                fv = first_variation(state, target, h, rule)
                for i in range(3):
                    fd = fd_gradient(
                        lambda z: eval_point_u(rule, state, z), state.positions[i], eps=eps
                    )
                    assert rel_err(fv.grad_u[i], fd) <= tol, (rule, seed, i)

        gp = gp_target(synthetic_gp_data())
        rng = np.random.default_rng(0)
        for _ in range(10):
            phi = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-11.0, -8.0)])
            fd = fd_gradient(gp.log_density, phi, eps=1e-5)
            assert rel_err(gp.score(phi), fd) <= 1e-5

        assert time.process_time() - start < 30.0


def test_criterion_3_stein_kernel_suite(capfd):
    with criterion(3, "Stein-kernel symmetry, PSD Gram, mode value 2d/h", capfd):
        # symmetry holds to machine precision (term summation order differs)
        target = gmm_target(3)
        rng = np.random.default_rng(0)
        for _ in range(50):
            x, y = rng.normal(size=(2, 3))
            h = float(rng.uniform(0.5, 5.0))
            a = stein_kernel(x, y, target, h)
            b = stein_kernel(y, x, target, h)
            assert abs(a - b) <= 1e-12 * max(abs(a), 1.0)

        std = GaussianTarget(np.eye(2))
        pts = np.random.default_rng(1).normal(size=(10, 2))
        gram = np.array([[stein_kernel(p, q, std, 2.0) for q in pts] for p in pts])
        assert np.linalg.eigvalsh(0.5 * (gram + gram.T)).min() >= -1e-8

        for d in (1, 2, 5):
            for h in (0.7, 2.0, 5.0):
                v = stein_kernel(np.zeros(d), np.zeros(d), GaussianTarget(np.eye(d)), h)
                assert abs(v - 2.0 * d / h) <= 1e-12


def test_criterion_4_ot_evaluator(capfd):
    with criterion(4, "OT evaluator: closed forms, Sinkhorn 1%, triangle inequality", capfd):
        # Dirac pairs
        assert abs(
            wasserstein2_exact(
                WeightedCloud.uniform(np.array([[0.0, 0.0]])),
                WeightedCloud.uniform(np.array([[3.0, 4.0]])),
            )
            - 5.0
        ) <= 1e-9
        # 1-D quantile coupling on random uniform clouds
        rng = np.random.default_rng(0)
        for _ in range(10):
            xa = rng.normal(size=16)
            xb = rng.normal(size=16) + rng.uniform(-2, 2)
            exact = wasserstein2_exact(
                WeightedCloud.uniform(xa[:, None]), WeightedCloud.uniform(xb[:, None])
            )
            oracle = np.sqrt(np.mean((np.sort(xa) - np.sort(xb)) ** 2))
            assert abs(exact - oracle) <= 1e-9

        # Sinkhorn vs exact on 50-point random clouds
        a = WeightedCloud.uniform(rng.normal(size=(50, 2)))
        b = WeightedCloud.uniform(rng.normal(size=(50, 2)) + 0.5)
        exact = wasserstein2_exact(a, b)
        approx, _ = wasserstein2_sinkhorn(a, b, eps=0.01, max_iter=100000, tol=1e-6)
        assert abs(approx - exact) / exact <= 0.01

        # triangle inequality on 100 random triples
        for _ in range(100):
            x, y, z = (WeightedCloud.uniform(rng.normal(size=(6, 2))) for _ in range(3))
            assert wasserstein2_exact(x, z) <= (
                wasserstein2_exact(x, y) + wasserstein2_exact(y, z) + 1e-9
            )


def test_criterion_5_reduction_checks(capfd):
    with criterion(5, "reductions: WAIG=WGAD(eta_wei=0), lag-one descent, WNES k=1", capfd):
        target = gmm_target(2)
        kernel = KernelConfig()
        cfg = DynamicsConfig(eta_pos=1e-2, eta_vel=1.0, gamma=0.3, eta_wei=0.0)
        sa = sb = _soak_state(m=8, seed=3)
        a = make_stepper("WAIG-BLOB", target, cfg, kernel, StepRng(0))
        b = make_stepper("WGAD-CA-BLOB", target, cfg, kernel, StepRng(0))
        for _ in range(500):
            sa, sb = a(sa), b(sb)
        assert np.array_equal(sa.positions, sb.positions)
        assert np.array_equal(sa.velocities, sb.velocities)
        assert np.array_equal(sa.weights, sb.weights)

        # M=1, gamma*eta_vel=1, v0=0: lag-one gradient descent oracle
        std = GaussianTarget(np.eye(1))
        eta_pos, eta_vel = 0.05, 1.0
        stepper = make_stepper(
            "WAIG-BLOB", std,
            DynamicsConfig(eta_pos=eta_pos, eta_vel=eta_vel, gamma=1.0),
            KernelConfig(bandwidth_mode="fixed", fixed_h=1.0),
        )
        state = ParticleState(np.array([[1.0]]), np.zeros((1, 1)), np.array([1.0]))
        xs = [1.0]
        for _ in range(20):
            state = stepper(state)
            xs.append(xs[-1] if len(xs) == 1 else xs[-1] - eta_pos * eta_vel * xs[-2])
            assert abs(state.positions[0, 0] - xs[-1]) <= 1e-12

        # WNES first step (k=1) equals the plain first-order step exactly
        init = random_state(6, 2, seed=4)
        wnes = make_stepper("WNES-BLOB", target, DynamicsConfig(eta_pos=0.05), kernel)(init)
        plain = make_stepper("BLOB", target, DynamicsConfig(eta_pos=0.05), kernel)(init)
        assert np.array_equal(wnes.positions, plain.positions)


def test_criterion_6_gmm_mixture_weight_recovery(capfd):
    with criterion(6, "GMM mode-mass recovery and W2 ordering (10 seeds)", capfd):
        start = time.process_time()

        def final_stats(method):
            w2s, modes = [], []
            for seed in range(10):
                cfg = ExperimentConfig(
                    method=method, target="gmm:2", particles=64, iterations=2000,
                    record_every=2000, seed=seed, reference_samples=500,
                )
                records, _ = run_experiment(cfg)
                w2s.append(records[-1].w2)
                modes.append(records[-1].mode_mass)
            return float(np.mean(w2s)), float(np.mean(modes))

        wgad_w2, wgad_mode = final_stats("WGAD-CA-BLOB")
        dpvi_w2, _ = final_stats("DPVI-CA-BLOB")
        blob_w2, _ = final_stats("BLOB")

        assert 0.60 <= wgad_mode <= 0.73, wgad_mode
        assert wgad_w2 <= dpvi_w2 * 1.05, (wgad_w2, dpvi_w2)
        assert dpvi_w2 <= blob_w2 * 1.05, (dpvi_w2, blob_w2)
        assert time.process_time() - start < 120.0


def test_criterion_7_sg_moment_convergence(capfd):
    with criterion(7, "10-D SG moment convergence (10 seeds)", capfd):
        start = time.process_time()
        target_cov = sg_target(10).cov
        mean_errs, cov_errs = [], []
        for seed in range(10):
            cfg = ExperimentConfig(
                method="WGAD-CA-BLOB", target="sg10", particles=128, iterations=2000,
                record_every=2000, seed=seed, reference_samples=100,
            )
            records, _ = run_experiment(cfg)
            mean_errs.append(records[-1].mean_err)
            cov_errs.append(records[-1].cov_err)
        assert float(np.mean(mean_errs)) <= 0.15
        assert float(np.mean(cov_errs)) <= 0.2 * np.linalg.norm(target_cov)
        assert time.process_time() - start < 120.0


def test_criterion_8_dk_law(capfd):
    with criterion(8, "DK duplication frequency matches 1-exp(-R) within 3 sigma", capfd):
        pos = np.array([[0.0], [1.0]])
        vel = np.zeros((2, 1))
        w = np.array([0.5, 0.5])
        n = 100000
        for rate_idx, rate in enumerate((0.05, 0.2, 1.0)):
            # rates = -eta*(u - mean u) = (rate, -rate) for u = (-rate, rate), eta = 1
            u = np.array([-rate, rate])
            rng = StepRng(1000 + rate_idx)
            hits = 0
            for i in range(n):
                state = ParticleState._trusted(pos, vel, w, i)
                out = dk_resample(state, u, 1.0, rng)
                hits += ("duplicate", 0, 1) in out.events
            p = 1.0 - np.exp(-rate)
            sigma = np.sqrt(p * (1.0 - p) / n)
            assert abs(hits / n - p) <= 3.0 * sigma, (rate, hits / n, p)


def test_criterion_9_byte_identical_csv(tmp_path, capfd):
    with criterion(9, "byte-identical CSV output for repeated (config, seed)", capfd):
        for method in ("WGAD-CA-BLOB", "WGAD-DK-BLOB", "SVGD"):
            cfg = ExperimentConfig(
                method=method, target="gmm:2", particles=12, iterations=60,
                record_every=20, seed=7, reference_samples=60,
            )
            payloads = []
            for run in range(2):
                records, _ = run_experiment(cfg)
                path = tmp_path / ("%s_%d.csv" % (method, run))
                write_csv(records, path)
                payloads.append(path.read_bytes())
            assert payloads[0] == payloads[1], method
