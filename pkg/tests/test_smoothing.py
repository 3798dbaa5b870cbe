"""First-variation value and gradient tests for the three smoothing rules."""

import numpy as np
import pytest

from conftest import fd_gradient, random_state, rel_err
from parvikit.core import ParticleState
from parvikit.smoothing import (
    blob_first_variation,
    first_variation,
    gfsd_first_variation,
    ksdd_first_variation,
    stein_kernel,
    stein_kernel_grad_y,
)
from parvikit.targets import (
    GaussianTarget,
    UnsupportedOperationError,
    gmm_target,
    gp_target,
    synthetic_gp_data,
)


def _single(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return ParticleState(
        positions=x, velocities=np.zeros_like(x), weights=np.array([1.0])
    )


def _std_normal(d=1):
    return GaussianTarget(np.eye(d))


def _eval_point_u(rule_fn, state, target, h, i):
    """u at particle i as a function of the evaluation point, cloud frozen.

    Gradients are defined against the frozen cloud: the mixture sums over
    x^j keep their original positions while the evaluation point moves.
    """

    def f(z):
        if rule_fn is ksdd_first_variation:
            w = state.weights
            return sum(
                w[j] * stein_kernel(state.positions[j], z, target, h)
                for j in range(state.num_particles)
            )
        x = state.positions
        w = state.weights
        k_row = np.exp(-((z[None, :] - x) ** 2).sum(axis=1) / h)
        mix_z = float(k_row @ w)
        pot = -target.log_density(z)
        if rule_fn is gfsd_first_variation:
            return pot + np.log(mix_z)
        kmat = np.exp(-(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)) / h)
        mix = kmat @ w
        return pot + np.log(mix_z) + float(k_row @ (w / mix))

    return f


class TestBlob:
    def test_single_particle_reduction(self):
        t = _std_normal(2)
        state = _single([0.7, -0.3])
        fv = blob_first_variation(state, t, 2.0)
        # K(x, x) = 1 and the repulsive sum collapses to 1
        assert fv.u[0] == pytest.approx(-t.log_density(state.positions[0]) + 1.0, abs=1e-12)
        assert np.allclose(fv.grad_u[0], -t.score(state.positions[0]), atol=1e-12)

    def test_two_particle_hand_value(self):
        t = _std_normal(1)
        state = ParticleState(
            positions=np.array([[0.0], [2.0]]),
            velocities=np.zeros((2, 1)),
            weights=np.array([0.5, 0.5]),
        )
        fv = blob_first_variation(state, t, 4.0)
        expected = -t.log_density(np.array([0.0])) + np.log(0.5 * (1 + np.exp(-1.0))) + 1.0
        assert fv.u[0] == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        t = gmm_target(2)
        for seed in range(5):
            state = random_state(3, 2, seed=seed, nonuniform=True)
            h = 1.5
            fv = blob_first_variation(state, t, h)
            for i in range(3):
                f = _eval_point_u(blob_first_variation, state, t, h, i)
                fd = fd_gradient(f, state.positions[i])
                assert rel_err(fv.grad_u[i], fd) <= 1e-5


class TestGfsd:
    def test_single_particle_reduction(self):
        t = _std_normal(2)
        state = _single([0.4, 1.1])
        fv = gfsd_first_variation(state, t, 2.0)
        assert fv.u[0] == pytest.approx(-t.log_density(state.positions[0]), abs=1e-12)
        assert np.allclose(fv.grad_u[0], -t.score(state.positions[0]), atol=1e-12)

    def test_blob_minus_gfsd_is_repulsive_term(self):
        t = gmm_target(3)
        for seed in range(5):
            state = random_state(6, 3, seed=seed, nonuniform=True)
            h = 2.0
            blob = blob_first_variation(state, t, h)
            gfsd = gfsd_first_variation(state, t, h)
            x, w = state.positions, state.weights
            kmat = np.exp(-(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)) / h)
            mix = kmat @ w
            repulsive = kmat @ (w / mix)
            assert np.allclose(blob.u - gfsd.u, repulsive, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        t = gmm_target(2)
        for seed in range(5):
            state = random_state(4, 2, seed=seed, nonuniform=True)
            h = 1.5
            fv = gfsd_first_variation(state, t, h)
            for i in range(4):
                f = _eval_point_u(gfsd_first_variation, state, t, h, i)
                fd = fd_gradient(f, state.positions[i])
                assert rel_err(fv.grad_u[i], fd) <= 1e-5

    def test_underflow_floor(self):
        t = _std_normal(1)
        state = ParticleState(
            positions=np.array([[0.0], [1e6]]),
            velocities=np.zeros((2, 1)),
            weights=np.array([0.5, 0.5]),
        )
        fv = gfsd_first_variation(state, t, 1e-6)
        assert fv.floored == 0  # self term keeps each mixture above the floor
        lonely = ParticleState(
            positions=np.array([[0.0], [1e6]]),
            velocities=np.zeros((2, 1)),
            weights=np.array([0.0, 1.0]),
        )
        fv = gfsd_first_variation(lonely, t, 1e-6)
        assert fv.floored == 1
        assert np.all(np.isfinite(fv.u))


class TestSteinKernel:
    def test_value_at_origin(self):
        # score vanishes at the mode, leaving only the divergence term 2d/h
        assert stein_kernel(np.zeros(1), np.zeros(1), _std_normal(1), 2.0) == pytest.approx(
            1.0, abs=1e-12
        )
        for d in (1, 2, 5):
            h = 3.0
            v = stein_kernel(np.zeros(d), np.zeros(d), _std_normal(d), h)
            assert v == pytest.approx(2.0 * d / h, abs=1e-12)

    def test_symmetry(self):
        t = gmm_target(3)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x, y = rng.normal(size=(2, 3))
            h = float(rng.uniform(0.5, 5.0))
            a = stein_kernel(x, y, t, h)
            b = stein_kernel(y, x, t, h)
            assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_gram_positive_semidefinite(self):
        t = _std_normal(2)
        pts = np.random.default_rng(1).normal(size=(10, 2))
        gram = np.array(
            [[stein_kernel(a, b, t, 2.0) for b in pts] for a in pts]
        )
        assert np.linalg.eigvalsh(0.5 * (gram + gram.T)).min() >= -1e-8

    def test_grad_y_matches_finite_differences(self):
        t = gmm_target(2)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x, y = rng.normal(size=(2, 2))
            h = 2.0
            g = stein_kernel_grad_y(x, y, t, h)
            fd = fd_gradient(lambda z: stein_kernel(x, z, t, h), y)
            assert rel_err(g, fd) <= 1e-5

    def test_grad_y_needs_hessian(self):
        t = gp_target(synthetic_gp_data(n=5))
        with pytest.raises(UnsupportedOperationError):
            stein_kernel_grad_y(np.zeros(2), np.zeros(2), t, 1.0)


class TestKsdd:
    def test_single_particle_at_mode(self):
        t = _std_normal(3)
        state = _single([0.0, 0.0, 0.0])
        fv = ksdd_first_variation(state, t, 2.0)
        assert fv.u[0] == pytest.approx(2.0 * 3 / 2.0, abs=1e-12)

    def test_tail_exceeds_mode(self):
        t = _std_normal(1)
        near = np.random.default_rng(3).normal(size=(8, 1)) * 0.3
        far = near + 6.0
        u_near = ksdd_first_variation(
            ParticleState(near, np.zeros_like(near), np.full(8, 0.125)), t, 2.0
        ).u
        u_far = ksdd_first_variation(
            ParticleState(far, np.zeros_like(far), np.full(8, 0.125)), t, 2.0
        ).u
        assert u_far.mean() > u_near.mean()

    def test_matches_pairwise_oracle(self):
        t = gmm_target(2)
        state = random_state(5, 2, seed=4, nonuniform=True)
        h = 1.7
        fv = ksdd_first_variation(state, t, h)
        x, w = state.positions, state.weights
        for i in range(5):
            u = sum(w[j] * stein_kernel(x[j], x[i], t, h) for j in range(5))
            g = sum(w[j] * stein_kernel_grad_y(x[j], x[i], t, h) for j in range(5))
            assert fv.u[i] == pytest.approx(u, rel=1e-12, abs=1e-12)
            assert rel_err(fv.grad_u[i], g) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        t = gmm_target(2)
        for seed in range(5):
            state = random_state(4, 2, seed=seed, nonuniform=True)
            h = 1.5
            fv = ksdd_first_variation(state, t, h)
            for i in range(4):
                f = _eval_point_u(ksdd_first_variation, state, t, h, i)
                fd = fd_gradient(f, state.positions[i], eps=1e-4)
                assert rel_err(fv.grad_u[i], fd) <= 1e-4

    def test_needs_hessian(self):
        t = gp_target(synthetic_gp_data(n=5))
        state = random_state(3, 2, seed=5)
        with pytest.raises(UnsupportedOperationError):
            ksdd_first_variation(state, t, 1.0)


class TestSharedProperties:
    @pytest.mark.parametrize("rule", ["BLOB", "GFSD", "KSDD"])
    def test_permutation_equivariance(self, rule):
        t = gmm_target(2)
        state = random_state(6, 2, seed=6, nonuniform=True)
        h = 1.5
        fv = first_variation(state, t, h, rule)
        perm = np.random.default_rng(7).permutation(6)
        permuted = ParticleState(
            positions=state.positions[perm],
            velocities=state.velocities[perm],
            weights=state.weights[perm],
        )
        fvp = first_variation(permuted, t, h, rule)
        assert np.allclose(fvp.u, fv.u[perm], atol=1e-12)
        assert np.allclose(fvp.grad_u, fv.grad_u[perm], atol=1e-12)

    @pytest.mark.parametrize("rule", ["BLOB", "GFSD"])
    def test_translation_equivariance(self, rule):
        c = np.array([4.0, -7.0])
        base = GaussianTarget(np.array([[1.0, 0.3], [0.3, 1.0]]))
        shifted = GaussianTarget(base.cov, mean=c)
        state = random_state(5, 2, seed=8, nonuniform=True)
        moved = state.replace(positions=state.positions + c)
        h = 2.0
        fv = first_variation(state, base, h, rule)
        fvc = first_variation(moved, shifted, h, rule)
        assert np.allclose(fvc.u, fv.u, atol=1e-10)
        assert np.allclose(fvc.grad_u, fv.grad_u, atol=1e-10)

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            first_variation(random_state(2, 1), _std_normal(1), 1.0, "MEDIAN")
