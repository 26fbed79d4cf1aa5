import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from models.base import SnapshotSet
from pod import (RankError, compute_basis, compute_basis_blocked, correlation_matrix,
                 eig_sym, energy_fraction, field_error_energy, mean_projection_error, project,
                 project_snapshots, project_trajectory, reconstruct)
from timestep import Trajectory


def _snapshots(states, weights=None, blocks=()):
    states = np.asarray(states, dtype=float)
    n, s = states.shape
    return SnapshotSet(states=states, times=np.arange(s, dtype=float),
                       weights=np.ones(n) if weights is None else weights, blocks=blocks)


class TestCorrelationMatrix:
    def test_identical_unit_snapshots(self):
        n, s = 16, 5
        h = 1.0 / n
        z = np.sin(2 * np.pi * np.arange(n) * h)
        z /= np.sqrt(np.sum(h * z * z))
        S = _snapshots(np.repeat(z[:, None], s, axis=1), weights=np.full(n, h))
        assert_allclose(correlation_matrix(S, np.zeros(n)), np.ones((s, s)) / s, rtol=1e-13)

    def test_orthogonal_snapshots(self):
        S = _snapshots([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
        assert_allclose(correlation_matrix(S, np.zeros(3)), np.diag([0.5, 2.0]), atol=0)

    def test_mean_subtracted_rows_sum_to_zero(self, rng):
        S = _snapshots(rng.standard_normal((20, 9)))
        K = correlation_matrix(S, S.states.mean(axis=1))
        assert np.max(np.abs(K.sum(axis=1))) <= 1e-12 * np.max(np.abs(K)) * S.s

    def test_symmetric_positive_semidefinite(self, burgers_snapshots):
        K = correlation_matrix(burgers_snapshots, np.zeros(burgers_snapshots.n))
        assert np.array_equal(K, K.T)
        assert eig_sym(K)[0][-1] >= -1e-14 * np.trace(K)

    def test_dimension_mismatch(self, burgers_snapshots):
        with pytest.raises(ValueError):
            correlation_matrix(burgers_snapshots, np.zeros(3))


class TestEigSym:
    def test_diagonal(self):
        w, V = eig_sym(np.diag([3.0, 1.0, 2.0]))
        assert_allclose(w, [3.0, 2.0, 1.0])
        assert_allclose(V, np.eye(3)[:, [0, 2, 1]])

    def test_two_by_two(self):
        w, V = eig_sym(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert_allclose(w, [3.0, 1.0], rtol=1e-14)
        assert_allclose(V[:, 0], np.array([1.0, 1.0]) / np.sqrt(2), rtol=1e-14)
        assert_allclose(V[:, 1], np.array([1.0, -1.0]) / np.sqrt(2), rtol=1e-14)

    def test_random_spd_reconstruction(self, rng):
        A = rng.standard_normal((20, 20))
        K = A @ A.T + 0.1 * np.eye(20)
        w, V = eig_sym(K)
        assert np.all(np.diff(w) <= 0)
        assert np.linalg.norm(V @ np.diag(w) @ V.T - K) <= 1e-12 * np.linalg.norm(K)
        assert_allclose(V.T @ V, np.eye(20), atol=1e-12)

    def test_sign_rule(self, rng):
        A = rng.standard_normal((8, 8))
        _, V = eig_sym(A + A.T)
        lead = V[np.argmax(np.abs(V), axis=0), np.arange(8)]
        assert np.all(lead > 0)

    def test_rejects_non_symmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            eig_sym(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_zero_matrix(self):
        w, V = eig_sym(np.zeros((3, 3)))
        assert_allclose(w, 0.0)
        assert_allclose(V, np.eye(3))

    def test_subnormal_off_diagonal(self):
        K = np.array([[1.0, 1e-310, 0.5], [1e-310, 2.0, 0.0], [0.5, 0.0, 3.0]])
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            w, V = eig_sym(K)
        assert np.all(np.isfinite(w)) and np.all(np.isfinite(V))
        assert_allclose(w, np.linalg.eigvalsh(K)[::-1], rtol=1e-12)
        assert np.linalg.norm(V @ np.diag(w) @ V.T - K) <= 1e-12 * np.linalg.norm(K)


class TestComputeBasis:
    def test_copies_of_one_state(self):
        n, s = 10, 4
        z = np.zeros(n)
        z[2], z[7] = 0.6, 0.8
        b = compute_basis(_snapshots(np.repeat(z[:, None], s, axis=1)), 1)
        assert_allclose(b.modes[:, 0], z, atol=1e-14)
        assert_allclose(b.eigenvalues, [1.0], rtol=1e-14)

    def test_rank_is_reported(self):
        S = _snapshots(np.repeat(np.ones((6, 1)), 3, axis=1))
        with pytest.raises(RankError) as info:
            compute_basis(S, 2)
        assert info.value.effective_rank == 1
        assert "effective rank 1" in str(info.value)

    def test_non_strict_caps_rank(self):
        S = _snapshots(np.repeat(np.ones((6, 1)), 3, axis=1))
        assert compute_basis(S, 2, strict=False).r == 1

    def test_orthonormal(self, burgers_basis):
        assert np.max(np.abs(burgers_basis.gram() - np.eye(burgers_basis.r))) <= 1e-10

    def test_eigenvalues_descending_positive(self, burgers_basis):
        lam = burgers_basis.eigenvalues
        assert np.all(lam > 0)
        assert np.all(np.diff(lam) <= 0)

    def test_snapshot_energy_identity(self, burgers_snapshots):
        for subtract_mean in (False, True):
            b = compute_basis(burgers_snapshots, 2, subtract_mean)
            X = burgers_snapshots.states - b.base_state[:, None]
            energy = np.sum(burgers_snapshots.weights[:, None] * X * X) / burgers_snapshots.s
            assert_allclose(np.sum(b.all_eigenvalues), energy, rtol=1e-10)

    def test_discarded_eigenvalue_identity(self, burgers_snapshots):
        b = compute_basis(burgers_snapshots, 2)
        discarded = np.sum(b.all_eigenvalues[b.r:])
        assert_allclose(mean_projection_error(b, burgers_snapshots), discarded, rtol=1e-8)

    def test_mean_subtraction_recorded(self, synthetic_snapshots):
        b = compute_basis(synthetic_snapshots, 4, subtract_mean=True)
        assert b.subtract_mean
        assert_allclose(b.base_state, synthetic_snapshots.states.mean(axis=1))

    def test_deterministic(self, burgers_snapshots):
        a = compute_basis(burgers_snapshots, 3)
        b = compute_basis(burgers_snapshots, 3)
        assert np.array_equal(a.modes, b.modes)

    def test_energy_fraction(self, burgers_snapshots):
        b = compute_basis(burgers_snapshots, 2)
        assert 0.0 < energy_fraction(b) < 1.0
        full = compute_basis(burgers_snapshots, b.effective_rank)
        assert_allclose(energy_fraction(full), 1.0, rtol=1e-12)


class TestBlockedBasis:
    def test_cross_block_products_vanish(self, synthetic_snapshots):
        b = compute_basis_blocked(synthetic_snapshots, 3, 2)
        gram = b.gram()
        assert b.r == 5
        assert b.block_ranks == (("v", 3), ("T", 2))
        assert np.all(gram[:3, 3:] == 0.0)
        assert np.max(np.abs(gram - np.eye(5))) <= 1e-10

    def test_mode_supports(self, synthetic_snapshots):
        b = compute_basis_blocked(synthetic_snapshots, 3, 3)
        assert np.all(b.modes[6:, :3] == 0.0)
        assert np.all(b.modes[:6, 3:] == 0.0)
        assert [name for name, _ in b.mode_blocks()] == ["v", "T"]

    def test_block_diagonal_set_matches_unblocked(self, rng):
        n = 8
        states = np.zeros((n, 6))
        states[:4, :3] = rng.standard_normal((4, 3))
        states[4:, 3:] = rng.standard_normal((4, 3))
        S = _snapshots(states, blocks=(("v", 0, 4), ("T", 4, 8)))
        blocked = compute_basis_blocked(S, 3, 3)
        plain = compute_basis(S, 6)
        P_blocked = blocked.modes @ blocked.modes.T
        P_plain = plain.modes @ plain.modes.T
        assert_allclose(P_blocked, P_plain, atol=1e-10)

    def test_requires_blocks(self, burgers_snapshots):
        with pytest.raises(ValueError, match="blocks"):
            compute_basis_blocked(burgers_snapshots, 2, 2)


class TestProjection:
    def test_base_state_projects_to_zero(self, synthetic_snapshots):
        b = compute_basis(synthetic_snapshots, 4, subtract_mean=True)
        assert_allclose(project(b, b.base_state), 0.0, atol=0)

    def test_project_reconstruct_identity(self, burgers_basis, rng):
        for _ in range(100):
            q = rng.standard_normal(burgers_basis.r)
            assert np.max(np.abs(project(burgers_basis, reconstruct(burgers_basis, q)) - q)) <= 1e-10

    def test_residual_is_orthogonal(self, burgers_basis, rng):
        z = rng.standard_normal(burgers_basis.n)
        resid = z - reconstruct(burgers_basis, project(burgers_basis, z))
        inner = burgers_basis.modes.T @ (burgers_basis.weights * resid)
        assert np.max(np.abs(inner)) <= 1e-12 * np.linalg.norm(z)

    def test_stacks(self, burgers_basis, burgers_snapshots):
        Q = project(burgers_basis, burgers_snapshots.states)
        assert Q.shape == (burgers_basis.r, burgers_snapshots.s)
        assert_allclose(Q[:, 4], project(burgers_basis, burgers_snapshots.states[:, 4]),
                        rtol=1e-12, atol=1e-15)
        traj = project_snapshots(burgers_basis, burgers_snapshots)
        assert_allclose(traj.times, burgers_snapshots.times)

    def test_dimension_mismatch(self, burgers_basis):
        with pytest.raises(ValueError):
            project(burgers_basis, np.zeros(5))
        with pytest.raises(ValueError):
            reconstruct(burgers_basis, np.zeros(burgers_basis.r + 1))

    def test_field_error_matches_coefficient_error(self, burgers_basis, rng):
        e = rng.standard_normal((burgers_basis.r, 6))
        assert_allclose(field_error_energy(burgers_basis, e), np.sum(e * e, axis=0), rtol=1e-9)
        assert_allclose(field_error_energy(burgers_basis, e[:, 0]), np.sum(e[:, 0] ** 2),
                        rtol=1e-9)

    def test_project_trajectory_keeps_flags(self, burgers_basis, burgers_snapshots):
        traj = Trajectory(times=burgers_snapshots.times, states=burgers_snapshots.states,
                          stable=False, blowup_time=1.0)
        coeffs = project_trajectory(burgers_basis, traj)
        assert coeffs.dim == burgers_basis.r
        assert not coeffs.stable and coeffs.blowup_time == 1.0
