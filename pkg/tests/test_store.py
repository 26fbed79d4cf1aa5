import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mes import CostRecord, CostTrace
from pod import compute_basis, compute_basis_blocked
from rom import assemble
from store import (Manifest, digest, load_basis, load_cached_snapshots, load_rom,
                   load_snapshots, load_trace_table, load_trajectory, read_rows, save_basis,
                   save_rom, save_snapshots, save_trace, save_trajectory, write_json)
from timestep import Trajectory


class TestSnapshots:
    def test_bitwise_reload(self, tmp_path, burgers_snapshots):
        save_snapshots(tmp_path, burgers_snapshots, "abc")
        back = load_snapshots(tmp_path)
        assert np.array_equal(back.states, burgers_snapshots.states)
        assert np.array_equal(back.times, burgers_snapshots.times)
        assert np.array_equal(back.weights, burgers_snapshots.weights)

    def test_csv_layout(self, tmp_path, burgers_snapshots):
        save_snapshots(tmp_path, burgers_snapshots)
        header, data = read_rows(tmp_path / "snapshots.csv")
        assert header[:3] == ["t", "x_0", "x_1"]
        assert header[-1] == f"x_{burgers_snapshots.n - 1}"
        assert data.shape == (burgers_snapshots.s, burgers_snapshots.n + 1)

    def test_metadata(self, tmp_path, synthetic_snapshots):
        save_snapshots(tmp_path, synthetic_snapshots, "abc")
        meta = json.loads((tmp_path / "snapshots.json").read_text())
        assert meta["n"] == 12
        assert meta["weights"] == "uniform"
        assert meta["h"] == 1.0
        assert meta["blocks"] == [{"name": "v", "start": 0, "stop": 6},
                                  {"name": "T", "start": 6, "stop": 12}]
        assert load_snapshots(tmp_path).blocks == synthetic_snapshots.blocks

    def test_cache_hit_and_stale(self, tmp_path, burgers_snapshots):
        assert load_cached_snapshots(tmp_path, "abc") is None
        save_snapshots(tmp_path, burgers_snapshots, "abc")
        hit = load_cached_snapshots(tmp_path, "abc")
        assert hit is not None and np.array_equal(hit.states, burgers_snapshots.states)
        assert load_cached_snapshots(tmp_path, "xyz") is None


class TestBasisAndRom:
    def test_basis_reload(self, tmp_path, burgers_basis):
        save_basis(tmp_path, burgers_basis)
        back = load_basis(tmp_path)
        assert np.array_equal(back.modes, burgers_basis.modes)
        assert np.array_equal(back.eigenvalues, burgers_basis.eigenvalues)
        assert np.array_equal(back.weights, burgers_basis.weights)
        assert back.effective_rank == burgers_basis.effective_rank
        assert (tmp_path / "base_state.csv").read_text().startswith("z_bar\n")

    def test_blocked_basis_metadata(self, tmp_path, synthetic_snapshots):
        basis = compute_basis_blocked(synthetic_snapshots, 3, 2, subtract_mean=True)
        save_basis(tmp_path, basis)
        meta = json.loads((tmp_path / "basis.json").read_text())
        assert (meta["r"], meta["r_v"], meta["r_T"]) == (5, 3, 2)
        assert meta["subtract_mean"] is True
        back = load_basis(tmp_path)
        assert back.block_ranks == (("v", 3), ("T", 2))
        assert np.array_equal(back.base_state, basis.base_state)

    def test_rom_reload(self, tmp_path, burgers, burgers_basis, rng):
        rom = assemble(burgers, burgers_basis)
        save_rom(tmp_path, rom)
        back = load_rom(tmp_path)
        for name in ("e", "L", "D", "C"):
            assert np.array_equal(getattr(back, name), getattr(rom, name))
        assert back.mu == rom.mu
        assert back.basis_ref == rom.basis_ref

    def test_rom_json_keys(self, tmp_path, synthetic, synthetic_snapshots):
        rom = assemble(synthetic, compute_basis(synthetic_snapshots, 4))
        save_rom(tmp_path, rom)
        meta = json.loads((tmp_path / "rom.json").read_text())
        assert {"r", "mu", "e", "L", "D", "C"} <= set(meta)
        assert np.asarray(meta["C"]).shape == (4, 4, 4)


class TestTables:
    def test_trajectory_reload(self, tmp_path, rng):
        traj = Trajectory(times=np.arange(5) * 0.1, states=rng.standard_normal((3, 5)))
        save_trajectory(tmp_path / "truth_coeffs.csv", traj)
        assert (tmp_path / "truth_coeffs.csv").read_text().startswith("t,q_0,q_1,q_2\n")
        back = load_trajectory(tmp_path / "truth_coeffs.csv")
        assert np.array_equal(back.states, traj.states)
        assert np.array_equal(back.times, traj.times)

    def test_trace_layout(self, tmp_path):
        trace = CostTrace(("mu_e", "mu_nl"), [
            CostRecord(0, np.array([0.1, 2e-6]), 3.5, True, None, {}),
            CostRecord(1, np.array([0.2, 1e-6]), 1e12, False, 0.25, {}),
        ])
        save_trace(tmp_path / "trace.csv", trace)
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "k,mu_e_hat,mu_nl_hat,Q,stable"
        assert lines[1] == "0,0.1,2e-06,3.5,1"
        assert lines[2].endswith(",0")
        header, table = load_trace_table(tmp_path / "trace.csv")
        assert header[-1] == "stable"
        assert_allclose(table[:, 3], [3.5, 1e12])


class TestMisc:
    def test_write_json_is_deterministic(self, tmp_path):
        obj = {"b": [1.5, 2.0], "a": {"x": None}}
        write_json(tmp_path / "one.json", obj)
        write_json(tmp_path / "two.json", obj)
        one = (tmp_path / "one.json").read_bytes()
        assert one == (tmp_path / "two.json").read_bytes()
        assert one.endswith(b"}\n")

    def test_digest_ignores_key_order(self):
        assert digest({"a": 1, "b": [2, 3]}) == digest({"b": [2, 3], "a": 1})
        assert digest({"a": 1}) != digest({"a": 2})
        assert len(digest({})) == 12

    def test_manifest_records_failure(self, tmp_path):
        manifest = Manifest(tmp_path)
        manifest.record("simulate", "ok", ["snapshots.json", "snapshots.csv"])
        manifest.record("pod", "failed", [], error="rank 2 < 8")
        data = json.loads((tmp_path / "MANIFEST.json").read_text())
        assert data["failed_stage"] == "pod"
        assert data["stages"][0]["files"] == ["snapshots.csv", "snapshots.json"]
        assert data["stages"][1]["error"] == "rank 2 < 8"

    @pytest.mark.parametrize("status", ["ok", "skipped"])
    def test_manifest_without_failure(self, tmp_path, status):
        manifest = Manifest(tmp_path)
        manifest.record("simulate", status, [])
        assert json.loads((tmp_path / "MANIFEST.json").read_text())["failed_stage"] is None
