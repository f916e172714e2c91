"""Reference solver, analytic regressions, metrics, probes, exports."""
import numpy as np
import pytest

from plateheat.oracle import (EmptyReference, NonFinite, OutOfDomain,
                              ProbeHistory, TemperatureField, UnstableStep,
                              analytic_suite, enthalpy, fdm_solve,
                              field_to_csv, field_to_vtk, probe, probe_to_csv,
                              relative_l2, slab1d_solve, stability_bound)
from plateheat.physics import ProcessConfig, resolve_material

PROCESS = ProcessConfig()
TI64 = resolve_material("Ti-6Al-4V").as_array()


class TestStability:
    def test_bound_formula(self):
        lam = (4430.0, 560.0, 6.7)
        alpha = 6.7 / (4430.0 * 560.0)
        expect = 1.0 / (2 * alpha * (1e6 + 1e6 + 4e6))
        assert stability_bound(lam, (1e-3, 1e-3, 0.5e-3)) == pytest.approx(expect)
        assert stability_bound(lam, 1e-3) == pytest.approx(
            1.0 / (2 * alpha * 3e6))

    def test_forced_step_above_bound(self):
        with pytest.raises(UnstableStep):
            fdm_solve(PROCESS, TI64, spacing=1e-3, t_end=0.2,
                      dt=2 * stability_bound(TI64, 1e-3))
        with pytest.raises(UnstableStep):
            slab1d_solve(0.04, 2.7e-6, 1e-3, 0.1, lambda x: x, dt=1.0)

    def test_spacing_must_divide_extent(self):
        with pytest.raises(ValueError):
            fdm_solve(PROCESS, TI64, spacing=0.7e-3, t_end=0.1)


class TestAnalyticSuite:
    def test_eigenmode_accuracy_and_order(self):
        suite = dict(analytic_suite(PROCESS))
        run = suite["slab_eigenmode"]
        coarse, fine = run(1e-3), run(5e-4)
        assert fine <= 1.0
        assert coarse / fine >= 3.5  # near second-order convergence

    def test_equilibrium_is_preserved(self):
        suite = dict(analytic_suite(PROCESS))
        assert suite["uniform_equilibrium"](1e-3) <= 1e-9

    def test_eigenmode_decay_direction(self):
        x, T = slab1d_solve(0.04, 2.7e-6, 1e-3, 0.5,
                            lambda xv: 300.0 + 100.0 * np.sin(np.pi * xv / 0.04))
        assert T.max() < 400.0
        assert T.max() > 300.0
        assert T[0] == 300.0 and T[-1] == pytest.approx(300.0, abs=1e-9)


class TestConservation:
    def test_insulated_enthalpy_constant(self):
        def bump(x, y, z):
            return 300.0 + 200.0 * np.exp(
                -((x - 0.02) ** 2 + (y - 0.005) ** 2 + (z - 0.003) ** 2) / 2e-5)

        fields = fdm_solve(PROCESS, TI64, spacing=1e-3, t_end=0.5,
                           insulated=True, initial=bump)
        h = [enthalpy(f) for f in fields]
        assert all(abs(v - h[0]) <= 1e-10 * abs(h[0]) for v in h)
        # the field itself is not frozen
        assert np.max(np.abs(fields[-1].values - fields[0].values)) > 1.0

    def test_insulated_max_principle(self):
        def bump(x, y, z):
            return 300.0 + 100.0 * np.exp(-((x - 0.02) ** 2) / 1e-5)

        fields = fdm_solve(PROCESS, TI64, spacing=1e-3, t_end=0.5,
                           insulated=True, initial=bump)
        for f in fields:
            assert f.values.min() >= 300.0 - 1e-9
            assert f.values.max() <= 400.0 + 1e-9

    def test_insulated_approaches_uniform(self):
        def bump(x, y, z):
            return 300.0 + 100.0 * np.exp(-((x - 0.02) ** 2) / 1e-5)

        fields = fdm_solve(PROCESS, TI64, spacing=1e-3, t_end=3.0,
                           insulated=True, initial=bump)
        spreads = [np.ptp(f.values) for f in fields]
        assert all(b < a for a, b in zip(spreads, spreads[1:]))
        assert spreads[-1] < 0.6 * spreads[0]   # sqrt(4*alpha*t) ~ 6 mm


@pytest.fixture(scope="module")
def fields():
    return fdm_solve(PROCESS, TI64, spacing=1e-3, t_end=2.0)


class TestHeatedRun:
    def test_snapshot_grid(self, fields):
        times = [f.time for f in fields]
        assert times[0] == 0.0 and times[-1] == 2.0
        assert np.allclose(np.diff(times), 0.1)
        assert fields[0].shape == (41, 11, 7)

    def test_physical_ranges(self, fields):
        last = fields[-1]
        assert np.all(last.values >= 300.0 - 1e-9)
        assert last.values.max() > 1000.0         # melt-scale plume
        assert np.all(last.values[:, :, 0] == 300.0)  # clamped base

    def test_hot_spot_follows_beam(self, fields):
        for f in (fields[5], fields[15]):
            top = f.values[:, :, -1]
            i, j = np.unravel_index(np.argmax(top), top.shape)
            bx, by = PROCESS.laser_position(f.time)
            assert abs(i * f.spacing[0] - bx) <= 1.5e-3
            assert abs(j * f.spacing[1] - by) <= 1.5e-3

    def test_probe_peak_marks_beam_transit(self, fields):
        hist = probe(fields, (0.012, 0.005, 0.006))
        transit = (0.012 - PROCESS.scan_start[0]) / PROCESS.scan_speed
        assert abs(hist.peak_time() - transit) <= 0.3
        assert hist.temps.max() > 500.0

    def test_initial_array_equivalent_to_callable(self):
        a = fdm_solve(PROCESS, TI64, spacing=2e-3, t_end=0.2,
                      initial=lambda x, y, z: 300.0 + x * 1e3)
        n = a[0].shape
        grid = a[0].node_points()
        arr = (300.0 + grid[:, 0] * 1e3).reshape(n)
        b = fdm_solve(PROCESS, TI64, spacing=2e-3, t_end=0.2, initial=arr)
        assert np.array_equal(a[-1].values, b[-1].values)

    def test_divergence_detected(self):
        from dataclasses import replace
        torch = replace(PROCESS, laser_power=1e12)
        with pytest.raises(NonFinite):
            fdm_solve(torch, TI64, spacing=2e-3, t_end=0.5)


class TestFieldContainer:
    def _linear_field(self):
        proc = PROCESS
        nx, ny, nz = 5, 3, 4
        spacing = (1e-3, 2e-3, 0.5e-3)
        xs = spacing[0] * np.arange(nx)
        ys = spacing[1] * np.arange(ny)
        zs = spacing[2] * np.arange(nz)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        vals = 300.0 + 1000.0 * gx + 2000.0 * gy - 500.0 * gz
        return TemperatureField(vals, spacing, 1.0, tuple(TI64), proc)

    def test_node_points_match_ravel(self):
        f = self._linear_field()
        pts = f.node_points()
        recon = 300.0 + 1000.0 * pts[:, 0] + 2000.0 * pts[:, 1] - 500.0 * pts[:, 2]
        assert np.allclose(recon, f.values.ravel(), rtol=1e-12)
        assert np.all(pts[:, 3] == 1.0)

    def test_trilinear_probe_exact_on_linear_field(self):
        f = self._linear_field()
        hist = probe([f], (1.7e-3, 2.3e-3, 0.9e-3))
        expect = 300.0 + 1000.0 * 1.7e-3 + 2000.0 * 2.3e-3 - 500.0 * 0.9e-3
        assert hist.temps[0] == pytest.approx(expect, rel=1e-12)

    def test_probe_outside_domain(self):
        f = self._linear_field()
        with pytest.raises(OutOfDomain):
            probe([f], (1.0, 0.0, 0.0))

    def test_probe_predictor_needs_times(self):
        with pytest.raises(ValueError):
            probe(lambda pts: pts[:, 0], (0.0, 0.0, 0.0))
        hist = probe(lambda pts: 300.0 + pts[:, 3], (0.01, 0.005, 0.006),
                     times=[0.0, 1.0, 2.0])
        assert np.allclose(hist.temps, [300.0, 301.0, 302.0])

    def test_probe_history_validation(self):
        with pytest.raises(ValueError):
            ProbeHistory((0, 0, 0), np.array([0.0, 1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            ProbeHistory((0, 0, 0), np.array([0.0, 0.0]), np.array([1.0, 2.0]))
        h = ProbeHistory((0, 0, 0), np.array([0.0, 1.0, 2.0]),
                         np.array([5.0, 9.0, 7.0]))
        assert h.peak_time() == 1.0


class TestRelativeL2:
    def _const_fields(self, value=300.0, n=2):
        spacing = (1e-3, 1e-3, 1e-3)
        out = []
        for i in range(n):
            vals = np.full((4, 3, 2), value)
            out.append(TemperatureField(vals, spacing, 0.5 * i, tuple(TI64),
                                        PROCESS))
        return out

    def test_perfect_prediction(self):
        fields = self._const_fields()
        assert relative_l2(lambda p: np.full(len(p), 300.0), fields) == 0.0

    def test_one_kelvin_offset_on_300(self):
        fields = self._const_fields()
        err = relative_l2(lambda p: np.full(len(p), 301.0), fields)
        assert err == pytest.approx(100.0 / 300.0, rel=1e-12)

    def test_proportional_error(self):
        fields = self._const_fields()
        err = relative_l2(lambda p: np.full(len(p), 300.0 * 1.02), fields)
        assert err == pytest.approx(2.0, rel=1e-12)

    def test_joint_over_snapshots(self):
        fields = self._const_fields(n=2)

        def skewed(pts):
            # wrong on the t = 0 snapshot only
            return np.where(pts[:, 3] == 0.0, 306.0, 300.0)

        err = relative_l2(skewed, fields)
        assert err == pytest.approx(100.0 * np.sqrt(36.0 / 2.0) / 300.0,
                                    rel=1e-12)

    def test_empty_and_degenerate(self):
        with pytest.raises(EmptyReference):
            relative_l2(lambda p: p[:, 0], [])
        fields = self._const_fields(value=0.0, n=1)
        with pytest.raises(EmptyReference):
            relative_l2(lambda p: p[:, 0], fields)


class TestExports:
    def _field(self):
        vals = np.arange(24, dtype=np.float64).reshape(4, 3, 2) + 300.0
        return TemperatureField(vals, (1e-3, 1e-3, 1e-3), 0.5, tuple(TI64),
                                PROCESS)

    def test_field_csv(self, tmp_path):
        f = self._field()
        path = tmp_path / "field.csv"
        field_to_csv(f, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "x,y,z,T"
        assert len(lines) == 1 + 24
        first = [float(v) for v in lines[1].split(",")]
        assert first == [0.0, 0.0, 0.0, 300.0]

    def test_probe_csv(self, tmp_path):
        h = ProbeHistory((0, 0, 0), np.array([0.0, 0.5]), np.array([300.0, 310.0]))
        path = tmp_path / "probe.csv"
        probe_to_csv(h, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "t,T"
        assert [float(v) for v in lines[2].split(",")] == [0.5, 310.0]

    def test_vtk_structure(self, tmp_path):
        f = self._field()
        path = tmp_path / "field.vtk"
        field_to_vtk(f, path)
        text = path.read_text().split("\n")
        assert text[0].startswith("# vtk DataFile")
        assert "DIMENSIONS 4 3 2" in text
        assert "POINT_DATA 24" in text
        idx = text.index("LOOKUP_TABLE default")
        data = " ".join(text[idx + 1:]).split()
        assert len(data) == 24
        # x varies fastest in legacy structured points
        assert float(data[0]) == f.values[0, 0, 0]
        assert float(data[1]) == f.values[1, 0, 0]
        assert float(data[4]) == f.values[0, 1, 0]
