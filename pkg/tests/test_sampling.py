"""Collocation construction, pool resampling, batching, dump format."""
import numpy as np
import pytest

from plateheat.physics import Category, MaterialSpace, ProcessConfig
from plateheat.sampling import (ADAM_BATCH, LBFGS_BATCH, CATEGORY_CODES,
                                FACE_CODES, BatchSpec, build_collocation,
                                draw_batch, dump_collocation, get_profile,
                                load_collocation, resample_pools)

PROCESS = ProcessConfig()


@pytest.fixture(scope="module")
def paper_colloc():
    return build_collocation(PROCESS, "paper")


@pytest.fixture(scope="module")
def desk_colloc():
    return build_collocation(PROCESS, "desk")


class TestPaperCounts:
    def test_category_totals(self, paper_colloc):
        c = paper_colloc
        assert c.n_pde == 416_874
        assert c.n_bc == 137_555
        assert c.n_ic == 909
        assert c.total == 555_338

    def test_face_counts(self, paper_colloc):
        counts = paper_colloc.face_counts()
        assert counts[Category.BOTTOM] == 27_511
        assert counts[Category.SIDE_X_PLUS] == 4_697
        assert counts[Category.SIDE_X_MINUS] == 4_697
        assert counts[Category.SIDE_Y_PLUS] == 17_507
        assert counts[Category.SIDE_Y_MINUS] == 17_507
        assert counts[Category.TOP] == 65_636

    def test_time_grid(self, paper_colloc):
        tg = paper_colloc.time_grid
        assert len(tg) == 61
        assert tg[0] == 0.0 and tg[-1] == PROCESS.t_end
        assert np.allclose(np.diff(tg), 0.05)

    def test_not_clipped(self, paper_colloc):
        assert not paper_colloc.patch_clipped


class TestDeskCounts:
    def test_smaller_but_same_shape(self, desk_colloc, paper_colloc):
        c = desk_colloc
        assert c.n_pde == 13_420
        assert c.n_bc == 7_007
        assert c.n_ic == 186
        assert len(c.time_grid) == 11
        assert c.total < paper_colloc.total / 20

    def test_membership(self, desk_colloc):
        ex, ey, ez = PROCESS.extent
        for pts in (desk_colloc.interior, desk_colloc.bc_points,
                    desk_colloc.initial):
            assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= ex)
            assert np.all(pts[:, 1] >= 0) and np.all(pts[:, 1] <= ey)
            assert np.all(pts[:, 2] >= 0) and np.all(pts[:, 2] <= ez)
            assert np.all(pts[:, 3] >= 0) and np.all(pts[:, 3] <= PROCESS.t_end)

    def test_faces_lie_on_their_planes(self, desk_colloc):
        c = desk_colloc
        ex, ey, ez = PROCESS.extent
        plane = {Category.BOTTOM: (2, 0.0), Category.TOP: (2, ez),
                 Category.SIDE_X_PLUS: (0, ex), Category.SIDE_X_MINUS: (0, 0.0),
                 Category.SIDE_Y_PLUS: (1, ey), Category.SIDE_Y_MINUS: (1, 0.0)}
        for face, code in FACE_CODES.items():
            axis, value = plane[face]
            pts = c.bc_points[c.bc_face == code]
            assert len(pts) > 0
            assert np.all(pts[:, axis] == value)

    def test_initial_slice(self, desk_colloc):
        c = desk_colloc
        assert np.all(c.initial[:, 3] == 0.0)
        per_instant = (c.n_pde + c.n_bc) // len(c.time_grid)
        assert c.n_ic == -(-per_instant // c.profile.ic_stride)


class TestMovingPatch:
    def _patch_xy(self, colloc, t):
        """Refinement points: top-face rows at finer-than-surface spacing."""
        c = colloc
        rows = ((c.bc_face == FACE_CODES[Category.TOP])
                & (c.bc_spacing < c.profile.surface_spacing)
                & (c.bc_points[:, 3] == t))
        return c.bc_points[rows][:, :2]

    def test_patch_tracks_beam(self, desk_colloc):
        for t in (0.0, 1.5, 3.0):
            xy = self._patch_xy(desk_colloc, t)
            cx, cy = PROCESS.laser_position(t)
            w = desk_colloc.profile.patch_halfwidth
            assert len(xy) > 0
            assert np.all(np.abs(xy[:, 0] - cx) <= w + 1e-12)
            assert np.all(np.abs(xy[:, 1] - cy) <= w + 1e-12)
            mid = xy.mean(axis=0)
            assert mid[0] == pytest.approx(cx, abs=1e-9)
            assert mid[1] == pytest.approx(cy, abs=1e-9)

    def test_clipping_flag(self):
        proc = ProcessConfig(scan_start=(1e-3, 5e-3, 6e-3))
        colloc = build_collocation(proc, "desk")
        assert colloc.patch_clipped
        xy = self._patch_xy(colloc, 0.0)
        assert np.all(xy[:, 0] >= 0.0)
        assert len(xy) < len(self._patch_xy(colloc, 3.0))


class TestResample:
    def test_counts_and_planes_preserved(self, desk_colloc):
        rng = np.random.default_rng(11)
        fresh = resample_pools(desk_colloc, rng)
        assert fresh.n_pde == desk_colloc.n_pde
        assert fresh.n_bc == desk_colloc.n_bc
        assert fresh.n_ic == desk_colloc.n_ic
        ex, ey, ez = PROCESS.extent
        plane = {Category.BOTTOM: (2, 0.0), Category.TOP: (2, ez),
                 Category.SIDE_X_PLUS: (0, ex), Category.SIDE_X_MINUS: (0, 0.0),
                 Category.SIDE_Y_PLUS: (1, ey), Category.SIDE_Y_MINUS: (1, 0.0)}
        for face, code in FACE_CODES.items():
            axis, value = plane[face]
            pts = fresh.bc_points[fresh.bc_face == code]
            assert np.all(pts[:, axis] == value)
            assert len(pts) == np.count_nonzero(desk_colloc.bc_face == code)

    def test_times_and_domain_preserved(self, desk_colloc):
        rng = np.random.default_rng(12)
        fresh = resample_pools(desk_colloc, rng)
        assert np.array_equal(np.sort(fresh.interior[:, 3]),
                              np.sort(desk_colloc.interior[:, 3]))
        assert np.all(fresh.initial[:, 3] == 0.0)
        ex, ey, ez = PROCESS.extent
        for pts in (fresh.interior, fresh.bc_points, fresh.initial):
            assert pts[:, 0].min() >= 0 and pts[:, 0].max() <= ex
            assert pts[:, 1].min() >= 0 and pts[:, 1].max() <= ey
            assert pts[:, 2].min() >= 0 and pts[:, 2].max() <= ez

    def test_jitter_is_bounded_and_from_pristine(self, desk_colloc):
        """Twice-resampled interior points stay within the jitter radius of
        the pristine grid (jitter never compounds across rounds)."""
        rng = np.random.default_rng(13)
        twice = resample_pools(resample_pools(desk_colloc, rng), rng)
        t0 = desk_colloc._pristine["interior"][:, 3] == 0.0
        base = desk_colloc._pristine["interior"][t0][:, :3]
        rows = twice.interior[:, 3] == 0.0
        pts = twice.interior[rows][:, :3]
        h = twice.interior_spacing[rows]
        d2 = ((pts[:, None, :] - base[None, :, :]) ** 2).sum(axis=2)
        nearest = np.sqrt(d2.min(axis=1))
        assert np.all(nearest <= 0.25 * np.sqrt(3.0) * h + 1e-12)
        assert nearest.max() > 0.0

    def test_deterministic_per_seed(self, desk_colloc):
        a = resample_pools(desk_colloc, np.random.default_rng(5))
        b = resample_pools(desk_colloc, np.random.default_rng(5))
        assert np.array_equal(a.interior, b.interior)
        assert np.array_equal(a.bc_points, b.bc_points)
        assert np.array_equal(a.bc_face, b.bc_face)
        assert np.array_equal(a.initial, b.initial)


class TestBatches:
    def test_default_specs(self):
        assert (ADAM_BATCH.bc, ADAM_BATCH.ic, ADAM_BATCH.pde) == (12000, 6000, 20000)
        assert (LBFGS_BATCH.bc, LBFGS_BATCH.ic, LBFGS_BATCH.pde) == (8000, 4000, 12000)

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            BatchSpec(bc=1, ic=1, pde=1, lam_policy="alternating")

    def test_sizes_capped_by_pool(self, desk_colloc):
        rng = np.random.default_rng(0)
        spec = BatchSpec(bc=100, ic=6000, pde=200)
        b = draw_batch(desk_colloc, spec, rng, MaterialSpace())
        assert len(b.bc_points) == 100
        assert len(b.pde_points) == 200
        assert len(b.ic_points) == desk_colloc.n_ic  # whole pool

    def test_rows_come_from_pools(self, desk_colloc):
        rng = np.random.default_rng(1)
        b = draw_batch(desk_colloc, BatchSpec(bc=50, ic=20, pde=80), rng,
                       MaterialSpace())
        pool = {p.tobytes() for p in desk_colloc.interior}
        assert all(p.tobytes() in pool for p in b.pde_points)
        pool = {p.tobytes() for p in desk_colloc.initial}
        assert all(p.tobytes() in pool for p in b.ic_points)

    def test_face_codes_ride_along(self, desk_colloc):
        rng = np.random.default_rng(2)
        b = draw_batch(desk_colloc, BatchSpec(bc=500, ic=10, pde=10), rng,
                       MaterialSpace())
        # edge points legitimately appear on two faces, so membership is
        # checked on (point, code) pairs
        pool = {(p.tobytes(), int(c))
                for p, c in zip(desk_colloc.bc_points, desk_colloc.bc_face)}
        assert all((p.tobytes(), int(c)) in pool
                   for p, c in zip(b.bc_points, b.bc_face))

    def test_material_draws_in_box(self, desk_colloc):
        space = MaterialSpace()
        rng = np.random.default_rng(3)
        b = draw_batch(desk_colloc, BatchSpec(bc=200, ic=50, pde=300), rng, space)
        for lam in (b.pde_lam, b.bc_lam, b.ic_lam):
            assert lam.shape[1] == 3
            assert np.all(lam >= space.lower) and np.all(lam <= space.upper)
        # distinct draws per point, not one shared vector
        assert len(np.unique(b.pde_lam[:, 0])) > 100

    def test_fixed_material_policy(self, desk_colloc):
        rng = np.random.default_rng(4)
        spec = BatchSpec(bc=20, ic=5, pde=30, lam_policy="fixed")
        lam = np.array([4430.0, 560.0, 6.7])
        b = draw_batch(desk_colloc, spec, rng, MaterialSpace(), fixed_lam=lam)
        assert np.all(b.pde_lam == lam) and np.all(b.bc_lam == lam)
        with pytest.raises(ValueError):
            draw_batch(desk_colloc, spec, rng, MaterialSpace())

    def test_deterministic_per_seed(self, desk_colloc):
        spec = BatchSpec(bc=64, ic=16, pde=128)
        a = draw_batch(desk_colloc, spec, np.random.default_rng(9), MaterialSpace())
        b = draw_batch(desk_colloc, spec, np.random.default_rng(9), MaterialSpace())
        assert np.array_equal(a.pde_points, b.pde_points)
        assert np.array_equal(a.pde_lam, b.pde_lam)
        assert np.array_equal(a.bc_points, b.bc_points)


class TestDumpFormat:
    def test_round_trip(self, desk_colloc, tmp_path):
        path = tmp_path / "points.bin"
        dump_collocation(desk_colloc, path)
        cats, pts = load_collocation(path)
        c = desk_colloc
        assert len(cats) == c.total
        assert np.array_equal(pts[:c.n_pde], c.interior)
        assert np.array_equal(pts[c.n_pde:c.n_pde + c.n_bc], c.bc_points)
        assert np.array_equal(pts[c.n_pde + c.n_bc:], c.initial)
        assert np.all(cats[:c.n_pde] == CATEGORY_CODES[Category.INTERIOR])
        assert np.array_equal(cats[c.n_pde:c.n_pde + c.n_bc], c.bc_face)
        assert np.all(cats[c.n_pde + c.n_bc:] == CATEGORY_CODES[Category.INITIAL])

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"something else entirely\n" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_collocation(path)

    def test_category_codes_are_stable(self):
        assert CATEGORY_CODES[Category.INTERIOR] == 0
        assert CATEGORY_CODES[Category.INITIAL] == 7
        assert sorted(FACE_CODES.values()) == [1, 2, 3, 4, 5, 6]


class TestProfiles:
    def test_lookup(self):
        assert get_profile("paper").dt == 0.05
        assert get_profile("desk").dt == 0.3
        with pytest.raises(ValueError):
            get_profile("huge")

    def test_desk_coarsens_every_spacing(self):
        p, d = get_profile("paper"), get_profile("desk")
        assert d.surface_spacing > p.surface_spacing
        assert d.patch_spacing > p.patch_spacing
        assert d.fine_spacing > p.fine_spacing
        assert d.dt > p.dt
