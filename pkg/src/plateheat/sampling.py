"""Collocation point construction, material draws, and mini-batch service.

The spatiotemporal domain is sampled on a fixed time grid; at every instant
the plate surfaces carry a baseline grid, the top face an additional moving
refinement patch centered on the beam, and the interior a three-tier grid
that is finest in the top millimeter.  Overlapping tiers are kept as-is (no
deduplication): the published point counts arise from plain concatenation of
the tier grids.

Initial-condition points are a uniform stride over the full t = 0 slice
(interior tiers, then bottom, +x, -x, +y, -y, top base, top patch, in that
order).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .physics import Category

FACE_ORDER = (Category.BOTTOM, Category.SIDE_X_PLUS, Category.SIDE_X_MINUS,
              Category.SIDE_Y_PLUS, Category.SIDE_Y_MINUS, Category.TOP)
FACE_CODES = {face: i + 1 for i, face in enumerate(FACE_ORDER)}
CATEGORY_CODES = {Category.INTERIOR: 0, **FACE_CODES, Category.INITIAL: 7}


class ProfileInfeasible(ValueError):
    """Raised when a profile cannot place any refinement point in the domain."""


@dataclass(frozen=True)
class SamplingProfile:
    """Grid spacings and time step of one sampling resolution."""

    name: str
    dt: float
    surface_spacing: float
    patch_spacing: float
    fine_spacing: float
    mid_spacing: float
    coarse_spacing: float
    patch_halfwidth: float = 3e-3
    fine_depth: float = 1e-3          # slab below the top face
    mid_z: tuple = (2e-3, 4e-3)
    coarse_z: tuple = (0.0, 4e-3)
    ic_stride: int = 10


PAPER_PROFILE = SamplingProfile("paper", dt=0.05, surface_spacing=1e-3,
                                patch_spacing=0.25e-3, fine_spacing=0.5e-3,
                                mid_spacing=1e-3, coarse_spacing=2e-3)
DESK_PROFILE = SamplingProfile("desk", dt=0.3, surface_spacing=2e-3,
                               patch_spacing=0.5e-3, fine_spacing=1e-3,
                               mid_spacing=2e-3, coarse_spacing=4e-3)


def get_profile(name):
    if name == "paper":
        return PAPER_PROFILE
    if name == "desk":
        return DESK_PROFILE
    raise ValueError(f"unknown profile {name!r}")


def _grid1d(lo, hi, h):
    """lo + k*h for k = 0.., including hi only when the span divides evenly."""
    n = int(np.floor((hi - lo) / h + 1e-9)) + 1
    pts = lo + h * np.arange(n)
    if abs(pts[-1] - hi) < 1e-12:
        pts[-1] = hi
    return pts


def _mesh(xs, ys, zs):
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


@dataclass
class CollocationSet:
    """Categorized sample points: interior (PDE), per-face boundary, and
    initial, each with the grid spacing every point came from (used for
    resampling jitter)."""

    interior: np.ndarray          # (n, 4) columns x, y, z, t
    interior_spacing: np.ndarray  # (n,)
    bc_points: np.ndarray         # (n, 4)
    bc_face: np.ndarray           # (n,) int8 codes per FACE_CODES
    bc_spacing: np.ndarray
    initial: np.ndarray           # (n, 4), t = 0
    initial_spacing: np.ndarray
    time_grid: np.ndarray
    profile: SamplingProfile
    patch_clipped: bool = False
    _pristine: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._pristine:
            self._pristine = {
                "interior": self.interior.copy(),
                "bc_points": self.bc_points.copy(),
                "bc_face": self.bc_face.copy(),
                "initial": self.initial.copy(),
            }

    @property
    def n_pde(self):
        return len(self.interior)

    @property
    def n_bc(self):
        return len(self.bc_points)

    @property
    def n_ic(self):
        return len(self.initial)

    @property
    def total(self):
        return self.n_pde + self.n_bc + self.n_ic

    def face_counts(self):
        return {face: int(np.count_nonzero(self.bc_face == code))
                for face, code in FACE_CODES.items()}


def build_collocation(process, profile="paper"):
    """Construct the full categorized point set for one profile."""
    prof = get_profile(profile) if isinstance(profile, str) else profile
    ex, ey, ez = process.extent
    times = _grid1d(0.0, process.t_end, prof.dt)

    hs = prof.surface_spacing
    xs_s, ys_s, zs_s = (_grid1d(0, ex, hs), _grid1d(0, ey, hs), _grid1d(0, ez, hs))
    bottom_xy = _mesh(xs_s, ys_s, np.array([0.0]))
    top_xy = _mesh(xs_s, ys_s, np.array([ez]))
    face_x = _mesh(np.array([0.0]), ys_s, zs_s)       # x = 0 and x = ex
    face_y = _mesh(xs_s, np.array([0.0]), zs_s)

    tiers = []
    hf = prof.fine_spacing
    tiers.append((hf, _mesh(_grid1d(0, ex, hf), _grid1d(0, ey, hf),
                            _grid1d(ez - prof.fine_depth, ez, hf))))
    hm = prof.mid_spacing
    tiers.append((hm, _mesh(_grid1d(0, ex, hm), _grid1d(0, ey, hm),
                            _grid1d(prof.mid_z[0], prof.mid_z[1], hm))))
    hc = prof.coarse_spacing
    tiers.append((hc, _mesh(_grid1d(0, ex, hc), _grid1d(0, ey, hc),
                            _grid1d(prof.coarse_z[0], prof.coarse_z[1], hc))))
    interior_xyz = np.vstack([pts for _, pts in tiers])
    interior_h = np.concatenate([np.full(len(pts), h) for h, pts in tiers])

    patch_clipped = False

    def top_patch(t):
        nonlocal patch_clipped
        cx = process.scan_start[0] + process.scan_speed * t
        cy = process.scan_start[1]
        w, hp = prof.patch_halfwidth, prof.patch_spacing
        n = int(np.floor(2 * w / hp + 1e-9)) + 1
        off = hp * np.arange(n) - w
        px, py = np.meshgrid(cx + off, cy + off, indexing="ij")
        pts = np.column_stack([px.ravel(), py.ravel(),
                               np.full(px.size, ez)])
        keep = ((pts[:, 0] >= -1e-12) & (pts[:, 0] <= ex + 1e-12)
                & (pts[:, 1] >= -1e-12) & (pts[:, 1] <= ey + 1e-12))
        if not np.all(keep):
            patch_clipped = True
            pts = pts[keep]
        if len(pts) == 0:
            raise ProfileInfeasible("refinement patch lies entirely outside the domain")
        return pts

    interior_rows, interior_hs = [], []
    bc_rows, bc_codes, bc_hs = [], [], []
    ic_slice_rows, ic_slice_hs = None, None

    for t in times:
        interior_rows.append(_with_t(interior_xyz, t))
        interior_hs.append(interior_h)
        patch = top_patch(t)
        faces = [
            (Category.BOTTOM, bottom_xy, hs),
            (Category.SIDE_X_PLUS, face_x + [ex, 0, 0], hs),
            (Category.SIDE_X_MINUS, face_x, hs),
            (Category.SIDE_Y_PLUS, face_y + [0, ey, 0], hs),
            (Category.SIDE_Y_MINUS, face_y, hs),
            (Category.TOP, top_xy, hs),
            (Category.TOP, patch, prof.patch_spacing),
        ]
        for face, xyz, h in faces:
            bc_rows.append(_with_t(xyz, t))
            bc_codes.append(np.full(len(xyz), FACE_CODES[face], dtype=np.int8))
            bc_hs.append(np.full(len(xyz), h))
        if t == 0.0:
            slice_rows = [interior_rows[-1]] + bc_rows[-7:]
            slice_hs = [interior_hs[-1]] + bc_hs[-7:]
            ic_slice_rows = np.vstack(slice_rows)
            ic_slice_hs = np.concatenate(slice_hs)

    initial = ic_slice_rows[::prof.ic_stride].copy()
    initial_h = ic_slice_hs[::prof.ic_stride].copy()

    return CollocationSet(
        interior=np.vstack(interior_rows),
        interior_spacing=np.concatenate(interior_hs),
        bc_points=np.vstack(bc_rows),
        bc_face=np.concatenate(bc_codes),
        bc_spacing=np.concatenate(bc_hs),
        initial=initial,
        initial_spacing=initial_h,
        time_grid=times,
        profile=prof,
        patch_clipped=patch_clipped,
    )


def _with_t(xyz, t):
    return np.column_stack([xyz, np.full(len(xyz), t)])


def resample_pools(colloc, rng, jitter_frac=0.25):
    """New set with fresh uniform jitter of +/- jitter_frac * spacing applied
    to the pristine grids, and category orderings reshuffled.  Boundary
    points move only within their face; everything stays inside the domain.
    Counts never change."""
    base = colloc._pristine
    prof = colloc.profile

    def jittered(points, spacing, axes, domain):
        out = points.copy()
        delta = rng.uniform(-jitter_frac, jitter_frac, size=(len(points), len(axes)))
        for j, axis in enumerate(axes):
            out[:, axis] = np.clip(points[:, axis] + delta[:, j] * spacing,
                                   0.0, domain[axis])
        return out

    ext = (*_extent_of(colloc), None)
    interior = jittered(base["interior"], colloc.interior_spacing, (0, 1, 2), ext)
    initial = jittered(base["initial"], colloc.initial_spacing, (0, 1, 2), ext)

    bc = base["bc_points"].copy()
    face_axes = {
        Category.BOTTOM: (0, 1), Category.TOP: (0, 1),
        Category.SIDE_X_PLUS: (1, 2), Category.SIDE_X_MINUS: (1, 2),
        Category.SIDE_Y_PLUS: (0, 2), Category.SIDE_Y_MINUS: (0, 2),
    }
    for face, code in FACE_CODES.items():
        rows = base["bc_face"] == code
        bc[rows] = jittered(base["bc_points"][rows], colloc.bc_spacing[rows],
                            face_axes[face], ext)

    p_int = rng.permutation(len(interior))
    p_bc = rng.permutation(len(bc))
    p_ic = rng.permutation(len(initial))
    return CollocationSet(
        interior=interior[p_int], interior_spacing=colloc.interior_spacing[p_int],
        bc_points=bc[p_bc], bc_face=base["bc_face"][p_bc],
        bc_spacing=colloc.bc_spacing[p_bc],
        initial=initial[p_ic], initial_spacing=colloc.initial_spacing[p_ic],
        time_grid=colloc.time_grid, profile=prof,
        patch_clipped=colloc.patch_clipped,
        _pristine=base,
    )


def _extent_of(colloc):
    # domain extents recovered from the pristine boundary grid
    base = colloc._pristine["bc_points"]
    return base[:, 0].max(), base[:, 1].max(), base[:, 2].max()


@dataclass(frozen=True)
class BatchSpec:
    """Mini-batch sizes per category.  Requests larger than a pool are
    served with the whole pool (shuffled)."""

    bc: int
    ic: int
    pde: int
    lam_policy: str = "per_point"

    def __post_init__(self):
        if self.lam_policy not in ("per_point", "fixed"):
            raise ValueError(f"unknown lambda policy {self.lam_policy!r}")


ADAM_BATCH = BatchSpec(bc=12000, ic=6000, pde=20000)
LBFGS_BATCH = BatchSpec(bc=8000, ic=4000, pde=12000)


@dataclass
class Batch:
    pde_points: np.ndarray
    pde_lam: np.ndarray
    bc_points: np.ndarray
    bc_face: np.ndarray
    bc_lam: np.ndarray
    ic_points: np.ndarray
    ic_lam: np.ndarray


def draw_batch(colloc, spec, rng, space, fixed_lam=None):
    """Uniform draws without replacement per category; every point is paired
    with a material vector drawn uniformly from the admissible box (or with
    the fixed per-run material when the policy says so)."""

    def pick(pool, count):
        idx = rng.permutation(len(pool))[:min(count, len(pool))]
        return idx

    def lam_for(n):
        if spec.lam_policy == "fixed":
            if fixed_lam is None:
                raise ValueError("fixed lambda policy requires a material")
            return np.broadcast_to(np.asarray(fixed_lam, dtype=np.float64),
                                   (n, 3)).copy()
        return space.sample(rng, n)

    i_pde = pick(colloc.interior, spec.pde)
    i_bc = pick(colloc.bc_points, spec.bc)
    i_ic = pick(colloc.initial, spec.ic)
    return Batch(
        pde_points=colloc.interior[i_pde], pde_lam=lam_for(len(i_pde)),
        bc_points=colloc.bc_points[i_bc], bc_face=colloc.bc_face[i_bc],
        bc_lam=lam_for(len(i_bc)),
        ic_points=colloc.initial[i_ic], ic_lam=lam_for(len(i_ic)),
    )


# ---- dump / load -----------------------------------------------------------

_MAGIC = "plateheat-collocation v1"


def dump_collocation(colloc, path):
    """Columnar binary: category codes (int8) then x, y, z, t (float64)."""
    cats = np.concatenate([
        np.zeros(colloc.n_pde, dtype=np.int8),
        colloc.bc_face.astype(np.int8),
        np.full(colloc.n_ic, CATEGORY_CODES[Category.INITIAL], dtype=np.int8),
    ])
    pts = np.vstack([colloc.interior, colloc.bc_points, colloc.initial])
    with open(path, "wb") as f:
        f.write(f"{_MAGIC} n={len(cats)}\n".encode("ascii"))
        f.write(cats.tobytes())
        for col in range(4):
            f.write(pts[:, col].astype("<f8").tobytes())


def load_collocation(path):
    """Returns (category codes, points (n, 4))."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if " ".join(header[:2]) != _MAGIC:
            raise ValueError("not a collocation dump")
        n = int(header[2].split("=")[1])
        cats = np.frombuffer(f.read(n), dtype=np.int8)
        cols = [np.frombuffer(f.read(8 * n), dtype="<f8") for _ in range(4)]
    return cats, np.column_stack(cols)
