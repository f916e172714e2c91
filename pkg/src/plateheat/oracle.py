"""Finite-difference ground truth, analytic regression cases, and metrics.

The reference solver is explicit Euler on a uniform grid: second-order
central stencil inside, ghost nodes embedding the laser / convection /
radiation flux balance on the exchange faces, and a fixed ambient Dirichlet
bottom.  Radiation is evaluated at the current temperature (no
linearization); this stays stable because the auto-selected step obeys the
conductive bound, which is far stricter at these temperatures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .physics import MaterialProps, diffusivity, laser_flux


class UnstableStep(RuntimeError):
    """User-forced time step above the explicit stability bound."""


class NonFinite(RuntimeError):
    """Field diverged or left the physically admissible range."""


class EmptyReference(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


MAX_STEP_DT = 1e4  # kelvin per step; beyond this the run is diverging


@dataclass
class TemperatureField:
    """One snapshot on a regular node grid covering the plate exactly."""

    values: np.ndarray        # (nx, ny, nz) kelvin
    spacing: tuple            # (dx, dy, dz) m
    time: float               # s
    lam: tuple                # (rho, cp, k) provenance
    process: object

    @property
    def shape(self):
        return self.values.shape

    def axes(self):
        nx, ny, nz = self.values.shape
        dx, dy, dz = self.spacing
        return (dx * np.arange(nx), dy * np.arange(ny), dz * np.arange(nz))

    def node_points(self):
        """(n, 4) rows of (x, y, z, t) in C order matching values.ravel()."""
        xs, ys, zs = self.axes()
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        t = np.full(gx.size, self.time)
        return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel(), t])


@dataclass
class ProbeHistory:
    location: tuple           # (x, y, z) m
    times: np.ndarray
    temps: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.temps):
            raise ValueError("times and temps disagree in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("probe times must be strictly increasing")

    def peak_time(self):
        return float(self.times[int(np.argmax(self.temps))])


def _lam_tuple(lam):
    if isinstance(lam, MaterialProps):
        return (lam.rho, lam.cp, lam.k)
    arr = np.asarray(lam, dtype=np.float64).reshape(3)
    return (float(arr[0]), float(arr[1]), float(arr[2]))


def stability_bound(lam, spacing):
    """Largest explicit-Euler step: 1 / (2 alpha (dx^-2 + dy^-2 + dz^-2))."""
    rho, cp, k = _lam_tuple(lam)
    alpha = k / (rho * cp)
    dx, dy, dz = spacing if np.ndim(spacing) else (spacing,) * 3
    return 1.0 / (2.0 * alpha * (dx ** -2 + dy ** -2 + dz ** -2))


def _node_count(extent, spacing):
    n = extent / spacing
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"spacing {spacing} does not divide extent {extent}")
    return int(round(n)) + 1


def fdm_solve(process, lam, spacing=5e-4, t_end=None, snapshot_every=0.1,
              dt=None, safety=0.9, insulated=False, initial=None):
    """Explicit march of the plate problem; returns snapshots (t = 0 first).

    The step is auto-selected as safety x stability bound, then shrunk so an
    integer number of steps lands exactly on each snapshot.  A user-forced
    dt above the bound raises UnstableStep.  insulated=True replaces every
    surface exchange (laser included) with a zero-flux condition and lifts
    the bottom Dirichlet, for conservation checks.
    """
    rho, cp, k = _lam_tuple(lam)
    alpha = k / (rho * cp)
    dx, dy, dz = spacing if np.ndim(spacing) else (spacing,) * 3
    t_end = process.t_end if t_end is None else float(t_end)
    ex, ey, ez = process.extent
    nx, ny, nz = (_node_count(ex, dx), _node_count(ey, dy), _node_count(ez, dz))
    t0 = process.t_ambient

    bound = stability_bound(lam, (dx, dy, dz))
    if dt is not None and dt > bound:
        raise UnstableStep(f"dt {dt:g} exceeds the stability bound {bound:g}")
    base_dt = dt if dt is not None else safety * bound

    if initial is None:
        T = np.full((nx, ny, nz), t0, dtype=np.float64)
    elif callable(initial):
        field0 = TemperatureField(np.empty((nx, ny, nz)), (dx, dy, dz), 0.0,
                                  (rho, cp, k), process)
        pts = field0.node_points()
        T = np.asarray(initial(pts[:, 0], pts[:, 1], pts[:, 2]),
                       dtype=np.float64).reshape(nx, ny, nz).copy()
    else:
        T = np.array(initial, dtype=np.float64).reshape(nx, ny, nz)

    snap_times = np.arange(0.0, t_end + 1e-12, snapshot_every)
    if abs(snap_times[-1] - t_end) > 1e-9:
        snap_times = np.append(snap_times, t_end)
    sb = process.sigma_sb * process.emissivity
    h = process.h_conv
    inv2 = (dx ** -2, dy ** -2, dz ** -2)
    floor = min(t0, process.t_infinity) - 1e-6

    def snapshot(t):
        if not np.all(np.isfinite(T)):
            raise NonFinite(f"field non-finite at t = {t:g}")
        if T.min() < floor:
            raise NonFinite(f"field dipped below ambient at t = {t:g}")
        return TemperatureField(T.copy(), (dx, dy, dz), float(t),
                                (rho, cp, k), process)

    xs = dx * np.arange(nx)
    ys = dy * np.arange(ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    def exchange(face_T):
        return -h * (face_T - t0) - sb * (face_T ** 4 - t0 ** 4)

    out = [snapshot(0.0)]
    ghost = np.empty((nx + 2, ny + 2, nz + 2))
    for i_snap in range(1, len(snap_times)):
        t_lo, t_hi = snap_times[i_snap - 1], snap_times[i_snap]
        n_sub = max(1, int(np.ceil((t_hi - t_lo) / base_dt - 1e-12)))
        step = (t_hi - t_lo) / n_sub
        for i_sub in range(n_sub):
            t = t_lo + i_sub * step
            g = ghost
            g[1:-1, 1:-1, 1:-1] = T
            if insulated:
                g[0, 1:-1, 1:-1] = T[1]
                g[-1, 1:-1, 1:-1] = T[-2]
                g[1:-1, 0, 1:-1] = T[:, 1]
                g[1:-1, -1, 1:-1] = T[:, -2]
                g[1:-1, 1:-1, 0] = T[:, :, 1]
                g[1:-1, 1:-1, -1] = T[:, :, -2]
            else:
                g[0, 1:-1, 1:-1] = T[1] + (2 * dx / k) * exchange(T[0])
                g[-1, 1:-1, 1:-1] = T[-2] + (2 * dx / k) * exchange(T[-1])
                g[1:-1, 0, 1:-1] = T[:, 1] + (2 * dy / k) * exchange(T[:, 0])
                g[1:-1, -1, 1:-1] = T[:, -2] + (2 * dy / k) * exchange(T[:, -1])
                g[1:-1, 1:-1, 0] = T[:, :, 1]          # Dirichlet plane below
                q_top = laser_flux(gx, gy, t, process) + exchange(T[:, :, -1])
                g[1:-1, 1:-1, -1] = T[:, :, -2] + (2 * dz / k) * q_top
            lap = ((g[2:, 1:-1, 1:-1] - 2 * T + g[:-2, 1:-1, 1:-1]) * inv2[0]
                   + (g[1:-1, 2:, 1:-1] - 2 * T + g[1:-1, :-2, 1:-1]) * inv2[1]
                   + (g[1:-1, 1:-1, 2:] - 2 * T + g[1:-1, 1:-1, :-2]) * inv2[2])
            delta = (step * alpha) * lap
            peak = np.max(np.abs(delta))
            if not np.isfinite(peak) or peak > MAX_STEP_DT:
                raise NonFinite(f"per-step change {peak:g} K at t = {t:g}")
            T = T + delta
            if not insulated:
                T[:, :, 0] = t0
        out.append(snapshot(t_hi))
    return out


def slab1d_solve(length, alpha, spacing, t_end, initial, dt=None, safety=0.9):
    """Explicit 1-D rod with both ends held at their initial values.

    initial is a callable x -> T.  Returns (x nodes, final temperatures).
    """
    n = _node_count(length, spacing)
    x = spacing * np.arange(n)
    bound = spacing ** 2 / (2.0 * alpha)
    if dt is not None and dt > bound:
        raise UnstableStep(f"dt {dt:g} exceeds the stability bound {bound:g}")
    base_dt = dt if dt is not None else safety * bound
    n_steps = max(1, int(np.ceil(t_end / base_dt - 1e-12)))
    step = t_end / n_steps
    T = np.asarray(initial(x), dtype=np.float64).copy()
    left, right = T[0], T[-1]
    c = step * alpha / spacing ** 2
    for _ in range(n_steps):
        T[1:-1] = T[1:-1] + c * (T[2:] - 2 * T[1:-1] + T[:-2])
        T[0], T[-1] = left, right
    return x, T


def enthalpy(field, lam=None):
    """rho C_p sum(T dV), joules.  Boundary nodes own half control volumes
    (trapezoidal weights), the discretely conserved quantity of the
    mirror-ghost scheme."""
    rho, cp, _ = _lam_tuple(lam if lam is not None else field.lam)
    dV = field.spacing[0] * field.spacing[1] * field.spacing[2]

    def w(n):
        out = np.ones(n)
        out[0] = out[-1] = 0.5
        return out

    nx, ny, nz = field.values.shape
    weights = w(nx)[:, None, None] * w(ny)[None, :, None] * w(nz)[None, None, :]
    return rho * cp * float((weights * field.values).sum()) * dV


# ---- metrics ----------------------------------------------------------------

def relative_l2(predictor, fields):
    """100 * ||T_hat - T||_2 / ||T||_2 jointly over every node of every
    snapshot.  predictor maps (n, 4) points to (n,) temperatures."""
    if not fields:
        raise EmptyReference("no reference snapshots")
    num = den = 0.0
    for field in fields:
        ref = field.values.ravel()
        pred = np.asarray(predictor(field.node_points()), dtype=np.float64)
        num += float(np.sum((pred - ref) ** 2))
        den += float(np.sum(ref ** 2))
    if den == 0.0:
        raise EmptyReference("reference field is identically zero")
    return 100.0 * np.sqrt(num / den)


def _trilinear(field, loc):
    x, y, z = loc
    vals = field.values
    out_idx = []
    weights = []
    for coord, d, n in zip((x, y, z), field.spacing, vals.shape):
        if coord < -1e-12 or coord > d * (n - 1) + 1e-12:
            raise OutOfDomain(f"probe {loc} outside the plate")
        f = np.clip(coord / d, 0.0, n - 1)
        i0 = min(int(np.floor(f)), n - 2)
        out_idx.append(i0)
        weights.append(f - i0)
    (i, j, kk), (wx, wy, wz) = out_idx, weights
    c = vals[i:i + 2, j:j + 2, kk:kk + 2]
    cx = c[0] * (1 - wx) + c[1] * wx
    cy = cx[0] * (1 - wy) + cx[1] * wy
    return float(cy[0] * (1 - wz) + cy[1] * wz)


def probe(source, location, times=None):
    """Thermal history at one point: trilinear over snapshots when source is
    a field sequence, direct evaluation when it is a predictor callable (in
    which case times must be given)."""
    loc = tuple(float(v) for v in location)
    if callable(source):
        if times is None:
            raise ValueError("a predictor probe needs explicit times")
        times = np.asarray(times, dtype=np.float64)
        pts = np.column_stack([np.full(times.size, loc[0]),
                               np.full(times.size, loc[1]),
                               np.full(times.size, loc[2]), times])
        return ProbeHistory(loc, times, np.asarray(source(pts)))
    fields = list(source)
    if not fields:
        raise EmptyReference("no snapshots to probe")
    ts = np.array([f.time for f in fields])
    temps = np.array([_trilinear(f, loc) for f in fields])
    return ProbeHistory(loc, ts, temps)


# ---- analytic regression cases ----------------------------------------------

def analytic_suite(process=None):
    """Closed-form problems for solver validation.  Each entry is
    (name, runner) with runner(spacing) -> max abs error in kelvin."""
    from .physics import ProcessConfig

    proc = process if process is not None else ProcessConfig()
    alpha = 2.7e-6     # mid-range diffusivity, m^2/s
    length = 0.04
    amp = 100.0
    t0 = proc.t_ambient

    def eigenmode(spacing, t_end=1.0):
        x, T = slab1d_solve(length, alpha, spacing, t_end,
                            lambda xv: t0 + amp * np.sin(np.pi * xv / length))
        exact = t0 + amp * np.exp(-alpha * np.pi ** 2 * t_end / length ** 2) \
            * np.sin(np.pi * x / length)
        return float(np.max(np.abs(T - exact)))

    def equilibrium(spacing, t_end=3.0):
        from dataclasses import replace
        cold = replace(proc, laser_power=0.0)
        fields = fdm_solve(cold, (4430.0, 560.0, 6.7), spacing, t_end)
        return float(max(np.max(np.abs(f.values - t0)) for f in fields))

    return [("slab_eigenmode", eigenmode), ("uniform_equilibrium", equilibrium)]


# ---- exports ----------------------------------------------------------------

def field_to_csv(field, path):
    pts = field.node_points()
    data = np.column_stack([pts[:, :3], field.values.ravel()])
    np.savetxt(path, data, delimiter=",", header="x,y,z,T", comments="",
               fmt="%.9g")


def probe_to_csv(history, path):
    data = np.column_stack([history.times, history.temps])
    np.savetxt(path, data, delimiter=",", header="t,T", comments="",
               fmt="%.9g")


def field_to_vtk(field, path):
    """Legacy ASCII structured-points file (x varies fastest)."""
    nx, ny, nz = field.values.shape
    dx, dy, dz = field.spacing
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"temperature t={field.time:g}\n")
        f.write("ASCII\nDATASET STRUCTURED_POINTS\n")
        f.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        f.write("ORIGIN 0 0 0\n")
        f.write(f"SPACING {dx:g} {dy:g} {dz:g}\n")
        f.write(f"POINT_DATA {nx * ny * nz}\n")
        f.write("SCALARS temperature double 1\nLOOKUP_TABLE default\n")
        flat = field.values.transpose(2, 1, 0).ravel()
        for lo in range(0, flat.size, 9):
            f.write(" ".join(f"{v:.9g}" for v in flat[lo:lo + 9]) + "\n")
