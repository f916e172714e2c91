"""Problem physics: governing equation, boundary operators, laser model,
peak-temperature estimate, and the material property space.

All quantities are SI (meters, seconds, kelvin, watts).  The residual
builders are generic: they accept either plain numpy arrays or tape
references, so the same formulas serve direct evaluation and gradient
training.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np

STEFAN_BOLTZMANN = 5.670374419e-8  # W/(m^2 K^4)


class DegenerateScale(ValueError):
    """Raised when a temperature scale is non-positive or non-finite."""


class BadCategory(ValueError):
    """Raised when a residual operator receives a sample of the wrong kind."""


class Category(str, Enum):
    INTERIOR = "interior"
    TOP = "top"
    SIDE_X_PLUS = "side_x_plus"
    SIDE_X_MINUS = "side_x_minus"
    SIDE_Y_PLUS = "side_y_plus"
    SIDE_Y_MINUS = "side_y_minus"
    BOTTOM = "bottom"
    INITIAL = "initial"


BOUNDARY_CATEGORIES = (
    Category.TOP, Category.SIDE_X_PLUS, Category.SIDE_X_MINUS,
    Category.SIDE_Y_PLUS, Category.SIDE_Y_MINUS, Category.BOTTOM,
)

# outward unit normal per flux face: (axis, sign); axis 0=x, 1=y, 2=z
_FACE_NORMALS = {
    Category.TOP: (2, 1.0),
    Category.SIDE_X_PLUS: (0, 1.0),
    Category.SIDE_X_MINUS: (0, -1.0),
    Category.SIDE_Y_PLUS: (1, 1.0),
    Category.SIDE_Y_MINUS: (1, -1.0),
}


@dataclass(frozen=True)
class MaterialProps:
    """One alloy's density, specific heat, and conductivity."""

    rho: float   # kg/m^3
    cp: float    # J/(kg K)
    k: float     # W/(m K)

    def __post_init__(self):
        for name in ("rho", "cp", "k"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v}")

    @property
    def alpha(self):
        """Thermal diffusivity k/(rho*cp) in m^2/s."""
        return self.k / (self.rho * self.cp)

    def as_array(self):
        return np.array([self.rho, self.cp, self.k])


@dataclass(frozen=True)
class MaterialSpace:
    """Closed box of admissible (rho, cp, k) triples."""

    rho_bounds: tuple = (3000.0, 10000.0)
    cp_bounds: tuple = (300.0, 1000.0)
    k_bounds: tuple = (3.0, 50.0)

    def __post_init__(self):
        for lo, hi in (self.rho_bounds, self.cp_bounds, self.k_bounds):
            if not lo < hi:
                raise ValueError("lower bound must be below upper bound")

    @property
    def lower(self):
        return np.array([self.rho_bounds[0], self.cp_bounds[0], self.k_bounds[0]])

    @property
    def upper(self):
        return np.array([self.rho_bounds[1], self.cp_bounds[1], self.k_bounds[1]])

    def contains(self, lam):
        arr = lam.as_array() if isinstance(lam, MaterialProps) else np.asarray(lam)
        return bool(np.all(arr >= self.lower) and np.all(arr <= self.upper))

    def sample(self, rng, n):
        """Uniform draws from the box, shape (n, 3)."""
        return rng.uniform(self.lower, self.upper, size=(n, 3))


@dataclass(frozen=True)
class ProcessConfig:
    """Process constants: domain, laser, ambient exchange."""

    extent: tuple = (0.040, 0.010, 0.006)     # m
    laser_power: float = 500.0                # W
    absorptivity: float = 0.4
    beam_radius: float = 1.5e-3               # m
    scan_speed: float = 0.010                 # m/s, along +x
    scan_start: tuple = (0.005, 0.005, 0.006)  # m
    t_end: float = 3.0                        # s
    t_ambient: float = 300.0                  # K, initial temperature T0
    t_infinity: float = 300.0                 # K, far-field temperature
    h_conv: float = 50.0                      # W/(m^2 K)
    emissivity: float = 0.3
    sigma_sb: float = STEFAN_BOLTZMANN

    def __post_init__(self):
        if self.t_ambient != self.t_infinity:
            # convection/radiation reference a single ambient temperature
            raise ValueError("t_ambient and t_infinity must agree")
        x_final = self.scan_start[0] + self.scan_speed * self.t_end
        inside = (0.0 <= self.scan_start[0] and x_final <= self.extent[0]
                  and 0.0 <= self.scan_start[1] <= self.extent[1]
                  and abs(self.scan_start[2] - self.extent[2]) < 1e-12)
        if not inside:
            raise ValueError("laser path must stay on the top face for t in [0, t_end]")

    def laser_position(self, t):
        """Beam center (x, y) at time t: scan_start + (v, 0, 0) * t."""
        x = self.scan_start[0] + self.scan_speed * np.asarray(t, dtype=np.float64)
        return x, self.scan_start[1]


def laser_flux(x, y, t, process):
    """Gaussian surface heat flux on the top face, W/m^2.

    q = 2*eta*P/(pi r^2) * exp(-2 * ((x-xl)^2 + (y-yl)^2) / r^2)
    with the beam center moving along +x at the scan speed.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    xl = process.scan_start[0] + process.scan_speed * t
    yl = process.scan_start[1]
    r2 = process.beam_radius ** 2
    peak = 2.0 * process.absorptivity * process.laser_power / (math.pi * r2)
    d2 = (x - xl) ** 2 + (y - yl) ** 2
    return peak * np.exp(-2.0 * d2 / r2)


def rosenthal_tmax(lam, process):
    """Peak temperature rise eta*P/(2 pi k r_laser) from the moving point
    source solution evaluated at one beam radius."""
    k = lam.k if isinstance(lam, MaterialProps) else np.asarray(lam)[..., 2]
    if np.any(~np.isfinite(np.asarray(k))) or np.any(np.asarray(k) <= 0):
        raise DegenerateScale(f"conductivity must be positive, got {k}")
    return process.absorptivity * process.laser_power / (
        2.0 * math.pi * k * process.beam_radius)


def rosenthal_profile(xi, lam, process, radius=None):
    """Quasi-steady thermal history of the moving point source.

    T = T0 + eta*P/(2 pi k r) * exp(-v (r + xi) / (2 alpha)), where xi = x - v t
    is the position relative to the source and r defaults to the beam radius.
    Diagnostic only; the bounded exponential yields the peak estimate above.
    """
    r = process.beam_radius if radius is None else radius
    if np.any(np.asarray(r) <= 0):
        raise DegenerateScale("radius must be positive")
    rise = process.absorptivity * process.laser_power / (2.0 * math.pi * lam.k * r)
    return process.t_ambient + rise * np.exp(
        -process.scan_speed * (r + np.asarray(xi)) / (2.0 * lam.alpha))


def diffusivity(lam):
    """alpha = k / (rho cp), m^2/s."""
    if isinstance(lam, MaterialProps):
        return lam.alpha
    arr = np.asarray(lam, dtype=np.float64)
    return arr[..., 2] / (arr[..., 0] * arr[..., 1])


# ---- residual operators --------------------------------------------------
#
# Channels is a mapping with keys "T", "Tt", "Tx", "Ty", "Tz", "Txx", "Tyy",
# "Tzz"; entries are either (n,) arrays or tape refs.  Material arrays are
# per-point (n,) constants.

def pde_residual(channels, rho, cp, k):
    """rho*cp*dT/dt - k*(Txx + Tyy + Tzz), W/m^3.  Conductivity is constant
    in space, so the divergence reduces to the Laplacian."""
    lap = channels["Txx"] + channels["Tyy"] + channels["Tzz"]
    return channels["Tt"] * (rho * cp) - lap * k


def bc_residual(category, channels, process, k, q_laser=None):
    """Flux-face or Dirichlet boundary residual.

    Flux faces balance conduction against the surface exchange: the absorbed
    laser flux heats the body while convection and radiation cool it,
      q_laser - h (T - T0) - sigma e (T^4 - T0^4) - k grad(T) . n = 0,
    with q_laser present only on the top face.  The bottom face is Dirichlet:
    residual T - T0 in kelvin.
    """
    if category == Category.BOTTOM:
        return channels["T"] - process.t_ambient
    if category not in _FACE_NORMALS:
        raise BadCategory(f"not a boundary category: {category}")
    axis, sign = _FACE_NORMALS[category]
    grad_n = channels[("Tx", "Ty", "Tz")[axis]] * sign
    t0 = process.t_ambient
    T = channels["T"]
    t2 = T * T
    radiation = (t2 * t2 - t0 ** 4) * (process.sigma_sb * process.emissivity)
    convection = (T - t0) * process.h_conv
    r = -convection - radiation - grad_n * k
    if category == Category.TOP:
        if q_laser is None:
            raise ValueError("top-face residual requires the laser flux")
        r = r + q_laser
    elif q_laser is not None:
        raise BadCategory("laser flux applies to the top face only")
    return r


def ic_residual(channels, process):
    """T - T0 at t = 0, kelvin."""
    return channels["T"] - process.t_ambient


# ---- material library ------------------------------------------------------

def _canonical(name):
    return re.sub(r"[^a-z0-9]", "", name.lower())


def load_material_library():
    """Named alloys shipped with the package: {canonical name: (display
    name, MaterialProps)}."""
    text = resources.files("plateheat").joinpath("data/materials.txt").read_text()
    library = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, rho, cp, k = line.split()
        library[_canonical(name)] = (name, MaterialProps(float(rho), float(cp), float(k)))
    return library


def resolve_material(name, library=None):
    """Look up an alloy by name, ignoring case and punctuation."""
    library = library if library is not None else load_material_library()
    key = _canonical(name)
    if key not in library:
        known = ", ".join(display for display, _ in library.values())
        raise KeyError(f"unknown material {name!r}; known: {known}")
    return library[key][1]
