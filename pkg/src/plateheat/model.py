"""Network architectures, input normalization, and output scaling.

Three architectures are provided:

* ``npinn``      4 -> 60 x4 -> 1, coordinates only, one material per run.
* ``ppinn``      7 -> 60 x4 -> 1, material properties appended to the input.
* ``decoupled``  separate coordinate and material encoders (4 -> 30 x3 and
  3 -> 30 x3, tanh after every weight layer) fused by concatenation into a
  60 -> 50 -> 50 -> 1 head.  An optional feature-wise modulation fusion is
  available behind the ``fusion="film"`` switch; it is not the default and
  has a different parameter count.

The raw network output is mapped to kelvin by one of five scaling modes; the
default multiplies a softplus-positive output by the material-dependent peak
temperature rise kappa * eta*P/(2 pi k r) and offsets by the far-field
temperature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (CH_VAL, CH_DT, CH_DX, CH_DY, CH_DZ, CH_DXX, CH_DYY,
                       CH_DZZ)
from .physics import DegenerateScale, MaterialSpace, rosenthal_tmax

ARCHITECTURES = ("npinn", "ppinn", "decoupled")
SCALING_MODES = ("raw", "softplus_only", "fixed_tmax", "learned_tmax",
                 "physics_guided")

_DERIV_CHANNELS = (CH_DT, CH_DX, CH_DY, CH_DZ, CH_DXX, CH_DYY, CH_DZZ)
_AUX_POSITIVITY_FLOOR = 1e-6  # keeps a learned scale strictly positive


@dataclass(frozen=True)
class ScalingConfig:
    mode: str = "physics_guided"
    kappa: float = 1.5
    epsilon: float = 1e-3
    clip_ceiling: float = 1e6      # K
    fixed_tmax: float = 3000.0     # K, used by mode="fixed_tmax"

    def __post_init__(self):
        if self.mode not in SCALING_MODES:
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        if not self.kappa >= 1.0:
            raise ValueError("kappa must be >= 1")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class Normalizer:
    """Affine map of raw coordinates/properties onto [-1, 1] per axis."""

    extent: tuple
    t_end: float
    lam_lower: tuple
    lam_upper: tuple

    @classmethod
    def for_problem(cls, process, space=None):
        space = space if space is not None else MaterialSpace()
        return cls(tuple(process.extent), process.t_end,
                   tuple(space.lower), tuple(space.upper))

    def coords_forward(self, points):
        """points (n, 4) columns (x, y, z, t) -> normalized (n, 4)."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty_like(pts)
        for i in range(3):
            out[:, i] = 2.0 * pts[:, i] / self.extent[i] - 1.0
        out[:, 3] = 2.0 * pts[:, 3] / self.t_end - 1.0
        return out

    def coords_inverse(self, normalized):
        arr = np.asarray(normalized, dtype=np.float64)
        out = np.empty_like(arr)
        for i in range(3):
            out[:, i] = (arr[:, i] + 1.0) * 0.5 * self.extent[i]
        out[:, 3] = (arr[:, 3] + 1.0) * 0.5 * self.t_end
        return out

    def coord_scales(self):
        """d(normalized)/d(physical) per axis, order (t, x, y, z)."""
        return np.array([2.0 / self.t_end, 2.0 / self.extent[0],
                         2.0 / self.extent[1], 2.0 / self.extent[2]])

    def lam_forward(self, lam):
        lo = np.asarray(self.lam_lower)
        hi = np.asarray(self.lam_upper)
        return 2.0 * (np.asarray(lam, dtype=np.float64) - lo) / (hi - lo) - 1.0

    def lam_inverse(self, normalized):
        lo = np.asarray(self.lam_lower)
        hi = np.asarray(self.lam_upper)
        return (np.asarray(normalized, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo

    def input_jet(self, points):
        """Jet array for coordinate inputs: values are normalized (x, y, z, t)
        and the first-derivative channels carry the normalization chain-rule
        constants with respect to physical (t, x, y, z)."""
        pts = np.asarray(points, dtype=np.float64)
        n = pts.shape[0]
        scales = self.coord_scales()
        d_first = np.zeros((n, 4, 4))
        d_first[:, 0, 3] = scales[0]   # d t_norm / d t
        d_first[:, 1, 0] = scales[1]   # d x_norm / d x
        d_first[:, 2, 1] = scales[2]
        d_first[:, 3, 2] = scales[3]
        return ad.make_jet(self.coords_forward(pts), d_first, None)

    def lam_jet(self, lam):
        """Jet array for material inputs: spatiotemporal derivative channels
        are identically zero."""
        return ad.make_jet(self.lam_forward(lam), None, None)


def _layer_sizes(arch, fusion="concat"):
    if arch == "npinn":
        return {"net": [4, 60, 60, 60, 60, 1]}
    if arch == "ppinn":
        return {"net": [7, 60, 60, 60, 60, 1]}
    if arch == "decoupled":
        if fusion == "concat":
            return {"st": [4, 30, 30, 30], "mat": [3, 30, 30, 30],
                    "fuse": [60, 50, 50, 1]}
        if fusion == "film":
            return {"st": [4, 30, 30, 30], "mat": [3, 30, 30, 60],
                    "fuse": [30, 50, 50, 1]}
        raise ValueError(f"unknown fusion {fusion!r}")
    raise ValueError(f"unknown architecture {arch!r}")


_AUX_SIZES = [3, 20, 1]


class NetworkParams:
    """All learnable weights and biases of one architecture, flattened-
    addressable in a fixed key order for the optimizer."""

    def __init__(self, arch, params, key_order, fusion="concat",
                 has_scale_aux=False):
        self.arch = arch
        self.fusion = fusion
        self.has_scale_aux = has_scale_aux
        self.params = params
        self.key_order = list(key_order)

    @property
    def n_params(self):
        return sum(self.params[k].size for k in self.key_order)

    def flatten(self):
        return ad.flatten_params(self.params, self.key_order)

    def with_flat(self, flat):
        return NetworkParams(self.arch,
                             ad.unflatten_params(flat, self.params, self.key_order),
                             self.key_order, self.fusion, self.has_scale_aux)

    def copy(self):
        return NetworkParams(self.arch,
                             {k: v.copy() for k, v in self.params.items()},
                             self.key_order, self.fusion, self.has_scale_aux)

    def grads_flat(self, grads):
        return ad.grads_to_flat(grads, self.params, self.key_order)


def init_params(arch, seed, fusion="concat", with_scale_aux=False):
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
    deterministic per seed."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    params = {}
    order = []
    blocks = _layer_sizes(arch, fusion)
    if with_scale_aux:
        blocks = dict(blocks, aux=list(_AUX_SIZES))
    for block, sizes in blocks.items():
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{block}.W{i}"] = rng.uniform(-bound, bound, (fan_out, fan_in))
            params[f"{block}.b{i}"] = np.zeros(fan_out)
            order += [f"{block}.W{i}", f"{block}.b{i}"]
    return NetworkParams(arch, params, order, fusion, with_scale_aux)


def _tape_block(tape, ref, block, n_layers, tanh_last):
    for i in range(n_layers):
        ref = tape.affine(ref, f"{block}.W{i}", f"{block}.b{i}")
        if i < n_layers - 1 or tanh_last:
            ref = tape.tanh(ref)
    return ref


def _tape_vblock(tape, ref, block, n_layers, tanh_last):
    """Same stack as _tape_block over a value-only branch.  Material inputs
    carry no spatiotemporal dependence, so every derivative channel of the
    branch is identically zero and only values need to propagate."""
    for i in range(n_layers):
        ref = tape.vaffine(ref, f"{block}.W{i}", f"{block}.b{i}")
        if i < n_layers - 1 or tanh_last:
            ref = tape.vtanh(ref)
    return ref


def build_raw_output(tape, net, coord_jet, lam_jet=None):
    """Record the architecture's forward pass on the tape; returns the raw
    width-1 output jet ref and, when the learned scale is enabled, the
    auxiliary network's per-point scalar output ref."""
    x = tape.jet_input(coord_jet)
    lam_vals = None

    def material_values():
        nonlocal lam_vals
        if lam_vals is None:
            lam_vals = tape.const(np.ascontiguousarray(lam_jet[:, CH_VAL, :]))
        return lam_vals

    if net.arch == "npinn":
        out = _tape_block(tape, x, "net", 5, tanh_last=False)
    elif net.arch == "ppinn":
        if lam_jet is None:
            raise ValueError("ppinn requires material inputs")
        out = _tape_block(tape, tape.concat(x, tape.jet_input(lam_jet)),
                          "net", 5, tanh_last=False)
    elif net.arch == "decoupled":
        if lam_jet is None:
            raise ValueError("decoupled requires material inputs")
        st = _tape_block(tape, x, "st", 3, tanh_last=True)
        if net.fusion == "concat":
            mat = _tape_vblock(tape, material_values(), "mat", 3, tanh_last=True)
            fused = tape.mixjet(st, mat)
        else:
            # feature-wise modulation: fused = (1 + gamma) * st + zeta
            mod = _tape_block(tape, tape.jet_input(lam_jet), "mat", 3,
                              tanh_last=False)
            gamma = tape.jet_addc(tape.jet_slice(mod, 0, 30), 1.0)
            zeta = tape.jet_slice(mod, 30, 60)
            fused = tape.jet_add(tape.jet_mul(st, gamma), zeta)
        out = _tape_block(tape, fused, "fuse", 3, tanh_last=False)
    else:
        raise ValueError(net.arch)
    aux = None
    if net.has_scale_aux:
        if lam_jet is None:
            raise ValueError("the learned scale requires material inputs")
        aux = tape.vcol(_tape_vblock(tape, material_values(), "aux", 2,
                                     tanh_last=False))
    return out, aux


def forward_jets(net, coord_jet, lam_jet=None):
    """Raw output jet (n, 8, 1) and, when present, the auxiliary scale
    network's raw values (n,), without keeping the tape."""
    tape = ad.Tape(net.params)
    out, aux = build_raw_output(tape, net, coord_jet, lam_jet)
    return out.value, (None if aux is None else aux.value)


# ---- output scaling --------------------------------------------------------

def scale_factor(lam, cfg, process):
    """Material-dependent multiplier S applied to Softplus(raw) + epsilon.
    Returns a scalar or a per-point array; learned mode is handled by the
    caller because its scale is itself a network output."""
    if cfg.mode == "softplus_only":
        return 1.0
    if cfg.mode == "fixed_tmax":
        s = float(cfg.fixed_tmax)
    elif cfg.mode == "physics_guided":
        lam = np.asarray(lam, dtype=np.float64)
        s = cfg.kappa * rosenthal_tmax(lam, process)
    else:
        raise ValueError(f"no static scale for mode {cfg.mode!r}")
    if np.any(~np.isfinite(np.asarray(s))) or np.any(np.asarray(s) <= 0.0):
        raise DegenerateScale(f"scale must be finite and positive, got {s}")
    return s


_CHANNEL_NAMES = {"T": CH_VAL, "Tt": CH_DT, "Tx": CH_DX, "Ty": CH_DY,
                  "Tz": CH_DZ, "Txx": CH_DXX, "Tyy": CH_DYY, "Tzz": CH_DZZ}
_FIRST = ("Tt", "Tx", "Ty", "Tz")
_SECOND_OF = {"Txx": "Tx", "Tyy": "Ty", "Tzz": "Tz"}


def tape_scaled_channels(tape, raw_ref, aux_ref, lam, cfg, process):
    """Physical-unit temperature channels on the tape.

    T = T_inf + S * (Softplus(u) + eps); derivative channels follow by the
    chain rule; everything is then clipped at the ceiling with zero
    derivative beyond it.  Raw mode passes the network output through
    untouched.
    """
    u = {name: tape.channel(raw_ref, ch) for name, ch in _CHANNEL_NAMES.items()}
    if cfg.mode == "raw":
        return u
    if cfg.mode == "learned_tmax":
        if aux_ref is None:
            raise ValueError("learned scale requires the auxiliary network")
        s = tape.softplus(aux_ref) + _AUX_POSITIVITY_FLOOR
    else:
        s = scale_factor(lam, cfg, process)
    sig = tape.sigmoid(u["T"])
    sigp = sig - sig * sig
    T = (tape.softplus(u["T"]) + cfg.epsilon) * s + process.t_infinity
    out = {name: sig * u[name] * s for name in _FIRST}
    for name, first in _SECOND_OF.items():
        out[name] = (sigp * u[first] * u[first] + sig * u[name]) * s
    companions = [out[name] for name in ("Tt", "Tx", "Ty", "Tz", "Txx", "Tyy", "Tzz")]
    clipped, masked = tape.clip_above(T, cfg.clip_ceiling, companions)
    result = {"T": clipped}
    for name, ref in zip(("Tt", "Tx", "Ty", "Tz", "Txx", "Tyy", "Tzz"), masked):
        result[name] = ref
    return result


def scale_jet_values(raw_jet, lam, cfg, process, aux_values=None):
    """Numeric counterpart of tape_scaled_channels for a width-1 raw jet."""
    u = {name: raw_jet[:, ch, 0] for name, ch in _CHANNEL_NAMES.items()}
    if cfg.mode == "raw":
        return u
    if cfg.mode == "learned_tmax":
        if aux_values is None:
            raise ValueError("learned scale requires the auxiliary network")
        s = np.logaddexp(0.0, np.asarray(aux_values)) + _AUX_POSITIVITY_FLOOR
    else:
        s = scale_factor(lam, cfg, process)
    # mirrors the tape arithmetic op for op so both paths agree bitwise
    uval = u["T"]
    sig = ad._sigmoid(uval)
    sigp = sig - sig * sig
    T = (np.logaddexp(0.0, uval) + cfg.epsilon) * s + process.t_infinity
    out = {name: sig * u[name] * s for name in _FIRST}
    for name, first in _SECOND_OF.items():
        out[name] = (sigp * u[first] * u[first] + sig * u[name]) * s
    keep = T <= cfg.clip_ceiling
    result = {"T": np.where(keep, T, cfg.clip_ceiling)}
    for name in ("Tt", "Tx", "Ty", "Tz", "Txx", "Tyy", "Tzz"):
        result[name] = np.where(keep, out[name], 0.0)
    return result


# ---- fast value-only prediction ---------------------------------------------

def _value_block(params, block, x, n_layers, tanh_last):
    h = x
    for i in range(n_layers):
        h = h @ params[f"{block}.W{i}"].T + params[f"{block}.b{i}"]
        if i < n_layers - 1 or tanh_last:
            h = np.tanh(h)
    return h


def raw_values(net, coords_norm, lam_norm=None):
    """Raw network output values (n,) without derivative propagation."""
    p = net.params
    if net.arch == "npinn":
        return _value_block(p, "net", coords_norm, 5, False)[:, 0]
    if net.arch == "ppinn":
        return _value_block(p, "net",
                            np.concatenate([coords_norm, lam_norm], axis=1),
                            5, False)[:, 0]
    st = _value_block(p, "st", coords_norm, 3, True)
    if net.fusion == "concat":
        mat = _value_block(p, "mat", lam_norm, 3, True)
        fused = np.concatenate([st, mat], axis=1)
    else:
        mod = _value_block(p, "mat", lam_norm, 3, False)
        fused = (1.0 + mod[:, :30]) * st + mod[:, 30:]
    return _value_block(p, "fuse", fused, 3, False)[:, 0]


def predict_temperatures(net, points, lam, cfg, process, normalizer,
                         chunk=65536):
    """Temperatures in kelvin at physical points (n, 4) columns (x, y, z, t)
    for material rows lam (n, 3) or a single (3,) triple."""
    pts = np.asarray(points, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = np.broadcast_to(lam, (pts.shape[0], 3))
    out = np.empty(pts.shape[0])
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        cn = normalizer.coords_forward(pts[lo:hi])
        ln = normalizer.lam_forward(lam[lo:hi])
        u = raw_values(net, cn, None if net.arch == "npinn" else ln)
        if cfg.mode == "raw":
            out[lo:hi] = u
            continue
        if cfg.mode == "learned_tmax":
            s_raw = _value_block(net.params, "aux", ln, 2, False)[:, 0]
            s = np.logaddexp(0.0, s_raw) + _AUX_POSITIVITY_FLOOR
        else:
            s = scale_factor(lam[lo:hi], cfg, process)
        T = process.t_infinity + s * (np.logaddexp(0.0, u) + cfg.epsilon)
        out[lo:hi] = np.minimum(T, cfg.clip_ceiling)
    return out


# ---- checkpoints -------------------------------------------------------------

_MAGIC = "plateheat-params v1"


def save_params(net, path):
    """Checkpoint: one ASCII descriptor line, then the flat parameter vector
    as little-endian float64 in key order."""
    header = (f"{_MAGIC} arch={net.arch} fusion={net.fusion} "
              f"aux={int(net.has_scale_aux)} n={net.n_params}\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(net.flatten().astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        blob = f.read()
    fields = header.split()
    if " ".join(fields[:2]) != _MAGIC:
        raise ValueError(f"not a parameter checkpoint: {header!r}")
    meta = dict(part.split("=", 1) for part in fields[2:])
    net = init_params(meta["arch"], seed=0, fusion=meta.get("fusion", "concat"),
                      with_scale_aux=bool(int(meta.get("aux", "0"))))
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if flat.size != int(meta["n"]) or flat.size != net.n_params:
        raise ValueError("checkpoint length does not match architecture")
    return net.with_flat(flat)
