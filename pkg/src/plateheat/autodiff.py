"""Derivative engine for residual training.

Each network quantity is carried as a "jet": an array of shape (n, 8, width)
holding, per sample point and per neuron, the value plus its first derivative
in time, first derivatives in x/y/z, and pure second derivatives in x/y/z.
Derivatives are taken with respect to physical coordinates; the chain-rule
constants of the input normalization are baked into the input jet, so no
rescaling is needed downstream.  Mixed second derivatives are never required
(only the Laplacian appears in the heat equation) and are not stored.

Jets propagate forward through layers analytically.  Parameter gradients of a
scalar loss come from one reverse sweep over a tape of elementary operations
recorded during the forward build.
"""
from __future__ import annotations

import numpy as np

# Channel layout of a jet array (n, 8, width).
NCH = 8
CH_VAL = 0
CH_DT = 1
CH_DX = 2
CH_DY = 3
CH_DZ = 4
CH_DXX = 5
CH_DYY = 6
CH_DZZ = 7
_D_ALL = slice(1, 5)    # first derivatives (t, x, y, z)
_D_SPATIAL = slice(2, 5)
_K_ALL = slice(5, 8)    # pure second derivatives (x, y, z)


class NonFiniteLoss(RuntimeError):
    """Raised when an assembled loss evaluates to NaN or infinity."""


def pairwise_sum(values):
    """Sum by recursive adjacent pairing.

    The fixed reduction tree makes batch reductions reproducible and makes
    the mean of a batch with each element duplicated in place bit-identical
    to the mean of the original batch.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        return 0.0
    while x.size > 1:
        m = x.size // 2
        paired = x[0:2 * m:2] + x[1:2 * m:2]
        if x.size % 2:
            paired = np.concatenate([paired, x[-1:]])
        x = paired
    return float(x[0])


def pairwise_mean(values):
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("mean of empty batch")
    return pairwise_sum(x) / x.size


def make_jet(values, d_first=None, d_second=None):
    """Assemble a jet array from a value matrix (n, width) and optional
    derivative channel blocks (n, 4, width) and (n, 3, width)."""
    v = np.asarray(values, dtype=np.float64)
    n, width = v.shape
    jet = np.zeros((n, NCH, width))
    jet[:, CH_VAL, :] = v
    if d_first is not None:
        jet[:, _D_ALL, :] = d_first
    if d_second is not None:
        jet[:, _K_ALL, :] = d_second
    return jet


def affine_jet(jet, weight, bias):
    """Affine layer on a jet: every channel maps through the weight matrix,
    the bias shifts only the value channel."""
    n = jet.shape[0]
    out = (jet.reshape(n * NCH, -1) @ weight.T).reshape(n, NCH, weight.shape[0])
    out[:, CH_VAL, :] += bias
    return out


def tanh_jet(jet):
    """tanh activation with exact propagation of first and pure second
    derivatives: a = tanh(v), a' = (1-a^2) v', a'' = (1-a^2) v'' - 2a(1-a^2) v'^2."""
    h = np.tanh(jet[:, CH_VAL, :])
    t1 = 1.0 - h * h
    out = np.empty_like(jet)
    out[:, CH_VAL, :] = h
    np.multiply(jet[:, _D_ALL, :], t1[:, None, :], out=out[:, _D_ALL, :])
    k = out[:, _K_ALL, :]
    d = jet[:, _D_SPATIAL, :]
    np.multiply(d, d, out=k)
    k *= (-2.0 * h * t1)[:, None, :]
    k += t1[:, None, :] * jet[:, _K_ALL, :]
    return out


def concat_jet(jet_a, jet_b):
    return np.concatenate([jet_a, jet_b], axis=2)


def mul_jet(jet_a, jet_b):
    """Elementwise jet product with the full product rule:
    (fg)' = f'g + fg', (fg)'' = f''g + 2f'g' + fg''."""
    out = np.empty_like(jet_a)
    va = jet_a[:, CH_VAL, :][:, None, :]
    vb = jet_b[:, CH_VAL, :][:, None, :]
    out[:, CH_VAL, :] = jet_a[:, CH_VAL, :] * jet_b[:, CH_VAL, :]
    out[:, _D_ALL, :] = jet_a[:, _D_ALL, :] * vb + va * jet_b[:, _D_ALL, :]
    out[:, _K_ALL, :] = (jet_a[:, _K_ALL, :] * vb + va * jet_b[:, _K_ALL, :]
                         + 2.0 * jet_a[:, _D_SPATIAL, :] * jet_b[:, _D_SPATIAL, :])
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


class Ref:
    """Handle to a tape node.  Arithmetic operators record new nodes, so
    residual formulas read like plain math over values and derivatives."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    def __add__(self, other):
        return self.tape._binary("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape._binary("sub", self, other)

    def __rsub__(self, other):
        return self.tape._binary("rsub", self, other)

    def __mul__(self, other):
        return self.tape._binary("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.axpb(self, -1.0, 0.0)


class _Node:
    __slots__ = ("kind", "parents", "value", "aux")

    def __init__(self, kind, parents, value, aux=None):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.aux = aux


class Tape:
    """Ordered record of elementary operations over jets and per-point
    scalars.  The forward pass happens while nodes are recorded; `backward`
    performs one reverse sweep in anti-topological (reverse recording) order
    and accumulates gradients with respect to named parameters.
    """

    def __init__(self, params):
        # params maps name -> ndarray; affine nodes reference entries by name.
        self.params = params
        self.nodes = []

    def _push(self, kind, parents, value, aux=None):
        self.nodes.append(_Node(kind, parents, value, aux))
        return Ref(self, len(self.nodes) - 1)

    # ---- jet ops -------------------------------------------------------

    def jet_input(self, jet):
        return self._push("leaf", (), np.asarray(jet, dtype=np.float64))

    def affine(self, x, w_name, b_name):
        out = affine_jet(x.value, self.params[w_name], self.params[b_name])
        return self._push("affine", (x.idx,), out, (w_name, b_name))

    def tanh(self, x):
        return self._push("tanh", (x.idx,), tanh_jet(x.value))

    def concat(self, a, b):
        split = a.value.shape[2]
        return self._push("concat", (a.idx, b.idx), concat_jet(a.value, b.value), split)

    def jet_mul(self, a, b):
        return self._push("jet_mul", (a.idx, b.idx), mul_jet(a.value, b.value))

    def jet_add(self, a, b):
        return self._push("jet_add", (a.idx, b.idx), a.value + b.value)

    def jet_addc(self, a, c):
        out = a.value.copy()
        out[:, CH_VAL, :] += c
        return self._push("jet_addc", (a.idx,), out, c)

    def jet_slice(self, x, start, stop):
        """Contiguous width slice of a jet."""
        return self._push("jet_slice", (x.idx,), x.value[:, :, start:stop].copy(),
                          (start, stop))

    def channel(self, x, ch):
        """Extract one channel of a width-1 jet as a per-point scalar array."""
        if x.value.shape[2] != 1:
            raise ValueError("channel extraction requires a width-1 jet")
        return self._push("channel", (x.idx,), x.value[:, ch, 0].copy(), ch)

    # ---- value-only ops --------------------------------------------------
    # For network branches whose inputs carry no spatiotemporal dependence
    # the derivative channels are identically zero, so only the value matrix
    # (n, width) needs to be propagated.

    def vaffine(self, x, w_name, b_name):
        out = x.value @ self.params[w_name].T + self.params[b_name]
        return self._push("vaffine", (x.idx,), out, (w_name, b_name))

    def vtanh(self, x):
        return self._push("vtanh", (x.idx,), np.tanh(x.value))

    def mixjet(self, jet, vals):
        """Concatenate a full jet with a value-only branch along width; the
        appended columns get zero derivative channels."""
        jv, vv = jet.value, vals.value
        out = np.zeros((jv.shape[0], NCH, jv.shape[2] + vv.shape[1]))
        out[:, :, :jv.shape[2]] = jv
        out[:, CH_VAL, jv.shape[2]:] = vv
        return self._push("mixjet", (jet.idx, vals.idx), out, jv.shape[2])

    def vcol(self, x, col=0):
        """One column of a value matrix as a per-point scalar array."""
        return self._push("vcol", (x.idx,), x.value[:, col].copy(), col)

    # ---- per-point scalar ops ------------------------------------------

    def const(self, values):
        return self._push("const", (), np.asarray(values, dtype=np.float64))

    def _binary(self, op, a, other):
        if isinstance(other, Ref):
            if other.tape is not self:
                raise ValueError("operands belong to different tapes")
            if op == "add":
                return self._push("add", (a.idx, other.idx), a.value + other.value)
            if op == "sub":
                return self._push("sub", (a.idx, other.idx), a.value - other.value)
            if op == "rsub":
                return self._push("sub", (other.idx, a.idx), other.value - a.value)
            if op == "mul":
                return self._push("mul", (a.idx, other.idx), a.value * other.value)
            raise ValueError(op)
        c = np.asarray(other, dtype=np.float64)
        if op == "add":
            return self.axpb(a, 1.0, c)
        if op == "sub":
            return self.axpb(a, 1.0, -c)
        if op == "rsub":
            return self.axpb(a, -1.0, c)
        if op == "mul":
            return self.axpb(a, c, 0.0)
        raise ValueError(op)

    def axpb(self, x, a, b):
        """a*x + b with constant a, b (scalars or per-point arrays)."""
        return self._push("axpb", (x.idx,), a * x.value + b, (a, b))

    def softplus(self, x):
        return self._push("softplus", (x.idx,), _softplus(x.value))

    def sigmoid(self, x):
        return self._push("sigmoid", (x.idx,), _sigmoid(x.value))

    def clip_above(self, x, ceiling, companions=()):
        """Clip x at a ceiling with zero derivative beyond it.  Returns the
        clipped node plus companion nodes (derivative channels of the same
        field) masked to zero wherever x exceeded the ceiling."""
        mask = x.value <= ceiling
        clipped = self._push("mask", (x.idx,), np.where(mask, x.value, ceiling),
                             (mask, ceiling))
        masked = tuple(self._push("mask", (c.idx,), np.where(mask, c.value, 0.0),
                                  (mask, 0.0))
                       for c in companions)
        return clipped, masked

    def square(self, x):
        return x * x

    def mean(self, x):
        return self._push("mean", (x.idx,), pairwise_mean(x.value), x.value.size)

    def wsum(self, terms):
        """Weighted sum of scalar nodes: terms is a list of (ref, weight)."""
        total = 0.0
        for ref, w in terms:
            total += w * ref.value
        return self._push("wsum", tuple(r.idx for r, _ in terms), total,
                          tuple(w for _, w in terms))

    # ---- reverse sweep --------------------------------------------------

    def backward(self, loss):
        """Accumulate d(loss)/d(param) for every parameter touched by affine
        nodes.  Returns a dict name -> gradient array."""
        if not np.isfinite(loss.value):
            raise NonFiniteLoss(f"loss is {loss.value!r}")
        grads = {}
        adj = [None] * len(self.nodes)
        # borrow flags: an adjoint holding a borrowed buffer (someone else's
        # view or shared array) must never be mutated in place
        owned = bytearray(len(self.nodes))
        adj[loss.idx] = np.float64(1.0)
        for idx in range(loss.idx, -1, -1):
            a = adj[idx]
            if a is None:
                continue
            node = self.nodes[idx]
            kind = node.kind
            if kind in ("leaf", "const"):
                pass
            elif kind == "affine":
                self._backward_affine(node, a, adj, owned, grads)
            elif kind == "tanh":
                self._backward_tanh(node, a, adj, owned)
            elif kind == "concat":
                split = node.aux
                self._acc(adj, owned, node.parents[0], a[:, :, :split])
                self._acc(adj, owned, node.parents[1], a[:, :, split:])
            elif kind == "jet_mul":
                self._backward_jet_mul(node, a, adj, owned)
            elif kind == "vaffine":
                w_name, b_name = node.aux
                x = self.nodes[node.parents[0]].value
                self._add_grad(grads, w_name, a.T @ x)
                self._add_grad(grads, b_name, a.sum(axis=0))
                self._acc(adj, owned, node.parents[0], a @ self.params[w_name])
            elif kind == "vtanh":
                h = node.value
                self._acc(adj, owned, node.parents[0], a * (1.0 - h * h))
            elif kind == "mixjet":
                w1 = node.aux
                self._acc(adj, owned, node.parents[0], a[:, :, :w1])
                self._acc(adj, owned, node.parents[1], a[:, CH_VAL, w1:])
            elif kind == "vcol":
                parent = self.nodes[node.parents[0]]
                buf = np.zeros_like(parent.value)
                buf[:, node.aux] = a
                self._acc(adj, owned, node.parents[0], buf)
            elif kind == "jet_add":
                self._acc(adj, owned, node.parents[0], a)
                self._acc(adj, owned, node.parents[1], a)
            elif kind == "jet_addc":
                self._acc(adj, owned, node.parents[0], a)
            elif kind == "jet_slice":
                parent = self.nodes[node.parents[0]]
                buf = np.zeros_like(parent.value)
                buf[:, :, node.aux[0]:node.aux[1]] = a
                self._acc(adj, owned, node.parents[0], buf)
            elif kind == "channel":
                parent = self.nodes[node.parents[0]]
                buf = np.zeros_like(parent.value)
                buf[:, node.aux, 0] = a
                self._acc(adj, owned, node.parents[0], buf)
            elif kind == "add":
                self._acc(adj, owned, node.parents[0], a)
                self._acc(adj, owned, node.parents[1], a)
            elif kind == "sub":
                self._acc(adj, owned, node.parents[0], a)
                self._acc(adj, owned, node.parents[1], -a)
            elif kind == "mul":
                pa, pb = node.parents
                self._acc(adj, owned, pa, a * self.nodes[pb].value)
                self._acc(adj, owned, pb, a * self.nodes[pa].value)
            elif kind == "axpb":
                self._acc(adj, owned, node.parents[0], a * node.aux[0])
            elif kind == "softplus":
                self._acc(adj, owned, node.parents[0],
                          a * _sigmoid(self.nodes[node.parents[0]].value))
            elif kind == "sigmoid":
                s = node.value
                self._acc(adj, owned, node.parents[0], a * s * (1.0 - s))
            elif kind == "mask":
                self._acc(adj, owned, node.parents[0],
                          np.where(node.aux[0], a, 0.0))
            elif kind == "mean":
                parent = self.nodes[node.parents[0]]
                self._acc(adj, owned, node.parents[0],
                          np.full_like(parent.value, a / node.aux))
            elif kind == "wsum":
                for pidx, w in zip(node.parents, node.aux):
                    self._acc(adj, owned, pidx, a * w)
            else:
                raise AssertionError(f"unknown node kind {kind}")
            adj[idx] = None
        return grads

    @staticmethod
    def _acc(adj, owned, idx, delta):
        cur = adj[idx]
        if cur is None:
            adj[idx] = delta
        elif owned[idx] and isinstance(cur, np.ndarray):
            cur += delta
        else:
            adj[idx] = cur + delta
            owned[idx] = 1

    @staticmethod
    def _add_grad(grads, name, delta):
        if name in grads:
            grads[name] += delta
        else:
            grads[name] = delta

    def _backward_affine(self, node, a, adj, owned, grads):
        w_name, b_name = node.aux
        weight = self.params[w_name]
        x = self.nodes[node.parents[0]].value
        n = a.shape[0]
        a2 = a.reshape(n * NCH, -1)
        x2 = x.reshape(n * NCH, -1)
        dw = a2.T @ x2
        db = a[:, CH_VAL, :].sum(axis=0)
        if w_name in grads:
            grads[w_name] += dw
            grads[b_name] += db
        else:
            grads[w_name] = dw
            grads[b_name] = db
        self._acc(adj, owned, node.parents[0], (a2 @ weight).reshape(x.shape))

    def _backward_tanh(self, node, a, adj, owned):
        x = self.nodes[node.parents[0]].value
        h = node.value[:, CH_VAL, :]
        t1 = 1.0 - h * h
        t2 = -2.0 * h * t1
        t3 = -2.0 * t1 * (t1 - 2.0 * h * h)
        dspat = x[:, _D_SPATIAL, :]
        out = np.empty_like(a)
        # value channel collects sensitivity of every output channel to v
        acc = a[:, CH_VAL, :] * t1
        acc += np.einsum("ncw,ncw->nw", a[:, _D_ALL, :], x[:, _D_ALL, :]) * t2
        acc += np.einsum("ncw,ncw->nw", a[:, _K_ALL, :], dspat * dspat) * t3
        acc += np.einsum("ncw,ncw->nw", a[:, _K_ALL, :], x[:, _K_ALL, :]) * t2
        out[:, CH_VAL, :] = acc
        np.multiply(a[:, _D_ALL, :], t1[:, None, :], out=out[:, _D_ALL, :])
        tmp = dspat * a[:, _K_ALL, :]
        tmp *= (2.0 * t2)[:, None, :]
        out[:, _D_SPATIAL, :] += tmp
        np.multiply(a[:, _K_ALL, :], t1[:, None, :], out=out[:, _K_ALL, :])
        self._acc(adj, owned, node.parents[0], out)

    def _backward_jet_mul(self, node, a, adj, owned):
        na, nb = node.parents
        xa = self.nodes[na].value
        xb = self.nodes[nb].value
        self._acc(adj, owned, na, self._jet_mul_adjoint(a, xb))
        self._acc(adj, owned, nb, self._jet_mul_adjoint(a, xa))

    @staticmethod
    def _jet_mul_adjoint(a, x_other):
        vo = x_other[:, CH_VAL, :][:, None, :]
        out = np.empty_like(a)
        out[:, CH_VAL, :] = (
            a[:, CH_VAL, :] * x_other[:, CH_VAL, :]
            + np.einsum("ncw,ncw->nw", a[:, _D_ALL, :], x_other[:, _D_ALL, :])
            + np.einsum("ncw,ncw->nw", a[:, _K_ALL, :], x_other[:, _K_ALL, :])
        )
        out[:, _D_ALL, :] = a[:, _D_ALL, :] * vo
        out[:, _D_SPATIAL, :] += 2.0 * a[:, _K_ALL, :] * x_other[:, _D_SPATIAL, :]
        out[:, _K_ALL, :] = a[:, _K_ALL, :] * vo
        return out

    # ---- diagnostics ----------------------------------------------------

    def replay(self):
        """Recompute every node from the leaves and return True when the
        replayed values are bit-identical to the stored ones."""
        for node in self.nodes:
            if node.kind in ("leaf", "const"):
                continue
            parents = [self.nodes[p].value for p in node.parents]
            if node.kind == "affine":
                fresh = affine_jet(parents[0], self.params[node.aux[0]],
                                   self.params[node.aux[1]])
            elif node.kind == "tanh":
                fresh = tanh_jet(parents[0])
            elif node.kind == "concat":
                fresh = concat_jet(parents[0], parents[1])
            elif node.kind == "jet_mul":
                fresh = mul_jet(parents[0], parents[1])
            elif node.kind == "jet_add":
                fresh = parents[0] + parents[1]
            elif node.kind == "jet_addc":
                fresh = parents[0].copy()
                fresh[:, CH_VAL, :] += node.aux
            elif node.kind == "jet_slice":
                fresh = parents[0][:, :, node.aux[0]:node.aux[1]].copy()
            elif node.kind == "channel":
                fresh = parents[0][:, node.aux, 0].copy()
            elif node.kind == "vaffine":
                fresh = parents[0] @ self.params[node.aux[0]].T + self.params[node.aux[1]]
            elif node.kind == "vtanh":
                fresh = np.tanh(parents[0])
            elif node.kind == "mixjet":
                w1 = node.aux
                fresh = np.zeros((parents[0].shape[0], NCH,
                                  w1 + parents[1].shape[1]))
                fresh[:, :, :w1] = parents[0]
                fresh[:, CH_VAL, w1:] = parents[1]
            elif node.kind == "vcol":
                fresh = parents[0][:, node.aux].copy()
            elif node.kind == "add":
                fresh = parents[0] + parents[1]
            elif node.kind == "sub":
                fresh = parents[0] - parents[1]
            elif node.kind == "mul":
                fresh = parents[0] * parents[1]
            elif node.kind == "axpb":
                fresh = node.aux[0] * parents[0] + node.aux[1]
            elif node.kind == "softplus":
                fresh = _softplus(parents[0])
            elif node.kind == "sigmoid":
                fresh = _sigmoid(parents[0])
            elif node.kind == "mask":
                fresh = np.where(node.aux[0], parents[0], node.aux[1])
            elif node.kind == "mean":
                fresh = pairwise_mean(parents[0])
            elif node.kind == "wsum":
                fresh = sum(w * p for w, p in zip(node.aux, parents))
            else:
                raise AssertionError(node.kind)
            stored = np.asarray(node.value)
            if stored.shape != np.shape(fresh) or not np.array_equal(
                    stored, np.asarray(fresh), equal_nan=True):
                return False
        return True


def flatten_params(params, order=None):
    order = order if order is not None else sorted(params)
    return np.concatenate([np.asarray(params[name], dtype=np.float64).ravel()
                           for name in order])


def unflatten_params(flat, template, order=None):
    order = order if order is not None else sorted(template)
    out = {}
    pos = 0
    for name in order:
        shape = np.asarray(template[name]).shape
        size = int(np.prod(shape)) if shape else 1
        out[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != flat.size:
        raise ValueError("flat vector length does not match template")
    return out


def grads_to_flat(grads, template, order=None):
    order = order if order is not None else sorted(template)
    parts = []
    for name in order:
        g = grads.get(name)
        if g is None:
            parts.append(np.zeros(np.asarray(template[name]).size))
        else:
            parts.append(np.asarray(g, dtype=np.float64).ravel())
    return np.concatenate(parts)


def fd_check(loss_fn, params, n_directions=10, step=1e-6, rng=None,
             eps_denom=1e-12):
    """Max relative discrepancy between the analytic directional derivative
    and a central finite difference over random unit directions.

    loss_fn(params_dict) must return (loss, grads_dict).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    order = sorted(params)
    theta = flatten_params(params, order)
    loss0, grads = loss_fn(params)
    g = grads_to_flat(grads, params, order)
    worst = 0.0
    for _ in range(n_directions):
        d = rng.standard_normal(theta.size)
        d /= np.linalg.norm(d)
        lp, _ = loss_fn(unflatten_params(theta + step * d, params, order))
        lm, _ = loss_fn(unflatten_params(theta - step * d, params, order))
        fd = (lp - lm) / (2.0 * step)
        an = float(g @ d)
        worst = max(worst, abs(an - fd) / max(abs(an), eps_denom))
    return worst
