"""Composite residual loss and the hybrid Adam -> mini-batch L-BFGS schedule.

The loss is a weighted sum of per-category mean squared residuals.  A short
curriculum phase drops the governing-equation term entirely (its parameter
gradient is exactly zero, not merely small) so the boundary and initial
conditions are satisfied first.

The quasi-Newton phase draws one fixed batch per epoch, runs up to a capped
number of inner iterations of two-loop L-BFGS with a strong Wolfe line
search, and keeps only displacement/gradient pairs that pass a curvature
threshold.  An epoch that accepts no pair, or barely decreases the loss,
signals staleness: the caller re-jitters the collocation pools and clears
the curvature memory, which refers to a different objective sample anyway.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteLoss, Tape
from .model import build_raw_output, tape_scaled_channels
from .physics import Category, bc_residual, ic_residual, laser_flux, pde_residual
from .sampling import FACE_CODES, draw_batch, resample_pools

DEFAULT_CHUNK = 16384


class LineSearchFailed(RuntimeError):
    """No step satisfying both Wolfe conditions within the eval budget."""


@dataclass(frozen=True)
class LossWeights:
    w_pde: float = 1.0
    w_ic: float = 1e-4
    w_bc: float = 1.0

    def __post_init__(self):
        if min(self.w_pde, self.w_ic, self.w_bc) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class OptimizerConfig:
    lr_adam: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    grad_clip: float = 1e3        # applied during Adam only
    adam_epochs: int = 2000
    total_epochs: int = 10000
    curriculum_epochs: int = 200
    lr_lbfgs: float = 1.0
    history: int = 50
    max_inner: int = 50
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    curvature_eps: float = 1e-12
    stall_tol: float = 1e-8
    ls_max_evals: int = 20
    ls_fallback_scale: float = 1e-2

    def __post_init__(self):
        if self.adam_epochs > self.total_epochs:
            raise ValueError("adam_epochs exceeds the total epoch budget")
        if self.history < 1:
            raise ValueError("history must be at least 1")
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")


# ---- composite loss ---------------------------------------------------------

def _chunks(n, chunk):
    for lo in range(0, n, chunk):
        yield lo, min(lo + chunk, n)


def _tape_channels(tape, net, points, lam, scaling, process, normalizer):
    coord_jet = normalizer.input_jet(points)
    lam_jet = normalizer.lam_jet(lam) if net.arch != "npinn" or net.has_scale_aux else None
    raw, aux = build_raw_output(tape, net, coord_jet, lam_jet)
    return tape_scaled_channels(tape, raw, aux, lam, scaling, process)


def _mean_sq(tape, residual):
    return tape.mean(tape.square(residual))


def _category_mean(tape, terms):
    """terms: list of (mean ref, count).  Single shared denominator."""
    total = sum(n for _, n in terms)
    if total == 0:
        return None, 0
    if len(terms) == 1:
        return terms[0][0], total
    return tape.wsum([(ref, n / total) for ref, n in terms]), total


def composite_loss(tape, net, batch, weights, epoch, scaling, process,
                   normalizer, curriculum_epochs=200, chunk=DEFAULT_CHUNK):
    """Weighted per-category mean squared residuals on the tape.

    Returns (loss ref, parts), parts holding the plain float values of each
    category mean plus the optimized total.  During the curriculum the PDE
    term never touches the tape (exact-zero gradient) but its value is still
    reported, computed without recording.
    """
    include_pde = epoch >= curriculum_epochs
    terms = []
    parts = {}

    pde_terms = []
    if include_pde and len(batch.pde_points):
        for lo, hi in _chunks(len(batch.pde_points), chunk):
            pts, lam = batch.pde_points[lo:hi], batch.pde_lam[lo:hi]
            ch = _tape_channels(tape, net, pts, lam, scaling, process, normalizer)
            r = pde_residual(ch, lam[:, 0], lam[:, 1], lam[:, 2])
            pde_terms.append((_mean_sq(tape, r), hi - lo))
        l_pde, _ = _category_mean(tape, pde_terms)
        parts["pde"] = l_pde.value
        terms.append((l_pde, weights.w_pde))
    else:
        parts["pde"] = _pde_value_only(net, batch, scaling, process, normalizer, chunk)

    bc_terms = []
    for face, code in FACE_CODES.items():
        rows = np.flatnonzero(batch.bc_face == code)
        for lo, hi in _chunks(len(rows), chunk):
            idx = rows[lo:hi]
            pts, lam = batch.bc_points[idx], batch.bc_lam[idx]
            ch = _tape_channels(tape, net, pts, lam, scaling, process, normalizer)
            q = laser_flux(pts[:, 0], pts[:, 1], pts[:, 3], process) \
                if face == Category.TOP else None
            r = bc_residual(face, ch, process, lam[:, 2], q)
            bc_terms.append((_mean_sq(tape, r), len(idx)))
    l_bc, n_bc = _category_mean(tape, bc_terms)
    if l_bc is not None:
        parts["bc"] = l_bc.value
        terms.append((l_bc, weights.w_bc))
    else:
        parts["bc"] = 0.0

    ic_terms = []
    for lo, hi in _chunks(len(batch.ic_points), chunk):
        pts, lam = batch.ic_points[lo:hi], batch.ic_lam[lo:hi]
        ch = _tape_channels(tape, net, pts, lam, scaling, process, normalizer)
        ic_terms.append((_mean_sq(tape, ic_residual(ch, process)), hi - lo))
    l_ic, _ = _category_mean(tape, ic_terms)
    if l_ic is not None:
        parts["ic"] = l_ic.value
        terms.append((l_ic, weights.w_ic))
    else:
        parts["ic"] = 0.0

    if not terms:
        raise ValueError("batch is empty")
    loss = tape.wsum(terms)
    parts["total"] = loss.value
    return loss, parts


def _pde_value_only(net, batch, scaling, process, normalizer, chunk):
    """Numeric PDE mean squared residual, no tape involvement."""
    from .model import forward_jets, scale_jet_values

    if not len(batch.pde_points):
        return 0.0
    acc = []
    for lo, hi in _chunks(len(batch.pde_points), chunk):
        pts, lam = batch.pde_points[lo:hi], batch.pde_lam[lo:hi]
        coord_jet = normalizer.input_jet(pts)
        lam_jet = normalizer.lam_jet(lam) if net.arch != "npinn" or net.has_scale_aux else None
        raw, aux = forward_jets(net, coord_jet, lam_jet)
        ch = scale_jet_values(raw, lam, scaling, process, aux)
        r = pde_residual(ch, lam[:, 0], lam[:, 1], lam[:, 2])
        acc.append(r * r)
    return float(ad.pairwise_mean(np.concatenate(acc)))


def loss_and_grad(flat, net, batch, weights, epoch, scaling, process,
                  normalizer, curriculum_epochs=200, chunk=DEFAULT_CHUNK):
    """Loss value, flat gradient, and per-category parts at the given flat
    parameter vector."""
    work = net.with_flat(flat)
    tape = Tape(work.params)
    loss, parts = composite_loss(tape, work, batch, weights, epoch, scaling,
                                 process, normalizer, curriculum_epochs, chunk)
    grads = tape.backward(loss)
    return parts["total"], work.grads_flat(grads), parts


# ---- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(flat, grad, state, cfg):
    """One bias-corrected adaptive step; returns (new params, new state)."""
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    new = flat - cfg.lr_adam * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return new, AdamState(m, v, t)


def clip_gradient(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


# ---- L-BFGS -----------------------------------------------------------------

@dataclass
class LbfgsState:
    """Curvature memory: (s, y, 1/y.s) triples, oldest first."""

    pairs: deque = field(default_factory=lambda: deque(maxlen=50))
    stale_count: int = 0

    @classmethod
    def fresh(cls, history):
        return cls(pairs=deque(maxlen=history))

    def clear(self):
        self.pairs.clear()


def two_loop_direction(grad, pairs):
    """H^-1 g via the two-loop recursion, H0 = (s.y / y.y) I from the most
    recent pair (identity when the memory is empty)."""
    q = grad.copy()
    if not pairs:
        return q
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = pairs[-1]
    q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        q += (a - rho * (y @ q)) * s
    return q


def _interp_quadratic(a_lo, f_lo, d_lo, a_hi, f_hi):
    """Minimizer of the quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi),
    clamped to the middle 80% of the interval.  Clamping (rather than falling
    back to bisection) matters when f_hi is orders of magnitude above f_lo:
    the model minimum hugs a_lo and the clamp then shrinks the interval
    tenfold per evaluation."""
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    span = hi - lo
    denom = 2.0 * (f_hi - f_lo - d_lo * (a_hi - a_lo))
    if denom == 0 or not np.isfinite(denom) or not np.isfinite(f_hi):
        return 0.5 * (a_lo + a_hi)
    a = a_lo - d_lo * (a_hi - a_lo) ** 2 / denom
    if not np.isfinite(a):
        return 0.5 * (a_lo + a_hi)
    return min(max(a, lo + 0.1 * span), hi - 0.1 * span)


def strong_wolfe(eval_fg, theta, f0, g0, direction, cfg, alpha_init=None):
    """Line search satisfying sufficient decrease and the strong curvature
    condition.  eval_fg(theta) -> (f, g); a non-finite f is treated as a
    point beyond the acceptable interval.  Returns (alpha, f, g, n_evals).
    """
    dphi0 = float(g0 @ direction)
    if dphi0 >= 0.0:
        raise LineSearchFailed("not a descent direction")
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2
    alpha = cfg.lr_lbfgs if alpha_init is None else alpha_init
    alpha_max = 64.0 * cfg.lr_lbfgs
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = eval_fg(theta + a * direction)
        d = float(g @ direction) if g is not None else np.nan
        return f, g, d

    def zoom(lo, hi):
        # lo always satisfies sufficient decrease; loop shrinks [lo, hi]
        a_lo, f_lo, g_lo, d_lo = lo
        a_hi, f_hi, _, _ = hi
        while evals < cfg.ls_max_evals:
            a = _interp_quadratic(a_lo, f_lo, d_lo, a_hi, f_hi)
            # Degenerate-interval test must be relative to the bracket scale:
            # steep landscapes put the whole Wolfe window at alpha ~ 1/|g|,
            # which can be far below any absolute floor.
            if abs(a_hi - a_lo) <= 1e-12 * max(abs(a_lo), abs(a_hi)):
                break
            f, g, d = phi(a)
            if not np.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= f_lo:
                a_hi, f_hi = a, f
            else:
                if abs(d) <= -c2 * dphi0:
                    return a, f, g
                if d * (a_hi - a_lo) >= 0.0:
                    a_hi, f_hi = a_lo, f_lo
                a_lo, f_lo, g_lo, d_lo = a, f, g, d
        raise LineSearchFailed("zoom exhausted the evaluation budget")

    prev = (0.0, f0, g0, dphi0)
    first = True
    while evals < cfg.ls_max_evals:
        f, g, d = phi(alpha)
        if not np.isfinite(f) or f > f0 + c1 * alpha * dphi0 \
                or (not first and f >= prev[1]):
            a, fa, ga = zoom(prev, (alpha, f, g, d))
            return a, fa, ga, evals
        if abs(d) <= -c2 * dphi0:
            return alpha, f, g, evals
        if d >= 0.0:
            a, fa, ga = zoom((alpha, f, g, d), prev)
            return a, fa, ga, evals
        prev = (alpha, f, g, d)
        if alpha >= alpha_max:
            break
        alpha = min(2.0 * alpha, alpha_max)
        first = False
    raise LineSearchFailed("bracketing exhausted the evaluation budget")


def lbfgs_epoch(flat, eval_fg, state, cfg):
    """Up to cfg.max_inner quasi-Newton iterations on one fixed batch.

    Returns (new flat params, f, g, stale, stats).  stale means no curvature
    pair was accepted or the relative decrease fell below the tolerance; the
    caller should resample pools and clear the memory.
    """
    f, g = eval_fg(flat)
    if not np.isfinite(f):
        raise NonFiniteLoss(f"loss is {f!r} at epoch start")
    f_start = f
    accepted = 0
    inner = 0
    fallbacks = 0
    for _ in range(cfg.max_inner):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= 1e-15:
            break
        inner += 1
        d = -two_loop_direction(g, state.pairs)
        if float(g @ d) >= 0.0:
            state.clear()
            d = -g
        alpha_init = None
        if not state.pairs:
            alpha_init = min(cfg.lr_lbfgs, cfg.lr_lbfgs / max(1.0, gnorm))
        try:
            alpha, f_new, g_new, _ = strong_wolfe(eval_fg, flat, f, g, d, cfg,
                                                  alpha_init)
        except LineSearchFailed:
            # Rescue: plain descent step, backtracked until the loss actually
            # drops.  Never moves uphill; giving up leaves the params where
            # they were and lets the staleness path resample the pools.
            fallbacks += 1
            alpha_fb = cfg.lr_lbfgs * cfg.ls_fallback_scale / max(1.0, gnorm)
            for _ in range(12):
                trial = flat - alpha_fb * g
                f_new, g_new = eval_fg(trial)
                if np.isfinite(f_new) and f_new < f:
                    break
                alpha_fb *= 0.5
            else:
                break
            flat, f, g = trial, f_new, g_new
            continue
        dphi0 = float(g @ d)
        assert f_new <= f + cfg.wolfe_c1 * alpha * dphi0
        assert abs(float(g_new @ d)) <= -cfg.wolfe_c2 * dphi0
        s = alpha * d
        y = g_new - g
        ys = float(y @ s)
        if ys > cfg.curvature_eps * np.linalg.norm(s) * np.linalg.norm(y):
            state.pairs.append((s, y, 1.0 / ys))
            accepted += 1
        flat = flat + s
        f, g = f_new, g_new
    rel_decrease = (f_start - f) / max(abs(f_start), 1e-300)
    stale = accepted == 0 or rel_decrease < cfg.stall_tol
    stats = {"inner": inner, "accepted": accepted, "fallbacks": fallbacks,
             "rel_decrease": rel_decrease}
    return flat, f, g, stale, stats


# ---- training loop ----------------------------------------------------------

@dataclass
class TrainRecord:
    epoch: int
    phase: str                 # curriculum | adam | lbfgs
    loss_pde: float
    loss_bc: float
    loss_ic: float
    loss_total: float
    grad_norm: float
    inner_iters: int
    resampled: bool
    rel_l2: float
    wall_time: float

    CSV_HEADER = ("epoch,phase,loss_pde,loss_bc,loss_ic,loss_total,"
                  "grad_norm,inner_iters,resampled,rel_l2,wall_time")

    def csv_row(self):
        return (f"{self.epoch},{self.phase},{self.loss_pde:.17g},"
                f"{self.loss_bc:.17g},{self.loss_ic:.17g},"
                f"{self.loss_total:.17g},{self.grad_norm:.17g},"
                f"{self.inner_iters},{int(self.resampled)},"
                f"{self.rel_l2:.17g},{self.wall_time:.6f}")


def train(net, colloc, space, process, normalizer, scaling,
          weights=None, opt=None, adam_batch=None, lbfgs_batch=None,
          seed=0, fixed_lam=None, record_path=None, eval_hook=None,
          eval_every=0, checkpoint_path=None, checkpoint_every=0,
          chunk=DEFAULT_CHUNK, on_epoch=None):
    """Full schedule: curriculum -> Adam -> mini-batch L-BFGS.

    Adam draws a fresh batch every epoch.  The L-BFGS batch (points and
    material draws) persists across epochs until a staleness signal fires;
    only then are the pools re-jittered and a new batch drawn, with the
    curvature memory cleared because the old pairs refer to a different
    objective sample.  Keeping the subsampled objective fixed between
    resamples is what lets the quasi-Newton model compound instead of
    chasing a moving target.  Reproducible per (seed, config).  Returns
    (trained net, list of TrainRecord).
    """
    from .model import save_params
    from .sampling import ADAM_BATCH, LBFGS_BATCH

    weights = weights if weights is not None else LossWeights()
    opt = opt if opt is not None else OptimizerConfig()
    adam_batch = adam_batch if adam_batch is not None else ADAM_BATCH
    lbfgs_batch = lbfgs_batch if lbfgs_batch is not None else LBFGS_BATCH

    batch_ss, resample_ss = np.random.SeedSequence(seed).spawn(2)
    batch_rng = np.random.default_rng(batch_ss)
    resample_rng = np.random.default_rng(resample_ss)

    flat = net.flatten()
    adam_state = AdamState.zeros(flat.size)
    lbfgs_state = LbfgsState.fresh(opt.history)
    held_batch = None
    records = []
    csv_file = open(record_path, "a") if record_path else None
    if csv_file and csv_file.tell() == 0:
        csv_file.write(TrainRecord.CSV_HEADER + "\n")
    consecutive_nonfinite = 0

    def finish(rec):
        records.append(rec)
        if csv_file:
            csv_file.write(rec.csv_row() + "\n")
            csv_file.flush()
        if on_epoch:
            on_epoch(rec)

    try:
        for epoch in range(opt.total_epochs):
            t0 = time.perf_counter()
            resampled = False
            if epoch < opt.adam_epochs:
                phase = "curriculum" if epoch < opt.curriculum_epochs else "adam"
                batch = draw_batch(colloc, adam_batch, batch_rng, space, fixed_lam)
                try:
                    total, grad, parts = loss_and_grad(
                        flat, net, batch, weights, epoch, scaling, process,
                        normalizer, opt.curriculum_epochs, chunk)
                except NonFiniteLoss as err:
                    raise NonFiniteLoss(f"epoch {epoch}: {err}") from err
                grad, gnorm = clip_gradient(grad, opt.grad_clip)
                flat, adam_state = adam_step(flat, grad, adam_state, opt)
                inner = 0
            else:
                phase = "lbfgs"
                if held_batch is None:
                    held_batch = draw_batch(colloc, lbfgs_batch, batch_rng,
                                            space, fixed_lam)
                batch = held_batch
                last_eval = {}

                def eval_fg(theta, _batch=batch, _epoch=epoch, _last=last_eval):
                    try:
                        total, grad, parts = loss_and_grad(
                            theta, net, _batch, weights, _epoch, scaling,
                            process, normalizer, opt.curriculum_epochs, chunk)
                    except NonFiniteLoss:
                        return np.inf, None
                    _last["theta"] = theta
                    _last["parts"] = parts
                    return total, grad

                try:
                    flat, total, g_end, stale, stats = lbfgs_epoch(
                        flat, eval_fg, lbfgs_state, opt)
                    consecutive_nonfinite = 0
                except NonFiniteLoss:
                    consecutive_nonfinite += 1
                    if consecutive_nonfinite >= 3:
                        raise NonFiniteLoss(
                            f"epoch {epoch}: loss stayed non-finite after "
                            "repeated pool resampling") from None
                    colloc = resample_pools(colloc, resample_rng)
                    lbfgs_state.clear()
                    held_batch = None
                    finish(TrainRecord(epoch, phase, np.nan, np.nan, np.nan,
                                       np.nan, np.nan, 0, True, np.nan,
                                       time.perf_counter() - t0))
                    continue
                if last_eval and np.array_equal(last_eval["theta"], flat):
                    parts = last_eval["parts"]
                else:
                    _, _, parts = loss_and_grad(flat, net, batch, weights,
                                                epoch, scaling, process,
                                                normalizer,
                                                opt.curriculum_epochs, chunk)
                gnorm = float(np.linalg.norm(g_end))
                inner = stats["inner"]
                if stale:
                    colloc = resample_pools(colloc, resample_rng)
                    lbfgs_state.clear()
                    held_batch = None
                    resampled = True

            rel_l2 = np.nan
            if eval_hook and eval_every and (epoch + 1) % eval_every == 0:
                rel_l2 = float(eval_hook(net.with_flat(flat), epoch))
            if checkpoint_path and checkpoint_every \
                    and (epoch + 1) % checkpoint_every == 0:
                save_params(net.with_flat(flat), checkpoint_path)

            finish(TrainRecord(epoch, phase, parts["pde"], parts["bc"],
                               parts["ic"], parts["total"], gnorm, inner,
                               resampled, rel_l2,
                               time.perf_counter() - t0))
    finally:
        if csv_file:
            csv_file.close()

    return net.with_flat(flat), records
