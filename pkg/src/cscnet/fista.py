"""Lasso solver for the synthesis model: soft thresholding, power iteration,
the accelerated proximal-gradient (FISTA) loop, and solution-quality checks.

The problem solved is

    minimize over z:   lam * ||z||_1 + 0.5 * ||x - A(z)||_2^2

with A the ConvDictionary synthesis operator. The loop runs a fixed number
of iterations K from z = 0 and returns every iterate, because the layer that
wraps it differentiates through the unrolled graph rather than through the
fixed point. The step size is step_scale / lambda_dom where lambda_dom is
the dominant eigenvalue of z -> A*(A(z)), estimated by power iteration.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .convops import _adjoint_arr, _apply_arr, channel_norms_sq, random_dictionary
from .tensor import Tensor

__all__ = ["FistaConfig", "FistaTrace", "shrink", "power_iteration", "solve",
           "kkt_residual", "stable_recovery_trial", "LAMBDA_SCALE"]

# Multiplier on the noise norm used as lam in stable-recovery trials. The
# recovery theory only fixes lam up to a constant; this value is the smallest
# from a one-time sweep over {0.5, 1, 2, 4} that keeps single-spike support
# containment above 95% at small noise (see stable_recovery_trial).
LAMBDA_SCALE = 1.0

# lam used when a recovery trial is run with zero noise. The noiseless limit
# lam -> 0+ is unreachable in finitely many iterations (off-support entries
# are zeroed only once the pre-activation settles within lam * step), so the
# trial substitutes a small fixed weight; the recovery error then sits at
# that scale instead of at zero.
_NOISELESS_LAM = 1e-4


@dataclass
class FistaConfig:
    """Solver settings: sparsity weight, unroll count, and step-size protocol."""

    lam: float
    iters: int
    step_scale: float = 0.9
    power_tol: float = math.sqrt(1e-5)
    power_max_iters: int = 50

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive, got %r" % (self.lam,))
        if int(self.iters) != self.iters or self.iters < 1:
            raise ValueError("iters must be a positive integer, got %r"
                             % (self.iters,))
        if not 0 < self.step_scale <= 1:
            raise ValueError("step_scale must be in (0, 1], got %r"
                             % (self.step_scale,))
        if not self.power_tol > 0:
            raise ValueError("power_tol must be positive")
        if self.power_max_iters < 1:
            raise ValueError("power_max_iters must be at least 1")
        self.lam = float(self.lam)
        self.iters = int(self.iters)
        self.step_scale = float(self.step_scale)

    def with_lam(self, lam):
        return replace(self, lam=lam)


@dataclass
class FistaTrace:
    """Everything the unrolled run produced, kept for the backward pass.

    z_iterates holds z[0..K] (z[0] = 0), y_iterates holds y[1..K], and
    m_sequence holds m[1..K] with m[1] = 1. masks and residuals are per
    iteration: the shrink support |pre| > lam*t and r = x - A(y). With
    keep_history=False only the final code and residual norms survive.
    """

    z_iterates: list
    y_iterates: list
    m_sequence: list
    step: float
    objective: float
    masks: list = field(default_factory=list, repr=False)
    residuals: list = field(default_factory=list, repr=False)
    residual_norms: np.ndarray = None

    @property
    def z_final(self):
        return self.z_iterates[-1]


def _shrink_arr(v, threshold):
    mask = np.abs(v) > threshold
    out = np.where(mask, v - np.sign(v) * threshold, 0.0)
    return out, mask


def shrink(v, threshold):
    """Entrywise soft threshold: max(|v| - threshold, 0) * sign(v)."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative, got %r" % (threshold,))
    out, _ = _shrink_arr(v.data, float(threshold))
    return Tensor._wrap(out)


def power_iteration(d, probe_shape, out_hw=None, tol=math.sqrt(1e-5),
                    max_iters=50, seed=0, v0=None):
    """Dominant eigenvalue of z -> A*(A(z)) on the given code grid.

    Returns (lambda_dom, v) with v of unit l2 norm. Iteration stops when the
    normalized iterate moves less than tol in l2, or after max_iters rounds.
    v0, when shape-compatible, seeds the iteration (used to warm-start the
    per-update refresh during training); otherwise the probe is random.
    """
    probe_shape = tuple(probe_shape)
    if len(probe_shape) != 4:
        raise ValueError("probe_shape must be 4-D, got %s" % (probe_shape,))
    if probe_shape[1] != d.c:
        raise ValueError("probe has %d channels, dictionary expects %d"
                         % (probe_shape[1], d.c))
    if not np.any(channel_norms_sq(d) > 0):
        raise ValueError("power iteration needs a nonzero dictionary")
    if out_hw is None:
        out_hw = (d.stride * probe_shape[2], d.stride * probe_shape[3])
    out_hw = tuple(out_hw)

    if v0 is not None and tuple(np.shape(v0)) == probe_shape:
        v = np.array(v0, dtype=np.float64)
    else:
        v = np.random.default_rng(seed).standard_normal(probe_shape)
    v /= math.sqrt((v * v).sum())

    gv = None
    for _ in range(max_iters):
        gv = _adjoint_arr(d, _apply_arr(d, v, out_hw))
        nv = math.sqrt((gv * gv).sum())
        if nv == 0.0:
            raise ValueError("power iteration collapsed: operator annihilates "
                             "the probe (degenerate dictionary)")
        v_new = gv / nv
        delta = v_new - v
        v = v_new
        if math.sqrt((delta * delta).sum()) < tol:
            break
    gv = _adjoint_arr(d, _apply_arr(d, v, out_hw))
    lambda_dom = float((v * gv).sum())
    return lambda_dom, Tensor._wrap(v)


def solve(d, x, cfg, step=None, keep_history=True, power_seed=0):
    """Run cfg.iters unrolled FISTA iterations from z = 0.

    When step is None the step size is computed as step_scale / lambda_dom
    with a fresh power iteration; layers pass their cached step instead.
    Returns a FistaTrace whose final iterate is the layer output.
    """
    n, m, h, w = x.shape
    if m != d.m:
        raise ValueError("signal has %d channels, dictionary expects %d"
                         % (m, d.m))
    hc, wc = d.code_hw((h, w))
    if step is None:
        lambda_dom, _ = power_iteration(
            d, (1, d.c, hc, wc), out_hw=(h, w), tol=cfg.power_tol,
            max_iters=cfg.power_max_iters, seed=power_seed)
        step = cfg.step_scale / lambda_dom
    t = float(step)
    thr = cfg.lam * t

    xd = x.data
    z_prev = np.zeros((n, d.c, hc, wc))
    y = z_prev
    mom = 1.0

    zs = [z_prev] if keep_history else None
    ys = [] if keep_history else None
    masks = [] if keep_history else None
    residuals = [] if keep_history else None
    m_seq = [mom]

    z = z_prev
    for it in range(1, cfg.iters + 1):
        r = xd if it == 1 else xd - _apply_arr(d, y, (h, w))
        pre = y + t * _adjoint_arr(d, r)
        z, mask = _shrink_arr(pre, thr)
        if not np.isfinite(z).all():
            raise FloatingPointError(
                "non-finite values at FISTA iteration %d" % it)
        if keep_history:
            ys.append(y)
            masks.append(mask)
            residuals.append(r)
            zs.append(z)
        if it < cfg.iters:
            mom_next = (1.0 + math.sqrt(1.0 + 4.0 * mom * mom)) / 2.0
            gamma = (mom - 1.0) / mom_next
            y = z + gamma * (z - z_prev)
            z_prev = z
            mom = mom_next
            m_seq.append(mom)

    r_final = xd - _apply_arr(d, z, (h, w))
    per_item = np.sqrt(np.square(r_final).reshape(n, -1).sum(axis=1))
    objective = cfg.lam * np.abs(z).sum() + 0.5 * float(np.square(r_final).sum())

    if keep_history:
        trace = FistaTrace(
            z_iterates=[Tensor._wrap(a) for a in zs],
            y_iterates=[Tensor._wrap(a) for a in ys],
            m_sequence=m_seq, step=t, objective=objective,
            masks=masks, residuals=residuals, residual_norms=per_item)
    else:
        trace = FistaTrace(
            z_iterates=[Tensor._wrap(z)], y_iterates=[], m_sequence=m_seq,
            step=t, objective=objective, residual_norms=per_item)
    return trace


def kkt_residual(d, x, z, lam, per_item=False):
    """Stationarity violation of z for the lasso objective.

    With g = -A*(x - A(z)), measures max(|g| - lam) over the zero set and
    max|g + lam * sign(z)| over the support. Values <= tol certify z as a
    tol-accurate solution; the zero-set part can be negative when the dual
    constraint holds strictly.
    """
    n = x.shape[0]
    h, w = x.shape[2:]
    zd = z.data
    g = -_adjoint_arr(d, x.data - _apply_arr(d, zd, (h, w)))
    on = zd != 0.0
    stat = np.where(on, np.abs(g + lam * np.sign(zd)), np.abs(g) - lam)
    if per_item:
        return stat.reshape(n, -1).max(axis=1)
    return float(stat.max())


def stable_recovery_trial(m, c, k, sparsity, noise_norm, seed, code_hw=(8, 8),
                          iters=500, lam_scale=LAMBDA_SCALE):
    """One synthetic sparse-recovery run against a planted code.

    Draws a random normalized dictionary, plants ``sparsity`` random +-1
    spikes, observes x = A(z_true) + e with ||e|| = noise_norm, and solves
    the lasso with lam proportional to the noise norm. Reports whether the
    recovered support is contained in the planted one and the recovery error
    (relative to the noise norm when it is positive, absolute when it is 0).
    """
    rng = np.random.default_rng(seed)
    d = random_dictionary(m, c, k, seed=int(rng.integers(1 << 31)))
    hc, wc = code_hw
    dim = c * hc * wc
    if sparsity >= dim:
        raise ValueError("sparsity %d must be below code size %d" % (sparsity, dim))

    z_true = np.zeros(dim)
    spots = rng.choice(dim, size=sparsity, replace=False)
    z_true[spots] = rng.choice([-1.0, 1.0], size=sparsity)
    z_true = z_true.reshape(1, c, hc, wc)

    clean = _apply_arr(d, z_true, (hc, wc))
    if noise_norm > 0:
        e = rng.standard_normal(clean.shape)
        e *= noise_norm / math.sqrt((e * e).sum())
    else:
        e = np.zeros_like(clean)
    x = Tensor._wrap(clean + e)

    lam = lam_scale * noise_norm if noise_norm > 0 else _NOISELESS_LAM
    cfg = FistaConfig(lam=lam, iters=iters)
    z_hat = solve(d, x, cfg, keep_history=False).z_final.data

    contained = bool(np.all(z_hat[z_true == 0.0] == 0.0))
    abs_err = math.sqrt(((z_hat - z_true) ** 2).sum())
    rel_err = abs_err / noise_norm if noise_norm > 0 else abs_err
    return {"support_contained": contained, "rel_error": rel_err,
            "abs_error": abs_err}
