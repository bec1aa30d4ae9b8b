"""Residual-driven sparsity-weight selection and adversarial evaluation.

The calibration loop corrupts a training subsample at each severity, reads
the mean CSC residual at the nominal weight lam0, sweeps a lambda grid for
the accuracy-maximizing weight, and fits lam(r) = slope*r + intercept by
least squares. At test time one pass at lam0 measures the residual, the fit
(clamped to the sweep range) picks the weight, and a second pass scores it.

pgd_attack runs projected gradient ascent on the cross-entropy in plain
[0,1] pixel space; outputs satisfy the eps-ball and box constraints exactly
as computed in float64, not just up to rounding.
"""

import numpy as np

from .data import NoiseSpec, corrupt
from .nn import backward_model, cross_entropy, forward_model
from .tensor import Tensor

__all__ = ["LambdaCalibration", "calibrate", "adaptive_eval", "pgd_attack",
           "save_calibration", "load_calibration"]


class LambdaCalibration:
    """Affine map from mean residual to sparsity weight.

    points holds one (lam_c, r_c) pair per calibration severity; curves
    keeps the raw accuracy-vs-lambda sweeps for diagnostics (not
    serialized). Predictions clamp to [lam_lo, lam_hi], the sweep range.
    """

    def __init__(self, noise_kind, points, slope, intercept, lam_lo, lam_hi,
                 curves=None):
        self.noise_kind = str(noise_kind)
        self.points = [(float(lam), float(r)) for lam, r in points]
        self.slope = float(slope)
        self.intercept = float(intercept)
        self.lam_lo = float(lam_lo)
        self.lam_hi = float(lam_hi)
        self.curves = curves if curves is not None else {}

    def lam_for_residual(self, r):
        lam = self.slope * float(r) + self.intercept
        return min(max(lam, self.lam_lo), self.lam_hi)


def _forward_stats(model, images, labels, batch_size=128):
    """One eval pass: (accuracy, mean residual over CSC layers and items)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = images.shape[0]
    correct = 0
    res_sum = 0.0
    for lo in range(0, n, batch_size):
        xb = Tensor(np.ascontiguousarray(images[lo:lo + batch_size]))
        out = forward_model(model, xb, mode="eval")
        logits = out["logits"].data
        pred = logits.reshape(logits.shape[0], -1).argmax(axis=1)
        correct += int((pred == labels[lo:lo + batch_size]).sum())
        res_sum += float(np.mean(out["residuals"])) * xb.shape[0]
    return correct / n, res_sum / n


def _fit_affine(rs, lams):
    rs = np.asarray(rs, dtype=np.float64)
    lams = np.asarray(lams, dtype=np.float64)
    # constant targets have the exact solution slope=0; lstsq would return
    # roundoff instead. residuals that never move give a rank-deficient
    # system; fall back to the constant fit there too.
    if np.ptp(lams) == 0.0:
        return 0.0, float(lams[0])
    if np.ptp(rs) < 1e-12 * max(1.0, np.abs(rs).max()):
        return 0.0, float(lams.mean())
    design = np.stack([rs, np.ones_like(rs)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, lams, rcond=None)
    return float(slope), float(intercept)


def calibrate(model, train_data, kind, severities, lambda_grid,
              subsample=2000, batch_size=128, seed=0):
    """Sweep (severity, lambda) cells on a corrupted training subsample and
    fit the residual-to-lambda line.

    Ties in the per-severity accuracy argmax break toward the smallest
    lambda. The model's weights are restored before returning.
    """
    lams = [float(v) for v in lambda_grid]
    if not lams:
        raise ValueError("lambda grid is empty")
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise ValueError("lambda grid must be strictly ascending")
    severities = list(severities)
    if len(severities) < 2:
        raise ValueError("need at least two severities to fit a line, got %d"
                         % len(severities))
    if subsample <= 0:
        raise ValueError("subsample must be positive")

    saved = [layer.cfg.lam for layer in model.csc_layers()]
    lam0 = saved[0]
    rng = np.random.default_rng(seed)
    n = train_data.images.shape[0]
    idx = rng.choice(n, size=min(int(subsample), n), replace=False)
    images = Tensor(np.ascontiguousarray(train_data.images.data[idx]))
    labels = np.asarray(train_data.labels, dtype=np.int64)[idx]

    points = []
    curves = {}
    try:
        for j, sev in enumerate(severities):
            noisy = corrupt(images,
                            NoiseSpec(kind, sev, seed=seed + 1000 + j)).data
            model.set_lambda(lam0)
            _, r_c = _forward_stats(model, noisy, labels, batch_size)
            accs = []
            for lam in lams:
                model.set_lambda(lam)
                acc, _ = _forward_stats(model, noisy, labels, batch_size)
                accs.append(acc)
            # first argmax = smallest lambda because the grid ascends
            lam_c = lams[int(np.argmax(accs))]
            points.append((lam_c, r_c))
            curves[sev] = list(zip(lams, accs))
    finally:
        for layer, lam in zip(model.csc_layers(), saved):
            layer.set_lambda(lam)

    slope, intercept = _fit_affine([r for _, r in points],
                                   [lam for lam, _ in points])
    return LambdaCalibration(kind, points, slope, intercept,
                             lam_lo=lams[0], lam_hi=lams[-1], curves=curves)


def adaptive_eval(model, test_data, cal, batch_size=128):
    """Residual-driven two-pass evaluation.

    Pass one at the model's current weight measures r_test (and, for free,
    the fixed-weight accuracy); pass two scores the fitted, clamped weight.
    Returns accuracy, lambda_used, r_test, and fixed_accuracy.
    """
    saved = [layer.cfg.lam for layer in model.csc_layers()]
    images = test_data.images.data
    labels = test_data.labels
    try:
        fixed_accuracy, r_test = _forward_stats(model, images, labels,
                                                batch_size)
        lam = cal.lam_for_residual(r_test)
        model.set_lambda(lam)
        accuracy, _ = _forward_stats(model, images, labels, batch_size)
    finally:
        for layer, lam0 in zip(model.csc_layers(), saved):
            layer.set_lambda(lam0)
    return {"accuracy": accuracy, "lambda_used": lam, "r_test": r_test,
            "fixed_accuracy": fixed_accuracy}


# adversarial evaluation -------------------------------------------------------------


def _input_grad(model, x, labels):
    out = forward_model(model, Tensor(np.ascontiguousarray(x)), mode="eval")
    ce = cross_entropy(out["logits"], labels)
    return backward_model(model, ce["grad_logits"])["grad_input"].data


def _l2_norms(delta):
    return np.sqrt((delta * delta).sum(axis=(1, 2, 3), keepdims=True))


def _shrink_to_l2_ball(x, x0, eps):
    """Rescale x - x0 until the float64-computed norms are <= eps."""
    for _ in range(64):
        delta = x - x0
        norms = _l2_norms(delta)
        bad = (norms > eps)[:, 0, 0, 0]
        if not bad.any():
            return x
        # the extra shrink outpaces the rounding the rescale reintroduces
        scale = (eps / norms[bad]) * (1.0 - 1e-12)
        x = x.copy()
        x[bad] = x0[bad] + delta[bad] * scale
        x = np.clip(x, 0.0, 1.0)
    raise RuntimeError("l2 projection failed to settle")


def _exact_linf_bounds(x0, eps):
    """[lo, hi] per pixel with fl(hi - x0) <= eps and fl(x0 - lo) <= eps."""
    hi = x0 + eps
    for _ in range(4):
        over = (hi - x0) > eps
        if not over.any():
            break
        hi[over] = np.nextafter(hi[over], -np.inf)
    lo = x0 - eps
    for _ in range(4):
        over = (x0 - lo) > eps
        if not over.any():
            break
        lo[over] = np.nextafter(lo[over], np.inf)
    return np.maximum(lo, 0.0), np.minimum(hi, 1.0)


def pgd_attack(model, images, labels, norm="linf", eps=0.1, step=None,
               iters=20, seed=0):
    """Projected gradient ascent on the cross-entropy.

    One seeded random start inside the ball, signed (linf) or normalized
    (l2) ascent steps, projection after every step. iters=0 returns the
    images untouched. The returned array always satisfies both the eps-ball
    and the [0,1] box exactly in float64.
    """
    if norm not in ("linf", "l2"):
        raise ValueError("norm must be 'linf' or 'l2', got %r" % (norm,))
    eps = float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive, got %g" % eps)
    if iters < 0:
        raise ValueError("iters must be >= 0, got %d" % iters)
    step = eps / 4 if step is None else float(step)
    if step <= 0:
        raise ValueError("step must be positive, got %g" % step)

    x0 = np.asarray(images, dtype=np.float64).copy()
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if iters == 0:
        return x0
    rng = np.random.default_rng(seed)

    if norm == "linf":
        lo, hi = _exact_linf_bounds(x0, eps)
        x = lo + rng.random(x0.shape) * (hi - lo)
        for _ in range(iters):
            g = _input_grad(model, x, labels)
            x = np.clip(x + step * np.sign(g), lo, hi)
        return x

    n = x0.shape[0]
    start = rng.standard_normal(x0.shape)
    start_norm = np.maximum(_l2_norms(start), 1e-30)
    radius = eps * rng.random((n, 1, 1, 1))
    x = np.clip(x0 + start * (radius / start_norm), 0.0, 1.0)
    x = _shrink_to_l2_ball(x, x0, eps)
    for _ in range(iters):
        g = _input_grad(model, x, labels)
        gn = _l2_norms(g)
        direction = np.where(gn > 0, g / np.maximum(gn, 1e-30), 0.0)
        x = np.clip(x + step * direction, 0.0, 1.0)
        x = _shrink_to_l2_ball(x, x0, eps)
    return x


# serialization ----------------------------------------------------------------------


def save_calibration(path, cal):
    """Small text record: kind, fit, clamp range, and the fitted points."""
    lines = ["kind=%s" % cal.noise_kind,
             "slope=%s" % repr(cal.slope),
             "intercept=%s" % repr(cal.intercept),
             "lam_lo=%s" % repr(cal.lam_lo),
             "lam_hi=%s" % repr(cal.lam_hi)]
    lines += ["point=%s,%s" % (repr(lam), repr(r)) for lam, r in cal.points]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_calibration(path):
    fields = {}
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key == "point":
                lam, r = value.split(",")
                points.append((float(lam), float(r)))
            else:
                fields[key] = value
    try:
        return LambdaCalibration(fields["kind"], points,
                                 float(fields["slope"]),
                                 float(fields["intercept"]),
                                 float(fields["lam_lo"]),
                                 float(fields["lam_hi"]))
    except KeyError as exc:
        raise ValueError("%s: missing calibration field %s" % (path, exc))
