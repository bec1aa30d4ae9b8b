"""Differentiable convolutional sparse-coding layer.

Forward runs a fixed number of FISTA iterations (fista.solve) with a cached
step size and returns the final code. Backward replays the unrolled graph in
reverse and produces exact gradients with respect to the layer input and the
dictionary kernel, treating the step size, the threshold, and the momentum
sequence as constants: the step is recomputed outside the graph after each
parameter update (refresh_step), so it carries no gradient.

Per iteration the forward computes

    r   = x - A(y)
    pre = y + t * A*(r)
    z   = shrink(pre, lam * t)
    y'  = z + gamma * (z - z_prev)

and backward pushes a cotangent gz through each block: the shrink passes
gradient only where |pre| > lam * t, the data step contributes t * A(gp) to
grad_x and two bilinear-form terms to grad_dict (one for A* applied to the
residual, one for the A inside the residual), and the momentum line splits
gy into (1 + gamma) and -gamma shares for the two earlier iterates.
"""

import numpy as np

from .convops import _adjoint_arr, _apply_arr, _kernel_grad_arr
from .fista import power_iteration, solve
from .tensor import Tensor

__all__ = ["CscLayer"]


class CscLayer:
    """Sparse-coding layer: code = unrolled-FISTA(x; dict, lam, K).

    The layer owns a ConvDictionary and a FistaConfig and caches the step
    size t = step_scale / lambda_dom for the configured input geometry.
    Replacing the dictionary without refreshing the cache is an error at the
    next forward; the trainer projects the kernel onto the unit-norm set and
    calls set_dictionary after every update, which refreshes automatically
    (warm-starting the power iteration from the previous eigenvector).

    A forward/backward pair is single-writer: forward stores the iterate
    trace that backward consumes. last_residual_norm holds the per-item
    ||x - A(z)||_2 of the most recent forward.
    """

    def __init__(self, d, cfg, in_hw, power_seed=0):
        h, w = in_hw
        if h < 1 or w < 1:
            raise ValueError("in_hw must be positive, got %s" % ((h, w),))
        self.dict = d
        self.cfg = cfg
        self.in_hw = (int(h), int(w))
        self._power_seed = int(power_seed)
        self.cached_lambda_dom = None
        self.cached_step = None
        self.last_trace = None
        self.last_residual_norm = None
        self._cached_v = None
        self._step_kernel = None
        self.refresh_step()

    @property
    def code_hw(self):
        return self.dict.code_hw(self.in_hw)

    def refresh_step(self):
        """Recompute lambda_dom on the current dictionary and cache the step.

        Called once at construction and again after every parameter update.
        The power iteration is seeded deterministically and warm-started
        from the previous dominant eigenvector when one is available.
        """
        hc, wc = self.dict.code_hw(self.in_hw)
        v0 = None if self._cached_v is None else self._cached_v.data
        lam_dom, v = power_iteration(
            self.dict, (1, self.dict.c, hc, wc), out_hw=self.in_hw,
            tol=self.cfg.power_tol, max_iters=self.cfg.power_max_iters,
            seed=self._power_seed, v0=v0)
        self.cached_lambda_dom = lam_dom
        self.cached_step = self.cfg.step_scale / lam_dom
        self._cached_v = v
        self._step_kernel = self.dict.kernel

    def set_dictionary(self, d, refresh=True):
        """Swap in a new dictionary of the same geometry.

        With refresh=False the step cache goes stale and forward refuses to
        run until refresh_step is called; use it to batch several edits
        before paying for one power iteration.
        """
        mine = (self.dict.m, self.dict.c, self.dict.k, self.dict.stride)
        theirs = (d.m, d.c, d.k, d.stride)
        if mine != theirs:
            raise ValueError("dictionary geometry (m, c, k, stride) changed "
                             "from %s to %s" % (mine, theirs))
        self.dict = d
        if refresh:
            self.refresh_step()

    def set_lambda(self, lam):
        """Replace the sparsity weight; the cached step only depends on the
        dictionary, so it is left untouched."""
        self.cfg = self.cfg.with_lam(lam)

    def forward(self, x):
        if self.dict.kernel is not self._step_kernel:
            raise ValueError("dictionary changed without a step refresh; "
                             "call refresh_step() or set_dictionary()")
        if x.shape[2:] != self.in_hw:
            raise ValueError("input is %dx%d but the layer was built for "
                             "%dx%d" % (x.shape[2], x.shape[3], *self.in_hw))
        trace = solve(self.dict, x, self.cfg, step=self.cached_step)
        self.last_trace = trace
        self.last_residual_norm = trace.residual_norms
        return trace.z_final

    def backward(self, grad_out):
        """Vector-Jacobian products of the last forward.

        Returns {"grad_x": Tensor like the input, "grad_dict": Tensor like
        the kernel}, the gradients of <grad_out, forward(x)> holding the
        step size fixed.
        """
        trace = self.last_trace
        if trace is None:
            raise RuntimeError("backward called before forward")
        z_final = trace.z_final
        if grad_out.shape != z_final.shape:
            raise ValueError("grad_out shape %s does not match output %s"
                             % (grad_out.shape, z_final.shape))
        d = self.dict
        t = trace.step
        num_iters = len(trace.masks)
        n = grad_out.shape[0]
        h, w = trace.residuals[0].shape[2:]
        ms = trace.m_sequence

        # gz[l] is the cotangent of z_l; entries below the top fill in as
        # the momentum lines of later iterations are unwound
        gz = [np.zeros(z_final.shape) for _ in range(num_iters)]
        gz.append(grad_out.data)
        gx = np.zeros((n, d.m, h, w))
        gk = np.zeros(d.kernel.shape)
        for l in range(num_iters, 0, -1):
            gp = gz[l] * trace.masks[l - 1]
            agp = _apply_arr(d, gp, (h, w))
            gx += t * agp
            gk += t * _kernel_grad_arr(d, trace.residuals[l - 1], gp)
            if l > 1:
                # y_1 = 0 is constant, so only later iterations feed back
                gk -= t * _kernel_grad_arr(d, agp, trace.y_iterates[l - 1].data)
                gy = gp - t * _adjoint_arr(d, agp)
                gamma = (ms[l - 2] - 1.0) / ms[l - 1]
                gz[l - 1] += (1.0 + gamma) * gy
                if l >= 3:
                    gz[l - 2] -= gamma * gy
        return {"grad_x": Tensor._wrap(gx), "grad_dict": Tensor._wrap(gk)}
