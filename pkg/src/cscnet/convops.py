"""Convolutional synthesis operator, its adjoint, and dictionary projection.

A ConvDictionary is a kernel bank of shape (M, C, k, k): M signal channels,
C code channels, odd square kernels, "same" zero padding of k//2. The
synthesis map takes a code (n, C, H', W') to a signal (n, M, H, W); the
adjoint goes the other way. With stride 1 synthesis is plain correlation of
the code with the kernels. With stride s the code lives on the s-decimated
grid (H' = ceil(H/s)): the adjoint is the strided correlation and synthesis
is its transpose, so ``apply`` takes an optional output size because a
strided transpose does not determine it (any H with ceil(H/s) = H' works).

The three dense primitives (_corr2d, _corr2d_transpose, _corr2d_weight_grad)
are each one im2col/col2im pass plus a single matrix product, and they are
exact linear transposes of one another. That structure is what makes the
adjoint identity and the hand-written layer gradients hold to rounding.
"""

import numpy as np

from .tensor import Tensor

__all__ = ["ConvDictionary", "apply", "adjoint", "kernel_grad",
           "project_to_n", "channel_norms_sq", "random_dictionary"]


# dense primitives ------------------------------------------------------------

def _pad2d(x, pad):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(xp, k, stride, ho, wo):
    # xp is padded input (n, ci, hp, wp); result axis order (ci, a, b, n, i, j)
    n, ci = xp.shape[:2]
    cols = np.empty((ci, k, k, n, ho, wo))
    for a in range(k):
        ar = a + stride * (ho - 1) + 1
        for b in range(k):
            br = b + stride * (wo - 1) + 1
            cols[:, a, b] = xp[:, :, a:ar:stride, b:br:stride].transpose(1, 0, 2, 3)
    return cols


def _corr2d(x, w, stride, pad):
    """out[n,o,i,j] = sum_{c,a,b} w[o,c,a,b] * x[n,c,stride*i+a-pad, stride*j+b-pad]."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = _im2col(_pad2d(x, pad), k, stride, ho, wo)
    out = w.reshape(co, ci * k * k) @ cols.reshape(ci * k * k, n * ho * wo)
    return np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))


def _corr2d_transpose(g, w, stride, pad, out_hw):
    """Exact transpose of _corr2d in its input argument (col2im scatter)."""
    n, co, ho, wo = g.shape
    _, ci, k, _ = w.shape
    h, wd = out_hw
    gt = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
    cols = (w.reshape(co, ci * k * k).T @ gt).reshape(ci, k, k, n, ho, wo)
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    for a in range(k):
        ar = a + stride * (ho - 1) + 1
        for b in range(k):
            br = b + stride * (wo - 1) + 1
            xp[:, :, a:ar:stride, b:br:stride] += cols[:, a, b].transpose(1, 0, 2, 3)
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + wd])


def _corr2d_weight_grad(x, g, k, stride, pad):
    """Gradient of <g, _corr2d(x, w)> with respect to w; shape (co, ci, k, k)."""
    n, ci = x.shape[:2]
    co, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    cols = _im2col(_pad2d(x, pad), k, stride, ho, wo)
    gt = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
    return (gt @ cols.reshape(ci * k * k, n * ho * wo).T).reshape(co, ci, k, k)


# dictionary type --------------------------------------------------------------

class ConvDictionary:
    """Immutable kernel bank (M, C, k, k) with stride and fixed "same" padding."""

    __slots__ = ("kernel", "stride", "pad", "_w_adj")

    def __init__(self, kernel, stride=1, pad=None):
        if not isinstance(kernel, Tensor):
            kernel = Tensor(kernel)
        m, c, kh, kw = kernel.shape
        if kh != kw:
            raise ValueError("kernels must be square, got %dx%d" % (kh, kw))
        if kh % 2 == 0:
            raise ValueError("kernel size must be odd, got %d" % kh)
        if m < 1 or c < 1:
            raise ValueError("dictionary needs at least one channel each way, "
                             "got shape %s" % (kernel.shape,))
        stride = int(stride)
        if stride < 1:
            raise ValueError("stride must be a positive integer, got %d" % stride)
        same = kh // 2
        if pad is not None and pad != same:
            raise ValueError("only 'same' padding (k//2 = %d) is supported, got %d"
                             % (same, pad))
        self.kernel = kernel
        self.stride = stride
        self.pad = same
        self._w_adj = None

    @property
    def m(self):
        return self.kernel.shape[0]

    @property
    def c(self):
        return self.kernel.shape[1]

    @property
    def k(self):
        return self.kernel.shape[2]

    def __repr__(self):
        return "ConvDictionary(m=%d, c=%d, k=%d, stride=%d)" % (
            self.m, self.c, self.k, self.stride)

    def code_hw(self, in_hw):
        """Code-grid size for a given signal size: ceil(H/stride) each way."""
        h, w = in_hw
        s = self.stride
        return (-(-h // s), -(-w // s))

    def _adj_weight(self):
        # Kernel transposed to (C, M, k, k) and flipped in both spatial axes;
        # this is the weight the dense correlation primitives expect.
        if self._w_adj is None:
            kd = self.kernel.data
            self._w_adj = np.ascontiguousarray(
                kd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return self._w_adj


# operator plumbing used by the solver loops (array in, array out) ------------

def _apply_arr(d, z, out_hw):
    return _corr2d_transpose(z, d._adj_weight(), d.stride, d.pad, out_hw)


def _adjoint_arr(d, x):
    return _corr2d(x, d._adj_weight(), d.stride, d.pad)


def _kernel_grad_arr(d, signal, code):
    gw_adj = _corr2d_weight_grad(signal, code, d.k, d.stride, d.pad)
    return np.ascontiguousarray(gw_adj.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def _check_out_hw(d, code_hw, out_hw):
    if d.code_hw(out_hw) != tuple(code_hw):
        raise ValueError(
            "output size %s is incompatible with code grid %s at stride %d"
            % (tuple(out_hw), tuple(code_hw), d.stride))


# public operations ------------------------------------------------------------

def apply(d, z, out_hw=None):
    """Synthesize a signal from a code map.

    z has shape (n, C, H', W'). The result has shape (n, M, H, W) where
    (H, W) = out_hw, defaulting to (stride*H', stride*W'); any size whose
    decimated grid matches the code grid is accepted.
    """
    n, c, hc, wc = z.shape
    if c != d.c:
        raise ValueError("code has %d channels, dictionary expects %d" % (c, d.c))
    if out_hw is None:
        out_hw = (d.stride * hc, d.stride * wc)
    _check_out_hw(d, (hc, wc), out_hw)
    return Tensor._wrap(_apply_arr(d, z.data, tuple(out_hw)))


def adjoint(d, x):
    """Adjoint of ``apply``: <apply(d, z), x> == <z, adjoint(d, x)>."""
    n, m, h, w = x.shape
    if m != d.m:
        raise ValueError("signal has %d channels, dictionary expects %d" % (m, d.m))
    return Tensor._wrap(_adjoint_arr(d, x.data))


def kernel_grad(d, signal, code):
    """Gradient of <code, adjoint(d, signal)> with respect to the kernel.

    Equivalently the gradient of <apply(d, code), signal>; the bilinear form
    behind both is linear in the kernel. signal is (n, M, H, W) and code is
    (n, C, H', W') on the matching decimated grid.
    """
    if signal.shape[1] != d.m:
        raise ValueError("signal has %d channels, dictionary expects %d"
                         % (signal.shape[1], d.m))
    if code.shape[1] != d.c:
        raise ValueError("code has %d channels, dictionary expects %d"
                         % (code.shape[1], d.c))
    if signal.shape[0] != code.shape[0]:
        raise ValueError("batch mismatch: %d vs %d" % (signal.shape[0], code.shape[0]))
    _check_out_hw(d, code.shape[2:], signal.shape[2:])
    return Tensor._wrap(_kernel_grad_arr(d, signal.data, code.data))


def channel_norms_sq(d):
    """Per code channel c: sum over m of the squared l2 norm of kernel[m, c]."""
    kd = d.kernel.data
    return np.einsum("mcab,mcab->c", kd, kd)


def project_to_n(d):
    """Scale each code-channel slab so its total squared l2 norm is 1."""
    ssq = channel_norms_sq(d)
    bad = np.flatnonzero(ssq == 0.0)
    if bad.size:
        raise ValueError("cannot normalize zero-norm dictionary channel %d"
                         % int(bad[0]))
    scaled = d.kernel.data / np.sqrt(ssq)[None, :, None, None]
    return ConvDictionary(Tensor._wrap(scaled), d.stride)


def random_dictionary(m, c, k, stride=1, seed=0):
    """Gaussian init with std 1/sqrt(m*k*k), projected onto the unit-norm set."""
    rng = np.random.default_rng(seed)
    kernel = rng.standard_normal((m, c, k, k)) / np.sqrt(m * k * k)
    return project_to_n(ConvDictionary(Tensor._wrap(kernel), stride))
