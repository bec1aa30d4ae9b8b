"""Dense 4-D float64 tensor values and the small arithmetic core on them.

Every array that crosses a module boundary in this package is a Tensor:
shape (n, c, h, w), 64-bit floats, C-contiguous, read-only after
construction. Single signals travel with n=1 so downstream code has one
code path. Heavy numerical code unwraps ``.data`` for numpy work and
re-wraps results; the wrapper exists to pin dtype and layout and to
centralize the few reductions (inner products, norms) the solvers need.
"""

import numpy as np

__all__ = ["Tensor", "Norms", "zeros", "zeros_like", "ones_like"]


class Norms:
    """Bundle of the three entrywise norms of a flattened tensor."""

    __slots__ = ("l1", "l2", "linf")

    def __init__(self, l1, l2, linf):
        self.l1 = float(l1)
        self.l2 = float(l2)
        self.linf = float(linf)

    def __repr__(self):
        return "Norms(l1=%g, l2=%g, linf=%g)" % (self.l1, self.l2, self.linf)


class Tensor:
    """Immutable 4-D (n, c, h, w) block of float64 values."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim != 4:
            raise ValueError(
                "Tensor must be 4-D (n, c, h, w), got shape %s" % (arr.shape,))
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        # Internal no-copy constructor; the caller hands over ownership.
        if arr.dtype != np.float64 or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        obj = object.__new__(cls)
        if arr.ndim != 4:
            raise ValueError(
                "Tensor must be 4-D (n, c, h, w), got shape %s" % (arr.shape,))
        arr.setflags(write=False)
        obj.data = arr
        return obj

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return "Tensor(shape=%s)" % (self.shape,)

    def _check_same_shape(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("expected a Tensor, got %r" % type(other).__name__)
        if self.shape != other.shape:
            raise ValueError(
                "shape mismatch: %s vs %s" % (self.shape, other.shape))

    # elementwise arithmetic -------------------------------------------------

    def add(self, other):
        self._check_same_shape(other)
        return Tensor._wrap(self.data + other.data)

    def sub(self, other):
        self._check_same_shape(other)
        return Tensor._wrap(self.data - other.data)

    def mul(self, other):
        """Entrywise (Hadamard) product."""
        self._check_same_shape(other)
        return Tensor._wrap(self.data * other.data)

    def scale(self, scalar):
        return Tensor._wrap(self.data * float(scalar))

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.sub(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return self.mul(other)
        return self.scale(other)

    def __rmul__(self, other):
        return self.scale(other)

    def __neg__(self):
        return self.scale(-1.0)

    # reductions -------------------------------------------------------------

    def inner(self, other):
        """Sum over all entries of self[i] * other[i]."""
        self._check_same_shape(other)
        return float(np.dot(self.data.ravel(), other.data.ravel()))

    def norms(self):
        if self.size == 0:
            return Norms(0.0, 0.0, 0.0)
        a = np.abs(self.data)
        return Norms(a.sum(), np.sqrt(np.square(self.data).sum()), a.max())

    def item(self):
        if self.size != 1:
            raise ValueError("item() needs a single-entry tensor, got shape %s"
                             % (self.shape,))
        return float(self.data.reshape(()))

    # validity ---------------------------------------------------------------

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def require_finite(self, context="tensor"):
        if not self.is_finite():
            raise FloatingPointError("non-finite values in %s" % context)
        return self


def zeros(shape):
    if len(shape) != 4:
        raise ValueError("Tensor shape must be 4-tuple, got %s" % (shape,))
    return Tensor._wrap(np.zeros(shape))


def zeros_like(t):
    return zeros(t.shape)


def ones_like(t):
    return Tensor._wrap(np.ones(t.shape))
