"""Supporting layers and the projected-SGD trainer for SDNet-lite.

Blocks here (Conv2d, BatchNorm2d, Relu, MaxPool, AvgPool, Flatten, Linear)
follow one protocol: forward(arr, mode) -> arr, backward(g) -> g_in with
parameter gradients left in block.grads, and trainable() listing the
parameters with their weight-decay eligibility. Arrays between blocks stay
4-D (n, c, h, w); Flatten folds spatial content into the channel axis so the
Linear head sees (n, d, 1, 1) and the logits come out as (n, classes, 1, 1).

CscLayer instances sit directly in the layer list; the model-level functions
dispatch on the type, collect their per-item residual norms on the way
forward, and route their kernel gradients on the way back. The optimizer is
SGD with Nesterov momentum and weight decay, except that sparse-coding
dictionaries are never decayed: after each update they are projected back
onto the unit-norm set, which cancels any radial shrink, and their layer's
step size is refreshed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .convops import (ConvDictionary, _corr2d, _corr2d_transpose,
                      _corr2d_weight_grad, project_to_n, random_dictionary)
from .csclayer import CscLayer
from .fista import FistaConfig
from .tensor import Tensor

__all__ = ["Relu", "BatchNorm2d", "Conv2d", "MaxPool", "AvgPool", "Flatten",
           "Linear", "SdNetLite", "SgdState", "sdnet_lite", "forward_model",
           "cross_entropy", "backward_model", "parameters", "sgd_step",
           "evaluate", "train_model"]


class _Block:
    """Shared parameter plumbing; stateless blocks inherit it unchanged."""

    _trainable = ()   # (attribute name, weight-decay flag) pairs
    _state_only = ()  # non-trainable tensors that still belong in checkpoints

    def __init__(self):
        self.grads = {}

    def trainable(self):
        return [(name, getattr(self, name), decay)
                for name, decay in self._trainable]

    def set_trainable(self, name, arr):
        names = [n for n, _ in self._trainable]
        if name not in names:
            raise KeyError("%s has no parameter %r" % (type(self).__name__, name))
        current = getattr(self, name)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != current.shape:
            raise ValueError("parameter %s has shape %s, got %s"
                             % (name, current.shape, arr.shape))
        setattr(self, name, arr)

    def state_items(self):
        out = [(name, getattr(self, name)) for name, _ in self._trainable]
        out += [(name, getattr(self, name)) for name in self._state_only]
        return out


class Relu(_Block):
    def forward(self, x, mode):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Flatten(_Block):
    def forward(self, x, mode):
        self._in_shape = x.shape
        n = x.shape[0]
        return x.reshape(n, -1, 1, 1)

    def backward(self, g):
        return g.reshape(self._in_shape)


class MaxPool(_Block):
    """Non-overlapping square max pooling; window size must divide the input."""

    def __init__(self, size=2):
        super().__init__()
        if size < 1:
            raise ValueError("pool size must be positive, got %r" % (size,))
        self.size = int(size)

    def _window_view(self, x):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError("pool window %d does not tile input %dx%d"
                             % (s, h, w))
        ho, wo = h // s, w // s
        xr = x.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(xr).reshape(n, c, ho, wo, s * s)

    def forward(self, x, mode):
        self._in_shape = x.shape
        xr = self._window_view(x)
        self._idx = xr.argmax(axis=4)
        return np.take_along_axis(xr, self._idx[..., None], axis=4)[..., 0]

    def backward(self, g):
        n, c, h, w = self._in_shape
        s = self.size
        buf = np.zeros((n, c, h // s, w // s, s * s))
        np.put_along_axis(buf, self._idx[..., None], g[..., None], axis=4)
        buf = buf.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(buf).reshape(n, c, h, w)


class AvgPool(_Block):
    def __init__(self, size=2):
        super().__init__()
        if size < 1:
            raise ValueError("pool size must be positive, got %r" % (size,))
        self.size = int(size)

    def forward(self, x, mode):
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ValueError("pool window %d does not tile input %dx%d"
                             % (s, h, w))
        return x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def backward(self, g):
        s = self.size
        return np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)


class Linear(_Block):
    _trainable = (("weight", True), ("bias", True))

    def __init__(self, d_in, d_out, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d_in)
        self.weight = rng.uniform(-bound, bound, size=(d_out, d_in))
        self.bias = rng.uniform(-bound, bound, size=(d_out,))

    def forward(self, x, mode):
        n, d = x.shape[:2]
        if x.shape[2:] != (1, 1) or d != self.weight.shape[1]:
            raise ValueError("linear expects (n, %d, 1, 1), got %s"
                             % (self.weight.shape[1], x.shape))
        self._x2 = x.reshape(n, d)
        out = self._x2 @ self.weight.T + self.bias
        return out.reshape(n, -1, 1, 1)

    def backward(self, g):
        n = g.shape[0]
        g2 = g.reshape(n, -1)
        self.grads = {"weight": g2.T @ self._x2, "bias": g2.sum(axis=0)}
        return (g2 @ self.weight).reshape(n, -1, 1, 1)


class Conv2d(_Block):
    """Plain correlation layer with "same" padding, for non-CSC baselines."""

    _trainable = (("weight", True), ("bias", True))

    def __init__(self, c_in, c_out, k, stride=1, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = std * rng.standard_normal((c_out, c_in, k, k))
        self.bias = np.zeros(c_out)
        self.stride = int(stride)
        self.pad = k // 2

    def forward(self, x, mode):
        if x.shape[1] != self.weight.shape[1]:
            raise ValueError("conv expects %d channels, got %d"
                             % (self.weight.shape[1], x.shape[1]))
        self._x = x
        out = _corr2d(x, self.weight, self.stride, self.pad)
        return out + self.bias[None, :, None, None]

    def backward(self, g):
        k = self.weight.shape[2]
        self.grads = {
            "weight": _corr2d_weight_grad(self._x, g, k, self.stride, self.pad),
            "bias": g.sum(axis=(0, 2, 3)),
        }
        return _corr2d_transpose(g, self.weight, self.stride, self.pad,
                                 self._x.shape[2:])


class BatchNorm2d(_Block):
    """Per-channel normalization: batch statistics in train mode, running
    statistics in eval mode. Only the scale is weight-decayed."""

    _trainable = (("weight", True), ("bias", False))
    _state_only = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = np.ones(channels)
        self.bias = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def forward(self, x, mode):
        if x.shape[1] != self.weight.shape[0]:
            raise ValueError("batch norm expects %d channels, got %d"
                             % (self.weight.shape[0], x.shape[1]))
        if mode == "train":
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            # running variance keeps the unbiased estimate
            bessel = count / max(count - 1, 1)
            self.running_var = (1 - m) * self.running_var + m * var * bessel
            self._count = count
        else:
            mean, var = self.running_mean, self.running_var
        self._train = mode == "train"
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean[None, :, None, None]) * self._inv[None, :, None, None]
        return (self.weight[None, :, None, None] * self._xhat
                + self.bias[None, :, None, None])

    def backward(self, g):
        xhat = self._xhat
        self.grads = {"weight": (g * xhat).sum(axis=(0, 2, 3)),
                      "bias": g.sum(axis=(0, 2, 3))}
        gh = g * self.weight[None, :, None, None]
        if not self._train:
            return gh * self._inv[None, :, None, None]
        cnt = self._count
        sum_gh = gh.sum(axis=(0, 2, 3), keepdims=True)
        sum_gh_xhat = (gh * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (self._inv[None, :, None, None] / cnt
                * (cnt * gh - sum_gh - xhat * sum_gh_xhat))


# model ----------------------------------------------------------------------------


class SdNetLite:
    """Ordered layer list with at least one sparse-coding layer.

    input_mean/input_std standardize inputs inside the model, so callers
    (and adversaries) work in plain [0,1] pixel space.
    """

    def __init__(self, layers, input_mean=0.0, input_std=1.0):
        self.layers = list(layers)
        self.csc_indices = [i for i, l in enumerate(self.layers)
                            if isinstance(l, CscLayer)]
        if not self.csc_indices:
            raise ValueError("model needs at least one sparse-coding layer")
        mean = np.atleast_1d(np.asarray(input_mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(input_std, dtype=np.float64))
        if np.any(std <= 0):
            raise ValueError("input_std must be positive")
        self.input_mean = mean.reshape(1, -1, 1, 1)
        self.input_std = std.reshape(1, -1, 1, 1)
        self._forward_mode = None

    def csc_layers(self):
        return [self.layers[i] for i in self.csc_indices]

    def set_lambda(self, lam):
        """Set one shared sparsity weight on every CSC layer."""
        for layer in self.csc_layers():
            layer.set_lambda(lam)


def sdnet_lite(in_channels=1, in_hw=(28, 28), channels=(32, 64), k=5,
               num_classes=10, lam=0.1, iters=2, seed=0,
               input_mean=0.0, input_std=1.0):
    """Reference topology: (CSC -> BN -> ReLU -> MaxPool2) per stage, then
    Flatten -> Linear. Spatial size halves per stage, so in_hw must be
    divisible by 2**len(channels)."""
    layers = []
    c_prev = in_channels
    hw = tuple(in_hw)
    for j, c in enumerate(channels):
        d = random_dictionary(c_prev, c, k, seed=seed + j)
        layers += [CscLayer(d, FistaConfig(lam=lam, iters=iters), hw),
                   BatchNorm2d(c), Relu(), MaxPool(2)]
        c_prev = c
        hw = (hw[0] // 2, hw[1] // 2)
    layers += [Flatten(),
               Linear(c_prev * hw[0] * hw[1], num_classes, seed=seed + 997)]
    return SdNetLite(layers, input_mean, input_std)


def forward_model(model, x, mode="eval"):
    """Run the layer stack; returns {"logits", "residuals"} with logits of
    shape (n, classes, 1, 1) and one mean residual per CSC layer."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval', got %r" % (mode,))
    arr = (x.data - model.input_mean) / model.input_std
    residuals = []
    for i, layer in enumerate(model.layers):
        try:
            if isinstance(layer, CscLayer):
                arr = layer.forward(Tensor(arr)).data
                residuals.append(float(layer.last_residual_norm.mean()))
            else:
                arr = layer.forward(arr, mode)
        except ValueError as exc:
            raise ValueError("layer %d (%s): %s"
                             % (i, type(layer).__name__, exc)) from exc
    model._forward_mode = mode
    return {"logits": Tensor(arr), "residuals": residuals}


def cross_entropy(logits, labels):
    """Mean negative log softmax likelihood and its logits gradient."""
    arr = logits.data
    n, k = arr.shape[:2]
    if arr.shape[2:] != (1, 1):
        raise ValueError("logits must be (n, classes, 1, 1), got %s"
                         % (arr.shape,))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError("%d labels for %d items" % (labels.shape[0], n))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("labels must lie in [0, %d)" % k)
    a2 = arr.reshape(n, k)
    m = a2.max(axis=1, keepdims=True)
    e = np.exp(a2 - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    loss = float(np.mean(lse - a2[np.arange(n), labels]))
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(n), labels] -= 1.0
    grad = (p / n).reshape(n, k, 1, 1)
    return {"loss": loss, "grad_logits": Tensor._wrap(grad)}


def backward_model(model, grad_logits):
    """Chain rule down the layer list.

    Returns {"param_grads": {key: array}, "grad_input": Tensor} where keys
    are "layers.<i>.<name>" matching parameters(model). grad_input is the
    gradient in pixel space (standardization included), which is what the
    adversarial attack consumes.
    """
    if model._forward_mode is None:
        raise RuntimeError("backward_model called before forward_model")
    g = grad_logits.data
    grads = {}
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if isinstance(layer, CscLayer):
            out = layer.backward(Tensor(g))
            grads["layers.%d.kernel" % i] = out["grad_dict"].data
            g = out["grad_x"].data
        else:
            g = layer.backward(g)
            for name, ga in layer.grads.items():
                grads["layers.%d.%s" % (i, name)] = ga
    g = g / model.input_std
    return {"param_grads": grads, "grad_input": Tensor(g)}


def parameters(model):
    """Ordered (key, array, decay) triples over every trainable tensor."""
    out = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, CscLayer):
            out.append(("layers.%d.kernel" % i, layer.dict.kernel.data, False))
        else:
            for name, arr, decay in layer.trainable():
                out.append(("layers.%d.%s" % (i, name), arr, decay))
    return out


@dataclass
class SgdState:
    """Nesterov-momentum SGD with a learning-rate schedule.

    velocity buffers are keyed like parameters(model) and created lazily, so
    one state object follows one model through training.
    """

    lr: float
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    horizon: int = 5
    milestones: tuple = (0.5, 0.75)
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive, got %r" % (self.lr,))
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1), got %r"
                             % (self.momentum,))
        if self.schedule not in ("cosine", "multistep"):
            raise ValueError("schedule must be cosine or multistep, got %r"
                             % (self.schedule,))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    def lr_at(self, epoch):
        frac = min(max(epoch / self.horizon, 0.0), 1.0)
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        drops = sum(frac >= m for m in self.milestones)
        return self.lr * 0.1 ** drops

    def advance(self, key, direction):
        v = self.velocity.get(key)
        if v is None:
            v = np.zeros_like(direction)
        v = self.momentum * v + direction
        self.velocity[key] = v
        if self.nesterov:
            return direction + self.momentum * v
        return v


def sgd_step(model, grads, state, epoch):
    """One parameter update at the scheduled learning rate.

    Ordinary parameters take a decayed Nesterov step. Dictionary kernels
    skip decay, take the same momentum step, and are then projected onto the
    unit-norm set with a step-size refresh, keeping every layer's cached
    step valid for the next forward.
    """
    lr = state.lr_at(epoch)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, CscLayer):
            key = "layers.%d.kernel" % i
            if key not in grads:
                raise KeyError("missing gradient for %s" % key)
            step_dir = state.advance(key, grads[key])
            new_kernel = layer.dict.kernel.data - lr * step_dir
            d = ConvDictionary(Tensor(new_kernel), stride=layer.dict.stride)
            layer.set_dictionary(project_to_n(d))
        else:
            for name, arr, decay in layer.trainable():
                key = "layers.%d.%s" % (i, name)
                if key not in grads:
                    raise KeyError("missing gradient for %s" % key)
                direction = grads[key]
                if decay and state.weight_decay:
                    direction = direction + state.weight_decay * arr
                step_dir = state.advance(key, direction)
                layer.set_trainable(name, arr - lr * step_dir)


# training loop ---------------------------------------------------------------------


def evaluate(model, images, labels, batch_size=256, return_predictions=False):
    """Eval-mode accuracy, mean cross-entropy, and mean CSC residual."""
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    correct = 0
    loss_sum = 0.0
    residual_sum = 0.0
    preds = np.empty(n, dtype=np.int64) if return_predictions else None
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        xb = Tensor(np.ascontiguousarray(images[lo:hi]))
        out = forward_model(model, xb, "eval")
        logits = out["logits"].data.reshape(hi - lo, -1)
        batch_pred = logits.argmax(axis=1)
        if preds is not None:
            preds[lo:hi] = batch_pred
        correct += int((batch_pred == labels[lo:hi]).sum())
        loss_sum += cross_entropy(out["logits"], labels[lo:hi])["loss"] * (hi - lo)
        residual_sum += float(np.mean(out["residuals"])) * (hi - lo)
    report = {"accuracy": correct / n, "loss": loss_sum / n,
              "mean_residual": residual_sum / n}
    if return_predictions:
        report["predictions"] = preds
    return report


def train_model(model, images, labels, state, epochs, batch_size=128, seed=0,
                test_images=None, test_labels=None, stop_accuracy=None,
                augment_fn=None, log=None):
    """Epoch loop over shuffled minibatches; returns per-epoch history rows.

    Each row records epoch, mean train loss, learning rate at the epoch
    start, mean CSC residual, and (when test data is given) test accuracy.
    stop_accuracy ends training early once test accuracy reaches it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    steps = max(1, -(-n // batch_size))
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_images = images[order]
        epoch_labels = labels[order]
        if augment_fn is not None:
            epoch_images = augment_fn(epoch_images, rng)
        loss_sum = 0.0
        residual_sum = 0.0
        seen = 0
        for b in range(steps):
            lo, hi = b * batch_size, min((b + 1) * batch_size, n)
            if lo >= hi:
                break
            xb = Tensor(np.ascontiguousarray(epoch_images[lo:hi]))
            out = forward_model(model, xb, "train")
            ce = cross_entropy(out["logits"], epoch_labels[lo:hi])
            back = backward_model(model, ce["grad_logits"])
            sgd_step(model, back["param_grads"], state, epoch + b / steps)
            loss_sum += ce["loss"] * (hi - lo)
            residual_sum += float(np.mean(out["residuals"])) * (hi - lo)
            seen += hi - lo
        row = {"epoch": epoch,
               "train_loss": loss_sum / seen,
               "lr": state.lr_at(epoch),
               "mean_residual": residual_sum / seen}
        if test_images is not None:
            row["test_accuracy"] = evaluate(model, test_images,
                                            test_labels)["accuracy"]
        history.append(row)
        if log is not None:
            log(row)
        if (stop_accuracy is not None and test_images is not None
                and row["test_accuracy"] >= stop_accuracy):
            break
    return history
