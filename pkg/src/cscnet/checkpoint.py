"""Binary checkpoint format and model serialization.

Layout: 8-byte magic "CSCNET01", u32 version, a length-prefixed UTF-8
key=value config blob, a u32 record count, then one record per tensor:
length-prefixed name, dtype tag (0 = float64), u32 rank, u64 extents, and
the raw little-endian payload. Records and config lines are written in
sorted order so identical state produces identical bytes.

Scalar layer state (cached step sizes, sparsity weights) rides in the
config blob as repr'd floats, which round-trip bit-exactly. save_model /
load_model understand the sdnet_lite reference family: the topology is
described in the config, rebuilt, and every tensor (including batch-norm
running statistics and the input standardization constants) is restored
bit-for-bit.
"""

import struct

import numpy as np

from .convops import ConvDictionary
from .csclayer import CscLayer
from .nn import sdnet_lite
from .tensor import Tensor

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint",
           "model_state", "model_config", "save_model", "load_model"]

MAGIC = b"CSCNET01"
VERSION = 1
_F64_TAG = 0


def save_checkpoint(path, tensors, config):
    """Write name->array tensors plus str->str config to path."""
    blob = "".join("%s=%s\n" % (k, config[k]) for k in sorted(config))
    blob = blob.encode("utf-8")
    names = sorted(tensors)
    if len(names) != len(set(names)):
        raise ValueError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BI", _F64_TAG, arr.ndim))
            fh.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


class _Cursor:
    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise ValueError("%s: truncated checkpoint" % self.path)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Read back (tensors, config); every array is bit-identical to what
    save_checkpoint wrote."""
    with open(path, "rb") as fh:
        raw = fh.read()
    cur = _Cursor(raw, path)
    if cur.take(8) != MAGIC:
        raise ValueError("%s: bad magic, not a checkpoint" % path)
    version = cur.u32()
    if version != VERSION:
        raise ValueError("%s: version %d, expected %d" % (path, version, VERSION))
    config = {}
    blob = cur.take(cur.u32()).decode("utf-8")
    for line in blob.splitlines():
        key, _, value = line.partition("=")
        config[key] = value
    tensors = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        tag, rank = struct.unpack("<BI", cur.take(5))
        if tag != _F64_TAG:
            raise ValueError("%s: unknown dtype tag %d" % (path, tag))
        shape = struct.unpack("<%dQ" % rank, cur.take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(cur.take(8 * count), dtype="<f8").reshape(shape)
        if name in tensors:
            raise ValueError("%s: duplicate tensor %r" % (path, name))
        tensors[name] = arr.copy()
    if cur.pos != len(raw):
        raise ValueError("%s: %d trailing bytes" % (path, len(raw) - cur.pos))
    return tensors, config


# model serialization ----------------------------------------------------------------


def model_state(model):
    """Every tensor the model owns, keyed like parameters(model), plus
    batch-norm running statistics and the input standardization."""
    out = {"input_mean": model.input_mean, "input_std": model.input_std}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, CscLayer):
            out["layers.%d.kernel" % i] = layer.dict.kernel.data
        else:
            for name, arr in layer.state_items():
                out["layers.%d.%s" % (i, name)] = arr
    return out


def model_config(model, topology, extra=None):
    """Config blob for a sdnet_lite-family model; topology is the kwargs
    dict the model was built from."""
    config = {
        "format": "sdnet-lite",
        "model.in_channels": str(int(topology["in_channels"])),
        "model.in_hw": "%d,%d" % tuple(topology["in_hw"]),
        "model.channels": ",".join(str(int(c)) for c in topology["channels"]),
        "model.k": str(int(topology["k"])),
        "model.num_classes": str(int(topology["num_classes"])),
        "model.iters": str(int(topology["iters"])),
    }
    for i in model.csc_indices:
        layer = model.layers[i]
        config["layers.%d.lam" % i] = repr(layer.cfg.lam)
        config["layers.%d.cached_step" % i] = repr(layer.cached_step)
        config["layers.%d.cached_lambda_dom" % i] = repr(layer.cached_lambda_dom)
    if extra:
        config.update({str(k): str(v) for k, v in extra.items()})
    return config


def save_model(path, model, topology, extra=None):
    save_checkpoint(path, model_state(model), model_config(model, topology, extra))


def load_model(path):
    """Rebuild the model a save_model checkpoint describes.

    Returns (model, config). Tensors are restored bit-exactly; each CSC
    layer's cached step comes back through the config blob, so the model is
    immediately ready for forward passes.
    """
    tensors, config = load_checkpoint(path)
    if config.get("format") != "sdnet-lite":
        raise ValueError("%s: not a sdnet-lite checkpoint" % path)
    model = sdnet_lite(
        in_channels=int(config["model.in_channels"]),
        in_hw=tuple(int(v) for v in config["model.in_hw"].split(",")),
        channels=tuple(int(v) for v in config["model.channels"].split(",")),
        k=int(config["model.k"]),
        num_classes=int(config["model.num_classes"]),
        iters=int(config["model.iters"]),
    )
    model.input_mean = tensors["input_mean"].copy()
    model.input_std = tensors["input_std"].copy()
    for i, layer in enumerate(model.layers):
        prefix = "layers.%d." % i
        if isinstance(layer, CscLayer):
            d = ConvDictionary(Tensor(tensors[prefix + "kernel"]),
                               stride=layer.dict.stride)
            layer.dict = d
            layer.cfg = layer.cfg.with_lam(float(config[prefix + "lam"]))
            layer.cached_step = float(config[prefix + "cached_step"])
            layer.cached_lambda_dom = float(config[prefix + "cached_lambda_dom"])
            layer._step_kernel = d.kernel
            layer._cached_v = None
        else:
            trainable_names = {name for name, _, _ in layer.trainable()}
            for name, current in layer.state_items():
                key = prefix + name
                if key not in tensors:
                    raise ValueError("%s: missing tensor %r" % (path, key))
                arr = tensors[key]
                if arr.shape != np.shape(current):
                    raise ValueError("%s: tensor %r has shape %s, expected %s"
                                     % (path, key, arr.shape, np.shape(current)))
                if name in trainable_names:
                    layer.set_trainable(name, arr)
                else:
                    setattr(layer, name, arr.copy())
    return model, config
