"""Reconstruction cascades, dictionary atom grids, and sparsity histograms.

reconstruct runs the model forward to the requested CSC layer, then maps
the code back to pixel space by applying the dictionaries in reverse.
Pooling and normalization layers have no generative inverse, so the
cascade skips them and restores spatial size with nearest-neighbor
upsampling between dictionary applications.
"""

import numpy as np

from .convops import apply
from .csclayer import CscLayer
from .tensor import Tensor

__all__ = ["reconstruct", "psnr", "dictionary_grid", "write_ppm", "read_ppm",
           "sparsity_histogram", "histogram_csv"]


def _upsample_nearest(arr, hw):
    h, w = arr.shape[2], arr.shape[3]
    th, tw = hw
    if (th, tw) == (h, w):
        return arr
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return arr[:, :, rows][:, :, :, cols]


def _forward_capture(model, x):
    """Eval forward pass keeping each CSC layer's code and input size."""
    arr = (x.data - model.input_mean) / model.input_std
    codes = []
    in_sizes = []
    for layer in model.layers:
        if isinstance(layer, CscLayer):
            in_sizes.append(arr.shape[2:])
            arr = layer.forward(Tensor(arr)).data
            codes.append(arr)
        else:
            arr = layer.forward(arr, "eval")
    return codes, in_sizes


def reconstruct(model, x, upto_layer):
    """Map the upto_layer-th CSC code back to pixel space.

    The cascade applies dictionary upto_layer, upsamples to the next
    shallower code grid, and repeats down to the first dictionary; the
    result is de-standardized so it lives in the same [0,1]-ish pixel space
    as x and has x's shape.
    """
    depth = len(model.csc_indices)
    if not 1 <= upto_layer <= depth:
        raise ValueError("layer %d out of range: model has %d CSC layers"
                         % (upto_layer, depth))
    codes, in_sizes = _forward_capture(model, x)
    dicts = [model.layers[i].dict for i in model.csc_indices]
    arr = codes[upto_layer - 1]
    for i in range(upto_layer - 1, -1, -1):
        arr = _upsample_nearest(arr, codes[i].shape[2:])
        arr = apply(dicts[i], Tensor(arr), out_hw=in_sizes[i]).data
    return Tensor(arr * model.input_std + model.input_mean)


def psnr(a, b, peak=1.0):
    """10*log10(peak^2 / MSE); inf on identical inputs."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (a.shape, b.shape))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def dictionary_grid(d):
    """Tile each code channel's atom into a near-square grid.

    Atoms are min-max normalized per channel (flat atoms render as 0.5);
    tiles sit in a 1-pixel black frame; trailing tiles of a non-square
    channel count stay blank. Returns (M, H, W) pixels in [0,1] with
    M in {1, 3}.
    """
    kernel = d.kernel.data
    m, c, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if m not in (1, 3):
        raise ValueError("cannot render %d-channel atoms as an image" % m)
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    out = np.zeros((m, rows * (k + 1) + 1, cols * (k + 1) + 1))
    for j in range(c):
        atom = kernel[:, j]
        lo, hi = atom.min(), atom.max()
        tile = (atom - lo) / (hi - lo) if hi > lo else np.full_like(atom, 0.5)
        r, q = divmod(j, cols)
        out[:, 1 + r * (k + 1):1 + r * (k + 1) + k,
                1 + q * (k + 1):1 + q * (k + 1) + k] = tile
    return out


def write_ppm(path, pixels):
    """Binary P6 encoder; grayscale input is replicated to RGB."""
    arr = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError("expected (1|3, H, W) pixels, got %s" % (arr.shape,))
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    quantized = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255), 0, 255)
    rgb = quantized.astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
        fh.write(rgb.tobytes())


def read_ppm(path):
    """P5/P6 decoder for maxval-255 files; returns (C, H, W) in [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] not in (b"P5", b"P6"):
        raise ValueError("%s: not a P5/P6 file" % path)
    channels = 3 if raw[:2] == b"P6" else 1
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte ends the header
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("%s: unsupported maxval %d" % (path, maxval))
    count = channels * h * w
    body = raw[pos:pos + count]
    if len(body) != count:
        raise ValueError("%s: truncated pixel data" % path)
    flat = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return flat.reshape(h, w, 3).transpose(2, 0, 1)
    return flat.reshape(1, h, w)


def sparsity_histogram(model, images, batch_size=128):
    """First-CSC-layer code statistics over a dataset.

    Returns {"bins": [(left, right, count)], "zero_fraction", "zero_count",
    "total"}. Exact zeros get their own count and stay out of the 101
    symmetric bins, which would otherwise be dominated by the zero spike.
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    first = model.csc_indices[0]

    def code_batches():
        for lo in range(0, arr.shape[0], batch_size):
            xb = (arr[lo:lo + batch_size] - model.input_mean) / model.input_std
            for layer in model.layers[:first]:
                xb = layer.forward(xb, "eval")
            yield model.layers[first].forward(Tensor(xb)).data

    vmax = 0.0
    zero_count = 0
    total = 0
    for code in code_batches():
        vmax = max(vmax, float(np.abs(code).max()))
        zero_count += int((code == 0.0).sum())
        total += code.size
    if total == 0:
        raise ValueError("no images to histogram")
    span = vmax if vmax > 0.0 else 1.0
    edges = np.linspace(-span, span, 102)
    counts = np.zeros(101, dtype=np.int64)
    for code in code_batches():
        vals = code[code != 0.0]
        counts += np.histogram(vals, bins=edges)[0]
    bins = [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(101)]
    return {"bins": bins, "zero_fraction": zero_count / total,
            "zero_count": zero_count, "total": total}


def histogram_csv(path, hist):
    """CSV rows bin_left,bin_right,count under a zero-fraction comment."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# zero_fraction=%s\n" % repr(hist["zero_fraction"]))
        fh.write("bin_left,bin_right,count\n")
        for left, right, count in hist["bins"]:
            fh.write("%s,%s,%d\n" % (repr(left), repr(right), count))
