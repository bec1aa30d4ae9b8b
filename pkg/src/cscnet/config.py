"""Flat key=value run configuration.

One schema backs both the config file and command-line overrides: every
value arrives as a string, goes through the same parser, and is validated
before any command does work. Precedence is defaults < file < flags.
"""

import os

import numpy as np

__all__ = ["RunConfig", "parse_config_file", "parse_lambda_grid"]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean, got %r" % s)


def _int_tuple(s):
    return tuple(int(tok) for tok in s.split(",") if tok.strip())


def _number(tok):
    # severity levels stay ints (table lookup); anything with a decimal
    # point is a direct noise parameter
    tok = tok.strip()
    try:
        return int(tok)
    except ValueError:
        return float(tok)


def _severities(s):
    return tuple(_number(tok) for tok in s.split(",") if tok.strip())


def parse_lambda_grid(s):
    """Either "lo:hi:n" (inclusive linspace) or a comma list."""
    if ":" in s:
        lo, hi, n = s.split(":")
        return tuple(float(v) for v in np.linspace(float(lo), float(hi), int(n)))
    return tuple(float(tok) for tok in s.split(",") if tok.strip())


def _optional_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _str(s):
    return s.strip()


# name -> (default string or None, parser)
SCHEMA = {
    "dataset": ("mnist", _str),
    "data_root": (None, _str),
    "out_dir": ("runs", _str),
    "channels": ("32,64", _int_tuple),
    "k": ("5", int),
    "num_classes": ("10", int),
    "lam": ("0.1", float),
    "iters": ("2", int),
    "seed": ("0", int),
    "epochs": ("5", int),
    "batch_size": ("128", int),
    "lr": ("0.1", float),
    "momentum": ("0.9", float),
    "weight_decay": ("5e-4", float),
    "schedule": ("cosine", _str),
    "horizon": ("", _optional_float),
    "stop_accuracy": ("", _optional_float),
    "pad_crop": ("0", int),
    "hflip": ("false", _bool),
    "kind": ("gaussian", _str),
    "severities": ("0,1,2,3,4", _severities),
    "lambda_grid": ("0.1:1.5:15", parse_lambda_grid),
    "subsample": ("2000", int),
    "norm": ("linf", _str),
    "eps": ("0.1", float),
    "step": ("", _optional_float),
    "attack_iters": ("20", int),
    "count": ("256", int),
}

_DATASETS = {"mnist": (1, (28, 28)), "digits": (1, (28, 28)),
             "cifar10": (3, (32, 32))}


def parse_config_file(path):
    """key=value lines; blank lines and # comments are skipped."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value, got %r"
                                 % (path, lineno, line))
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Parsed, validated settings; attributes mirror SCHEMA keys."""

    def __init__(self, file_values=None, overrides=None):
        merged = {k: default for k, (default, _) in SCHEMA.items()}
        for source in (file_values or {}), (overrides or {}):
            for key, value in source.items():
                if key not in SCHEMA:
                    raise ValueError("unknown config key %r" % key)
                merged[key] = value
        for key, raw in merged.items():
            parser = SCHEMA[key][1]
            if raw is None:
                setattr(self, key, None)
                continue
            try:
                setattr(self, key, parser(raw))
            except ValueError as exc:
                raise ValueError("config key %s: %s" % (key, exc)) from exc
        if self.data_root is None:
            self.data_root = os.environ.get("CSCNET_DATA", "data")
        self._validate()

    def _validate(self):
        if self.dataset not in _DATASETS:
            raise ValueError("dataset must be one of %s, got %r"
                             % (sorted(_DATASETS), self.dataset))
        if not self.channels:
            raise ValueError("channels must be nonempty")
        if any(c < 1 for c in self.channels):
            raise ValueError("channels must be positive, got %s"
                             % (self.channels,))
        for name, cond in [("k", self.k >= 1), ("num_classes", self.num_classes >= 2),
                           ("lam", self.lam > 0), ("iters", self.iters >= 1),
                           ("epochs", self.epochs >= 0),
                           ("batch_size", self.batch_size >= 1),
                           ("lr", self.lr > 0),
                           ("weight_decay", self.weight_decay >= 0),
                           ("pad_crop", self.pad_crop >= 0),
                           ("subsample", self.subsample >= 1),
                           ("eps", self.eps > 0),
                           ("attack_iters", self.attack_iters >= 0),
                           ("count", self.count >= 1)]:
            if not cond:
                raise ValueError("config key %s is out of range (%r)"
                                 % (name, getattr(self, name)))
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.schedule not in ("cosine", "multistep"):
            raise ValueError("schedule must be cosine or multistep")
        if self.norm not in ("linf", "l2"):
            raise ValueError("norm must be linf or l2")
        if self.kind not in ("gaussian", "shot", "speckle", "impulse"):
            raise ValueError("kind must be a known corruption type")
        if not self.severities:
            raise ValueError("severities must be nonempty")
        if not self.lambda_grid:
            raise ValueError("lambda_grid must be nonempty")
        if any(b <= a for a, b in zip(self.lambda_grid, self.lambda_grid[1:])):
            raise ValueError("lambda_grid must be strictly ascending")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive when set")
        in_channels, in_hw = _DATASETS[self.dataset]
        self.in_channels = in_channels
        self.in_hw = in_hw
        stages = len(self.channels)
        if in_hw[0] % (2 ** stages) or in_hw[1] % (2 ** stages):
            raise ValueError("input %dx%d is not divisible by the %d pooling "
                             "stages" % (in_hw[0], in_hw[1], stages))

    def topology(self):
        return dict(in_channels=self.in_channels, in_hw=self.in_hw,
                    channels=self.channels, k=self.k,
                    num_classes=self.num_classes, iters=self.iters)
