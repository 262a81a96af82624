"""Experiment configuration, fingerprints and replica seeding."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .noise import ALPHA_MIN

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# keys that do not change results and are left out of the fingerprint
NON_SEMANTIC = ("output", "workers")

DEFAULTS = {
    "grid": {"L": 3.0, "N": 16, "T": 1.0, "steps": 128},
    "noise": {"beta": 1.0, "alpha": 1.5, "seed": 20240611},
    "solver": {
        "sigma": {"kind": "tanh", "scale": 1.0, "offset": 1.0},
        "drift": {"kind": "zero"},
        "preset": "wong_zakai",
        "dealias": False,
        "wz_truncation": "full",
        "control": {"direction": 1, "amplitude": 1.0},
    },
    "levels": [3, 4, 5, 6, 7],
    "window": {
        "rho": 0.25,
        "t0": 0.5,
        "side": 0.5625,
        "lower": None,
        "policy": "dyadic",
        "max_pairs": 1000000,
    },
    "replicas": 200,
    "batch": 16,
    "p": 2.0,
    "lambda": None,
    "workers": 1,
    "output": "wave3d-out",
    "quadrature": {"polar": 16, "azimuth": 32},
    "noise_check": {
        "N": 16,
        "covariance_samples": 10000,
        "lags": [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1],
                 [2, 0, 0], [0, 2, 1], [1, 1, 1], [3, 0, 0], [2, 2, 2]],
        "variance_samples": 100000,
        "localization_levels": [3, 4, 5, 6, 7, 8],
        "localization_tableaux": 10000,
    },
    "green_check": {"betas": [0.5, 1.0, 1.5], "N": 64, "L": 4.0, "mass_pairs": 20},
    "simulate": {
        "sigma": {"kind": "constant", "value": 1.0},
        "drift": {"kind": "zero"},
        "replicas": 2000,
        "steps": 64,
        "times": [0.25, 0.5, 1.0],
        "point": [8, 8, 8],
        "shifts": [[2, 0, 0], [0, 3, 0], [1, 1, 1]],
        "export": False,
    },
    "regularity": {
        "betas": [0.5, 1.0, 1.5],
        "replicas": 1000,
        "separations": [1, 2, 4],
        "mode": "space",
        "time": 1.0,
        "localization_level": 7,
        "band": [0.4, 0.6],
    },
    "oracle": {"N": 8, "steps": 16, "seeds": 5, "iterations": 60, "tolerance": 0.05},
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigurationError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("sigma", "drift"):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def fingerprint(config: dict) -> str:
    """Content hash of the semantic keys; independent of key order."""
    sem = {k: v for k, v in config.items() if k not in NON_SEMANTIC}
    blob = json.dumps(sem, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _mix64(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def seed_stream(master_seed, replica_index) -> int:
    """Replica seed from a SplitMix64 counter.

    The stream of a master seed is mix(mix(master) + i * golden) with the
    golden-ratio odd increment. ``mix`` is a bijection on 64-bit words and
    the counter does not repeat before 2^64 steps, so seeds within a stream
    never collide. This derivation is part of the reproducibility contract.
    """
    base = _mix64(int(master_seed) & MASK64)
    return _mix64((base + int(replica_index) * _GOLDEN) & MASK64)


def seed_streams(master_seed, indices) -> np.ndarray:
    """Vectorised seed_stream over an index array (uint64 result)."""
    idx = np.asarray(indices, dtype=np.uint64)
    base = np.uint64(_mix64(int(master_seed) & MASK64))
    with np.errstate(over="ignore"):
        z = base + idx * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view over a configuration document."""

    data: dict

    @classmethod
    def from_dict(cls, override=None):
        cfg = cls(_merge(DEFAULTS, override or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read configuration {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("configuration must be a JSON object")
        return cls.from_dict(doc)

    def with_overrides(self, **sections):
        return ExperimentConfig.from_dict(_merge(self.data, sections))

    def __getitem__(self, key):
        return self.data[key]

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.data)

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    @property
    def dt(self) -> float:
        g = self.data["grid"]
        return g["T"] / g["steps"]

    @property
    def window_lower(self):
        """Lower corner of the observation box K (snapped up to the grid)."""
        g, w = self.data["grid"], self.data["window"]
        if w["lower"] is not None:
            lo = w["lower"]
            return [float(v) for v in (lo if isinstance(lo, list) else [lo] * 3)]
        h = g["L"] / g["N"]
        start = math.ceil((g["L"] / 2 - w["side"] / 2) / h - 1e-9) * h
        return [start] * 3

    def validate(self):
        d = self.data
        g, nz, w = d["grid"], d["noise"], d["window"]
        if not (0 < nz["beta"] < 2):
            raise ConfigurationError("beta must lie in (0, 2)")
        if not nz["alpha"] > ALPHA_MIN:
            raise ConfigurationError(f"alpha must exceed {ALPHA_MIN:.4f}")
        if int(d["replicas"]) < 1 or int(d["batch"]) < 1:
            raise ConfigurationError("replicas and batch must be at least 1")
        steps = int(g["steps"])
        if steps < 1 or steps & (steps - 1):
            raise ConfigurationError("steps must be a power of two")
        levels = list(d["levels"])
        if levels != sorted(set(levels)) or not levels or levels[0] < 1:
            raise ConfigurationError("levels must be strictly increasing positive integers")
        if 2 ** max(levels) > steps:
            raise ConfigurationError("dt must divide 2^-max(levels) T")
        if not (0 < w["rho"] < 1):
            raise ConfigurationError("rho must lie in (0, 1)")
        if not (0 < w["t0"] < g["T"]):
            raise ConfigurationError("t0 must lie in (0, T)")
        if w["side"] <= 0:
            raise ConfigurationError("window side must be positive")
        diam = w["side"] * math.sqrt(3.0)
        if g["L"] < diam + 2 * g["T"] - 1e-12:
            raise ConfigurationError("need L >= diam(K) + 2T")
        margin = g["T"] - w["t0"]
        lo = self.window_lower
        if min(lo) - margin < -1e-12 or max(lo) + w["side"] + margin > g["L"] + 1e-12:
            raise ConfigurationError("window K expanded by T - t0 leaves the torus")
        if w["policy"] not in ("dyadic", "all"):
            raise ConfigurationError("window policy must be 'dyadic' or 'all'")
        if d["p"] <= 0:
            raise ConfigurationError("p must be positive")
        if d["solver"]["wz_truncation"] not in ("literal", "full"):
            raise ConfigurationError("wz_truncation must be 'literal' or 'full'")
        if d["solver"]["preset"] not in ("wong_zakai", "girsanov"):
            raise ConfigurationError("unknown coefficient preset")
