"""Binary trajectory container with a JSON sidecar.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the displacement frames and (if present) the velocity frames as
little-endian float64 in C order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .noise import TorusGrid
from .solver import Trajectory

MAGIC = b"W3DTRJ01"


def _header(traj: Trajectory) -> dict:
    g = traj.grid
    return {
        "format": "wave3d-trajectory",
        "version": 1,
        "fingerprint": traj.fingerprint,
        "grid": {"L": g.L, "N": g.N, "T": g.T, "dt": g.dt},
        "beta": traj.beta,
        "drive": traj.drive,
        "times": [float(t) for t in traj.times],
        "shape": list(traj.u.shape),
        "has_velocity": traj.v is not None,
        "dtype": "<f8",
    }


def write_trajectory(traj: Trajectory, path) -> Path:
    """Write the container and a ``.json`` sidecar next to it."""
    path = Path(path)
    header = _header(traj)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(traj.u, dtype="<f8").tobytes())
        if traj.v is not None:
            fh.write(np.ascontiguousarray(traj.v, dtype="<f8").tobytes())
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(header, indent=2, sort_keys=True))
    return side


def read_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValidationError("not a trajectory container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    shape = tuple(header["shape"])
    size = int(np.prod(shape))
    off = 16 + hlen
    expected = size * 8 * (2 if header["has_velocity"] else 1)
    if len(data) - off != expected:
        raise ValidationError("trajectory payload has the wrong length")
    u = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
    v = None
    if header["has_velocity"]:
        v = np.frombuffer(data, dtype="<f8", count=size, offset=off + size * 8).reshape(shape).astype(float)
    g = header["grid"]
    return Trajectory(
        TorusGrid(g["L"], g["N"], g["T"], g["dt"]),
        header["beta"],
        np.array(header["times"], dtype=float),
        u,
        v,
        header["drive"],
        header["fingerprint"],
    )
