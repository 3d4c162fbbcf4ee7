"""Dataset assembly, normalization, noise injection and the binary dataset format.

File layout (all integers little-endian)::

    b"MFSRDAT1" | u32 header length | UTF-8 JSON header
    | HR blob (float32, [C,T,Z,X] row-major) | u32 CRC32 of HR blob
    | LR blob (float32, [C,T,Z,X] row-major) | u32 CRC32 of LR blob

Single fields (inference output) use the same preamble with ``"kind": "field"``
and one blob.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import FLOW_CHANNELS, Field4

MAGIC = b"MFSRDAT1"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed, truncated or corrupted dataset file."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass
class Dataset:
    hr: Field4
    lr: Field4
    norm_stats: dict[str, tuple[float, float]]
    Ra: float = 1e5
    Pr: float = 1.0
    d_s: int = 8
    d_t: int = 4
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for ax, d in zip(range(3), (self.d_t, self.d_s, self.d_s)):
            if self.hr.extents[ax] != self.lr.extents[ax] * d:
                raise ValueError(
                    f"LR extents {self.lr.extents} are not HR extents {self.hr.extents} / "
                    f"({self.d_t}, {self.d_s}, {self.d_s})")
        for ch in self.hr.channels:
            if ch not in self.norm_stats:
                raise ValueError(f"missing normalization stats for channel {ch!r}")
            if not self.norm_stats[ch][1] > 0:
                raise ValueError(f"normalization std for {ch!r} must be positive")

    @property
    def channels(self) -> tuple[str, ...]:
        return self.hr.channels

    def stats_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        mean = np.array([self.norm_stats[c][0] for c in self.channels])
        std = np.array([self.norm_stats[c][1] for c in self.channels])
        return mean, std


def downsample(hr: Field4, d_s: int, d_t: int) -> Field4:
    """Strided subsampling: keep every d-th node from index 0 in t, z and x."""
    if d_s < 1 or d_t < 1:
        raise ValueError("downsampling factors must be >= 1")
    T, Z, X = hr.extents
    if T % d_t or Z % d_s or X % d_s:
        raise ValueError(f"extents {hr.extents} not divisible by (d_t={d_t}, d_s={d_s})")
    data = hr.data[:, ::d_t, ::d_s, ::d_s].copy()
    spacing = (hr.spacing[0] * d_t, hr.spacing[1] * d_s, hr.spacing[2] * d_s)
    return Field4(hr.channels, data, spacing, hr.origin, dict(hr.meta))


def channel_stats(f: Field4) -> dict[str, tuple[float, float]]:
    stats = {}
    for i, ch in enumerate(f.channels):
        x = f.data[i]
        stats[ch] = (float(x.mean()), float(x.std()))
    return stats


def normalize(f: Field4, stats: dict[str, tuple[float, float]] | None = None
              ) -> tuple[Field4, dict[str, tuple[float, float]]]:
    """Per-channel ``(x - mean) / std``; statistics default to the field's own."""
    if stats is None:
        stats = channel_stats(f)
    mean = np.array([stats[c][0] for c in f.channels])
    std = np.array([stats[c][1] for c in f.channels])
    if np.any(std <= 0):
        bad = [c for c, s in zip(f.channels, std) if s <= 0]
        raise ValueError(f"zero-variance channel(s): {bad}")
    out = f.with_data((f.data - mean[:, None, None, None]) / std[:, None, None, None])
    out.meta["normalized"] = True
    return out, stats


def denormalize(f: Field4, stats: dict[str, tuple[float, float]]) -> Field4:
    mean = np.array([stats[c][0] for c in f.channels])
    std = np.array([stats[c][1] for c in f.channels])
    out = f.with_data(f.data * std[:, None, None, None] + mean[:, None, None, None])
    out.meta["normalized"] = False
    return out


def add_gaussian_noise(f: Field4, rng: np.random.Generator | int, scale: float = 1.0) -> Field4:
    """Add i.i.d. N(0, scale^2) noise to a normalized field."""
    if not f.meta.get("normalized", False):
        raise ValueError("noise is defined in normalized space; normalize the field first")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = f.with_data(f.data + scale * rng.standard_normal(f.data.shape))
    out.meta["noise_std"] = scale
    return out


def _f32(f: Field4) -> Field4:
    return f.with_data(f.data.astype(np.float32).astype(np.float64))


def make_dataset(hr: Field4, d_s: int = 8, d_t: int = 4, Ra: float | None = None,
                 Pr: float | None = None, seed: int | None = None) -> Dataset:
    """Downsample ``hr`` and attach HR-derived normalization statistics.

    Values are rounded to float32 up front so that a save/load round trip is exact.
    """
    sim = hr.meta.get("sim", {})
    hr = _f32(hr)
    lr = downsample(hr, d_s, d_t)
    stats = channel_stats(hr)
    return Dataset(
        hr=hr, lr=lr, norm_stats=stats,
        Ra=float(Ra if Ra is not None else sim.get("Ra", 1e5)),
        Pr=float(Pr if Pr is not None else sim.get("Pr", 1.0)),
        d_s=d_s, d_t=d_t,
        seed=int(seed if seed is not None else sim.get("seed", 0)),
        provenance={"sim": sim, "d_s": d_s, "d_t": d_t},
    )


# -- file I/O ----------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    hr = ds.hr.data.astype("<f4")
    lr = ds.lr.data.astype("<f4")
    header = {
        "version": FORMAT_VERSION,
        "kind": "dataset",
        "channels": list(ds.channels),
        "hr_shape": list(hr.shape),
        "lr_shape": list(lr.shape),
        "spacing": list(ds.hr.spacing),
        "origin": list(ds.hr.origin),
        "Ra": ds.Ra,
        "Pr": ds.Pr,
        "d_s": ds.d_s,
        "d_t": ds.d_t,
        "norm_stats": {k: list(v) for k, v in ds.norm_stats.items()},
        "seed": ds.seed,
        "provenance": ds.provenance,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    hb, lb = hr.tobytes(), lr.tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(hb)
        fh.write(struct.pack("<I", zlib.crc32(hb)))
        fh.write(lb)
        fh.write(struct.pack("<I", zlib.crc32(lb)))


def _read_blob(buf: bytes, pos: int, shape, label: str) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape)) * 4
    if pos + n + 4 > len(buf):
        raise DatasetFormatError("truncated", f"{label} blob ends past end of file")
    blob = buf[pos:pos + n]
    (crc,) = struct.unpack_from("<I", buf, pos + n)
    if zlib.crc32(blob) != crc:
        raise DatasetFormatError("checksum", f"{label} blob CRC32 mismatch")
    arr = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)
    return arr, pos + n + 4


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    header, pos = _read_header(buf)
    if header.get("kind", "dataset") != "dataset":
        raise DatasetFormatError("kind", f"file holds a {header.get('kind')!r}, not a dataset")
    hr, pos = _read_blob(buf, pos, header["hr_shape"], "HR")
    lr, pos = _read_blob(buf, pos, header["lr_shape"], "LR")
    if pos != len(buf):
        raise DatasetFormatError("trailing", f"{len(buf) - pos} unexpected trailing bytes")
    channels = tuple(header["channels"])
    d_s, d_t = int(header["d_s"]), int(header["d_t"])
    spacing = tuple(header["spacing"])
    origin = tuple(header["origin"])
    hr_f = Field4(channels, hr, spacing, origin)
    lr_f = Field4(channels, lr, (spacing[0] * d_t, spacing[1] * d_s, spacing[2] * d_s), origin)
    return Dataset(
        hr=hr_f, lr=lr_f,
        norm_stats={k: (float(v[0]), float(v[1])) for k, v in header["norm_stats"].items()},
        Ra=float(header["Ra"]), Pr=float(header["Pr"]), d_s=d_s, d_t=d_t,
        seed=int(header["seed"]), provenance=header.get("provenance", {}),
    )


def save_field(f: Field4, path, extra: dict | None = None) -> None:
    """Store one Field4 (e.g. an inference result) in the same framed format.

    The header carries ``"kind": "field"`` and a single float32 blob follows.
    """
    arr = f.data.astype("<f4")
    header = {
        "version": FORMAT_VERSION,
        "kind": "field",
        "channels": list(f.channels),
        "shape": list(arr.shape),
        "spacing": list(f.spacing),
        "origin": list(f.origin),
        "meta": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))


def _read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 12:
        raise DatasetFormatError("truncated", "file shorter than the fixed preamble")
    if buf[:8] != MAGIC:
        raise DatasetFormatError("magic", f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    if 12 + hlen > len(buf):
        raise DatasetFormatError("truncated", "header extends past end of file")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError("header", f"unreadable JSON header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError("version", f"unsupported version {header.get('version')}")
    return header, 12 + hlen


def load_field(path) -> Field4:
    buf = Path(path).read_bytes()
    header, pos = _read_header(buf)
    if header.get("kind") != "field":
        raise DatasetFormatError("kind", "file does not hold a single field")
    arr, pos = _read_blob(buf, pos, header["shape"], "field")
    if pos != len(buf):
        raise DatasetFormatError("trailing", f"{len(buf) - pos} unexpected trailing bytes")
    return Field4(tuple(header["channels"]), arr, tuple(header["spacing"]),
                  tuple(header["origin"]), dict(header.get("meta", {})))


__all__ = [
    "Dataset", "DatasetFormatError", "FLOW_CHANNELS", "add_gaussian_noise", "channel_stats",
    "denormalize", "downsample", "load_dataset", "load_field", "make_dataset", "normalize",
    "save_dataset", "save_field",
]
