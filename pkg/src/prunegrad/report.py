"""Output writers: CSV tables, PGM heatmaps, raw map binaries, run manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

RAW_MAGIC = b"PGRW"


def fmt(v) -> str:
    """17 significant digits for floats (exact f64 round trip)."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.write_bytes(csv_bytes(header, rows))
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_grid_csv(path, grid) -> Path:
    """H x W float grid, one CSV row per image row, no header."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(grid, dtype=np.float64):
        w.writerow([fmt(v) for v in row])
    path = Path(path)
    path.write_bytes(buf.getvalue().encode("utf-8"))
    return path


def to_uint8(grid) -> np.ndarray:
    """Min-max normalise to 0..255; a constant grid maps to all zeros."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if not hi > lo:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.floor((g - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def pgm_bytes(grid) -> bytes:
    img = to_uint8(grid)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, grid) -> Path:
    path = Path(path)
    path.write_bytes(pgm_bytes(grid))
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def raw_bytes(arr) -> bytes:
    """``PGRW`` | u8 rank | u32 dims... | little-endian f64 payload."""
    arr = np.asarray(arr, dtype="<f8")
    return (RAW_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + np.ascontiguousarray(arr).tobytes())


def write_raw(path, arr) -> Path:
    path = Path(path)
    path.write_bytes(raw_bytes(arr))
    return path


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    rank = buf[4]
    dims = struct.unpack(f"<{rank}I", buf[5:5 + 4 * rank])
    payload = buf[5 + 4 * rank:]
    if len(payload) != 8 * int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


class RunDir:
    """Output directory with a manifest of inputs and checksummed artifacts.

    ``manifest.json`` is rewritten after every :meth:`record`, so an
    interrupted run leaves a manifest listing everything completed so far.
    """

    def __init__(self, path, command: str, config: dict, inputs=()):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.manifest_path = self.path / "manifest.json"
        old = {}
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
        same = old.get("config_hash") == config_hash(config)
        self.artifacts: dict[str, str] = dict(old.get("artifacts", {})) if same else {}
        self.inputs = {str(p): sha256_file(p) for p in inputs}
        (self.path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
        self.record("config.json")

    def file(self, name) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, name) -> str:
        digest = sha256_file(self.path / name)
        self.artifacts[str(name)] = digest
        self._write()
        return digest

    def verified(self, name) -> bool:
        """True when ``name`` is in the manifest and its checksum still matches."""
        p = self.path / name
        return name in self.artifacts and p.exists() and sha256_file(p) == self.artifacts[name]

    def _write(self):
        doc = {"command": self.command, "config_hash": config_hash(self.config),
               "inputs": self.inputs,
               "artifacts": dict(sorted(self.artifacts.items()))}
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
