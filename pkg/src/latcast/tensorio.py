"""Binary tensor container, JSON sidecars, stats CSVs, and checkpoints.

Container layout (all integers little-endian):

    magic "LDCT" | format version u32 | dtype code u32 | rank u32
    | dims u64 * rank | raw row-major payload

Dtype code 1 is 32-bit little-endian float, the only code currently defined.
A tensor file ``x.ldct`` may carry a UTF-8 JSON sidecar ``x.json`` with grid
spec, timestamps, and channel names.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grid import ChannelStats, GridSpec, Snapshot, VariableCatalog

MAGIC = b"LDCT"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
TENSOR_SUFFIX = ".ldct"

_HEADER = struct.Struct("<4sIII")


def write_tensor(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        fh.write(array.tobytes(order="C"))
    return path


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValidationError(f"{path}: truncated header")
        magic, version, dtype, rank = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format version {version}")
        if dtype != DTYPE_FLOAT32:
            raise ValidationError(f"{path}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        payload = fh.read(n * 4)
        if len(payload) != n * 4:
            raise ValidationError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def sidecar_path(tensor_path: str | Path) -> Path:
    return Path(tensor_path).with_suffix(".json")


def write_sidecar(tensor_path: str | Path, metadata: dict) -> Path:
    path = sidecar_path(tensor_path)
    path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_sidecar(tensor_path: str | Path) -> dict:
    return json.loads(sidecar_path(tensor_path).read_text(encoding="utf-8"))


def grid_to_dict(grid: GridSpec) -> dict:
    return {
        "n_lat": grid.n_lat,
        "n_lon": grid.n_lon,
        "lat_start_deg": grid.lat_start_deg,
        "lat_step_deg": grid.lat_step_deg,
        "lon_start_deg": grid.lon_start_deg,
        "lon_step_deg": grid.lon_step_deg,
        "south_pole_cropped": grid.south_pole_cropped,
    }


def grid_from_dict(d: dict) -> GridSpec:
    return GridSpec(**d)


def write_snapshot(path: str | Path, snapshot: Snapshot) -> Path:
    path = Path(path)
    write_tensor(path, snapshot.data)
    write_sidecar(
        path,
        {
            "kind": "snapshot",
            "grid": grid_to_dict(snapshot.grid),
            "timestamp": snapshot.timestamp.isoformat(),
            "channels": snapshot.catalog.channel_names(),
            "catalog": snapshot.catalog.to_dict(),
        },
    )
    return path


def read_snapshot(path: str | Path) -> Snapshot:
    data = read_tensor(path)
    meta = read_sidecar(path)
    return Snapshot(
        grid=grid_from_dict(meta["grid"]),
        timestamp=datetime.fromisoformat(meta["timestamp"]),
        data=data,
        catalog=VariableCatalog.from_dict(meta["catalog"]),
    )


def write_channel_stats(path: str | Path, stats: ChannelStats) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "mean", "std"])
        for name, mean, std in zip(stats.names, stats.mean, stats.std):
            writer.writerow([name, repr(float(mean)), repr(float(std))])
    return path


def read_channel_stats(path: str | Path) -> ChannelStats:
    names: list[str] = []
    means: list[float] = []
    stds: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"channel", "mean", "std"}:
            raise ValidationError(f"{path}: expected columns channel,mean,std")
        for row in reader:
            names.append(row["channel"])
            means.append(float(row["mean"]))
            stds.append(float(row["std"]))
    return ChannelStats(tuple(names), np.array(means), np.array(stds))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray], config: dict) -> Path:
    """Checkpoint = one LDCT file per parameter plus a manifest JSON."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {}
    for i, (name, value) in enumerate(sorted(tensors.items())):
        fname = f"param_{i:04d}{TENSOR_SUFFIX}"
        write_tensor(directory / fname, value)
        params[name] = {"file": fname, "shape": list(np.asarray(value).shape)}
    manifest = {"config": config, "config_hash": config_hash(config), "params": params}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def read_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    tensors = {}
    for name, entry in manifest["params"].items():
        value = read_tensor(directory / entry["file"])
        if list(value.shape) != entry["shape"]:
            raise ValidationError(f"checkpoint parameter {name}: shape mismatch")
        tensors[name] = value
    return tensors, manifest["config"]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
