"""Scan readers and writers: PLY, KITTI-style float32 ``.bin`` and the synthetic ``.npz`` format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TimedPointCloud

FORMATS = ("ply", "kitti", "synth")
SUFFIX = {"ply": ".ply", "kitti": ".bin", "synth": ".npz"}
TIME_FIELDS = ("time", "t", "timestamp")
DEFAULT_SCAN_PERIOD = 0.1

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class ScanLoadError(IOError):
    pass


def normalize_times(times: np.ndarray | None, n: int) -> np.ndarray:
    """Map per-point times into [0, 1]; without times every point gets 0.5 (no de-skew)."""
    if times is None or n == 0:
        return np.full(n, 0.5)
    times = np.asarray(times, dtype=float)
    if not np.all(np.isfinite(times)):
        raise ValueError("non-finite point times")
    lo, hi = times.min(), times.max()
    if lo >= 0.0 and hi <= 1.0:
        return times
    if hi == lo:
        return np.full(n, 0.5)
    return (times - lo) / (hi - lo)


def read_ply(path: str | Path) -> TimedPointCloud:
    path = Path(path)
    try:
        raw = path.read_bytes()
        end = raw.find(b"end_header")
        if not raw.startswith(b"ply") or end < 0:
            raise ValueError("missing ply header")
        body_start = raw.index(b"\n", end) + 1
        header = raw[:end].decode("ascii").splitlines()
        fmt, count, props, in_vertex, seen_vertex = None, 0, [], False, False
        for line in header[1:]:
            parts = line.split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                if seen_vertex and in_vertex:
                    in_vertex = False
                    continue
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    if seen_vertex:
                        raise ValueError("duplicate vertex element")
                    count, seen_vertex = int(parts[2]), True
                elif not seen_vertex:
                    raise ValueError("vertex element must come first")
            elif parts[0] == "property" and in_vertex:
                if parts[1] == "list":
                    raise ValueError("list properties are not supported for vertices")
                props.append((parts[2], _PLY_TYPES[parts[1]]))
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise ValueError("vertex element lacks x, y, z")
        if fmt == "ascii":
            rows = raw[body_start:].decode("ascii").split("\n")
            rows = [r for r in rows if r.strip()][:count]
            if len(rows) < count:
                raise ValueError(f"expected {count} vertices, found {len(rows)}")
            table = np.array([[float(v) for v in r.split()[: len(props)]] for r in rows]).reshape(count, len(props))
            data = {name: table[:, k] for k, name in enumerate(names)}
        elif fmt in ("binary_little_endian", "binary_big_endian"):
            order = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, order + code) for name, code in props])
            if len(raw) - body_start < dtype.itemsize * count:
                raise ValueError("truncated binary body")
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
            data = {name: arr[name] for name in names}
        else:
            raise ValueError(f"unsupported ply format {fmt!r}")
    except (ValueError, KeyError, IndexError, UnicodeDecodeError) as exc:
        raise ScanLoadError(f"{path}: {exc}") from exc
    pts = np.column_stack([data["x"], data["y"], data["z"]]).astype(float)
    time_key = next((k for k in TIME_FIELDS if k in data), None)
    times = None if time_key is None else data[time_key]
    return TimedPointCloud(pts, normalize_times(times, len(pts)))


def write_ply(path: str | Path, cloud: TimedPointCloud, binary: bool = True, with_time: bool = True) -> None:
    n = len(cloud)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")] + ([("time", "<f8")] if with_time else [])
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name, _ in fields]
    header.append("end_header")
    arr = np.empty(n, dtype=np.dtype(fields))
    arr["x"], arr["y"], arr["z"] = cloud.points.T
    if with_time:
        arr["time"] = cloud.timestamps
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(arr.tobytes())
        else:
            for row in arr:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_kitti_bin(path: str | Path) -> TimedPointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise ScanLoadError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    quads = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return TimedPointCloud(quads[:, :3].astype(float), normalize_times(None, len(quads)))


def write_kitti_bin(path: str | Path, cloud: TimedPointCloud, intensity: np.ndarray | None = None) -> None:
    quads = np.zeros((len(cloud), 4), dtype="<f4")
    quads[:, :3] = cloud.points
    if intensity is not None:
        quads[:, 3] = intensity
    Path(path).write_bytes(quads.tobytes())


def read_synth_scan(path: str | Path) -> tuple[TimedPointCloud, float]:
    path = Path(path)
    try:
        with np.load(path) as data:
            cloud = TimedPointCloud(data["points"], data["timestamps"])
            return cloud, float(data["stamp"])
    except (OSError, KeyError, ValueError) as exc:
        raise ScanLoadError(f"{path}: {exc}") from exc


def write_synth_scan(path: str | Path, cloud: TimedPointCloud, stamp: float) -> None:
    np.savez(path, points=cloud.points, timestamps=cloud.timestamps, stamp=float(stamp))


def detect_format(directory: str | Path) -> str:
    directory = Path(directory)
    for fmt in ("synth", "kitti", "ply"):
        if any(directory.glob("*" + SUFFIX[fmt])):
            return fmt
    raise ScanLoadError(f"{directory}: no .npz, .bin or .ply scans found")


@dataclass
class ScanSource:
    """Ordered scans of one directory; iteration order is the sorted file name order."""

    directory: Path
    format: str
    files: list[Path] = field(default_factory=list)
    scan_period: float = DEFAULT_SCAN_PERIOD

    @classmethod
    def open(cls, directory: str | Path, fmt: str | None = None) -> ScanSource:
        directory = Path(directory)
        if not directory.is_dir():
            raise ScanLoadError(f"{directory}: not a directory")
        fmt = fmt or detect_format(directory)
        if fmt not in FORMATS:
            raise ValueError(f"unknown format {fmt!r}")
        files = sorted(directory.glob("*" + SUFFIX[fmt]))
        return cls(directory, fmt, files)

    @property
    def ids(self) -> list[str]:
        return [f.stem for f in self.files]

    def __len__(self) -> int:
        return len(self.files)

    def load(self, index: int) -> tuple[TimedPointCloud, float]:
        """Scan ``index`` and its timestamp in seconds."""
        if not 0 <= index < len(self.files):
            raise IndexError(f"scan index {index} out of range [0, {len(self.files)})")
        f = self.files[index]
        if self.format == "synth":
            return read_synth_scan(f)
        cloud = read_ply(f) if self.format == "ply" else read_kitti_bin(f)
        return cloud, index * self.scan_period

    def __iter__(self):
        return (self.load(i) for i in range(len(self)))


def read_scan(source: ScanSource, index: int) -> TimedPointCloud:
    return source.load(index)[0]
