"""CT volume and annotation loading, intensity windowing, z-resampling.

Arrays are stored slice-major, ``voxels[z, y, x]``, while every geometric
triple (spacing, origin, world and voxel coordinates) is ordered
``(x, y, z)`` as in MetaImage headers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, GeometryError, IntegrityError

log = logging.getLogger(__name__)

HU_WINDOW = (-1000.0, 400.0)
MAX_SLICE_SPACING_MM = 2.5
TARGET_Z_SPACING_MM = 1.0

_MET_TYPES = {
    "MET_CHAR": np.int8,
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_LONG": np.int64,
    "MET_ULONG": np.uint64,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}
_MET_NAMES = {np.dtype(v): k for k, v in _MET_TYPES.items()}


@dataclass
class CtVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    series_id: str = ""

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if self.voxels.ndim != 3:
            raise ContractError(f"expected a 3-D array, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape_xyz(self) -> tuple[int, int, int]:
        z, y, x = self.voxels.shape
        return x, y, z

    def with_voxels(self, voxels: np.ndarray, **changes) -> "CtVolume":
        return replace(self, voxels=voxels, **changes)


@dataclass(frozen=True)
class NoduleAnnotation:
    series_id: str
    center_world: tuple[float, float, float]
    diameter: float

    @property
    def radius(self) -> float:
        return self.diameter / 2.0


# ---------------------------------------------------------------------------
# MetaImage
# ---------------------------------------------------------------------------


def read_mhd_header(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="latin-1")
    except OSError as exc:
        raise FormatError(f"cannot read MetaImage header {path}: {exc}") from exc
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            break
    for key in ("DimSize", "ElementType", "ElementDataFile"):
        if key not in header:
            raise FormatError(f"{path}: header lacks {key}")
    return header


def data_file_path(path) -> Path:
    """Companion data file named by a MetaImage header."""
    path = Path(path)
    return path.parent / read_mhd_header(path)["ElementDataFile"]


def _floats(text: str, n: int, key: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split())
    except ValueError as exc:
        raise FormatError(f"{key} is not numeric: {text!r}") from exc
    if len(values) != n:
        raise FormatError(f"{key} needs {n} values, got {len(values)}")
    return values


def load_volume(path, series_id: str | None = None) -> CtVolume:
    """Read a MetaImage (.mhd + companion raw) volume as HU voxels."""
    path = Path(path)
    header = read_mhd_header(path)
    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise FormatError(f"{path}: only 3-D volumes are supported (NDims={ndims})")
    dims = tuple(int(d) for d in _floats(header["DimSize"], 3, "DimSize"))
    spacing = _floats(header.get("ElementSpacing", header.get("ElementSize", "1 1 1")), 3, "ElementSpacing")
    origin_text = header.get("Offset", header.get("Origin", header.get("Position", "0 0 0")))
    origin = _floats(origin_text, 3, "Offset")
    try:
        dtype = np.dtype(_MET_TYPES[header["ElementType"]])
    except KeyError as exc:
        raise FormatError(f"{path}: unsupported ElementType {header['ElementType']}") from exc
    msb = header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False")).lower() == "true"
    dtype = dtype.newbyteorder(">" if msb else "<")

    if header["ElementDataFile"] == "LOCAL":
        raise FormatError(f"{path}: embedded (LOCAL) data is not supported")
    raw_path = path.parent / header["ElementDataFile"]
    try:
        blob = raw_path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read raw data {raw_path}: {exc}") from exc
    if header.get("CompressedData", "False").lower() == "true":
        try:
            blob = zlib.decompress(blob)
        except zlib.error as exc:
            raise IntegrityError(f"{raw_path}: corrupt compressed data") from exc

    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) != expected:
        raise IntegrityError(
            f"{raw_path}: {len(blob)} bytes on disk, header {dims} x {dtype.itemsize} B needs {expected}"
        )
    x, y, z = dims
    voxels = np.frombuffer(blob, dtype=dtype).reshape(z, y, x).astype(dtype.newbyteorder("="))
    return CtVolume(voxels, spacing, origin, series_id or path.stem)


def save_volume(volume: CtVolume, path) -> Path:
    """Write a MetaImage header plus uncompressed raw file next to it."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    voxels = np.ascontiguousarray(volume.voxels)
    try:
        met = _MET_NAMES[voxels.dtype.newbyteorder("=")]
    except KeyError as exc:
        raise ContractError(f"no MetaImage type for dtype {voxels.dtype}") from exc
    x, y, z = volume.shape_xyz
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        f"Offset = {' '.join(repr(o) for o in volume.origin)}",
        "CenterOfRotation = 0 0 0",
        "AnatomicalOrientation = RAI",
        f"ElementSpacing = {' '.join(repr(s) for s in volume.spacing)}",
        f"DimSize = {x} {y} {z}",
        f"ElementType = {met}",
        f"ElementDataFile = {raw_path.name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    raw_path.write_bytes(voxels.astype(voxels.dtype.newbyteorder("<"), copy=False).tobytes())
    return path


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

ANNOTATION_COLUMNS = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")


def load_annotations(path, min_diameter: float = 3.0) -> list[NoduleAnnotation]:
    """Read a LUNA16-style annotations CSV; extra columns are ignored."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ANNOTATION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                center = (float(row["coordX"]), float(row["coordY"]), float(row["coordZ"]))
                diameter = float(row["diameter_mm"])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad row {row}") from exc
            if diameter < min_diameter:
                log.warning("skipping %s nodule of %.2f mm (< %.1f mm)", row["seriesuid"], diameter, min_diameter)
                continue
            out.append(NoduleAnnotation(row["seriesuid"], center, diameter))
    return out


def save_annotations(annotations, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for a in annotations:
            writer.writerow([a.series_id, *(f"{c:.6f}" for c in a.center_world), f"{a.diameter:.6f}"])
    return path


# ---------------------------------------------------------------------------
# intensity and geometry
# ---------------------------------------------------------------------------


def normalize_hu(volume: CtVolume, window: tuple[float, float] = HU_WINDOW) -> CtVolume:
    lo, hi = window
    voxels = (volume.voxels.astype(np.float32) - np.float32(lo)) / np.float32(hi - lo)
    np.clip(voxels, 0.0, 1.0, out=voxels)
    return volume.with_voxels(voxels)


def resampled_slice_count(n_slices: int, z_spacing: float) -> int:
    # half-up rounding: 332.5 -> 333
    return int(math.floor(n_slices * z_spacing / TARGET_Z_SPACING_MM + 0.5))


def resample_z(volume: CtVolume, max_spacing: float | None = MAX_SLICE_SPACING_MM) -> CtVolume:
    """Linearly resample along z onto a 1 mm grid anchored at the first slice.

    Output slices beyond the last input slice repeat the edge value, so the
    result never leaves the input's value range.
    """
    n = volume.voxels.shape[0]
    sz = volume.spacing[2]
    if n < 2:
        raise GeometryError(f"{volume.series_id}: cannot resample a single-slice volume")
    if max_spacing is not None and sz > max_spacing + 1e-9:
        raise GeometryError(f"{volume.series_id}: slice spacing {sz} mm exceeds {max_spacing} mm")
    spacing = (volume.spacing[0], volume.spacing[1], TARGET_Z_SPACING_MM)
    if sz == TARGET_Z_SPACING_MM:
        return volume.with_voxels(volume.voxels.copy(), spacing=spacing)

    n_out = resampled_slice_count(n, sz)
    pos = np.arange(n_out, dtype=np.float64) * TARGET_Z_SPACING_MM / sz
    pos = np.clip(pos, 0.0, n - 1)
    lower = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    work = np.float64 if volume.voxels.dtype == np.float64 else np.float32
    frac = (pos - lower).astype(work)[:, None, None]
    src = volume.voxels.astype(work, copy=False)
    out = src[lower] * (1.0 - frac) + src[lower + 1] * frac
    if np.issubdtype(volume.voxels.dtype, np.integer):
        out = np.rint(out).astype(volume.voxels.dtype)
    return volume.with_voxels(out, spacing=spacing)


def world_to_voxel(volume: CtVolume, point) -> np.ndarray:
    """Fractional ``(x, y, z)`` voxel index of a world point in mm."""
    return (np.asarray(point, dtype=np.float64) - np.asarray(volume.origin)) / np.asarray(volume.spacing)


def voxel_to_world(volume: CtVolume, index) -> np.ndarray:
    return np.asarray(index, dtype=np.float64) * np.asarray(volume.spacing) + np.asarray(volume.origin)


# ---------------------------------------------------------------------------
# cache container
# ---------------------------------------------------------------------------


def save_array(path, array: np.ndarray, **meta) -> Path:
    """Store an array with an explicit JSON header (shape, dtype, metadata)."""
    path = Path(path)
    array = np.ascontiguousarray(array)
    header = {"shape": list(array.shape), "dtype": array.dtype.str, **meta}
    tmp = path.with_name(path.name + ".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez_compressed(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), data=array)
    tmp.replace(path)
    return path


def load_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            header = json.loads(npz["header"].tobytes().decode())
            data = npz["data"]
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read cached array {path}: {exc}") from exc
    if list(data.shape) != header["shape"] or data.dtype.str != header["dtype"]:
        raise IntegrityError(f"{path}: payload disagrees with its header")
    return data, header


def save_volume_cache(volume: CtVolume, path, **meta) -> Path:
    return save_array(
        path, volume.voxels, spacing=list(volume.spacing), origin=list(volume.origin), series_id=volume.series_id, **meta
    )


def load_volume_cache(path) -> CtVolume:
    data, header = load_array(path)
    return CtVolume(data, tuple(header["spacing"]), tuple(header["origin"]), header.get("series_id", ""))


__all__ = [
    "CtVolume",
    "NoduleAnnotation",
    "load_volume",
    "save_volume",
    "load_annotations",
    "save_annotations",
    "normalize_hu",
    "resample_z",
    "resampled_slice_count",
    "world_to_voxel",
    "voxel_to_world",
    "save_array",
    "load_array",
    "save_volume_cache",
    "load_volume_cache",
]
