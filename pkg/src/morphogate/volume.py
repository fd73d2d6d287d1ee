"""Voxel grids, typed volumes, and their binary file format.

A volume lives on a regular grid of `dims = (s, h, w)` voxels with physical
spacing in millimetres per axis. Values are stored row-major, so flat index
`i*h*w + j*w + k` addresses voxel `(i, j, k)`. Scalar and displacement data
are float64 internally; label data is uint16.

On disk a volume is a pair of files: `<name>.vol` holds the raw little-endian
payload and `<name>.vol.json` holds the header (dims, spacing_mm, dtype,
channels, kind). Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyRegion,
    GeometryMismatch,
    IoFailure,
    MalformedHeader,
    NonFiniteData,
    PayloadSizeMismatch,
)

HEADER_SUFFIX = ".json"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u16": np.dtype("<u2")}
_KINDS = ("scalar", "displacement", "labels")


@dataclass(frozen=True)
class GridGeometry:
    """Immutable grid shape and physical voxel spacing (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.spacing) != 3:
            raise ValueError("dims and spacing must have three entries")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 1 per axis, got {self.dims}")
        if any(not np.isfinite(s) or s <= 0.0 for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")

    @property
    def voxel_count(self) -> int:
        s, h, w = self.dims
        return s * h * w

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical coordinate of each voxel centre along each axis."""
        return tuple(
            np.arange(d, dtype=np.float64) * sp for d, sp in zip(self.dims, self.spacing)
        )

    def coordinate_grid(self) -> np.ndarray:
        """(s, h, w, 3) array of physical voxel positions in mm."""
        ax = self.axis_coords()
        mesh = np.meshgrid(*ax, indexing="ij")
        return np.stack(mesh, axis=-1)


def _require_same_geometry(a: GridGeometry, b: GridGeometry, what: str):
    if a != b:
        raise GeometryMismatch(f"{what}: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def _check_finite(data: np.ndarray, what: str):
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NonFiniteData(f"{what} contains {bad} non-finite values")


class ScalarVolume:
    """One float64 value per voxel."""

    kind = "scalar"

    def __init__(self, geometry: GridGeometry, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.shape != geometry.dims:
            raise GeometryMismatch(f"scalar data shape {data.shape} != dims {geometry.dims}")
        _check_finite(data, "scalar volume")
        self.geometry = geometry
        self.data = data

    def value_at(self, ijk: tuple[int, int, int]) -> float:
        return float(self.data[ijk])

    def with_value(self, ijk: tuple[int, int, int], value: float) -> "ScalarVolume":
        """Copy of this volume with one voxel replaced."""
        out = self.data.copy()
        out[ijk] = value
        return ScalarVolume(self.geometry, out)


class DeformationField:
    """Voxelwise displacement u(x) in mm; the warp maps x to x + u(x).

    Channels are stored as (3, s, h, w): u[0] displaces along the slice axis,
    u[1] along rows, u[2] along columns, all in physical millimetres of
    template space.
    """

    kind = "displacement"

    def __init__(self, geometry: GridGeometry, displacement: np.ndarray):
        disp = np.asarray(displacement, dtype=np.float64)
        if disp.shape != (3,) + geometry.dims:
            raise GeometryMismatch(
                f"displacement shape {disp.shape} != (3, *{geometry.dims})"
            )
        _check_finite(disp, "deformation field")
        self.geometry = geometry
        self.displacement = disp

    def value_at(self, ijk: tuple[int, int, int]) -> np.ndarray:
        return self.displacement[(slice(None),) + tuple(ijk)].copy()

    def with_value(self, ijk: tuple[int, int, int], vector) -> "DeformationField":
        out = self.displacement.copy()
        out[(slice(None),) + tuple(ijk)] = np.asarray(vector, dtype=np.float64)
        return DeformationField(self.geometry, out)


class LabelVolume:
    """Integer region labels per voxel; 0 is background.

    Labels must form a contiguous range: every index in 1..max(labels) has at
    least one voxel.
    """

    kind = "labels"

    def __init__(self, geometry: GridGeometry, labels: np.ndarray):
        arr = np.asarray(labels)
        if arr.shape != geometry.dims:
            raise GeometryMismatch(f"label shape {arr.shape} != dims {geometry.dims}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("labels must be integers")
            arr = arr.astype(np.int64)
        if arr.size and int(arr.min()) < 0:
            raise ValueError("labels must be nonnegative")
        top = int(arr.max(initial=0))
        if top > np.iinfo(np.uint16).max:
            raise ValueError(f"label {top} exceeds uint16 range")
        present = np.unique(arr)
        missing = np.setdiff1d(np.arange(1, top + 1), present)
        if missing.size:
            raise EmptyRegion(int(missing[0]))
        self.geometry = geometry
        self.labels = arr.astype(np.uint16)

    @property
    def max_label(self) -> int:
        return int(self.labels.max(initial=0))

    def value_at(self, ijk: tuple[int, int, int]) -> int:
        return int(self.labels[ijk])

    def with_value(self, ijk: tuple[int, int, int], label: int) -> "LabelVolume":
        out = self.labels.astype(np.int64)
        out[ijk] = int(label)
        return LabelVolume(self.geometry, out)


Volume = ScalarVolume | DeformationField | LabelVolume


def _header_for(vol: Volume, dtype: str) -> dict:
    if isinstance(vol, ScalarVolume):
        channels = 1
    elif isinstance(vol, DeformationField):
        channels = 3
    else:
        dtype, channels = "u16", 1
    return {
        "dims": list(vol.geometry.dims),
        "spacing_mm": list(vol.geometry.spacing),
        "dtype": dtype,
        "channels": channels,
        "kind": vol.kind,
    }


def write_volume(vol: Volume, path: str | os.PathLike, dtype: str = "f64") -> None:
    """Write payload to `path` and header to `path + '.json'`.

    Float volumes may be stored as f32 to halve disk use; labels are always
    u16 regardless of the requested dtype.
    """
    path = os.fspath(path)
    if dtype not in ("f32", "f64"):
        raise ValueError(f"unsupported on-disk dtype {dtype!r}")
    header = _header_for(vol, dtype)
    np_dtype = _DTYPES[header["dtype"]]
    if isinstance(vol, ScalarVolume):
        payload = np.ascontiguousarray(vol.data, dtype=np_dtype).tobytes()
    elif isinstance(vol, DeformationField):
        payload = np.ascontiguousarray(vol.displacement, dtype=np_dtype).tobytes()
    else:
        payload = np.ascontiguousarray(vol.labels, dtype="<u2").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
        with open(path + HEADER_SUFFIX, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write volume {path}: {exc}") from exc


def _parse_header(path: str) -> tuple[GridGeometry, np.dtype, int, str]:
    header_path = path + HEADER_SUFFIX
    try:
        with open(header_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise MalformedHeader(f"missing header {header_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"unparseable header {header_path}: {exc}") from exc
    required = {"dims", "spacing_mm", "dtype", "channels", "kind"}
    if not isinstance(raw, dict) or not required.issubset(raw):
        raise MalformedHeader(f"header {header_path} missing keys {sorted(required - set(raw or {}))}")
    if raw["dtype"] not in _DTYPES:
        raise MalformedHeader(f"unknown dtype {raw['dtype']!r} in {header_path}")
    if raw["kind"] not in _KINDS:
        raise MalformedHeader(f"unknown kind {raw['kind']!r} in {header_path}")
    try:
        geometry = GridGeometry(tuple(raw["dims"]), tuple(raw["spacing_mm"]))
    except (TypeError, ValueError) as exc:
        raise MalformedHeader(f"bad dims/spacing in {header_path}: {exc}") from exc
    channels = raw["channels"]
    if channels not in (1, 3):
        raise MalformedHeader(f"channels must be 1 or 3, got {channels!r}")
    if raw["kind"] == "displacement" and channels != 3:
        raise MalformedHeader("displacement volumes require channels=3")
    if raw["kind"] in ("scalar", "labels") and channels != 1:
        raise MalformedHeader(f"{raw['kind']} volumes require channels=1")
    if raw["kind"] == "labels" and raw["dtype"] != "u16":
        raise MalformedHeader("label volumes require dtype u16")
    if raw["kind"] != "labels" and raw["dtype"] == "u16":
        raise MalformedHeader(f"{raw['kind']} volumes require a float dtype")
    return geometry, _DTYPES[raw["dtype"]], channels, raw["kind"]


def read_volume(path: str | os.PathLike) -> Volume:
    """Read a volume pair written by write_volume. Returns the typed volume."""
    path = os.fspath(path)
    geometry, dtype, channels, kind = _parse_header(path)
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read volume {path}: {exc}") from exc
    expected = geometry.voxel_count * channels * dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeMismatch(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    if kind == "scalar":
        return ScalarVolume(geometry, flat.astype(np.float64).reshape(geometry.dims))
    if kind == "displacement":
        data = flat.astype(np.float64).reshape((3,) + geometry.dims)
        return DeformationField(geometry, data)
    return LabelVolume(geometry, flat.reshape(geometry.dims))


def sha256_of_file(path: str | os.PathLike) -> str:
    """Hex digest of a file's bytes; used to pin atlases and priors to a model."""
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(65536), b""):
                digest.update(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot hash {path}: {exc}") from exc
    return digest.hexdigest()
