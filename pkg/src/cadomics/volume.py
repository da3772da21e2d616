"""Volumetric data types, raw+JSON file I/O and generic voxel utilities.

Arrays are held in ``(z, y, x)`` order so that a C-order ravel is the
x-fastest linear order used on disk and for component numbering.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HU_MIN = -1024
HU_MAX = 4095

TERRITORY_CODES = {1: "LM", 2: "LAD", 3: "LCX", 4: "RCA"}

MASK_CODESETS = {
    "binary": frozenset({0, 1}),
    "territory": frozenset({0, 1, 2, 3, 4}),
}

_DTYPES = {"int16-le": np.dtype("<i2"), "uint8": np.dtype("u1")}


class VolumeIOError(Exception):
    code = "io"


class HeaderError(VolumeIOError):
    code = "header"


class PayloadLengthError(VolumeIOError):
    code = "payload-length"


class DtypeError(VolumeIOError):
    code = "dtype"


class GeometryMismatchError(ValueError):
    pass


def _decimal_text(value) -> str:
    if isinstance(value, str):
        float(value)  # validates
        return value
    return repr(float(value))


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing_text: tuple[str, str, str]
    origin_text: tuple[str, str, str] = ("0.0", "0.0", "0.0")

    @classmethod
    def make(cls, dims, spacing, origin=(0.0, 0.0, 0.0)) -> Geometry:
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {dims}")
        spacing_text = tuple(_decimal_text(s) for s in spacing)
        origin_text = tuple(_decimal_text(o) for o in origin)
        if len(spacing_text) != 3 or len(origin_text) != 3:
            raise ValueError("spacing and origin must be triples")
        if min(float(s) for s in spacing_text) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing_text}")
        return cls(dims, spacing_text, origin_text)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(s) for s in self.spacing_text)

    @property
    def origin(self) -> tuple[float, float, float]:
        return tuple(float(o) for o in self.origin_text)

    @property
    def shape(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz, ny, nx)


@dataclass(frozen=True, eq=False)
class Volume:
    """HU grid. ``voxels`` has shape ``(nz, ny, nx)`` and dtype int16."""

    geometry: Geometry
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.voxels, dtype=np.int16)
        if arr.shape != self.geometry.shape:
            raise ValueError(f"voxel array shape {arr.shape} does not match dims {self.geometry.dims}")
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)

    @classmethod
    def from_array(cls, hu, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume:
        hu = np.asarray(hu)
        nz, ny, nx = hu.shape
        clamped = np.clip(hu, HU_MIN, HU_MAX).astype(np.int16)
        return cls(Geometry.make((nx, ny, nz), spacing, origin), clamped)

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def origin(self):
        return self.geometry.origin

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Label grid sharing a Volume's geometry; ``kind`` fixes the legal code set."""

    geometry: Geometry
    labels: np.ndarray = field(repr=False)
    kind: str = "binary"

    def __post_init__(self):
        if self.kind not in MASK_CODESETS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        arr = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if arr.shape != self.geometry.shape:
            raise ValueError(f"label array shape {arr.shape} does not match dims {self.geometry.dims}")
        present = set(np.unique(arr).tolist())
        illegal = present - MASK_CODESETS[self.kind]
        if illegal:
            raise ValueError(f"labels {sorted(illegal)} not allowed in a {self.kind} mask")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @classmethod
    def from_array(cls, labels, geometry: Geometry, kind: str = "binary") -> MaskVolume:
        return cls(geometry, np.asarray(labels), kind)

    @property
    def inside(self) -> np.ndarray:
        return self.labels > 0

    def __eq__(self, other):
        if not isinstance(other, MaskVolume):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.kind == other.kind
            and np.array_equal(self.labels, other.labels)
        )


def check_geometry(*items) -> Geometry:
    """Raise GeometryMismatchError unless every item carries the same header geometry."""
    geoms = [item.geometry for item in items]
    for g in geoms[1:]:
        if g != geoms[0]:
            raise GeometryMismatchError(f"geometry mismatch: {geoms[0]} vs {g}")
    return geoms[0]


# -- file I/O -------------------------------------------------------------


def _pair_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def _read_header(header_path: Path) -> dict:
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError as exc:
        raise HeaderError(f"missing header {header_path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise HeaderError(f"ill-formed header {header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"header {header_path} is not an object")
    missing = {"dims", "spacing_mm", "origin_mm", "dtype", "order"} - header.keys()
    if missing:
        raise HeaderError(f"header {header_path} lacks keys {sorted(missing)}")
    if header["order"] != "x-fastest":
        raise HeaderError(f"unsupported voxel order {header['order']!r}")
    return header


def _read_pair(path, expected_dtype: str):
    header_path, raw_path = _pair_paths(path)
    header = _read_header(header_path)
    if header["dtype"] not in _DTYPES or header["dtype"] != expected_dtype:
        raise DtypeError(f"unsupported dtype {header['dtype']!r} (expected {expected_dtype!r})")
    try:
        geometry = Geometry.make(header["dims"], header["spacing_mm"], header["origin_mm"])
    except (TypeError, ValueError) as exc:
        raise HeaderError(f"bad geometry in {header_path}: {exc}") from exc
    try:
        payload = raw_path.read_bytes()
    except FileNotFoundError as exc:
        raise VolumeIOError(f"missing payload {raw_path}") from exc
    dtype = _DTYPES[expected_dtype]
    nx, ny, nz = geometry.dims
    expected = dtype.itemsize * nx * ny * nz
    if len(payload) != expected:
        raise PayloadLengthError(f"{raw_path}: {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(geometry.shape)
    return header, geometry, data


def load_volume(path) -> Volume:
    _, geometry, data = _read_pair(path, "int16-le")
    return Volume(geometry, np.clip(data, HU_MIN, HU_MAX).astype(np.int16))


def load_mask(path, kind: str = "binary") -> MaskVolume:
    _, geometry, data = _read_pair(path, "uint8")
    return MaskVolume(geometry, data.copy(), kind)


def _atomic_write(target: Path, data: bytes) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_pair(path, geometry: Geometry, array: np.ndarray, dtype_name: str) -> None:
    header_path, raw_path = _pair_paths(path)
    header = {
        "dims": list(geometry.dims),
        "spacing_mm": list(geometry.spacing_text),
        "origin_mm": list(geometry.origin_text),
        "dtype": dtype_name,
        "order": "x-fastest",
    }
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype_name]).tobytes()
    _atomic_write(raw_path, payload)
    _atomic_write(header_path, (json.dumps(header, indent=2) + "\n").encode())


def save_volume(volume: Volume, path) -> None:
    _write_pair(path, volume.geometry, volume.voxels, "int16-le")


def save_mask(mask: MaskVolume, path) -> None:
    _write_pair(path, mask.geometry, mask.labels, "uint8")


# -- voxel utilities ------------------------------------------------------


def voxel_volume_mm3(item) -> float:
    sx, sy, sz = item.geometry.spacing if hasattr(item, "geometry") else item
    return sx * sy * sz


def bbox_diagonal_mm(inside: np.ndarray, spacing) -> float:
    """Diagonal of the voxel-edge bounding box of ``inside`` (0 when empty)."""
    idx = np.nonzero(inside)
    if len(idx[0]) == 0:
        return 0.0
    sx, sy, sz = spacing
    ext = [(int(a.max()) - int(a.min()) + 1) for a in idx]  # z, y, x
    return float(np.sqrt((ext[2] * sx) ** 2 + (ext[1] * sy) ** 2 + (ext[0] * sz) ** 2))


_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class Component:
    id: int
    voxel_indices: np.ndarray  # linear x-fastest indices, ascending
    voxel_count: int


@dataclass
class ComponentSet:
    label_map: np.ndarray
    components: list[Component]

    def __len__(self):
        return len(self.components)


def connected_components(mask, connectivity: int = 26) -> ComponentSet:
    """Label maximal connected sets of a binary grid.

    IDs run 1..K in ascending order of each component's minimum linear voxel
    index, so the numbering does not depend on scan order.
    """
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26; got {connectivity}")
    inside = mask.inside if isinstance(mask, MaskVolume) else np.asarray(mask) > 0
    if inside.ndim == 2:
        inside = inside[None]
    structure = ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])
    raw, k = ndimage.label(inside, structure=structure)
    flat = raw.ravel()
    label_map = np.zeros(flat.shape, dtype=np.int32)
    components: list[Component] = []
    if k:
        nz = np.flatnonzero(flat)
        labels = flat[nz]
        order = np.argsort(labels, kind="stable")
        sorted_idx = nz[order]
        starts = np.searchsorted(labels[order], np.arange(1, k + 1))
        groups = np.split(sorted_idx, starts[1:])
        groups.sort(key=lambda g: int(g[0]))
        for new_id, g in enumerate(groups, start=1):
            label_map[g] = new_id
            components.append(Component(new_id, g, int(g.size)))
    return ComponentSet(label_map.reshape(inside.shape), components)


def _padded_edt(inside: np.ndarray, sampling) -> np.ndarray:
    # grid exterior counts as outside
    padded = np.pad(inside, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=sampling)
    crop = tuple(slice(1, -1) for _ in range(inside.ndim))
    return dist[crop]


def distance_transform_2d(mask_slice, spacing=(1.0, 1.0)) -> np.ndarray:
    """Distance (mm) from each inside pixel centre to the nearest outside pixel centre.

    ``mask_slice`` is indexed ``[y, x]``; ``spacing`` is ``(sx, sy)``.
    Outside pixels carry 0.
    """
    inside = np.asarray(mask_slice) > 0
    if not inside.any():
        return np.zeros(inside.shape, dtype=np.float64)
    sx, sy = spacing
    return _padded_edt(inside, (sy, sx))


def distance_transform_3d(inside: np.ndarray, spacing) -> np.ndarray:
    inside = np.asarray(inside) > 0
    if not inside.any():
        return np.zeros(inside.shape, dtype=np.float64)
    sx, sy, sz = spacing
    return _padded_edt(inside, (sz, sy, sx))


def voxel_centers_mm(linear_indices: np.ndarray, geometry: Geometry) -> np.ndarray:
    """(n, 3) array of x, y, z centre coordinates for linear voxel indices."""
    z, y, x = np.unravel_index(linear_indices, geometry.shape)
    sx, sy, sz = geometry.spacing
    ox, oy, oz = geometry.origin
    return np.column_stack([ox + x * sx, oy + y * sy, oz + z * sz])
