"""Volume persistence and the synthetic-cohort generator.

Two formats are supported:

* ``rawf32`` — the little-endian float32 payload of :mod:`morphatlas.rawio`
  plus a JSON sidecar at ``<path>.json`` (dims, spacing, intent).  Scalar and
  vector volumes round-trip bit-exactly.
* a NIfTI-1 subset — single ``.nii`` file, 348-byte header, datatypes
  float32 and int16 (int16 rescaled by scl_slope/scl_inter), no extensions.
  Anything else raises VolumeFormatError naming the offending field.
  NIfTI stores the first header axis fastest, so header dims and pixdim
  appear reversed relative to this package's (slowest ... fastest) axes;
  write-then-read round-trips exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Cohort
from .errors import VolumeFormatError
from .flow import IntegrationConfig, svf_exponential
from .grid import DeformationPair, GridShape, ScalarImage, VectorField, warp_image
from .rawio import (
    grid_meta,
    meta_grid_shape,
    read_meta,
    read_raw_f32,
    write_meta,
    write_raw_f32,
)
from .spectral import MetricConfig, apply_K

# ---------------------------------------------------------------------------
# rawf32 + sidecar

def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_volume(value, path, format: str = "rawf32") -> None:
    """Persist a ScalarImage or VectorField; format 'rawf32' or 'nifti1'."""
    if format == "rawf32":
        if isinstance(value, VectorField):
            payload, intent = value.components, "vector"
        elif isinstance(value, ScalarImage):
            payload, intent = value.values, "scalar"
        else:
            raise TypeError(f"cannot write {type(value).__name__}")
        write_raw_f32(path, payload)
        write_meta(_sidecar(path), grid_meta(value.shape, intent=intent))
    elif format == "nifti1":
        if not isinstance(value, ScalarImage):
            raise VolumeFormatError(
                "intent: vector volumes are not supported in the nifti1 subset"
            )
        write_nifti(value, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def read_volume(path):
    """Load a volume; returns ScalarImage or VectorField per its metadata."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix == ".nii":
        return read_nifti(path)
    sidecar = _sidecar(path)
    if not sidecar.exists():
        raise VolumeFormatError(f"{path}: missing sidecar {sidecar.name}")
    meta = read_meta(sidecar)
    shape = meta_grid_shape(meta, str(sidecar))
    intent = meta.get("intent", "scalar")
    if intent == "vector":
        return VectorField(shape, read_raw_f32(path, (shape.d,) + shape.dims))
    if intent == "scalar":
        return ScalarImage(shape, read_raw_f32(path, shape.dims))
    raise VolumeFormatError(f"{sidecar}: unknown intent {intent!r}")


def volume_format_for(path) -> str:
    return "nifti1" if Path(path).suffix == ".nii" else "rawf32"


# ---------------------------------------------------------------------------
# NIfTI-1 subset

_HDR_FMT = ("i 10s 18s i h c c 8h 3f h h h h 8f f f f h c c f f f f i i "
            "80s 24s h h 3f 3f 4f 4f 4f 16s 4s")
_DT_FLOAT32 = 16
_DT_INT16 = 4


def write_nifti(img: ScalarImage, path) -> None:
    dims = img.shape.dims
    d = len(dims)
    nii_dim = [d] + [int(n) for n in dims[::-1]] + [1] * (7 - d)
    nii_pix = [1.0] + [float(s) for s in img.shape.spacing[::-1]] + [1.0] * (7 - d)
    header = struct.pack(
        "<" + _HDR_FMT,
        348, b"", b"", 0, 0, b"r", b"\x00",
        *nii_dim,
        0.0, 0.0, 0.0, 0,
        _DT_FLOAT32, 32, 0,
        *nii_pix,
        352.0, 1.0, 0.0,
        0, b"\x00", b"\x00",
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"morphatlas", b"",
        0, 0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
        b"", b"n+1\x00",
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(np.ascontiguousarray(img.values, dtype="<f4").tobytes())


def read_nifti(path) -> ScalarImage:
    raw = Path(path).read_bytes()
    if len(raw) < 352:
        raise VolumeFormatError(f"{path}: file shorter than a nifti1 header")
    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[:4])
        if sizeof_hdr == 348:
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    fields = struct.unpack(endian + _HDR_FMT, raw[:348])
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope = fields[31]
    scl_inter = fields[32]
    magic = fields[-1]

    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: magic 'ni1' (two-file pairs unsupported)")
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: magic is not 'n+1'")
    if raw[348:352] != b"\x00\x00\x00\x00":
        raise VolumeFormatError(f"{path}: extension flag set (extensions unsupported)")

    ndim = dim[0]
    sizes = list(dim[1 : 1 + max(ndim, 0)])
    while len(sizes) > 2 and sizes[-1] == 1:
        sizes.pop()
    if not 2 <= len(sizes) <= 3:
        raise VolumeFormatError(f"{path}: dim {tuple(dim)} is not a 2D/3D scalar volume")
    d = len(sizes)

    if datatype == _DT_FLOAT32:
        np_dtype, itemsize = endian + "f4", 4
    elif datatype == _DT_INT16:
        np_dtype, itemsize = endian + "i2", 2
    else:
        raise VolumeFormatError(f"{path}: datatype {datatype} unsupported "
                                "(only float32=16 and int16=4)")

    count = int(np.prod(sizes))
    if vox_offset < 352:
        raise VolumeFormatError(f"{path}: vox_offset {vox_offset} overlaps the header")
    payload = raw[vox_offset : vox_offset + itemsize * count]
    if len(payload) != itemsize * count:
        raise VolumeFormatError(f"{path}: truncated payload "
                                f"({len(payload)} of {itemsize * count} bytes)")
    values = np.frombuffer(payload, dtype=np_dtype).astype(np.float64)
    slope = scl_slope if scl_slope != 0.0 else 1.0
    if datatype == _DT_INT16 or slope != 1.0 or scl_inter != 0.0:
        values = values * slope + scl_inter
    # disk layout is first-axis-fastest; our arrays are last-axis-fastest
    arr = values.reshape(tuple(sizes[::-1]))
    spacing = tuple(float(p) for p in pixdim[1 : 1 + d])[::-1]
    if any(s <= 0 for s in spacing):
        spacing = ()
    return ScalarImage(GridShape(arr.shape, spacing), arr)


# ---------------------------------------------------------------------------
# synthetic cohorts

PATTERNS = ("bullseye", "checker-blob")


@dataclass(frozen=True)
class SynthConfig:
    """Seeded generator for a desk-scale cohort with known deformations."""

    seed: int
    n_subjects: int = 5
    dims: tuple[int, ...] = (64, 64)
    scale: float = 1.0
    noise_sigma: float = 0.0
    pattern: str = "bullseye"
    metric: MetricConfig = field(default_factory=MetricConfig)
    integration: IntegrationConfig = field(
        default_factory=lambda: IntegrationConfig(parameterization="stationary")
    )

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if not 0.0 <= self.scale <= 2.0:
            raise ValueError("deformation scale must be in [0, 2] voxels")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")


@dataclass(frozen=True)
class SynthResult:
    cohort: Cohort
    base: ScalarImage
    true_velocities: tuple[VectorField, ...]
    deformations: tuple[DeformationPair, ...]


def base_pattern(dims: tuple[int, ...], pattern: str) -> ScalarImage:
    shape = GridShape(dims)
    coords = np.indices(dims, dtype=np.float64)
    center = np.array([(n - 1) / 2.0 for n in dims]).reshape((-1,) + (1,) * len(dims))
    r = np.sqrt(np.sum((coords - center) ** 2, axis=0))
    envelope = np.exp(-((r / (min(dims) / 4.0)) ** 2))
    if pattern == "bullseye":
        rings = 0.5 + 0.5 * np.cos(2.0 * np.pi * r / (min(dims) / 4.0))
        values = rings * envelope
    else:  # checker-blob
        checker = np.ones(dims)
        for ax, n in enumerate(dims):
            x = coords[ax]
            checker = checker * np.sin(2.0 * np.pi * 2.0 * x / n)
        values = 0.5 + 0.5 * checker * envelope
    return ScalarImage(shape, values)


def synthesize_cohort(cfg: SynthConfig) -> SynthResult:
    """Warped, optionally noisy copies of a base pattern, deterministic per seed."""
    shape = GridShape(cfg.dims)
    base = base_pattern(cfg.dims, cfg.pattern)
    op = cfg.metric.build(shape)
    rng = np.random.default_rng(cfg.seed)

    images, ids, fields, pairs = [], [], [], []
    for i in range(cfg.n_subjects):
        noise = rng.standard_normal((shape.d,) + shape.dims)
        smooth = apply_K(op, VectorField(shape, noise)).components
        peak = np.max(np.abs(smooth))
        w = VectorField(shape, smooth * (cfg.scale / peak) if peak > 0 else smooth * 0.0)
        pair = svf_exponential(w, cfg.integration)
        values = warp_image(base, pair.forward).values
        if cfg.noise_sigma > 0:
            values = values + rng.normal(0.0, cfg.noise_sigma, shape.dims)
        images.append(ScalarImage(shape, values))
        ids.append(f"subj{i:02d}")
        fields.append(w)
        pairs.append(pair)
    return SynthResult(
        cohort=Cohort(tuple(images), tuple(ids)),
        base=base,
        true_velocities=tuple(fields),
        deformations=tuple(pairs),
    )


# ---------------------------------------------------------------------------
# cohort directories

def load_cohort(path) -> Cohort:
    """Load a cohort from a directory of volumes or a newline-separated list file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir()
            if (p.suffix == ".nii" or p.suffix == ".rawf32")
            and not p.name.endswith(".vel.rawf32")
        )
    else:
        files = [Path(line.strip()) for line in path.read_text().splitlines()
                 if line.strip()]
    if not files:
        raise FileNotFoundError(f"{path}: no cohort volumes found")
    images, ids = [], []
    for f in files:
        vol = read_volume(f)
        if not isinstance(vol, ScalarImage):
            raise VolumeFormatError(f"{f}: cohort entries must be scalar volumes")
        images.append(vol)
        ids.append(f.name.removesuffix(".nii").removesuffix(".rawf32"))
    return Cohort(tuple(images), tuple(ids))
