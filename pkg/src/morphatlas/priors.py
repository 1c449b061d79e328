"""Pluggable velocity-prior providers for (atlas, subject) pairs.

Three interchangeable implementations: the internal optimization oracle, a
directory of precomputed velocity files, and an external command speaking a
small file-based wire protocol.  All providers exchange velocities at wire
precision (little-endian float32) and the oracle also quantizes its image
inputs the same way, so a prediction routed through the subprocess protocol
is bit-identical to one computed in-process.  Internal solvers keep float64.

Subprocess wire protocol: the provider materializes a work directory with
``atlas.rawf32``, ``subject.rawf32`` and ``meta.json`` (dims, spacing,
subject_id, iteration, parameterization), invokes the configured command
with the directory path as its single argument, and reads back
``velocity.rawf32`` (d components concatenated, same layout).

File-provider directory convention: ``<dir>/<subject_id>.vel.rawf32`` plus a
shared ``meta.json``.  File providers are "frozen": their velocities do not
depend on the atlas argument, so an atlas build reuses them after the first
outer iteration.
"""

from __future__ import annotations

import shutil
import subprocess
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from .errors import ProviderError, VolumeFormatError
from .grid import GridShape, ScalarImage, VectorField
from .rawio import (
    grid_meta,
    meta_grid_shape,
    quantize_f32,
    read_meta,
    read_raw_f32,
    read_vector_f32,
    write_meta,
    write_raw_f32,
)
from .registration import RegistrationConfig, oracle_register

PROVENANCES = ("oracle", "file", "subprocess")


@dataclass(frozen=True)
class PriorRequest:
    atlas: ScalarImage
    subject: ScalarImage
    subject_id: str
    iteration: int

    def __post_init__(self):
        if self.atlas.shape != self.subject.shape:
            raise ProviderError(
                "atlas and subject grids differ",
                subject_id=self.subject_id,
                iteration=self.iteration,
            )
        if not self.subject_id:
            raise ValueError("subject_id must be nonempty")


@dataclass(frozen=True)
class PriorResponse:
    velocity: VectorField
    provenance: str
    wall_time: float


@dataclass(frozen=True)
class ProviderCheck:
    subject_id: str
    ok: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    checks: tuple[ProviderCheck, ...]

    def failures(self) -> list[ProviderCheck]:
        return [c for c in self.checks if not c.ok]


class OraclePriorProvider:
    """Runs the internal registration oracle on each (atlas, subject) pair."""

    frozen = False
    provenance = "oracle"

    def __init__(self, reg_config: RegistrationConfig | None = None):
        self.reg_config = reg_config if reg_config is not None else RegistrationConfig()

    @property
    def parameterization(self) -> str:
        return self.reg_config.integration.parameterization

    def provide(self, req: PriorRequest) -> PriorResponse:
        start = time.perf_counter()
        atlas = ScalarImage(req.atlas.shape, quantize_f32(req.atlas.values))
        subject = ScalarImage(req.subject.shape, quantize_f32(req.subject.values))
        result = oracle_register(atlas, subject, self.reg_config)
        velocity = VectorField(
            result.velocity.shape, quantize_f32(result.velocity.components)
        )
        return PriorResponse(
            velocity=velocity,
            provenance=self.provenance,
            wall_time=time.perf_counter() - start,
        )

    def validate(self, shape: GridShape, subject_ids) -> ValidationReport:
        checks = tuple(ProviderCheck(sid, True, "oracle ready") for sid in subject_ids)
        return ValidationReport(ok=True, checks=checks)

    def describe(self) -> dict:
        return {"kind": "oracle", "frozen": self.frozen,
                "parameterization": self.parameterization}


class FilePriorProvider:
    """Loads precomputed velocities keyed by subject_id (frozen prior)."""

    frozen = True
    provenance = "file"

    def __init__(self, directory):
        self.directory = Path(directory)
        meta_path = self.directory / "meta.json"
        if not meta_path.exists():
            raise VolumeFormatError(f"{meta_path}: missing shared meta.json")
        self.meta = read_meta(meta_path)
        self.shape = meta_grid_shape(self.meta, str(meta_path))
        self.parameterization = self.meta.get("parameterization")

    def _velocity_path(self, subject_id: str) -> Path:
        return self.directory / f"{subject_id}.vel.rawf32"

    def provide(self, req: PriorRequest) -> PriorResponse:
        start = time.perf_counter()
        if req.atlas.shape != self.shape:
            raise ProviderError(
                f"request grid {req.atlas.shape.dims} != stored grid {self.shape.dims}",
                subject_id=req.subject_id,
                iteration=req.iteration,
            )
        path = self._velocity_path(req.subject_id)
        if not path.exists():
            raise ProviderError(
                f"missing velocity file {path}",
                subject_id=req.subject_id,
                iteration=req.iteration,
            )
        try:
            velocity = read_vector_f32(path, self.shape)
        except VolumeFormatError as exc:
            raise ProviderError(
                str(exc), subject_id=req.subject_id, iteration=req.iteration
            ) from exc
        return PriorResponse(
            velocity=velocity,
            provenance=self.provenance,
            wall_time=time.perf_counter() - start,
        )

    def validate(self, shape: GridShape, subject_ids) -> ValidationReport:
        checks = []
        for sid in subject_ids:
            path = self._velocity_path(sid)
            if not path.exists():
                checks.append(ProviderCheck(sid, False, f"missing {path.name}"))
                continue
            expected = 4 * shape.d * shape.num_voxels
            actual = path.stat().st_size
            if shape != self.shape:
                checks.append(ProviderCheck(sid, False, "grid mismatch with meta.json"))
            elif actual != expected:
                checks.append(
                    ProviderCheck(sid, False, f"{actual} bytes, expected {expected}")
                )
            else:
                checks.append(ProviderCheck(sid, True, "file present"))
        return ValidationReport(ok=all(c.ok for c in checks), checks=tuple(checks))

    def describe(self) -> dict:
        return {"kind": "file", "frozen": self.frozen, "directory": str(self.directory),
                "parameterization": self.parameterization}


def write_prior_files(directory, shape: GridShape, velocities: dict[str, VectorField],
                      parameterization: str | None = None) -> None:
    """Materialize the file-provider directory convention."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = grid_meta(shape)
    if parameterization is not None:
        meta["parameterization"] = parameterization
    write_meta(directory / "meta.json", meta)
    for sid, vel in velocities.items():
        write_raw_f32(directory / f"{sid}.vel.rawf32", vel.components)


class SubprocessPriorProvider:
    """Invokes an external command through the file-based wire protocol."""

    frozen = False
    provenance = "subprocess"

    def __init__(self, command, work_root=None, timeout: float = 300.0,
                 retries: int = 1, parameterization: str | None = None):
        self.command = [command] if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("subprocess provider needs a nonempty command")
        self.work_root = Path(work_root) if work_root is not None else None
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.parameterization = parameterization

    def _work_dir(self, req: PriorRequest) -> Path:
        root = self.work_root if self.work_root is not None else Path(".")
        name = f"prior_{req.subject_id}_it{req.iteration:03d}_{uuid.uuid4().hex[:8]}"
        path = root / name
        path.mkdir(parents=True, exist_ok=False)
        return path

    def _run_once(self, req: PriorRequest) -> VectorField:
        shape = req.atlas.shape
        work = self._work_dir(req)
        try:
            write_raw_f32(work / "atlas.rawf32", req.atlas.values)
            write_raw_f32(work / "subject.rawf32", req.subject.values)
            meta = grid_meta(shape, subject_id=req.subject_id, iteration=req.iteration)
            if self.parameterization is not None:
                meta["parameterization"] = self.parameterization
            write_meta(work / "meta.json", meta)
            proc = subprocess.run(
                self.command + [str(work)],
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
            if proc.returncode != 0:
                raise ProviderError(
                    f"command exited {proc.returncode}: {proc.stderr.strip()[:500]}",
                    subject_id=req.subject_id,
                    iteration=req.iteration,
                )
            out_path = work / "velocity.rawf32"
            if not out_path.exists():
                raise ProviderError(
                    "command produced no velocity.rawf32",
                    subject_id=req.subject_id,
                    iteration=req.iteration,
                )
            try:
                raw = read_raw_f32(out_path, (shape.d,) + shape.dims)
            except VolumeFormatError as exc:
                raise ProviderError(
                    f"malformed output: {exc}",
                    subject_id=req.subject_id,
                    iteration=req.iteration,
                ) from exc
            return VectorField(shape, raw)
        except subprocess.TimeoutExpired as exc:
            raise ProviderError(
                f"command timed out after {self.timeout:g}s",
                subject_id=req.subject_id,
                iteration=req.iteration,
            ) from exc
        finally:
            shutil.rmtree(work, ignore_errors=True)

    def provide(self, req: PriorRequest) -> PriorResponse:
        start = time.perf_counter()
        last_error = None
        for _ in range(self.retries + 1):
            try:
                velocity = self._run_once(req)
                return PriorResponse(
                    velocity=velocity,
                    provenance=self.provenance,
                    wall_time=time.perf_counter() - start,
                )
            except ProviderError as exc:
                last_error = exc
        raise last_error

    def validate(self, shape: GridShape, subject_ids) -> ValidationReport:
        exe = self.command[0]
        resolved = shutil.which(exe) or (Path(exe).exists() and exe)
        if not resolved:
            checks = tuple(
                ProviderCheck(sid, False, f"command not found: {exe}")
                for sid in subject_ids
            )
            return ValidationReport(ok=False, checks=checks)
        checks = tuple(
            ProviderCheck(sid, True, f"command resolved: {resolved}")
            for sid in subject_ids
        )
        return ValidationReport(ok=True, checks=checks)

    def describe(self) -> dict:
        return {"kind": "subprocess", "frozen": self.frozen,
                "command": list(self.command), "timeout": self.timeout,
                "parameterization": self.parameterization}


def validate_provider(provider, shape: GridShape, subject_ids) -> ValidationReport:
    """Dry-run provider checks without consuming iteration budget."""
    return provider.validate(shape, list(subject_ids))
