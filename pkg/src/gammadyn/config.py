"""Strict experiment configuration and builders for the model objects."""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field

from .grid import GridGeometry
from . import rates


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelSpec(_Strict):
    kind: Literal["tophat", "zero"] = "tophat"
    radius: float = Field(0.0, ge=0)
    height: float = 1.0
    normalize: bool = False
    exclude_origin: bool = False

    def build(self, grid: GridGeometry) -> rates.Kernel:
        if self.kind == "zero":
            return rates.Kernel.zero(grid)
        return rates.Kernel.tophat(grid, self.radius, self.height, normalize=self.normalize,
                                   exclude_origin=self.exclude_origin)

    def continuum(self, dim: int):
        from .particles import ContinuumKernel
        return ContinuumKernel(self.kind, self.radius, self.height, self.normalize, dim)


class GridSpec(_Strict):
    dim: Literal[1, 2] = 1
    cells_per_side: int = Field(32, ge=2)
    side_length: float = Field(10.0, gt=0)

    def build(self) -> GridGeometry:
        return GridGeometry(self.dim, self.cells_per_side, self.side_length)


class SurgailisModel(_Strict):
    preset: Literal["surgailis"]
    m: float = Field(1.0, gt=0)
    z: float = Field(0.5, ge=0)


class GlauberModel(_Strict):
    preset: Literal["glauber"]
    z: float = Field(..., gt=0)
    m: float = Field(1.0, gt=0)
    s: float = Field(0.0, ge=0, le=1)
    phi: KernelSpec = KernelSpec(kind="zero")


class BDLPModel(_Strict):
    preset: Literal["bdlp"]
    m: float = Field(1.0, gt=0)
    kappa_minus: float = Field(..., ge=0)
    a_minus: KernelSpec
    kappa_plus: float = Field(..., ge=0)
    a_plus: KernelSpec


class BDLPModifiedModel(BDLPModel):
    preset: Literal["bdlp_modified"]
    kappa: float = Field(..., ge=0)


class ContactModel(_Strict):
    preset: Literal["contact"]
    m: float = Field(1.0, gt=0)
    kappa: float = Field(..., ge=0)
    a: KernelSpec
    phi: KernelSpec = KernelSpec(kind="zero")


ModelSpec = Annotated[Union[SurgailisModel, GlauberModel, BDLPModel, BDLPModifiedModel, ContactModel],
                      Field(discriminator="preset")]


class InitialSpec(_Strict):
    kind: Literal["poisson", "empty", "empty_indicator"] = "poisson"
    z: float = Field(0.0, ge=0)


class EvolutionSpec(_Strict):
    C: float = Field(2.0, gt=0)
    n_max: int = Field(3, ge=1, le=6)
    zeta_trunc: int | None = Field(None, ge=0)
    dt: float = Field(1e-3, gt=0)
    delta: float = Field(0.01, gt=0, lt=1)
    t_end: float = Field(1.0, ge=0)
    stepper: Literal["rk4", "euler"] = "rk4"
    closure: Literal["transpose", "balanced"] = "transpose"
    kind: Literal["quasi", "correlation"] = "correlation"
    dual: bool = True
    times: list[float] | None = None
    initial: InitialSpec = InitialSpec(kind="poisson", z=0.5)
    nu: float = Field(0.5, gt=0, lt=1)
    window: tuple[float, float] | None = None
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(10_000, ge=1)


class SimSpec(_Strict):
    t_end: float = Field(1.0, ge=0)
    replicas: int = Field(100, ge=1)
    record_times: list[float] | None = None
    initial: InitialSpec = InitialSpec(kind="empty")
    radial_bins: list[float] = [0.0, 0.5, 1.0, 1.5, 2.0]
    audit_every: int = Field(1000, ge=0)


class CompareSpec(_Strict):
    a: str
    b: str
    column: str = "norm"
    threshold: float = Field(float("inf"), ge=0)


class ExperimentConfig(_Strict):
    command: Literal["validate", "evolve", "chain", "stationary", "simulate", "ergodicity", "compare"] | None = None
    grid: GridSpec = GridSpec()
    model: ModelSpec | None = None
    model_file: str | None = None
    evolution: EvolutionSpec = EvolutionSpec()
    sim: SimSpec = SimSpec()
    compare: CompareSpec | None = None
    output_dir: str | None = None
    seed: int = Field(0, ge=0, lt=2 ** 64)

    def resolved_model(self, base: Path | None = None):
        if self.model is not None and self.model_file is not None:
            raise ValueError("give either model or model_file, not both")
        if self.model is not None:
            return self.model
        if self.model_file is None:
            raise ValueError("no model given")
        path = Path(self.model_file)
        if not path.is_absolute() and base is not None:
            path = base / path
        if not path.exists():
            raise FileNotFoundError(f"model_file {path} does not exist")
        from pydantic import TypeAdapter
        return TypeAdapter(ModelSpec).validate_json(path.read_text())

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def build_model(spec, grid: GridGeometry) -> rates.BirthDeathModel:
    p = spec.preset
    if p == "surgailis":
        return rates.surgailis(grid, spec.m, spec.z)
    if p == "glauber":
        return rates.glauber(grid, spec.z, spec.phi.build(grid), spec.s, spec.m)
    if p == "bdlp":
        return rates.bdlp(grid, spec.m, spec.kappa_minus, spec.a_minus.build(grid), spec.kappa_plus,
                          spec.a_plus.build(grid))
    if p == "bdlp_modified":
        return rates.bdlp_modified(grid, spec.m, spec.kappa_minus, spec.a_minus.build(grid), spec.kappa_plus,
                                   spec.a_plus.build(grid), spec.kappa)
    if p == "contact":
        return rates.contact(grid, spec.m, spec.kappa, spec.a.build(grid), spec.phi.build(grid).scaled(-1.0)
                             if spec.phi.height > 0 else spec.phi.build(grid))
    raise ValueError(f"unknown preset {p}")


def sim_params(spec, dim: int) -> dict:
    """Continuum rate parameters for :class:`gammadyn.particles.SimConfig`."""
    out = {}
    for name, val in spec.model_dump().items():
        if name == "preset":
            continue
        kspec = getattr(spec, name)
        out[name] = kspec.continuum(dim) if isinstance(kspec, KernelSpec) else val
    if spec.preset == "contact" and spec.phi.kind != "zero" and spec.phi.height > 0:
        k = out["phi"]
        out["phi"] = type(k)(k.kind, k.radius, -k.height, k.normalize, k.dim)
    return out


PRESETS = ("surgailis", "glauber_free", "glauber_bump", "bdlp", "bdlp_modified", "contact")


def preset_text(name: str) -> str:
    return resources.files("gammadyn.presets").joinpath(f"{name}.json").read_text()


def load_config(path_or_name: str) -> tuple[ExperimentConfig, Path | None]:
    """Parse a config file, or a bundled preset when given its bare name."""
    p = Path(path_or_name)
    if p.exists():
        return ExperimentConfig.model_validate_json(p.read_text()), p.parent
    if path_or_name in PRESETS:
        return ExperimentConfig.model_validate_json(preset_text(path_or_name)), None
    raise FileNotFoundError(f"config {path_or_name} not found")
