"""JSON experiment configuration.

Every section rejects unknown keys; misspelled keys get a suggestion.
``load_config`` returns the validated config with every default filled in,
and ``ExperimentConfig.echo()`` is what the runner writes back to disk.
"""
from __future__ import annotations

import difflib
import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import features as feat
from .conditional import RegressionBasis
from .costs import TerminalCost, cost_from_spec
from .model import Discretization, MfgModel, SolverConfig
from .paths import InitialLaw

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DiracInit(_Strict):
    kind: Literal["dirac"]
    x0: float = 0.0

    def law(self) -> InitialLaw:
        return InitialLaw.dirac(self.x0)


class GaussianInit(_Strict):
    kind: Literal["gaussian"]
    mean: float = 0.0
    std: float = Field(1.0, ge=0)

    def law(self) -> InitialLaw:
        return InitialLaw.gaussian(self.mean, self.std)


class UniformInit(_Strict):
    kind: Literal["uniform"]
    low: float = 0.0
    high: float = 1.0

    @model_validator(mode="after")
    def _ordered(self):
        if self.high < self.low:
            raise ValueError("need low <= high")
        return self

    def law(self) -> InitialLaw:
        return InitialLaw.uniform(self.low, self.high)


InitConfig = Annotated[Union[DiracInit, GaussianInit, UniformInit], Field(discriminator="kind")]


class PsiConfig(_Strict):
    kind: Literal["linear", "tanh"] = "linear"
    slope: float = 0.0
    intercept: float = 0.0
    scale: float = 1.0


class FunctionalConfig(_Strict):
    kind: Literal["zero", "mean"] = "zero"
    weight: float = 1.0


class TrackMeanCost(_Strict):
    family: Literal["track_mean"]
    q: float = Field(ge=0)
    qbar: float = Field(ge=0)
    s: float = Field(ge=0)


class QuadraticCost(_Strict):
    family: Literal["quadratic"]
    A: float
    psi: PsiConfig = PsiConfig()
    F: FunctionalConfig = FunctionalConfig()


class MeanSquareDistanceCost(_Strict):
    family: Literal["mean_square_distance"]


class StateOnlyQuadraticCost(_Strict):
    family: Literal["state_only_quadratic"]
    a: float


class ZeroCost(_Strict):
    family: Literal["zero"]


CostConfig = Annotated[
    Union[TrackMeanCost, QuadraticCost, MeanSquareDistanceCost, StateOnlyQuadraticCost, ZeroCost],
    Field(discriminator="family"),
]


def _build_cost(c) -> TerminalCost:
    params = c.model_dump(exclude={"family"})
    return cost_from_spec(c.family, params)


class ModelConfig(_Strict):
    sigma: float = Field(ge=0)
    sigma_tilde: float = Field(ge=0)
    horizon: float = Field(1.0, gt=0)
    initial: InitConfig = GaussianInit(kind="gaussian")
    cost: CostConfig


class DiscretizationConfig(_Strict):
    steps_per_unit: int = Field(100, ge=1)
    n_common: int = Field(64, ge=1)
    n_particles: int = Field(2000, ge=2)
    basis: list[str] = list(feat.DEFAULT_BASIS)
    ridge: Optional[float] = Field(None, ge=0)

    @field_validator("basis")
    @classmethod
    def _basis(cls, v):
        feat.validate(v)
        return v


class SolverSection(_Strict):
    damping: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-4, gt=0)
    max_iter: int = Field(200, ge=1)
    inner_damping: float = Field(0.5, gt=0, le=1)
    inner_tol: float = Field(1e-6, gt=0)
    inner_max_iter: int = Field(200, ge=1)
    split_ratio: float = Field(0.9, gt=0)
    split_patience: int = Field(5, ge=1)


class DiagnosticsConfig(_Strict):
    assumptions: bool = True
    assumption_trials: int = Field(10_000, ge=1)
    oracle: bool = True
    smp_perturbations: int = Field(20, ge=0)
    exploitability: bool = True
    uniqueness: bool = False
    uniqueness_starts: list[float] = [0.0, 1.0, -1.0]
    export_paths: bool = False


class ExperimentConfig(_Strict):
    model: ModelConfig
    discretization: DiscretizationConfig = DiscretizationConfig()
    solver: SolverSection = SolverSection()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    seed: int = Field(0, ge=0)
    output: str = "out"

    def build_model(self) -> MfgModel:
        m = self.model
        return MfgModel(_build_cost(m.cost), m.sigma, m.sigma_tilde, m.horizon, m.initial.law())

    def build_discretization(self) -> Discretization:
        d = self.discretization
        return Discretization(d.n_common, d.n_particles, d.steps_per_unit,
                              RegressionBasis(tuple(d.basis), d.ridge))

    def build_solver(self, workers: int = 1) -> SolverConfig:
        return SolverConfig(**self.solver.model_dump(), workers=workers)

    def echo(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything except the output directory."""
        body = self.model_dump(mode="json", exclude={"output"})
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# loading and error reporting

_TAGGED: dict[str, type[BaseModel]] = {
    "dirac": DiracInit, "gaussian": GaussianInit, "uniform": UniformInit,
    "track_mean": TrackMeanCost, "quadratic": QuadraticCost,
    "mean_square_distance": MeanSquareDistanceCost,
    "state_only_quadratic": StateOnlyQuadraticCost, "zero": ZeroCost,
}


def _walk(loc: tuple) -> tuple[type[BaseModel] | None, tuple]:
    """Model addressed by ``loc`` and the location with union tags removed."""
    cls: Any = ExperimentConfig
    shown: list = []
    for part in loc:
        if cls is None:
            if part in _TAGGED:
                cls = _TAGGED[part]
                continue
            return None, tuple(shown) + (part,)
        shown.append(part)
        if isinstance(part, int) or part not in cls.model_fields:
            cls = None
            continue
        ann = cls.model_fields[part].annotation
        cls = ann if isinstance(ann, type) and issubclass(ann, BaseModel) else None
    return cls, tuple(shown)


def _describe(err: dict) -> str:
    loc = tuple(err["loc"])
    if err["type"] == "extra_forbidden":
        parent, shown = _walk(loc[:-1])
        key = ".".join(str(p) for p in shown + (loc[-1],))
        known = list(parent.model_fields) if parent is not None else []
        hint = difflib.get_close_matches(str(loc[-1]), known, n=1)
        tail = f"; did you mean {'.'.join(str(p) for p in shown + (hint[0],))!r}?" if hint else ""
        return f"unknown key {key!r}{tail}"
    _, shown = _walk(loc)
    return f"{'.'.join(str(p) for p in shown)}: {err['msg']}"


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        line = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(
            f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}\n    {' ' * (exc.colno - 1)}^"
        ) from None
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        msgs = [_describe(e) for e in exc.errors()]
        raise ConfigError(f"{source}: invalid config\n  " + "\n  ".join(msgs)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
