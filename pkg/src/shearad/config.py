"""Run configuration: one JSON document covering every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from shearad.datamodel import subset_definition
from shearad.errors import ValidationError
from shearad.eval.features import FEATURE_SOURCES
from shearad.models.teacher import PretextConfig
from shearad.models.training import KINDS, Hyperparams, default_hyperparams, default_model_config, model_config_from_json
from shearad.scoring import DEFAULT_MIN_AREA, DEFAULT_SIGMA, DEFAULT_THRESHOLDS, STRATEGIES
from shearad.synthgen import GeneratorConfig


def _tuples(obj: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}


def _build(cls, obj: dict, section: str):
    try:
        return cls(**_tuples(obj))
    except TypeError as exc:
        raise ValidationError(f"bad {section} section: {exc}") from exc


@dataclass(frozen=True)
class SubsetSection:
    name: str = "A"
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self) -> None:
        subset_definition(self.name)
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            raise ValidationError(f"subset ratios must be three positive reals summing to 1, got {self.ratios}")


@dataclass(frozen=True)
class ModelSection:
    kinds: tuple[str, ...] = KINDS
    hyperparams: dict = field(default_factory=lambda: {k: default_hyperparams(k) for k in KINDS})
    configs: dict = field(default_factory=lambda: {k: default_model_config(k) for k in KINDS})
    teacher: PretextConfig = field(default_factory=PretextConfig)

    def __post_init__(self) -> None:
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ValidationError(f"model kinds must be drawn from {KINDS}, got {self.kinds}")

    def to_json(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "hyperparams": {k: asdict(v) for k, v in self.hyperparams.items()},
            "configs": {k: v.to_json() for k, v in self.configs.items()},
            "teacher": asdict(self.teacher),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSection":
        kinds = tuple(obj.get("kinds", KINDS))
        hp = {k: default_hyperparams(k) for k in KINDS}
        for k, v in obj.get("hyperparams", {}).items():
            if k not in KINDS:
                raise ValidationError(f"hyperparams for unknown model kind {k!r}")
            hp[k] = replace(hp[k], **v) if isinstance(v, dict) else hp[k]
        cfgs = {k: default_model_config(k) for k in KINDS}
        for k, v in obj.get("configs", {}).items():
            if k not in KINDS:
                raise ValidationError(f"config for unknown model kind {k!r}")
            cfgs[k] = model_config_from_json(k, {**cfgs[k].to_json(), **v})
        teacher = _build(PretextConfig, {**asdict(PretextConfig()), **obj.get("teacher", {})}, "model.teacher")
        try:
            hp = {k: v if isinstance(v, Hyperparams) else Hyperparams(**v) for k, v in hp.items()}
        except TypeError as exc:
            raise ValidationError(f"bad hyperparams: {exc}") from exc
        return cls(kinds, hp, cfgs, teacher)


@dataclass(frozen=True)
class ScoringSection:
    strategies: tuple[str, ...] = STRATEGIES
    sigma: float = DEFAULT_SIGMA
    # None selects the per-subset default.
    threshold: float | None = None
    min_area: int = DEFAULT_MIN_AREA
    # When set, the threshold is chosen on validation defectives from this many log-spaced candidates.
    threshold_search: int = 0

    def __post_init__(self) -> None:
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ValidationError(f"unknown strategies {bad}")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.min_area < 0 or self.threshold_search < 0:
            raise ValidationError("min_area and threshold_search must be non-negative")

    def threshold_for(self, subset: str) -> float:
        return DEFAULT_THRESHOLDS[subset] if self.threshold is None else float(self.threshold)


@dataclass(frozen=True)
class EvalSection:
    perplexity: float = 30.0
    iterations: int = 1000
    feature_source: str | None = None
    embed_model: str = "STFPM"
    overlay_count: int = 12

    def __post_init__(self) -> None:
        if not self.perplexity > 0 or self.iterations < 1:
            raise ValidationError("perplexity must be positive and iterations at least 1")
        if self.feature_source is not None and self.feature_source not in FEATURE_SOURCES:
            raise ValidationError(f"unknown feature source {self.feature_source!r}")
        if self.embed_model not in KINDS:
            raise ValidationError(f"unknown embed model {self.embed_model!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    subset: SubsetSection = field(default_factory=SubsetSection)
    model: ModelSection = field(default_factory=ModelSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "generator": self.generator.to_json(),
            "subset": asdict(self.subset),
            "model": self.model.to_json(),
            "scoring": asdict(self.scoring),
            "eval": asdict(self.eval),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ValidationError("config must be a JSON object")
        if "seed" not in obj:
            raise ValidationError("config is missing the mandatory 'seed'")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError(f"unknown config sections {unknown}")
        gen = GeneratorConfig.from_json({**GeneratorConfig().to_json(), **obj.get("generator", {})})
        return cls(
            seed=obj["seed"],
            generator=gen,
            subset=_build(SubsetSection, obj.get("subset", {}), "subset"),
            model=ModelSection.from_json(obj.get("model", {})),
            scoring=_build(ScoringSection, obj.get("scoring", {}), "scoring"),
            eval=_build(EvalSection, obj.get("eval", {}), "eval"),
            output_dir=str(obj.get("output_dir", "runs")),
        )

    def digest(self) -> str:
        """Hash of everything that shapes the artifacts (the output location does not)."""
        body = {k: v for k, v in self.to_json().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.digest()[:12]


def load_config(path: str | Path | None, seed: int | None = None, output: str | None = None) -> RunConfig:
    """Read a JSON config; ``seed``/``output`` override the file."""
    obj: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        obj["seed"] = seed
    if output is not None:
        obj["output_dir"] = output
    return RunConfig.from_json(obj)


def default_config_json(seed: int = 0) -> dict:
    return RunConfig(seed=seed).to_json()
