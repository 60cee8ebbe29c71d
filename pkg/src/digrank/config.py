"""Run configuration: one JSON file, validated up front, unknown keys rejected.

Each artifact header embeds the digest of the configuration sections that
produced it (its stage and everything upstream), so a downstream stage can
tell when its inputs came from a different setup.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .confidence import ConfidenceParams
from .inference import InferenceConfig
from .lm_gateway import HttpLmConfig, MockLmSpec
from .losses import LossConfig
from .records import digest
from .scorer import FeatureSpec
from .trainer import TrainConfig
from .world import WorldSpec, mock_spec_from_dict, mock_spec_to_dict


STAGES = ("index", "collect", "dataset", "train", "rerank")


class ConfigError(ValueError):
    pass


class DigestMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0 or not 0 <= self.b <= 1:
            raise ValueError("need k1 >= 0 and 0 <= b <= 1")


@dataclass(frozen=True)
class CollectConfig:
    top_k: int = 10
    doc_position: str = "before"
    max_workers: int = 1
    tau_high: float = 0.5
    tau_low: float = 0.2

    def __post_init__(self) -> None:
        if self.top_k < 1 or self.max_workers < 1:
            raise ValueError("top_k and max_workers must be >= 1")
        if self.doc_position not in ("before", "after"):
            raise ValueError("doc_position must be 'before' or 'after'")
        if not self.tau_low < self.tau_high:
            raise ValueError("tau_low must be below tau_high")


@dataclass(frozen=True)
class DatasetConfig:
    band: tuple[float, float] = (-0.05, 0.05)
    seed: int = 0
    negative_ratio: float = 2.0

    def __post_init__(self) -> None:
        if not self.band[0] <= self.band[1]:
            raise ValueError("band must be (low, high) with low <= high")
        if not self.negative_ratio > 0:
            raise ValueError("negative_ratio must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 32)
    seed: int = 0
    features: FeatureSpec = FeatureSpec()


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"
    mock: MockLmSpec = MockLmSpec()
    http: HttpLmConfig | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "http"):
            raise ValueError(f"provider kind must be 'mock' or 'http', got {self.kind!r}")
        if self.kind == "http" and self.http is None:
            raise ValueError("provider kind 'http' needs an 'http' section")

    def model_id(self) -> str:
        return self.http.model_id if self.kind == "http" else self.mock.model_id


@dataclass(frozen=True)
class RunConfig:
    paths: dict[str, str] = field(default_factory=dict)
    provider: ProviderConfig = ProviderConfig()
    retrieval: RetrievalConfig = RetrievalConfig()
    confidence: ConfidenceParams = ConfidenceParams()
    collect: CollectConfig = CollectConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    world: WorldSpec = WorldSpec()

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "paths": dict(sorted(self.paths.items())),
            "provider": {
                "kind": self.provider.kind,
                "mock": mock_spec_to_dict(self.provider.mock),
                "http": asdict(self.provider.http) if self.provider.http else None,
            },
            "retrieval": asdict(self.retrieval),
            "confidence": asdict(self.confidence),
            "collect": asdict(self.collect),
            "dataset": {**asdict(self.dataset), "band": list(self.dataset.band)},
            "model": {
                "hidden": list(self.model.hidden),
                "seed": self.model.seed,
                "features": self.model.features.to_dict(),
            },
            "train": self.train.to_dict(),
            "inference": asdict(self.inference),
            "world": {
                **asdict(self.world),
                **{k: list(getattr(self.world, k)) for k in ("answer_bearing", "misleading", "neutral")},
            },
        }
        return json.loads(json.dumps(d))  # normalize tuples to lists

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        _reject_unknown(raw, {f.name for f in fields(cls)}, "")
        try:
            provider = _provider(raw.get("provider", {}), base_dir)
            return cls(
                paths={k: str(v) for k, v in _section(raw, "paths", None).items()},
                provider=provider,
                retrieval=_build(RetrievalConfig, _section(raw, "retrieval", RetrievalConfig), "retrieval"),
                confidence=_build(ConfidenceParams, _section(raw, "confidence", ConfidenceParams), "confidence"),
                collect=_build(CollectConfig, _section(raw, "collect", CollectConfig), "collect"),
                dataset=_dataset(_section(raw, "dataset", DatasetConfig)),
                model=_model(raw.get("model", {})),
                train=_train(raw.get("train", {})),
                inference=_build(InferenceConfig, _section(raw, "inference", InferenceConfig), "inference"),
                world=_world(_section(raw, "world", WorldSpec)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(raw, p.parent)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # -- digests ---------------------------------------------------------

    def stage_digest(self, stage: str) -> str:
        d = self.to_dict()
        parts: dict[str, Any] = {}
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        upto = STAGES[: STAGES.index(stage) + 1]
        parts["retrieval"] = d["retrieval"]
        if "collect" in upto:
            parts.update(provider=d["provider"], confidence=d["confidence"], collect=d["collect"])
        if "dataset" in upto:
            parts.update(dataset=d["dataset"], thresholds={"b1": self.train.loss.b1, "b2": self.train.loss.b2})
        if "train" in upto:
            parts.update(model=d["model"], train=d["train"])
        if "rerank" in upto:
            parts.update(inference=d["inference"])
        return digest(parts)


def check_digest(header: dict, expected: str, what: str, force: bool = False) -> None:
    """Refuse an input artifact produced under a different configuration."""
    found = header.get("config_digest")
    if found is None or found == expected or force:
        return
    raise DigestMismatch(f"{what} was produced with config digest {found}, current config gives {expected} (use --force to override)")


def _reject_unknown(raw: Any, allowed: set[str], where: str) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{where or '<root>'}' must be an object")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{where + '.' if where else ''}{key}'")


def _section(raw: dict, name: str, typ) -> dict:
    sec = raw.get(name, {})
    if typ is None:
        if not isinstance(sec, dict):
            raise ConfigError(f"section '{name}' must be an object")
        return sec
    _reject_unknown(sec, {f.name for f in fields(typ)}, name)
    return sec


def _build(typ, sec: dict, where: str):
    try:
        return typ(**sec)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _provider(sec: dict, base_dir: Path | None) -> ProviderConfig:
    _reject_unknown(sec, {"kind", "mock", "http", "mock_spec_path"}, "provider")
    mock = MockLmSpec()
    if "mock_spec_path" in sec:
        p = Path(sec["mock_spec_path"])
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        mock = mock_spec_from_dict(json.loads(p.read_text(encoding="utf-8")))
    if "mock" in sec:
        _reject_unknown(sec["mock"], {f.name for f in fields(MockLmSpec)}, "provider.mock")
        mock = MockLmSpec(**{**mock_spec_to_dict(mock), **sec["mock"]})
    http = None
    if sec.get("http") is not None:
        _reject_unknown(sec["http"], {f.name for f in fields(HttpLmConfig)}, "provider.http")
        http = HttpLmConfig(**sec["http"])
    return ProviderConfig(sec.get("kind", "mock"), mock, http)


def _dataset(sec: dict) -> DatasetConfig:
    sec = dict(sec)
    if "band" in sec:
        sec["band"] = tuple(sec["band"])
    return _build(DatasetConfig, sec, "dataset")


def _model(sec: dict) -> ModelConfig:
    _reject_unknown(sec, {"hidden", "seed", "features"}, "model")
    feats = sec.get("features", {})
    _reject_unknown(feats, {f.name for f in fields(FeatureSpec)}, "model.features")
    if "ngram_orders" in feats:
        feats = {**feats, "ngram_orders": tuple(feats["ngram_orders"])}
    return ModelConfig(tuple(sec.get("hidden", (64, 32))), int(sec.get("seed", 0)), FeatureSpec(**feats))


def _train(sec: dict) -> TrainConfig:
    _reject_unknown(sec, {f.name for f in fields(TrainConfig)}, "train")
    sec = dict(sec)
    if "loss" in sec:
        _reject_unknown(sec["loss"], {f.name for f in fields(LossConfig)}, "train.loss")
        sec["loss"] = _build(LossConfig, sec["loss"], "train.loss")
    return _build(TrainConfig, sec, "train")


def _world(sec: dict) -> WorldSpec:
    sec = dict(sec)
    for k in ("answer_bearing", "misleading", "neutral"):
        if k in sec:
            sec[k] = tuple(sec[k])
    return _build(WorldSpec, sec, "world")
