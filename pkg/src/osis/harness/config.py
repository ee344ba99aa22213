"""Experiment configuration: one JSON document holding every knob of a run.

Loading is strict. Unknown keys and ill-typed values raise
:class:`ConfigError` with the dotted path of the offending key, e.g.
``model.widths[1]: expected int, got 'a'``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ..infer import ClusteringConfig, InferenceConfig
from ..model import ModelConfig
from ..raster import DESK_GEOMETRY, GridGeometry
from ..scene import SceneGenConfig
from ..train import LossConfig, TrainConfig

CONFIG_NAME = "config.json"
FIXED_NMS_BOX = 1.0  # square NMS footprint (m) when boxes are not regressed
VARIANTS = ("bottomup", "bottomup_e")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Toggles:
    """Ablation switches: discriminative loss, box regression, variance prediction."""

    dl: bool = True
    br: bool = True
    var: bool = True

    def label(self) -> str:
        return " ".join(f"{k.upper()}={'on' if getattr(self, k) else 'off'}" for k in ("dl", "br", "var"))


ABLATION_ROWS = (Toggles(False, False, False), Toggles(True, False, False), Toggles(True, True, False),
                 Toggles(True, True, True))


@dataclass(frozen=True)
class BaselineSpec:
    """Bottom-up baseline: semantic segmentation, then per-class DBSCAN.

    ``bottomup`` clusters on 3D locations, ``bottomup_e`` on embeddings
    learned with the discriminative loss.
    """

    variant: str = "bottomup"
    eps: float = 0.5
    min_pts: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def features(self) -> str:
        return "locations" if self.variant == "bottomup" else "embeddings"

    @property
    def clustering(self) -> ClusteringConfig:
        beta = 1.0 if self.variant == "bottomup" else 0.0
        return ClusteringConfig(beta=beta, eps=self.eps, min_pts=self.min_pts)


def _desk_scenes() -> SceneGenConfig:
    return SceneGenConfig(thing_counts={0: 2, 1: 2, 2: 2})


def _desk_test_scenes() -> SceneGenConfig:
    return SceneGenConfig(thing_counts={0: 2, 1: 2, 2: 2}, unknown_shapes=("cone", "boulder", "blob"))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a desk-scale experiment.

    Training scenes draw unknown objects from ``train_scenes.unknown_shapes``;
    test scenes use ``test_scenes`` so that held-out shapes can be evaluated.
    """

    name: str = "desk"
    train_scenes: SceneGenConfig = field(default_factory=_desk_scenes)
    test_scenes: SceneGenConfig = field(default_factory=_desk_test_scenes)
    n_train: int = 60
    n_test: int = 20
    data_seed: int = 0
    test_seed_offset: int = 10000
    train_seed: int = 0
    geometry: GridGeometry = DESK_GEOMETRY
    model: ModelConfig = field(default_factory=lambda: ModelConfig(widths=(32, 48, 64), width=48))
    # a small embedding weight keeps the embedding losses from stalling detection in the shared trunk
    loss: LossConfig = field(default_factory=lambda: LossConfig(lambda_emb=0.1))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(warmup_steps=100, decay_every=8))
    inference: InferenceConfig = field(default_factory=lambda: InferenceConfig(
        nms_iou=0.1, clustering=ClusteringConfig(beta=0.5, eps=0.5, min_pts=3)))
    toggles: Toggles = field(default_factory=Toggles)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    sweep_betas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    workers: int = 1

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("scene counts must be nonnegative")
        if self.model.Z != self.geometry.Z:
            raise ValueError(f"model.Z={self.model.Z} differs from geometry.Z={self.geometry.Z}")
        if self.model.n_things != len(self.train_scenes.catalog.thing_classes):
            raise ValueError("model.n_things does not match the class catalog")
        if self.model.n_stuff != len(self.train_scenes.catalog.stuff_classes):
            raise ValueError("model.n_stuff does not match the class catalog")
        if any(not 0.0 <= b <= 1.0 for b in self.sweep_betas):
            raise ValueError("sweep_betas must lie in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    # effective sub-configs -------------------------------------------------

    def with_toggles(self, toggles: Toggles) -> "ExperimentConfig":
        return replace(self, toggles=toggles)

    def loss_config(self) -> LossConfig:
        t = self.toggles
        return replace(self.loss, use_dl=t.dl, use_br=t.br, predict_variance=t.var)

    def inference_config(self) -> InferenceConfig:
        t = self.toggles
        return replace(self.inference, predict_variance=t.var,
                       fixed_box=None if t.br else FIXED_NMS_BOX)

    def train_seeds(self) -> list[int]:
        return [self.data_seed + i for i in range(self.n_train)]

    def test_seeds(self) -> list[int]:
        return [self.data_seed + self.test_seed_offset + i for i in range(self.n_test)]

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def _to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        if type(obj).__name__ == "ClassCatalog":
            return {"thing_classes": list(obj.thing_classes), "stuff_classes": list(obj.stuff_classes),
                    "names": {str(k): v for k, v in obj.names.items()}}
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _check_scalar(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    return value


def _convert(value: Any, default: Any, path: str) -> Any:
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return _build(type(default), value, path, default)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default:
            return tuple(_check_scalar(v, default[0], f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return value
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{path}: expected a number or null, got {value!r}")
        return value
    return _check_scalar(value, default, path)


def _build(cls, data: dict, path: str, base: Any = None):
    base = base if base is not None else cls()
    if type(base).__name__ == "ClassCatalog":
        try:
            return type(base)(tuple(data["thing_classes"]), tuple(data["stuff_classes"]),
                              {int(k): v for k, v in data.get("names", {}).items()})
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{path}: invalid class catalog ({e})") from e
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{sub}: unknown key")
        kwargs[key] = _convert(value, getattr(base, key), sub)
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object at top level")
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)
