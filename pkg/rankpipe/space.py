"""
Mixed-type tuning parameter spaces and their real-vector encoding.

A parameter-space file is a JSON list of descriptors::

    [{"name": "user_batch", "type": "integer", "range": [10, 45], "default": 30,
      "level": "stage", "stage": "user", "target": "processors.user.batch_size"},
     {"name": "huge_page", "type": "categorical", "categories": ["Default", "Always"],
      "default": "Default", "level": "system", "target": "allocator.huge_page"}, ...]

``target`` says where a value lands in a pipeline configuration overlay: either
``processors.<id>.<field>`` (``batch_size``, ``parallelism`` or an operator setting) or
``<section>.<key>``. ``scale`` multiplies the value on the way (percent to fraction).
"""
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, RankpipeError

LOG = logging.getLogger(__name__)

INTEGER = "integer"
CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

SYSTEM = "system"
STAGE = "stage"

PROCESSOR_FIELDS = ("batch_size", "parallelism", "channel_capacity")


class PointOutOfRange(RankpipeError):
    def __init__(self, name: str, value: Any) -> None:
        self.name = name
        self.value = value
        super().__init__(f"value {value!r} of parameter {name} is out of range")


@dataclass(frozen=True)
class ParameterDescriptor:
    name: str
    kind: str
    default: Any
    low: float = 0.0
    high: float = 0.0
    categories: Sequence[Any] = ()
    level: str = SYSTEM
    stage: Optional[str] = None
    target: Optional[str] = None
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind not in (INTEGER, CONTINUOUS, CATEGORICAL):
            raise ConfigError(f"parameter {self.name} has unknown type {self.kind}")
        if self.level not in (SYSTEM, STAGE):
            raise ConfigError(f"parameter {self.name} has unknown level {self.level}")
        if self.level == STAGE and not self.stage:
            raise ConfigError(f"stage parameter {self.name} needs an owning stage")
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise ConfigError(f"categorical parameter {self.name} has no categories")
        elif self.kind == INTEGER and int(self.high) - int(self.low) < 1:
            raise ConfigError(f"integer parameter {self.name} needs at least two values")
        elif self.kind == CONTINUOUS and not self.low < self.high:
            raise ConfigError(f"parameter {self.name} has an empty range")
        if not self.contains(self.default):
            raise ConfigError(f"default {self.default!r} of {self.name} is out of range")

    @property
    def lower(self) -> float:
        return 0.0 if self.kind == CATEGORICAL else float(self.low)

    @property
    def upper(self) -> float:
        return float(len(self.categories) - 1) if self.kind == CATEGORICAL else float(self.high)

    def contains(self, value: Any) -> bool:
        if self.kind == CATEGORICAL:
            return value in self.categories
        if isinstance(value, bool) or not isinstance(value, (int, float, np.number)):
            return False
        if self.kind == INTEGER and int(value) != value:
            return False
        return self.low <= value <= self.high

    def encode(self, value: Any) -> float:
        if self.kind == CATEGORICAL:
            return float(self.categories.index(value))
        return float(value)

    def decode(self, x: float) -> Any:
        x = min(self.upper, max(self.lower, float(x)))
        if self.kind == CATEGORICAL:
            return self.categories[int(round(x))]
        if self.kind == INTEGER:
            return int(round(x))
        return x

    def to_dict(self) -> Dict[str, Any]:
        doc = {"name": self.name, "type": self.kind, "default": self.default, "level": self.level}
        if self.kind == CATEGORICAL:
            doc["categories"] = list(self.categories)
        else:
            doc["range"] = [self.low, self.high]
        for key in ("stage", "target"):
            if getattr(self, key) is not None:
                doc[key] = getattr(self, key)
        if self.scale != 1.0:
            doc["scale"] = self.scale
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ParameterDescriptor":
        try:
            kind = doc["type"]
            low, high = doc.get("range", (0.0, 0.0))
            return cls(
                name=str(doc["name"]),
                kind=kind,
                default=doc["default"],
                low=low,
                high=high,
                categories=doc.get("categories", ()),
                level=doc.get("level", SYSTEM),
                stage=doc.get("stage"),
                target=doc.get("target"),
                scale=float(doc.get("scale", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid parameter descriptor {dict(doc)}: {e}")


class TuningPoint(Mapping[str, Any]):
    """
    A full assignment of values to the parameters of a space.
    """

    def __init__(self, values: Mapping[str, Any]) -> None:
        self._values = dict(values)

    def __getitem__(self, name: str) -> Any:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def replace(self, **changes) -> "TuningPoint":
        values = dict(self._values)
        values.update(changes)
        return TuningPoint(values)

    def __eq__(self, other):
        if isinstance(other, TuningPoint):
            return self._values == other._values
        return NotImplemented

    def __hash__(self):
        return hash(tuple(sorted((k, str(v)) for k, v in self._values.items())))

    def __str__(self):
        return f"TuningPoint({self._values})"

    def __repr__(self):
        return self.__str__()


class ParameterSpace:
    def __init__(self, descriptors: Sequence[ParameterDescriptor]) -> None:
        self.descriptors: List[ParameterDescriptor] = list(descriptors)
        names = [d.name for d in self.descriptors]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique")
        if not self.descriptors:
            raise ConfigError("parameter space is empty")

    @property
    def dimension(self) -> int:
        return len(self.descriptors)

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.descriptors]

    def __getitem__(self, name: str) -> ParameterDescriptor:
        for d in self.descriptors:
            if d.name == name:
                return d
        raise KeyError(name)

    @property
    def lower(self) -> np.ndarray:
        return np.array([d.lower for d in self.descriptors])

    @property
    def upper(self) -> np.ndarray:
        return np.array([d.upper for d in self.descriptors])

    def defaults(self) -> TuningPoint:
        return TuningPoint({d.name: d.default for d in self.descriptors})

    def validate(self, point: Mapping[str, Any]) -> None:
        """
        :raises PointOutOfRange: if a value is missing or outside its range
        """
        for d in self.descriptors:
            if d.name not in point or not d.contains(point[d.name]):
                raise PointOutOfRange(d.name, point.get(d.name))

    def encode(self, point: Mapping[str, Any]) -> np.ndarray:
        return np.array([d.encode(point[d.name]) for d in self.descriptors])

    def decode(self, x: Sequence[float]) -> TuningPoint:
        return TuningPoint({d.name: d.decode(v) for d, v in zip(self.descriptors, x)})

    def sample(self, rng: np.random.Generator) -> TuningPoint:
        return self.decode(rng.uniform(self.lower, self.upper))

    def stages(self) -> List[str]:
        return sorted({d.stage for d in self.descriptors if d.level == STAGE})

    def to_overlay(self, point: Mapping[str, Any]) -> Dict[str, Any]:
        """
        Translates a point into a pipeline configuration overlay (see
        ``rankpipe.pipeline.apply_overlay``). Parameters without a target are skipped.
        """
        overlay: Dict[str, Any] = {}
        for d in self.descriptors:
            if not d.target:
                continue
            value = point[d.name]
            if d.kind != CATEGORICAL and d.scale != 1.0:
                value = value * d.scale

            parts = d.target.split(".")
            if parts[0] == "processors":
                if len(parts) != 3:
                    raise ConfigError(f"target {d.target} must be processors.<id>.<field>")
                processor = overlay.setdefault("processors", {}).setdefault(parts[1], {})
                if parts[2] in PROCESSOR_FIELDS:
                    processor[parts[2]] = int(value)
                else:
                    processor.setdefault("settings", {})[parts[2]] = value
            else:
                if len(parts) != 2:
                    raise ConfigError(f"target {d.target} must be <section>.<key>")
                overlay.setdefault(parts[0], {})[parts[1]] = value
        return overlay

    def to_list(self) -> List[Dict[str, Any]]:
        return [d.to_dict() for d in self.descriptors]

    @classmethod
    def from_list(cls, docs: Sequence[Mapping[str, Any]]) -> "ParameterSpace":
        if not isinstance(docs, list):
            raise ConfigError("parameter space must be a list of descriptors")
        return cls([ParameterDescriptor.from_dict(d) for d in docs])

    @classmethod
    def load(cls, path: str) -> "ParameterSpace":
        try:
            with open(path, "r", encoding="utf-8") as fd:
                return cls.from_list(json.load(fd))
        except OSError as e:
            raise ConfigError(f"cannot read parameter space {path}: {e}")
        except ValueError as e:
            raise ConfigError(f"parameter space {path} is not valid JSON: {e}")

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fd:
            json.dump(self.to_list(), fd, indent=2)


def continuous_space(dimension: int, low: float, high: float, default: float = 0.0):
    """
    A purely continuous space of ``x0 .. x<dimension - 1>``, all system level and untargeted.
    """
    return ParameterSpace(
        [ParameterDescriptor(f"x{i}", CONTINUOUS, default, low, high) for i in range(dimension)]
    )


def default_space() -> ParameterSpace:
    """
    The stage batch sizes, cache sizes and allocator knobs of the serving pipeline, with the
    ranges and defaults a production deployment started from.
    """

    def batch(name: str, default: int, low: int, high: int, stage: str) -> ParameterDescriptor:
        return ParameterDescriptor(
            name,
            INTEGER,
            default,
            low,
            high,
            level=STAGE,
            stage=stage,
            target=f"processors.{stage}.batch_size",
        )

    return ParameterSpace(
        [
            batch("user_batch", 30, 10, 45, "user"),
            batch("item_extractor_batch", 4, 2, 45, "item_extractor"),
            batch("item_processor_batch", 6, 2, 45, "item_processor"),
            batch("cube_batch", 10, 1, 20, "cube"),
            batch("dnn_batch", 15, 10, 45, "dnn"),
            ParameterDescriptor(
                "cube_cache_ratio", CONTINUOUS, 1.0, 0.1, 5.0, target="cache.disk_ratio", scale=0.01
            ),
            ParameterDescriptor(
                "query_cache_window", CONTINUOUS, 120.0, 60.0, 600.0, target="cache.query_window"
            ),
            ParameterDescriptor("arenas", INTEGER, 500, 350, 700, target="allocator.arenas"),
            ParameterDescriptor(
                "max_active_extent", INTEGER, 6, 5, 40, target="allocator.max_active_extent"
            ),
            ParameterDescriptor(
                "huge_page",
                CATEGORICAL,
                "Default",
                categories=("Default", "Always"),
                target="allocator.huge_page",
            ),
        ]
    )
