"""
The JSON wire schema (version 1) of scoring requests and responses.

Request::

    {"request_id": "r1", "tenant": "a", "user": "u1", "timestamp": 12.5, "qid": "q3",
     "user_features": {"u_profile": ["k1", "k7"], ...},
     "candidates": [{"item": "i1", "escore": 0.7, "features": {"i_tag": ["k3"], ...}}, ...]}

Response::

    {"request_id": "r1", "tenant": "a", "generation": 5,
     "items": [{"item": "i1", "score": 0.81, "scores": {"dnn_ctr": 0.81}, "cache_hit": true},
               ...],
     "shed": ["i9", ...],
     "trace": [{"stage": "reader", "enqueued": ..., "started": ..., "finished": ...}, ...]}
"""
import uuid
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

from .errors import RankpipeError

SCHEMA_VERSION = 1

FeatureGroups = Dict[str, List[str]]


class MalformedRequest(RankpipeError):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(f"malformed score request: {reason}")


def _feature_groups(doc: Any, what: str) -> FeatureGroups:
    if doc is None:
        return {}
    if not isinstance(doc, Mapping):
        raise MalformedRequest(f"{what} must be an object of feature lists")
    groups = {}
    for group, values in doc.items():
        if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
            raise MalformedRequest(f"{what}.{group} must be a list of strings")
        groups[str(group)] = list(values)
    return groups


@dataclass
class Candidate:
    item: str
    escore: float
    features: FeatureGroups = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"item": self.item, "escore": self.escore, "features": self.features}

    @classmethod
    def from_dict(cls, doc: Any) -> "Candidate":
        if not isinstance(doc, Mapping) or "item" not in doc:
            raise MalformedRequest("every candidate needs an item id")
        try:
            escore = float(doc.get("escore", 0.0))
        except (TypeError, ValueError):
            raise MalformedRequest(f"candidate {doc.get('item')} has a non-numeric escore")
        return cls(str(doc["item"]), escore, _feature_groups(doc.get("features"), "features"))


@dataclass
class ScoreRequest:
    user: str
    candidates: List[Candidate]
    user_features: FeatureGroups = field(default_factory=dict)
    request_id: str = None
    tenant: Optional[str] = None
    timestamp: Optional[float] = None
    qid: str = ""

    def __post_init__(self):
        if self.request_id is None:
            self.request_id = uuid.uuid4().hex

    def to_dict(self) -> Dict[str, Any]:
        doc = {
            "request_id": self.request_id,
            "user": self.user,
            "user_features": self.user_features,
            "candidates": [c.to_dict() for c in self.candidates],
            "qid": self.qid,
        }
        if self.tenant is not None:
            doc["tenant"] = self.tenant
        if self.timestamp is not None:
            doc["timestamp"] = self.timestamp
        return doc

    @classmethod
    def from_dict(cls, doc: Any) -> "ScoreRequest":
        if not isinstance(doc, Mapping):
            raise MalformedRequest("request body must be a JSON object")
        if "user" not in doc:
            raise MalformedRequest("missing user")
        candidates = doc.get("candidates")
        if not isinstance(candidates, list):
            raise MalformedRequest("candidates must be a list")

        timestamp = doc.get("timestamp")
        if timestamp is not None and not isinstance(timestamp, (int, float)):
            raise MalformedRequest("timestamp must be a number")

        parsed = [Candidate.from_dict(c) for c in candidates]
        if len({c.item for c in parsed}) != len(parsed):
            raise MalformedRequest("candidate item ids must be unique")

        return cls(
            user=str(doc["user"]),
            candidates=parsed,
            user_features=_feature_groups(doc.get("user_features"), "user_features"),
            request_id=str(doc["request_id"]) if doc.get("request_id") else None,
            tenant=doc.get("tenant"),
            timestamp=float(timestamp) if timestamp is not None else None,
            qid=str(doc.get("qid") or ""),
        )


@dataclass
class ScoredItem:
    item: str
    score: Optional[float]
    scores: Dict[str, float] = field(default_factory=dict)
    cache_hit: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "item": self.item,
            "score": self.score,
            "scores": self.scores,
            "cache_hit": self.cache_hit,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ScoredItem":
        return cls(
            doc["item"],
            doc.get("score"),
            dict(doc.get("scores") or {}),
            bool(doc.get("cache_hit")),
        )


@dataclass
class ScoreResponse:
    """
    ``items`` holds the scored candidates in request order; candidates cut by the load
    shedder are listed in ``shed`` only.
    """

    request_id: str
    generation: int
    items: List[ScoredItem]
    tenant: Optional[str] = None
    trace: List[Dict[str, Any]] = field(default_factory=list)
    shed: List[str] = field(default_factory=list)

    @property
    def shed_count(self) -> int:
        return len(self.shed)

    @property
    def cache_hits(self) -> int:
        return sum(1 for i in self.items if i.cache_hit)

    def scores(self, model: str = None) -> Dict[str, float]:
        if model is None:
            return {i.item: i.score for i in self.items}
        return {i.item: i.scores[model] for i in self.items if model in i.scores}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "request_id": self.request_id,
            "tenant": self.tenant,
            "generation": self.generation,
            "items": [i.to_dict() for i in self.items],
            "shed": list(self.shed),
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ScoreResponse":
        return cls(
            request_id=doc["request_id"],
            generation=int(doc["generation"]),
            items=[ScoredItem.from_dict(i) for i in doc.get("items", [])],
            tenant=doc.get("tenant"),
            trace=list(doc.get("trace") or []),
            shed=list(doc.get("shed") or []),
        )
