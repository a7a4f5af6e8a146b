import logging
from typing import Any, Dict, Optional

import requests

from . import config
from .errors import RankpipeError
from .schema import ScoreRequest, ScoreResponse

LOG = logging.getLogger(__name__)


class ServiceError(RankpipeError):
    response: requests.Response

    def __init__(self, response: requests.Response) -> None:
        self.response = response
        self.status_code = response.status_code
        self.type = None
        msg = response.text
        try:
            doc = response.json()
            if doc["error"]:
                msg = doc["error"]
            self.type = doc.get("type")
        except Exception:
            pass
        super().__init__(f"{response.status_code}: {msg}")


class ServiceClient:
    """
    HTTP client of a running scoring service. It offers the same scoring target interface
    as an in-process ScoringService (score, feedback, health, stats), so replay and bench
    can drive either.
    """

    def __init__(self, url: str = None, timeout: float = 10.0, session: requests.Session = None):
        self.url = (url or f"http://{config.LISTEN_ADDRESS}").rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def _post(self, path: str, doc: Dict[str, Any]) -> requests.Response:
        LOG.debug("posting to %s%s", self.url, path)
        response = self.session.post(self.url + path, json=doc, timeout=self.timeout)
        if not response.ok:
            raise ServiceError(response)
        return response

    def _get(self, path: str) -> requests.Response:
        response = self.session.get(self.url + path, timeout=self.timeout)
        if not response.ok:
            raise ServiceError(response)
        return response

    def score(self, request: ScoreRequest, timeout: Optional[float] = None) -> ScoreResponse:
        return ScoreResponse.from_dict(self._post("/v1/score", request.to_dict()).json())

    def feedback(self, user: str, kind: str = "click") -> int:
        return int(self._post("/v1/feedback", {"user": user, "kind": kind}).json()["invalidated"])

    def health(self) -> Dict[str, Any]:
        return self._get("/v1/health").json()

    def metrics(self) -> str:
        return self._get("/v1/metrics").text

    def stats(self) -> Dict[str, Any]:
        """
        Hit ratios parsed from the metrics endpoint.
        """
        doc: Dict[str, Any] = {"query_cache": {}}
        for line in self.metrics().splitlines():
            if line.startswith("#"):
                continue
            name, _, value = line.rpartition(" ")
            if name == "rankpipe_cube_cache_hit_ratio":
                doc["cube_cache"] = {"hit_ratio": float(value)}
            elif name.startswith("rankpipe_query_cache_hit_ratio{"):
                model = name.split('model="', 1)[1].split('"', 1)[0]
                doc["query_cache"][model] = {"hit_ratio": float(value)}
        return doc

    def close(self) -> None:
        self.session.close()
