import pytest
from pytest_httpserver import HTTPServer
from werkzeug import Response

from rankpipe.client import ServiceClient, ServiceError
from rankpipe.schema import Candidate, ScoreRequest
from rankpipe.service import serve

_score_response = """{
"request_id": "r1",
"tenant": null,
"generation": 3,
"items": [
    {"item": "i1", "score": 0.8, "scores": {"dnn_ctr": 0.8}, "cache_hit": true}
],
"shed": ["i2"],
"trace": []
}"""

_metrics = """rankpipe_requests_total{outcome="ok"} 10
rankpipe_cube_cache_hit_ratio 0.85
rankpipe_query_cache_hit_ratio{model="dnn_ctr"} 0.25
"""


def _request():
    return ScoreRequest(
        user="u1",
        candidates=[Candidate("i1", 0.9), Candidate("i2", 0.1)],
        request_id="r1",
    )


def test_score(httpserver: HTTPServer):
    httpserver.expect_request(
        "/v1/score", method="POST", json=_request().to_dict()
    ).respond_with_data(_score_response, content_type="application/json")

    client = ServiceClient(httpserver.url_for("/"))
    response = client.score(_request())

    assert response.generation == 3
    assert response.shed == ["i2"]
    assert response.shed_count == 1
    assert response.cache_hits == 1
    assert response.scores() == {"i1": 0.8}


def test_error_response(httpserver: HTTPServer):
    def handler(request):
        return Response('{"error": "missing user", "type": "MalformedRequest"}', 400)

    httpserver.expect_request("/v1/score", method="POST").respond_with_handler(handler)

    client = ServiceClient(httpserver.url_for("/"))
    with pytest.raises(ServiceError) as e:
        client.score(_request())

    assert e.value.status_code == 400
    assert e.value.type == "MalformedRequest"
    assert "missing user" in str(e.value)


def test_error_without_json_body(httpserver: HTTPServer):
    httpserver.expect_request("/v1/health").respond_with_data("unavailable", status=503)

    with pytest.raises(ServiceError) as e:
        ServiceClient(httpserver.url_for("/")).health()
    assert e.value.status_code == 503
    assert e.value.type is None


def test_feedback(httpserver: HTTPServer):
    httpserver.expect_request(
        "/v1/feedback", method="POST", json={"user": "u1", "kind": "click"}
    ).respond_with_json({"invalidated": 4})

    assert ServiceClient(httpserver.url_for("/")).feedback("u1") == 4


def test_stats_parses_metrics(httpserver: HTTPServer):
    httpserver.expect_request("/v1/metrics").respond_with_data(_metrics)

    stats = ServiceClient(httpserver.url_for("/")).stats()
    assert stats["cube_cache"] == {"hit_ratio": 0.85}
    assert stats["query_cache"] == {"dnn_ctr": {"hit_ratio": 0.25}}


def test_against_running_service(service_config, make_request):
    handle = serve(service_config.override(listen="127.0.0.1:0")).start()
    client = ServiceClient(handle.url)
    try:
        assert client.health()["ready"] is True

        response = client.score(make_request(1))
        assert len(response.items) == 12
        assert response.generation == 1

        assert client.feedback("u1") == 12
        assert "cube_cache" in client.stats()
    finally:
        client.close()
        handle.shutdown()
