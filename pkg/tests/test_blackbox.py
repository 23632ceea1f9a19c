import http.client
import json
import math
import socket

import numpy as np
import pytest

from bbuda.blackbox import (CacheError, CountingPredictor, InProcessPredictor, PredictionCache,
                            PredictionServer, Predictor, ProtocolError, RemotePredictor, TransportError,
                            fill_cache, predict_in_process, predict_remote, serve)
from bbuda.model import init_model
from bbuda.numerics import InvalidInput, rng_for


@pytest.fixture(scope="module")
def artifact():
    m = init_model([4, 6, 3], 5, seed=3)
    m.head_bias[:] = [0.1, -0.2, 0.3, 0.0, 1.0]
    return m


@pytest.fixture(scope="module")
def server(artifact):
    srv = serve(artifact)
    yield srv
    srv.shutdown()


def _raw(server, method, path, body=None):
    host, port = server.address
    conn = http.client.HTTPConnection(host, port, timeout=10)
    conn.request(method, path, body=body, headers={"Content-Type": "application/json"})
    resp = conn.getresponse()
    data = resp.read()
    conn.close()
    return resp.status, json.loads(data)


def test_meta(server, artifact):
    status, doc = _raw(server, "GET", "/meta")
    assert status == 200
    assert doc == {"classes": 5, "input_dim": 4, "schema_version": 1}


def test_predict_rows_are_distributions(server):
    status, doc = _raw(server, "POST", "/predict", json.dumps({"instances": [[0, 0, 0, 0], [1, 2, 3, 4]]}))
    assert status == 200
    p = np.array(doc["probabilities"])
    assert p.shape == (2, 5)
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-12)


def test_empty_batch(server):
    status, doc = _raw(server, "POST", "/predict", json.dumps({"instances": []}))
    assert status == 200 and doc == {"probabilities": []}


@pytest.mark.parametrize("body,msg", [
    ("{not json", "malformed"),
    (json.dumps({"rows": []}), "instances"),
    (json.dumps({"instances": [[1, 2, 3]]}), "dimension mismatch"),
    (json.dumps({"instances": [[1, 2, 3, "x"]]}), "finite numbers"),
    (json.dumps({"instances": [1, 2, 3, 4]}), "list of numbers"),
])
def test_bad_requests_get_400(server, body, msg):
    status, doc = _raw(server, "POST", "/predict", body)
    assert status == 400 and msg in doc["error"]


def test_nan_rejected(server):
    status, doc = _raw(server, "POST", "/predict", '{"instances": [[NaN, 0, 0, 0]]}')
    assert status == 400


def test_unknown_path(server):
    assert _raw(server, "GET", "/nope")[0] == 404
    assert _raw(server, "POST", "/nope", "{}")[0] == 404


def test_remote_matches_in_process_exactly(server, artifact):
    X = rng_for(0, "test").normal(size=(37, 4)) * 5
    local = predict_in_process(artifact, X)
    remote = RemotePredictor(server.url, max_batch=8).predict(X)
    assert local.tobytes() == remote.tobytes()
    assert predict_remote(server.url, X).tobytes() == local.tobytes()


def test_remote_splits_batches(server):
    X = np.zeros((25, 4))
    rp = RemotePredictor(server.url, max_batch=10)
    rp.predict(X)
    assert rp.predict_requests == 3


def test_remote_dimension_error_is_protocol_error(server):
    with pytest.raises(ProtocolError) as exc:
        RemotePredictor(server.url).predict(np.zeros((1, 3)))
    assert exc.value.status == 400


def test_transport_error_after_retries():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    rp = RemotePredictor(f"http://127.0.0.1:{port}", retries=2, backoff=0.0, timeout=1)
    with pytest.raises(TransportError) as exc:
        rp.predict(np.zeros((1, 4)))
    assert exc.value.attempts == 3


def test_bad_endpoint():
    with pytest.raises(InvalidInput):
        RemotePredictor("ftp://x")


def test_port_in_use(artifact, server):
    host, port = server.address
    with pytest.raises(OSError):
        PredictionServer(artifact, host, port)


def test_both_predictors_satisfy_the_protocol(server, artifact):
    assert isinstance(InProcessPredictor(artifact), Predictor)
    assert isinstance(RemotePredictor(server.url), Predictor)


@pytest.mark.parametrize("n,mb", [(1, 256), (256, 256), (257, 256), (1000, 64), (10, 3)])
def test_fill_cache_call_count(artifact, n, mb):
    counter = CountingPredictor(InProcessPredictor(artifact))
    cache = fill_cache(counter, np.zeros((n, 4)), max_batch=mb)
    assert counter.calls == math.ceil(n / mb)
    assert counter.instances == n
    assert len(cache) == n


class _Flaky:
    def __init__(self, inner, fail_at):
        self.inner, self.fail_at, self.calls = inner, fail_at, 0

    def predict(self, batch):
        self.calls += 1
        if self.calls == self.fail_at:
            raise TransportError("boom", 1)
        return self.inner.predict(batch)

    def num_classes(self):
        return self.inner.num_classes()

    def input_dim(self):
        return self.inner.input_dim()


def test_fill_cache_failure_propagates(artifact):
    with pytest.raises(TransportError):
        fill_cache(_Flaky(InProcessPredictor(artifact), 2), np.zeros((10, 4)), max_batch=4)


class TestCache:
    def test_immutable(self):
        c = PredictionCache(np.zeros((2, 3)), np.full((2, 2), 0.5))
        with pytest.raises(CacheError):
            c[0] = [1.0, 0.0]
        with pytest.raises(ValueError):
            c.outputs[0, 0] = 1.0
        with pytest.raises(ValueError):
            c.inputs[0, 0] = 1.0

    def test_does_not_alias_caller_arrays(self):
        out = np.full((2, 2), 0.5)
        c = PredictionCache(np.zeros((2, 3)), out)
        out[0, 0] = 9.0
        assert c.outputs[0, 0] == 0.5

    def test_roundtrip_exact(self, tmp_path, artifact):
        X = rng_for(1, "test").normal(size=(9, 4))
        c = fill_cache(InProcessPredictor(artifact), X, source="unit")
        c.save(tmp_path / "c.json")
        c2 = PredictionCache.load(tmp_path / "c.json")
        assert c2.inputs.tobytes() == c.inputs.tobytes()
        assert c2.outputs.tobytes() == c.outputs.tobytes()
        assert c2.source == "unit"

    def test_shape_checked(self):
        with pytest.raises(InvalidInput):
            PredictionCache(np.zeros((2, 3)), np.zeros((3, 2)))
