import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from electrolyte_loop.composition import DesignAxes, Electrolyte, axes_to_electrolyte
from electrolyte_loop.errors import ClientError, ProtocolError
from electrolyte_loop.protocol import (
    STATUSES,
    ExperimentClient,
    ExperimentRequest,
    ExperimentResponse,
    HttpTransport,
    LabService,
    LoopbackTransport,
    decode_request,
    decode_response,
    encode,
    serve,
    submit_experiment,
)
from electrolyte_loop.virtual_lab import LabConfig, new_lab

BASELINE = Electrolyte.from_fractions(0.30, 0.0, 0.70, 1.1)

electrolytes = st.builds(
    lambda ec, r, m: axes_to_electrolyte(DesignAxes(ec, r, m)),
    st.floats(0.30, 0.50),
    st.floats(0.0, 1.0),
    st.floats(0.0, 2.0),
)
requests = st.builds(
    ExperimentRequest,
    st.text(min_size=1, max_size=20),
    st.integers(1, 2**53),
    electrolytes,
    st.integers(2, 6),
)
finite = st.floats(-1e6, 1e6, allow_nan=False)


@st.composite
def responses(draw):
    status = draw(st.sampled_from(STATUSES))
    eid = draw(st.integers(1, 2**53))
    if status != "ok":
        return ExperimentResponse(eid, status, reason=draw(st.text(max_size=40)))
    runs = draw(st.lists(st.floats(0, 50), min_size=2, max_size=6))
    return ExperimentResponse(
        eid,
        "ok",
        conductivity_ms_cm=sum(runs[1:]) / (len(runs) - 1),
        density_g_ml=draw(st.floats(0.5, 2.0)),
        temperature_c=draw(finite),
        runs=tuple(runs),
        duration_s=draw(st.floats(0, 1e6)),
    )


@settings(max_examples=300)
@given(requests)
def test_request_round_trip(req):
    assert decode_request(encode(req)) == req


@settings(max_examples=300)
@given(responses())
def test_response_round_trip(resp):
    assert decode_response(encode(resp)) == resp


def test_wire_field_names():
    req = ExperimentRequest("c", 1, BASELINE)
    assert json.loads(encode(req)) == {
        "campaign_id": "c",
        "experiment_id": 1,
        "composition": {"w_ec": 0.3, "w_dmc": 0.0, "w_emc": 0.7, "molality_mol_kg": 1.1},
        "replicates": 3,
    }


@pytest.mark.parametrize(
    "body",
    [
        b"not json",
        b"[]",
        b'{"campaign_id": "c", "experiment_id": 1}',
        b'{"campaign_id": "c", "experiment_id": 0, "composition": {"w_ec": 0.3, "w_dmc": 0, "w_emc": 0.7, "molality_mol_kg": 1}}',
        b'{"campaign_id": "c", "experiment_id": 1, "composition": {"w_ec": 0.3, "w_dmc": 0, "w_emc": 0.6, "molality_mol_kg": 1}}',
        b'{"campaign_id": "c", "experiment_id": 1, "replicates": 1, "composition": {"w_ec": 0.3, "w_dmc": 0, "w_emc": 0.7, "molality_mol_kg": 1}}',
        b'{"campaign_id": "c", "experiment_id": 1, "extra": 1, "composition": {"w_ec": 0.3, "w_dmc": 0, "w_emc": 0.7, "molality_mol_kg": 1}}',
    ],
)
def test_malformed_requests_rejected(body):
    with pytest.raises(ProtocolError):
        decode_request(body)


def test_ok_response_invariants():
    with pytest.raises(ProtocolError):
        ExperimentResponse(1, "ok", 10.0, 1.2, 27.0, (9.0, 10.0, 11.0), 60.0)  # mean of runs 2..3 is 10.5
    with pytest.raises(ProtocolError):
        ExperimentResponse(1, "ok", float("nan"), 1.2, 27.0, (9.0, 10.0, 10.0), 60.0)
    with pytest.raises(ProtocolError):
        ExperimentResponse(1, "bogus")


@pytest.fixture
def service():
    cfg = LabConfig(seed=4)
    return LabService(new_lab(cfg), cfg)


def test_baseline_request(service):
    client = ExperimentClient(LoopbackTransport(service))
    resp = submit_experiment(client, ExperimentRequest("c", 1, BASELINE))
    assert resp.status == "ok"
    assert resp.conductivity_ms_cm == pytest.approx(9.8, abs=1.0)
    assert resp.duration_s == 80 * 60


def test_fractions_summing_to_point_nine_get_400(service):
    body = json.dumps(
        {"campaign_id": "c", "experiment_id": 1,
         "composition": {"w_ec": 0.3, "w_dmc": 0.0, "w_emc": 0.6, "molality_mol_kg": 1.0}}
    ).encode()
    code, reply = service.route("POST", "/experiment", body)
    assert code == 400
    payload = json.loads(reply)
    assert payload["status"] == "invalid_request"
    assert "sum" in payload["reason"]
    assert service.measurements == 0


def test_idempotent_resubmission(service):
    client = ExperimentClient(LoopbackTransport(service))
    req = ExperimentRequest("c", 7, BASELINE)
    first = client.submit(req)
    clock = service.state.clock_s
    again = client.submit(req)
    assert again == first
    assert service.measurements == 1
    assert service.state.clock_s == clock
    # same key, different experiment
    with pytest.raises(ProtocolError):
        client.submit(ExperimentRequest("c", 7, Electrolyte.from_fractions(0.4, 0.6, 0.0, 0.9)))
    # the key is scoped to the campaign
    client.submit(ExperimentRequest("other", 7, BASELINE))
    assert service.measurements == 2


def test_failure_statuses(service):
    client = ExperimentClient(LoopbackTransport(service))
    service.state.feeders = [f for f in service.state.feeders if "DMC" not in f.id]
    resp = client.submit(ExperimentRequest("c", 1, Electrolyte.from_fractions(0.4, 0.6, 0.0, 0.9)))
    assert resp.status == "infeasible_dose"
    assert resp.reason
    assert "reason" in json.loads(encode(resp))


def test_inventory_status():
    cfg = LabConfig(feeder_inventory_ml=3.0)
    client = ExperimentClient(LoopbackTransport(LabService(new_lab(cfg), cfg)))
    statuses = [client.submit(ExperimentRequest("c", k, BASELINE)).status for k in range(1, 6)]
    assert "inventory_exhausted" in statuses


def test_status_and_health(service):
    client = ExperimentClient(LoopbackTransport(service))
    assert client.health() == {"status": "alive"}
    status = client.status()
    assert set(status["inventories_ml"]) == {f.id for f in service.state.feeders}
    assert status["clock_s"] == 0.0
    assert service.route("GET", "/nowhere")[0] == 404


def test_fifo_under_concurrent_load(service):
    client = ExperimentClient(LoopbackTransport(service))
    order = []
    lock = threading.Lock()

    def go(k):
        client.submit(ExperimentRequest("c", k, BASELINE))
        with lock:
            order.append(k)

    threads = [threading.Thread(target=go, args=(k,)) for k in range(1, 9)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(order) == list(range(1, 9))
    assert service.measurements == 8
    assert service.state.clock_s == 8 * 80 * 60


def test_loopback_matches_http():
    reqs = [ExperimentRequest("c", k, axes_to_electrolyte(DesignAxes(0.3 + 0.02 * k, 0.1 * k, 0.2 * k)))
            for k in range(1, 7)]

    cfg = LabConfig(seed=9)
    loop = ExperimentClient(LoopbackTransport(LabService(new_lab(cfg), cfg)))
    a = [encode(loop.submit(r)) for r in reqs]

    with serve(new_lab(cfg), cfg) as server:
        http = ExperimentClient(HttpTransport(server.url))
        b = [encode(http.submit(r)) for r in reqs]
        assert http.health() == {"status": "alive"}
        with pytest.raises(ProtocolError):
            http.submit(ExperimentRequest("c", 1, BASELINE))  # key reused, different body
    assert a == b


def test_http_malformed_body_is_400():
    cfg = LabConfig()
    with serve(new_lab(cfg), cfg) as server:
        code, body = HttpTransport(server.url).request("POST", "/experiment", b"{")
    assert code == 400
    assert json.loads(body)["status"] == "invalid_request"


class Flaky:
    """Transport that drops the first ``n`` calls after they reach the server."""

    def __init__(self, inner, n, deliver=True):
        self.inner, self.n, self.deliver = inner, n, deliver

    def request(self, method, path, body=b""):
        if self.n > 0:
            self.n -= 1
            if self.deliver:
                self.inner.request(method, path, body)
            raise ConnectionResetError("connection dropped")
        return self.inner.request(method, path, body)


def test_retry_after_lost_reply_measures_once(service):
    client = ExperimentClient(Flaky(LoopbackTransport(service), 2), retries=3, backoff_s=0.0)
    resp = client.submit(ExperimentRequest("c", 1, BASELINE))
    assert resp.status == "ok"
    assert service.measurements == 1


def test_retry_budget_exhausted(service):
    client = ExperimentClient(Flaky(LoopbackTransport(service), 10, deliver=False), retries=2, backoff_s=0.0)
    with pytest.raises(ClientError):
        client.submit(ExperimentRequest("c", 1, BASELINE))


def test_identical_seeded_servers_identical_streams():
    def stream():
        cfg = LabConfig(seed=21)
        client = ExperimentClient(LoopbackTransport(LabService(new_lab(cfg), cfg)))
        rng = np.random.default_rng(0)
        out = []
        for k in range(1, 6):
            e = axes_to_electrolyte(DesignAxes(rng.uniform(0.3, 0.5), rng.uniform(), rng.uniform(0, 2)))
            out.append(encode(client.submit(ExperimentRequest("c", k, e))))
        return out

    assert stream() == stream()
