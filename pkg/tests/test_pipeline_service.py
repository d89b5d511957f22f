import json
import threading
import urllib.error
import urllib.request
from dataclasses import replace

import numpy as np
import pytest

from rwis.anomaly import ANOMALY, DetectorConfig
from rwis.cli import main
from rwis.config import Settings, load_settings, render_settings
from rwis.correction import ModelGrid
from rwis.data import CHANNELS, METEO_COLUMNS, format_timestamp
from rwis.errors import (
    ConfigInvalid,
    FormatError,
    IndexOutOfBounds,
    MalformedPayload,
    MissingMeteo,
    Quarantined,
    UnknownStation,
    WarmingUp,
)
from rwis.pipeline import Artifacts, content_version, correct_series, detect_labels
from rwis.service import IngestStatus, PipelineService, make_server
from rwis.store import RecordStore

# -- record store ----------------------------------------------------------------------


def test_store_appends_in_order(tmp_path):
    store = RecordStore(tmp_path)
    for i in range(5):
        assert store.append({"i": i}) == i
    assert len(store) == 5
    assert store.read(3) == {"i": 3}
    assert [r["i"] for r in store.records(2)] == [2, 3, 4]
    with pytest.raises(IndexOutOfBounds):
        store.read(5)


def test_store_survives_reopen(tmp_path):
    store = RecordStore(tmp_path)
    store.append({"a": 1})
    store.append({"b": [1.5, "x"]})
    again = RecordStore(tmp_path)
    assert list(again.records()) == [{"a": 1}, {"b": [1.5, "x"]}]


def test_store_is_append_only(tmp_path):
    store = RecordStore(tmp_path)
    store.append({"a": 1})
    before = store.log_path.read_bytes()
    store.append({"a": 2})
    assert store.log_path.read_bytes().startswith(before)


def test_torn_tail_is_ignored(tmp_path):
    store = RecordStore(tmp_path)
    store.append({"a": 1})
    with store.log_path.open("ab") as fh:
        fh.write(b'{"a": 2, "trunc')
    again = RecordStore(tmp_path)
    assert len(again) == 1
    assert again.append({"a": 3}) == 1
    assert list(RecordStore(tmp_path).records()) == [{"a": 1}, {"a": 3}]


@pytest.mark.parametrize("damage", ["delete", "truncate"])
def test_index_is_rebuilt(tmp_path, damage):
    store = RecordStore(tmp_path)
    for i in range(4):
        store.append({"i": i})
    if damage == "delete":
        store.index_path.unlink()
    else:
        store.index_path.write_bytes(store.index_path.read_bytes()[:11])
    again = RecordStore(tmp_path)
    assert [again.read(i)["i"] for i in range(4)] == [0, 1, 2, 3]
    assert len(again.index_path.read_bytes()) == 4 * 8


def test_store_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        RecordStore(tmp_path).append({"x": float("nan")})


# -- settings --------------------------------------------------------------------------


def write_ini(tmp_path, text):
    p = tmp_path / "settings.ini"
    p.write_text(text)
    return p


def test_defaults_without_file():
    s = load_settings(env={})
    assert s.train == Settings().train
    assert s.benchmark.train == s.train


def test_file_then_environment(tmp_path):
    p = write_ini(tmp_path, "[train]\nn_stages = 40\nshrinkage = 0.2\n[column]\nasphalt = 1.5, 2.1e6\n")
    s = load_settings(p, env={"RWIS_TRAIN_N_STAGES": "70", "OTHER": "1"})
    assert s.train.n_stages == 70
    assert s.train.shrinkage == 0.2
    assert s.column.asphalt == (1.5, 2.1e6)
    assert s.benchmark.train.n_stages == 70


def test_seed_applies_everywhere():
    s = load_settings(env={}, seed=9)
    assert s.train.seed == s.scenario.seed == s.benchmark.train.seed == 9


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\nx = 1\n",
        "[train]\nn_stagez = 5\n",
        "[train]\nn_stages = many\n",
        "[train]\nshrinkage = 0\n",
        "[features]\ncadence_minutes = 30\n",
        "[detector]\ncount = 30\n",
        "[scenario]\nn_stations = 2\n",
        "not an ini file",
    ],
)
def test_invalid_settings(tmp_path, text):
    with pytest.raises(ConfigInvalid):
        load_settings(write_ini(tmp_path, text), env={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_settings(tmp_path / "absent.ini", env={})


def test_rendered_settings_load_back(tmp_path):
    s = load_settings(write_ini(tmp_path, "[train]\nn_stages = 33\n[detector]\nkind = ridge\n"), env={})
    again = load_settings(write_ini(tmp_path, render_settings(s)), env={})
    assert again == s


# -- artifacts -------------------------------------------------------------------------


def test_artifacts_round_trip(tmp_path, trained):
    artifacts, _ = trained
    artifacts.save(tmp_path / "a")
    back = Artifacts.load(tmp_path / "a")
    assert back.version == artifacts.version == content_version(tmp_path / "a")
    assert back.detector_config == artifacts.detector_config
    assert back.column == artifacts.column and back.surface == artifacts.surface
    X = np.random.default_rng(0).normal(size=(30, back.grid[("road", 1)].n_features))
    np.testing.assert_array_equal(back.grid[("road", 1)].predict_many(X), artifacts.grid[("road", 1)].predict_many(X))


def test_version_tracks_content(tmp_path, trained):
    artifacts, _ = trained
    v1 = replace(artifacts).save(tmp_path / "a")
    v2 = replace(artifacts).save(tmp_path / "b")
    assert content_version(v1) == content_version(v2)
    changed = replace(artifacts, detector_config=DetectorConfig({c: 9.0 for c in CHANNELS}))
    assert content_version(changed.save(tmp_path / "c")) != content_version(v1)


def test_loading_a_non_artifact_directory(tmp_path):
    with pytest.raises(FormatError):
        Artifacts.load(tmp_path)


# -- service ---------------------------------------------------------------------------


def meteo_payload(series, i):
    d = {"station_id": series.station_id, "timestamp": format_timestamp(series.timestamps[i])}
    d.update(zip(METEO_COLUMNS, map(float, series.meteo[i])))
    d["air_temp"] = float(series.values[i, 0])
    d["humidity"] = float(series.values[i, 3])
    return d


def obs_payload(series, i, values=None):
    v = series.values[i] if values is None else values
    return {
        "station_id": series.station_id,
        "timestamp": format_timestamp(series.timestamps[i]),
        "air_temp": float(v[0]),
        "road_temp": float(v[1]),
        "underground_temp": float(v[2]),
        "humidity": float(v[3]),
    }


def feed(service, series, stop, forecast_at=(), horizon=2, lookahead=3):
    """Post meteo ahead of each observation; collect labels and forecasts."""
    labels, forecasts = {}, {}
    posted = 0
    for i in range(stop):
        while posted < min(len(series), i + 1 + lookahead):
            service.post_meteo(meteo_payload(series, posted))
            posted += 1
        labels[format_timestamp(series.timestamps[i])] = service.ingest(obs_payload(series, i))
        if i in forecast_at:
            for rec in service.forecast(series.station_id, horizon):
                forecasts[(rec.issue_time, rec.channel)] = rec
    return labels, forecasts


@pytest.fixture
def no_gate(trained):
    # quarantine that never triggers, so every slot keeps being labelled
    artifacts = trained[0]
    det = artifacts.detector_config
    return replace(artifacts, detector_config=DetectorConfig(det.thresholds, det.window, det.window))


def test_service_labels_match_offline_detection(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    labels, _ = feed(service, s, 300)
    offline = {}
    for r in detect_labels(no_gate, s.slice(0, 300)):
        offline[r.timestamp] = min(offline.get(r.timestamp, 1), r.label)
    for ts, res in labels.items():
        assert res.label == offline.get(ts)
    assert any(res.label == ANOMALY for res in labels.values()) or all(v == 1 for v in offline.values())


def test_service_forecasts_match_offline_correction(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    _, forecasts = feed(service, s, 140, forecast_at=range(120, 140), horizon=2)
    offline = {(ts, c): (p, q) for _, ts, c, h, p, q in correct_series(no_gate, s) if h == 2}
    assert len(forecasts) == 20 * 4
    for key, rec in forecasts.items():
        p, q = offline[key]
        assert rec.physical == pytest.approx(p, abs=1e-12)
        assert rec.corrected == pytest.approx(q, abs=1e-12)
        assert rec.model_version == no_gate.version


def test_correction_equals_the_model_prediction(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    _, forecasts = feed(service, s, 40, forecast_at=[39], horizon=3)
    for rec in forecasts.values():
        model = no_gate.grid[(rec.channel, 3)]
        delta = model.predict_many(np.array(rec.features)[None, :])[0]
        assert rec.correction == pytest.approx(delta, abs=1e-12)
        if rec.channel != "humidity":
            assert rec.corrected - rec.physical == pytest.approx(delta, abs=1e-12)


def test_null_grid_passes_physics_through(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(replace(no_gate, grid=ModelGrid.null(no_gate.lag_window)), RecordStore(tmp_path))
    _, forecasts = feed(service, s, 30, forecast_at=[29], horizon=1)
    for rec in forecasts.values():
        assert rec.correction == 0.0
        want = min(max(rec.physical, 0.0), 100.0) if rec.channel == "humidity" else rec.physical
        assert rec.corrected == want


def test_warm_up_and_unknown_station(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    with pytest.raises(UnknownStation):
        service.status(s.station_id)
    labels, _ = feed(service, s, 3)
    first = labels[format_timestamp(s.timestamps[0])]
    assert first.label is None and first.warning == "unknown_station_registered"
    with pytest.raises(WarmingUp):
        service.forecast(s.station_id, 1)
    feed_more(service, s, 3, 10)
    assert service.status(s.station_id)["warm"]
    assert len(service.forecast(s.station_id, 1)) == 4


def feed_more(service, s, start, stop):
    for i in range(start, stop):
        for j in range(i, min(len(s), i + 4)):
            service.post_meteo(meteo_payload(s, j))
        service.ingest(obs_payload(s, i))


def test_missing_meteo(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    for i in range(10):
        service.post_meteo(meteo_payload(s, i))
        service.ingest(obs_payload(s, i))
    with pytest.raises(MissingMeteo):
        service.forecast(s.station_id, 1)


def test_gap_restarts_warm_up(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    feed_more(service, s, 0, 10)
    assert service.status(s.station_id)["warm"]
    feed_more(service, s, 12, 13)
    assert not service.status(s.station_id)["warm"]
    with pytest.raises(WarmingUp):
        service.forecast(s.station_id, 1)


def test_quarantine_and_reset(tmp_path, scenario, trained):
    s = scenario.heldout[0]
    artifacts = replace(trained[0], detector_config=DetectorConfig({c: 1e-9 for c in CHANNELS}, 24, 3))
    service = PipelineService(artifacts, RecordStore(tmp_path))
    L = artifacts.lag_window
    feed_more(service, s, 0, L + 2)
    st = service.status(s.station_id)
    assert not st["quarantined"] and st["anomalies_in_window"] == 2
    feed_more(service, s, L + 2, L + 3)
    assert service.status(s.station_id)["quarantined"]
    for j in range(L + 3, L + 8):
        service.post_meteo(meteo_payload(s, j))
    assert service.ingest(obs_payload(s, L + 3)).status is IngestStatus.QUARANTINED_DROP
    assert service.status(s.station_id)["anomalies_in_window"] == 3
    with pytest.raises(Quarantined):
        service.forecast(s.station_id, 1)
    after = service.reset_quarantine(s.station_id)
    assert not after["quarantined"] and after["label_window"] == []
    res = service.ingest(obs_payload(s, L + 4))
    assert res.status is IngestStatus.FLAGGED


def test_replay_restores_state(tmp_path, scenario, trained):
    s = scenario.heldout[0]
    artifacts = replace(trained[0], detector_config=DetectorConfig({c: 0.3 for c in CHANNELS}, 24, 3))
    first = PipelineService(artifacts, RecordStore(tmp_path))
    feed_more(first, s, 0, 60)
    if first.status(s.station_id)["quarantined"]:
        first.reset_quarantine(s.station_id)
    feed_more(first, s, 60, 80)
    second = PipelineService(artifacts, RecordStore(tmp_path))
    assert second.replayed == len(first.store)
    assert second.status(s.station_id) == first.status(s.station_id)
    a, b = first._stations[s.station_id], second._stations[s.station_id]
    np.testing.assert_array_equal(a.column.temps, b.column.temps)
    assert {c: list(q) for c, q in a.context.items()} == {c: list(q) for c, q in b.context.items()}


@pytest.mark.parametrize(
    "payload",
    [
        [],
        {"timestamp": "2021-01-01T00:00:00Z"},
        {"station_id": "X", "timestamp": "yesterday"},
        {"station_id": "X", "timestamp": "2021-01-01T00:00:00"},
        {"station_id": "X", "timestamp": "2021-01-01T00:30:00Z"},
    ],
)
def test_malformed_payloads(tmp_path, no_gate, payload):
    service = PipelineService(no_gate, RecordStore(tmp_path))
    with pytest.raises(MalformedPayload):
        service.ingest(payload)
    with pytest.raises(MalformedPayload):
        service.post_meteo(payload)


@pytest.mark.parametrize("field, value", [("road_temp", float("nan")), ("humidity", 140.0), ("air_temp", "warm"), ("air_temp", True)])
def test_bad_readings(tmp_path, scenario, no_gate, field, value):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    payload = obs_payload(s, 0)
    payload[field] = value
    with pytest.raises(MalformedPayload):
        service.ingest(payload)


def test_observations_must_move_forward(tmp_path, scenario, no_gate):
    s = scenario.heldout[0]
    service = PipelineService(no_gate, RecordStore(tmp_path))
    service.ingest(obs_payload(s, 5))
    with pytest.raises(MalformedPayload):
        service.ingest(obs_payload(s, 5))
    with pytest.raises(MalformedPayload):
        service.ingest(obs_payload(s, 4))


def test_bad_horizon(tmp_path, no_gate):
    with pytest.raises(MalformedPayload):
        PipelineService(no_gate, RecordStore(tmp_path)).forecast("X", 4)


# -- HTTP ------------------------------------------------------------------------------


@pytest.fixture
def http(tmp_path, no_gate):
    service = PipelineService(no_gate, RecordStore(tmp_path))
    server = make_server(service, "127.0.0.1", 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", service
    server.shutdown()
    server.server_close()


def call(url, body=None):
    data = None if body is None else "".join(json.dumps(o) + "\n" for o in body).encode()
    req = urllib.request.Request(url, data=data, method="GET" if data is None else "POST")
    try:
        with urllib.request.urlopen(req) as resp:
            code, text = resp.status, resp.read().decode()
    except urllib.error.HTTPError as err:
        code, text = err.code, err.read().decode()
    return code, [json.loads(line) for line in text.splitlines() if line]


def test_http_round_trip(http, scenario):
    base, service = http
    s = scenario.heldout[0]
    sid = s.station_id
    assert call(base + "/v1/health")[1][0]["model_version"] == service.artifacts.version
    code, out = call(base + "/v1/meteo", [meteo_payload(s, i) for i in range(11)])
    assert code == 200 and all(o["status"] == "stored" for o in out)
    assert call(base + "/v1/forecast?station=nobody&horizon=1")[0] == 404
    assert call(base + "/v1/stations/nobody/status")[0] == 404
    code, out = call(base + "/v1/observations", [obs_payload(s, i) for i in range(3)])
    assert code == 200 and out[0]["status"] == "accepted" and out[0]["label"] is None
    code, out = call(base + f"/v1/forecast?station={sid}&horizon=1")
    assert code == 409 and out[0]["status"] == "warming_up"
    call(base + "/v1/observations", [obs_payload(s, i) for i in range(3, 9)])
    code, out = call(base + f"/v1/forecast?station={sid}&horizon=2")
    assert code == 200 and [o["channel"] for o in out] == list(CHANNELS)
    code, out = call(base + f"/v1/stations/{sid}/status")
    assert code == 200 and out[0]["observations"] == 9
    assert call(base + f"/v1/forecast?station={sid}&horizon=7")[0] == 400
    assert call(base + f"/v1/forecast?station={sid}&horizon=3")[0] == 422
    assert call(base + "/v1/nothing")[0] == 404


def test_http_reports_bad_lines_individually(http, scenario):
    base, _ = http
    s = scenario.heldout[0]
    req = urllib.request.Request(
        base + "/v1/observations",
        data=(json.dumps(obs_payload(s, 0)) + "\nnot json\n" + json.dumps({"station_id": ""}) + "\n").encode(),
        method="POST",
    )
    with urllib.request.urlopen(req) as resp:
        out = [json.loads(x) for x in resp.read().decode().splitlines()]
    assert out[0]["status"] == "accepted"
    assert out[1]["error"] == "MalformedPayload" and out[2]["error"] == "MalformedPayload"


def test_http_quarantine_reset(http, scenario):
    base, service = http
    s = scenario.heldout[0]
    assert call(base + "/v1/admin/quarantine/reset", [{"station_id": "nobody"}])[0] == 404
    call(base + "/v1/observations", [obs_payload(s, 0)])
    code, out = call(base + "/v1/admin/quarantine/reset", [{"station_id": s.station_id}])
    assert code == 200 and out[0]["quarantined"] is False


# -- command line ----------------------------------------------------------------------

FAST_INI = """
[scenario]
days = 14
holdout_days = 4
injection_rate = 40
[train]
n_stages = 8
[detector]
threshold_rounds = 1
injection_rate = 40
[benchmark]
threshold_rounds = 1
test_rounds = 1
corruption_rounds = 1
"""


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "fast.ini"
    ini.write_text(FAST_INI)
    assert main(["synth", "--config", str(ini), "--seed", "3", "--out", str(root / "syn")]) == 0
    return root, ini


def test_cli_train_is_deterministic(cli_run):
    root, ini = cli_run
    for name in ("a1", "a2"):
        assert main(["train", "--config", str(ini), "--seed", "3", "--input", str(root / "syn" / "train.csv"),
                     "--out", str(root / name)]) == 0
    assert Artifacts.load(root / "a1").version == Artifacts.load(root / "a2").version


def test_cli_detect_and_correct(cli_run):
    root, ini = cli_run
    if not (root / "a1").exists():
        main(["train", "--config", str(ini), "--seed", "3", "--input", str(root / "syn" / "train.csv"),
              "--out", str(root / "a1")])
    held = str(root / "syn" / "heldout.csv")
    assert main(["detect", "--config", str(ini), "--input", held, "--artifacts", str(root / "a1"), "--out", str(root / "d")]) == 0
    assert main(["correct", "--config", str(ini), "--input", held, "--artifacts", str(root / "a1"), "--out", str(root / "c")]) == 0
    lines = (root / "c" / "corrections.csv").read_text().splitlines()
    assert lines[0] == "station_id,issue_time,channel,horizon,physical,corrected"
    assert len(lines) > 100
    assert (root / "d" / "labels.csv").read_text().startswith("station_id,timestamp,channel,label,residual")


def test_cli_evaluate_writes_every_table(cli_run):
    root, ini = cli_run
    assert main(["evaluate", "--config", str(ini), "--seed", "3", "--out", str(root / "eval")]) == 0
    (run,) = list((root / "eval").iterdir())
    names = {p.name for p in run.iterdir()}
    assert names == {"table1.csv", "table2.csv", "thresholds.csv", "forecast_audit.csv", "detector_audit.csv", "settings.ini"}


def test_cli_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("station_id,timestamp,air_temp,road_temp,underground_temp,humidity\n")
    assert main(["train", "--input", str(empty), "--out", str(tmp_path / "a")]) == 2
    assert "EmptyInput" in capsys.readouterr().err


def test_cli_bad_config(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[train]\nn_stages = lots\n")
    assert main(["synth", "--config", str(ini), "--out", str(tmp_path / "s")]) == 2
    assert "ConfigInvalid" in capsys.readouterr().err
