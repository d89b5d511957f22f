"""Command line interface.

    rwis synth           write a seeded synthetic scenario as CSV
    rwis train           fit the correction grid and the anomaly detector
    rwis tune-threshold  re-tune detector thresholds on new data
    rwis detect          label every observation of a CSV file
    rwis correct         physical and corrected forecasts for a CSV file
    rwis evaluate        run both benchmarks and write the report tables
    rwis serve           run the HTTP service

Every command accepts ``--config``, ``--seed`` and ``--out``. Settings can
also come from ``RWIS_<SECTION>_<KEY>`` environment variables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .anomaly import DetectorConfig, write_labels
from .config import Settings, load_settings, render_settings
from .data import parse_csv, write_csv
from .errors import EmptyInput, RwisError
from .evaluation import run_detector_benchmark, run_forecast_benchmark, write_thresholds
from .pipeline import (
    CORRECTION_COLUMNS,
    Artifacts,
    channel_sigmas,
    correct_series,
    detect_labels,
    prepare,
    train_pipeline,
    tune_thresholds,
)
from .scenario import generate_scenario
from .service import PipelineService, make_server
from .store import RecordStore

log = logging.getLogger("rwis")


def _read_series(path, settings: Settings):
    result = parse_csv(path)
    if result.skipped:
        log.warning("%s: skipped %d unparseable rows", path, result.skipped)
    if not result.series:
        raise EmptyInput(f"{path} holds no observations")
    return prepare(result.series, settings)


def _out_dir(args, default: str) -> Path:
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_synth(args, settings: Settings) -> int:
    out = _out_dir(args, "rwis-synth")
    data = generate_scenario(settings.scenario, settings.column, settings.surface)
    write_csv(out / "train.csv", data.train)
    write_csv(out / "heldout.csv", data.heldout)
    write_csv(out / "all.csv", data.full)
    meta = {"scenario": data.spec.to_dict(), "cutoff": str(data.cutoff)}
    (out / "scenario.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(data.full)} stations to {out}")
    return 0


def cmd_train(args, settings: Settings) -> int:
    out = _out_dir(args, settings.service.artifacts)
    series = _read_series(args.input, settings)
    t0 = time.perf_counter()
    artifacts, report = train_pipeline(series, settings)
    artifacts.save(out)
    print(report.render())
    print(f"artifacts {artifacts.version} written to {out} in {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_tune_threshold(args, settings: Settings) -> int:
    out = _out_dir(args, "rwis-artifacts-tuned")
    artifacts = Artifacts.load(args.artifacts)
    series = _read_series(args.input, settings)
    thresholds = tune_thresholds(artifacts.detector, series, channel_sigmas(series), settings)
    old = artifacts.detector_config
    artifacts.detector_config = DetectorConfig(thresholds, old.window, old.count)
    if Path(args.artifacts).resolve() != out.resolve():
        shutil.copytree(args.artifacts, out, dirs_exist_ok=True)
    artifacts.save(out)
    write_thresholds(out / "thresholds.csv", {artifacts.detector.kind: thresholds})
    for channel, delta in thresholds.items():
        print(f"{channel:<12}{delta:.6f}")
    print(f"artifacts {artifacts.version} written to {out}")
    return 0


def cmd_detect(args, settings: Settings) -> int:
    out = _out_dir(args, "rwis-detect")
    artifacts = Artifacts.load(args.artifacts)
    records = [r for s in _read_series(args.input, settings) for r in detect_labels(artifacts, s)]
    write_labels(out / "labels.csv", records)
    n_anom = sum(r.label == -1 for r in records)
    print(f"{len(records)} labels, {n_anom} anomalous, written to {out / 'labels.csv'}")
    return 0


def cmd_correct(args, settings: Settings) -> int:
    out = _out_dir(args, "rwis-correct")
    artifacts = Artifacts.load(args.artifacts)
    rows = [r for s in _read_series(args.input, settings) for r in correct_series(artifacts, s)]
    with (out / "corrections.csv").open("w") as fh:
        fh.write(",".join(CORRECTION_COLUMNS) + "\n")
        for sid, ts, channel, horizon, phys, corr in rows:
            fh.write(f"{sid},{ts},{channel},{horizon},{phys!r},{corr!r}\n")
    print(f"{len(rows)} forecasts written to {out / 'corrections.csv'}")
    return 0


def cmd_evaluate(args, settings: Settings) -> int:
    root = _out_dir(args, "rwis-eval")
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    out = root / stamp
    out.mkdir(parents=True, exist_ok=False)
    t0 = time.perf_counter()
    data = generate_scenario(settings.scenario, settings.column, settings.surface)
    cfg = settings.benchmark_config()
    fb = run_forecast_benchmark(data, cfg, settings.column, settings.surface)
    db = run_detector_benchmark(data, cfg)
    report = dataclasses.replace(fb.report, detector_rows=db.report.detector_rows, thresholds=db.report.thresholds)
    report.write_table1(out / "table1.csv")
    report.write_table2(out / "table2.csv")
    write_thresholds(out / "thresholds.csv", report.thresholds)
    fb.write_audit(out / "forecast_audit.csv")
    db.write_audit(out / "detector_audit.csv")
    (out / "settings.ini").write_text(render_settings(settings))
    print(report.render())
    print(f"written to {out} in {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_serve(args, settings: Settings) -> int:
    artifacts = Artifacts.load(args.artifacts or settings.service.artifacts)
    store = RecordStore(args.out or settings.service.store)
    service = PipelineService(artifacts, store)
    host = args.host or settings.service.host
    port = settings.service.port if args.port is None else args.port
    server = make_server(service, host, port)
    print(f"serving model {artifacts.version} on http://{host}:{server.server_port}/v1 "
          f"(store {store.directory}, {service.replayed} records replayed)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


COMMANDS = {
    "synth": (cmd_synth, "write a seeded synthetic scenario as CSV"),
    "train": (cmd_train, "fit the correction grid and the anomaly detector"),
    "tune-threshold": (cmd_tune_threshold, "re-tune detector thresholds on new data"),
    "detect": (cmd_detect, "label every observation of a CSV file"),
    "correct": (cmd_correct, "physical and corrected forecasts for a CSV file"),
    "evaluate": (cmd_evaluate, "run both benchmarks and write the report tables"),
    "serve": (cmd_serve, "run the HTTP service"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rwis", description="Road weather forecasting with residual correction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI settings file")
        p.add_argument("--seed", type=int, help="seed for scenario generation and training")
        p.add_argument("--out", help="output directory (the record store for serve)")
        if name in ("train", "tune-threshold", "detect", "correct"):
            p.add_argument("--input", required=True, help="observations CSV")
        if name in ("tune-threshold", "detect", "correct", "serve"):
            p.add_argument("--artifacts", required=name != "serve", help="trained artifacts directory")
        if name == "serve":
            p.add_argument("--host")
            p.add_argument("--port", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args.config, seed=args.seed)
        return COMMANDS[args.command][0](args, settings)
    except RwisError as exc:
        print(f"rwis {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
