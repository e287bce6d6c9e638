"""Command-line entry point: simulate, featurize, tune, detect, reason and run-all.

Output layout under the output root::

    <root>/<scenario>/script.txt, topology.txt, process.csv, packets.{csv,npz}, ground_truth.json
    <root>/<scenario>/features.csv, features.json
    <root>/models/pipelines.pkl, tuning.json
    <root>/<scenario>/flags.csv, grouped.csv, report.json, heatmap.svg, score.json

Exit codes: 0 success, 1 unexpected error, 2 usage error, 3 missing artifact,
4 invalid input, 5 tuning failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .core import PacketLog, Topology, TopologyError, demo_topology, load_topology, read_process_log, \
    serialize_topology, write_process_log
from .featurize import (FeatureError, TrafficBaseline, build_baseline, estimate_cycle_duration, feature_frame,
                        featurize, features_from_frame)
from .forecast import ForecastError, load_artifact, save_artifact
from .pipeline import FlagMatrix, TuneConfig, TuningError, run_online, tune_all
from .reason import SignatureDBError, build_default_db, format_db, match, parse_db, render_heatmap, score, \
    write_grouped, write_report
from .simulator import ScenarioScript, ScriptError, format_script, load_script, read_ground_truth, scenario_suite, \
    simulate, write_ground_truth

logger = logging.getLogger("cpsreason")

ENV_OUT = "CPSREASON_OUT"
DEFAULT_OUT = "cpsreason-out"
EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_INVALID, EXIT_TUNING = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, tag: str, detail: str):
        super().__init__(detail)
        self.code, self.tag, self.detail = code, tag, detail


def missing(path: Path, hint: str = "") -> CliError:
    return CliError(EXIT_MISSING, "MISSING_ARTIFACT", f"{path} not found{'; ' + hint if hint else ''}")


@dataclass(frozen=True)
class RunConfig:
    topology: Optional[str] = None
    out: str = DEFAULT_OUT
    seed: Optional[int] = None
    f: float = 1.5
    l: int = 10
    w_physical: int = 10
    w_network: int = 300
    grid_profile: str = "fast"
    recovery: bool = False
    d_cycle: Optional[float] = None

    def tune_config(self) -> TuneConfig:
        return TuneConfig(l=self.l, f=self.f, w_physical=self.w_physical, w_network=self.w_network,
                          recovery=self.recovery, seed=self.seed or 0, grid_profile=self.grid_profile)

    def digest(self) -> str:
        d = asdict(self)
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def provenance(self, **extra) -> dict:
        return {"config_hash": self.digest(), "seed": self.seed, "version": __version__, **extra}

    def header(self) -> str:
        return f"cpsreason config={self.digest()} seed={self.seed}"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _topology(cfg: RunConfig) -> Topology:
    if cfg.topology is None:
        return demo_topology()
    p = Path(cfg.topology)
    if not p.exists():
        raise missing(p)
    try:
        return load_topology(p)
    except TopologyError as exc:
        raise CliError(EXIT_INVALID, "INVALID_TOPOLOGY", str(exc)) from None


def _script(spec: str, seed: Optional[int]) -> ScenarioScript:
    suite = {s.name: s for s in scenario_suite()}
    if spec in suite:
        script = suite[spec]
    else:
        p = Path(spec)
        if not p.exists():
            raise CliError(EXIT_INVALID, "UNKNOWN_SCENARIO",
                           f"'{spec}' is neither a suite scenario ({', '.join(suite)}) nor a script file")
        try:
            script = load_script(p)
        except ScriptError as exc:
            raise CliError(EXIT_INVALID, "INVALID_SCRIPT", str(exc)) from None
    return replace(script, seed=seed) if seed is not None else script


def _scenario_dir(cfg: RunConfig, scenario: str) -> Path:
    p = Path(scenario)
    if p.is_dir():
        return p
    return Path(cfg.out) / scenario


def _packets_path(d: Path) -> Path:
    for name in ("packets.npz", "packets.csv", "packets.csv.gz"):
        if (d / name).exists():
            return d / name
    raise missing(d / "packets.csv", "run 'cpsreason simulate' first")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, scenario: str, packet_format: str = "csv") -> Path:
    topo = _topology(cfg)
    script = _script(scenario, cfg.seed)
    try:
        result = simulate(topo, script)
    except ScriptError as exc:
        raise CliError(EXIT_INVALID, "INVALID_SCRIPT", str(exc)) from None
    d = Path(cfg.out) / script.name
    d.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, seed=script.seed)
    prov = cfg.provenance(scenario=script.name)
    (d / "script.txt").write_text(format_script(script))
    (d / "topology.txt").write_text(serialize_topology(topo))
    write_process_log(result.process, d / "process.csv", header_comment=cfg.header())
    for stale in ("packets.npz", "packets.csv", "packets.csv.gz"):
        (d / stale).unlink(missing_ok=True)
    if packet_format == "npz":
        result.packets.save_npz(d / "packets.npz", provenance=prov)
    else:
        result.packets.write_text(d / "packets.csv", header_comment=cfg.header())
    write_ground_truth(result.ground_truth, d / "ground_truth.json", provenance=prov)
    logger.info("simulated %s: %d s, %d packets", script.name, script.duration, len(result.packets))
    return d


def cmd_featurize(cfg: RunConfig, scenario: str, baseline_from: Optional[str] = None) -> Path:
    topo = _topology(cfg)
    d = _scenario_dir(cfg, scenario)
    if not (d / "process.csv").exists():
        raise missing(d / "process.csv", "run 'cpsreason simulate' first")
    process = read_process_log(d / "process.csv")
    packets = PacketLog.load(_packets_path(d))
    if baseline_from is not None:
        ref = _scenario_dir(cfg, baseline_from) / "features.json"
        if not ref.exists():
            raise missing(ref, f"featurize '{baseline_from}' first")
        meta = json.loads(ref.read_text())
        baseline = TrafficBaseline.from_dict(meta["baseline"])
        d_c = cfg.d_cycle or meta["d_c"]
    else:
        split = int(np.floor(len(process) * cfg.tune_config().train_fraction))
        baseline = build_baseline(packets, topo, until=split)
        try:
            d_c = cfg.d_cycle or estimate_cycle_duration(process["H_T1"].to_numpy()[:split])
        except FeatureError as exc:
            raise CliError(EXIT_INVALID, "NO_CYCLE", f"{exc}; pass --d-cycle") from None
    try:
        feats = featurize(process, packets, topo, baseline, d_c)
    except FeatureError as exc:
        raise CliError(EXIT_INVALID, "INVALID_INPUT", str(exc)) from None
    frame = feature_frame(feats, d_c)
    with open(d / "features.csv", "w", newline="") as fh:
        fh.write(f"# {cfg.header()}\n")
        frame.to_csv(fh, index=False, float_format="%.6f")
    _write_json(d / "features.json", {"provenance": cfg.provenance(scenario=d.name), "d_c": d_c,
                                      "baseline": baseline.to_dict(),
                                      "features": {f.feature_id: f.property_class for f in feats}})
    logger.info("featurized %s: %d features, d_c=%s", d.name, len(feats), d_c)
    return d


def _load_features(d: Path):
    import pandas as pd
    if not (d / "features.csv").exists() or not (d / "features.json").exists():
        raise missing(d / "features.csv", "run 'cpsreason featurize' first")
    meta = json.loads((d / "features.json").read_text())
    df = pd.read_csv(d / "features.csv", comment="#")
    feats = features_from_frame(df, meta["d_c"])
    return feats, meta


def cmd_tune(cfg: RunConfig, scenario: str = "S0") -> Path:
    d = _scenario_dir(cfg, scenario)
    feats, meta = _load_features(d)
    tcfg = cfg.tune_config()
    t0 = time.time()
    try:
        pipes = tune_all(feats, tcfg, meta["d_c"])
    except TuningError as exc:
        raise CliError(EXIT_TUNING, "TUNING_FAILED",
                       "; ".join(f"{k}: {v}" for k, v in sorted(exc.failures.items()))) from None
    mdir = Path(cfg.out) / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance(trained_on=d.name)
    save_artifact({"pipelines": pipes, "d_c": meta["d_c"], "baseline": meta["baseline"]}, mdir / "pipelines.pkl",
                  provenance=prov)
    _write_json(mdir / "tuning.json", {"provenance": prov, "count": len(pipes), "tune_config": asdict(tcfg),
                                       "pipelines": [p.summary() for p in pipes]})
    logger.info("tuned %d pipelines in %.1f s", len(pipes), time.time() - t0)
    return mdir


def cmd_detect(cfg: RunConfig, scenario: str) -> Path:
    mpath = Path(cfg.out) / "models" / "pipelines.pkl"
    if not mpath.exists():
        raise missing(mpath, "run 'cpsreason tune' first")
    try:
        bundle = load_artifact(mpath)
    except ForecastError as exc:
        raise CliError(EXIT_INVALID, "INVALID_ARTIFACT", str(exc)) from None
    d = _scenario_dir(cfg, scenario)
    feats, _ = _load_features(d)
    try:
        fm = run_online(bundle["pipelines"], feats)
    except KeyError as exc:
        raise CliError(EXIT_INVALID, "FEATURE_MISMATCH", str(exc)) from None
    fm.write_csv(d / "flags.csv", header_comment=cfg.header())
    logger.info("%s: %d nonzero flags", d.name, int(np.count_nonzero(fm.flags)))
    return d / "flags.csv"


def cmd_reason(cfg: RunConfig, scenario: str, db_path: Optional[str] = None, heatmap: bool = True,
               write_db: Optional[str] = None) -> Path:
    topo = _topology(cfg)
    d = _scenario_dir(cfg, scenario)
    if not (d / "flags.csv").exists():
        raise missing(d / "flags.csv", "run 'cpsreason detect' first")
    try:
        fm = FlagMatrix.read_csv(d / "flags.csv")
    except ValueError as exc:
        raise CliError(EXIT_INVALID, "INVALID_FLAGS", str(exc)) from None
    if db_path is not None:
        if not Path(db_path).exists():
            raise missing(Path(db_path))
        try:
            db = parse_db(Path(db_path).read_text())
        except SignatureDBError as exc:
            raise CliError(EXIT_INVALID, "INVALID_DB", str(exc)) from None
    else:
        db = build_default_db(topo)
    if write_db:
        Path(write_db).write_text(format_db(db))
    hyps = match(fm, topo, db)
    prov = cfg.provenance(scenario=d.name)
    write_report(hyps, d / "report.json", provenance=prov)
    write_grouped(fm, topo, d / "grouped.csv", header_comment=cfg.header())
    if heatmap:
        render_heatmap(fm, topo, d / "heatmap.svg", title=d.name)
    if (d / "ground_truth.json").exists():
        result = score(hyps, read_ground_truth(d / "ground_truth.json"), topo)
        _write_json(d / "score.json", {"provenance": prov, **result})
        logger.info("%s: %d hypotheses, %d/%d events with correct signature", d.name, len(hyps),
                    result["correct_signature"], result["events"])
    return d / "report.json"


def cmd_run_all(cfg: RunConfig, scenarios: Sequence[str] = ("S0", "S1", "S2", "S3"),
                packet_format: str = "npz") -> dict:
    train, *tests = scenarios
    t0 = time.time()
    for s in scenarios:
        cmd_simulate(cfg, s, packet_format)
    cmd_featurize(cfg, train)
    for s in tests:
        cmd_featurize(cfg, s, baseline_from=train)
    cmd_tune(cfg, train)
    summary = {"provenance": cfg.provenance(), "scenarios": {}}
    for s in tests:
        cmd_detect(cfg, s)
        cmd_reason(cfg, s, heatmap=True)
        score_path = Path(cfg.out) / s / "score.json"
        if score_path.exists():
            sc = json.loads(score_path.read_text())
            summary["scenarios"][s] = {k: sc[k] for k in ("events", "overlapped", "correct_signature",
                                                          "correct_victims", "hypotheses")}
    _write_json(Path(cfg.out) / "summary.json", summary)
    logger.info("run-all finished in %.1f s", time.time() - t0)
    return summary


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--topology", help="topology file (default: bundled demo plant)")
    common.add_argument("--out", default=os.environ.get(ENV_OUT, DEFAULT_OUT),
                        help=f"output root (default: ${ENV_OUT} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--threshold-factor", type=float, default=1.5, dest="f", help="threshold factor f")
    common.add_argument("--recovery", action="store_true", help="replace flagged values by forecasts")
    common.add_argument("--d-cycle", type=float, help="process cycle duration in seconds (default: estimated)")
    common.add_argument("--grid-profile", choices=("full", "fast"), default="fast")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cpsreason", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a scenario")
    p.add_argument("--scenario", required=True, help="suite name (S0..S3) or script file")
    p.add_argument("--packet-format", choices=("csv", "npz"), default="csv")

    p = sub.add_parser("featurize", parents=[common], help="extract target features")
    p.add_argument("--scenario", required=True, help="scenario name under --out, or a directory")
    p.add_argument("--baseline-from", help="scenario whose traffic baseline and cycle duration to reuse")

    p = sub.add_parser("tune", parents=[common], help="tune one pipeline per feature on event-free data")
    p.add_argument("--scenario", default="S0")

    p = sub.add_parser("detect", parents=[common], help="run the tuned pipelines over a scenario")
    p.add_argument("--scenario", required=True)

    p = sub.add_parser("reason", parents=[common], help="match flags against the signature database")
    p.add_argument("--scenario", required=True)
    p.add_argument("--db", help="signature database file (default: built from the topology)")
    p.add_argument("--write-db", help="also write the database in use to this file")
    p.add_argument("--no-heatmap", action="store_true", help="skip the SVG heatmap")

    p = sub.add_parser("run-all", parents=[common], help="simulate, featurize, tune, detect and reason end to end")
    p.add_argument("--scenario", nargs="+", default=["S0", "S1", "S2", "S3"],
                   help="training scenario followed by evaluation scenarios")
    p.add_argument("--packet-format", choices=("csv", "npz"), default="npz")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    cfg = RunConfig(topology=args.topology, out=args.out, seed=args.seed, f=args.f, grid_profile=args.grid_profile,
                    recovery=args.recovery, d_cycle=args.d_cycle)
    try:
        if not cfg.f > 1:
            raise CliError(EXIT_USAGE, "USAGE", "--threshold-factor must exceed 1")
        if args.command == "simulate":
            print(cmd_simulate(cfg, args.scenario, args.packet_format))
        elif args.command == "featurize":
            print(cmd_featurize(cfg, args.scenario, args.baseline_from))
        elif args.command == "tune":
            print(cmd_tune(cfg, args.scenario))
        elif args.command == "detect":
            print(cmd_detect(cfg, args.scenario))
        elif args.command == "reason":
            print(cmd_reason(cfg, args.scenario, args.db, not args.no_heatmap, args.write_db))
        elif args.command == "run-all":
            if len(args.scenario) < 2:
                raise CliError(EXIT_USAGE, "USAGE", "run-all needs a training scenario and at least one more")
            summary = cmd_run_all(cfg, args.scenario, args.packet_format)
            print(json.dumps(summary["scenarios"], sort_keys=True))
    except CliError as exc:
        print(f"error: {exc.tag}: {exc.detail}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__.upper()}: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc, ValueError) else EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
