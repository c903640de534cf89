"""Command line driver: ``acmesim {backbone,search-header,personalize,run-all,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from acmesim import config as config_mod
from acmesim.errors import ConfigError, InfeasibleError, NumericError, StageError
from acmesim.orchestrator import pipeline as P
from acmesim.orchestrator.messages import load_message, save_message
from acmesim.pareto import write_pareto_csv
from acmesim.report import ReportError, load_report, write_report_csvs

log = logging.getLogger("acmesim")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3, 4


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, command: str):
        super().__init__(f"missing {path}; run `acmesim {command}` first")


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.bundled("default")
    return cfg.with_seed(args.seed)


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(P.report_json(obj))


def _write_backbone_outputs(out: Path, bstage: P.BackboneStage) -> None:
    bstage.family.write_manifest(out / "family_manifest.json", out / "weights")
    write_pareto_csv(out / "pareto.csv", bstage.audits)
    for e, msg in bstage.assignments.items():
        save_message(msg, out / "assignments" / e)
    _dump_json(out / "backbone_stage.json", bstage.summary())


def _write_header_outputs(out: Path, outcomes: dict[str, P.EdgeOutcome]) -> None:
    for e, o in outcomes.items():
        save_message(o.distribution, out / "headers" / e)
        _dump_json(out / "headers" / f"{e}_search.json", P.edge_report(o))


def _need(path: Path, command: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, command)
    return path


def _assignments(out: Path, edges) -> dict:
    return {e: load_message(_need(out / "assignments" / f"{e}.json", "backbone").with_suffix(""))
            for e in edges}


# ---------------------------------------------------------------- commands


def cmd_backbone(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    ctx = P._stage("partition", P.prepare, cfg)
    clusters = P._stage("statistics", P.stage_statistics, ctx)
    bstage = P._stage("backbone", P.stage_backbone, ctx, clusters)
    _write_backbone_outputs(out, bstage)
    sel = {e: a.selected.label() for e, a in bstage.audits.items()}
    print(f"backbone: {len(bstage.family.members)} members; selected {sel}")
    return EXIT_OK


def cmd_search_header(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    ctx = P.prepare(cfg)
    edges = list(ctx.topology.edges)
    if args.cluster:
        if args.cluster not in edges:
            raise ConfigError("--cluster", f"unknown cluster {args.cluster!r}; have {edges}")
        edges = [args.cluster]
    assignments = _assignments(out, edges)
    outcomes = {}
    for e in edges:
        outcomes[e] = P._stage("header_search", P.search_header, ctx, e, assignments[e])
        print(f"{e}: {outcomes[e].stage1.dag.describe()}")
    _write_header_outputs(out, outcomes)
    return EXIT_OK


def cmd_personalize(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    ctx = P.prepare(cfg)
    edges = list(ctx.topology.edges)
    assignments = _assignments(out, edges)
    result = {}
    outcomes = {}
    for e in edges:
        dist = load_message(_need(out / "headers" / f"{e}.json", "search-header").with_suffix(""))
        s2, _ = P._stage("personalization", P.personalize, ctx, e, dist,
                         assignments[e].payload["config"])
        outcomes[e] = s2
        if s2.rounds:
            result[e] = {"similarity": s2.similarity.to_dict(), "rounds": s2.rounds,
                         "coarse_accuracy": s2.coarse_accuracy,
                         "final_accuracy": s2.final_accuracy}
    devices = {d: {"cluster": e, "coarse_accuracy": s2.coarse_accuracy[d],
                   "final_accuracy": s2.final_accuracy[d]}
               for e, s2 in outcomes.items() for d in sorted(s2.final_accuracy)}
    _dump_json(out / "personalization.json", {"personalization": result, "devices": devices})
    print(f"personalize: {cfg.personalization.rounds} rounds over {len(devices)} devices")
    return EXIT_OK


def cmd_run_all(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = P.run_full_pipeline(cfg, threads=args.threads)
    _write_backbone_outputs(out, res.backbone)
    _write_header_outputs(out, res.edges)
    res.ctx.ledger.write_csv(out / "traffic.csv")
    (out / "run_report.json").write_text(res.report_json())
    ev = res.report["stages"]["evaluation"]
    tr = res.report["traffic"]["summary"]
    print(f"run-all: mean accuracy coarse {ev['mean_coarse_accuracy']:.4f} -> "
          f"final {ev['mean_final_accuracy']:.4f}; upload ratio {tr['ratio']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.report) if args.report else Path(args.out) / "run_report.json"
    report = load_report(path)
    counts = write_report_csvs(report, args.out)
    for name, n in counts.items():
        print(f"{name}: {n} rows")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment TOML (default: bundled)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", metavar="DIR", default="out", help="artifact directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads per stage")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="acmesim", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("backbone", parents=[common], help="build the family and select backbones")
    p = sub.add_parser("search-header", parents=[common], help="search headers per cluster")
    p.add_argument("--cluster", help="only this edge (e.g. edge0)")
    sub.add_parser("personalize", parents=[common], help="refine headers on devices")
    sub.add_parser("run-all", parents=[common], help="every stage, plus the run report")
    p = sub.add_parser("report", parents=[common], help="plot-ready CSVs from a run report")
    p.add_argument("--report", metavar="PATH", help="run_report.json (default: OUT/run_report.json)")
    return ap


COMMANDS = {"backbone": cmd_backbone, "search-header": cmd_search_header,
            "personalize": cmd_personalize, "run-all": cmd_run_all, "report": cmd_report}


def _exit_code(err: BaseException) -> int:
    if isinstance(err, StageError):
        err = err.cause
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, InfeasibleError):
        return EXIT_INFEASIBLE
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InfeasibleError, NumericError, StageError, MissingArtifact,
            ReportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
