"""morse-cells command line front end.

Subcommands run pipeline stages against a scenario file and write JSON
reports plus exports (CSV point clouds, OBJ piece meshes, tower JSON) into
the scenario's output directory.  Exit codes: 0 all requested checks pass,
1 a check failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import Scenario, ScenarioError, parse_scenario
from .coords import (CorruptedChange, InvalidSignatureError,
                     build_special_change, verify_special_change)
from .pipeline import Pipeline, threads_cap
from .thom import ExtensionFailure
from .tower import TowerRefusedError, load_tower, save_tower, validate_tower

SCHEMA_VERSION = 1
STAGES = ("critical", "morse-smale", "whitney", "tower", "homology",
          "coords", "all")


def _write_report(out_dir, name, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"report-{name}.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _report_envelope(stage, scenario, body, ok):
    return {
        "schema_version": SCHEMA_VERSION,
        "stage": stage,
        "pass": bool(ok),
        "scenario": scenario.resolved() if scenario else None,
        "threads_cap": threads_cap(),
        "report": body,
    }


def _export_point_clouds(pipe, out_dir):
    from .meshes import write_point_cloud_csv
    rows = []
    for st in pipe.strata or []:
        for p in st.sample.points:
            rows.append((p[0], p[1], p[2] if len(p) > 2 else 0.0,
                         st.id, 0, st.sample.kind))
    if pipe.tower_obj is not None:
        for sid, piece in sorted(pipe.tower_obj.pieces.items()):
            for i, p in enumerate(piece.vertices):
                rows.append((p[0], p[1], p[2] if len(p) > 2 else 0.0,
                             sid, int(piece.depth[i]), "piece"))
    if rows:
        write_point_cloud_csv(os.path.join(out_dir, "points.csv"), rows)


def _export_tower(pipe, out_dir):
    from .meshes import write_obj
    if pipe.tower_obj is None:
        return
    save_tower(pipe.tower_obj, os.path.join(out_dir, "tower.json"))
    for sid, piece in sorted(pipe.tower_obj.pieces.items()):
        write_obj(os.path.join(out_dir, f"piece-{sid}.obj"), piece)


def _run_coords(args):
    try:
        h = build_special_change(args.n, args.k, args.eps, args.angle)
    except (InvalidSignatureError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rep = verify_special_change(h, samples=args.samples)
    from .coords import model_f
    import numpy as np
    bad = CorruptedChange(h)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(64):
        w = (rng.random(args.n) - 0.5) * h.eps
        worst = max(worst, abs(model_f(bad(w), h.k) - model_f(w, h.k)))
    rep["corrupted_control_residual"] = float(worst)
    rep["corrupted_control_fails"] = bool(worst > 0.1)
    payload = _report_envelope("coords", None, rep,
                               rep["pass"] and rep["corrupted_control_fails"])
    out_dir = args.output or "morse-cells-out"
    path = _write_report(out_dir, "coords", payload)
    _print_residual_table(rep)
    print(f"report: {path}")
    return 0 if payload["pass"] else 1


def _print_residual_table(rep):
    print(f"special change n={rep['n']} k={rep['k']} eps={rep['eps']}")
    for key, val in rep["residuals"].items():
        print(f"  {key:18s} {val:.3e}")
    print(f"  axis identity      {rep['axis_identity']:.3e}")
    print(f"  corrupted control  {rep['corrupted_control_residual']:.3e}")


def _run_stage(args):
    try:
        scenario = parse_scenario(args.scenario)
    except (OSError, ScenarioError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    out_dir = scenario.output_dir
    pipe = Pipeline(scenario)
    stage = args.stage
    try:
        if stage == "all":
            body = {}
            for name in ("critical", "morse-smale", "whitney", "tower",
                         "homology"):
                body[name] = pipe.run(name)
            h = build_special_change(3, 2, 1.0, "u")
            body["coords"] = verify_special_change(h, samples=1000)
            ok = all(body[k]["pass"] for k in body)
        else:
            if stage == "tower" and args.delta_check:
                body = pipe.stage_tower(delta_check=tuple(args.delta_check))
            else:
                body = pipe.run(stage)
            ok = body["pass"]
    except (TowerRefusedError, ExtensionFailure) as exc:
        body = {"stage": stage, "pass": False, "refused": str(exc)}
        if pipe.ms is not None:
            body["morse_smale"] = pipe.ms
        ok = False
    payload = _report_envelope(stage, scenario, body, ok)
    path = _write_report(out_dir, stage, payload)
    _export_point_clouds(pipe, out_dir)
    if pipe.tower_obj is not None:
        _export_tower(pipe, out_dir)
    print(f"stage {stage}: {'pass' if ok else 'FAIL'}")
    print(f"report: {path}")
    return 0 if ok else 1


def _run_validate(args):
    try:
        tower = load_tower(args.ingest)
    except (OSError, ValueError, KeyError) as exc:
        print(f"configuration error: cannot ingest tower: {exc}", file=sys.stderr)
        return 2
    violations = validate_tower(tower)
    payload = _report_envelope("tower", None,
                               {"violations": violations,
                                "ingested_from": args.ingest},
                               not violations)
    out_dir = args.output or "morse-cells-out"
    path = _write_report(out_dir, "tower-validate", payload)
    print(f"tower validation: {len(violations)} violations")
    print(f"report: {path}")
    return 0 if not violations else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="morse-cells",
        description="Morse-cell decomposition of a compact surface: critical "
                    "points, gradientlike flow, Thom tubes, resolution tower, "
                    "CW realization and mod-2 homology.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        if name == "coords":
            p.add_argument("--n", type=int, default=3)
            p.add_argument("--k", type=int, default=2)
            p.add_argument("--eps", type=float, default=1.0)
            p.add_argument("--angle", default="u")
            p.add_argument("--samples", type=int, default=1000)
            p.add_argument("--output", default=None)
        else:
            p.add_argument("--scenario", required=(name != "tower"))
            if name == "tower":
                p.add_argument("--ingest", default=None,
                               help="validate an externally produced tower JSON")
                p.add_argument("--delta-check", nargs=2, type=float,
                               default=None, metavar=("A", "B"))
                p.add_argument("--output", default=None)
    args = parser.parse_args(argv)
    if args.stage == "coords":
        return _run_coords(args)
    if args.stage == "tower" and getattr(args, "ingest", None):
        return _run_validate(args)
    if getattr(args, "scenario", None) is None:
        print("configuration error: --scenario is required", file=sys.stderr)
        return 2
    return _run_stage(args)


if __name__ == "__main__":
    sys.exit(main())
