"""Command-line entry point.

Every command writes under ``--out-dir`` and finishes with a
``manifest.json`` that lists the input files (with sha256), the seed, the
package version and the files produced. Exit codes: 0 success, 2
configuration error, 3 some runs in a batch failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from abrfair import __version__
from abrfair.config import Config, ConfigError, load_config, parse_config, parse_policy, parse_tcp
from abrfair.core import BitrateLadder, DomainError
from abrfair.experiments import run_batch
from abrfair.policies import LBB
from abrfair.simulation import run, summary, write_records
from abrfair.stability import check_agreement, contraction_estimate, lbb_stability_check, rb_equilibrium
from abrfair.tcp import PROPERTY_NAMES, validate_assumption1
from abrfair.traces import filter_and_scale, ingest, read_measurements, write_trace

log = logging.getLogger("abrfair")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3
STUDIES = {"pareto": "pareto", "sens-q": "q", "sens-init": "init", "sens-noise": "noise"}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, seed: int | None, inputs, outputs, argv) -> Path:
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": seed,
        "inputs": [{"path": str(p), "sha256": _sha256(Path(p))} for p in inputs],
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _load(args) -> Config:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _ext(fmt: str) -> str:
    return "csv" if fmt == "csv" else "jsonl"


def _write_rows(rows: list[dict], path: Path, fmt: str) -> None:
    if fmt == "csv":
        cols: list[str] = []
        for r in rows:
            cols.extend(c for c in r if c not in cols)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: json.dumps(v) if isinstance(v, (list, tuple, dict)) else v for k, v in r.items()})
    else:
        with open(path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")


def cmd_simulate(args, cfg: Config, out: Path) -> tuple[int, list[Path]]:
    if not cfg.traces:
        raise ConfigError("simulate needs a trace")
    indices = range(len(cfg.traces)) if args.trace_index is None else [args.trace_index]
    outputs: list[Path] = []
    summaries = []
    for i in indices:
        sc = cfg.scenario(i)
        res = run(sc)
        stem = f"run_{i:03d}"
        if args.format == "csv":
            path = out / f"{stem}_steps.csv"
            write_records(res, path)
        else:
            path = out / f"{stem}_steps.jsonl"
            with open(path, "w") as fh:
                for rec in res.records:
                    for p in range(len(rec.w)):
                        fh.write(json.dumps({
                            "k": rec.k, "player": p, "w": float(rec.w[p]), "r": float(rec.r[p]),
                            "b": float(rec.b[p]), "step_qoe": float(rec.step_qoe[p]),
                            "flags": list(rec.flags[p] + rec.allocator_flags),
                        }) + "\n")
        outputs.append(path)
        s = summary(res)
        s["trace"] = sc.trace.source_id
        summaries.append(s)
    path = out / "summary.json"
    path.write_text(json.dumps(summaries if len(summaries) > 1 else summaries[0], indent=2) + "\n")
    outputs.append(path)
    for s in summaries:
        print(f"{s['trace']}: welfare={s['social_welfare']} fairness={s['alpha_fairness']} jain={s['normalized_jain']}")
    return EXIT_OK, outputs


def cmd_study(args, cfg: Config, out: Path) -> tuple[int, list[Path]]:
    plan = cfg.plan(STUDIES[args.command])
    (table,) = run_batch([plan], args.parallelism, out, args.format)
    path = out / f"{table.name}.{_ext(args.format)}"
    for r in table.rows:
        print(f"{r['sweep']} {r['allocator']}: welfare={r['welfare_mean']:.4g} fairness={r['alpha_fairness_mean']:.6g} "
              f"jain={r['normalized_jain_mean']:.4g} n={r['n']} failures={r['failures']}")
    return (EXIT_PARTIAL if table.failures else EXIT_OK), [path]


def cmd_stability(args, cfg: Config, out: Path) -> tuple[int, list[Path]]:
    sec = cfg.stability
    try:
        W = float(sec.get("W", 3000.0))
        n = int(sec.get("n", 2))
        policy = parse_policy(sec.get("policy", {"type": "LRB"}), "stability.policy")
        models = [parse_tcp(m, f"stability.models[{i}]") for i, m in enumerate(sec.get("models", [{}]))]
        starts = int(sec.get("starts", 100))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"stability: {exc}") from None
    ladder = BitrateLadder()
    rows = []
    for m in models:
        row = {"base_c": m.base_c, "half_sat_kappa": m.half_sat_kappa, "hill": m.hill}
        if isinstance(policy, LBB):
            rep = lbb_stability_check(m, n, W)
            row.update(classification=rep.classification, **rep.evidence)
        else:
            rep = rb_equilibrium(policy, W, n, ladder, m)
            c = contraction_estimate(m, policy, W, n, ladder, seed=cfg.seed)
            row.update(
                classification=c.classification,
                equilibrium_r=float(rep.equilibrium_r[0]),
                fixed_point_residual=rep.evidence["fixed_point_residual"],
                lipschitz=c.lipschitz,
                spectral_radius_eq=c.spectral_radius_eq,
                spectral_radius_max=c.spectral_radius_max,
            )
        agree = check_agreement(m, policy, W, n, starts=starts, seed=cfg.seed, ladder=ladder)
        row.update(starts=agree.n_starts, converged_to_equilibrium=agree.n_converged_to_equilibrium, agrees=agree.agrees)
        rows.append(row)
        print(f"c={m.base_c} kappa={m.half_sat_kappa} hill={m.hill}: {row['classification']} "
              f"({agree.n_converged_to_equilibrium}/{agree.n_starts} starts reach the equilibrium)")
    path = out / f"stability.{_ext(args.format)}"
    _write_rows(rows, path, args.format)
    return EXIT_OK, [path]


def cmd_validate_h(args, cfg: Config, out: Path) -> tuple[int, list[Path]]:
    sec = cfg.validate_h
    try:
        W = float(sec.get("W", 3000.0))
        grid = int(sec.get("grid_size", 64))
        n = int(sec.get("n_players", 2))
        models = [parse_tcp(m, f"validate_h.models[{i}]") for i, m in enumerate(sec.get("models", [{}]))]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"validate_h: {exc}") from None
    rows = []
    for m in models:
        rep = validate_assumption1(m, BitrateLadder(), W, grid, n)
        row = {"base_c": m.base_c, "half_sat_kappa": m.half_sat_kappa, "hill": m.hill, "all_passed": rep.all_passed}
        for name in PROPERTY_NAMES:
            c = rep[name]
            row[name] = c.passed
            row[f"{name}_witness"] = c.witness
        rows.append(row)
        print(f"c={m.base_c} kappa={m.half_sat_kappa} hill={m.hill}: " + ", ".join(rep.lines()))
    path = out / f"validate_h.{_ext(args.format)}"
    _write_rows(rows, path, args.format)
    return EXIT_OK, [path]


def cmd_ingest(args, cfg: Config, out: Path) -> tuple[int, list[Path]]:
    if not args.input:
        raise ConfigError("ingest needs --input")
    try:
        traces = ingest(read_measurements(args.input), cfg.template.sim.dt_s)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{args.input}: {exc}") from None
    if args.n_players is not None:
        traces = filter_and_scale(traces, args.n_players, args.min_avg_kbps, args.max_avg_kbps)
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for t in traces:
        path = tdir / f"{t.source_id}.csv"
        write_trace(t, path)
        outputs.append(path)
    print(f"wrote {len(outputs)} traces")
    return EXIT_OK, outputs


COMMANDS = {
    "simulate": cmd_simulate,
    "pareto": cmd_study,
    "sens-q": cmd_study,
    "sens-init": cmd_study,
    "sens-noise": cmd_study,
    "stability-check": cmd_stability,
    "validate-h": cmd_validate_h,
    "ingest": cmd_ingest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML configuration file")
    common.add_argument("--out-dir", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--parallelism", type=int, default=1, help="worker processes for batches")
    common.add_argument("--format", choices=("csv", "json-lines"), default="csv", help="table format")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="abrfair", description="Multi-player ABR bandwidth allocation experiments.")
    parser.add_argument("--version", action="version", version=f"abrfair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="run the configured scenario on each trace")
    sim.add_argument("--trace-index", type=int, help="run only this trace")
    for name, kind in STUDIES.items():
        sub.add_parser(name, parents=[common], help=f"run the {kind} study from experiments.{kind}")
    sub.add_parser("stability-check", parents=[common], help="classify equilibria and compare with simulation")
    sub.add_parser("validate-h", parents=[common], help="check the sharing-function axioms")
    ing = sub.add_parser("ingest", parents=[common], help="turn a throughput log into step traces")
    ing.add_argument("--input", type=Path, help="CSV with session_id,seq,throughput_kbps[,duration_s]")
    ing.add_argument("--n-players", type=int, help="filter by mean and scale by this player count")
    ing.add_argument("--min-avg-kbps", type=float, default=0.0)
    ing.add_argument("--max-avg-kbps", type=float, default=3000.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.parallelism < 1:
        print("error: --parallelism must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        code, outputs = COMMANDS[args.command](args, cfg, out)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    inputs = list(cfg.inputs)
    if args.command == "ingest":
        inputs.append(args.input)
    write_manifest(out, args.command, cfg.seed, inputs, outputs, argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
