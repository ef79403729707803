"""Command-line entry points.

Verbs: gen-clusters, sample-stream, run, sweep, report. Configs are JSON
files; every output directory records the fully resolved configuration and
content hashes of its inputs. Exit codes: 0 on success, 2 on validation
errors (bad configs or files), 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .clusters import (
    GeneratorSpec,
    clusters_digest,
    default_generator_spec,
    generate_clusters,
    load_clusters,
    save_clusters,
)
from .harness import (
    RunConfig,
    execute_run,
    leaderboard_to_json,
    render_table,
    run_summary_row,
    sweep,
    write_run,
)
from .metrics import read_report_json
from .refiners import METHODS
from .streams import StreamConfig, load_stream, sample_stream, sample_stream_family, save_stream

EXIT_VALIDATION = 2
EXIT_RUNTIME = 1


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON: {exc}")


def cmd_gen_clusters(args: argparse.Namespace) -> int:
    if args.spec is None:
        spec = default_generator_spec(seed=args.seed)
    else:
        spec = GeneratorSpec.from_dict(_load_json(args.spec))
        if args.override_seed:
            spec = replace(spec, seed=args.seed)
    cs = generate_clusters(spec)
    save_clusters(cs, args.out)
    print(f"wrote {args.out}: {cs.n_ood + 1} clusters, d={cs.d}, K={cs.K}, "
          f"sha256={clusters_digest(cs)[:12]}...")
    return 0


def cmd_sample_stream(args: argparse.Namespace) -> int:
    clusters = load_clusters(args.clusters)
    config = StreamConfig.from_dict(_load_json(args.config))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.n_validation or args.n_test:
        n_val = max(args.n_validation, 1)
        n_test = max(args.n_test, 1)
        validation, test = sample_stream_family(
            clusters, config, n_val, n_test, base_seed=config.seed
        )
        for i, stream in enumerate(validation + test):
            path = outdir / f"stream-{stream.role}-{i:03d}.tsv"
            save_stream(stream, path, clusters)
        print(f"wrote {len(validation)} validation + {len(test)} test streams to {outdir}")
    else:
        stream = sample_stream(clusters, config)
        path = outdir / "stream.tsv"
        save_stream(stream, path, clusters)
        print(f"wrote {path}: T={config.T}, b={config.b}, heldout={len(stream.heldout_set)}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_dict(_load_json(args.config))
    if cfg.clusters_path is None:
        raise ValueError("run config needs a clusters_path")
    clusters = load_clusters(cfg.clusters_path)
    stream = None
    if cfg.stream_file:
        stream = load_stream(cfg.stream_file, clusters)
    result = execute_run(cfg, clusters, stream=stream)
    outdir = write_run(result, cfg, args.out, clusters=clusters)
    oec = result.report.at_final.get("oec")
    print(f"run {cfg.run_id} [{cfg.refiner.method}] done; "
          f"OEC@final={'-' if oec is None else f'{oec:.4f}'} -> {outdir}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    clusters = load_clusters(args.clusters)
    grids = _load_json(args.grids)
    streams_dir = Path(args.streams)
    validation, test = [], []
    for path in sorted(streams_dir.glob("*.tsv")):
        stream = load_stream(path, clusters)
        (validation if stream.role == "validation" else test).append(stream)
    base = RunConfig.from_dict(_load_json(args.base)) if args.base else RunConfig(
        run_id="sweep",
        seed=args.seed,
        stream=validation[0].config if validation else test[0].config,
        clusters_path=args.clusters,
    )
    entries = sweep(
        methods=args.methods,
        grids=grids,
        clusters=clusters,
        validation_streams=validation,
        test_streams=test,
        base=base,
        n_seeds=args.seeds,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "leaderboard.json").write_text(leaderboard_to_json(entries), encoding="utf-8")
    for e in entries:
        oec = e.test_mean.get("oec_final")
        print(f"{e.method}: validation={e.validation_score:.4f} "
              f"test OEC@final={'-' if oec is None else f'{oec:.4f}'} "
              f"({e.n_test_runs} runs)")
    print(f"wrote {outdir / 'leaderboard.json'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    runs_dir = Path(args.runs)
    rows = []
    for agg_path in sorted(runs_dir.glob("**/aggregate.json")):
        rows.append(run_summary_row(read_report_json(agg_path)))
    if not rows:
        raise ValueError(f"no aggregate.json files under {runs_dir}")
    sys.stdout.write(render_table(rows, fmt=args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftfix",
        description="Error-driven online model refinement on drifting synthetic streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-clusters", help="generate and save a cluster set")
    p.add_argument("--spec", help="generator spec JSON (omit for the default benchmark)")
    p.add_argument("--seed", type=int, default=7, help="seed for the default spec")
    p.add_argument("--override-seed", action="store_true",
                   help="replace the spec file's seed with --seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_clusters)

    p = sub.add_parser("sample-stream", help="sample stream files from a cluster set")
    p.add_argument("--clusters", required=True)
    p.add_argument("--config", required=True, help="StreamConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-validation", type=int, default=0)
    p.add_argument("--n-test", type=int, default=0)
    p.set_defaults(func=cmd_sample_stream)

    p = sub.add_parser("run", help="execute one refinement run")
    p.add_argument("--config", required=True, help="RunConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid-search methods on pre-sampled streams")
    p.add_argument("--clusters", required=True)
    p.add_argument("--streams", required=True, help="directory of stream files")
    p.add_argument("--methods", nargs="+", required=True, choices=list(METHODS))
    p.add_argument("--grids", required=True, help="JSON: method -> list of config overrides")
    p.add_argument("--base", help="base RunConfig JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="seeds per test stream")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tabulate aggregate reports from run directories")
    p.add_argument("--runs", required=True, help="directory containing run output dirs")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
