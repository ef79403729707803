"""Episode loop, reference runs, hyperparameter sweep, dynamics grid.

A run is fully determined by its RunConfig: the master seed is split into
independent sub-streams for upstream training ("learner"), metric sampling
("metrics"), and method internals ("method"); the stream itself is sampled
from its own StreamConfig.seed. Changing the refinement method therefore
never changes the episode contents.

Run directories contain the resolved config, the per-step trace, the
aggregate report, the prediction log, and the final model checkpoint; all of
these are byte-deterministic for a fixed config. Wall-clock timings go to a
separate timings.json which is excluded from that contract.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .clusters import ClusterSet, Example, clusters_digest, features_matrix
from .learner import Arch, LearnerState, load_state, predict_batch, save_state, train_upstream
from .metrics import (
    AggregateReport,
    MetricRecorder,
    MetricsConfig,
    MetricTrace,
    TraceRow,
    aggregate,
    model_accuracy,
    render_percent,
    report_to_json,
    trace_to_csv,
)
from .refiners import RefinerConfig, OnlineRefiner, offline_refine
from .seeds import derive_seed, spawn_rng
from .streams import QueryStream, StreamConfig, sample_stream


@dataclass(frozen=True)
class LearnerConfig:
    arch: str = "mlp"
    hidden: int = 32
    upstream_epochs: int = 30
    upstream_lr: float = 1e-2
    upstream_batch: int = 64

    def make_arch(self, d: int, k: int) -> Arch:
        return Arch(kind=self.arch, d=d, K=k, hidden=self.hidden if self.arch == "mlp" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerConfig":
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    seed: int
    stream: StreamConfig
    refiner: RefinerConfig = RefinerConfig()
    learner: LearnerConfig = LearnerConfig()
    metrics: MetricsConfig = MetricsConfig()
    clusters_path: str | None = None
    stream_file: str | None = None  # pre-sampled stream; None samples from `stream`
    upstream_checkpoint: str | None = None  # load f_0 instead of training it

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "clusters_path": self.clusters_path,
            "stream_file": self.stream_file,
            "upstream_checkpoint": self.upstream_checkpoint,
            "stream": self.stream.to_dict(),
            "refiner": self.refiner.to_dict(),
            "learner": self.learner.to_dict(),
            "metrics": self.metrics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(
            run_id=str(data["run_id"]),
            seed=int(data["seed"]),
            clusters_path=data.get("clusters_path"),
            stream_file=data.get("stream_file"),
            upstream_checkpoint=data.get("upstream_checkpoint"),
            stream=StreamConfig.from_dict(data["stream"]),
            refiner=RefinerConfig.from_dict(data.get("refiner", {})),
            learner=LearnerConfig.from_dict(data.get("learner", {})),
            metrics=MetricsConfig.from_dict(data.get("metrics", {})),
        )

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PredictionRecord:
    t: int
    phase: str  # "serve": f_{t-1} on Q_t; "post": f_t on E_t
    example_id: int
    label: int
    predicted: int


@dataclass
class RunResult:
    run_id: str
    method: str
    trace: MetricTrace
    report: AggregateReport
    predictions: list[PredictionRecord]
    final_state: LearnerState
    upstream_state: LearnerState
    wall_clock: dict[str, float]
    kind: str = "online"  # "online" | "offline"
    memory_audit: dict | None = None  # replay methods: ids + timesteps only


def _upstream_model(cfg: RunConfig, clusters: ClusterSet) -> LearnerState:
    arch = cfg.learner.make_arch(clusters.d, clusters.K)
    state, _ = train_upstream(
        clusters.clusters[0],
        arch,
        epochs=cfg.learner.upstream_epochs,
        lr=cfg.learner.upstream_lr,
        seed=derive_seed(cfg.seed, "learner"),
        batch_size=cfg.learner.upstream_batch,
    )
    return state


def run_episode_loop(
    f_0: LearnerState,
    stream: QueryStream,
    refiner: OnlineRefiner,
    metrics_cfg: MetricsConfig,
    metrics_seed: int,
    upstream_pool: Sequence[Example],
    run_id: str = "run",
) -> RunResult:
    """Serve, collect errors, refine, measure — once per episode.

    At step t the deployed model f_{t-1} answers Q_t; its mistakes form E_t;
    the refiner produces f_t; efr is then scored with f_t on E_t and the
    remaining metrics follow the recorder's schedule. Serve-time and
    post-refinement predictions are both logged.
    """
    recorder = MetricRecorder(
        metrics_cfg, upstream_pool, stream.heldout_set, stream.config.T, metrics_seed
    )
    predictions: list[PredictionRecord] = []
    f_t = f_0
    started = time.perf_counter()
    for ep in stream.episodes:
        preds = predict_batch(f_t, features_matrix(ep.examples))
        errors: list[Example] = []
        for ex, pred in zip(ep.examples, preds):
            predictions.append(PredictionRecord(ep.t, "serve", ex.id, ex.label, int(pred)))
            if int(pred) != ex.label:
                errors.append(ex)
        f_next = refiner.refine(f_t, errors, ep.t)
        efr_value: float | None = None
        if errors:
            post = predict_batch(f_next, features_matrix(errors))
            hits = 0
            for ex, pred in zip(errors, post):
                predictions.append(PredictionRecord(ep.t, "post", ex.id, ex.label, int(pred)))
                hits += int(pred) == ex.label
            efr_value = hits / len(errors)
        recorder.record(ep.t, f_next, ep.examples, errors, efr_value)
        f_t = f_next
    elapsed = time.perf_counter() - started
    return RunResult(
        run_id=run_id,
        method=refiner.cfg.method,
        trace=recorder.trace,
        report=aggregate(recorder.trace),
        predictions=predictions,
        final_state=f_t,
        upstream_state=f_0,
        wall_clock={"loop_s": elapsed},
        memory_audit=refiner.memory.audit() if refiner.memory is not None else None,
    )


def run_reference_frozen(
    stream: QueryStream,
    f_0: LearnerState,
    metrics_cfg: MetricsConfig,
    metrics_seed: int,
    upstream_pool: Sequence[Example],
    run_id: str = "frozen",
) -> RunResult:
    refiner = OnlineRefiner(RefinerConfig(method="frozen"))
    return run_episode_loop(
        f_0, stream, refiner, metrics_cfg, metrics_seed, upstream_pool, run_id=run_id
    )


def run_reference_offline(
    stream: QueryStream,
    f_0: LearnerState,
    clusters: ClusterSet,
    cfg: RunConfig,
) -> RunResult:
    """Collect every upstream-model error, then refine once, offline.

    The trace holds a single summary row at t = T: efr is f_T's accuracy on
    the full collected error set; csr is f_T's accuracy on all strictly-past
    queries (the deployed-success analogue for a single final model); ukr,
    okr and kg use the same samples an online run at step T would use.
    """
    started = time.perf_counter()
    predictions: list[PredictionRecord] = []
    all_errors: list[Example] = []
    total_q = 0
    for ep in stream.episodes:
        preds = predict_batch(f_0, features_matrix(ep.examples))
        total_q += len(ep.examples)
        for ex, pred in zip(ep.examples, preds):
            predictions.append(PredictionRecord(ep.t, "serve", ex.id, ex.label, int(pred)))
            if int(pred) != ex.label:
                all_errors.append(ex)

    rng = spawn_rng(cfg.seed, "offline")
    upstream_pool = clusters.clusters[0]
    take = min(cfg.refiner.offline_subset, len(upstream_pool))
    idx = rng.choice(len(upstream_pool), size=take, replace=False)
    subset = [upstream_pool[i] for i in idx]
    f_final = offline_refine(f_0, subset, all_errors, cfg.refiner, rng=rng)

    t_final = stream.config.T
    metrics_seed = derive_seed(cfg.seed, "metrics")
    recorder = MetricRecorder(
        cfg.metrics, upstream_pool, stream.heldout_set, t_final, metrics_seed
    )
    past = [ex for ep in stream.episodes[:-1] for ex in ep.examples]
    recorder.past_queries = past
    okr_sample = recorder.okr_sample_at(t_final)
    efr_value = None
    if all_errors:
        post = predict_batch(f_final, features_matrix(all_errors))
        for ex, pred in zip(all_errors, post):
            predictions.append(PredictionRecord(t_final, "post", ex.id, ex.label, int(pred)))
        efr_value = float(np.mean(post == np.array([e.label for e in all_errors])))
    row = TraceRow(
        t=t_final,
        q_size=total_q,
        e_size=len(all_errors),
        efr=efr_value,
        ukr=model_accuracy(f_final, recorder.upstream_sample),
        okr=model_accuracy(f_final, okr_sample) if okr_sample else None,
        csr=model_accuracy(f_final, past) if past else None,
        kg=model_accuracy(f_final, stream.heldout_set) if stream.heldout_set else None,
    )
    trace = MetricTrace(
        rows=[row],
        eval_interval=cfg.metrics.eval_interval,
        ukr_sample_size=len(recorder.upstream_sample),
        okr_sample_cap=cfg.metrics.okr_sample_cap,
        seed=metrics_seed,
    )
    elapsed = time.perf_counter() - started
    return RunResult(
        run_id=cfg.run_id,
        method="offline",
        trace=trace,
        report=aggregate(trace),
        predictions=predictions,
        final_state=f_final,
        upstream_state=f_0,
        wall_clock={"loop_s": elapsed},
        kind="offline",
    )


def execute_run(
    cfg: RunConfig,
    clusters: ClusterSet,
    stream: QueryStream | None = None,
    f_0: LearnerState | None = None,
) -> RunResult:
    """Resolve a RunConfig into a finished run."""
    cfg = replace(cfg, refiner=cfg.refiner.resolve())
    cfg.refiner.validate()
    cfg.metrics.validate()
    if stream is None:
        stream = sample_stream(clusters, cfg.stream)
    if f_0 is None:
        if cfg.upstream_checkpoint is not None:
            f_0 = load_state(cfg.upstream_checkpoint)
            if f_0.arch.d != clusters.d or f_0.arch.K != clusters.K:
                raise ValueError(
                    f"checkpoint arch (d={f_0.arch.d}, K={f_0.arch.K}) does not match "
                    f"clusters (d={clusters.d}, K={clusters.K})"
                )
        else:
            f_0 = _upstream_model(cfg, clusters)
    if cfg.refiner.method == "offline":
        return run_reference_offline(stream, f_0, clusters, cfg)
    refiner = OnlineRefiner(
        cfg.refiner,
        upstream_pool=clusters.clusters[0],
        rng=spawn_rng(cfg.seed, "method"),
    )
    return run_episode_loop(
        f_0,
        stream,
        refiner,
        cfg.metrics,
        derive_seed(cfg.seed, "metrics"),
        clusters.clusters[0],
        run_id=cfg.run_id,
    )


# --- run directory I/O -------------------------------------------------------

PREDICTION_COLUMNS = ("t", "phase", "example_id", "label", "predicted")


def predictions_to_csv(records: Sequence[PredictionRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PREDICTION_COLUMNS)
    for rec in records:
        writer.writerow([rec.t, rec.phase, rec.example_id, rec.label, rec.predicted])
    return buf.getvalue()


def read_predictions_csv(path: str | Path) -> list[PredictionRecord]:
    out: list[PredictionRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                PredictionRecord(
                    t=int(rec["t"]),
                    phase=rec["phase"],
                    example_id=int(rec["example_id"]),
                    label=int(rec["label"]),
                    predicted=int(rec["predicted"]),
                )
            )
    return out


def write_run(
    result: RunResult,
    cfg: RunConfig,
    outdir: str | Path,
    clusters: ClusterSet | None = None,
) -> Path:
    cfg = replace(cfg, refiner=cfg.refiner.resolve())
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["config_sha256"] = cfg.config_hash()
    if clusters is not None:
        resolved["clusters_sha256"] = clusters_digest(clusters)
    if cfg.stream_file is not None:
        resolved["stream_file_sha256"] = hashlib.sha256(
            Path(cfg.stream_file).read_bytes()
        ).hexdigest()
    (outdir / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (outdir / "trace.csv").write_text(trace_to_csv(result.trace), encoding="utf-8")
    (outdir / "aggregate.json").write_text(
        report_to_json(
            result.report,
            extra={
                "run_id": result.run_id,
                "method": result.method,
                "kind": result.kind,
                "config_sha256": cfg.config_hash(),
            },
        ),
        encoding="utf-8",
    )
    (outdir / "predictions.csv").write_text(
        predictions_to_csv(result.predictions), encoding="utf-8"
    )
    save_state(result.final_state, outdir / "model.json")
    if result.memory_audit is not None:
        (outdir / "memory.json").write_text(
            json.dumps(result.memory_audit, sort_keys=True) + "\n", encoding="utf-8"
        )
    # timings are machine-dependent by nature; kept out of the deterministic set
    (outdir / "timings.json").write_text(
        json.dumps(result.wall_clock, sort_keys=True) + "\n", encoding="utf-8"
    )
    return outdir


# --- sweep -------------------------------------------------------------------


@dataclass
class LeaderboardEntry:
    method: str
    best_config: RefinerConfig
    validation_score: float
    test_mean: dict[str, float | None]
    test_std: dict[str, float | None]
    n_test_runs: int


def _selection_score(report: AggregateReport) -> float:
    """Mean of OEC@final and EFR@final; absent parts are skipped."""
    parts = [v for v in (report.at_final["oec"], report.at_final["efr"]) if v is not None]
    if not parts:
        return float("-inf")
    return float(np.mean(parts))


def _canonical_points(base: RefinerConfig, method: str, grid: Sequence[dict]) -> list[RefinerConfig]:
    points = [replace(base, method=method, **overrides).resolve() for overrides in grid]
    return sorted(points, key=lambda p: json.dumps(p.to_dict(), sort_keys=True))


def _summary_stats(reports: list[AggregateReport]) -> tuple[dict, dict]:
    keys = [("avg", m) for m in ("efr", "ukr", "okr", "csr", "kg", "oec")] + [
        ("at_final", m) for m in ("efr", "ukr", "okr", "csr", "kg", "oec")
    ]
    mean: dict[str, float | None] = {}
    std: dict[str, float | None] = {}
    for scope, m in keys:
        vals = [getattr(r, scope)[m] for r in reports if getattr(r, scope)[m] is not None]
        name = f"{m}_{'avg' if scope == 'avg' else 'final'}"
        mean[name] = float(np.mean(vals)) if vals else None
        std[name] = float(np.std(vals)) if vals else None
    return mean, std


class _UpstreamCache:
    """Avoid retraining f_0 for runs sharing (learner config, derived seed)."""

    def __init__(self, clusters: ClusterSet):
        self.clusters = clusters
        self._cache: dict[tuple, LearnerState] = {}

    def get(self, cfg: RunConfig) -> LearnerState:
        key = (cfg.learner, derive_seed(cfg.seed, "learner"))
        if key not in self._cache:
            self._cache[key] = _upstream_model(cfg, self.clusters)
        return self._cache[key]


def sweep(
    methods: Sequence[str],
    grids: dict[str, Sequence[dict]],
    clusters: ClusterSet,
    validation_streams: Sequence[QueryStream],
    test_streams: Sequence[QueryStream],
    base: RunConfig,
    n_seeds: int = 5,
) -> list[LeaderboardEntry]:
    """Grid-search each method on the validation streams, then score the
    winner on every test stream with ``n_seeds`` seeds.

    Selection criterion: mean over validation streams of the unweighted mean
    of OEC@final and EFR@final. Ties resolve to the first point in canonical
    (sorted-JSON) config order.
    """
    if not validation_streams or not test_streams:
        raise ValueError("need at least one validation and one test stream")
    cache = _UpstreamCache(clusters)
    leaderboard: list[LeaderboardEntry] = []
    for method in methods:
        grid = grids.get(method)
        if not grid:
            raise ValueError(f"empty grid for method {method!r}")
        points = _canonical_points(base.refiner, method, grid)
        best_point: RefinerConfig | None = None
        best_score = float("-inf")
        for point in points:
            scores = []
            for i, stream in enumerate(validation_streams):
                run_cfg = replace(
                    base,
                    run_id=f"val-{method}-{i}",
                    refiner=point,
                    seed=derive_seed(base.seed, "val", i),
                )
                result = execute_run(run_cfg, clusters, stream, f_0=cache.get(run_cfg))
                scores.append(_selection_score(result.report))
            score = float(np.mean(scores))
            if score > best_score:
                best_score = score
                best_point = point
        reports: list[AggregateReport] = []
        for j, stream in enumerate(test_streams):
            for s in range(n_seeds):
                run_cfg = replace(
                    base,
                    run_id=f"test-{method}-{j}-{s}",
                    refiner=best_point,
                    seed=derive_seed(base.seed, "test", j, s),
                )
                result = execute_run(run_cfg, clusters, stream, f_0=cache.get(run_cfg))
                reports.append(result.report)
        mean, std = _summary_stats(reports)
        leaderboard.append(
            LeaderboardEntry(
                method=method,
                best_config=best_point,
                validation_score=best_score,
                test_mean=mean,
                test_std=std,
                n_test_runs=len(reports),
            )
        )
    return leaderboard


def leaderboard_to_json(entries: Sequence[LeaderboardEntry]) -> str:
    payload = [
        {
            "method": e.method,
            "best_config": e.best_config.to_dict(),
            "validation_score": e.validation_score,
            "test_mean": e.test_mean,
            "test_std": e.test_std,
            "n_test_runs": e.n_test_runs,
        }
        for e in entries
    ]
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# --- stream-dynamics sensitivity grid ----------------------------------------


@dataclass
class DynamicsCell:
    alpha: float
    beta: float
    gamma: float
    method: str
    gain_mean: float
    gains: list[float]


def dynamics_grid(
    clusters: ClusterSet,
    base_stream: StreamConfig,
    variants: Sequence[tuple[float, float, float]],
    methods: Sequence[str],
    tuned: dict[str, RefinerConfig],
    base: RunConfig,
    n_seeds: int = 5,
) -> list[DynamicsCell]:
    """OEC@final gain over the frozen reference for each (alpha, beta, gamma).

    Method hyperparameters are NOT re-tuned per variant: each method runs
    with its ``tuned`` config everywhere.
    """
    if not variants:
        raise ValueError("variants list is empty")
    cache = _UpstreamCache(clusters)
    cells: list[DynamicsCell] = []
    for vi, (alpha, beta, gamma) in enumerate(variants):
        per_method: dict[str, list[float]] = {m: [] for m in methods}
        for s in range(n_seeds):
            stream_cfg = replace(
                base_stream,
                alpha=alpha,
                beta=beta,
                gamma=gamma,
                seed=derive_seed(base.seed, "dyn-stream", vi, s),
            )
            stream = sample_stream(clusters, stream_cfg)
            run_seed = derive_seed(base.seed, "dyn-run", vi, s)
            frozen_cfg = replace(
                base,
                run_id=f"dyn-{vi}-{s}-frozen",
                stream=stream_cfg,
                refiner=RefinerConfig(method="frozen"),
                seed=run_seed,
            )
            f_0 = cache.get(frozen_cfg)
            frozen = execute_run(frozen_cfg, clusters, stream, f_0=f_0)
            base_oec = frozen.report.at_final["oec"]
            for method in methods:
                cfg = replace(
                    base,
                    run_id=f"dyn-{vi}-{s}-{method}",
                    stream=stream_cfg,
                    refiner=tuned[method] if method != "frozen" else RefinerConfig(method="frozen"),
                    seed=run_seed,
                )
                result = execute_run(cfg, clusters, stream, f_0=f_0)
                per_method[method].append(result.report.at_final["oec"] - base_oec)
        for method in methods:
            gains = per_method[method]
            cells.append(
                DynamicsCell(
                    alpha=alpha,
                    beta=beta,
                    gamma=gamma,
                    method=method,
                    gain_mean=float(np.mean(gains)),
                    gains=gains,
                )
            )
    return cells


def default_dynamics_variants() -> list[tuple[float, float, float]]:
    """The base stream setting plus the four one-knob extremes."""
    return [
        (0.9, 0.5, 0.8),
        (0.9, 0.1, 0.8),
        (0.9, 0.9, 0.8),
        (0.9, 0.5, 0.5),
        (0.9, 0.5, 0.2),
    ]


def default_grids() -> dict[str, list[dict]]:
    """Search grids per method; penalty weights are scaled to the small learner."""
    replay = [{"replay_interval": k} for k in (1, 3)]
    conditional = [
        {"replay_interval": k, "candidate_pool": c} for k in (1, 3) for c in (32, 64, 128)
    ]
    return {
        "cft": [{"lr": lr, "epochs": e} for lr in (0.01, 0.03) for e in (10, 20)],
        "l2reg": [{"lam": lam} for lam in (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)],
        "ewc": [
            {"lam": lam, "ewc_gamma": g}
            for lam in (1.0, 5.0, 10.0)
            for g in (1.0, 0.95, 0.9, 0.8)
        ],
        "er": replay,
        "maxloss": conditional,
        "mir": conditional,
        "mir_l2reg": [
            {"lam": lam, "replay_interval": k} for lam in (0.03, 0.1, 0.3) for k in (1, 3)
        ],
    }


# --- comparison table ---------------------------------------------------------

TABLE_AVG = ("efr", "ukr", "okr", "csr", "kg", "oec")
TABLE_FINAL = ("ukr", "okr", "csr", "kg", "oec")


def run_summary_row(agg: dict) -> dict:
    """Flatten one aggregate.json payload into renderable table cells."""
    offline = agg.get("kind") == "offline"
    row = {"run_id": agg.get("run_id", "?"), "method": agg.get("method", "?")}
    for m in TABLE_AVG:
        v = agg["avg"].get(m)
        row[f"avg_{m}"] = None if (offline and m != "efr") else v
    for m in TABLE_FINAL:
        row[f"final_{m}"] = agg["at_final"].get(m)
    row["final_efr"] = agg["at_final"].get("efr")
    return row


def render_table(rows: Sequence[dict], fmt: str = "table") -> str:
    columns = (
        ["run_id", "method"]
        + [f"avg_{m}" for m in TABLE_AVG]
        + [f"final_{m}" for m in TABLE_FINAL]
    )
    if fmt == "json":
        return json.dumps(list(rows), sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [
                    row[c] if c in ("run_id", "method") else render_percent(row[c])
                    for c in columns
                ]
            )
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    header = [c.replace("avg_", "AVG ").replace("final_", "@T ") for c in columns]
    cells = [header]
    for row in rows:
        cells.append(
            [
                str(row[c]) if c in ("run_id", "method") else render_percent(row[c])
                for c in columns
            ]
        )
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    for i, r in enumerate(cells):
        lines.append("  ".join(val.rjust(w) for val, w in zip(r, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
