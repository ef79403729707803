"""Per-step refinement metrics and their aggregation.

Five per-step scores, all in [0, 1]:
  efr  instant error-fixing rate: accuracy of f_t on the step's own errors
  ukr  upstream knowledge retention: accuracy on a fixed upstream downsample
  okr  online knowledge retention: accuracy on a downsample of past queries
  csr  cumulative success rate: 1 - |errors before t| / |queries before t|
  kg   knowledge generalization: accuracy on the stream's held-out set

The aggregate report carries the per-step average (AVG) and the final value
(@T) of each, plus the overall criterion OEC = mean(ukr, okr, csr, kg) at
both granularities. efr is reported separately from OEC because it scores
method-specific error sets.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clusters import Example, features_matrix, labels_array
from .learner import LearnerState, predict_batch
from .seeds import spawn_rng

METRIC_NAMES = ("efr", "ukr", "okr", "csr", "kg")
OEC_PARTS = ("ukr", "okr", "csr", "kg")


@dataclass(frozen=True)
class MetricsConfig:
    ukr_sample_size: int = 512
    okr_sample_cap: int = 1024
    eval_interval: int = 1  # evaluate ukr/okr/kg every m steps (plus the final step)

    def validate(self) -> None:
        if self.ukr_sample_size < 1 or self.okr_sample_cap < 1:
            raise ValueError("sample sizes must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsConfig":
        return cls(**data)


@dataclass
class TraceRow:
    t: int
    q_size: int
    e_size: int
    efr: float | None
    ukr: float | None
    okr: float | None
    csr: float | None
    kg: float | None


@dataclass
class MetricTrace:
    rows: list[TraceRow] = field(default_factory=list)
    eval_interval: int = 1
    ukr_sample_size: int = 0
    okr_sample_cap: int = 0
    seed: int = 0


def model_accuracy(state: LearnerState, examples: Sequence[Example]) -> float:
    if not examples:
        raise ValueError("accuracy needs a non-empty sample")
    x = features_matrix(examples)
    y = labels_array(examples)
    return float(np.mean(predict_batch(state, x) == y))


def efr(f_t: LearnerState, errors: Sequence[Example]) -> float:
    """Fraction of the step's errors that f_t now predicts correctly."""
    if not errors:
        raise ValueError("efr is undefined for an empty error set")
    return model_accuracy(f_t, errors)


def ukr(f_t: LearnerState, upstream_sample: Sequence[Example]) -> float:
    return model_accuracy(f_t, upstream_sample)


def okr(f_t: LearnerState, past_query_sample: Sequence[Example]) -> float:
    return model_accuracy(f_t, past_query_sample)


def csr(error_prefix: int, query_prefix: int) -> float:
    """1 - errors/queries over strictly-past episodes."""
    if query_prefix <= 0:
        raise ValueError("csr needs at least one past episode")
    return 1.0 - error_prefix / query_prefix


def kg(f_t: LearnerState, heldout: Sequence[Example]) -> float:
    return model_accuracy(f_t, heldout)


class MetricRecorder:
    """Owns the fixed evaluation samples and appends one row per step.

    The upstream downsample is drawn once per run; the past-query downsample
    is redrawn each evaluated step from a seed derived as (seed, "okr", t),
    so traces are reproducible. csr uses strictly-past counts: the current
    episode is added to the prefix only after its row is recorded.
    """

    def __init__(
        self,
        cfg: MetricsConfig,
        upstream_pool: Sequence[Example],
        heldout: Sequence[Example],
        total_steps: int,
        seed: int,
    ):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.total_steps = total_steps
        rng = spawn_rng(seed, "ukr")
        size = min(cfg.ukr_sample_size, len(upstream_pool))
        idx = rng.choice(len(upstream_pool), size=size, replace=False)
        self.upstream_sample = [upstream_pool[i] for i in idx]
        self.heldout = list(heldout)
        self.past_queries: list[Example] = []
        self.query_prefix = 0
        self.error_prefix = 0
        self.trace = MetricTrace(
            rows=[],
            eval_interval=cfg.eval_interval,
            ukr_sample_size=size,
            okr_sample_cap=cfg.okr_sample_cap,
            seed=seed,
        )

    def okr_sample_at(self, t: int) -> list[Example]:
        size = min(self.cfg.okr_sample_cap, len(self.past_queries))
        if size == 0:
            return []
        rng = spawn_rng(self.seed, "okr", t)
        idx = rng.choice(len(self.past_queries), size=size, replace=False)
        return [self.past_queries[i] for i in idx]

    def record(
        self,
        t: int,
        f_t: LearnerState,
        episode_examples: Sequence[Example],
        errors: Sequence[Example],
        efr_value: float | None = None,
    ) -> TraceRow:
        if errors and efr_value is None:
            efr_value = efr(f_t, errors)
        csr_value = None if self.query_prefix == 0 else csr(self.error_prefix, self.query_prefix)
        evaluate = (t % self.cfg.eval_interval == 0) or (t == self.total_steps)
        ukr_value = okr_value = kg_value = None
        if evaluate:
            ukr_value = ukr(f_t, self.upstream_sample)
            sample = self.okr_sample_at(t)
            okr_value = okr(f_t, sample) if sample else None
            kg_value = kg(f_t, self.heldout) if self.heldout else None
        row = TraceRow(
            t=t,
            q_size=len(episode_examples),
            e_size=len(errors),
            efr=efr_value,
            ukr=ukr_value,
            okr=okr_value,
            csr=csr_value,
            kg=kg_value,
        )
        self.trace.rows.append(row)
        self.query_prefix += len(episode_examples)
        self.error_prefix += len(errors)
        self.past_queries.extend(episode_examples)
        return row


@dataclass
class AggregateReport:
    avg: dict[str, float | None]
    at_final: dict[str, float | None]
    n_steps: int
    eval_interval: int
    carry_forward: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _mean(values: list[float]) -> float | None:
    if not values:
        return None
    return float(np.mean(values))


def _oec(parts: dict[str, float | None]) -> float | None:
    vals = [parts[k] for k in OEC_PARTS]
    if any(v is None for v in vals):
        return None
    return float(np.mean([float(v) for v in vals]))


def aggregate(trace: MetricTrace) -> AggregateReport:
    """AVG and @final for every metric plus the OEC roll-up.

    AVG skips steps where a metric is absent; when the trace was evaluated
    on an interval, ukr/okr/kg carry the last evaluated value forward across
    unevaluated steps (flagged via ``carry_forward``).
    """
    avg: dict[str, float | None] = {}
    at_final: dict[str, float | None] = {}
    carried = trace.eval_interval > 1
    for name in METRIC_NAMES:
        values: list[float] = []
        last: float | None = None
        for row in trace.rows:
            v = getattr(row, name)
            if name in ("ukr", "okr", "kg") and carried:
                if v is None:
                    v = last
                else:
                    last = v
            if v is not None:
                values.append(v)
                last = v
        avg[name] = _mean(values)
        at_final[name] = values[-1] if values else None
    avg["oec"] = _oec(avg)
    at_final["oec"] = _oec(at_final)
    return AggregateReport(
        avg=avg,
        at_final=at_final,
        n_steps=len(trace.rows),
        eval_interval=trace.eval_interval,
        carry_forward=carried,
    )


def render_percent(value: float | None) -> str:
    """Fractions render as two-decimal percentages, absent values as '-'."""
    if value is None:
        return "-"
    return f"{value * 100.0:.2f}"


# --- serialization ----------------------------------------------------------

TRACE_COLUMNS = ("t", "q_size", "e_size", "efr", "ukr", "okr", "csr", "kg")


def trace_to_csv(trace: MetricTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace.rows:
        writer.writerow(
            [
                row.t,
                row.q_size,
                row.e_size,
                *("" if getattr(row, m) is None else repr(getattr(row, m)) for m in METRIC_NAMES),
            ]
        )
    return buf.getvalue()


def write_trace_csv(trace: MetricTrace, path: str | Path) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8")


def read_trace_csv(path: str | Path) -> MetricTrace:
    rows: list[TraceRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                TraceRow(
                    t=int(rec["t"]),
                    q_size=int(rec["q_size"]),
                    e_size=int(rec["e_size"]),
                    **{m: (None if rec[m] == "" else float(rec[m])) for m in METRIC_NAMES},
                )
            )
    return MetricTrace(rows=rows)


def report_to_json(report: AggregateReport, extra: dict | None = None) -> str:
    payload = dict(extra or {})
    payload.update(report.to_dict())
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def read_report_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
