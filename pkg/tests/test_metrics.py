import numpy as np
import pytest

from driftfix.clusters import Example
from driftfix.learner import Arch, state_from_theta
from driftfix.metrics import (
    AggregateReport,
    MetricRecorder,
    MetricsConfig,
    MetricTrace,
    TraceRow,
    aggregate,
    csr,
    efr,
    kg,
    model_accuracy,
    okr,
    read_trace_csv,
    render_percent,
    trace_to_csv,
    ukr,
    write_trace_csv,
)

ARCH = Arch(kind="softmax", d=2, K=2)


def ex(i, feats=(1.0, 0.0), label=0, cluster=0):
    return Example(id=i, features=tuple(float(v) for v in feats), label=label, cluster_id=cluster)


def always_class(k: int):
    """Constant-prediction model: huge bias on class k."""
    theta = np.zeros(ARCH.param_count)
    theta[4 + k] = 50.0  # bias block follows the 2x2 weight block
    return state_from_theta(ARCH, theta)


# --- per-step metrics ----------------------------------------------------------


def test_efr_perfect_fix():
    model = always_class(1)
    errors = [ex(i, label=1) for i in range(4)]
    assert efr(model, errors) == 1.0


def test_efr_frozen_model_is_zero():
    # the error set is exactly what this model got wrong, so it scores 0
    model = always_class(0)
    queries = [ex(i, label=i % 2) for i in range(8)]
    errors = [e for e in queries if e.label != 0]
    assert efr(model, errors) == 0.0


def test_efr_three_of_four():
    # brute-force recount: count fixed errors by the correctness predicate
    from driftfix.learner import predict

    model = always_class(1)
    errors = [ex(0, label=1), ex(1, label=1), ex(2, label=1), ex(3, label=0)]
    fixed = sum(1 for e in errors if predict(model, e.features) == e.label)
    assert fixed == 3
    assert efr(model, errors) == 0.75


def test_efr_rejects_empty():
    with pytest.raises(ValueError):
        efr(always_class(0), [])


def test_okr_single_past_example():
    model = always_class(1)
    assert okr(model, [ex(0, label=1)]) == 1.0


def test_csr_cases():
    assert csr(0, 64) == 1.0
    assert csr(10, 64) == 0.84375
    assert csr(64, 64) == 0.0
    with pytest.raises(ValueError):
        csr(0, 0)


def test_kg_constant_model_scores_base_rate():
    model = always_class(0)
    heldout = [ex(i, label=0) for i in range(3)] + [ex(10 + i, label=1) for i in range(7)]
    assert kg(model, heldout) == pytest.approx(0.3)


def test_ukr_is_plain_accuracy():
    model = always_class(1)
    sample = [ex(0, label=1), ex(1, label=0)]
    assert ukr(model, sample) == 0.5 == model_accuracy(model, sample)


# --- recorder -------------------------------------------------------------------


def run_recorder(eval_interval=1, steps=4):
    cfg = MetricsConfig(ukr_sample_size=4, okr_sample_cap=8, eval_interval=eval_interval)
    upstream = [ex(i, label=1) for i in range(6)]
    heldout = [ex(100 + i, label=1) for i in range(5)]
    rec = MetricRecorder(cfg, upstream, heldout, total_steps=steps, seed=3)
    model = always_class(1)
    for t in range(1, steps + 1):
        episode = [ex(1000 + 10 * t + j, label=j % 2) for j in range(4)]
        errors = [e for e in episode if e.label != 1]
        rec.record(t, model, episode, errors)
    return rec


def test_recorder_first_step_absences():
    rec = run_recorder()
    first = rec.trace.rows[0]
    assert first.csr is None  # no strictly-past episodes yet
    assert first.okr is None  # empty past-query support
    assert first.ukr == 1.0
    assert first.kg == 1.0


def test_recorder_csr_uses_strict_prefix():
    rec = run_recorder()
    # each episode has 4 queries and 2 errors
    assert rec.trace.rows[1].csr == csr(2, 4)
    assert rec.trace.rows[3].csr == csr(6, 12)


def test_recorder_okr_sample_is_deterministic():
    a = run_recorder().trace.rows
    b = run_recorder().trace.rows
    assert [(r.okr, r.ukr, r.kg) for r in a] == [(r.okr, r.ukr, r.kg) for r in b]


def test_recorder_eval_interval_skips_steps():
    rec = run_recorder(eval_interval=3, steps=4)
    evaluated = [r.t for r in rec.trace.rows if r.ukr is not None]
    assert evaluated == [3, 4]  # schedule plus the forced final step


def test_recorder_metric_ranges():
    rec = run_recorder()
    for row in rec.trace.rows:
        for name in ("efr", "ukr", "okr", "csr", "kg"):
            v = getattr(row, name)
            assert v is None or 0.0 <= v <= 1.0


# --- aggregation ----------------------------------------------------------------


def row(t, **kw):
    base = dict(t=t, q_size=4, e_size=2, efr=None, ukr=None, okr=None, csr=None, kg=None)
    base.update(kw)
    return TraceRow(**base)


def test_aggregate_reproduces_published_final_rows():
    # frozen-reference row: (80.27, 36.13, 35.44, 31.25)% -> OEC 45.77%
    trace = MetricTrace(rows=[row(1, ukr=0.8027, okr=0.3613, csr=0.3544, kg=0.3125, efr=0.0)])
    report = aggregate(trace)
    assert render_percent(report.at_final["oec"]) == "45.77"
    # error-driven fine-tuning row: (66.21, 77.73, 53.48, 48.91)% -> 61.58%
    trace = MetricTrace(rows=[row(1, ukr=0.6621, okr=0.7773, csr=0.5348, kg=0.4891)])
    assert render_percent(aggregate(trace).at_final["oec"]) == "61.58"


def test_aggregate_constant_trace_avg_equals_final():
    rows = [row(t, efr=0.5, ukr=0.25, okr=0.75, csr=0.5, kg=1.0) for t in range(1, 6)]
    report = aggregate(MetricTrace(rows=rows))
    for m in ("efr", "ukr", "okr", "csr", "kg", "oec"):
        assert report.avg[m] == report.at_final[m]
    assert report.at_final["oec"] == pytest.approx((0.25 + 0.75 + 0.5 + 1.0) / 4)


def test_aggregate_oec_recomputation_identity():
    rng = np.random.default_rng(0)
    rows = [
        row(t, efr=rng.uniform(), ukr=rng.uniform(), okr=rng.uniform(),
            csr=rng.uniform(), kg=rng.uniform())
        for t in range(1, 30)
    ]
    report = aggregate(MetricTrace(rows=rows))
    for scope in (report.avg, report.at_final):
        expected = np.mean([scope["ukr"], scope["okr"], scope["csr"], scope["kg"]])
        assert abs(scope["oec"] - expected) < 1e-12


def test_aggregate_skips_absent_and_tracks_final():
    rows = [
        row(1, efr=0.2, ukr=0.9),
        row(2, ukr=0.8, okr=0.5, csr=1.0, kg=0.5),
        row(3, efr=0.4, ukr=0.7, okr=0.6, csr=0.9, kg=0.6),
    ]
    report = aggregate(MetricTrace(rows=rows))
    assert report.avg["efr"] == pytest.approx((0.2 + 0.4) / 2)
    assert report.at_final["efr"] == 0.4
    assert report.avg["okr"] == pytest.approx(0.55)
    assert report.at_final["ukr"] == 0.7


def test_aggregate_carry_forward_on_interval():
    rows = [
        row(1, ukr=0.9, okr=0.5, csr=None, kg=0.4),
        row(2),
        row(3),
        row(4, ukr=0.6, okr=0.2, csr=0.5, kg=0.1),
    ]
    trace = MetricTrace(rows=rows, eval_interval=3)
    report = aggregate(trace)
    assert report.carry_forward
    # ukr: 0.9 carried over steps 2-3 then 0.6
    assert report.avg["ukr"] == pytest.approx((0.9 + 0.9 + 0.9 + 0.6) / 4)
    assert report.at_final["ukr"] == 0.6


def test_aggregate_empty_metric_gives_none():
    report = aggregate(MetricTrace(rows=[row(1), row(2)]))
    assert report.avg["efr"] is None
    assert report.at_final["oec"] is None


def test_render_percent():
    assert render_percent(None) == "-"
    assert render_percent(0.457725) == "45.77"
    assert render_percent(1.0) == "100.00"


# --- serialization -------------------------------------------------------------


def test_trace_csv_roundtrip(tmp_path):
    rec = run_recorder()
    path = tmp_path / "trace.csv"
    write_trace_csv(rec.trace, path)
    loaded = read_trace_csv(path)
    assert loaded.rows == rec.trace.rows


def test_trace_csv_deterministic():
    a = trace_to_csv(run_recorder().trace)
    b = trace_to_csv(run_recorder().trace)
    assert a == b
