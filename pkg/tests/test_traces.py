import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abrfair.core import DomainError
from abrfair.traces import (
    NOISE_FLOOR_KBPS,
    BandwidthTrace,
    RawMeasurement,
    add_noise,
    filter_and_scale,
    ingest,
    read_measurements,
    read_trace,
    synthesize,
    write_trace,
)


def rows(values, sid="s", duration=5.0):
    return [RawMeasurement(sid, i, v, duration) for i, v in enumerate(values)]


def test_ingest_constant():
    (tr,) = ingest(rows([1000.0] * 6), dt_s=2.0)
    assert len(tr) == 15 and np.all(tr.step_values == 1000.0)


def test_ingest_aligned_grid():
    (tr,) = ingest(rows([1000.0] * 3 + [2000.0] * 3), dt_s=5.0)
    assert tr.step_values.tolist() == [1000.0] * 3 + [2000.0] * 3


def test_ingest_hold_at_boundary():
    # steps start at t = 0, 2, 4, 6, 8; the sample covering [0, 5) holds until t = 5
    (tr,) = ingest(rows([1000.0, 2000.0]), dt_s=2.0)
    assert tr.step_values.tolist() == [1000.0, 1000.0, 1000.0, 2000.0, 2000.0]


def test_ingest_groups_and_orders_sessions(caplog):
    data = rows([3000.0, 1000.0], "b") + rows([0.0, 0.0], "a") + list(reversed(rows([500.0, 700.0], "c")))
    out = ingest(data, dt_s=5.0)
    assert [t.source_id for t in out] == ["b", "c"]
    assert out[1].step_values.tolist() == [500.0, 700.0]
    assert "skipping session a" in caplog.text


def test_measurement_validation():
    with pytest.raises(DomainError):
        RawMeasurement("x", 0, -1.0)
    with pytest.raises(DomainError):
        RawMeasurement("x", 0, 1.0, 0.0)


def test_trace_validation():
    with pytest.raises(DomainError):
        BandwidthTrace(np.array([]))
    with pytest.raises(DomainError):
        BandwidthTrace(np.array([1.0, 0.0]))
    tr = BandwidthTrace(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        tr.step_values[0] = 5.0


def test_filter_and_scale_examples():
    t1 = BandwidthTrace(np.array([1000.0, 2000.0]), "a")
    t2 = BandwidthTrace(np.array([5000.0, 5000.0]), "b")
    t3 = BandwidthTrace(np.array([3000.0, 3000.0]), "c")
    out = filter_and_scale([t1, t2, t3], 2)
    assert [t.source_id for t in out] == ["a", "c"]
    assert out[0].step_values.tolist() == [2000.0, 4000.0]


def test_noise_identity_and_determinism():
    tr = synthesize("constant", {"level": 2000.0}, 10)
    assert add_noise(tr, 0.0, 3) == tr
    assert add_noise(tr, 200.0, 3) == add_noise(tr, 200.0, 3)
    assert add_noise(tr, 200.0, 3) != add_noise(tr, 200.0, 4)
    with pytest.raises(DomainError):
        add_noise(tr, -1.0, 0)


def test_noise_mean_law_of_large_numbers():
    K, sigma = 30, 200.0
    tr = synthesize("constant", {"level": 2000.0}, K)
    means = [add_noise(tr, sigma, s).mean() for s in range(100)]
    assert abs(np.mean(means) - 2000.0) <= 3 * sigma / np.sqrt(100 * K)


def test_synthetic_fixtures():
    assert synthesize("constant", {"level": 2000}, 10).step_values.tolist() == [2000.0] * 10
    step = synthesize("step", {"level1": 3000, "level2": 1000, "change_at": 5}, 10)
    assert step.step_values.tolist() == [3000.0] * 5 + [1000.0] * 5
    m1 = synthesize("markov", {"levels": [1000, 3000], "p_switch": 0.2}, 50, seed=7)
    m2 = synthesize("markov", {"levels": [1000, 3000], "p_switch": 0.2}, 50, seed=7)
    assert m1 == m2 and set(m1.step_values.tolist()) <= {1000.0, 3000.0}
    assert synthesize("markov", {"levels": [1000, 3000], "p_switch": 0.0}, 5).step_values.tolist() == [1000.0] * 5
    with pytest.raises(DomainError):
        synthesize("sine", {}, 5)
    with pytest.raises(DomainError):
        synthesize("constant", {}, 5)


def test_trace_and_measurement_files(tmp_path):
    tr = synthesize("markov", {"levels": [1000.5, 3000.25], "p_switch": 0.3}, 12, seed=1)
    p = tmp_path / "t.csv"
    write_trace(tr, p)
    back = read_trace(p, source_id=tr.source_id)
    assert back == tr
    raw = tmp_path / "raw.csv"
    raw.write_text("session_id,seq,throughput_kbps\nA,1,2000\nA,0,1000\n")
    (got,) = ingest(read_measurements(raw), 5.0)
    assert got.step_values.tolist() == [1000.0, 2000.0]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(DomainError):
        read_measurements(bad)


# --- invariants ----------------------------------------------------------------

samples = st.lists(st.tuples(st.floats(1.0, 10_000.0), st.floats(0.5, 20.0)), min_size=1, max_size=20)


@given(samples, st.sampled_from([0.5, 1.0, 2.0, 5.0]))
def test_ingest_preserves_time(data, dt):
    total = sum(d for _, d in data)
    ms = [RawMeasurement("s", i, v, d) for i, (v, d) in enumerate(data)]
    out = ingest(ms, dt)
    n = int(np.floor(total / dt + 1e-9))
    assert (len(out[0]) if out else 0) == n


traces = st.lists(
    st.lists(st.floats(1.0, 8000.0), min_size=1, max_size=10).map(lambda v: BandwidthTrace(np.array(v))),
    max_size=8,
)


@given(traces, st.integers(1, 5))
def test_filter_idempotent_and_linear(ts, n):
    once = filter_and_scale(ts, 1)
    assert filter_and_scale(once, 1) == once
    scaled = filter_and_scale(ts, n)
    assert len(scaled) == len(once)
    for a, b in zip(scaled, once):
        assert np.allclose(a.step_values, n * b.step_values, rtol=1e-15)


@given(st.lists(st.floats(1.0, 5000.0), min_size=1, max_size=30), st.floats(0.0, 5000.0), st.integers(0, 2**32 - 1))
def test_noise_respects_floor(values, sigma, seed):
    out = add_noise(BandwidthTrace(np.array(values)), sigma, seed)
    assert np.all(out.step_values >= NOISE_FLOOR_KBPS) or sigma == 0
