"""Trace-driven simulator tests."""

import math
import random

import pytest

from _support import as_stream
from netshaper.dpcore import DpParams
from netshaper.errors import ConfigError
from netshaper.sim import SimConfig, intervals_to_csv, overhead_sweep, simulate, sweep_to_csv
from netshaper.traces import windowed_repr

MS = 1_000_000

PARAMS = DpParams(1.0, 1e-6, 50_000.0, interval=10 * MS, window=100 * MS)


def constant_rate_stream(rate_bytes=1000, spacing=2 * MS, count=200, start=0):
    return as_stream([(start + i * spacing, rate_bytes) for i in range(count)])


def test_noiseless_constant_rate_passthrough():
    stream = constant_rate_stream()
    result = simulate([stream], SimConfig(PARAMS, seed=1, sigma=0.0))
    assert result.bandwidth_overhead == 0.0
    assert result.dummy_bytes == 0
    assert result.drops_bytes == 0
    assert result.payload_delivered == result.payload_in == stream.total_bytes
    assert result.latency is not None and result.latency.max <= PARAMS.interval


def test_empty_stream_reports_absolute_dummy():
    result = simulate([as_stream([])], SimConfig(PARAMS, seed=3, sigma=10_000.0, horizon=500 * MS))
    assert result.no_payload
    assert result.bandwidth_overhead is None
    assert result.payload_in == 0
    assert result.dummy_bytes > 0
    assert all(b.payload == () for b in result.shaped)


def test_empty_stream_without_horizon_rejected():
    with pytest.raises(ConfigError):
        simulate([as_stream([])], SimConfig(PARAMS, seed=3))


def test_noiseless_output_is_shifted_windowed_repr():
    rng = random.Random(8)
    points = [(rng.randrange(0, 400 * MS), rng.randint(1, 5000)) for _ in range(300)]
    stream = as_stream(points)
    result = simulate([stream], SimConfig(PARAMS, seed=0, sigma=0.0))
    span = result.shaped[-1].interval_index * PARAMS.interval - result.start
    reference = windowed_repr(stream, result.start, span, PARAMS.interval)
    got = [b.dp_len for b in result.shaped]
    # buffer emitted at boundary j+1 carries the bytes that arrived in bucket j
    assert got == list(reference.values[: len(got)])


def test_interval_alignment_and_emission_grid():
    stream = as_stream([(37 * MS, 100), (55 * MS, 100)])
    result = simulate([stream], SimConfig(PARAMS, seed=0, sigma=0.0))
    assert result.start == 30 * MS
    for j, buf in enumerate(result.shaped):
        assert buf.interval_index == result.start // PARAMS.interval + 1 + j


def test_latency_within_window_and_conservation():
    rng = random.Random(21)
    params = DpParams(1.0, 1e-6, 20_000.0, interval=10 * MS, window=50 * MS, cutoff=60_000)
    for trial in range(20):
        streams = [
            as_stream(
                [(rng.randrange(0, 300 * MS), rng.randint(1, 3000)) for _ in range(rng.randint(1, 80))]
            )
            for _ in range(rng.randint(1, 3))
        ]
        result = simulate(streams, SimConfig(params, seed=trial, sigma=8_000.0))
        if result.latency is not None:
            assert result.latency.max <= params.window
        queued_left = result.payload_in - result.payload_delivered - result.drops_bytes
        assert queued_left == 0  # run extends a full window past the last packet
        assert result.payload_delivered == sum(b.payload_bytes for b in result.shaped)
        assert result.dummy_bytes == sum(b.dummy for b in result.shaped)


def test_determinism_byte_identical_csv():
    stream = constant_rate_stream()
    cfg = SimConfig(PARAMS, seed=42, sigma=5_000.0)
    first = simulate([stream], cfg)
    second = simulate([stream], cfg)
    assert intervals_to_csv(first) == intervals_to_csv(second)
    assert first.summary() == second.summary()
    other = simulate([stream], SimConfig(PARAMS, seed=43, sigma=5_000.0))
    assert intervals_to_csv(first) != intervals_to_csv(other)


def test_csv_shape():
    result = simulate([constant_rate_stream(count=5)], SimConfig(PARAMS, seed=1, sigma=0.0))
    lines = intervals_to_csv(result).strip().splitlines()
    assert lines[0] == "k,dp_len,payload,dummy,drops"
    assert len(lines) == len(result.shaped) + 1
    assert all(len(line.split(",")) == 5 for line in lines[1:])


def test_flow_scaled_vs_fixed_cutoff():
    streams = [constant_rate_stream() for _ in range(4)]
    scaled = simulate(streams, SimConfig(PARAMS, seed=1, sigma=0.0, per_flow_cutoff=1_000))
    assert scaled.cutoff == 4_000
    fixed = simulate(
        streams, SimConfig(PARAMS, seed=1, sigma=0.0, per_flow_cutoff=1_000, cutoff_mode="fixed")
    )
    assert fixed.cutoff == 1_000
    # tighter clamp can only reduce what leaves the queue per interval
    assert max(b.dp_len for b in fixed.shaped) <= 1_000


def test_declared_flow_count_validation():
    streams = [constant_rate_stream()]
    result = simulate(streams, SimConfig(PARAMS, seed=1, sigma=0.0, flows=16, per_flow_cutoff=1_000))
    assert result.cutoff == 16_000
    with pytest.raises(ConfigError):
        simulate([constant_rate_stream(), constant_rate_stream()], SimConfig(PARAMS, flows=1))


def test_amortization_with_shared_tunnel():
    # dummy bytes are a per-tunnel cost, so per-flow overhead shrinks as flows
    # share the tunnel; independent single-flow tunnels pay it once each.
    base = SimConfig(PARAMS, seed=11, sigma=20_000.0)
    single = simulate([constant_rate_stream()], base)
    assert single.bandwidth_overhead is not None
    shared = simulate([constant_rate_stream() for _ in range(8)], base)
    independent_dummy = 0
    for i in range(8):
        independent_dummy += simulate(
            [constant_rate_stream()], SimConfig(PARAMS, seed=11 + i, sigma=20_000.0)
        ).dummy_bytes
    assert shared.dummy_bytes <= independent_dummy
    assert shared.bandwidth_overhead < single.bandwidth_overhead


def test_sweep_single_value_matches_simulate():
    stream = constant_rate_stream()
    cfg = SimConfig(PARAMS, seed=9, sigma=4_000.0)
    rows = overhead_sweep([stream], cfg, "sigma", [4_000.0])
    direct = simulate([stream], SimConfig(PARAMS, seed=9 * 1_000_003, sigma=4_000.0))
    assert rows[0].result.summary() == direct.summary()


def test_sweep_unknown_axis():
    with pytest.raises(ConfigError):
        overhead_sweep([constant_rate_stream()], SimConfig(PARAMS), "delta", [1])


def test_sweep_interval_must_divide_window():
    with pytest.raises(ConfigError):
        overhead_sweep([constant_rate_stream()], SimConfig(PARAMS), "T", [7 * MS])


def test_sweep_larger_interval_fewer_queries_lower_overhead():
    # fixed per-query noise: halving the query rate halves the dummy budget
    stream = constant_rate_stream(rate_bytes=5000, spacing=5 * MS, count=400)
    cfg = SimConfig(PARAMS, seed=123, sigma=30_000.0)
    rows = overhead_sweep([stream], cfg, "T", [10 * MS, 20 * MS, 50 * MS, 100 * MS])
    overheads = [r.result.bandwidth_overhead for r in rows]
    assert all(o is not None for o in overheads)
    assert overheads == sorted(overheads, reverse=True)


def test_sweep_flows_axis_cycles_streams():
    stream = constant_rate_stream()
    rows = overhead_sweep([stream], SimConfig(PARAMS, seed=2, sigma=10_000.0), "flows", [1, 4])
    assert rows[0].result.payload_in * 4 == rows[1].result.payload_in


def test_sweep_csv_render():
    rows = overhead_sweep(
        [constant_rate_stream(count=20)], SimConfig(PARAMS, seed=2, sigma=0.0), "sigma", [0.0, 100.0]
    )
    text = sweep_to_csv(rows)
    lines = text.strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("axis,value,")


def test_latency_stats_are_byte_weighted():
    # one early heavy burst and one late light packet: weighting by bytes puts
    # the p99 at the heavy burst's wait, not the light one's
    params = DpParams(1.0, 1e-6, 1000.0, interval=10 * MS, window=200 * MS)
    stream = as_stream([(1 * MS, 99_000), (2 * MS, 1_000)])
    result = simulate([stream], SimConfig(params, seed=0, sigma=0.0))
    assert result.latency is not None
    assert result.latency.p99 == 10 * MS - 1 * MS
    assert math.isclose(
        result.latency.mean, (99_000 * 9 * MS + 1_000 * 8 * MS) / 100_000, rel_tol=1e-12
    )
