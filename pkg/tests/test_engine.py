from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import MIB, layer_io_shapes, schedule, simulate
from quantfuse.engine import (
    TRACE_COLUMNS, ArenaAllocator, ExecutionPlan, ExecutionTrace, FusedPathError, LayerTrace, Mode,
    PrecisionPolicy, run_frontend, run_quant_conv, trace_report, traces_to_csv, traces_to_json,
)
from quantfuse.frontend import FrontendModel, build_toy_patchifier, calibration_image, inject_qat
from quantfuse.quant import QuantConfig, ScaleParams, fake_quantize, softplus_inv
from quantfuse.tensor import Tensor, conv2d

FIXTURES = Path(__file__).parent / "fixtures"
PER_OP = ExecutionPlan(mode=Mode.PER_OPERATOR)
FUSED = ExecutionPlan(mode=Mode.FUSED)


@pytest.fixture(scope="module")
def qmodel():
    return inject_qat(build_toy_patchifier(7, "small"))


def single_layer(seed=0, c_in=3, c_out=4, k=3, stride=1, padding=1):
    m = build_toy_patchifier(seed, "small")
    layer = m.layer("res1a")
    rng = np.random.default_rng(seed)
    from dataclasses import replace

    w = rng.normal(size=(c_out, c_in, k, k)).astype(np.float32)
    sp = ScaleParams(softplus_inv(np.abs(w).reshape(c_out, -1).max(1) / 127), float(softplus_inv(0.02)))
    return replace(layer, weight=Tensor(w), stride=stride, padding=padding, scale_params=sp,
                   cfg=QuantConfig(), quantized=True, gamma=np.ones(c_out, np.float32),
                   beta=np.zeros(c_out, np.float32))


def test_single_layer_pass_counts():
    layer = single_layer()
    x = Tensor(np.random.default_rng(1).normal(size=(3, 8, 8)))
    _, lt_p = run_quant_conv(PER_OP, layer, x, ArenaAllocator())
    _, lt_f = run_quant_conv(FUSED, layer, x, ArenaAllocator())
    assert lt_p.passes == 9 + 1
    assert lt_f.passes == 3 + 1
    assert lt_p.sweeps == ["scales", "act.div", "act.clip", "act.round", "act.mul",
                           "weight.div", "weight.clip", "weight.round", "weight.mul", "conv"]
    assert lt_f.sweeps == ["scales", "act.fq", "weight.fq", "conv"]


def test_single_layer_matches_reference_composition():
    layer = single_layer()
    x = Tensor(np.random.default_rng(2).normal(size=(3, 8, 8)))
    from quantfuse.quant import resolve_scale

    s_a = resolve_scale(layer.scale_params.log_a_scale, layer.cfg)
    s_w = resolve_scale(layer.scale_params.log_w_scale, layer.cfg)
    qa = fake_quantize(x, s_a, layer.cfg)
    qw = fake_quantize(layer.weight, s_w, layer.cfg)
    want = conv2d(qa, qw, layer.stride, layer.padding)
    for plan in (PER_OP, FUSED):
        out, _ = run_quant_conv(plan, layer, x, ArenaAllocator())
        assert out.equals(want)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), c_in=st.integers(1, 4), c_out=st.integers(1, 4),
       k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2), scale=st.floats(1e-3, 2.0))
def test_fused_and_per_operator_bit_identical_on_random_layers(seed, c_in, c_out, k, stride, scale):
    from dataclasses import replace

    layer = single_layer(seed, c_in, c_out, k, stride, k // 2)
    layer = replace(layer, scale_params=ScaleParams(layer.scale_params.log_w_scale, float(softplus_inv(scale))))
    x = Tensor(np.random.default_rng(seed + 1).normal(scale=50, size=(c_in, 9, 7)))
    a, _ = run_quant_conv(PER_OP, layer, x, ArenaAllocator())
    b, _ = run_quant_conv(FUSED, layer, x, ArenaAllocator())
    assert a.equals(b)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("width", ["small", "base"])
def test_fused_and_per_operator_bit_identical_on_models(seed, width):
    m = inject_qat(build_toy_patchifier(seed, width))
    img = calibration_image(seed + 10, (3, 32, 48))
    fp, ip, _ = run_frontend(PER_OP, m, img)
    ff, i_f, _ = run_frontend(FUSED, m, img)
    assert fp.equals(ff) and ip.equals(i_f)


def test_half_activation_policy_also_identical(qmodel):
    img = calibration_image(3, (3, 32, 32))
    for half_w in (False, True):
        plans = [ExecutionPlan(mode=m, precision_policy=PrecisionPolicy.HALF_ACTIVATIONS, half_weights=half_w)
                 for m in (Mode.PER_OPERATOR, Mode.FUSED)]
        (f1, i1, _), (f2, i2, _) = [run_frontend(p, qmodel, img) for p in plans]
        assert f1.equals(f2) and i1.equals(i2)
        full, _, _ = run_frontend(FUSED, qmodel, img)
        assert not full.equals(f2)


def test_parallel_kernels_identical(qmodel, monkeypatch):
    img = calibration_image(4, (3, 32, 32))
    seq, _, _ = run_frontend(FUSED, qmodel, img)
    monkeypatch.setenv("QUANTFUSE_THREADS", "2")
    par, _, _ = run_frontend(FUSED, qmodel, img)
    assert seq.equals(par)


def test_threads_env_must_be_integer(qmodel, monkeypatch):
    monkeypatch.setenv("QUANTFUSE_THREADS", "many")
    with pytest.raises(ValueError, match="QUANTFUSE_THREADS"):
        run_frontend(FUSED, qmodel, calibration_image(0, (3, 16, 16)))


def test_fault_injection_falls_back_bit_identically(qmodel):
    img = calibration_image(5, (3, 32, 32))
    ref, ref_i, _ = run_frontend(PER_OP, qmodel, img)
    f, i, tr = run_frontend(ExecutionPlan(mode=Mode.FUSED, inject_fault=True), qmodel, img)
    assert f.equals(ref) and i.equals(ref_i)
    assert tr.fell_back
    assert all(lt.fell_back for lt in tr.per_layer)
    assert trace_report(tr)["fell_back"] == 1


def test_fault_without_fallback_raises(qmodel):
    arena = ArenaAllocator()
    plan = ExecutionPlan(mode=Mode.FUSED, inject_fault=True, fallback_enabled=False)
    with pytest.raises(FusedPathError):
        run_frontend(plan, qmodel, calibration_image(0, (3, 16, 16)), arena)
    # the failed attempt returned its blocks
    assert arena.live_bytes == 0


@pytest.mark.parametrize("shape", [(3, 64, 64), (3, 32, 48), (3, 128, 128)])
def test_counters_match_schedule_oracle(qmodel, shape):
    img = calibration_image(0, shape)
    for mode in ("peroperator", "fused"):
        arena = ArenaAllocator()
        _, _, tr = run_frontend(ExecutionPlan(mode=mode), qmodel, img, arena)
        passes, br, bw, peak_live, peak_res = simulate(qmodel, shape, mode)
        assert (tr.pass_count, tr.bytes_read, tr.bytes_written) == (passes, br, bw)
        assert (tr.peak_allocated, tr.peak_reserved) == (peak_live, peak_res)
        assert [s for lt in tr.per_layer for s in lt.sweeps] == [s[0] for s in schedule(qmodel, shape, mode)]


def test_counters_over_many_frames_with_small_blocks(qmodel):
    shape = (3, 32, 32)
    img = calibration_image(0, shape)
    for mode in ("peroperator", "fused"):
        arena = ArenaAllocator(block_size=4096)
        total = ExecutionTrace()
        for _ in range(3):
            _, _, tr = run_frontend(ExecutionPlan(mode=mode), qmodel, img, arena)
            total = total + tr
        passes, br, bw, peak_live, peak_res = simulate(qmodel, shape, mode, frames=3, block=4096)
        assert (total.pass_count, total.bytes_read, total.bytes_written) == (passes, br, bw)
        assert (total.peak_allocated, total.peak_reserved) == (peak_live, peak_res)
        assert total.frames == 3


def test_pass_ratio_and_bytes_on_toy_roster(qmodel):
    img = calibration_image(0, (3, 64, 64))
    _, _, p = run_frontend(PER_OP, qmodel, img)
    _, _, f = run_frontend(FUSED, qmodel, img)
    assert len(qmodel.layers) == 10
    assert p.pass_count / f.pass_count == 2.5
    assert p.bytes_read > 2.5 * f.bytes_read
    assert p.peak_reserved > f.peak_reserved
    assert p.peak_reserved >= p.peak_allocated and f.peak_reserved >= f.peak_allocated


def test_float_model_bypasses_arena():
    m = build_toy_patchifier(0)
    arena = ArenaAllocator()
    _, _, tr = run_frontend(FUSED, m, calibration_image(0, (3, 16, 16)), arena)
    assert tr.mode == "baseline"
    assert tr.pass_count == 10
    assert arena.peak_reserved == 0


def test_zero_layer_model_is_identity():
    m = FrontendModel((), graph=())
    img = calibration_image(0, (3, 8, 8))
    f, i, tr = run_frontend(FUSED, m, img)
    assert f.equals(img) and i.equals(img)
    assert tr.pass_count == 0 and tr.bytes_read == 0 and tr.per_layer == []


def test_weight_cache_skips_weight_sweeps(qmodel):
    img = calibration_image(0, (3, 16, 16))
    plan = ExecutionPlan(mode=Mode.FUSED, cache_weights=True)
    cache = {}
    arena = ArenaAllocator()
    f1, _, t1 = run_frontend(plan, qmodel, img, arena, cache)
    f2, _, t2 = run_frontend(plan, qmodel, img, arena, cache)
    assert f1.equals(f2)
    assert t1.pass_count == 40 and t2.pass_count == 30


# -- arena --------------------------------------------------------------------

def test_arena_rounds_up_and_reuses_best_fit():
    a = ArenaAllocator(block_size=100)
    b1 = a.alloc(250)
    b2 = a.alloc(50)
    assert (b1.capacity, b2.capacity) == (300, 100)
    assert a.reserved_bytes == 400 and a.live_bytes == 300
    a.free(b1)
    a.free(b2)
    assert a.reserved_bytes == 400 and a.live_bytes == 0
    b3 = a.alloc(80)
    assert b3 is b2
    b4 = a.alloc(120)
    assert b4 is b1
    assert a.reserved_bytes == 400
    assert a.peak_allocated == 300


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 5000)), max_size=40))
def test_arena_reserved_monotone_and_covers_live(ops):
    a = ArenaAllocator(block_size=1024)
    live = []
    last_reserved = 0
    for do_alloc, n in ops:
        if do_alloc or not live:
            live.append(a.alloc(n))
        else:
            a.free(live.pop(n % len(live)))
        assert a.reserved_bytes >= last_reserved
        assert a.reserved_bytes % 1024 == 0
        assert a.reserved_bytes >= a.live_bytes
        last_reserved = a.reserved_bytes
    assert a.peak_reserved >= a.peak_allocated


def test_arena_check_drained():
    a = ArenaAllocator()
    b = a.alloc(10)
    with pytest.raises(RuntimeError, match="not drained"):
        a.check_drained()
    a.free(b)
    a.check_drained()
    with pytest.raises(ValueError):
        ArenaAllocator(0)


def test_default_block_is_one_mib():
    assert ArenaAllocator().block_size == MIB


# -- traces -------------------------------------------------------------------

def test_empty_trace_report_is_all_zero():
    r = trace_report(ExecutionTrace())
    assert list(r) == TRACE_COLUMNS
    assert all(v in (0, "", 0.0) for v in r.values())


def test_trace_addition_sums_counters_and_maxes_peaks():
    a = ExecutionTrace("fused", 1, 4, 10, 20, 100, 200, 5, False)
    b = ExecutionTrace("fused", 2, 6, 1, 2, 300, 150, 7, True)
    c = a + b
    assert (c.frames, c.pass_count, c.bytes_read, c.bytes_written) == (3, 10, 11, 22)
    assert (c.peak_allocated, c.peak_reserved, c.wall_clock_ns, c.fell_back) == (300, 200, 12, True)
    assert (ExecutionTrace() + a).pass_count == a.pass_count
    assert (a + ExecutionTrace("peroperator")).mode == "mixed"


def test_layer_trace_sweep_accounting():
    lt = LayerTrace("x")
    lt.sweep("a", 8, 4)
    lt.sweep("b", 2, 2)
    assert (lt.passes, lt.bytes_read, lt.bytes_written, lt.sweeps) == (2, 10, 6, ["a", "b"])


def golden_trace():
    return ExecutionTrace(mode="peroperator", frames=3, pass_count=300, bytes_read=123456,
                          bytes_written=65432, peak_allocated=4096, peak_reserved=3 * MIB,
                          wall_clock_ns=2_500_000, fell_back=True)


def test_trace_csv_matches_golden_fixture():
    rows = [trace_report(golden_trace(), seq=0), trace_report(ExecutionTrace(mode="fused"), seq=1)]
    assert traces_to_csv(rows) == (FIXTURES / "trace_golden.csv").read_text()


def test_trace_json_mirrors_csv_keys():
    import json

    rows = json.loads(traces_to_json([trace_report(golden_trace())]))
    assert list(rows[0]) == TRACE_COLUMNS
    assert rows[0]["wall_ms"] == 2.5


def test_plan_coerces_strings():
    p = ExecutionPlan(mode="peroperator", precision_policy="half_activations")
    assert p.mode is Mode.PER_OPERATOR and p.precision_policy is PrecisionPolicy.HALF_ACTIVATIONS
    with pytest.raises(ValueError):
        ExecutionPlan(mode="turbo")


def test_layer_shapes_helper_matches_engine(qmodel):
    img = calibration_image(0, (3, 64, 64))
    rec = {}
    qmodel.walk(img, lambda l, x: Tensor.wrap(conv2d(x, l.weight, l.stride, l.padding).data), rec)
    for layer, _, _, out_shape in layer_io_shapes(qmodel, img.shape):
        node = next(n[1] for n in qmodel.graph if n[0] == "conv" and n[2] == layer.name)
        assert rec[node].shape == out_shape
