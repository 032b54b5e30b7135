"""Execution of fake-quantized convolutions under per-operator or fused plans.

Both plans share scale resolution and the convolution itself; they differ
only in how fake quantization is scheduled:

* per-operator: divide, clip, round and multiply run as four separate sweeps,
  each writing a freshly allocated intermediate from the arena;
* fused: one sweep per tensor computes the whole quantize-dequantize.

Every sweep is recorded in an :class:`ExecutionTrace` with a byte-traffic
model in which a sweep reads each of its inputs once and writes its output
once (4 bytes per element; half values live in float32 storage). The
convolution counts as a pass but carries no modeled traffic: it is the same
call in every plan, so byte counters cover only the fake-quantization path
that the plans change. The arena
only serves the fake-quantization path: scale buffers, intermediates and
the quantized operands handed to the convolution.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .quant import resolve_scale
from .tensor import HALF_MAX, Precision, Tensor, TensorError, conv2d_array

log = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 1 << 20
ITEM = 4

TRACE_COLUMNS = [
    "seq", "mode", "frames", "pass_count", "bytes_read", "bytes_written",
    "peak_alloc", "peak_reserved", "wall_ms", "fell_back",
]


class Mode(str, enum.Enum):
    PER_OPERATOR = "peroperator"
    FUSED = "fused"


class PrecisionPolicy(str, enum.Enum):
    FULL_ONLY = "full"
    HALF_ACTIVATIONS = "half_activations"


class FusedPathError(RuntimeError):
    """Raised from the fused path (also used for fault injection)."""


class NonFiniteError(ValueError):
    """A layer produced non-finite activations."""


@dataclass(frozen=True)
class ExecutionPlan:
    mode: Mode = Mode.FUSED
    precision_policy: PrecisionPolicy = PrecisionPolicy.FULL_ONLY
    fallback_enabled: bool = True
    cache_weights: bool = False
    half_weights: bool = False
    inject_fault: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "precision_policy", PrecisionPolicy(self.precision_policy))


# -- arena ------------------------------------------------------------------

@dataclass(eq=False)
class Block:
    id: int
    capacity: int
    nbytes: int = 0
    buf: np.ndarray = field(default=None, repr=False)

    def view(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return self.buf[: n * ITEM].view(np.float32).reshape(shape)


class ArenaAllocator:
    """Two-tier pool: live bytes vs bytes reserved in reusable blocks.

    Requests round up to whole multiples of ``block_size``. Freed blocks go
    back to the pool; reserved memory never shrinks. A request takes the
    smallest free block that fits (lowest id on ties), otherwise a new block
    is reserved.
    """

    def __init__(self, block_size: int = DEFAULT_BLOCK_SIZE):
        if block_size <= 0:
            raise ValueError("block_size must be positive")
        self.block_size = block_size
        self._free: list[Block] = []
        self._next_id = 0
        self.live_bytes = 0
        self.reserved_bytes = 0
        self.peak_allocated = 0
        self.peak_reserved = 0
        self.n_allocs = 0

    def _round(self, nbytes: int) -> int:
        blocks = max(1, -(-nbytes // self.block_size))
        return blocks * self.block_size

    def alloc(self, nbytes: int) -> Block:
        need = self._round(nbytes)
        best = None
        for b in self._free:
            if b.capacity >= need and (best is None or (b.capacity, b.id) < (best.capacity, best.id)):
                best = b
        if best is None:
            best = Block(self._next_id, need, buf=np.empty(need, dtype=np.uint8))
            self._next_id += 1
            self.reserved_bytes += need
            self.peak_reserved = max(self.peak_reserved, self.reserved_bytes)
        else:
            self._free.remove(best)
        best.nbytes = nbytes
        self.live_bytes += nbytes
        self.peak_allocated = max(self.peak_allocated, self.live_bytes)
        self.n_allocs += 1
        return best

    def free(self, block: Block) -> None:
        self.live_bytes -= block.nbytes
        block.nbytes = 0
        self._free.append(block)

    def check_drained(self) -> None:
        if self.live_bytes != 0:
            raise RuntimeError(f"arena not drained: {self.live_bytes} live bytes")


# -- traces -----------------------------------------------------------------

@dataclass
class LayerTrace:
    name: str
    passes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    wall_ns: int = 0
    fell_back: bool = False
    scale_precision: Precision = Precision.FULL
    sweeps: list[str] = field(default_factory=list)

    def sweep(self, label: str, read: int, written: int) -> None:
        self.passes += 1
        self.bytes_read += read
        self.bytes_written += written
        self.sweeps.append(label)


@dataclass
class ExecutionTrace:
    mode: str = ""
    frames: int = 0
    pass_count: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    peak_allocated: int = 0
    peak_reserved: int = 0
    wall_clock_ns: int = 0
    fell_back: bool = False
    per_layer: list[LayerTrace] = field(default_factory=list)

    @property
    def bytes_moved(self) -> int:
        return self.bytes_read + self.bytes_written

    def add_layer(self, lt: LayerTrace) -> None:
        self.per_layer.append(lt)
        self.pass_count += lt.passes
        self.bytes_read += lt.bytes_read
        self.bytes_written += lt.bytes_written
        self.wall_clock_ns += lt.wall_ns
        self.fell_back = self.fell_back or lt.fell_back

    def __add__(self, other: "ExecutionTrace") -> "ExecutionTrace":
        if self.mode and other.mode and self.mode != other.mode:
            mode = "mixed"
        else:
            mode = self.mode or other.mode
        return ExecutionTrace(
            mode=mode,
            frames=self.frames + other.frames,
            pass_count=self.pass_count + other.pass_count,
            bytes_read=self.bytes_read + other.bytes_read,
            bytes_written=self.bytes_written + other.bytes_written,
            peak_allocated=max(self.peak_allocated, other.peak_allocated),
            peak_reserved=max(self.peak_reserved, other.peak_reserved),
            wall_clock_ns=self.wall_clock_ns + other.wall_clock_ns,
            fell_back=self.fell_back or other.fell_back,
            per_layer=self.per_layer + other.per_layer,
        )


# -- thread control -----------------------------------------------------------

def configured_threads() -> int:
    """Parallelism cap from ``QUANTFUSE_THREADS`` (0 = sequential)."""
    raw = os.environ.get("QUANTFUSE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"QUANTFUSE_THREADS must be an integer, got {raw!r}") from None
    return max(0, n)


def _fused_kernels():
    n = configured_threads()
    if n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        return _kernels.fq_tensor_parallel, _kernels.fq_channels_parallel
    return _kernels.fq_tensor, _kernels.fq_channels


# -- per-layer execution --------------------------------------------------------

def _demote(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, -HALF_MAX, HALF_MAX).astype(np.float16).astype(np.float32)


class _Run:
    """Bookkeeping for one attempt at a layer (so a failed attempt can be undone)."""

    def __init__(self, arena: ArenaAllocator, lt: LayerTrace):
        self.arena = arena
        self.lt = lt
        self.blocks: list[Block] = []

    def alloc(self, shape) -> tuple[Block, np.ndarray]:
        b = self.arena.alloc(int(np.prod(shape)) * ITEM)
        self.blocks.append(b)
        return b, b.view(shape)

    def release(self, b: Block) -> None:
        self.blocks.remove(b)
        self.arena.free(b)

    def release_all(self) -> None:
        for b in reversed(self.blocks):
            self.arena.free(b)
        self.blocks.clear()


def _resolve_scales(run: _Run, layer) -> tuple[Block, np.float32, np.ndarray]:
    c = layer.scale_params.n_channels
    blk, sv = run.alloc((c + 1,))
    sv[:] = resolve_scale(layer.scale_params.flat(), layer.cfg)
    run.lt.sweep("scales", ITEM * (c + 1), ITEM * (c + 1))
    return blk, sv[c], sv[:c]


def _fq_per_operator(run: _Run, x: np.ndarray, s, q: np.float32, label: str, half_out: bool) -> Block:
    n = x.size
    sb = ITEM * (1 if np.ndim(s) == 0 else np.size(s))
    sc = s if np.ndim(s) == 0 else np.reshape(s, (-1,) + (1,) * (x.ndim - 1))
    b1, t1 = run.alloc(x.shape)
    np.divide(x, sc, out=t1)
    run.lt.sweep(f"{label}.div", ITEM * n + sb, ITEM * n)
    b2, t2 = run.alloc(x.shape)
    np.clip(t1, -q, q, out=t2)
    run.lt.sweep(f"{label}.clip", ITEM * n, ITEM * n)
    run.release(b1)
    b3, t3 = run.alloc(x.shape)
    np.rint(t2, out=t3)
    run.lt.sweep(f"{label}.round", ITEM * n, ITEM * n)
    run.release(b2)
    b4, t4 = run.alloc(x.shape)
    np.multiply(t3, sc, out=t4)
    run.lt.sweep(f"{label}.mul", ITEM * n + sb, ITEM * n)
    run.release(b3)
    if half_out:
        t4[...] = _demote(t4)
        run.lt.sweep(f"{label}.demote", ITEM * n, ITEM * n)
    return b4


def _fq_fused(run: _Run, x: np.ndarray, s, q: np.float32, label: str, half_out: bool) -> Block:
    fq_tensor, fq_channels = _fused_kernels()
    n = x.size
    b, out = run.alloc(x.shape)
    if np.ndim(s) == 0:
        fq_tensor(x.reshape(-1), np.float32(s), q, out.reshape(-1))
        sb = ITEM
    else:
        rows = x.shape[0]
        fq_channels(x.reshape(rows, -1), np.ascontiguousarray(s), q, out.reshape(rows, -1))
        sb = ITEM * rows
    run.lt.sweep(f"{label}.fq", ITEM * n + sb, ITEM * n)
    if half_out:
        out[...] = _demote(out)
        run.lt.sweep(f"{label}.demote", ITEM * n, ITEM * n)
    return b


def _quant_conv_attempt(plan: ExecutionPlan, mode: Mode, layer, x: np.ndarray,
                        arena: ArenaAllocator, weight_cache, lt: LayerTrace) -> np.ndarray:
    run = _Run(arena, lt)
    try:
        fq = _fq_fused if mode is Mode.FUSED else _fq_per_operator
        half_act = plan.precision_policy is PrecisionPolicy.HALF_ACTIVATIONS
        half_w = half_act and plan.half_weights
        q = np.float32(layer.cfg.q_max)

        _, s_a, s_w = _resolve_scales(run, layer)
        if mode is Mode.FUSED and plan.inject_fault:
            raise FusedPathError(f"injected fault in fused kernel for layer {layer.name}")

        qa_blk = fq(run, x, s_a, q, "act", half_act)
        qa = qa_blk.view(x.shape)

        w = layer.weight.data
        cached = weight_cache.get(layer.name) if (plan.cache_weights and weight_cache is not None) else None
        if cached is not None:
            qw = cached
        else:
            if half_w:
                w = _demote(w)
                lt.sweep("weight.demote_in", ITEM * w.size, ITEM * w.size)
            qw_blk = fq(run, w, s_w, q, "weight", half_w)
            qw = qw_blk.view(w.shape)
            if plan.cache_weights and weight_cache is not None:
                weight_cache[layer.name] = qw.copy()

        out = conv2d_array(qa, qw, layer.stride, layer.padding)
        lt.sweep("conv", 0, 0)
        return out
    finally:
        run.release_all()


def run_quant_conv(plan: ExecutionPlan, layer, input: Tensor, arena: ArenaAllocator,
                   weight_cache: dict | None = None) -> tuple[Tensor, LayerTrace]:
    """Fake-quantize activations and weights of ``layer`` and convolve.

    Per-operator plans run 1 + 4 + 4 elementwise sweeps plus the convolution;
    fused plans run 1 + 1 + 1 plus the convolution. With ``fallback_enabled``
    a failing fused attempt is rolled back and re-run per-operator.
    """
    t0 = time.perf_counter_ns()
    lt = LayerTrace(layer.name)
    x = input.data
    if plan.precision_policy is PrecisionPolicy.HALF_ACTIVATIONS:
        x = _demote(x)
        lt.sweep("act.demote_in", ITEM * x.size, ITEM * x.size)

    if not layer.quantized:
        out = conv2d_array(x, layer.weight.data, layer.stride, layer.padding)
        lt.sweep("conv", 0, 0)
    else:
        try:
            attempt = LayerTrace(layer.name, sweeps=[])
            out = _quant_conv_attempt(plan, plan.mode, layer, x, arena, weight_cache, attempt)
        except Exception as exc:
            if plan.mode is not Mode.FUSED or not plan.fallback_enabled:
                raise
            log.warning("fused path failed for %s (%s); falling back to per-operator", layer.name, exc)
            attempt = LayerTrace(layer.name, fell_back=True)
            out = _quant_conv_attempt(plan, Mode.PER_OPERATOR, layer, x, arena, weight_cache, attempt)
        for label in attempt.sweeps:
            lt.sweeps.append(label)
        lt.passes += attempt.passes
        lt.bytes_read += attempt.bytes_read
        lt.bytes_written += attempt.bytes_written
        lt.fell_back = attempt.fell_back

    lt.wall_ns = time.perf_counter_ns() - t0
    return Tensor.wrap(out), lt


class ExecutionContext:
    """Plan + arena + optional weight cache, reused across frames."""

    def __init__(self, plan: ExecutionPlan | None = None, arena: ArenaAllocator | None = None):
        self.plan = plan or ExecutionPlan()
        self.arena = arena or ArenaAllocator()
        self.weight_cache: dict = {}


def run_frontend(plan: ExecutionPlan, model, input: Tensor, arena: ArenaAllocator | None = None,
                 weight_cache: dict | None = None):
    """Run every conv of ``model`` through :func:`run_quant_conv`.

    Returns ``(features, descriptors, trace)`` for one frame. The arena must
    hold no live bytes afterwards; its reserved pool persists.
    """
    arena = arena if arena is not None else ArenaAllocator()
    configured_threads()  # validate before the fallback could mask a bad setting
    trace = ExecutionTrace(mode=plan.mode.value if model.n_quantized else "baseline", frames=1)

    def conv_fn(layer, x: Tensor) -> Tensor:
        out, lt = run_quant_conv(plan, layer, x, arena, weight_cache)
        trace.add_layer(lt)
        return out

    feats, desc = model.walk(input, conv_fn)
    arena.check_drained()
    trace.peak_allocated = arena.peak_allocated
    trace.peak_reserved = arena.peak_reserved
    return feats, desc, trace


# -- reports ------------------------------------------------------------------

def trace_report(trace: ExecutionTrace, seq: int = 0) -> dict:
    return {
        "seq": seq,
        "mode": trace.mode,
        "frames": trace.frames,
        "pass_count": trace.pass_count,
        "bytes_read": trace.bytes_read,
        "bytes_written": trace.bytes_written,
        "peak_alloc": trace.peak_allocated,
        "peak_reserved": trace.peak_reserved,
        "wall_ms": round(trace.wall_clock_ns / 1e6, 6),
        "fell_back": int(trace.fell_back),
    }


def traces_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def traces_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)
