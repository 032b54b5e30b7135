"""Benchmark harness: baseline / per-operator / fused runs over scene suites."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .engine import ExecutionPlan, Mode
from .frontend import FrontendModel, parse_model_spec
from .geometry import MOTIONS, PipelineResult, SyntheticScene, TrackerConfig, generate_scene, render_frames, run_pipeline
from .quant import QuantConfig, ScaleParams

METHODS = ("baseline", "qat_peroperator", "qat_fused")
RESULT_COLUMNS = [
    "method", "scene", "rep", "ate_m", "fps", "p50_ms", "p95_ms", "p99_ms", "ttfp_ms",
    "peak_alloc_gb", "peak_reserved_gb", "pass_count", "bytes_read", "bytes_written",
]
TIMING_COLUMNS = ("fps", "p50_ms", "p95_ms", "p99_ms", "ttfp_ms")
STANDARD_SUITE = (
    "orbit:1:60", "orbit:2:60", "line:1:60", "line:2:60", "random-walk:1:60", "random-walk:2:60",
)
GB = float(1 << 30)


class BenchError(ValueError):
    pass


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample (1-based)."""
    xs = sorted(samples)
    if not xs:
        raise BenchError("percentile of an empty sample")
    if not 0 <= p <= 100:
        raise BenchError(f"percentile must be in [0, 100], got {p}")
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return xs[rank - 1]


@dataclass(frozen=True)
class SceneSpec:
    motion: str
    seed: int
    n_frames: int = 60

    @classmethod
    def parse(cls, text: str) -> "SceneSpec":
        """``motion:seed[:n_frames]``, e.g. ``orbit:1:60``; a ``scene:`` prefix is accepted."""
        parts = text.split(":")
        if parts[0] == "scene":
            parts = parts[1:]
        if len(parts) not in (2, 3) or parts[0] not in MOTIONS:
            raise BenchError(f"scene must look like <{'|'.join(MOTIONS)}>:<seed>[:<frames>], got {text!r}")
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError:
            raise BenchError(f"scene seed/frames must be integers: {text!r}") from None
        return cls(parts[0], *nums)

    @property
    def name(self) -> str:
        return f"{self.motion}:{self.seed}:{self.n_frames}"

    def build(self) -> SyntheticScene:
        return generate_scene(self.seed, self.n_frames, self.motion)


def resolve_suite(scenes) -> list[SceneSpec]:
    if scenes == "standard":
        scenes = STANDARD_SUITE
    if isinstance(scenes, str):
        scenes = [scenes]
    return [s if isinstance(s, SceneSpec) else SceneSpec.parse(s) for s in scenes]


@dataclass
class BenchConfig:
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    scenes: list[str] | str = "standard"
    warmup_frames: int = 5
    repetitions: int = 1
    model: str = "toy:small:7"
    scales: str | None = None
    csv_out: str | None = None
    json_out: str | None = None
    markdown_out: str | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise BenchError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.warmup_frames < 0:
            raise BenchError(f"warmup_frames must be >= 0, got {self.warmup_frames}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise BenchError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise BenchError(f"unknown bench config keys: {unknown}")
        return cls(**d)


@dataclass
class BenchResult:
    method: str
    scene: str
    rep: int
    ate_m: float
    fps: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    ttfp_ms: float
    peak_alloc_gb: float
    peak_reserved_gb: float
    pass_count: int
    bytes_read: int
    bytes_written: int
    fps_total: float = 0.0

    @property
    def bytes_moved(self) -> int:
        return self.bytes_read + self.bytes_written

    def csv_row(self) -> dict:
        return {
            "method": self.method,
            "scene": self.scene,
            "rep": self.rep,
            "ate_m": f"{self.ate_m:.9f}",
            "fps": f"{self.fps:.3f}",
            "p50_ms": f"{self.p50_ms:.4f}",
            "p95_ms": f"{self.p95_ms:.4f}",
            "p99_ms": f"{self.p99_ms:.4f}",
            "ttfp_ms": f"{self.ttfp_ms:.4f}",
            "peak_alloc_gb": f"{self.peak_alloc_gb:.6f}",
            "peak_reserved_gb": f"{self.peak_reserved_gb:.6f}",
            "pass_count": self.pass_count,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
        }


def method_plan(method: str) -> ExecutionPlan:
    return ExecutionPlan(mode=Mode.PER_OPERATOR if method == "qat_peroperator" else Mode.FUSED)


def summarize_run(method: str, scene_name: str, res: PipelineResult, warmup: int) -> BenchResult:
    """Metrics row for one pipeline run; the first ``warmup`` frames are excluded from steady state."""
    if warmup >= len(res.frame_ns):
        raise BenchError(f"warmup_frames={warmup} leaves no steady-state frames in {scene_name}")
    steady_ms = [ns / 1e6 for ns in res.frame_ns[warmup:]]
    t = res.trace
    return BenchResult(
        method=method,
        scene=scene_name,
        rep=1,
        ate_m=res.ate,
        fps=len(steady_ms) / (sum(steady_ms) / 1e3),
        p50_ms=percentile(steady_ms, 50),
        p95_ms=percentile(steady_ms, 95),
        p99_ms=percentile(steady_ms, 99),
        ttfp_ms=res.ttfp_ns / 1e6,
        peak_alloc_gb=t.peak_allocated / GB,
        peak_reserved_gb=t.peak_reserved / GB,
        pass_count=t.pass_count,
        bytes_read=t.bytes_read,
        bytes_written=t.bytes_written,
        fps_total=len(res.frame_ns) / (sum(res.frame_ns) / 1e9),
    )


def measure_run(method, scene_spec, scene, rendered, model, scales, qcfg, warmup, tracker) -> BenchResult:
    res = run_pipeline(model, scales if method != "baseline" else None, method_plan(method), scene,
                       cfg=qcfg, rendered=rendered, tracker=tracker)
    return summarize_run(method, scene_spec.name, res, warmup)


def _median_result(runs: list[BenchResult]) -> BenchResult:
    if len(runs) == 1:
        return runs[0]
    out = {}
    for f in fields(BenchResult):
        vals = [getattr(r, f.name) for r in runs]
        if f.name in ("method", "scene"):
            out[f.name] = vals[0]
        elif f.name == "rep":
            out[f.name] = len(runs)
        elif isinstance(vals[0], int):
            out[f.name] = int(np.median(vals))
        else:
            out[f.name] = float(np.median(vals))
    return BenchResult(**out)


def run_bench(cfg: BenchConfig, model: FrontendModel | None = None,
              scales: dict[str, ScaleParams] | None = None, qcfg: QuantConfig | None = None,
              tracker: TrackerConfig = TrackerConfig(), progress=None) -> list[BenchResult]:
    """One median-over-repetitions result per (method, scene), methods outermost."""
    needs_scales = any(m != "baseline" for m in cfg.methods)
    if needs_scales and scales is None:
        if cfg.scales is None:
            raise BenchError("QAT methods need a scales checkpoint (config key 'scales')")
        path = Path(cfg.scales)
        if not path.exists():
            raise BenchError(f"scales checkpoint not found: {path}")
        from .distill import load_scales

        scales, stored = load_scales(path, with_config=True)
        qcfg = qcfg or stored
    model = model if model is not None else parse_model_spec(cfg.model)
    suite = resolve_suite(cfg.scenes)
    prepared = []
    for spec in suite:
        scene = spec.build()
        prepared.append((spec, scene, render_frames(scene)))
    results = []
    for method in cfg.methods:
        for spec, scene, rendered in prepared:
            runs = []
            for _ in range(cfg.repetitions):
                runs.append(measure_run(method, spec, scene, rendered, model, scales, qcfg,
                                        cfg.warmup_frames, tracker))
            r = _median_result(runs)
            results.append(r)
            if progress:
                progress(r)
    return results


# -- reports ------------------------------------------------------------------

def results_to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.csv_row())
    return buf.getvalue()


def results_from_csv(text: str) -> list[BenchResult]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != RESULT_COLUMNS:
        raise BenchError(f"results CSV schema mismatch: expected {RESULT_COLUMNS}, got {reader.fieldnames}")
    out = []
    for row in reader:
        vals = {}
        for k, v in row.items():
            if k in ("method", "scene"):
                vals[k] = v
            elif k in ("rep", "pass_count", "bytes_read", "bytes_written"):
                vals[k] = int(v)
            else:
                vals[k] = float(v)
        out.append(BenchResult(**vals))
    return out


def results_to_json(results: list[BenchResult]) -> str:
    return json.dumps([asdict(r) for r in results], indent=2)


def results_from_json(text: str) -> list[BenchResult]:
    return [BenchResult(**d) for d in json.loads(text)]


_MD_COLUMNS = [
    ("ATE (m)", "ate_m", "{:.4f}"),
    ("FPS", "fps", "{:.1f}"),
    ("P50 (ms)", "p50_ms", "{:.2f}"),
    ("P95 (ms)", "p95_ms", "{:.2f}"),
    ("P99 (ms)", "p99_ms", "{:.2f}"),
    ("TTFP (ms)", "ttfp_ms", "{:.1f}"),
    ("Alloc (GB)", "peak_alloc_gb", "{:.6f}"),
    ("Reserved (GB)", "peak_reserved_gb", "{:.6f}"),
    ("Passes", "pass_count", "{:d}"),
    ("Bytes moved", "bytes_moved", "{:d}"),
]


def _fmt(fmt: str, v) -> str:
    return fmt.format(int(v)) if fmt == "{:d}" else fmt.format(v)


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def _delta_rows(pairs) -> list[list[str]]:
    rows = []
    for label, scene, a, b in pairs:
        cells = [scene, label]
        for _, key, fmt in _MD_COLUMNS:
            va, vb = getattr(a, key), getattr(b, key)
            d = vb - va
            pct = f" ({100.0 * d / va:+.1f}%)" if va else ""
            sign = "+" if d >= 0 else "-"
            cells.append(sign + _fmt(fmt, abs(d)) + pct)
        rows.append(cells)
    return rows


def results_to_markdown(results: list[BenchResult]) -> str:
    """Absolute table plus deltas of each QAT method against the baseline."""
    header = ["Scene", "Method"] + [c[0] for c in _MD_COLUMNS]
    scenes = list(dict.fromkeys(r.scene for r in results))
    by_key = {(r.method, r.scene): r for r in results}
    abs_rows = []
    for scene in scenes:
        for method in METHODS:
            r = by_key.get((method, scene))
            if r is not None:
                abs_rows.append([scene, method] + [_fmt(fmt, getattr(r, key)) for _, key, fmt in _MD_COLUMNS])
    lines = ["## Absolute", ""] + _table(header, abs_rows)
    pairs = []
    for scene in scenes:
        base = by_key.get(("baseline", scene))
        for method in METHODS[1:]:
            r = by_key.get((method, scene))
            if base is not None and r is not None:
                pairs.append((f"{method} - baseline", scene, base, r))
    if pairs:
        lines += ["", "## Delta vs baseline", ""] + _table(["Scene", "Delta"] + [c[0] for c in _MD_COLUMNS],
                                                          _delta_rows(pairs))
    return "\n".join(lines) + "\n"


def compare(a: list[BenchResult], b: list[BenchResult]) -> str:
    """Markdown deltas (b - a) for every (method, scene) present in both result sets."""
    ka = {(r.method, r.scene): r for r in a}
    kb = {(r.method, r.scene): r for r in b}
    common = [k for k in ka if k in kb]
    if not common:
        raise BenchError("result sets share no (method, scene) rows")
    pairs = [(k[0], k[1], ka[k], kb[k]) for k in common]
    header = ["Scene", "Method"] + [c[0] for c in _MD_COLUMNS]
    return "\n".join(["## Delta (b - a)", ""] + _table(header, _delta_rows(pairs))) + "\n"


def emit_report(results: list[BenchResult], fmt: str, path) -> None:
    render = {"csv": results_to_csv, "json": results_to_json, "markdown": results_to_markdown}
    if fmt not in render:
        raise BenchError(f"format must be one of {sorted(render)}, got {fmt!r}")
    path = Path(path)
    try:
        path.write_text(render[fmt](results))
    except OSError as e:
        raise BenchError(f"cannot write report {path}: {e}") from e
