"""Command-line entry point: ``quantfuse {train,eval,bench,compare}``.

Exit codes: 0 success, 2 configuration error, 3 training divergence (every
step skipped), 4 pipeline failure (insufficient matches on more than 20% of
frames).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import (
    METHODS, BenchConfig, BenchError, SceneSpec, compare, emit_report, method_plan, results_from_csv,
    results_to_csv, run_bench, summarize_run,
)
from .distill import (
    DistillConfig, TrainingError, frames_from_source, load_scales, save_scales, train_scales,
    write_training_log,
)
from .frontend import ModelError, inject_qat, parse_model_spec, strip_qat
from .geometry import GeometryError, InsufficientCorrespondences, run_pipeline, write_tum
from .quant import QuantConfig, QuantError
from .tensor import TensorError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PIPELINE = 0, 2, 3, 4
MAX_FAILURE_FRACTION = 0.2
MODES = {"baseline": "baseline", "peroperator": "qat_peroperator", "fused": "qat_fused"}

log = logging.getLogger("quantfuse")


class ConfigError(ValueError):
    pass


class _Unset:
    def __repr__(self) -> str:
        return "<unset>"


UNSET = _Unset()


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="JSON file of option values (keys are option names with underscores); flags win")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="quantfuse", formatter_class=fmt,
                                     description="Scale-only fake-quantized front-end: train, evaluate, benchmark.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("train", formatter_class=fmt, help="learn quantization scales against the float model")
    p.add_argument("--model", default="toy:small:7", help="toy:<small|base>:<seed> or a model checkpoint path")
    p.add_argument("--scales-out", default="scales.qscl", help="output scales checkpoint")
    p.add_argument("--log-out", default=None, help="training-log CSV; unset means <scales-out>.log.csv")
    p.add_argument("--steps", type=int, default=200, help="optimizer steps (>= 1)")
    p.add_argument("--seed", type=int, default=0, help="chunk-order seed")
    p.add_argument("--lambda-cos", type=float, default=1.0, help="weight of the cosine terms")
    p.add_argument("--chunk-len", type=int, default=4, help="frames per optimizer step")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--source", default="scene:orbit:7:48",
                   help="training frames: scene:<motion>:<seed>:<n> or noise:<seed>:<n>")
    p.add_argument("--frame-size", type=int, default=64, help="training frame width and height in pixels")
    _add_config(p)
    subs["train"] = p

    p = sub.add_parser("eval", formatter_class=fmt, help="run the pipeline on one scene and report ATE")
    p.add_argument("--model", default="toy:small:7", help="toy:<small|base>:<seed> or a model checkpoint path")
    p.add_argument("--scales", default=None, help="scales checkpoint (required unless --mode baseline)")
    p.add_argument("--mode", default="fused", choices=sorted(MODES), help="execution path")
    p.add_argument("--scene", default="orbit:1:60", help="<motion>:<seed>[:<frames>]")
    p.add_argument("--traj-out", default="trajectory.tum", help="TUM trajectory output")
    p.add_argument("--metrics-out", default=None, help="single-row metrics CSV; unset means <traj-out>.csv")
    p.add_argument("--warmup-frames", type=int, default=5, help="frames excluded from steady-state timing")
    _add_config(p)
    subs["eval"] = p

    p = sub.add_parser("bench", formatter_class=fmt, help="run the baseline / per-operator / fused triad")
    p.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS, help="methods to run")
    p.add_argument("--scenes", nargs="+", default=["standard"],
                   help="'standard' or a list of <motion>:<seed>[:<frames>]")
    p.add_argument("--warmup-frames", type=int, default=5, help="frames excluded from steady-state timing")
    p.add_argument("--repetitions", type=int, default=1, help="runs per method and scene (median reported)")
    p.add_argument("--model", default="toy:small:7", help="toy:<small|base>:<seed> or a model checkpoint path")
    p.add_argument("--scales", default=None, help="scales checkpoint (required for QAT methods)")
    p.add_argument("--csv-out", default="bench.csv", help="results CSV")
    p.add_argument("--json-out", default=None, help="results JSON (optional)")
    p.add_argument("--markdown-out", default="bench.md", help="absolute and delta tables")
    _add_config(p)
    subs["bench"] = p

    p = sub.add_parser("compare", formatter_class=fmt, help="delta table between two results CSVs")
    p.add_argument("--results", nargs=2, metavar=("A_CSV", "B_CSV"), default=None,
                   help="two results CSVs; deltas are b - a")
    p.add_argument("--out", default=None, help="write markdown here instead of stdout")
    _add_config(p)
    subs["compare"] = p
    return parser, subs


def resolve_options(sub: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parser defaults, overridden by the ``--config`` file, overridden by explicit flags."""
    dests = [a.dest for a in sub._actions if a.dest != "help"]
    ns = sub.parse_args(argv, argparse.Namespace(**{d: UNSET for d in dests}))
    file_vals = {}
    if ns.config is not UNSET and ns.config is not None:
        try:
            file_vals = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {ns.config}: {e}") from e
        if not isinstance(file_vals, dict):
            raise ConfigError(f"config {ns.config} must hold a JSON object")
        known = set(dests) - {"config"}
        unknown = sorted(set(file_vals) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; allowed: {sorted(known)}")
    actions = {a.dest: a for a in sub._actions}
    for d in dests:
        if getattr(ns, d) is UNSET:
            setattr(ns, d, _from_file(actions[d], file_vals[d]) if d in file_vals else sub.get_default(d))
    return ns


def _from_file(action: argparse.Action, value):
    """Apply the flag's type and choices to a config-file value."""
    flag = action.option_strings[0]
    many = action.nargs in ("+", "*") or isinstance(action.nargs, int)
    if many and not isinstance(value, list):
        raise ConfigError(f"config value for {flag} must be a list")
    out = []
    for v in value if many else [value]:
        if action.type is not None and v is not None:
            try:
                v = action.type(v)
            except (TypeError, ValueError):
                raise ConfigError(f"config value for {flag} is not a valid {action.type.__name__}: {v!r}") from None
        if action.choices is not None and v not in action.choices:
            raise ConfigError(f"config value for {flag} must be one of {list(action.choices)}, got {v!r}")
        out.append(v)
    return out if many else out[0]


def cmd_train(a) -> int:
    if a.steps < 1:
        raise ConfigError(f"--steps must be >= 1, got {a.steps}")
    try:
        cfg = DistillConfig(lambda_cos=a.lambda_cos, lr=a.lr, steps=a.steps, chunk_len=a.chunk_len,
                            seed=a.seed, source=a.source, frame_size=a.frame_size)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    model = strip_qat(parse_model_spec(a.model))
    qcfg = QuantConfig()
    frames = frames_from_source(cfg.source, cfg.frame_size)
    state, scales = train_scales(inject_qat(model, qcfg), model, frames, cfg)
    log_out = a.log_out or f"{a.scales_out}.log.csv"
    write_training_log(state, log_out)
    if state.step == 0:
        print(f"training diverged: all {state.skipped} steps skipped", file=sys.stderr)
        return EXIT_DIVERGED
    save_scales(a.scales_out, scales, qcfg)
    h = state.loss_history
    print(f"loss {h[0]:.6g} -> {h[-1]:.6g} over {state.step} steps ({state.skipped} skipped); "
          f"wrote {a.scales_out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    method = MODES[a.mode]
    scales = qcfg = None
    if method != "baseline":
        if not a.scales:
            raise ConfigError(f"--scales is required with --mode {a.mode}")
        if not Path(a.scales).exists():
            raise ConfigError(f"--scales file not found: {a.scales}")
        scales, qcfg = load_scales(a.scales, with_config=True)
    spec = SceneSpec.parse(a.scene)
    model = parse_model_spec(a.model)
    res = run_pipeline(model, scales, method_plan(method), spec.build(), cfg=qcfg)
    write_tum(res.trajectory, a.traj_out)
    row = summarize_run(method, spec.name, res, min(a.warmup_frames, len(res.frame_ns) - 1))
    Path(a.metrics_out or f"{a.traj_out}.csv").write_text(results_to_csv([row]))
    print(f"ATE {res.ate:.6f} m")
    n = len(res.frame_ns)
    if len(res.match_failures) > MAX_FAILURE_FRACTION * n:
        print(f"pipeline failure: insufficient matches on {len(res.match_failures)} of {n} frames",
              file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def cmd_bench(a) -> int:
    scenes = "standard" if a.scenes in ("standard", ["standard"]) else list(a.scenes)
    cfg = BenchConfig(methods=list(a.methods), scenes=scenes, warmup_frames=a.warmup_frames,
                      repetitions=a.repetitions, model=a.model, scales=a.scales, csv_out=a.csv_out,
                      json_out=a.json_out, markdown_out=a.markdown_out)
    results = run_bench(cfg, progress=lambda r: log.info("%s %s ATE %.4f", r.method, r.scene, r.ate_m))
    for fmt, path in (("csv", cfg.csv_out), ("json", cfg.json_out), ("markdown", cfg.markdown_out)):
        if path:
            emit_report(results, fmt, path)
    print(results_to_csv(results), end="")
    return EXIT_OK


def cmd_compare(a) -> int:
    if not a.results or len(a.results) != 2:
        raise ConfigError("--results needs exactly two CSV paths")
    sets = []
    for path in a.results:
        try:
            sets.append(results_from_csv(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
    md = compare(*sets)
    if a.out:
        Path(a.out).write_text(md)
    else:
        print(md, end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "compare": cmd_compare}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    top = parser.parse_args(argv)
    logging.basicConfig(level=top.log_level, format="%(levelname)s %(name)s: %(message)s")
    rest = argv[argv.index(top.command) + 1:]
    try:
        opts = resolve_options(subs[top.command], rest)
        return COMMANDS[top.command](opts)
    except InsufficientCorrespondences as e:
        print(f"quantfuse: pipeline failure: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    except TrainingError as e:
        # empty or malformed data source is a configuration problem
        print(f"quantfuse: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, BenchError, ModelError, QuantError, TensorError, GeometryError, ValueError) as e:
        print(f"quantfuse: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
