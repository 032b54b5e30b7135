"""Scale-only teacher-student distillation.

Loss:  MSE(F_s, F_t) + MSE(I_s, I_t) + lam * (1 - cos(F_s, F_t)) + lam * (1 - cos(I_s, I_t))

Cosine similarity is taken per spatial location over the channel axis and
averaged over locations. Only the log-domain scales are optimized (Adam);
weights never enter the trainable set.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .engine import NonFiniteError
from .frontend import FrontendModel
from .quant import (
    QuantConfig, QuantError, ScaleParams, fake_quantize, fake_quantize_backward, resolve_scale,
)
from .tensor import Precision, Tensor, conv2d_array, conv2d_backward, demote_half, pairwise_sum

log = logging.getLogger(__name__)

SCALES_MAGIC = b"QSCL"
SCALES_VERSION = 1

LOG_COLUMNS = ["step", "loss", "mse_f", "mse_i", "cos_f", "cos_i", "skipped"]


class TrainingError(RuntimeError):
    pass


class ScalesFormatError(ValueError):
    pass


@dataclass
class LossResult:
    total: float
    mse_f: float
    mse_i: float
    cos_f: float
    cos_i: float
    grad_f: np.ndarray
    grad_i: np.ndarray | None


def _as64(t) -> np.ndarray:
    return np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)


def _mse(a, b):
    d = a - b
    return pairwise_sum(d * d) / d.size, 2.0 * d / d.size


def _cos(a, b):
    """Mean per-location cosine over axis 0 and its gradient w.r.t. ``a``."""
    c = a.shape[0]
    a2, b2 = a.reshape(c, -1), b.reshape(c, -1)
    n_loc = a2.shape[1]
    dot = np.einsum("cl,cl->l", a2, b2)
    na = np.sqrt(np.einsum("cl,cl->l", a2, a2))
    nb = np.sqrt(np.einsum("cl,cl->l", b2, b2))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)
    grad = (b2 / (na_s * nb_s) - cos * a2 / (na_s * na_s)) * ok / n_loc
    return pairwise_sum(cos) / n_loc, grad.reshape(a.shape)


def distill_loss(f_s, f_t, i_s=None, i_t=None, lambda_cos: float = 1.0) -> LossResult:
    """Joint MSE + cosine loss with analytic gradients w.r.t. the student maps.

    Pass ``i_s = i_t = None`` to drop the descriptor terms.
    """
    fs, ft = _as64(f_s), _as64(f_t)
    if fs.shape != ft.shape:
        raise ValueError(f"feature shapes differ: {fs.shape} vs {ft.shape}")
    mse_f, g_mse_f = _mse(fs, ft)
    cos_f, g_cos_f = _cos(fs, ft)
    total = mse_f + lambda_cos * (1.0 - cos_f)
    grad_f = g_mse_f - lambda_cos * g_cos_f

    mse_i, cos_i, grad_i = 0.0, 1.0, None
    if i_s is not None:
        is_, it = _as64(i_s), _as64(i_t)
        if is_.shape != it.shape:
            raise ValueError(f"descriptor shapes differ: {is_.shape} vs {it.shape}")
        mse_i, g_mse_i = _mse(is_, it)
        cos_i, g_cos_i = _cos(is_, it)
        total += mse_i + lambda_cos * (1.0 - cos_i)
        grad_i = g_mse_i - lambda_cos * g_cos_i
    return LossResult(total, mse_f, mse_i, cos_f, cos_i, grad_f, grad_i)


@dataclass
class DistillConfig:
    lambda_cos: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 200
    chunk_len: int = 4
    seed: int = 0
    half_forward: bool = False
    source: str = "scene:orbit:7:48"
    frame_size: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.chunk_len < 1:
            raise ValueError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if self.lambda_cos < 0:
            raise ValueError("lambda_cos must be >= 0")
        if self.frame_size < 16:
            raise ValueError(f"frame_size must be >= 16, got {self.frame_size}")


@dataclass
class TrainState:
    param_names: list[str]
    layout: list[tuple[str, int]]
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    skipped: int = 0
    loss_history: list[float] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)

    @classmethod
    def from_scales(cls, scales: dict[str, ScaleParams], order: list[str]) -> "TrainState":
        names, layout, chunks = [], [], []
        for layer in order:
            sp = scales[layer]
            names += [f"{layer}.log_w_scale[{c}]" for c in range(sp.n_channels)]
            names.append(f"{layer}.log_a_scale")
            layout.append((layer, sp.n_channels))
            chunks.append(sp.flat())
        p = np.concatenate(chunks)
        return cls(names, layout, p, np.zeros_like(p), np.zeros_like(p))

    def scales(self) -> dict[str, ScaleParams]:
        out, o = {}, 0
        for layer, n in self.layout:
            out[layer] = ScaleParams.from_flat(self.params[o : o + n + 1].copy())
            o += n + 1
        return out

    def offsets(self) -> dict[str, int]:
        out, o = {}, 0
        for layer, n in self.layout:
            out[layer] = o
            o += n + 1
        return out


def collect_scale_params(model: FrontendModel) -> TrainState:
    """Trainable set of ``model``: the log scales of every quantized layer, nothing else."""
    scales = model.scales()
    return TrainState.from_scales(scales, [l.name for l in model.layers if l.quantized])


def teacher_outputs(teacher: FrontendModel, image: Tensor):
    def conv_fn(layer, x):
        return Tensor.wrap(conv2d_array(x.data, layer.weight.data, layer.stride, layer.padding))

    return teacher.walk(image, conv_fn)


def _student_step(student: FrontendModel, image: Tensor, target, cfg: DistillConfig,
                  grad_out: np.ndarray, offsets: dict[str, int]) -> LossResult:
    """Forward + backward for one frame; accumulates scale gradients into ``grad_out``."""
    saved: dict[str, tuple] = {}

    def conv_fn(layer, x):
        if cfg.half_forward:
            x = demote_half(x)
        sp, qcfg = layer.scale_params, layer.cfg
        # scales resolved at full precision even on the half path
        s_a = resolve_scale(sp.log_a_scale, qcfg)
        s_w = resolve_scale(sp.log_w_scale, qcfg)
        qa = fake_quantize(x, s_a, qcfg)
        qw = fake_quantize(layer.weight, s_w, qcfg)
        saved[layer.name] = (x, qa, qw)
        return Tensor.wrap(conv2d_array(qa.data, qw.data, layer.stride, layer.padding))

    record: dict = {}
    f_s, i_s = student.walk(image, conv_fn, record)
    f_t, i_t = target
    res = distill_loss(f_s, f_t, i_s, i_t, cfg.lambda_cos)
    if not np.isfinite(res.total):
        return res

    def conv_bwd(layer, g_c):
        x, qa, qw = saved[layer.name]
        d_qa, d_qw = conv2d_backward(g_c, qa.data, qw.data, layer.stride, layer.padding)
        sp, qcfg = layer.scale_params, layer.cfg
        ga = fake_quantize_backward(x, sp.log_a_scale, qcfg, d_qa)
        gw = fake_quantize_backward(layer.weight, sp.log_w_scale, qcfg, d_qw)
        o = offsets[layer.name]
        grad_out[o : o + sp.n_channels] += gw.d_log_scale
        grad_out[o + sp.n_channels] += ga.d_log_scale
        return ga.d_input

    grads = {"F": res.grad_f}
    if res.grad_i is not None:
        grads["I"] = res.grad_i
    student.backward(record, grads, conv_bwd)
    return res


def _with_scales(model: FrontendModel, scales: dict[str, ScaleParams]) -> FrontendModel:
    return model.with_layers(
        replace(l, scale_params=scales[l.name]) if l.name in scales else l for l in model.layers
    )


def _chunks(n_frames: int, chunk_len: int, seed: int):
    """Endless stream of temporally contiguous chunks; chunk order reshuffled per epoch."""
    starts = list(range(0, n_frames, chunk_len))
    rng = np.random.default_rng(seed)
    while True:
        for s in rng.permutation(len(starts)):
            b = starts[s]
            yield list(range(b, min(b + chunk_len, n_frames)))


def frames_from_source(source: str, size: int = 64) -> list[Tensor]:
    """Training frames from a descriptor.

    ``scene:<motion>:<seed>:<n>`` renders a synthetic scene at ``size`` x ``size``;
    ``noise:<seed>:<n>`` yields uniform-noise images like the calibration input.
    """
    from .frontend import calibration_image
    from .geometry import MOTIONS, generate_scene, render_frames

    parts = source.split(":")
    try:
        if parts[0] == "scene" and len(parts) == 4 and parts[1] in MOTIONS:
            scene = generate_scene(int(parts[2]), int(parts[3]), parts[1], width=size, height=size)
            return render_frames(scene)[0]
        if parts[0] == "noise" and len(parts) == 3:
            seed, n = int(parts[1]), int(parts[2])
            return [calibration_image(seed * 100003 + k, (3, size, size)) for k in range(n)]
    except ValueError:
        pass
    raise TrainingError(f"data source must be scene:<motion>:<seed>:<n> or noise:<seed>:<n>, got {source!r}")


def train_scales(student: FrontendModel, teacher: FrontendModel, data, cfg: DistillConfig):
    """Learn the log scales of ``student`` against the float ``teacher``.

    A step whose loss or gradients are non-finite (or whose forward hits
    non-finite activations) is skipped and counted. Returns
    ``(TrainState, scales)``.
    """
    frames = list(data)
    if not frames:
        raise TrainingError("empty data stream")
    if teacher.n_quantized:
        raise TrainingError("teacher must be the float model (no quantized layers)")
    if student.n_quantized != len(student.layers):
        raise TrainingError("every student layer must be quantized")
    if student.weight_hash() != teacher.weight_hash():
        raise TrainingError("student and teacher weights differ")

    state = collect_scale_params(student)
    offsets = state.offsets()
    targets: dict[int, tuple] = {}
    chunks = _chunks(len(frames), cfg.chunk_len, cfg.seed)

    for step in range(1, cfg.steps + 1):
        idx = next(chunks)
        model = _with_scales(student, state.scales())
        grad = np.zeros_like(state.params)
        parts = []
        try:
            for k in idx:
                if k not in targets:
                    targets[k] = teacher_outputs(teacher, frames[k])
                parts.append(_student_step(model, frames[k], targets[k], cfg, grad, offsets))
        except (NonFiniteError, QuantError, FloatingPointError) as exc:
            log.info("step %d skipped: %s", step, exc)
            parts = None
        n = len(idx)
        loss = sum(p.total for p in parts) / n if parts else float("nan")
        grad /= n
        if parts is None or not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            state.skipped += 1
            continue

        state.step += 1
        t = state.step
        state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
        state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
        m_hat = state.m / (1 - cfg.beta1**t)
        v_hat = state.v / (1 - cfg.beta2**t)
        state.params = state.params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

        state.loss_history.append(loss)
        state.log_rows.append({
            "step": step,
            "loss": loss,
            "mse_f": sum(p.mse_f for p in parts) / n,
            "mse_i": sum(p.mse_i for p in parts) / n,
            "cos_f": sum(p.cos_f for p in parts) / n,
            "cos_i": sum(p.cos_i for p in parts) / n,
            "skipped": state.skipped,
        })
    return state, state.scales()


def evaluate_loss(student: FrontendModel, teacher: FrontendModel, frames, lambda_cos: float = 1.0) -> float:
    """Mean distillation loss of ``student`` over ``frames`` (no gradients)."""
    total = 0.0
    cfg = DistillConfig(lambda_cos=lambda_cos, steps=1)
    for img in frames:
        grad = np.zeros(sum(l.c_out + 1 for l in student.layers))
        offsets, o = {}, 0
        for l in student.layers:
            offsets[l.name] = o
            o += l.c_out + 1
        total += _student_step(student, img, teacher_outputs(teacher, img), cfg, grad, offsets).total
    return total / len(frames)


def write_training_log(state: TrainState, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in state.log_rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- scale checkpoints ------------------------------------------------------------

def scales_to_bytes(scales: dict[str, ScaleParams], cfg: QuantConfig | None = None,
                    order: list[str] | None = None) -> bytes:
    order = list(order or scales)
    layers, data, o = {}, [], 0
    for name in order:
        sp = scales[name]
        w = sp.log_w_scale.astype("<f8").tobytes()
        layers[name] = {"w_offset": o, "n": sp.n_channels, "a_offset": o + len(w)}
        data.append(w + struct.pack("<d", sp.log_a_scale))
        o += len(w) + 8
    manifest = {"order": order, "layers": layers}
    if cfg is not None:
        manifest["quant"] = cfg.to_dict()
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return SCALES_MAGIC + struct.pack("<II", SCALES_VERSION, len(raw)) + raw + b"".join(data)


def scales_from_bytes(blob: bytes) -> tuple[dict[str, ScaleParams], QuantConfig | None]:
    if blob[:4] != SCALES_MAGIC:
        raise ScalesFormatError(f"bad scales magic {blob[:4]!r}")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != SCALES_VERSION:
        raise ScalesFormatError(f"unsupported scales version {version}")
    manifest = json.loads(blob[12 : 12 + n])
    base = 12 + n
    out = {}
    for name in manifest["order"]:
        e = manifest["layers"][name]
        w = np.frombuffer(blob, dtype="<f8", count=e["n"], offset=base + e["w_offset"]).astype(np.float64)
        (a,) = struct.unpack_from("<d", blob, base + e["a_offset"])
        out[name] = ScaleParams(w, a)
    cfg = QuantConfig(**manifest["quant"]) if "quant" in manifest else None
    return out, cfg


def save_scales(path, scales: dict[str, ScaleParams], cfg: QuantConfig | None = None) -> None:
    Path(path).write_bytes(scales_to_bytes(scales, cfg))


def load_scales(path, with_config: bool = False):
    scales, cfg = scales_from_bytes(Path(path).read_bytes())
    return (scales, cfg) if with_config else scales
