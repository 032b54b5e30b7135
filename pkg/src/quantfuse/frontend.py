"""Toy patchifier front-end with frozen weights and QAT injection.

The default roster has ten convolutions covering the layer species of a
ResNet-style patchifier: a 7x7 stride-2 stem, 3x3 residual blocks with
additive skips, a 1x1 stride-2 downsampling shortcut and two 1x1 heads
(``fnet`` -> features F, ``inet`` -> descriptors I) branching from the
final trunk feature. Normalization is a frozen per-channel affine applied
after each conv; skip additions are never quantized.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import ExecutionPlan, NonFiniteError, run_frontend
from .quant import QuantConfig, ScaleParams, calibrate_log_scale
from .tensor import Tensor, TensorError, conv2d_array, read_tensor, write_tensor

WIDTHS = {"small": 8, "base": 16}

CKPT_MAGIC = b"QCKP"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConvLayer:
    name: str
    weight: Tensor
    stride: int
    padding: int
    gamma: np.ndarray
    beta: np.ndarray
    scale_params: ScaleParams | None = None
    cfg: QuantConfig | None = None
    quantized: bool = False

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


# Graph nodes: ("conv", out, layer, src) | ("relu", out, src) | ("add", out, a, b)
TOY_GRAPH = (
    ("conv", "c1", "conv1", "image"),
    ("relu", "h1", "c1"),
    ("conv", "r1a", "res1a", "h1"),
    ("relu", "r1a_act", "r1a"),
    ("conv", "r1b", "res1b", "r1a_act"),
    ("add", "s1", "r1b", "h1"),
    ("relu", "h2", "s1"),
    ("conv", "r2a", "res2a", "h2"),
    ("relu", "r2a_act", "r2a"),
    ("conv", "r2b", "res2b", "r2a_act"),
    ("conv", "d2", "down2", "h2"),
    ("add", "s2", "r2b", "d2"),
    ("relu", "h3", "s2"),
    ("conv", "r3a", "res3a", "h3"),
    ("relu", "r3a_act", "r3a"),
    ("conv", "r3b", "res3b", "r3a_act"),
    ("add", "s3", "r3b", "h3"),
    ("relu", "h4", "s3"),
    ("conv", "F", "fnet", "h4"),
    ("conv", "I", "inet", "h4"),
)


@dataclass(frozen=True, eq=False)
class FrontendModel:
    layers: tuple[ConvLayer, ...]
    graph: tuple = TOY_GRAPH
    in_channels: int = 3

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ModelError(f"duplicate layer names in roster {names}")
        object.__setattr__(self, "_index", {l.name: l for l in self.layers})

    def layer(self, name: str) -> ConvLayer:
        return self._index[name]

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    @property
    def n_quantized(self) -> int:
        return sum(l.quantized for l in self.layers)

    @property
    def out_channels(self) -> int:
        return self.layer("fnet").c_out if "fnet" in self._index else self.in_channels

    def with_layers(self, layers) -> "FrontendModel":
        return replace(self, layers=tuple(layers))

    def scales(self) -> dict[str, ScaleParams]:
        return {l.name: l.scale_params for l in self.layers if l.scale_params is not None}

    def weight_hash(self) -> str:
        """SHA-256 over every conv weight (and frozen affine) in roster order."""
        h = hashlib.sha256()
        for l in self.layers:
            h.update(l.name.encode())
            h.update(l.weight.data.tobytes())
            h.update(np.ascontiguousarray(l.gamma).tobytes())
            h.update(np.ascontiguousarray(l.beta).tobytes())
        return h.hexdigest()

    # -- graph evaluation ---------------------------------------------------

    def walk(self, image: Tensor, conv_fn: Callable[[ConvLayer, Tensor], Tensor],
             record: dict | None = None) -> tuple[Tensor, Tensor]:
        """Evaluate the graph; ``conv_fn`` runs each (possibly quantized) conv.

        Returns ``(F, I)``. If ``record`` is given it receives every node's
        value (post-affine for convs) keyed by node name.
        """
        if image.shape[0] != self.in_channels:
            raise ModelError(f"expected {self.in_channels} input channels, got {image.shape[0]}")
        vals: dict[str, np.ndarray] = {"image": image.data}
        for node in self.graph:
            op, out = node[0], node[1]
            if op == "conv":
                layer = self.layer(node[2])
                c = conv_fn(layer, Tensor.wrap(vals[node[3]])).data
                y = c * layer.gamma[:, None, None] + layer.beta[:, None, None]
                if not np.all(np.isfinite(y)):
                    raise NonFiniteError(f"non-finite activations after layer {layer.name!r}")
                vals[out] = y
            elif op == "relu":
                vals[out] = np.maximum(vals[node[2]], np.float32(0))
            elif op == "add":
                vals[out] = vals[node[2]] + vals[node[3]]
            else:
                raise ModelError(f"unknown graph op {op!r}")
        if record is not None:
            record.update(vals)
        feats = vals.get("F", vals["image"])
        desc = vals.get("I", vals["image"])
        return Tensor.wrap(feats), Tensor.wrap(desc)

    def backward(self, record: dict, grads: dict[str, np.ndarray],
                 conv_bwd: Callable[[ConvLayer, np.ndarray], np.ndarray]) -> None:
        """Reverse pass over the graph.

        ``grads`` maps output node names to upstream gradients. ``conv_bwd``
        receives the gradient w.r.t. a conv's pre-affine output and returns
        the gradient w.r.t. its input (or ``None`` when not needed).
        """
        g = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}

        def acc(name, val):
            if val is None or name == "image":
                return
            g[name] = g[name] + val if name in g else val

        for node in reversed(self.graph):
            op, out = node[0], node[1]
            if out not in g:
                continue
            gout = g.pop(out)
            if op == "conv":
                layer = self.layer(node[2])
                acc(node[3], conv_bwd(layer, gout * layer.gamma[:, None, None]))
            elif op == "relu":
                acc(node[2], gout * (record[out] > 0))
            elif op == "add":
                acc(node[2], gout)
                acc(node[3], gout)


# -- deterministic weights ------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer (wrapping uint64 arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, n: int) -> np.ndarray:
    """``n`` uniforms in (0, 1) from a counter hash of (seed, stream, index)."""
    with np.errstate(over="ignore"):
        key = _mix64(np.array([seed], dtype=np.uint64) * _GOLDEN + np.uint64(stream))
        key = _mix64(key + np.array([stream], dtype=np.uint64) * _GOLDEN)
        ctr = (np.arange(n, dtype=np.uint64) + np.uint64(1)) * _GOLDEN
        z = _mix64(key + ctr)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def counter_normal(seed: int, stream: int, n: int) -> np.ndarray:
    """Standard normals via Box-Muller on :func:`counter_uniform` pairs."""
    m = (n + 1) // 2
    u = counter_uniform(seed, stream, 2 * m)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    th = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(th)
    out[1::2] = r * np.sin(th)
    return out[:n]


def _toy_roster(width: int) -> list[tuple[str, int, int, int, int, int]]:
    w, w2 = width, 2 * width
    # name, c_in, c_out, k, stride, padding
    return [
        ("conv1", 3, w, 7, 2, 3),
        ("res1a", w, w, 3, 1, 1),
        ("res1b", w, w, 3, 1, 1),
        ("res2a", w, w2, 3, 2, 1),
        ("res2b", w2, w2, 3, 1, 1),
        ("down2", w, w2, 1, 2, 0),
        ("res3a", w2, w2, 3, 1, 1),
        ("res3b", w2, w2, 3, 1, 1),
        ("fnet", w2, w2, 1, 1, 0),
        ("inet", w2, w2, 1, 1, 0),
    ]


def build_toy_patchifier(seed: int, width: int | str = "small") -> FrontendModel:
    """Deterministic ten-layer toy patchifier (He-normal weights)."""
    if isinstance(width, str):
        if width not in WIDTHS:
            raise ModelError(f"width must be one of {sorted(WIDTHS)}, got {width!r}")
        width = WIDTHS[width]
    if width not in WIDTHS.values():
        raise ModelError(f"width must be 8 (small) or 16 (base), got {width}")
    layers = []
    for idx, (name, cin, cout, k, stride, pad) in enumerate(_toy_roster(width)):
        fan_in = cin * k * k
        n = cout * cin * k * k
        wts = counter_normal(seed, 4 * idx, n) * np.sqrt(2.0 / fan_in)
        gamma = 1.0 + 0.1 * counter_normal(seed, 4 * idx + 1, cout)
        beta = 0.1 * counter_normal(seed, 4 * idx + 2, cout)
        layers.append(ConvLayer(
            name=name,
            weight=Tensor(wts.reshape(cout, cin, k, k)),
            stride=stride,
            padding=pad,
            gamma=_frozen(gamma),
            beta=_frozen(beta),
        ))
    return FrontendModel(tuple(layers))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float32)
    a.flags.writeable = False
    return a


def parse_model_spec(spec: str) -> FrontendModel:
    """``toy:<small|base>:<seed>`` builds a toy model; anything else is a checkpoint path."""
    if spec.startswith("toy:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ModelError(f"model spec must be toy:<width>:<seed>, got {spec!r}")
        try:
            seed = int(parts[2])
        except ValueError:
            raise ModelError(f"bad seed in model spec {spec!r}") from None
        return build_toy_patchifier(seed, parts[1])
    return load_model(spec)


# -- QAT injection --------------------------------------------------------------

def calibration_image(seed: int = 0, shape=(3, 64, 64)) -> Tensor:
    u = counter_uniform(seed, 10_000, int(np.prod(shape)))
    return Tensor(u.reshape(shape))


def calibrate(model: FrontendModel, cfg: QuantConfig, batch) -> dict[str, ScaleParams]:
    """Max-abs calibration: activation scale per tensor, weight scale per channel."""
    act_max: dict[str, float] = {}

    def conv_fn(layer, x):
        act_max[layer.name] = max(act_max.get(layer.name, 0.0), float(np.max(np.abs(x.data))))
        return Tensor.wrap(conv2d_array(x.data, layer.weight.data, layer.stride, layer.padding))

    float_model = strip_qat(model)
    for img in batch:
        float_model.walk(img, conv_fn)
    out = {}
    for l in model.layers:
        w_max = np.max(np.abs(l.weight.data.reshape(l.c_out, -1)), axis=1).astype(np.float64)
        out[l.name] = ScaleParams(calibrate_log_scale(w_max, cfg), calibrate_log_scale(act_max[l.name], cfg))
    return out


def inject_qat(model: FrontendModel, cfg: QuantConfig | None = None, scales="default",
               calibration=None) -> FrontendModel:
    """Wrap every conv with a quantization descriptor, leaving weights untouched.

    ``scales`` is ``"default"`` (max-abs calibration on ``calibration``, a
    list of images; a fixed synthetic image when omitted) or a mapping of
    layer name to :class:`ScaleParams`.
    """
    cfg = cfg or QuantConfig()
    if isinstance(scales, str):
        if scales != "default":
            raise ModelError(f"unknown scale initialisation {scales!r}")
        batch = calibration if calibration is not None else [calibration_image()]
        scales = calibrate(model, cfg, batch)
    model_names = model.names
    if sorted(scales) != sorted(model_names):
        raise ModelError(
            f"scale set does not match model roster: model has {len(model_names)} layers "
            f"{model_names}, scales have {len(scales)} {sorted(scales)}"
        )
    layers = []
    for l in model.layers:
        sp = scales[l.name]
        if sp.n_channels != l.c_out:
            raise ModelError(f"layer {l.name}: {sp.n_channels} weight scales for {l.c_out} output channels")
        layers.append(replace(l, scale_params=sp, cfg=cfg, quantized=True))
    return model.with_layers(layers)


def strip_qat(model: FrontendModel) -> FrontendModel:
    return model.with_layers(replace(l, scale_params=None, cfg=None, quantized=False) for l in model.layers)


def forward(model: FrontendModel, image: Tensor, plan: ExecutionPlan | None = None, context=None):
    """Front-end forward pass returning ``(F, I)`` at 1/4 resolution."""
    h, w = image.shape[1], image.shape[2]
    if h % 4 or w % 4:
        raise ModelError(f"image H, W must be divisible by 4, got {h}x{w}")
    if context is not None:
        f, i, _ = run_frontend(context.plan, model, image, context.arena, context.weight_cache)
    else:
        f, i, _ = run_frontend(plan or ExecutionPlan(), model, image)
    return f, i


# -- checkpoints ----------------------------------------------------------------

def save_model(model: FrontendModel, path) -> None:
    """Tensor records, then raw float64 scale blobs, then a JSON manifest.

    Trailer: u64 manifest length + ``QCKP``.
    """
    buf = io.BytesIO()
    manifest = {"version": CKPT_VERSION, "graph": [list(n) for n in model.graph],
                "in_channels": model.in_channels, "layers": {}, "order": model.names}
    for l in model.layers:
        entry = {"stride": l.stride, "padding": l.padding, "quantized": l.quantized}
        entry["weight_offset"] = buf.tell()
        write_tensor(buf, l.weight)
        entry["gamma_offset"] = buf.tell()
        write_tensor(buf, Tensor(l.gamma))
        entry["beta_offset"] = buf.tell()
        write_tensor(buf, Tensor(l.beta))
        if l.scale_params is not None:
            entry["scale_offsets"] = {"log_w_scale": buf.tell(), "n": l.scale_params.n_channels}
            buf.write(l.scale_params.log_w_scale.astype("<f8").tobytes())
            entry["scale_offsets"]["log_a_scale"] = buf.tell()
            buf.write(struct.pack("<d", l.scale_params.log_a_scale))
            entry["quant"] = l.cfg.to_dict()
        manifest["layers"][l.name] = entry
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    buf.write(raw)
    buf.write(struct.pack("<Q", len(raw)) + CKPT_MAGIC)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> FrontendModel:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[-4:] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack("<Q", blob[-12:-4])
    manifest = json.loads(blob[-12 - n : -12])
    if manifest.get("version") != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    layers = []
    for name in manifest["order"]:
        e = manifest["layers"][name]
        try:
            weight = read_tensor(io.BytesIO(blob[e["weight_offset"]:]))
            gamma = read_tensor(io.BytesIO(blob[e["gamma_offset"]:])).data
            beta = read_tensor(io.BytesIO(blob[e["beta_offset"]:])).data
        except TensorError as exc:
            raise ModelError(f"{path}: layer {name}: {exc}") from exc
        sp = cfg = None
        if "scale_offsets" in e:
            so = e["scale_offsets"]
            lw = np.frombuffer(blob, dtype="<f8", count=so["n"], offset=so["log_w_scale"])
            (la,) = struct.unpack_from("<d", blob, so["log_a_scale"])
            sp = ScaleParams(lw.astype(np.float64), la)
            cfg = QuantConfig(**e["quant"])
        layers.append(ConvLayer(name, weight, e["stride"], e["padding"], _frozen(gamma), _frozen(beta),
                                sp, cfg, bool(e["quantized"]) and sp is not None))
    graph = tuple(tuple(n) for n in manifest["graph"])
    return FrontendModel(tuple(layers), graph, manifest.get("in_channels", 3))
