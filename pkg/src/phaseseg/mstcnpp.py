"""Multi-stage temporal convolutional model built from dual-dilated layers.

Stage 1 (prediction generation) consumes projected input features; every
later stage (refinement) consumes the previous stage's probability rows and
re-segments them. Each stage is a 1x1 input projection, a stack of residual
dual-dilated layers and a 1x1 softmax head.

A dual-dilated layer runs two parallel dilated convolutions, one with a low
dilation 2^l and one with a high dilation 2^(L-1-l), fuses them (summed
pre-ReLU by default, channel concatenation optionally) and applies a 1x1
convolution on the rectified fusion before the residual add:

    out = h + W * ReLU(conv_low(h) + conv_high(h)) + b

The whole forward/backward pair is hand-written; backward returns gradients
for every parameter and chains correctly through the probability handoff
between stages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .seqcore import (
    ShapeError,
    as_matrix,
    conv1x1,
    conv1x1_backward,
    dilated_conv1d,
    dilated_conv1d_backward,
    relu,
    softmax_rows,
    softmax_rows_backward,
)

KERNEL_SIZE = 3

MAGIC = b"MTPP"
FORMAT_VERSION = 1

_FUSE_MODES = ("sum", "concat")


class ModelFormatError(ValueError):
    """Model file is malformed or not a model file at all."""


class ModelVersionError(ModelFormatError):
    """Model file uses an unsupported format version."""


@dataclass(frozen=True)
class StageConfig:
    """Architecture hyperparameters for the multi-stage network."""

    in_dim: int = 2048
    channels: int = 256
    n_classes: int = 4
    stages: int = 4
    layers_prediction: int = 11
    layers_refinement: int = 10
    fuse_mode: str = "sum"

    def __post_init__(self):
        if self.in_dim < 1 or self.channels < 1:
            raise ValueError("in_dim and channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        if self.stages < 1:
            raise ValueError(f"need at least 1 stage, got {self.stages}")
        if self.layers_prediction < 1 or self.layers_refinement < 1:
            raise ValueError("every stage needs at least 1 layer")
        if self.fuse_mode not in _FUSE_MODES:
            raise ValueError(f"fuse_mode must be one of {_FUSE_MODES}, got {self.fuse_mode!r}")

    def layers_for_stage(self, stage_index: int) -> int:
        return self.layers_prediction if stage_index == 0 else self.layers_refinement


@dataclass
class DualDilatedLayer:
    w_d1: np.ndarray  # (F, F, k) low-dilation kernel
    b_d1: np.ndarray
    w_d2: np.ndarray  # (F, F, k) high-dilation kernel
    b_d2: np.ndarray
    w_fuse: np.ndarray  # (F, F) for sum fusion, (F, 2F) for concat
    b_fuse: np.ndarray
    dilation_low: int
    dilation_high: int


@dataclass
class Stage:
    proj_w: np.ndarray  # (F, in_width) 1x1 projection into the stage
    proj_b: np.ndarray
    layers: list[DualDilatedLayer]
    head_w: np.ndarray  # (C, F) output head
    head_b: np.ndarray


@dataclass
class Model:
    config: StageConfig
    stages: list[Stage]

    @property
    def dtype(self):
        return self.stages[0].proj_w.dtype


def init(cfg: StageConfig, seed: int, dtype=np.float64) -> Model:
    """Seed-deterministic model: fan-in-scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        limit = np.sqrt(1.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    f = cfg.channels
    fuse_in = f if cfg.fuse_mode == "sum" else 2 * f
    stages = []
    for s in range(cfg.stages):
        in_width = cfg.in_dim if s == 0 else cfg.n_classes
        n_layers = cfg.layers_for_stage(s)
        layers = []
        for l in range(n_layers):
            layers.append(DualDilatedLayer(
                w_d1=uniform((f, f, KERNEL_SIZE), f * KERNEL_SIZE),
                b_d1=np.zeros(f, dtype=dtype),
                w_d2=uniform((f, f, KERNEL_SIZE), f * KERNEL_SIZE),
                b_d2=np.zeros(f, dtype=dtype),
                w_fuse=uniform((f, fuse_in), fuse_in),
                b_fuse=np.zeros(f, dtype=dtype),
                dilation_low=2**l,
                dilation_high=2 ** (n_layers - 1 - l),
            ))
        stages.append(Stage(
            proj_w=uniform((f, in_width), in_width),
            proj_b=np.zeros(f, dtype=dtype),
            layers=layers,
            head_w=uniform((cfg.n_classes, f), f),
            head_b=np.zeros(cfg.n_classes, dtype=dtype),
        ))
    return Model(config=cfg, stages=stages)


def named_parameters(model: Model) -> list[tuple[str, np.ndarray]]:
    """All parameters in a fixed, documented order (also the file order)."""
    out = []
    for s, stage in enumerate(model.stages):
        prefix = f"stage{s + 1}"
        out.append((f"{prefix}/proj_w", stage.proj_w))
        out.append((f"{prefix}/proj_b", stage.proj_b))
        for l, layer in enumerate(stage.layers):
            lp = f"{prefix}/layer{l + 1}"
            out.append((f"{lp}/w_d1", layer.w_d1))
            out.append((f"{lp}/b_d1", layer.b_d1))
            out.append((f"{lp}/w_d2", layer.w_d2))
            out.append((f"{lp}/b_d2", layer.b_d2))
            out.append((f"{lp}/w_fuse", layer.w_fuse))
            out.append((f"{lp}/b_fuse", layer.b_fuse))
        out.append((f"{prefix}/head_w", stage.head_w))
        out.append((f"{prefix}/head_b", stage.head_b))
    return out


def clone(model: Model) -> Model:
    stages = [Stage(
        proj_w=st.proj_w.copy(),
        proj_b=st.proj_b.copy(),
        layers=[replace(ly, w_d1=ly.w_d1.copy(), b_d1=ly.b_d1.copy(),
                        w_d2=ly.w_d2.copy(), b_d2=ly.b_d2.copy(),
                        w_fuse=ly.w_fuse.copy(), b_fuse=ly.b_fuse.copy())
                for ly in st.layers],
        head_w=st.head_w.copy(),
        head_b=st.head_b.copy(),
    ) for st in model.stages]
    return Model(config=model.config, stages=stages)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class _LayerCache:
    h_in: np.ndarray
    pre_relu: np.ndarray
    post_relu: np.ndarray


@dataclass
class _StageCache:
    stage_input: np.ndarray
    layer_caches: list[_LayerCache]
    final_h: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardCache:
    stage_caches: list[_StageCache] = field(default_factory=list)


def _layer_forward(layer: DualDilatedLayer, h: np.ndarray, fuse_mode: str):
    c1 = dilated_conv1d(h, layer.w_d1, layer.b_d1, layer.dilation_low)
    c2 = dilated_conv1d(h, layer.w_d2, layer.b_d2, layer.dilation_high)
    a = c1 + c2 if fuse_mode == "sum" else np.hstack([c1, c2])
    r = relu(a)
    out = h + conv1x1(r, layer.w_fuse, layer.b_fuse)
    return out, _LayerCache(h_in=h, pre_relu=a, post_relu=r)


def forward(model: Model, x, return_cache: bool = False):
    """Run all stages; returns the list of per-stage probability matrices.

    With return_cache=True also returns the activations backward() needs.
    """
    cfg = model.config
    x = as_matrix(x, "features")
    if x.shape[1] != cfg.in_dim:
        raise ShapeError(f"input has {x.shape[1]} channels, model expects {cfg.in_dim}")
    x = x.astype(model.dtype, copy=False)

    cache = ForwardCache()
    stage_probs = []
    current = x
    for stage in model.stages:
        h = conv1x1(current, stage.proj_w, stage.proj_b)
        layer_caches = []
        for layer in stage.layers:
            h, lc = _layer_forward(layer, h, cfg.fuse_mode)
            layer_caches.append(lc)
        logits = conv1x1(h, stage.head_w, stage.head_b)
        probs = softmax_rows(logits)
        cache.stage_caches.append(_StageCache(
            stage_input=current, layer_caches=layer_caches, final_h=h, probs=probs))
        stage_probs.append(probs)
        current = probs
    if return_cache:
        return stage_probs, cache
    return stage_probs


def _layer_backward(layer: DualDilatedLayer, lc: _LayerCache, g_out, fuse_mode, grads, name):
    g_h = g_out.copy()  # residual path
    fuse = conv1x1_backward(lc.post_relu, layer.w_fuse, g_out)
    grads[f"{name}/w_fuse"] = fuse.d_weights
    grads[f"{name}/b_fuse"] = fuse.d_bias
    g_a = fuse.d_input * (lc.pre_relu > 0)
    if fuse_mode == "sum":
        g_c1 = g_c2 = g_a
    else:
        f = layer.b_d1.shape[0]
        g_c1, g_c2 = g_a[:, :f], g_a[:, f:]
    b1 = dilated_conv1d_backward(lc.h_in, layer.w_d1, layer.dilation_low, g_c1)
    b2 = dilated_conv1d_backward(lc.h_in, layer.w_d2, layer.dilation_high, g_c2)
    grads[f"{name}/w_d1"] = b1.d_weights
    grads[f"{name}/b_d1"] = b1.d_bias
    grads[f"{name}/w_d2"] = b2.d_weights
    grads[f"{name}/b_d2"] = b2.d_bias
    g_h += b1.d_input + b2.d_input
    return g_h


def backward(model: Model, cache: ForwardCache, stage_logit_grads) -> dict[str, np.ndarray]:
    """Full-model gradients given each stage's direct dL/dlogits.

    Gradients flow backward through the probability handoff: the loss applied
    to stage s also reaches every earlier stage via the refinement inputs.
    Returns a dict keyed like named_parameters().
    """
    if cache is None or not cache.stage_caches:
        raise ValueError("forward cache missing: run forward(..., return_cache=True)")
    n_stages = len(model.stages)
    if len(stage_logit_grads) != n_stages:
        raise ShapeError(f"expected {n_stages} per-stage gradients, got {len(stage_logit_grads)}")

    cfg = model.config
    grads: dict[str, np.ndarray] = {}
    g_probs_next = None  # gradient arriving at this stage's output probabilities
    for s in range(n_stages - 1, -1, -1):
        stage = model.stages[s]
        sc = cache.stage_caches[s]
        name = f"stage{s + 1}"

        g_logits = np.asarray(stage_logit_grads[s], dtype=model.dtype)
        if g_logits.shape != sc.probs.shape:
            raise ShapeError(f"stage {s + 1} gradient shape {g_logits.shape} "
                             f"does not match logits {sc.probs.shape}")
        if g_probs_next is not None:
            g_logits = g_logits + softmax_rows_backward(sc.probs, g_probs_next).d_input

        head = conv1x1_backward(sc.final_h, stage.head_w, g_logits)
        grads[f"{name}/head_w"] = head.d_weights
        grads[f"{name}/head_b"] = head.d_bias

        g_h = head.d_input
        for l in range(len(stage.layers) - 1, -1, -1):
            g_h = _layer_backward(stage.layers[l], sc.layer_caches[l], g_h,
                                  cfg.fuse_mode, grads, f"{name}/layer{l + 1}")

        proj = conv1x1_backward(sc.stage_input, stage.proj_w, g_h)
        grads[f"{name}/proj_w"] = proj.d_weights
        grads[f"{name}/proj_b"] = proj.d_bias
        g_probs_next = proj.d_input if s > 0 else None
    return grads


# ---------------------------------------------------------------------------
# serialization: magic "MTPP", u32 version, config, then float32 LE params
# ---------------------------------------------------------------------------

_CONFIG_STRUCT = struct.Struct("<7I")  # in_dim, channels, classes, stages, L_pred, L_ref, fuse


def model_to_bytes(model: Model) -> bytes:
    cfg = model.config
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _CONFIG_STRUCT.pack(cfg.in_dim, cfg.channels, cfg.n_classes, cfg.stages,
                            cfg.layers_prediction, cfg.layers_refinement,
                            _FUSE_MODES.index(cfg.fuse_mode)),
    ]
    for _, param in named_parameters(model):
        parts.append(np.ascontiguousarray(param, dtype="<f4").tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes, offset: int = 0, dtype=np.float64) -> tuple[Model, int]:
    """Parse a serialized model; returns (model, offset past the model)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ModelFormatError("not a model file: bad magic bytes")
    offset += 4
    (version,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format version {version} "
                                f"(expected {FORMAT_VERSION})")
    try:
        fields = _CONFIG_STRUCT.unpack_from(buf, offset)
    except struct.error as exc:
        raise ModelFormatError(f"truncated model header: {exc}") from None
    offset += _CONFIG_STRUCT.size
    if fields[6] >= len(_FUSE_MODES):
        raise ModelFormatError(f"unknown fusion mode id {fields[6]}")
    cfg = StageConfig(in_dim=fields[0], channels=fields[1], n_classes=fields[2],
                      stages=fields[3], layers_prediction=fields[4],
                      layers_refinement=fields[5], fuse_mode=_FUSE_MODES[fields[6]])
    model = init(cfg, seed=0, dtype=dtype)
    for name, param in named_parameters(model):
        nbytes = param.size * 4
        if offset + nbytes > len(buf):
            raise ModelFormatError(f"model file truncated inside parameter {name}")
        values = np.frombuffer(buf, dtype="<f4", count=param.size, offset=offset)
        param[...] = values.reshape(param.shape).astype(dtype)
        offset += nbytes
    return model, offset


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path, dtype=np.float64) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    model, offset = model_from_bytes(buf, dtype=dtype)
    if offset != len(buf):
        raise ModelFormatError(f"{len(buf) - offset} unexpected trailing bytes in model file")
    return model
