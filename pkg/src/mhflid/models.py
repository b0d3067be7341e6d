"""Model zoo: declarative layer specs, a spec interpreter, and the client /
messenger architecture families.

Every model is a body (feature extractor) plus a head (task projector); the
protocol exchanges information at the body/head seam, so ``Model`` exposes
``forward_body`` / ``forward_head`` separately.  All shapes are audited at
build time — a spec that cannot run end-to-end fails construction, not the
first training step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    features: int = 0


KINDS = (
    "conv2d",
    "maxpool2d",
    "conv_transpose2d",
    "linear",
    "relu",
    "batchnorm1d",
    "flatten",
    "global_avg_pool",
    "res_block",
)


def conv(out_channels: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def pool(kernel: int, stride: int) -> LayerSpec:
    return LayerSpec("maxpool2d", kernel=kernel, stride=stride)


def convt(out_channels: int, kernel: int, stride: int) -> LayerSpec:
    return LayerSpec("conv_transpose2d", out_channels=out_channels, kernel=kernel, stride=stride)


def lin(features: int) -> LayerSpec:
    return LayerSpec("linear", features=features)


def act() -> LayerSpec:
    return LayerSpec("relu")


def bn() -> LayerSpec:
    return LayerSpec("batchnorm1d")


def flat() -> LayerSpec:
    return LayerSpec("flatten")


def gap() -> LayerSpec:
    return LayerSpec("global_avg_pool")


def res(channels: int) -> LayerSpec:
    return LayerSpec("res_block", out_channels=channels)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    task: str  # "classification" | "segmentation"
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    body: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...]


class MessengerSpec(ModelSpec):
    """Marker subclass: the shared lightweight model the server aggregates."""


# ---------------------------------------------------------------------------
# shape audit
# ---------------------------------------------------------------------------


def _step_shape(shape: tuple, layer: LayerSpec, where: str):
    """Advance a symbolic shape ('spatial', C, H, W) or ('flat', F) by one layer."""
    kind = layer.kind
    if kind == "conv2d":
        if shape[0] != "spatial":
            raise ShapeError(f"{where}: conv2d needs a spatial input, got {shape}")
        _, c, h, w = shape
        oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1 or layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
            raise ShapeError(f"{where}: conv2d kernel {layer.kernel} does not fit {h}x{w}")
        return ("spatial", layer.out_channels, oh, ow)
    if kind == "maxpool2d":
        if shape[0] != "spatial":
            raise ShapeError(f"{where}: maxpool2d needs a spatial input, got {shape}")
        _, c, h, w = shape
        if layer.kernel > h or layer.kernel > w:
            raise ShapeError(f"{where}: maxpool2d kernel {layer.kernel} exceeds {h}x{w}")
        oh = (h - layer.kernel) // layer.stride + 1
        ow = (w - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{where}: maxpool2d output is empty for {h}x{w}")
        return ("spatial", c, oh, ow)
    if kind == "conv_transpose2d":
        if shape[0] != "spatial":
            raise ShapeError(f"{where}: conv_transpose2d needs a spatial input, got {shape}")
        _, c, h, w = shape
        return ("spatial", layer.out_channels, (h - 1) * layer.stride + layer.kernel, (w - 1) * layer.stride + layer.kernel)
    if kind == "res_block":
        if shape[0] != "spatial":
            raise ShapeError(f"{where}: res_block needs a spatial input, got {shape}")
        if shape[1] != layer.out_channels:
            raise ShapeError(f"{where}: res_block channels {layer.out_channels} != incoming {shape[1]}")
        return shape
    if kind == "linear":
        if shape[0] != "flat":
            raise ShapeError(f"{where}: linear needs a flat input (use flatten/global_avg_pool), got {shape}")
        return ("flat", layer.features)
    if kind == "relu":
        return shape
    if kind == "batchnorm1d":
        if shape[0] != "flat":
            raise ShapeError(f"{where}: batchnorm1d needs a flat input, got {shape}")
        return shape
    if kind == "flatten":
        if shape[0] != "spatial":
            raise ShapeError(f"{where}: flatten needs a spatial input, got {shape}")
        _, c, h, w = shape
        return ("flat", c * h * w)
    if kind == "global_avg_pool":
        if shape[0] != "spatial":
            raise ShapeError(f"{where}: global_avg_pool needs a spatial input, got {shape}")
        return ("flat", shape[1])
    raise ShapeError(f"{where}: unknown layer kind {kind!r}")


def audit_spec(spec: ModelSpec) -> dict:
    """Walk the spec symbolically; returns body/head output shapes or raises."""
    c, h, w = spec.input_shape
    shape = ("spatial", c, h, w)
    for i, layer in enumerate(spec.body):
        shape = _step_shape(shape, layer, f"{spec.name} body[{i}]")
    body_out = shape
    for i, layer in enumerate(spec.head):
        shape = _step_shape(shape, layer, f"{spec.name} head[{i}]")
    head_out = shape
    if spec.task == "classification":
        if head_out != ("flat", spec.num_classes):
            raise ShapeError(f"{spec.name}: classification head must end at {spec.num_classes} logits, got {head_out}")
    elif spec.task == "segmentation":
        if head_out != ("spatial", spec.num_classes, h, w):
            raise ShapeError(
                f"{spec.name}: segmentation head must end at ({spec.num_classes}, {h}, {w}) logit planes, got {head_out}"
            )
    else:
        raise ShapeError(f"{spec.name}: unknown task {spec.task!r}")
    if body_out[0] != "spatial":
        raise ShapeError(f"{spec.name}: body must end spatial (it feeds the token exchange), got {body_out}")
    return {"body_out": body_out, "head_out": head_out, "grid": (body_out[2], body_out[3]), "d_body": body_out[1]}


# ---------------------------------------------------------------------------
# build + forward
# ---------------------------------------------------------------------------


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    def __init__(self, spec: ModelSpec, params: dict[str, Parameter], audit: dict, prefix: str = ""):
        self.spec = spec
        self.params = params
        self.prefix = prefix
        self.training = True
        self.grid: tuple[int, int] = audit["grid"]
        self.d_body: int = audit["d_body"]

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable or not trainable_only]

    def param_count(self) -> int:
        return sum(p.tensor.data.size for p in self.params.values() if p.trainable)

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.tensor.data) for name, p in self.params.items()]

    def load_state(self, items: Iterable[tuple[str, np.ndarray]]) -> None:
        incoming = dict(items)
        if set(incoming) != set(self.params):
            missing = set(self.params) - set(incoming)
            extra = set(incoming) - set(self.params)
            raise ShapeError(f"load_state name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, value in incoming.items():
            p = self.params[name]
            if value.shape != p.tensor.data.shape:
                raise ShapeError(f"load_state: {name} shape {value.shape} != {p.tensor.data.shape}")
            p.tensor.data = np.array(value, dtype=np.float32, order="C")

    # -- forward ----------------------------------------------------------

    def _apply(self, layers: tuple[LayerSpec, ...], section: str, x: Tensor) -> Tensor:
        for i, layer in enumerate(layers):
            prefix = f"{self.prefix}{section}.{i}"
            kind = layer.kind
            if kind == "conv2d":
                x = T.conv2d(
                    x,
                    self.params[f"{prefix}.weight"].tensor,
                    self.params[f"{prefix}.bias"].tensor,
                    stride=layer.stride,
                    padding=layer.padding,
                )
            elif kind == "maxpool2d":
                x = T.maxpool2d(x, layer.kernel, layer.stride)
            elif kind == "conv_transpose2d":
                x = T.conv_transpose2d(
                    x,
                    self.params[f"{prefix}.weight"].tensor,
                    self.params[f"{prefix}.bias"].tensor,
                    stride=layer.stride,
                )
            elif kind == "linear":
                x = T.linear(x, self.params[f"{prefix}.weight"].tensor, self.params[f"{prefix}.bias"].tensor)
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "batchnorm1d":
                x = T.batchnorm1d(
                    x,
                    self.params[f"{prefix}.weight"].tensor,
                    self.params[f"{prefix}.bias"].tensor,
                    self.params[f"{prefix}.running_mean"].tensor.data,
                    self.params[f"{prefix}.running_var"].tensor.data,
                    training=self.training,
                )
            elif kind == "flatten":
                x = T.reshape(x, (x.shape[0], -1))
            elif kind == "global_avg_pool":
                if x.ndim == 4:
                    x = T.tmean(x, axis=(2, 3))
                elif x.ndim == 3:
                    x = T.tmean(x, axis=1)
                else:
                    raise ShapeError(f"global_avg_pool: rank {x.ndim} input")
            elif kind == "res_block":
                y = T.relu(
                    T.conv2d(
                        x,
                        self.params[f"{prefix}.conv1.weight"].tensor,
                        self.params[f"{prefix}.conv1.bias"].tensor,
                        stride=1,
                        padding=1,
                    )
                )
                z = T.conv2d(
                    y,
                    self.params[f"{prefix}.conv2.weight"].tensor,
                    self.params[f"{prefix}.conv2.bias"].tensor,
                    stride=1,
                    padding=1,
                )
                x = T.relu(T.add(z, x))
            else:
                raise ShapeError(f"unknown layer kind {kind!r}")
        return x

    def forward_body(self, x: Tensor) -> Tensor:
        return self._apply(self.spec.body, "body", x)

    def forward_head(self, feat: Tensor) -> Tensor:
        if feat.ndim == 3:
            first = self.spec.head[0].kind if self.spec.head else ""
            if first in ("conv2d", "conv_transpose2d", "maxpool2d", "res_block", "flatten"):
                feat = tokens_to_features(feat, self.grid)
        return self._apply(self.spec.head, "head", feat)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_head(self.forward_body(x))


def build_model(spec: ModelSpec, seed: int, prefix: str = "") -> Model:
    """Materialize a spec: He-uniform conv/linear weights, zero biases,
    unit-variance batch-norm buffers.  ``prefix`` namespaces the parameter
    names (the messenger uses ``mes.`` so its names can never collide with a
    local model's)."""
    audit = audit_spec(spec)
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def add_param(name: str, data: np.ndarray, trainable: bool = True) -> None:
        params[name] = Parameter(name, Tensor(data, requires_grad=trainable), trainable=trainable)

    c, h, w = spec.input_shape
    shape = ("spatial", c, h, w)
    for section, layers in (("body", spec.body), ("head", spec.head)):
        for i, layer in enumerate(layers):
            prefix_i = f"{prefix}{section}.{i}"
            kind = layer.kind
            if kind == "conv2d":
                in_c = shape[1]
                fan_in = in_c * layer.kernel * layer.kernel
                add_param(f"{prefix_i}.weight", _he_uniform(rng, (layer.out_channels, in_c, layer.kernel, layer.kernel), fan_in))
                add_param(f"{prefix_i}.bias", np.zeros(layer.out_channels, dtype=np.float32))
            elif kind == "conv_transpose2d":
                in_c = shape[1]
                fan_in = in_c * layer.kernel * layer.kernel
                add_param(f"{prefix_i}.weight", _he_uniform(rng, (in_c, layer.out_channels, layer.kernel, layer.kernel), fan_in))
                add_param(f"{prefix_i}.bias", np.zeros(layer.out_channels, dtype=np.float32))
            elif kind == "linear":
                in_f = shape[1]
                add_param(f"{prefix_i}.weight", _he_uniform(rng, (in_f, layer.features), in_f))
                add_param(f"{prefix_i}.bias", np.zeros(layer.features, dtype=np.float32))
            elif kind == "batchnorm1d":
                f = shape[1]
                add_param(f"{prefix_i}.weight", np.ones(f, dtype=np.float32))
                add_param(f"{prefix_i}.bias", np.zeros(f, dtype=np.float32))
                add_param(f"{prefix_i}.running_mean", np.zeros(f, dtype=np.float32), trainable=False)
                add_param(f"{prefix_i}.running_var", np.ones(f, dtype=np.float32), trainable=False)
            elif kind == "res_block":
                ch = layer.out_channels
                fan_in = ch * 9
                add_param(f"{prefix_i}.conv1.weight", _he_uniform(rng, (ch, ch, 3, 3), fan_in))
                add_param(f"{prefix_i}.conv1.bias", np.zeros(ch, dtype=np.float32))
                add_param(f"{prefix_i}.conv2.weight", _he_uniform(rng, (ch, ch, 3, 3), fan_in))
                add_param(f"{prefix_i}.conv2.bias", np.zeros(ch, dtype=np.float32))
            shape = _step_shape(shape, layer, f"{spec.name} {prefix_i}")
    return Model(spec, params, audit, prefix=prefix)


# ---------------------------------------------------------------------------
# token <-> feature map views of a body output
# ---------------------------------------------------------------------------


def features_to_tokens(feat: Tensor) -> Tensor:
    """(N, C, H, W) feature map -> (N, H*W, C) token sequence."""
    if feat.ndim != 4:
        raise ShapeError(f"features_to_tokens expects rank 4, got {feat.data.shape}")
    n, c, h, w = feat.shape
    return T.reshape(T.permute(feat, (0, 2, 3, 1)), (n, h * w, c))


def tokens_to_features(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """(N, T, D) token sequence -> (N, D, h, w) with T == h*w."""
    if tokens.ndim != 3:
        raise ShapeError(f"tokens_to_features expects rank 3, got {tokens.data.shape}")
    n, t, d = tokens.shape
    h, w = grid
    if t != h * w:
        raise ShapeError(f"tokens_to_features: {t} tokens cannot fill a {h}x{w} grid")
    return T.permute(T.reshape(tokens, (n, h, w, d)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# architecture families
# ---------------------------------------------------------------------------

_TCN_WIDTHS = {2: (24, 48), 3: (16, 32, 64), 4: (16, 32, 48, 64), 5: (16, 32, 48, 64, 80)}
_TCN_FC = {2: 224, 3: 160, 4: 416, 5: 224}
_TCN_POOL_BUDGET = {2: 2, 3: 2, 4: 3, 5: 3}


def tiny_convnet(depth: int, num_classes: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    """Plain conv stacks of depth 2..5; pooling adapts to the input size so the
    same family serves the reduced-resolution clients."""
    if depth not in _TCN_WIDTHS:
        raise ShapeError(f"tiny_convnet depth must be 2..5, got {depth}")
    widths = _TCN_WIDTHS[depth]
    body: list[LayerSpec] = []
    spatial = input_shape[1]
    pools = 0
    for i, width in enumerate(widths):
        body += [conv(width, 3, stride=1, padding=1), act()]
        if spatial >= 4 and pools < _TCN_POOL_BUDGET[depth]:
            body.append(pool(2, 2))
            spatial //= 2
            pools += 1
    head = [flat(), lin(_TCN_FC[depth]), act(), lin(num_classes)]
    return ModelSpec(f"tiny_convnet_{depth}", "classification", input_shape, num_classes, tuple(body), tuple(head))


def classification_messenger(
    num_classes: int,
    input_shape: tuple[int, int, int],
    widths: tuple[int, int, int] = (16, 16, 32),
    hidden: int = 64,
    conv_stride: int = 1,
) -> MessengerSpec:
    """Conv3/pool3/conv5/pool3/conv7 body and a small linear+batchnorm head."""
    w1, w2, w3 = widths
    body = (
        conv(w1, 3, stride=conv_stride, padding=1),
        act(),
        pool(3, 2),
        conv(w2, 5, stride=conv_stride, padding=2),
        act(),
        pool(3, 2),
        conv(w3, 7, stride=conv_stride, padding=3),
        act(),
    )
    head = (gap(), lin(hidden), bn(), act(), lin(num_classes))
    return MessengerSpec("messenger_cls", "classification", input_shape, num_classes, body, head)


def _seg_body(widths: tuple[int, ...], input_shape: tuple[int, int, int]) -> list[LayerSpec]:
    if input_shape[1] != 32 or input_shape[2] != 32:
        raise ShapeError(f"segmentation families are fixed at 32x32 input, got {input_shape[1:]}")
    body: list[LayerSpec] = []
    for width in widths:
        body += [conv(width, 3, stride=1, padding=1), act(), pool(2, 2)]
    return body


def tiny_fcn(num_classes: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    body = _seg_body((24, 32, 48, 64), input_shape)
    head = [convt(32, 4, 4), act(), convt(num_classes, 4, 4)]
    return ModelSpec("tiny_fcn", "segmentation", input_shape, num_classes, tuple(body), tuple(head))


def tiny_unet(num_classes: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    body = _seg_body((16, 32, 48, 64), input_shape)
    head = [convt(48, 2, 2), act(), convt(32, 2, 2), act(), convt(24, 2, 2), act(), convt(num_classes, 2, 2)]
    return ModelSpec("tiny_unet", "segmentation", input_shape, num_classes, tuple(body), tuple(head))


def tiny_encdec(num_classes: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    body = _seg_body((24, 32, 48, 64), input_shape)
    head = [convt(40, 2, 2), act(), convt(24, 2, 2), act(), convt(16, 2, 2), act(), convt(num_classes, 2, 2)]
    return ModelSpec("tiny_encdec", "segmentation", input_shape, num_classes, tuple(body), tuple(head))


def tiny_res_encdec(num_classes: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    if input_shape[1] != 32 or input_shape[2] != 32:
        raise ShapeError(f"segmentation families are fixed at 32x32 input, got {input_shape[1:]}")
    body = (
        conv(24, 3, stride=1, padding=1), act(), pool(2, 2), res(24),
        conv(40, 3, stride=1, padding=1), act(), pool(2, 2), res(40),
        conv(56, 3, stride=1, padding=1), act(), pool(2, 2),
        conv(64, 3, stride=1, padding=1), act(), pool(2, 2),
    )
    head = (convt(32, 2, 2), act(), convt(24, 2, 2), act(), convt(16, 2, 2), act(), convt(num_classes, 2, 2))
    return ModelSpec("tiny_res_encdec", "segmentation", input_shape, num_classes, body, head)


def segmentation_messenger(
    num_classes: int,
    input_shape: tuple[int, int, int],
    widths: tuple[int, int, int, int] = (8, 8, 8, 16),
    head_widths: tuple[int, int, int] = (8, 8, 8),
) -> MessengerSpec:
    """Four conv/pool stages down to a 2x2 grid, mirrored by four deconvs."""
    if input_shape[1] != 32 or input_shape[2] != 32:
        raise ShapeError(f"segmentation messenger is fixed at 32x32 input, got {input_shape[1:]}")
    w1, w2, w3, w4 = widths
    body = (
        conv(w1, 3, stride=1, padding=1), act(), pool(2, 2),
        conv(w2, 5, stride=1, padding=2), act(), pool(2, 2),
        conv(w3, 7, stride=1, padding=3), act(), pool(2, 2),
        conv(w4, 7, stride=1, padding=3), act(), pool(2, 2),
    )
    h1, h2, h3 = head_widths
    head = (convt(h1, 2, 2), act(), convt(h2, 2, 2), act(), convt(h3, 2, 2), act(), convt(num_classes, 2, 2))
    return MessengerSpec("messenger_seg", "segmentation", input_shape, num_classes, body, head)


CLASSIFICATION_ARCHS = {
    "tiny_convnet_2": lambda nc, ishape: tiny_convnet(2, nc, ishape),
    "tiny_convnet_3": lambda nc, ishape: tiny_convnet(3, nc, ishape),
    "tiny_convnet_4": lambda nc, ishape: tiny_convnet(4, nc, ishape),
    "tiny_convnet_5": lambda nc, ishape: tiny_convnet(5, nc, ishape),
}

SEGMENTATION_ARCHS = {
    "tiny_fcn": tiny_fcn,
    "tiny_unet": tiny_unet,
    "tiny_encdec": tiny_encdec,
    "tiny_res_encdec": tiny_res_encdec,
}


def build_client_spec(arch: str, num_classes: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    if arch in CLASSIFICATION_ARCHS:
        return CLASSIFICATION_ARCHS[arch](num_classes, input_shape)
    if arch in SEGMENTATION_ARCHS:
        return SEGMENTATION_ARCHS[arch](num_classes, input_shape)
    raise ShapeError(f"unknown architecture {arch!r} (choices: {sorted(CLASSIFICATION_ARCHS) + sorted(SEGMENTATION_ARCHS)})")
