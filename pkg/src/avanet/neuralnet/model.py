"""The rotation-invariant hazard classifier.

One shared sub-network (four conv stages, snow injected as an extra channel
after the third, then a dense head) processes every viewport of a stack.
The 16 logit triples are concatenated and merged by a final dense readout
into three class probabilities. Because all sub-networks share one set of
weights, rotating the viewport ring only permutes the readout's input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..viewport import ViewportGeometry, ViewportStack
from . import ops
from .layers import ConvLayer, DenseLayer, ParameterSet, conv_forward, dense_forward
from .tensor import Tensor

#: The snow channel joins the feature maps produced by this conv stage.
SNOW_INJECT_AFTER = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; defaults give roughly 390k parameters."""

    geometry: ViewportGeometry = field(default_factory=ViewportGeometry)
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    conv_sizes: tuple[tuple[int, int], ...] = ((5, 5), (5, 5), (3, 3), (3, 3))
    dense_widths: tuple[int, ...] = (512, 512, 3)
    dropout_rate: float = 0.5
    pool_after_conv: bool = True
    n_classes: int = 3

    def __post_init__(self):
        if len(self.conv_channels) != len(self.conv_sizes):
            raise ValueError("conv_channels and conv_sizes must have equal length")
        if len(self.conv_channels) < SNOW_INJECT_AFTER + 1:
            raise ValueError(f"need at least {SNOW_INJECT_AFTER + 1} conv stages")
        if self.dense_widths[-1] != self.n_classes:
            raise ValueError("last dense width must equal the number of classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_json(self) -> str:
        d = {
            "geometry": {
                "n_viewports": self.geometry.n_viewports,
                "radial_length": self.geometry.radial_length,
                "tangential_width": self.geometry.tangential_width,
                "resolution": self.geometry.resolution,
                "snow_downscale": self.geometry.snow_downscale,
            },
            "conv_channels": list(self.conv_channels),
            "conv_sizes": [list(s) for s in self.conv_sizes],
            "dense_widths": list(self.dense_widths),
            "dropout_rate": self.dropout_rate,
            "pool_after_conv": self.pool_after_conv,
            "n_classes": self.n_classes,
        }
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        return cls(
            geometry=ViewportGeometry(**d["geometry"]),
            conv_channels=tuple(d["conv_channels"]),
            conv_sizes=tuple(tuple(s) for s in d["conv_sizes"]),
            dense_widths=tuple(d["dense_widths"]),
            dropout_rate=d["dropout_rate"],
            pool_after_conv=d["pool_after_conv"],
            n_classes=d["n_classes"],
        )


class HazardPrediction(NamedTuple):
    """Class probabilities for one point; sums to one."""

    green: float
    yellow: float
    red: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @property
    def top_class(self) -> int:
        return int(np.argmax(self))


@dataclass(frozen=True)
class SubnetPlan:
    """Spatial bookkeeping of the shared sub-network."""

    conv_spatial: tuple[tuple[int, int], ...]  # after each conv (and pool)
    snow_crop: tuple[int, int]
    flat_width: int
    readout_in: int


def subnet_plan(cfg: ModelConfig) -> SubnetPlan:
    """Propagate spatial shapes through the sub-network, validating them."""
    g = cfg.geometry
    h, w = g.radial_pixels, g.tangential_pixels
    spatial = []
    snow_crop = None
    channels = 1
    for stage, ((kh, kw), out_ch) in enumerate(zip(cfg.conv_sizes, cfg.conv_channels), 1):
        if h < kh or w < kw:
            raise ValueError(
                f"conv{stage}: feature map ({h}, {w}) smaller than filter ({kh}, {kw})"
            )
        h, w = h - kh + 1, w - kw + 1
        if cfg.pool_after_conv:
            if h < 2 or w < 2:
                raise ValueError(f"conv{stage}: feature map ({h}, {w}) too small to pool")
            h, w = h // 2, w // 2
        spatial.append((h, w))
        channels = out_ch
        if stage == SNOW_INJECT_AFTER:
            if g.snow_radial_pixels < h or g.snow_tangential_pixels < w:
                raise ValueError(
                    f"snow patch ({g.snow_radial_pixels}, {g.snow_tangential_pixels}) "
                    f"smaller than conv{stage} output ({h}, {w}); "
                    "adjust snow_downscale or pooling"
                )
            snow_crop = (h, w)
    flat = channels * h * w
    return SubnetPlan(
        conv_spatial=tuple(spatial),
        snow_crop=snow_crop,
        flat_width=flat,
        readout_in=cfg.n_classes * g.n_viewports,
    )


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> ParameterSet:
    """Fresh parameters: He-normal weights, zero biases, stable ordering."""
    plan = subnet_plan(cfg)
    params = ParameterSet()

    in_ch = 1
    for i, (out_ch, size) in enumerate(zip(cfg.conv_channels, cfg.conv_sizes), 1):
        layer = ConvLayer.create(in_ch, out_ch, size, rng, dtype=dtype, prefix=f"conv{i}")
        params.register(f"conv{i}.filters", layer.filters)
        params.register(f"conv{i}.biases", layer.biases)
        in_ch = out_ch
        if i == SNOW_INJECT_AFTER:
            in_ch += 1  # the snow channel

    n_in = plan.flat_width
    for i, width in enumerate(cfg.dense_widths, 1):
        act = "identity" if i == len(cfg.dense_widths) else "relu"
        layer = DenseLayer.create(n_in, width, act, rng, dtype=dtype, prefix=f"dense{i}")
        params.register(f"dense{i}.weights", layer.weights)
        params.register(f"dense{i}.biases", layer.biases)
        n_in = width

    readout = DenseLayer.create(
        plan.readout_in, cfg.n_classes, "identity", rng, dtype=dtype, prefix="readout"
    )
    params.register("readout.weights", readout.weights)
    params.register("readout.biases", readout.biases)
    return params


def _conv_layer(params: ParameterSet, i: int) -> ConvLayer:
    return ConvLayer(filters=params[f"conv{i}.filters"], biases=params[f"conv{i}.biases"])


def _dense_layer(params: ParameterSet, name: str, activation: str) -> DenseLayer:
    return DenseLayer(
        weights=params[f"{name}.weights"],
        biases=params[f"{name}.biases"],
        activation=activation,
    )


def _subnet_batch(patches: Tensor, snow: Tensor, params, cfg, mode, rng) -> Tensor:
    """Shared sub-network on a (N, 1, R, T) batch; returns (N, n_classes) logits."""
    plan = subnet_plan(cfg)
    x = patches
    for i in range(1, len(cfg.conv_channels) + 1):
        x = conv_forward(x, _conv_layer(params, i))
        if cfg.pool_after_conv:
            x = ops.maxpool2(x)
        if i == SNOW_INJECT_AFTER:
            snow_cropped = ops.crop_center(snow, *plan.snow_crop)
            x = ops.concat(x, snow_cropped, axis=1)
    x = ops.reshape(x, (x.data.shape[0], plan.flat_width))
    n_dense = len(cfg.dense_widths)
    for i in range(1, n_dense + 1):
        act = "identity" if i == n_dense else "relu"
        x = dense_forward(x, _dense_layer(params, f"dense{i}", act))
        if i < n_dense:
            x = ops.dropout(x, cfg.dropout_rate, mode, rng)
    return x


def subnet_forward(patch, snow_patch, params: ParameterSet, cfg: ModelConfig,
                   mode: str = "eval", rng=None) -> Tensor:
    """Logits of the shared sub-network for a single viewport.

    ``patch`` is the (radial, tangential) terrain patch, ``snow_patch`` the
    coarse snow patch; both in normalized units.
    """
    dtype = params.tensors()[0].data.dtype
    p = np.asarray(patch, dtype=dtype)
    s = np.asarray(snow_patch, dtype=dtype)
    logits = _subnet_batch(
        Tensor(p[None, None]), Tensor(s[None, None]), params, cfg, mode, rng
    )
    return ops.reshape(logits, (cfg.n_classes,))


def forward_probs(terrain_batch, snow_batch, params: ParameterSet, cfg: ModelConfig,
                  mode: str = "eval", rng=None, merge: str = "readout") -> Tensor:
    """Class probabilities for a batch of viewport stacks.

    ``terrain_batch`` has shape (B, V, R, T) and ``snow_batch``
    (B, V, r, t); every viewport passes through the same sub-network.
    ``merge='readout'`` concatenates the per-viewport logits and applies the
    dense readout; ``merge='mean'`` averages them instead (a diagnostic mode
    whose output is exactly invariant under viewport rotation).
    """
    dtype = params.tensors()[0].data.dtype
    t = np.asarray(terrain_batch, dtype=dtype)
    s = np.asarray(snow_batch, dtype=dtype)
    if t.ndim != 4 or s.ndim != 4:
        raise ValueError("expected (batch, viewports, rows, cols) inputs")
    b, v = t.shape[:2]
    if v != cfg.geometry.n_viewports or s.shape[:2] != (b, v):
        raise ValueError(
            f"stack has {v} viewports, geometry expects {cfg.geometry.n_viewports}"
        )
    patches = Tensor(t.reshape(b * v, 1, *t.shape[2:]))
    snow = Tensor(s.reshape(b * v, 1, *s.shape[2:]))
    logits = _subnet_batch(patches, snow, params, cfg, mode, rng)  # (B*V, C)
    if merge == "readout":
        merged = dense_forward(
            ops.reshape(logits, (b, v * cfg.n_classes)),
            _dense_layer(params, "readout", "identity"),
        )
    elif merge == "mean":
        merged = ops.mean_axis(ops.reshape(logits, (b, v, cfg.n_classes)), axis=1)
    else:
        raise ValueError(f"unknown merge mode {merge!r}")
    return ops.softmax(merged)


def model_forward(stack: ViewportStack, params: ParameterSet, cfg: ModelConfig,
                  mode: str = "eval", rng=None, merge: str = "readout") -> HazardPrediction:
    """Class probabilities for one query point."""
    probs = forward_probs(
        stack.terrain[None], stack.snow[None], params, cfg, mode, rng, merge
    )
    green, yellow, red = (float(x) for x in probs.data[0])
    return HazardPrediction(green=green, yellow=yellow, red=red)


def parameter_summary(params: ParameterSet):
    """Exact parameter counts grouped by layer.

    Returns ``(per_layer, total)`` where ``per_layer`` maps layer names (the
    part before the first dot) to element counts in registration order.
    """
    per_layer: dict[str, int] = {}
    for name, tensor in params:
        layer = name.split(".", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + tensor.data.size
    return per_layer, params.total_count


def format_parameter_summary(params: ParameterSet) -> str:
    per_layer, total = parameter_summary(params)
    lines = [f"{layer:>10s}  {count:>9,d}" for layer, count in per_layer.items()]
    lines.append(f"{'total':>10s}  {total:>9,d}")
    return "\n".join(lines)
