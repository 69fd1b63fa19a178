"""FusionActNet: static and dynamic expert pathways joined by a guidance gate.

Each expert maps a window batch to a probability row over its own
superclass. The guidance module maps the same window to a scalar gate
``g`` and the fused output is the concatenation ``[g * y_s, (1 - g) * y_d]``
laid out in ``class_order`` (static labels first). The loss is the mean
negative log-likelihood of the fused distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    DwSepBlockParams,
    ResidualBlockParams,
    dwsep_block,
    global_avgpool,
    linear,
    residual_block,
)
from .tensor import ShapeError, Tensor

LOG_EPS = 1e-12

DEFAULT_PATHWAY_WIDTHS = ((64, 2), (128, 2), (256, 2), (256, 2))
DEFAULT_GUIDANCE_WIDTHS = (32, 64, 64)


class ModelError(RuntimeError):
    """The model is missing a component needed for the requested call."""


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class PathwayConfig:
    block_specs: list[tuple[int, int, int]]
    num_outputs: int

    def __post_init__(self):
        self.block_specs = [tuple(int(v) for v in spec) for spec in self.block_specs]
        if not self.block_specs:
            raise ValueError("a pathway needs at least one residual block")
        for (_, d_out, _), (d_in, _, _) in zip(self.block_specs, self.block_specs[1:]):
            if d_out != d_in:
                raise ValueError(f"residual blocks do not chain: {self.block_specs}")
        if self.num_outputs < 1:
            raise ValueError("num_outputs must be >= 1")

    @classmethod
    def default(cls, in_channels: int, num_outputs: int, widths=DEFAULT_PATHWAY_WIDTHS):
        specs, d_in = [], in_channels
        for d_out, d_pool in widths:
            specs.append((d_in, d_out, d_pool))
            d_in = d_out
        return cls(specs, num_outputs)

    @property
    def in_channels(self) -> int:
        return self.block_specs[0][0]

    @property
    def feature_dim(self) -> int:
        return self.block_specs[-1][1]


@dataclass
class GuidanceConfig:
    """DwSep channel chain ``[c0, c1, ..., ck]`` followed by linear(ck -> 1)."""

    dwsep_specs: list[int]

    def __post_init__(self):
        self.dwsep_specs = [int(c) for c in self.dwsep_specs]
        if len(self.dwsep_specs) < 2:
            raise ValueError("guidance needs an input width and at least one DwSep block")

    @classmethod
    def default(cls, in_channels: int, widths=DEFAULT_GUIDANCE_WIDTHS):
        return cls([in_channels, *widths])

    @property
    def in_channels(self) -> int:
        return self.dwsep_specs[0]

    @property
    def hidden_to_scalar(self) -> tuple[int, int]:
        return (self.dwsep_specs[-1], 1)


class ModelParams:
    """Named parameter and buffer access shared by pathways and the gate."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def _name_tensors(self) -> None:
        for name, t in self.named_parameters():
            t.name = name


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


@dataclass
class Pathway(ModelParams):
    """Residual expert M_s or M_d."""

    config: PathwayConfig
    blocks: list[ResidualBlockParams]
    fc_weight: Tensor
    fc_bias: Tensor

    @classmethod
    def init(cls, config: PathwayConfig, rng: np.random.Generator) -> "Pathway":
        blocks = [ResidualBlockParams.init(rng, *spec) for spec in config.block_specs]
        fan_in = config.feature_dim
        bound = np.sqrt(1.0 / fan_in)
        p = cls(
            config,
            blocks,
            Tensor(rng.uniform(-bound, bound, (config.num_outputs, fan_in)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, config.num_outputs), requires_grad=True),
        )
        p._name_tensors()
        return p

    def named_parameters(self, prefix=""):
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(_join(prefix, f"block{i}"))
        yield _join(prefix, "fc.weight"), self.fc_weight
        yield _join(prefix, "fc.bias"), self.fc_bias

    def named_buffers(self, prefix=""):
        for i, b in enumerate(self.blocks):
            yield from b.named_buffers(_join(prefix, f"block{i}"))


@dataclass
class Guidance(ModelParams):
    config: GuidanceConfig
    blocks: list[DwSepBlockParams]
    fc_weight: Tensor  # [1, hidden]
    fc_bias: Tensor  # [1]

    @classmethod
    def init(cls, config: GuidanceConfig, rng: np.random.Generator) -> "Guidance":
        chain = config.dwsep_specs
        blocks = [DwSepBlockParams.init(rng, c_in, c_out) for c_in, c_out in zip(chain, chain[1:])]
        fan_in = chain[-1]
        bound = np.sqrt(1.0 / fan_in)
        g = cls(
            config,
            blocks,
            Tensor(rng.uniform(-bound, bound, (1, fan_in)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, 1), requires_grad=True),
        )
        g._name_tensors()
        return g

    def named_parameters(self, prefix=""):
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(_join(prefix, f"dwsep{i}"))
        yield _join(prefix, "fc.weight"), self.fc_weight
        yield _join(prefix, "fc.bias"), self.fc_bias

    def named_buffers(self, prefix=""):
        for i, b in enumerate(self.blocks):
            yield from b.named_buffers(_join(prefix, f"dwsep{i}"))


@dataclass
class PredictionVector:
    probs: Tensor  # [batch, n]
    gate: Tensor  # [batch, 1]


@dataclass
class FusionModel:
    """Both experts, the gate, and everything needed to interpret outputs."""

    static: Pathway | None
    dynamic: Pathway | None
    guidance: Guidance | None
    static_labels: list[str]
    dynamic_labels: list[str]
    in_channels: int
    window_len: int = 128
    dataset: str = ""
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    run_config: dict = field(default_factory=dict)

    def __post_init__(self):
        order = self.class_order
        if len(set(order)) != len(order):
            raise ValueError(f"class order has duplicates: {order}")
        if self.static is not None and self.static.config.num_outputs != len(self.static_labels):
            raise ValueError("static pathway output count does not match its labels")
        if self.dynamic is not None and self.dynamic.config.num_outputs != len(self.dynamic_labels):
            raise ValueError("dynamic pathway output count does not match its labels")

    @classmethod
    def init(
        cls,
        static_labels: Sequence[str],
        dynamic_labels: Sequence[str],
        in_channels: int,
        seed: int = 0,
        pathway_widths=DEFAULT_PATHWAY_WIDTHS,
        guidance_widths=DEFAULT_GUIDANCE_WIDTHS,
        **kwargs,
    ) -> "FusionModel":
        rng = np.random.default_rng(seed)
        return cls(
            static=Pathway.init(PathwayConfig.default(in_channels, len(static_labels), pathway_widths), rng),
            dynamic=Pathway.init(PathwayConfig.default(in_channels, len(dynamic_labels), pathway_widths), rng),
            guidance=Guidance.init(GuidanceConfig.default(in_channels, guidance_widths), rng),
            static_labels=list(static_labels),
            dynamic_labels=list(dynamic_labels),
            in_channels=in_channels,
            **kwargs,
        )

    @property
    def class_order(self) -> list[str]:
        return [*self.static_labels, *self.dynamic_labels]

    @property
    def n_static(self) -> int:
        return len(self.static_labels)

    def components(self) -> dict[str, ModelParams]:
        parts = {"static": self.static, "dynamic": self.dynamic, "guidance": self.guidance}
        return {k: v for k, v in parts.items() if v is not None}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for key, part in self.components().items():
            yield from part.named_parameters(key)

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for key, part in self.components().items():
            yield from part.named_buffers(key)

    def is_complete(self) -> bool:
        return None not in (self.static, self.dynamic, self.guidance)


# ---------------------------------------------------------------------------
# forward passes


def _check_window(x: Tensor, channels: int, window_len: int | None = None) -> None:
    if x.ndim != 3 or x.shape[1] != channels:
        raise ShapeError(f"expected windows shaped [batch, {channels}, time], got {x.shape}")
    if window_len is not None and x.shape[2] != window_len:
        raise ShapeError(f"expected window length {window_len}, got {x.shape[2]}")


def pathway_logits(x, m: Pathway, mode: str) -> Tensor:
    x = _as_input(x)
    _check_window(x, m.config.in_channels)
    h = x
    for block in m.blocks:
        h = residual_block(h, block, mode)
    if h.shape[2] < 1:
        raise ShapeError(f"input length {x.shape[2]} is pooled away by the residual blocks")
    return linear(global_avgpool(h), m.fc_weight, m.fc_bias)


def static_forward(x, m: Pathway, mode: str = "eval") -> Tensor:
    """Probability rows y_s over the static classes."""
    return T.softmax(pathway_logits(x, m, mode), axis=1)


def dynamic_forward(x, m: Pathway, mode: str = "eval") -> Tensor:
    """Probability rows y_d over the dynamic classes."""
    return T.softmax(pathway_logits(x, m, mode), axis=1)


def guidance_forward(x, g: Guidance, mode: str = "eval") -> Tensor:
    """Gate g_x in (0, 1) per sample, shape [batch, 1]; near 1 favours static."""
    x = _as_input(x)
    _check_window(x, g.config.in_channels)
    h = x
    for block in g.blocks:
        h = dwsep_block(h, block, mode)
    return T.sigmoid(linear(global_avgpool(h), g.fc_weight, g.fc_bias))


def fuse(y_s: Tensor, y_d: Tensor, g_x: Tensor, class_order: Sequence[str] | None = None) -> Tensor:
    if y_s.ndim != 2 or y_d.ndim != 2 or y_s.shape[0] != y_d.shape[0]:
        raise ShapeError(f"cannot fuse {y_s.shape} with {y_d.shape}")
    if g_x.shape != (y_s.shape[0], 1):
        raise ShapeError(f"gate must be [batch, 1], got {g_x.shape}")
    if class_order is not None and y_s.shape[1] + y_d.shape[1] != len(class_order):
        raise ShapeError(
            f"{y_s.shape[1]} + {y_d.shape[1]} fused classes, class order has {len(class_order)}"
        )
    return T.concat([T.mul(g_x, y_s), T.mul(T.sub(Tensor(1.0), g_x), y_d)], axis=1)


def forward(x, model: FusionModel, mode: str = "eval", expert_mode: str | None = None) -> PredictionVector:
    """Full fused prediction. ``expert_mode`` overrides the mode of both experts."""
    if not model.is_complete():
        raise ModelError("model lacks a pathway or the guidance module")
    x = _as_input(x)
    _check_window(x, model.in_channels, model.window_len)
    emode = expert_mode or mode
    y_s = static_forward(x, model.static, emode)
    y_d = dynamic_forward(x, model.dynamic, emode)
    g = guidance_forward(x, model.guidance, mode)
    return PredictionVector(fuse(y_s, y_d, g, model.class_order), g)


def nll_loss(probs: Tensor, labels) -> Tensor:
    """Mean of -log(p[label] + 1e-12) over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match predictions {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise IndexError(f"label out of range for {probs.shape[1]} classes")
    picked = T.take(probs, (np.arange(labels.size), labels))
    return T.mean(T.neg(T.log(T.add(picked, Tensor(LOG_EPS)))))


loss = nll_loss


def predict_indices(x, model: FusionModel) -> np.ndarray:
    probs = forward(x, model, "eval").probs.data
    return probs.argmax(axis=1)


def predict(x, model: FusionModel | None) -> list[str]:
    """Fused argmax label for each window; ties go to the lower class index."""
    if model is None:
        raise ModelError("no model loaded")
    order = model.class_order
    return [order[i] for i in predict_indices(x, model)]
