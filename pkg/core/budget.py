"""
Analytic MACs accounting for a declarative layer graph and the compute
budget gate. One MAC is one multiply-accumulate (2 FLOPs); biases,
activations, norms and pooling cost nothing.
"""

import math
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from shared.errors import ShapeMismatch

DEFAULT_BUDGET_GMACS = 50.0
GIGA = 10**9

_Positive = Annotated[int, Field(ge=1)]
_NonNegative = Annotated[int, Field(ge=0)]

# Shape state between layers: ("spatial", h, w, c) or ("tokens", length, dim).
Shape = Tuple


class _Layer(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class Conv2dLayer(_Layer):
    kind: Literal["conv2d"] = "conv2d"
    k_h: _Positive
    k_w: _Positive
    c_in: _Positive
    c_out: _Positive
    stride: _Positive = 1
    groups: _Positive = 1
    padding: Literal["same", "valid"] = "same"
    bias: bool = True
    in_h: Optional[_Positive] = None
    in_w: Optional[_Positive] = None

    @model_validator(mode="after")
    def _check_groups(self) -> "Conv2dLayer":
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}"
            )
        return self

    def output_hw(self) -> Tuple[int, int]:
        if self.in_h is None or self.in_w is None:
            raise ShapeMismatch("conv2d needs its input spatial dims")
        if self.padding == "same":
            return math.ceil(self.in_h / self.stride), math.ceil(self.in_w / self.stride)
        if self.in_h < self.k_h or self.in_w < self.k_w:
            raise ShapeMismatch(
                f"{self.k_h}x{self.k_w} kernel does not fit a {self.in_h}x{self.in_w} input"
            )
        return (
            (self.in_h - self.k_h) // self.stride + 1,
            (self.in_w - self.k_w) // self.stride + 1,
        )


class LinearLayer(_Layer):
    kind: Literal["linear"] = "linear"
    d_in: _Positive
    d_out: _Positive
    tokens: Optional[_Positive] = None
    bias: bool = True


class AttentionLayer(_Layer):
    kind: Literal["attention"] = "attention"
    seq_len: Optional[_Positive] = None
    dim: _Positive
    heads: _Positive = 1

    @model_validator(mode="after")
    def _check_heads(self) -> "AttentionLayer":
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        return self


class PoolLayer(_Layer):
    kind: Literal["pool"] = "pool"
    kernel: _Positive = 2
    stride: Optional[_Positive] = None
    global_pool: bool = False


class ActivationLayer(_Layer):
    kind: Literal["activation"] = "activation"


class NormLayer(_Layer):
    kind: Literal["norm"] = "norm"
    channels: Optional[_Positive] = None


class FlattenLayer(_Layer):
    kind: Literal["flatten"] = "flatten"
    mode: Literal["tokens", "vector"] = "vector"


class OpaqueLayer(_Layer):
    """A block whose cost is declared, e.g. a backbone with a published MACs figure."""

    kind: Literal["opaque"] = "opaque"
    name: str = ""
    macs: _NonNegative
    params: _NonNegative = 0
    output: Optional[List[_Positive]] = None

    @model_validator(mode="after")
    def _check_output(self) -> "OpaqueLayer":
        if self.output is not None and len(self.output) not in (2, 3):
            raise ValueError("opaque output is [h, w, c] or [tokens, dim]")
        return self


LayerSpec = Annotated[
    Union[
        Conv2dLayer,
        LinearLayer,
        AttentionLayer,
        PoolLayer,
        ActivationLayer,
        NormLayer,
        FlattenLayer,
        OpaqueLayer,
    ],
    Field(discriminator="kind"),
]


class ModelGraph(BaseModel):
    name: str = Field(..., min_length=1)
    input: Tuple[_Positive, _Positive, _Positive]
    layers: List[LayerSpec] = []


class LayerCost(BaseModel):
    index: int
    kind: str
    macs: int
    params: int
    output: List[int]


class BudgetReport(BaseModel):
    name: str
    total_macs: int = Field(..., ge=0)
    total_params: int = Field(..., ge=0)
    layers: List[LayerCost]
    budget: int
    strict: bool = False
    passed: bool

    @property
    def total_gmacs(self) -> float:
        return self.total_macs / GIGA


def layer_macs(layer: LayerSpec) -> int:
    match layer:
        case Conv2dLayer():
            h_out, w_out = layer.output_hw()
            return h_out * w_out * layer.c_out * (layer.k_h * layer.k_w * layer.c_in // layer.groups)
        case LinearLayer():
            return (layer.tokens or 1) * layer.d_in * layer.d_out
        case AttentionLayer():
            if layer.seq_len is None:
                raise ShapeMismatch("attention needs its sequence length")
            length, dim = layer.seq_len, layer.dim
            # Q, K, V and output projections plus the score and value matmuls
            return 4 * length * dim * dim + 2 * length * length * dim
        case OpaqueLayer():
            return layer.macs
        case PoolLayer() | ActivationLayer() | NormLayer() | FlattenLayer():
            return 0
    raise ShapeMismatch(f"unknown layer kind {layer!r}")


def layer_params(layer: LayerSpec) -> int:
    match layer:
        case Conv2dLayer():
            weights = layer.k_h * layer.k_w * (layer.c_in // layer.groups) * layer.c_out
            return weights + (layer.c_out if layer.bias else 0)
        case LinearLayer():
            return layer.d_in * layer.d_out + (layer.d_out if layer.bias else 0)
        case AttentionLayer():
            return 4 * layer.dim * layer.dim + 4 * layer.dim
        case NormLayer():
            return 2 * (layer.channels or 0)
        case OpaqueLayer():
            return layer.params
    return 0


def _bind(layer: LayerSpec, shape: Shape) -> Tuple[LayerSpec, Shape]:
    """Fill the layer's input dims from the running shape and return its output shape."""
    match layer:
        case Conv2dLayer():
            if shape[0] != "spatial":
                raise ShapeMismatch(f"conv2d expects a spatial input, got {shape[0]}")
            _, h, w, c = shape
            if c != layer.c_in:
                raise ShapeMismatch(f"conv2d c_in={layer.c_in} but input has {c} channels")
            if (layer.in_h, layer.in_w) not in ((None, None), (h, w)):
                raise ShapeMismatch(
                    f"conv2d declares input {layer.in_h}x{layer.in_w}, graph provides {h}x{w}"
                )
            bound = layer.model_copy(update={"in_h": h, "in_w": w})
            h_out, w_out = bound.output_hw()
            return bound, ("spatial", h_out, w_out, layer.c_out)
        case LinearLayer():
            if shape[0] == "spatial":
                _, h, w, c = shape
                tokens, dim = h * w, c
            else:
                _, tokens, dim = shape
            if dim != layer.d_in:
                raise ShapeMismatch(f"linear d_in={layer.d_in} but input dim is {dim}")
            if layer.tokens not in (None, tokens):
                raise ShapeMismatch(f"linear declares {layer.tokens} tokens, graph provides {tokens}")
            bound = layer.model_copy(update={"tokens": tokens})
            if shape[0] == "spatial":
                return bound, ("spatial", shape[1], shape[2], layer.d_out)
            return bound, ("tokens", tokens, layer.d_out)
        case AttentionLayer():
            if shape[0] != "tokens":
                raise ShapeMismatch("attention expects a token sequence; add a flatten layer")
            _, length, dim = shape
            if dim != layer.dim or layer.seq_len not in (None, length):
                raise ShapeMismatch(
                    f"attention declares ({layer.seq_len}, {layer.dim}), graph provides ({length}, {dim})"
                )
            return layer.model_copy(update={"seq_len": length}), shape
        case PoolLayer():
            if shape[0] != "spatial":
                raise ShapeMismatch("pool expects a spatial input")
            _, h, w, c = shape
            if layer.global_pool:
                return layer, ("spatial", 1, 1, c)
            stride = layer.stride or layer.kernel
            if h < layer.kernel or w < layer.kernel:
                raise ShapeMismatch(f"pool kernel {layer.kernel} does not fit {h}x{w}")
            return layer, (
                "spatial",
                (h - layer.kernel) // stride + 1,
                (w - layer.kernel) // stride + 1,
                c,
            )
        case NormLayer():
            channels = shape[3] if shape[0] == "spatial" else shape[2]
            if layer.channels not in (None, channels):
                raise ShapeMismatch(f"norm declares {layer.channels} channels, input has {channels}")
            return layer.model_copy(update={"channels": channels}), shape
        case FlattenLayer():
            if shape[0] != "spatial":
                return layer, shape
            _, h, w, c = shape
            if layer.mode == "tokens":
                return layer, ("tokens", h * w, c)
            return layer, ("tokens", 1, h * w * c)
        case OpaqueLayer():
            if layer.output is None:
                return layer, shape
            if len(layer.output) == 3:
                return layer, ("spatial", *layer.output)
            return layer, ("tokens", *layer.output)
    return layer, shape


def _shape_list(shape: Shape) -> List[int]:
    return [int(v) for v in shape[1:]]


def graph_macs(
    graph: ModelGraph, budget_gmacs: float = DEFAULT_BUDGET_GMACS, strict: bool = False
) -> BudgetReport:
    """
    Per-layer and total MACs. ``passed`` is total <= budget, or total < budget
    when ``strict``.
    """
    shape: Shape = ("spatial", *graph.input)
    costs: List[LayerCost] = []
    for index, layer in enumerate(graph.layers):
        try:
            bound, shape = _bind(layer, shape)
            macs = layer_macs(bound)
        except ShapeMismatch as e:
            raise ShapeMismatch(str(e), layer_index=index) from e
        costs.append(
            LayerCost(
                index=index,
                kind=layer.kind,
                macs=macs,
                params=layer_params(bound),
                output=_shape_list(shape),
            )
        )

    total = sum(c.macs for c in costs)
    budget = int(round(budget_gmacs * GIGA))
    return BudgetReport(
        name=graph.name,
        total_macs=total,
        total_params=sum(c.params for c in costs),
        layers=costs,
        budget=budget,
        strict=strict,
        passed=total < budget if strict else total <= budget,
    )


def gate(graph: ModelGraph, budget_gmacs: float = DEFAULT_BUDGET_GMACS, strict: bool = False) -> bool:
    return graph_macs(graph, budget_gmacs, strict).passed
