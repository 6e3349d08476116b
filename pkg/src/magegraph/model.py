"""GraphMAGE node classifier and the baselines it is compared against.

All variants share one parameter layout:

* ``embed``: affine map input_dim -> width producing h0
* ``layer{l}``: MLP_l = affine(2*width -> width) -> relu -> dropout -> affine(width -> width)
* ``head``: affine width -> 1 (one logit per node)

They differ only in what each layer concatenates with the aggregated
neighbour state and whether an identity residual is added:

=================  ====================  ==========
variant            self input to MLP_l   residual
=================  ====================  ==========
graphmage          h0                    no
graphsage          h(l-1)                no
resgcn-over-mage   h0                    h(l-1)
resgcn-over-sage   h(l-1)                h(l-1)
=================  ====================  ==========
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from magegraph.errors import ParameterError, ShapeError
from magegraph.geo import SpatialGraph
from magegraph.tensor import Tensor, add, concat, dropout, matmul, relu, reshape, sigmoid

VARIANTS = ("graphmage", "graphsage", "resgcn-over-mage", "resgcn-over-sage")
AGGREGATORS = ("mean", "inverse-distance")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    variant: str = "graphmage"
    num_layers: int = 4
    width: int = 128
    dropout_p: float = 0.2
    aggregator: str = "mean"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.aggregator not in AGGREGATORS:
            raise ParameterError(f"unknown aggregator {self.aggregator!r}")
        if self.num_layers < 1 or self.width < 1 or self.input_dim < 1:
            raise ParameterError("num_layers, width and input_dim must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def uses_h0(self) -> bool:
        return self.variant in ("graphmage", "resgcn-over-mage")

    @property
    def residual(self) -> bool:
        return self.variant.startswith("resgcn")

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict[str, Tensor]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    w = config.width
    shapes = {"embed.W": (config.input_dim, w), "embed.b": (w,)}
    for l in range(1, config.num_layers + 1):
        shapes[f"layer{l}.W1"] = (2 * w, w)
        shapes[f"layer{l}.b1"] = (w,)
        shapes[f"layer{l}.W2"] = (w, w)
        shapes[f"layer{l}.b2"] = (w,)
    shapes["head.W"] = (w, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_parameters(config: ModelConfig, seed: int) -> Params:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def aggregation_operator(graph: SpatialGraph, aggregator: str = "mean") -> Tensor:
    return Tensor(graph.aggregation_matrix(aggregator))


def aggregate_neighbors(h: Tensor, graph: SpatialGraph | Tensor, aggregator: str = "mean") -> Tensor:
    """Mean (or inverse-distance weighted mean) of in-neighbour rows; isolated nodes get zeros."""
    op = graph if isinstance(graph, Tensor) else aggregation_operator(graph, aggregator)
    if op.shape[1] != h.shape[0]:
        raise ShapeError(f"aggregate: {h.shape[0]} embedding rows but graph has {op.shape[1]} nodes")
    return matmul(op, h)


def _affine(x: Tensor, params: Params, prefix: str, suffix: str = "") -> Tensor:
    return add(matmul(x, params[f"{prefix}.W{suffix}"]), params[f"{prefix}.b{suffix}"])


@dataclass
class ForwardResult:
    logits: Tensor
    embeddings: list[Tensor]  # h0 .. hL

    def probabilities(self) -> np.ndarray:
        return sigmoid(self.logits).data.copy()


def forward(features, graph: SpatialGraph | Tensor, params: Params, config: ModelConfig,
            training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeError(f"features of shape {x.shape} do not match input_dim={config.input_dim}")
    op = graph if isinstance(graph, Tensor) else aggregation_operator(graph, config.aggregator)
    if op.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"{x.shape[0]} feature rows but graph has {op.shape[0]} nodes")
    h0 = _affine(x, params, "embed")
    hs = [h0]
    h = h0
    for l in range(1, config.num_layers + 1):
        agg = aggregate_neighbors(h, op)
        self_part = h0 if config.uses_h0 else h
        z = relu(_affine(concat(self_part, agg), params, f"layer{l}", "1"))
        z = dropout(z, config.dropout_p, training, rng)
        out = _affine(z, params, f"layer{l}", "2")
        h = add(out, h) if config.residual else out
        hs.append(h)
    logits = reshape(_affine(h, params, "head"), (x.shape[0],))
    return ForwardResult(logits, hs)


def _require_variant(config: ModelConfig, allowed: Sequence[str]) -> None:
    if config.variant not in allowed:
        raise ParameterError(f"variant {config.variant!r} not accepted here (expected {', '.join(allowed)})")


def graphmage_forward(features, graph, params, config, training=False, rng=None) -> tuple[Tensor, list[Tensor]]:
    _require_variant(config, ("graphmage",))
    res = forward(features, graph, params, config, training, rng)
    return res.logits, res.embeddings


def graphsage_forward(features, graph, params, config, training=False, rng=None) -> Tensor:
    _require_variant(config, ("graphsage",))
    return forward(features, graph, params, config, training, rng).logits


def resgcn_forward(features, graph, params, config, training=False, rng=None) -> Tensor:
    _require_variant(config, ("resgcn-over-mage", "resgcn-over-sage"))
    return forward(features, graph, params, config, training, rng).logits


def predict_proba(features, graph, params: Params, config: ModelConfig) -> np.ndarray:
    return forward(features, graph, params, config, training=False).probabilities()


def layer_inputs(config: ModelConfig, layer: int) -> list[tuple[int, int]]:
    """Wiring of one layer as (source representation index, path-length cost) edges.

    Source 0 is h0.  A source feeding the same layer through both the self
    slot and the aggregate slot is one edge.
    """
    through_mlp = {0, layer - 1} if config.uses_h0 else {layer - 1}
    edges = [(src, 1) for src in sorted(through_mlp)]
    if config.residual:
        edges.append((layer - 1, 0))
    return edges


def count_input_output_paths(config: ModelConfig) -> Counter:
    """Multiset of h0 -> head path lengths, counted in MLP blocks traversed."""
    counts: list[Counter] = [Counter({0: 1})]
    for l in range(1, config.num_layers + 1):
        c: Counter = Counter()
        for src, cost in layer_inputs(config, l):
            for length, n in counts[src].items():
                c[length + cost] += n
        counts.append(c)
    return counts[-1]


def embedding_dispersion(h) -> float:
    """Mean over embedding dimensions of the across-node standard deviation."""
    arr = h.data if isinstance(h, Tensor) else np.asarray(h)
    return float(arr.std(axis=0).mean())
