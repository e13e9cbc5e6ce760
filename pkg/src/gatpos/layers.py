"""Graph layers and two-layer model assemblies.

Weights multiply row-major node matrices from the right: a feature transform
mapping ``F`` to ``F'`` is stored as an ``[F, F']`` array and applied as
``h @ W``. Multi-head layers keep all heads in one array: ``W`` is
``[F, K*F']``, ``U`` is ``[F_p, K*F']`` and the attention vectors are the
columns of ``a`` (``[2*F', K]``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import SegmentIndex, Tape, Value
from .exceptions import ConfigError, ShapeError
from .graph import Dataset, Graph

MODEL_KINDS = ("gcn", "gat", "gat-pos", "gat-pos-transformer")
POSITIONAL_KINDS = ("gat-pos", "gat-pos-transformer")

# Per-dataset widths of the hidden attention layer for the positional models.
HIDDEN_UNITS = {"cora": 8, "citeseer": 8, "pubmed": 8, "squirrel": 8, "chameleon": 32, "actor": 32}
HIDDEN_HEADS = {"cora": 8, "citeseer": 8, "pubmed": 8, "chameleon": 16, "squirrel": 16, "actor": 16}


@dataclass
class AttentionHeadParams:
    """Weights of one attention head; arrays or tape values.

    ``W``: ``[F, F']``, ``U``: ``[F_p, F']`` or ``None`` for plain GAT,
    ``a``: ``[2F', 1]``.
    """

    W: object
    a: object
    U: object = None


@dataclass(frozen=True)
class GatLayerConfig:
    in_features: int
    out_features: int
    num_heads: int = 1
    mode: str = "hidden"
    positional: bool = True
    residual: bool = False
    dropout: float = 0.0
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigError("a GAT layer needs at least one head")
        if self.mode not in ("hidden", "output"):
            raise ConfigError(f"mode must be 'hidden' or 'output', got {self.mode!r}")

    @property
    def output_width(self) -> int:
        return self.num_heads * self.out_features if self.mode == "hidden" else self.out_features


def _project(h, W):
    """``h @ W`` for a dense value or a constant sparse input."""
    if sp.issparse(h):
        return ad.sparse_matmul(h, W)
    return ad.matmul(h, W)


def _drop(h, p, rng, training):
    if sp.issparse(h):
        return ad.sparse_dropout(h, p, rng, training)
    return ad.dropout(h, p, rng, training)


def _as_value(tape: Tape, x):
    if x is None or isinstance(x, Value):
        return x
    return tape.constant(x)


def _segments(graph: Graph):
    offsets, centers, members = graph.attention_segments
    return SegmentIndex(offsets), centers, members


def _head_coefficients(wh, pu, a, graph, slope):
    """Softmax-normalized scores from transformed features ``wh`` (+ ``pu``)."""
    seg, centers, members = _segments(graph)
    width = wh.shape[1]
    z = wh if pu is None else ad.add(wh, pu)
    s_center = ad.matmul(z, ad.slice_rows(a, 0, width))
    s_member = ad.matmul(z, ad.slice_rows(a, width, 2 * width))
    scores = ad.add(ad.gather_rows(s_center, centers), ad.gather_rows(s_member, members))
    return ad.segment_softmax(ad.leaky_relu(scores, slope), seg), seg


def attention_scores(h: Value, p, params: AttentionHeadParams, graph: Graph, slope: float = 0.2):
    """Attention coefficients of one head over every arc of ``N(v) ∪ {v}``.

    Returns ``(coefficients [E+, 1], SegmentIndex)``; segments follow
    ``graph.attention_segments``. With ``p`` or ``params.U`` absent the
    positional term is dropped, giving the plain GAT score.
    """
    tape = h.tape
    W, a = _as_value(tape, params.W), _as_value(tape, params.a)
    if W.shape[0] != h.shape[1] or a.shape != (2 * W.shape[1], 1):
        raise ShapeError(f"head shapes W{W.shape}, a{a.shape} do not fit input {h.shape}")
    wh = ad.matmul(h, W)
    pu = None
    if p is not None and params.U is not None:
        U = _as_value(tape, params.U)
        if U.shape != (p.shape[1], W.shape[1]):
            raise ShapeError(f"U{U.shape} does not map positional width {p.shape[1]} to {W.shape[1]}")
        pu = ad.matmul(p, U)
    return _head_coefficients(wh, pu, a, graph, slope)


def gat_layer_forward(h, p, params: dict, cfg: GatLayerConfig, graph: Graph, rng=None, training=False):
    """Multi-head graph attention layer.

    ``params`` maps ``"W"``, ``"a"`` and optionally ``"U"`` (positional mode)
    and ``"res"`` (residual projection) to values. Hidden mode concatenates
    ELU-activated heads; output mode averages heads and returns logits.
    ``h`` may be a constant scipy sparse matrix (raw input features).
    """
    W = params["W"]
    tape = W.tape if isinstance(W, Value) else h.tape
    W, a = _as_value(tape, W), _as_value(tape, params["a"])
    K, Fo = cfg.num_heads, cfg.out_features
    if h.shape[1] != cfg.in_features or W.shape != (cfg.in_features, K * Fo) or a.shape != (2 * Fo, K):
        raise ShapeError(f"layer config {cfg} does not match h{h.shape}, W{W.shape}, a{a.shape}")
    U = _as_value(tape, params.get("U")) if cfg.positional else None
    if cfg.positional and (U is None or p is None):
        raise ShapeError("positional layer needs both U and positional embeddings")

    seg, centers, members = _segments(graph)
    h_in = _drop(h, cfg.dropout, rng, training)
    wh_all = _project(h_in, W)
    pu_all = ad.matmul(p, U) if cfg.positional else None

    heads = []
    for k in range(K):
        cols = (k * Fo, (k + 1) * Fo)
        wh = ad.slice_cols(wh_all, *cols)
        pu = ad.slice_cols(pu_all, *cols) if pu_all is not None else None
        coef, _ = _head_coefficients(wh, pu, ad.slice_cols(a, k, k + 1), graph, cfg.leaky_slope)
        coef = ad.dropout(coef, cfg.dropout, rng, training)
        heads.append(ad.neighbor_aggregate(wh, coef, seg, members))

    if cfg.mode == "output":
        out = heads[0]
        for extra in heads[1:]:
            out = ad.add(out, extra)
        return out if K == 1 else ad.scale(out, 1.0 / K)

    out = ad.concat_cols([ad.elu(x) for x in heads])
    if cfg.residual:
        if h.shape[1] == out.shape[1]:
            out = ad.add(out, tape.constant(h_in.toarray()) if sp.issparse(h_in) else h_in)
        else:
            out = ad.add(out, _project(h_in, _as_value(tape, params["res"])))
    return out


@dataclass
class PositionalModel:
    """Learned per-node table ``p0`` and the ReLU layers stacked on it."""

    p0: object
    layer_weights: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layer_weights:
            raise ConfigError("the positional model needs at least one layer")


def positional_forward(model: PositionalModel) -> Value:
    p = model.p0
    tape = p.tape
    for w in model.layer_weights:
        p = ad.relu(ad.matmul(p, _as_value(tape, w)))
    return p


@dataclass(frozen=True, eq=False)
class GcnLayerParams:
    W: object
    graph: Graph

    @property
    def coefficients(self) -> np.ndarray:
        return gcn_coefficients(self.graph)


def gcn_coefficients(graph: Graph) -> np.ndarray:
    """``1 / sqrt((d_v + 1)(d_u + 1))`` per arc of ``N(v) ∪ {v}`` -> ``[E+, 1]``."""
    _, centers, members = graph.attention_segments
    d = graph.degrees.astype(np.float64) + 1.0
    return (1.0 / np.sqrt(d[centers] * d[members]))[:, None]


def gcn_layer_forward(h, W, graph: Graph, rng=None, training=False, dropout=0.0, activation="relu"):
    """Symmetric-normalized propagation with self-loops, then ``W``."""
    tape = W.tape if isinstance(W, Value) else h.tape
    W = _as_value(tape, W)
    if W.shape[0] != h.shape[1]:
        raise ShapeError(f"GCN weight {W.shape} does not fit input {h.shape}")
    seg, _, members = _segments(graph)
    h_in = _drop(h, dropout, rng, training)
    coef = tape.constant(gcn_coefficients(graph))
    out = ad.neighbor_aggregate(_project(h_in, W), coef, seg, members)
    if activation == "relu":
        return ad.relu(out)
    if activation in (None, "identity"):
        return out
    raise ConfigError(f"unknown GCN activation {activation!r}")


def transformer_inject(h, p: Value, proj) -> Value:
    """``h + p @ proj``: positional embeddings added to the node features."""
    if sp.issparse(h):
        h = p.tape.constant(h.toarray())
    proj = _as_value(h.tape, proj)
    if proj.shape != (p.shape[1], h.shape[1]) or p.shape[0] != h.shape[0]:
        raise ShapeError(f"projection {proj.shape} cannot map p{p.shape} onto h{h.shape}")
    return ad.add(h, ad.matmul(p, proj))


# --------------------------------------------------------------------------
# model assembly


@dataclass(frozen=True)
class ModelHyperparams:
    hidden_units: int = 8
    hidden_heads: int = 8
    output_heads: int = 1
    positional_dim: int = 64
    positional_layers: int = 2
    dropout: float = 0.5
    leaky_slope: float = 0.2
    residual: bool = True
    gcn_hidden: int = 64

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "ModelHyperparams":
        key = name.lower()
        base = cls(hidden_units=HIDDEN_UNITS.get(key, 8), hidden_heads=HIDDEN_HEADS.get(key, 8))
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ModelOutput:
    logits: Value
    positional: Value | None = None


@dataclass
class GraphModel:
    """A two-layer model: named parameter arrays plus the wiring to use them."""

    kind: str
    hyperparams: ModelHyperparams
    num_nodes: int
    num_features: int
    num_classes: int
    params: dict = field(default_factory=dict)

    @property
    def has_positional(self) -> bool:
        return self.kind in POSITIONAL_KINDS

    @property
    def positional_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("pos.")]

    @property
    def weight_names(self) -> list[str]:
        """Parameters under weight decay: everything except the embedding table."""
        return [k for k in self.params if k != "pos.p0"]

    def layer_configs(self):
        hp = self.hyperparams
        positional = self.kind == "gat-pos"
        hidden = GatLayerConfig(
            self.num_features, hp.hidden_units, hp.hidden_heads, "hidden", positional,
            hp.residual, hp.dropout, hp.leaky_slope,
        )
        output = GatLayerConfig(
            hidden.output_width, self.num_classes, hp.output_heads, "output", positional,
            False, hp.dropout, hp.leaky_slope,
        )
        return hidden, output

    def forward(self, leaves: dict, features, graph: Graph, rng=None, training=False) -> ModelOutput:
        """Run the model using parameter values ``leaves`` (all on one tape).

        ``features`` is a value on that tape or a constant scipy sparse matrix.
        """
        hp = self.hyperparams
        if self.kind == "gcn":
            h = gcn_layer_forward(features, leaves["layer1.W"], graph, rng, training, hp.dropout, "relu")
            logits = gcn_layer_forward(h, leaves["layer2.W"], graph, rng, training, hp.dropout, "identity")
            return ModelOutput(logits)

        p = None
        if self.has_positional:
            weights = [leaves[f"pos.W{t + 1}"] for t in range(hp.positional_layers)]
            p = positional_forward(PositionalModel(leaves["pos.p0"], weights))

        cfg1, cfg2 = self.layer_configs()
        h = features
        outputs = []
        for name, cfg in (("layer1", cfg1), ("layer2", cfg2)):
            layer = {k.split(".", 1)[1]: v for k, v in leaves.items() if k.startswith(name + ".")}
            if self.kind == "gat-pos-transformer":
                h = transformer_inject(h, p, layer["inject"])
            h = gat_layer_forward(h, p, layer, cfg, graph, rng, training)
            outputs.append(h)
        return ModelOutput(outputs[-1], p)


def build_model(kind: str, dataset: Dataset, hyperparams: ModelHyperparams | None = None, rng=None) -> GraphModel:
    """Allocate and Glorot-initialize the parameters of a two-layer model."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}")
    hp = hyperparams or ModelHyperparams.for_dataset(dataset.name)
    rng = rng if rng is not None else np.random.default_rng(0)
    model = GraphModel(kind, hp, dataset.num_nodes, dataset.num_features, dataset.num_classes)
    params = model.params
    D, C = dataset.num_features, dataset.num_classes

    if kind == "gcn":
        params["layer1.W"] = glorot(rng, (D, hp.gcn_hidden))
        params["layer2.W"] = glorot(rng, (hp.gcn_hidden, C))
        return model

    Fp = hp.positional_dim
    if model.has_positional:
        params["pos.p0"] = glorot(rng, (dataset.num_nodes, Fp))
        for t in range(hp.positional_layers):
            params[f"pos.W{t + 1}"] = glorot(rng, (Fp, Fp))

    cfg1, cfg2 = model.layer_configs()
    for name, cfg in (("layer1", cfg1), ("layer2", cfg2)):
        width = cfg.num_heads * cfg.out_features
        if kind == "gat-pos-transformer":
            params[f"{name}.inject"] = glorot(rng, (Fp, cfg.in_features))
        params[f"{name}.W"] = glorot(rng, (cfg.in_features, width))
        if cfg.positional:
            params[f"{name}.U"] = glorot(rng, (Fp, width))
        params[f"{name}.a"] = glorot(rng, (2 * cfg.out_features, cfg.num_heads))
        if cfg.residual and cfg.mode == "hidden" and cfg.in_features != cfg.output_width:
            params[f"{name}.res"] = glorot(rng, (cfg.in_features, cfg.output_width))
    return model
