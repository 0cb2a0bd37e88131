"""
Global-local attention transformer over predicate-as-node scene graphs.

The encoder stacks L layers. Each layer runs three families of attention
heads over the joint node sequence (entities first, then predicates):

  - global heads attend over every node,
  - subject-local heads attend only along predicate-subject links (a_s),
  - object-local heads attend only along predicate-object links (a_o),

concatenates their outputs in that order and applies W_l, b_l, an optional
residual add of the layer input and a ReLU.

Two decoders read the final node states: a node classifier (one network over
the joint class space, sliced by node type) and an edge classifier over every
ordered node pair (none / subject / object).

Training is a masking game: a fraction of node classes is replaced by a
shared MASK token and the model reconstructs them. At inference nothing is
masked and the input structure is kept as is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Protocol, Sequence

import numpy as np

from sg_commonsense.config import load_block, validate_model_block
from sg_commonsense.errors import ContractError, StructureError
from sg_commonsense.fusion import ScoredGraph
from sg_commonsense.scene_graph import AdjacencyMasks, SceneGraph, Vocabulary, adjacency_masks
from sg_commonsense.tensor_engine import (
    Tensor,
    add,
    concat_columns,
    constant,
    gather_rows,
    mask_fill,
    matmul,
    mul_elementwise,
    pairwise_sum,
    parameter,
    relu,
    row_softmax,
    scale,
    slice_columns,
    slice_rows,
    transpose,
)

MASK_FILL_VALUE = -1e9

EDGE_NONE, EDGE_SUBJECT, EDGE_OBJECT = 0, 1, 2


# -----------------------------
# Configuration
# -----------------------------

@dataclass(frozen=True)
class GlatConfig:
    num_entity_classes: int = 0
    num_predicate_classes: int = 0
    layers: int = 6
    global_heads: int = 4
    subject_heads: int = 2
    object_heads: int = 2
    model_dim: int = 300
    head_dim: int = 0          # 0 -> model_dim // total_heads
    decoder_hidden: int = 0    # 0 -> model_dim
    mask_rate: float = 0.3
    residual: bool = True
    fixed_attention: bool = False

    def __post_init__(self):
        if self.head_dim == 0:
            object.__setattr__(self, "head_dim", max(1, self.model_dim // max(1, self.total_heads)))
        if self.decoder_hidden == 0:
            object.__setattr__(self, "decoder_hidden", self.model_dim)

    @property
    def total_heads(self) -> int:
        return self.global_heads + self.subject_heads + self.object_heads

    @property
    def token_space(self) -> int:
        return self.num_entity_classes + self.num_predicate_classes + 1

    def head_kinds(self) -> list[str]:
        return ["global"] * self.global_heads + ["subject"] * self.subject_heads + ["object"] * self.object_heads

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None, vocab: Vocabulary) -> "GlatConfig":
        block = load_block(doc, validate_model_block)
        return cls(num_entity_classes=vocab.num_entities, num_predicate_classes=vocab.num_predicates, **block)

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": self.layers,
            "global_heads": self.global_heads,
            "subject_heads": self.subject_heads,
            "object_heads": self.object_heads,
            "model_dim": self.model_dim,
            "head_dim": self.head_dim,
            "decoder_hidden": self.decoder_hidden,
            "mask_rate": self.mask_rate,
            "residual": self.residual,
            "fixed_attention": self.fixed_attention,
        }

    def with_heads(self, global_heads: int, subject_heads: int, object_heads: int, **changes) -> "GlatConfig":
        return replace(
            self, global_heads=global_heads, subject_heads=subject_heads, object_heads=object_heads, **changes
        )


# -----------------------------
# Parameters
# -----------------------------

@dataclass(frozen=True)
class HeadParams:
    wv: Tensor
    bv: Tensor
    wq: Tensor | None = None
    bq: Tensor | None = None
    wk: Tensor | None = None
    bk: Tensor | None = None


def parameter_shapes(config: GlatConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in), in the canonical parameter order."""
    d, hd, hid = config.model_dim, config.head_dim, config.decoder_hidden
    shapes: dict[str, tuple[tuple[int, ...], int]] = {"embedding": ((config.token_space, d), config.token_space)}
    for l in range(config.layers):
        for h, kind in enumerate(config.head_kinds()):
            prefix = f"layers.{l}.heads.{h}"
            names = ("v",) if config.fixed_attention and kind != "global" else ("q", "k", "v")
            for x in names:
                shapes[f"{prefix}.w{x}"] = ((d, hd), d)
                shapes[f"{prefix}.b{x}"] = ((hd,), d)
        width = hd * config.total_heads
        shapes[f"layers.{l}.w"] = ((width, d), width)
        shapes[f"layers.{l}.b"] = ((d,), width)
    n_out = config.num_entity_classes + config.num_predicate_classes
    shapes["node_decoder.w1"] = ((d, hid), d)
    shapes["node_decoder.b1"] = ((hid,), d)
    shapes["node_decoder.w2"] = ((hid, n_out), hid)
    shapes["node_decoder.b2"] = ((n_out,), hid)
    shapes["edge_decoder.w1a"] = ((d, hid), 2 * d)
    shapes["edge_decoder.w1b"] = ((d, hid), 2 * d)
    shapes["edge_decoder.b1"] = ((hid,), 2 * d)
    shapes["edge_decoder.w2"] = ((hid, 3), hid)
    shapes["edge_decoder.b2"] = ((3,), hid)
    return shapes


class GlatModel:
    """Parameters of one encoder-decoder, addressed by stable dotted names."""

    def __init__(self, config: GlatConfig, vocab: Vocabulary, params: dict[str, Tensor]):
        if (vocab.num_entities, vocab.num_predicates) != (config.num_entity_classes, config.num_predicate_classes):
            raise ContractError(
                f"Vocabulary sizes ({vocab.num_entities}, {vocab.num_predicates}) do not match config "
                f"({config.num_entity_classes}, {config.num_predicate_classes})"
            )
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ContractError(f"Parameter names do not match config: missing={missing} extra={extra}")
        for name, (shape, _) in expected.items():
            if params[name].shape != shape:
                raise ContractError(f"Parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.vocab = vocab
        self._params = params

    @classmethod
    def init(cls, config: GlatConfig, vocab: Vocabulary, seed: int) -> "GlatModel":
        """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        if config.total_heads < 1:
            raise ContractError("GLAT needs at least one attention head")
        rng = np.random.default_rng(seed)
        params = {}
        for name, (shape, fan_in) in parameter_shapes(config).items():
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = parameter(rng.uniform(-bound, bound, size=shape), name=name)
        return cls(config, vocab, params)

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def parameter_count(self) -> int:
        return int(sum(p.values.size for p in self._params.values()))

    def head(self, layer: int, index: int) -> HeadParams:
        p = self._params
        prefix = f"layers.{layer}.heads.{index}"
        return HeadParams(
            wv=p[f"{prefix}.wv"], bv=p[f"{prefix}.bv"],
            wq=p.get(f"{prefix}.wq"), bq=p.get(f"{prefix}.bq"),
            wk=p.get(f"{prefix}.wk"), bk=p.get(f"{prefix}.bk"),
        )

    def copy(self) -> "GlatModel":
        params = {n: parameter(t.values.copy(), name=n) for n, t in self._params.items()}
        return GlatModel(self.config, self.vocab, params)

    def predict_masked(self, mg: "MaskedGraph") -> list[int]:
        """Argmax class per node (entity ids at entity positions, predicate ids at predicate positions)."""
        return predict_nodes(mg, self)


class NodePredictor(Protocol):
    def predict_masked(self, mg: "MaskedGraph") -> list[int]: ...


# -----------------------------
# Masking
# -----------------------------

@dataclass(frozen=True)
class MaskedGraph:
    base: SceneGraph                    # class ids at masked positions replaced by the mask token
    tokens: tuple[int, ...]             # joint one-hot index per node
    masked_indices: tuple[int, ...]
    truth: tuple[int, ...]              # original class ids at masked_indices

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    def is_masked(self, index: int) -> bool:
        return index in self.masked_indices


def _tokens(g: SceneGraph, vocab: Vocabulary, masked: set[int]) -> tuple[int, ...]:
    n_e = g.num_entities
    out = []
    for i, c in enumerate(g.entity_classes() + g.predicate_classes()):
        if i in masked:
            out.append(vocab.mask_token)
        elif i < n_e:
            out.append(vocab.token_of_entity(c))
        else:
            out.append(vocab.token_of_predicate(c))
    return tuple(out)


def mask_count(n: int, rate: float) -> int:
    """max(1, round-half-up(rate * n)), never more than n."""
    return min(n, max(1, int(math.floor(rate * n + 0.5))))


def mask_nodes(g: SceneGraph, rate: float, rng: np.random.Generator, vocab: Vocabulary) -> MaskedGraph:
    n = g.num_nodes
    if n == 0:
        raise StructureError("Cannot mask an empty graph")
    if not (0.0 < rate < 1.0):
        raise ContractError(f"mask rate must be in (0, 1), got {rate}")
    return mask_indices(g, rng.choice(n, size=mask_count(n, rate), replace=False), vocab)


def mask_indices(g: SceneGraph, indices: Sequence[int], vocab: Vocabulary) -> MaskedGraph:
    """Mask exactly the given joint node indices."""
    chosen = tuple(sorted({int(i) for i in indices}))
    if any(not 0 <= i < g.num_nodes for i in chosen):
        raise ContractError(f"Mask indices {chosen} out of range for {g.num_nodes} nodes")
    classes = g.entity_classes() + g.predicate_classes()
    masked_classes = [vocab.mask_token if i in chosen else c for i, c in enumerate(classes)]
    n_e = g.num_entities
    base = g.with_classes(masked_classes[:n_e], masked_classes[n_e:])
    return MaskedGraph(base, _tokens(g, vocab, set(chosen)), chosen, tuple(classes[i] for i in chosen))


def unmasked(g: SceneGraph, vocab: Vocabulary) -> MaskedGraph:
    """Inference-time input: every node keeps its (top-1) class."""
    return MaskedGraph(g, _tokens(g, vocab, set()), (), ())


# -----------------------------
# Encoder
# -----------------------------

def embed(mg: MaskedGraph, model: GlatModel) -> Tensor:
    """Row i is one_hot(token_i) x E, realized as a row gather."""
    tokens = np.asarray(mg.tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.token_space):
        raise ContractError(f"Token ids out of range for token space {model.config.token_space}: {mg.tokens}")
    return gather_rows(model.parameters()["embedding"], tokens)


def _project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def _attention_scores(x: Tensor, head: HeadParams) -> Tensor:
    q = _project(x, head.wq, head.bq)
    k = _project(x, head.wk, head.bk)
    return scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))


def global_head(x: Tensor, head: HeadParams) -> Tensor:
    weights = row_softmax(_attention_scores(x, head))
    return matmul(weights, _project(x, head.wv, head.bv))


def local_head(x: Tensor, a: np.ndarray, head: HeadParams) -> Tensor:
    """Scaled dot-product attention restricted to A's neighbors; rows without neighbors output zero."""
    a = np.asarray(a)
    has_neighbor = (a != 0).any(axis=1).astype(np.float64)
    weights = row_softmax(mask_fill(_attention_scores(x, head), a, MASK_FILL_VALUE))
    keep = constant(np.repeat(has_neighbor[:, None], a.shape[1], axis=1))
    return matmul(mul_elementwise(weights, keep), _project(x, head.wv, head.bv))


def fixed_head(x: Tensor, a: np.ndarray, head: HeadParams) -> Tensor:
    """Uniform attention over A's neighbors (graph convolution); no query/key parameters."""
    a = np.asarray(a, dtype=np.float64)
    degree = a.sum(axis=1, keepdims=True)
    norm = np.divide(a, degree, out=np.zeros_like(a), where=degree > 0)
    return matmul(constant(norm), _project(x, head.wv, head.bv))


def encoder_layer(x: Tensor, masks: AdjacencyMasks, model: GlatModel, layer: int) -> Tensor:
    config = model.config
    outputs = []
    for h, kind in enumerate(config.head_kinds()):
        params = model.head(layer, h)
        if kind == "global":
            outputs.append(global_head(x, params))
            continue
        a = masks.a_s if kind == "subject" else masks.a_o
        outputs.append(fixed_head(x, a, params) if config.fixed_attention else local_head(x, a, params))

    p = model.parameters()
    y = add(matmul(concat_columns(outputs), p[f"layers.{layer}.w"]), p[f"layers.{layer}.b"])
    if config.residual:
        y = add(y, x)
    return relu(y)


def encode(mg: MaskedGraph, model: GlatModel) -> Tensor:
    x = embed(mg, model)
    masks = adjacency_masks(mg.base)
    for layer in range(model.config.layers):
        x = encoder_layer(x, masks, model, layer)
    return x


# -----------------------------
# Decoders
# -----------------------------

@dataclass(frozen=True)
class NodeLogits:
    entity: Tensor      # (N_e, |C_e|)
    predicate: Tensor   # (N_p, |C_p|)

    def rows(self) -> list[np.ndarray]:
        return [r for r in self.entity.values] + [r for r in self.predicate.values]


def decode_nodes(x: Tensor, model: GlatModel, num_entities: int) -> NodeLogits:
    """
    One shared two-layer network over |C_e| + |C_p| outputs. Entity rows keep the
    entity block, predicate rows the predicate block.
    """
    p = model.parameters()
    c_e = model.config.num_entity_classes
    c_p = model.config.num_predicate_classes
    n = x.shape[0]
    if not (0 <= num_entities <= n):
        raise ContractError(f"num_entities={num_entities} out of range for {n} node rows")
    hidden = relu(_project(x, p["node_decoder.w1"], p["node_decoder.b1"]))
    out = _project(hidden, p["node_decoder.w2"], p["node_decoder.b2"])
    return NodeLogits(
        entity=slice_columns(slice_rows(out, 0, num_entities), 0, c_e),
        predicate=slice_columns(slice_rows(out, num_entities, n), c_e, c_e + c_p),
    )


def pair_row(i: int, j: int, n: int) -> int:
    """Row of ordered pair (i, j), i != j, in decode_edges output."""
    return i * (n - 1) + (j if j < i else j - 1)


def _off_diagonal_rows(n: int) -> np.ndarray:
    return np.array([i * n + j for i in range(n) for j in range(n) if i != j], dtype=np.int64)


def decode_edges(x: Tensor, model: GlatModel) -> Tensor:
    """(n(n-1), 3) logits; pair (i, j) reads concat(x_i, x_j), split as x_i W_a + x_j W_b."""
    p = model.parameters()
    n = x.shape[0]
    pairs = pairwise_sum(matmul(x, p["edge_decoder.w1a"]), matmul(x, p["edge_decoder.w1b"]))
    pairs = gather_rows(pairs, _off_diagonal_rows(n))
    hidden = relu(add(pairs, p["edge_decoder.b1"]))
    return _project(hidden, p["edge_decoder.w2"], p["edge_decoder.b2"])


def edge_targets(g: SceneGraph) -> np.ndarray:
    """Edge decoder targets in pair_row order: (predicate, subject)=1, (predicate, object)=2, else 0."""
    n, n_e = g.num_nodes, g.num_entities
    targets = np.zeros(n * (n - 1) if n > 1 else 0, dtype=np.int64)
    for j, pred in enumerate(g.predicates):
        node = n_e + j
        targets[pair_row(node, pred.subject, n)] = EDGE_SUBJECT
        targets[pair_row(node, pred.object, n)] = EDGE_OBJECT
    return targets


def forward(mg: MaskedGraph, model: GlatModel) -> tuple[NodeLogits, Tensor]:
    x = encode(mg, model)
    return decode_nodes(x, model, mg.base.num_entities), decode_edges(x, model)


def predict_edges(mg: MaskedGraph, model: GlatModel) -> np.ndarray:
    """n x n argmax edge types (diagonal 0). Read-out only; inference keeps the input structure."""
    n = mg.num_nodes
    logits = decode_edges(encode(mg, model), model).values
    out = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = int(np.argmax(logits[pair_row(i, j, n)]))
    return out


def reconstruct(g_in: SceneGraph, model: GlatModel) -> ScoredGraph:
    """Commonsense graph: same structure and node order as g_in, classes from the node decoder."""
    if g_in.num_nodes == 0:
        return ScoredGraph.from_logits(g_in, [])
    mg = unmasked(g_in, model.vocab)
    logits = decode_nodes(encode(mg, model), model, g_in.num_entities)
    return ScoredGraph.from_logits(g_in, logits.rows())


def predict_nodes(mg: MaskedGraph, model: GlatModel) -> list[int]:
    logits = decode_nodes(encode(mg, model), model, mg.base.num_entities)
    return [int(np.argmax(r)) for r in logits.rows()]
