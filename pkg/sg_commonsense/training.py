"""
Masked-reconstruction pretraining and fine-tuning on simulated perception output.

Both stages share one loop: graphs are visited one at a time (graphs are
ragged), gradients are averaged over `accumulation` graphs and applied with a
single Adam step. Pretraining masks every graph afresh each epoch; fine-tuning
feeds pruned, top-1 re-encoded perception graphs unmasked and asks for the
true classes.

Randomness comes from named streams of the run seed:
  default_rng(seed)        model init
  default_rng([seed, 1])   epoch shuffles and training masks (checkpointed)
  default_rng([seed, 2])   validation split
  default_rng([seed, 3])   validation masks (same every epoch)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from loguru import logger

from sg_commonsense.config import load_block, validate_finetune_block, validate_training_block
from sg_commonsense.errors import ContractError, TrainingDivergedError
from sg_commonsense.glat import GlatModel, MaskedGraph, NodeLogits, edge_targets, forward, mask_nodes, unmasked
from sg_commonsense.io.checkpoint import Checkpoint, save_checkpoint
from sg_commonsense.perception_sim import NoiseConfig, simulate
from sg_commonsense.scene_graph import SceneGraph, prune_scored_top_k, select_predicates
from sg_commonsense.tensor_engine import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    cross_entropy,
    scale,
)

ENCODER_PREFIXES = ("embedding", "layers.")


# -----------------------------
# Configuration
# -----------------------------

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulation: int = 8
    validation_fraction: float = 0.1
    node_loss_weight: float = 1.0
    edge_loss_weight: float = 1.0

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> "TrainingConfig":
        return cls(**load_block(doc, validate_training_block))


@dataclass(frozen=True)
class FineTuneConfig:
    epochs: int = 25
    learning_rate: float = 1e-5
    prune_k: int = 100
    freeze_encoder: bool = False

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> "FineTuneConfig":
        return cls(**load_block(doc, validate_finetune_block))


# -----------------------------
# Loss
# -----------------------------

def joint_loss(
    node_logits: NodeLogits,
    edge_logits: Tensor,
    truth: SceneGraph,
    *,
    node_weight: float = 1.0,
    edge_weight: float = 1.0,
) -> Tensor:
    """
    Mean node cross-entropy over all nodes plus mean edge cross-entropy over all
    ordered pairs. Entity and predicate rows are scored in their own class space
    and pooled by node count.
    """
    n_e, n_p, n = truth.num_entities, truth.num_predicates, truth.num_nodes
    if n == 0:
        raise ContractError("joint_loss on an empty graph")
    if node_logits.entity.shape[0] != n_e or node_logits.predicate.shape[0] != n_p:
        raise ContractError(
            f"Node logits rows ({node_logits.entity.shape[0]}, {node_logits.predicate.shape[0]}) "
            f"do not match truth ({n_e}, {n_p})"
        )
    expected_pairs = n * (n - 1)
    if edge_logits.shape != (expected_pairs, 3):
        raise ContractError(f"Edge logits shape {edge_logits.shape} does not match ({expected_pairs}, 3)")

    terms = []
    if n_e:
        terms.append(scale(cross_entropy(node_logits.entity, truth.entity_classes()), n_e / n))
    if n_p:
        terms.append(scale(cross_entropy(node_logits.predicate, truth.predicate_classes()), n_p / n))
    node_term = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    loss = scale(node_term, node_weight)
    if n > 1:
        loss = add(loss, scale(cross_entropy(edge_logits, edge_targets(truth)), edge_weight))
    return loss


# -----------------------------
# Trainer
# -----------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_node_acc: float | None

    def to_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_node_acc": self.val_node_acc}


@dataclass
class TrainingResult:
    model: GlatModel
    history: list[EpochRecord] = field(default_factory=list)
    checkpoint: Checkpoint | None = None


class Trainer:
    """Owns the model, its Adam state and the training RNG stream."""

    def __init__(
        self,
        model: GlatModel,
        config: TrainingConfig,
        *,
        seed: int,
        learning_rate: float | None = None,
        trainable: Sequence[str] | None = None,
        adam: AdamState | None = None,
        rng_state: dict | None = None,
    ):
        self.model = model
        self.config = config
        self.learning_rate = config.learning_rate if learning_rate is None else learning_rate
        names = list(model.parameters()) if trainable is None else list(trainable)
        self.trainable = {n: model.parameters()[n] for n in names}
        self.adam = adam or AdamState()
        self.rng = np.random.default_rng([seed, 1])
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.last_finite_loss = math.nan
        self.epoch = 0

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainingConfig, *, seed: int, **kwargs) -> "Trainer":
        return cls(ckpt.model, config, seed=seed, adam=ckpt.adam, rng_state=ckpt.rng_state, **kwargs)

    def checkpoint(self, metadata: dict[str, Any] | None = None) -> Checkpoint:
        """Snapshot of parameters, optimizer moments and RNG; later steps do not affect it."""
        adam = AdamState(self.adam.step, {k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()})
        return Checkpoint(self.model.copy(), adam, dict(self.rng.bit_generator.state), dict(metadata or {}))

    def graph_loss(self, mg: MaskedGraph, truth: SceneGraph) -> Tensor:
        node_logits, edge_logits = forward(mg, self.model)
        return joint_loss(node_logits, edge_logits, truth,
                          node_weight=self.config.node_loss_weight, edge_weight=self.config.edge_loss_weight)

    def step(self, batch: Sequence[tuple[MaskedGraph, SceneGraph]]) -> list[float]:
        """One Adam update from gradients averaged over the batch; returns per-graph losses."""
        if not batch:
            return []
        params = self.model.parameters()
        totals = {n: np.zeros_like(p.values) for n, p in self.trainable.items()}
        losses = []
        for mg, truth in batch:
            for p in params.values():
                p.grad = None
            with Tape():
                loss = self.graph_loss(mg, truth)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"Loss became {value} at epoch {self.epoch}, step {self.adam.step}; "
                    f"last finite loss {self.last_finite_loss}"
                )
            self.last_finite_loss = value
            losses.append(value)
            backward(loss)
            for n, p in self.trainable.items():
                if p.grad is not None:
                    totals[n] += p.grad

        grads = {n: g / len(batch) for n, g in totals.items()}
        adam_step(self.trainable, grads, self.adam, self.learning_rate,
                  self.config.beta1, self.config.beta2, self.config.eps)
        logger.debug("step {} loss {:.6f}", self.adam.step, float(np.mean(losses)))
        return losses

    def run_epoch(self, items: Sequence, make_input: Callable[[Any], tuple[MaskedGraph, SceneGraph]]) -> float:
        order = self.rng.permutation(len(items))
        losses: list[float] = []
        size = self.config.accumulation
        for start in range(0, len(order), size):
            batch = [make_input(items[i]) for i in order[start:start + size]]
            losses.extend(self.step(batch))
        return float(np.mean(losses)) if losses else math.nan


# -----------------------------
# Evaluation helpers
# -----------------------------

def split_validation(graphs: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded hold-out; at least one training item is always kept."""
    n = len(graphs)
    n_val = min(int(math.floor(fraction * n + 0.5)), max(n - 1, 0))
    perm = np.random.default_rng([seed, 2]).permutation(n)
    val_ids = set(int(i) for i in perm[:n_val])
    train = [g for i, g in enumerate(graphs) if i not in val_ids]
    val = [g for i, g in enumerate(graphs) if i in val_ids]
    return train, val


def evaluate_pairs(
    model: GlatModel, pairs: Iterable[tuple[MaskedGraph, SceneGraph]], config: TrainingConfig
) -> tuple[float, float]:
    """(mean loss, node accuracy) without recording a tape.

    Accuracy counts masked positions when the input is masked, all nodes otherwise.
    """
    losses, correct, total = [], 0, 0
    for mg, truth in pairs:
        node_logits, edge_logits = forward(mg, model)
        losses.append(joint_loss(node_logits, edge_logits, truth,
                                 node_weight=config.node_loss_weight, edge_weight=config.edge_loss_weight).item())
        predicted = [int(np.argmax(r)) for r in node_logits.rows()]
        actual = truth.entity_classes() + truth.predicate_classes()
        positions = mg.masked_indices or range(truth.num_nodes)
        correct += sum(predicted[i] == actual[i] for i in positions)
        total += len(positions)
    if not losses:
        return math.nan, math.nan
    return float(np.mean(losses)), correct / total if total else math.nan


def _write_history(path: Path, history: list[EpochRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def history_path(checkpoint_path: str | Path) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(p.name + ".log.jsonl")


def _fit(
    trainer: Trainer,
    train_items: Sequence,
    val_pairs: list[tuple[MaskedGraph, SceneGraph]] | Callable[[], list],
    make_input: Callable[[Any], tuple[MaskedGraph, SceneGraph]],
    epochs: int,
    metadata: dict[str, Any],
    out: str | Path | None,
) -> TrainingResult:
    history: list[EpochRecord] = []
    best = trainer.checkpoint({**metadata, "epoch": 0, "val_loss": None})
    best_loss = math.inf

    for epoch in range(1, epochs + 1):
        trainer.epoch = epoch
        train_loss = trainer.run_epoch(train_items, make_input)
        pairs = val_pairs() if callable(val_pairs) else val_pairs
        val_loss, val_acc = evaluate_pairs(trainer.model, pairs, trainer.config) if pairs else (None, None)
        history.append(EpochRecord(epoch, train_loss, val_loss, val_acc))
        logger.info("epoch {}/{} train_loss={:.5f} val_loss={} val_node_acc={}",
                    epoch, epochs, train_loss,
                    "n/a" if val_loss is None else f"{val_loss:.5f}",
                    "n/a" if val_acc is None else f"{val_acc:.4f}")

        score = train_loss if val_loss is None else val_loss
        if score < best_loss:
            best_loss = score
            best = trainer.checkpoint({**metadata, "epoch": epoch, "val_loss": val_loss})

    if out is not None:
        save_checkpoint(best, out)
        _write_history(history_path(out), history)
    return TrainingResult(model=best.model, history=history, checkpoint=best)


# -----------------------------
# Stages
# -----------------------------

def pretrain(
    corpus: Sequence[SceneGraph],
    model: GlatModel,
    config: TrainingConfig,
    *,
    seed: int,
    out: str | Path | None = None,
    trainer: Trainer | None = None,
) -> TrainingResult:
    """Masked-node denoising on corpus; keeps the parameters of the best validation epoch."""
    graphs = [g for g in corpus if g.num_nodes > 0]
    if not graphs:
        raise ContractError("pretrain needs a non-empty corpus")
    rate = model.config.mask_rate
    vocab = model.vocab
    train, val = split_validation(graphs, config.validation_fraction, seed)
    trainer = trainer or Trainer(model, config, seed=seed)

    def val_pairs() -> list[tuple[MaskedGraph, SceneGraph]]:
        rng = np.random.default_rng([seed, 3])
        return [(mask_nodes(g, rate, rng, vocab), g) for g in val]

    def make_input(g: SceneGraph) -> tuple[MaskedGraph, SceneGraph]:
        return mask_nodes(g, rate, trainer.rng, vocab), g

    logger.info("Pretraining on {} graphs ({} validation), {} epochs, lr={}",
                len(train), len(val), config.epochs, trainer.learning_rate)
    metadata = {"stage": "pretrain", "seed": seed, "epochs": config.epochs, "learning_rate": trainer.learning_rate}
    return _fit(trainer, train, val_pairs, make_input, config.epochs, metadata, out)


def perception_pairs(
    corpus: Sequence[SceneGraph],
    noise: NoiseConfig,
    model: GlatModel,
    prune_k: int,
    *,
    corrupt_entities: bool = True,
) -> list[tuple[MaskedGraph, SceneGraph]]:
    """
    Fine-tuning inputs: simulated perception per graph, pruned to the prune_k most
    confident predicates, re-encoded as top-1 classes. Targets are the truth
    restricted to the same predicates and entities.
    """
    pairs = []
    for i, truth in enumerate(corpus):
        gp = simulate(truth, noise, np.random.default_rng([noise.seed, i]), model.vocab,
                      corrupt_entities=corrupt_entities)
        pruned, _, kept = prune_scored_top_k(gp, prune_k)
        if pruned.graph.num_nodes == 0:
            continue
        target, _ = select_predicates(truth, kept)
        pairs.append((unmasked(pruned.graph, model.vocab), target))
    return pairs


def fine_tune(
    model: GlatModel,
    noise: NoiseConfig,
    corpus: Sequence[SceneGraph],
    config: FineTuneConfig,
    training: TrainingConfig,
    *,
    seed: int,
    out: str | Path | None = None,
    corrupt_entities: bool = True,
) -> TrainingResult:
    pairs = perception_pairs(corpus, noise, model, config.prune_k, corrupt_entities=corrupt_entities)
    if not pairs:
        raise ContractError("fine_tune needs at least one graph with a predicate after pruning")
    train, val = split_validation(pairs, training.validation_fraction, seed)
    trainable = None
    if config.freeze_encoder:
        trainable = [n for n in model.parameters() if not n.startswith(ENCODER_PREFIXES)]
    trainer = Trainer(model, training, seed=seed, learning_rate=config.learning_rate, trainable=trainable)

    logger.info("Fine-tuning on {} perception graphs ({} validation), {} epochs, lr={}, freeze_encoder={}",
                len(train), len(val), config.epochs, config.learning_rate, config.freeze_encoder)
    metadata = {
        "stage": "finetune", "seed": seed, "epochs": config.epochs, "learning_rate": config.learning_rate,
        "prune_k": config.prune_k, "freeze_encoder": config.freeze_encoder, "noise": noise.to_dict(),
    }
    return _fit(trainer, train, val, lambda pair: pair, config.epochs, metadata, out)
