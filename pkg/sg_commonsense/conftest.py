from __future__ import annotations

from pathlib import Path

import pytest

from sg_commonsense.glat import GlatConfig, GlatModel
from sg_commonsense.scene_graph import EntityNode, SceneGraph, Vocabulary, from_triplets

CONFIG_DIR = Path(__file__).parent / "configs"
MOCK_DATA = Path(__file__).parent.parent / "mock_data"


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary(
        ("person", "horse", "shirt", "mountain", "pizza", "box"),
        ("riding", "wearing", "watching", "near", "in"),
    )


@pytest.fixture
def riding_graph(vocab) -> SceneGraph:
    """person(0) riding horse(1), person wearing shirt(2)."""
    entities = [EntityNode(vocab.entity_id(n)) for n in ("person", "horse", "shirt")]
    return from_triplets([(0, "riding", 1), (0, "wearing", 2)], entities, vocab)


@pytest.fixture
def small_config(vocab) -> GlatConfig:
    return GlatConfig(
        num_entity_classes=vocab.num_entities,
        num_predicate_classes=vocab.num_predicates,
        layers=2,
        global_heads=2,
        subject_heads=1,
        object_heads=1,
        model_dim=16,
    )


@pytest.fixture
def small_model(small_config, vocab) -> GlatModel:
    return GlatModel.init(small_config, vocab, seed=0)


@pytest.fixture
def world_path() -> Path:
    return CONFIG_DIR / "affordance_world.json"


@pytest.fixture
def mock_corpus() -> Path:
    return MOCK_DATA / "tiny_corpus.jsonl"
