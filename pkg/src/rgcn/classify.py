"""Entity classification: softmax propagation head and masked cross-entropy.

The classifier is a stack of propagation layers whose final layer outputs
one unit per class through a per-node softmax. Training minimizes
cross-entropy summed over labeled nodes only; unlabeled nodes contribute
nothing. The layer count includes the output layer, so the standard
2-layer setup is input -> hidden -> classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoder import (Decomposition, EncoderStack, LayerSpec, Propagation,
                      ONE_HOT, RELU, SOFTMAX)
from .graph import KnowledgeGraph, NormalizationScheme, PER_RELATION, normalization
from .optim import Adam


@dataclass(frozen=True)
class LabelSet:
    """Gold classes for a subset of nodes (one class per labeled node)."""

    nodes: np.ndarray  # labeled node ids
    classes: np.ndarray  # class index per labeled node
    num_classes: int

    def __post_init__(self):
        if len(self.nodes) != len(self.classes):
            raise ValueError("nodes/classes length mismatch")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    def __len__(self):
        return len(self.nodes)


def split_labels(labels: LabelSet, fraction: float, seed: int) -> tuple[LabelSet, LabelSet]:
    """Set aside `fraction` of the labeled nodes as a validation split."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    n_val = int(round(fraction * n))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    make = lambda idx: LabelSet(labels.nodes[idx], labels.classes[idx], labels.num_classes)
    return make(train_idx), make(val_idx)


@dataclass(frozen=True)
class ClassifierConfig:
    """Hyperparameters; defaults follow the standard search grid."""

    hidden_dim: int = 16
    num_layers: int = 2
    epochs: int = 50
    learning_rate: float = 0.01
    l2_first_layer: float = 0.0
    basis_count: int = 0  # 0 means no decomposition (one matrix per relation)
    normalization: str = PER_RELATION
    val_fraction: float = 0.2
    seed: int = 0
    dtype: str = "float64"


@dataclass
class ClassifierModel:
    stack: EncoderStack
    num_classes: int
    class_names: Optional[list] = None
    normalization_mode: str = PER_RELATION


def classification_loss(probs: Tensor, labels: LabelSet) -> Tensor:
    """-sum over labeled nodes of log p(true class). Unlabeled rows ignored."""
    if labels.classes.size and int(labels.classes.max()) >= probs.data.shape[1]:
        raise ValueError(f"label index {int(labels.classes.max())} >= "
                         f"{probs.data.shape[1]} classes")
    picked = ad.pick(probs, labels.nodes, labels.classes)
    return ad.scale(ad.tensor_sum(ad.log(picked)), -1.0)


def build_classifier_stack(graph: KnowledgeGraph, num_classes: int,
                           config: ClassifierConfig) -> EncoderStack:
    decomposition = (Decomposition.basis(config.basis_count) if config.basis_count > 0
                     else Decomposition.full())
    dims = [graph.num_nodes] + [config.hidden_dim] * (config.num_layers - 1) + [num_classes]
    specs = []
    for i in range(config.num_layers):
        activation = SOFTMAX if i == config.num_layers - 1 else RELU
        specs.append(LayerSpec(dims[i], dims[i + 1], decomposition, activation))
    return EncoderStack(graph.num_nodes, graph.num_augmented, specs,
                        input_mode=ONE_HOT, seed=config.seed, dtype=np.dtype(config.dtype))


def _total_loss(stack: EncoderStack, prop: Propagation, labels: LabelSet,
                config: ClassifierConfig) -> tuple[Tensor, Tensor]:
    probs = stack.forward(prop)
    loss = classification_loss(probs, labels)
    if config.l2_first_layer > 0.0:
        for _, p in stack.first_layer_parameters():
            loss = ad.add(loss, ad.scale(ad.l2_norm_sq(p), config.l2_first_layer))
    return loss, probs


def _accuracy(probs: np.ndarray, labels: LabelSet) -> float:
    if len(labels) == 0:
        return float("nan")
    predicted = probs[labels.nodes].argmax(axis=1)
    return float((predicted == labels.classes).mean())


def train_classifier(graph: KnowledgeGraph, labels: LabelSet, config: ClassifierConfig,
                     val_labels: Optional[LabelSet] = None,
                     class_names=None) -> tuple[ClassifierModel, list[dict]]:
    """Full-batch Adam on masked cross-entropy (plus optional first-layer l2).

    When `val_labels` is None, `config.val_fraction` of the training labels
    is set aside for the validation trace; pass an empty fraction (or an
    explicit split) to train on everything. Returns the final-epoch model.
    """
    if len(labels) == 0:
        raise ValueError("empty training label set")
    if val_labels is None and config.val_fraction > 0.0:
        labels, val_labels = split_labels(labels, config.val_fraction, config.seed)
        if len(labels) == 0:
            raise ValueError("validation split consumed every training label")

    norm = normalization(graph, config.normalization)
    prop = Propagation(graph, norm)  # no dropout in classification training
    stack = build_classifier_stack(graph, _num_classes(labels, val_labels), config)
    adam = Adam(stack.parameters(), learning_rate=config.learning_rate)

    trace = []
    for epoch in range(config.epochs):
        adam.zero_grad()
        with Tape() as tape:
            loss, probs = _total_loss(stack, prop, labels, config)
        tape.backward(loss)
        adam.step()
        record = {"epoch": epoch + 1, "loss": loss.item(),
                  "train_accuracy": _accuracy(probs.data, labels)}
        if val_labels is not None and len(val_labels):
            record["val_accuracy"] = _accuracy(probs.data, val_labels)
        trace.append(record)
    model = ClassifierModel(stack, _num_classes(labels, val_labels), class_names,
                            normalization_mode=config.normalization)
    return model, trace


def _num_classes(labels: LabelSet, val_labels: Optional[LabelSet]) -> int:
    k = labels.num_classes
    if val_labels is not None and val_labels.num_classes != k:
        raise ValueError("train/validation label sets disagree on class count")
    return k


def predict_classes(model: ClassifierModel, graph: KnowledgeGraph,
                    norm: Optional[NormalizationScheme] = None) -> tuple[np.ndarray, np.ndarray]:
    """(argmax class, probability rows) for every node; ties break to the
    lowest class index; deterministic (no dropout at inference)."""
    norm = norm or normalization(graph, model.normalization_mode)
    probs = model.stack.forward(Propagation(graph, norm)).data
    return probs.argmax(axis=1), probs


def evaluate_accuracy(model: ClassifierModel, graph: KnowledgeGraph, labels: LabelSet,
                      norm: Optional[NormalizationScheme] = None) -> float:
    _, probs = predict_classes(model, graph, norm)
    return _accuracy(probs, labels)
