"""Link prediction: DistMult decoder over encoder outputs.

A triple (s, r, o) scores as e_s^T R_r e_o with one learned diagonal per
canonical relation. Training corrupts each observed triple into omega
negatives (uniform entity replacement on a fair-coin side, unfiltered) and
minimizes sigmoid cross-entropy over positives and negatives, normalized
by (1+omega)|positives|, plus an l2 penalty on the relation diagonals.

The encoder is any EncoderStack; with zero layers and a projection input
it degenerates to plain DistMult over free entity embeddings, which is the
factorization baseline. A score-level ensemble of the two combines
alpha * encoder_model + (1-alpha) * baseline.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoder import (Decomposition, DropoutPolicy, EncoderStack, LayerSpec,
                      Propagation, ONE_HOT, PROJECTION, RELU, glorot_uniform)
from .graph import ACROSS_RELATIONS, KnowledgeGraph, normalization
from .optim import Adam
from .ranking import OBJECT, SUBJECT, FilterSet, RankingReport, evaluate_ranking


@dataclass(frozen=True)
class NegativeSamplingConfig:
    omega: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.omega < 1:
            raise ValueError("omega must be >= 1")


def sample_negatives(positive, num_entities: int, config: NegativeSamplingConfig,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """omega corruptions of one positive triple.

    Each negative flips a fair coin for the side to corrupt, then replaces
    that entity uniformly from the vocabulary. Collisions with true triples
    (including the positive itself) are kept — negatives are raw.
    """
    rng = rng or np.random.default_rng(config.seed)
    positives = np.asarray(positive, dtype=np.int64).reshape(1, 3)
    return corrupt_batch(positives, num_entities, config.omega, rng)


def corrupt_batch(positives: np.ndarray, num_entities: int, omega: int,
                  rng: np.random.Generator) -> np.ndarray:
    """omega negatives per positive, stacked (omega * n, 3)."""
    tiled = np.tile(positives, (omega, 1))
    n = len(tiled)
    corrupt_subject = rng.random(n) < 0.5
    replacements = rng.integers(0, num_entities, size=n)
    negatives = tiled.copy()
    negatives[corrupt_subject, 0] = replacements[corrupt_subject]
    negatives[~corrupt_subject, 2] = replacements[~corrupt_subject]
    return negatives


@dataclass(frozen=True)
class LinkPredConfig:
    """Decoder/encoder hyperparameters. Presets live in cli.PRESETS."""

    embed_dim: int = 200
    num_layers: int = 1
    decomposition: str = "basis"  # full | basis | block
    num_bases: int = 2            # basis count (basis mode)
    block_size: int = 5           # block side length (block mode)
    activation: str = RELU
    dropout_self_loop: float = 0.2
    dropout_edge: float = 0.4
    rescale_kept_messages: bool = False
    decoder_l2: float = 0.01
    embedding_l2: float = 0.0
    learning_rate: float = 0.01
    epochs: int = 500
    omega: int = 1
    normalization: str = ACROSS_RELATIONS
    eval_every: int = 10
    seed: int = 0
    dtype: str = "float64"


@dataclass(frozen=True)
class EnsembleConfig:
    alpha: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class LinkPredModel:
    stack: EncoderStack
    diagonals: Tensor  # (num_relations, embed_dim)
    num_entities: int
    num_relations: int
    normalization_mode: str = ACROSS_RELATIONS
    entity_names: Optional[list] = None
    relation_names: Optional[list] = None

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.stack.parameters() + [("distmult.diagonals", self.diagonals)]

    def embeddings(self, graph: KnowledgeGraph) -> np.ndarray:
        """Encoder outputs with dropout disabled."""
        norm = normalization(graph, self.normalization_mode)
        return self.stack.forward(Propagation(graph, norm)).data

    def candidate_score_fn(self, graph: KnowledgeGraph) -> Callable:
        return candidate_score_fn(self.embeddings(graph), self.diagonals.data)


def distmult_score(e_s: np.ndarray, diagonal: np.ndarray, e_o: np.ndarray) -> float:
    """Bilinear diagonal score for one triple; symmetric in e_s and e_o."""
    e_s, diagonal, e_o = (np.asarray(v).reshape(-1) for v in (e_s, diagonal, e_o))
    if not (e_s.shape == diagonal.shape == e_o.shape):
        raise ad.ShapeError("distmult_score", e_s.shape, diagonal.shape, e_o.shape)
    return float(np.sum(e_s * diagonal * e_o))


def score_triples(embeddings: Tensor, diagonals: Tensor, triples: np.ndarray) -> Tensor:
    """Differentiable (n, 1) scores for a triple batch."""
    s, r, o = triples[:, 0], triples[:, 1], triples[:, 2]
    e_s = ad.row_gather(embeddings, s)
    d_r = ad.row_gather(diagonals, r)
    e_o = ad.row_gather(embeddings, o)
    return ad.row_sum(ad.elementwise_mul(ad.elementwise_mul(e_s, d_r), e_o))


def linkpred_loss(embeddings: Tensor, diagonals: Tensor, positives: np.ndarray,
                  negatives: np.ndarray, decoder_l2: float,
                  embedding_l2: float = 0.0,
                  embedding_param: Optional[Tensor] = None) -> Tensor:
    """Sigmoid cross-entropy over positives and negatives plus decoder l2."""
    if len(positives) == 0:
        raise ValueError("empty positive batch")
    batch = np.concatenate([positives, negatives], axis=0)
    targets = np.zeros((len(batch), 1), dtype=embeddings.data.dtype)
    targets[:len(positives)] = 1.0
    logits = score_triples(embeddings, diagonals, batch)
    loss = ad.scale(ad.sigmoid_cross_entropy_sum(logits, targets), 1.0 / len(batch))
    if decoder_l2 > 0.0:
        loss = ad.add(loss, ad.scale(ad.l2_norm_sq(diagonals), decoder_l2))
    if embedding_l2 > 0.0 and embedding_param is not None:
        loss = ad.add(loss, ad.scale(ad.l2_norm_sq(embedding_param), embedding_l2))
    return loss


def candidate_score_fn(embeddings: np.ndarray, diagonals: np.ndarray) -> Callable:
    """Batched candidate scorer for ranking: query rows against all entities."""
    def score(batch: np.ndarray, side: str) -> np.ndarray:
        s, r, o = batch[:, 0], batch[:, 1], batch[:, 2]
        if side == OBJECT:
            query = embeddings[s] * diagonals[r]
        elif side == SUBJECT:
            query = diagonals[r] * embeddings[o]
        else:
            raise ValueError(f"unknown corruption side {side!r}")
        return query @ embeddings.T
    return score


def ensemble_score(s: int, r: int, o: int, model_a: LinkPredModel, model_b: LinkPredModel,
                   graph: KnowledgeGraph, alpha: float) -> float:
    """alpha * score_a + (1 - alpha) * score_b for one triple."""
    check_vocabulary(model_a, model_b)
    e_a, e_b = model_a.embeddings(graph), model_b.embeddings(graph)
    f_a = distmult_score(e_a[s], model_a.diagonals.data[r], e_a[o])
    f_b = distmult_score(e_b[s], model_b.diagonals.data[r], e_b[o])
    return alpha * f_a + (1.0 - alpha) * f_b


def ensemble_candidate_score_fn(fn_a: Callable, fn_b: Callable, alpha: float) -> Callable:
    def score(batch: np.ndarray, side: str) -> np.ndarray:
        return alpha * fn_a(batch, side) + (1.0 - alpha) * fn_b(batch, side)
    return score


def check_vocabulary(model_a: LinkPredModel, model_b: LinkPredModel) -> None:
    if (model_a.num_entities, model_a.num_relations) != (model_b.num_entities,
                                                         model_b.num_relations):
        raise ValueError("ensemble members were trained over different vocabularies")
    if (model_a.entity_names and model_b.entity_names
            and model_a.entity_names != model_b.entity_names):
        raise ValueError("ensemble members disagree on the entity vocabulary")
    if (model_a.relation_names and model_b.relation_names
            and model_a.relation_names != model_b.relation_names):
        raise ValueError("ensemble members disagree on the relation vocabulary")


def build_linkpred_model(graph: KnowledgeGraph, config: LinkPredConfig) -> LinkPredModel:
    dtype = np.dtype(config.dtype)
    dims = [config.embed_dim] * (config.num_layers + 1)
    if config.decomposition == "basis":
        decomposition = Decomposition.basis(config.num_bases)
    elif config.decomposition == "block":
        if config.embed_dim % config.block_size:
            raise ValueError(f"block size {config.block_size} must divide "
                             f"embed_dim {config.embed_dim}")
        decomposition = Decomposition.block(config.embed_dim // config.block_size)
    elif config.decomposition == "full":
        decomposition = Decomposition.full()
    else:
        raise ValueError(f"unknown decomposition {config.decomposition!r}")

    dropout = None
    if config.dropout_edge > 0.0 or config.dropout_self_loop > 0.0:
        dropout = DropoutPolicy(self_loop_rate=config.dropout_self_loop,
                                edge_rate=config.dropout_edge,
                                seed=3 * config.seed + 1,
                                rescale=config.rescale_kept_messages)

    if config.num_layers == 0:
        stack = EncoderStack(graph.num_nodes, graph.num_augmented, [],
                             input_mode=PROJECTION, projection_dim=config.embed_dim,
                             dropout=None, seed=config.seed, dtype=dtype)
    elif config.decomposition == "block":
        # one-hot input is indivisible into blocks; project first
        specs = [LayerSpec(dims[i], dims[i + 1], decomposition, config.activation)
                 for i in range(config.num_layers)]
        stack = EncoderStack(graph.num_nodes, graph.num_augmented, specs,
                             input_mode=PROJECTION, projection_dim=config.embed_dim,
                             dropout=dropout, seed=config.seed, dtype=dtype)
    else:
        specs = [LayerSpec(graph.num_nodes if i == 0 else dims[i], dims[i + 1],
                           decomposition, config.activation)
                 for i in range(config.num_layers)]
        stack = EncoderStack(graph.num_nodes, graph.num_augmented, specs,
                             input_mode=ONE_HOT, dropout=dropout,
                             seed=config.seed, dtype=dtype)

    rng = np.random.default_rng(3 * config.seed + 2)
    diagonals = Tensor(glorot_uniform(rng, graph.num_canonical, config.embed_dim, dtype),
                       requires_grad=True)
    relation_names = [rel.name for rel in graph.relations[:graph.num_canonical]]
    return LinkPredModel(stack, diagonals, graph.num_nodes, graph.num_canonical,
                         normalization_mode=config.normalization,
                         entity_names=graph.entity_names, relation_names=relation_names)


def train_linkpred(graph: KnowledgeGraph, valid_triples: np.ndarray,
                   config: LinkPredConfig,
                   filter_set: Optional[FilterSet] = None,
                   log: Optional[Callable[[str], None]] = None) -> tuple[LinkPredModel, list[dict]]:
    """Full-batch Adam on the corruption loss; keeps the parameters of the
    epoch with the best filtered validation MRR (measured every
    config.eval_every epochs and after the final epoch).
    """
    model = build_linkpred_model(graph, config)
    if model.stack.out_dim != config.embed_dim:
        raise ValueError("encoder output dimension does not match the decoder")
    norm = normalization(graph, config.normalization)
    eval_prop = Propagation(graph, norm)
    full_prop = eval_prop  # reused when there is no dropout
    positives = np.asarray(graph.triples, dtype=np.int64)
    valid_triples = np.asarray(valid_triples, dtype=np.int64).reshape(-1, 3)
    if filter_set is None:
        filter_set = FilterSet(np.concatenate([positives, valid_triples], axis=0))
    neg_rng = np.random.default_rng(3 * config.seed)
    adam = Adam(model.parameters(), learning_rate=config.learning_rate)

    def validation_mrr() -> float:
        score_fn = candidate_score_fn(model.stack.forward(eval_prop).data,
                                      model.diagonals.data)
        report = evaluate_ranking(score_fn, valid_triples, graph.num_nodes, filter_set)
        return report.aggregate()["filtered_mrr"]

    trace: list[dict] = []
    best = {"mrr": -np.inf, "params": None, "epoch": 0}

    def consider_checkpoint(epoch: int) -> float:
        mrr = validation_mrr()
        if mrr > best["mrr"]:
            best.update(mrr=mrr, epoch=epoch,
                        params=[np.array(p.data) for _, p in model.parameters()])
        return mrr

    if config.epochs == 0:
        consider_checkpoint(0)
    for epoch in range(config.epochs):
        if model.stack.dropout is not None:
            prop = Propagation.for_training(graph, norm, model.stack.dropout, epoch)
        else:
            prop = full_prop
        negatives = corrupt_batch(positives, graph.num_nodes, config.omega, neg_rng)
        adam.zero_grad()
        with Tape() as tape:
            embeddings = model.stack.forward(prop)
            loss = linkpred_loss(embeddings, model.diagonals, positives, negatives,
                                 config.decoder_l2, config.embedding_l2,
                                 model.stack.embedding)
        tape.backward(loss)
        adam.step()
        record = {"epoch": epoch + 1, "loss": loss.item()}
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            record["val_filtered_mrr"] = consider_checkpoint(epoch + 1)
            if log is not None:
                log(f"epoch {epoch + 1}: loss {record['loss']:.4f} "
                    f"val filtered MRR {record['val_filtered_mrr']:.4f}")
        elif log is not None and (epoch + 1) % 10 == 0:
            log(f"epoch {epoch + 1}: loss {record['loss']:.4f}")
        trace.append(record)

    if best["params"] is not None:
        for (_, p), snapshot in zip(model.parameters(), best["params"]):
            p.data[...] = snapshot
    return model, trace


def evaluate_model(model: LinkPredModel, graph: KnowledgeGraph, triples: np.ndarray,
                   filter_set: Optional[FilterSet]) -> RankingReport:
    score_fn = model.candidate_score_fn(graph)
    return evaluate_ranking(score_fn, np.asarray(triples, dtype=np.int64),
                            graph.num_nodes, filter_set)
