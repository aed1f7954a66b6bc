"""Versioned model checkpoints.

A checkpoint is a single .npz holding every parameter array verbatim plus
a JSON header: layer specs, input mode, the exact augmented-relation
vocabulary, task head metadata, and the resolved config snapshot. Loading
rebuilds the model and overwrites its parameters with the stored arrays,
so round trips are bit-exact at the stored precision.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor
from .classify import ClassifierModel
from .encoder import (BASIS, BLOCK, FULL, Decomposition, DropoutPolicy,
                      EncoderStack, LayerSpec, ONE_HOT, PROJECTION)
from .graph import KnowledgeGraph
from .linkpred import LinkPredModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _stack_meta(stack: EncoderStack) -> dict:
    layers = []
    for spec, _ in stack.layers:
        layers.append({"in_dim": spec.in_dim, "out_dim": spec.out_dim,
                       "decomposition": {"kind": spec.decomposition.kind,
                                         "num_bases": spec.decomposition.num_bases},
                       "activation": spec.activation})
    dropout = None
    if stack.dropout is not None:
        dropout = {"self_loop_rate": stack.dropout.self_loop_rate,
                   "edge_rate": stack.dropout.edge_rate,
                   "seed": stack.dropout.seed,
                   "rescale": stack.dropout.rescale}
    return {
        "num_nodes": stack.num_nodes,
        "num_relations_aug": stack.num_relations_aug,
        "input_mode": stack.input_mode,
        "projection_dim": None if stack.embedding is None else int(stack.embedding.data.shape[1]),
        "layers": layers,
        "dropout": dropout,
        "seed": stack.seed,
        "dtype": stack.dtype.name,
    }


def _rebuild_stack(meta: dict) -> EncoderStack:
    specs = []
    for layer in meta["layers"]:
        d = layer["decomposition"]
        if d["kind"] == FULL:
            decomposition = Decomposition.full()
        elif d["kind"] == BASIS:
            decomposition = Decomposition.basis(d["num_bases"])
        elif d["kind"] == BLOCK:
            decomposition = Decomposition.block(d["num_bases"])
        else:
            raise CheckpointError(f"unknown decomposition {d['kind']!r}")
        specs.append(LayerSpec(layer["in_dim"], layer["out_dim"], decomposition,
                               layer["activation"]))
    dropout = None
    if meta["dropout"] is not None:
        dropout = DropoutPolicy(**meta["dropout"])
    return EncoderStack(meta["num_nodes"], meta["num_relations_aug"], specs,
                        input_mode=meta["input_mode"],
                        projection_dim=meta["projection_dim"],
                        dropout=dropout, seed=meta["seed"], dtype=np.dtype(meta["dtype"]))


def save_checkpoint(path, model: Union[ClassifierModel, LinkPredModel],
                    graph: Optional[KnowledgeGraph] = None,
                    config_snapshot: Optional[dict] = None) -> None:
    if isinstance(model, ClassifierModel):
        kind = "classifier"
        head_meta = {"num_classes": model.num_classes,
                     "class_names": model.class_names,
                     "normalization_mode": model.normalization_mode}
        named = model.stack.parameters()
    elif isinstance(model, LinkPredModel):
        kind = "linkpred"
        head_meta = {"num_entities": model.num_entities,
                     "num_relations": model.num_relations,
                     "normalization_mode": model.normalization_mode,
                     "entity_names": model.entity_names,
                     "relation_names": model.relation_names}
        named = model.parameters()
    else:
        raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")

    vocabulary = None
    if graph is not None:
        vocabulary = [{"index": rel.index, "name": rel.name, "kind": rel.kind,
                       "base": rel.base} for rel in graph.relations]
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "stack": _stack_meta(model.stack),
            "head": head_meta, "relation_vocabulary": vocabulary,
            "config_snapshot": config_snapshot or {}}
    arrays = {f"param:{name}": p.data for name, p in named}
    np.savez_compressed(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[Union[ClassifierModel, LinkPredModel], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = np.load(path, allow_pickle=False)
        meta = json.loads(str(payload["__meta__"]))
    except (OSError, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")

    stack = _rebuild_stack(meta["stack"])
    head = meta["head"]
    if meta["kind"] == "classifier":
        model = ClassifierModel(stack, head["num_classes"], head["class_names"],
                                normalization_mode=head["normalization_mode"])
        named = stack.parameters()
    elif meta["kind"] == "linkpred":
        dim = meta["stack"]["layers"][-1]["out_dim"] if meta["stack"]["layers"] \
            else meta["stack"]["projection_dim"]
        diagonals = Tensor(np.zeros((head["num_relations"], dim),
                                    dtype=np.dtype(meta["stack"]["dtype"])),
                           requires_grad=True)
        model = LinkPredModel(stack, diagonals, head["num_entities"], head["num_relations"],
                              normalization_mode=head["normalization_mode"],
                              entity_names=head["entity_names"],
                              relation_names=head["relation_names"])
        named = model.parameters()
    else:
        raise CheckpointError(f"unknown checkpoint kind {meta['kind']!r}")

    for name, tensor in named:
        key = f"param:{name}"
        if key not in payload:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        stored = payload[key]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {stored.shape}, "
                                  f"expected {tensor.data.shape}")
        tensor.data[...] = stored
    return model, meta
