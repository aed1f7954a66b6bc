"""Relational graph convolution encoder.

Each layer updates node i as

    h_i' = act( sum_r sum_{j in N_i^r} (1/c_{i,r}) W_r h_j  +  W_0 h_i )

summing over the augmented relation vocabulary minus the self-loop, whose
contribution is the separate unnormalized W_0 term. Relation weights W_r
come in three parameterizations: one dense matrix per relation (full), a
shared linear combination of B basis matrices (basis), or a direct sum of
B small blocks (block). W_0 is always a standalone dense matrix.

Featureless graphs use one-hot inputs; the first layer then never builds
the identity feature matrix — W_r h_j is just column j of W_r, so messages
reduce to sparse-matrix products against W_r^T. Block-decomposed first
layers require a dense linear projection of the one-hot input instead (an
embedding table), since the node count is not divisible into blocks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, Tensor
from .graph import KnowledgeGraph, NormalizationScheme

FULL = "full"
BASIS = "basis"
BLOCK = "block"

RELU = "relu"
SOFTMAX = "softmax"
IDENTITY = "identity"

ONE_HOT = "one-hot-direct"
PROJECTION = "linear-projection"


@dataclass(frozen=True)
class Decomposition:
    kind: str
    num_bases: int = 0

    @staticmethod
    def full() -> "Decomposition":
        return Decomposition(FULL)

    @staticmethod
    def basis(num_bases: int) -> "Decomposition":
        if num_bases < 1:
            raise ValueError("basis decomposition needs B >= 1")
        return Decomposition(BASIS, num_bases)

    @staticmethod
    def block(num_blocks: int) -> "Decomposition":
        if num_blocks < 1:
            raise ValueError("block decomposition needs B >= 1")
        return Decomposition(BLOCK, num_blocks)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    decomposition: Decomposition = field(default_factory=Decomposition.full)
    activation: str = RELU

    def __post_init__(self):
        if self.activation not in (RELU, SOFTMAX, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")
        d = self.decomposition
        if d.kind == BLOCK and (self.in_dim % d.num_bases or self.out_dim % d.num_bases):
            raise ValueError(
                f"block({d.num_bases}) must divide both dims ({self.in_dim}, {self.out_dim})")


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)


class LayerParams:
    """Weights of one layer under the spec's decomposition.

    Relation weights cover the augmented vocabulary minus the self-loop
    (canonical relations first, then their inverses — a relation and its
    inverse always have independent coefficients/blocks). The self-loop
    matrix is a plain dense matrix in every mode.
    """

    def __init__(self, spec: LayerSpec, num_relations: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.spec = spec
        self.num_relations = num_relations  # augmented minus self-loop
        d = spec.decomposition
        if d.kind == FULL:
            self.weights = [Tensor(glorot_uniform(rng, spec.out_dim, spec.in_dim, dtype),
                                   requires_grad=True) for _ in range(num_relations)]
        elif d.kind == BASIS:
            self.bases = [Tensor(glorot_uniform(rng, spec.out_dim, spec.in_dim, dtype),
                                 requires_grad=True) for _ in range(d.num_bases)]
            self.coeffs = Tensor(glorot_uniform(rng, num_relations, d.num_bases, dtype),
                                 requires_grad=True)
        else:
            rows, cols = spec.out_dim // d.num_bases, spec.in_dim // d.num_bases
            self.blocks = [[Tensor(glorot_uniform(rng, rows, cols, dtype), requires_grad=True)
                            for _ in range(d.num_bases)] for _ in range(num_relations)]
        self.self_loop = Tensor(glorot_uniform(rng, spec.out_dim, spec.in_dim, dtype),
                                requires_grad=True)

    def parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        kind = self.spec.decomposition.kind
        named: list[tuple[str, Tensor]] = []
        if kind == FULL:
            named += [(f"{prefix}W[{r}]", w) for r, w in enumerate(self.weights)]
        elif kind == BASIS:
            named += [(f"{prefix}basis[{b}]", v) for b, v in enumerate(self.bases)]
            named.append((f"{prefix}coeffs", self.coeffs))
        else:
            named += [(f"{prefix}block[{r}][{b}]", q)
                      for r, row in enumerate(self.blocks) for b, q in enumerate(row)]
        named.append((f"{prefix}W0", self.self_loop))
        return named

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    def effective_weight(self, rel: int) -> np.ndarray:
        """Materialized W_rel. Self-loop has its own accessor, not this one."""
        if not 0 <= rel < self.num_relations:
            raise ValueError(f"relation id {rel} outside the decomposed range "
                             f"(self-loop uses the self_loop accessor)")
        kind = self.spec.decomposition.kind
        if kind == FULL:
            return np.array(self.weights[rel].data)
        if kind == BASIS:
            coeff = self.coeffs.data[rel]
            out = np.zeros((self.spec.out_dim, self.spec.in_dim), dtype=self.bases[0].data.dtype)
            for b, v in enumerate(self.bases):
                out += coeff[b] * v.data
            return out
        rows, cols = self.blocks[rel][0].data.shape
        out = np.zeros((self.spec.out_dim, self.spec.in_dim), dtype=self.blocks[rel][0].data.dtype)
        for b, q in enumerate(self.blocks[rel]):
            out[b * rows:(b + 1) * rows, b * cols:(b + 1) * cols] = q.data
        return out


def effective_weight(params: LayerParams, rel: int) -> np.ndarray:
    return params.effective_weight(rel)


@dataclass(frozen=True)
class DropoutPolicy:
    """Edge dropout rates; messages are dropped, kept ones are not rescaled
    unless `rescale` is set."""

    self_loop_rate: float = 0.0
    edge_rate: float = 0.0
    seed: int = 0
    rescale: bool = False

    def __post_init__(self):
        for rate in (self.self_loop_rate, self.edge_rate):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate {rate} outside [0, 1)")


@dataclass
class EdgeDropoutMask:
    """Kept-edge masks per augmented non-self relation, plus self-loop keeps."""

    kept: list[np.ndarray]
    self_keep: np.ndarray


def apply_edge_dropout(graph: KnowledgeGraph, policy: DropoutPolicy,
                       epoch_seed: int) -> EdgeDropoutMask:
    """Sample kept-edge masks, deterministic in (policy.seed, epoch_seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([policy.seed & 0x7FFFFFFF,
                                                        epoch_seed & 0x7FFFFFFF]))
    kept = [rng.random(graph.num_edges(rel)) >= policy.edge_rate
            for rel in range(2 * graph.num_canonical)]
    self_keep = rng.random(graph.num_nodes) >= policy.self_loop_rate
    return EdgeDropoutMask(kept=kept, self_keep=self_keep)


class Propagation:
    """Constant per-epoch propagation structure: normalized (and optionally
    dropout-masked) adjacency per relation, plus flattened edge arrays for
    the fused basis path."""

    def __init__(self, graph: KnowledgeGraph, norm: NormalizationScheme,
                 mask: Optional[EdgeDropoutMask] = None, rescale_rates=None):
        if norm.graph is not graph:
            raise ValueError("normalization was built on a different graph")
        self.graph = graph
        self.num_nodes = graph.num_nodes
        self.num_relations = 2 * graph.num_canonical  # non-self augmented
        self._dst, self._src, self._w = [], [], []
        for rel in range(self.num_relations):
            dst, src = graph.edge_arrays(rel)
            w = norm.edge_weights(rel)
            if mask is not None:
                keep = mask.kept[rel]
                dst, src, w = dst[keep], src[keep], w[keep]
                if rescale_rates is not None and rescale_rates[0] < 1.0:
                    w = w / rescale_rates[0]
            self._dst.append(dst)
            self._src.append(src)
            self._w.append(w)
        if mask is not None:
            self.self_keep = mask.self_keep.astype(np.float64)
            if rescale_rates is not None and rescale_rates[1] < 1.0:
                self.self_keep = self.self_keep / rescale_rates[1]
        else:
            self.self_keep = np.ones(graph.num_nodes, dtype=np.float64)
        self._matrices: dict[int, Optional[SparseMatrix]] = {}
        self._fused = None

    @classmethod
    def for_training(cls, graph, norm, policy: Optional[DropoutPolicy],
                     epoch_seed: int) -> "Propagation":
        if policy is None or (policy.edge_rate == 0.0 and policy.self_loop_rate == 0.0):
            return cls(graph, norm)
        mask = apply_edge_dropout(graph, policy, epoch_seed)
        rates = (1.0 - policy.edge_rate, 1.0 - policy.self_loop_rate) if policy.rescale else None
        return cls(graph, norm, mask=mask, rescale_rates=rates)

    def matrix(self, rel: int) -> Optional[SparseMatrix]:
        """Normalized adjacency for one relation, or None when edgeless."""
        if rel not in self._matrices:
            if len(self._dst[rel]) == 0:
                self._matrices[rel] = None
            else:
                self._matrices[rel] = SparseMatrix.from_edges(
                    (self.num_nodes, self.num_nodes),
                    self._dst[rel], self._src[rel], self._w[rel])
        return self._matrices[rel]

    def fused_arrays(self):
        """Flattened (dst, src, rel, w) plus fixed CSR patterns for building
        the per-basis combined operator sum_r a_rb A_r in O(E)."""
        if self._fused is None:
            dst = np.concatenate(self._dst) if self._dst else np.zeros(0, np.int64)
            src = np.concatenate(self._src) if self._src else np.zeros(0, np.int64)
            rel = np.concatenate([np.full(len(d), r, dtype=np.int64)
                                  for r, d in enumerate(self._dst)]) if self._dst else np.zeros(0, np.int64)
            w = np.concatenate(self._w) if self._w else np.zeros(0, np.float64)
            n = self.num_nodes
            perm = np.lexsort((src, dst))
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
            perm_t = np.lexsort((dst, src))
            indptr_t = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(src, minlength=n), out=indptr_t[1:])
            self._fused = dict(dst=dst, src=src, rel=rel, w=w,
                               perm=perm, indices=src[perm], indptr=indptr,
                               perm_t=perm_t, indices_t=dst[perm_t], indptr_t=indptr_t)
        return self._fused


def _csr(data, indices, indptr, n):
    import scipy.sparse as sp
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def _basis_propagate(prop: Propagation, coeffs: Tensor, bases: Sequence[Tensor],
                     h: Optional[Tensor]) -> Tensor:
    """sum_r A_r (H W_r^T) under W_r = sum_b a_rb V_b, regrouped per basis as
    sum_b S_b (H V_b^T) with S_b = sum_r a_rb A_r. Exact VJPs for a and V."""
    fused = prop.fused_arrays()
    n = prop.num_nodes
    num_bases = len(bases)
    a = coeffs.data
    p_mats = [h.data @ bases[b].data.T if h is not None else
              np.ascontiguousarray(bases[b].data.T) for b in range(num_bases)]
    edge_scale = [fused["w"] * a[fused["rel"], b] for b in range(num_bases)]
    out_data = np.zeros((n, bases[0].data.shape[0]), dtype=bases[0].data.dtype)
    for b in range(num_bases):
        s_b = _csr(edge_scale[b][fused["perm"]], fused["indices"], fused["indptr"], n)
        out_data += s_b @ p_mats[b]
    out = Tensor(out_data)

    def backward():
        g = out.grad
        g_at_dst = g[fused["dst"]]
        da = np.zeros_like(a)
        for b in range(num_bases):
            s_b_t = _csr(edge_scale[b][fused["perm_t"]], fused["indices_t"],
                         fused["indptr_t"], n)
            d_p = s_b_t @ g  # (n, out_dim)
            if bases[b].requires_grad:
                if h is not None:
                    bases[b].accumulate_grad(d_p.T @ h.data)
                else:
                    bases[b].accumulate_grad(d_p.T)
            if h is not None and h.requires_grad:
                h.accumulate_grad(d_p @ bases[b].data)
            if coeffs.requires_grad:
                per_edge = (p_mats[b][fused["src"]] * g_at_dst).sum(axis=1) * fused["w"]
                da[:, b] = np.bincount(fused["rel"], weights=per_edge,
                                       minlength=a.shape[0])
        coeffs.accumulate_grad(da)

    inputs = [coeffs, *bases] + ([h] if h is not None else [])
    return ad.register_op(out, inputs, backward)


def layer_forward(prop: Propagation, spec: LayerSpec, params: LayerParams,
                  h: Optional[Tensor]) -> Tensor:
    """One propagation layer. h=None means one-hot input rows (first layer)."""
    if h is not None and h.data.shape[1] != spec.in_dim:
        raise ad.ShapeError("layer_forward input", h.data.shape, (None, spec.in_dim))
    if h is None and spec.in_dim != prop.num_nodes:
        raise ad.ShapeError("layer_forward one-hot input", (prop.num_nodes,), (spec.in_dim,))
    kind = spec.decomposition.kind

    if kind == BASIS:
        msg = _basis_propagate(prop, params.coeffs, params.bases, h)
    elif kind == FULL:
        msg = None
        for rel in range(prop.num_relations):
            adj = prop.matrix(rel)
            if adj is None:
                continue
            if h is None:
                propagated = ad.sparse_matmul(adj, _transpose(params.weights[rel]))
            else:
                propagated = ad.sparse_matmul(adj, ad.matmul(h, params.weights[rel],
                                                             transpose_b=True))
            msg = propagated if msg is None else ad.add(msg, propagated)
        if msg is None:
            msg = Tensor(np.zeros((prop.num_nodes, spec.out_dim),
                                  dtype=params.self_loop.data.dtype))
    else:
        if h is None:
            raise ValueError("block decomposition requires a dense input "
                             "(linear-projection input mode)")
        msg = None
        for rel in range(prop.num_relations):
            adj = prop.matrix(rel)
            if adj is None:
                continue
            propagated = ad.sparse_matmul(adj, ad.block_diag_apply(params.blocks[rel], h))
            msg = propagated if msg is None else ad.add(msg, propagated)
        if msg is None:
            msg = Tensor(np.zeros((prop.num_nodes, spec.out_dim),
                                  dtype=params.self_loop.data.dtype))

    if h is None:
        self_term = _transpose(params.self_loop)
    else:
        self_term = ad.matmul(h, params.self_loop, transpose_b=True)
    if not np.all(prop.self_keep == 1.0):
        self_term = ad.row_scale(self_term, prop.self_keep)
    pre = ad.add(msg, self_term)

    if spec.activation == RELU:
        return ad.relu(pre)
    if spec.activation == SOFTMAX:
        return ad.softmax_rows(pre)
    return pre


def _transpose(t: Tensor) -> Tensor:
    out = Tensor(np.ascontiguousarray(t.data.T))

    def backward():
        t.accumulate_grad(out.grad.T)
    return ad.register_op(out, (t,), backward)


class EncoderStack:
    """Ordered propagation layers plus the input mode.

    one-hot-direct feeds identity rows to the first layer; linear-projection
    owns a dense (num_nodes, dim) embedding table, which is also the entire
    encoder when the layer list is empty (factorization-baseline mode).
    """

    def __init__(self, num_nodes: int, num_relations_aug: int, layer_specs: Sequence[LayerSpec],
                 input_mode: str = ONE_HOT, projection_dim: Optional[int] = None,
                 dropout: Optional[DropoutPolicy] = None, seed: int = 0, dtype=np.float64):
        self.num_nodes = num_nodes
        self.num_relations_aug = num_relations_aug
        self.input_mode = input_mode
        self.dropout = dropout
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        if input_mode == PROJECTION:
            if projection_dim is None:
                raise ValueError("linear-projection input mode needs a dimension")
            self.embedding = Tensor(glorot_uniform(rng, num_nodes, projection_dim, self.dtype),
                                    requires_grad=True)
            in_dim = projection_dim
        elif input_mode == ONE_HOT:
            if not layer_specs:
                raise ValueError("a 0-layer encoder needs linear-projection input")
            self.embedding = None
            in_dim = num_nodes
        else:
            raise ValueError(f"unknown input mode {input_mode!r}")

        self.layers: list[tuple[LayerSpec, LayerParams]] = []
        for i, spec in enumerate(layer_specs):
            if spec.in_dim != in_dim:
                raise ValueError(f"layer {i} expects in_dim {spec.in_dim}, chain gives {in_dim}")
            if i == 0 and self.embedding is None and spec.decomposition.kind == BLOCK:
                raise ValueError("first-layer block decomposition requires linear-projection input")
            params = LayerParams(spec, num_relations_aug - 1, rng, self.dtype)
            self.layers.append((spec, params))
            in_dim = spec.out_dim
        self.out_dim = in_dim

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        if self.embedding is not None:
            named.append(("embedding", self.embedding))
        for i, (_, params) in enumerate(self.layers):
            named += params.parameters(prefix=f"layer{i}.")
        return named

    def first_layer_parameters(self) -> list[tuple[str, Tensor]]:
        if not self.layers:
            return []
        return self.layers[0][1].parameters(prefix="layer0.")

    def forward(self, prop: Propagation) -> Tensor:
        h = self.embedding
        for spec, params in self.layers:
            h = layer_forward(prop, spec, params, h)
        return h


def encode(graph: KnowledgeGraph, norm: NormalizationScheme, stack: EncoderStack,
           training: bool = False, epoch_seed: int = 0) -> Tensor:
    """Final-layer hidden states for every node. training=False disables
    dropout and is deterministic."""
    if training:
        prop = Propagation.for_training(graph, norm, stack.dropout, epoch_seed)
    else:
        prop = Propagation(graph, norm)
    return stack.forward(prop)
