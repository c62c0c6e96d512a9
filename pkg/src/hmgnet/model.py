"""The heterogeneous molecular graph network.

Per-order input modules embed node features; T stacked interaction modules
pass messages along 1-1, 2-2 (filtered by geometric edge features) and 1-2
(featureless) edges and refine node states with residual layers; per-order
output modules turn final states into per-node predictions with
per-composition scale/shift; a shared fusion module computes attention
weights over the per-order molecule sums from a batch-normalized global
representation. The final prediction is the attention-weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, shifted_softplus as ssp
from .featurize import HmgFeatures
from .graph import HeteroMolGraph
from .optim import ParameterStore


@dataclass
class ModelConfig:
    n_feat: int = 128
    n_interactions: int = 5
    k_rbf: int = 64
    cutoff: float = 5.0
    use_mtl_loss: bool = True
    use_inter_order: bool = True
    use_order_2: bool = True
    n_comp1: int = 0
    n_comp2: int = 0

    def __post_init__(self):
        if self.n_feat < 1 or self.n_interactions < 1:
            raise ValueError("n_feat and n_interactions must be >= 1")

    @property
    def n_orders(self) -> int:
        return 2 if self.use_order_2 else 1

    def to_dict(self) -> dict:
        return {
            "n_feat": self.n_feat, "n_interactions": self.n_interactions,
            "k_rbf": self.k_rbf, "cutoff": self.cutoff,
            "use_mtl_loss": self.use_mtl_loss,
            "use_inter_order": self.use_inter_order,
            "use_order_2": self.use_order_2,
            "n_comp1": self.n_comp1, "n_comp2": self.n_comp2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    """Graph-recorded outputs of one forward pass, one row per molecule."""

    fused: Tensor      # (n_mol, 1) attention-weighted prediction
    per_order: Tensor  # (n_mol, n_orders) per-order summed predictions
    alpha: Tensor      # (n_mol, n_orders) fusion weights, rows sum to 1


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Create all trainable arrays: orthogonal-glorot weights, zero biases,
    unit-variance uniform embeddings, identity scale/shift tables."""
    if config.n_comp1 < 1:
        raise ValueError("config.n_comp1 must be set from the vocabulary")
    if config.use_order_2 and config.n_comp2 < 1:
        raise ValueError("config.n_comp2 must be set from the vocabulary")
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    f, k = config.n_feat, config.k_rbf
    orders = ("1", "2") if config.use_order_2 else ("1",)

    def w(name, rows_, cols_, order):
        store.add(name, ad.glorot_orthogonal_init(rows_, cols_, rng), order)

    def b(name, n, order):
        store.add(name, np.zeros(n), order)

    def embed(name, vocab, order):
        store.add(name, rng.uniform(-math.sqrt(3), math.sqrt(3), (vocab, f)), order)

    embed("embed.1", config.n_comp1, "1")
    w("input.1.w", f, f, "1")
    b("input.1.b", f, "1")
    if config.use_order_2:
        embed("embed.2", config.n_comp2, "2")
        w("input.2.w", f + k, f, "2")
        b("input.2.b", f, "2")

    n_blocks = 1 + config.n_orders  # old state plus one message block per order
    for t in range(config.n_interactions):
        for p in orders:
            w(f"inter.{t}.same.{p}.g", k, f, p)
            w(f"inter.{t}.same.{p}.w", f, f, p)
            b(f"inter.{t}.same.{p}.b", f, p)
        if config.use_order_2:
            # Cross-order message parameters, one set per direction.
            w(f"inter.{t}.cross.to1.w", f, f, "1")
            b(f"inter.{t}.cross.to1.b", f, "1")
            w(f"inter.{t}.cross.to2.w", f, f, "2")
            b(f"inter.{t}.cross.to2.b", f, "2")
        for p in orders:
            w(f"inter.{t}.update.{p}.w", n_blocks * f, f, p)
            b(f"inter.{t}.update.{p}.b", f, p)
            for r in (0, 1):
                w(f"inter.{t}.refine.{p}.{r}.w", f, f, p)
                b(f"inter.{t}.refine.{p}.{r}.b", f, p)

    for p, vocab in (("1", config.n_comp1), ("2", config.n_comp2))[: config.n_orders]:
        w(f"out.{p}.w", f, 1, p)
        b(f"out.{p}.b", 1, p)
        store.add(f"scale.{p}.s", np.ones((vocab, 1)), p)
        store.add(f"scale.{p}.r", np.zeros((vocab, 1)), p)

    width = config.n_orders * f
    store.add("fusion.bn.gamma", np.ones(width), "shared")
    store.add("fusion.bn.beta", np.zeros(width), "shared")
    store.add_bn("fusion.bn", width)
    w("fusion.hidden.w", width, f, "shared")
    b("fusion.hidden.b", f, "shared")
    for p in orders:
        w(f"fusion.attn.{p}", f, 1, "shared")
    return store


def _input_module(params, config, hmg, feats):
    h1 = ssp(ad.linear(ad.rows(params["embed.1"], hmg.comp1),
                       params["input.1.w"], params["input.1.b"]))
    if not config.use_order_2:
        return h1, None
    # Order-2 input: embedding concatenated with the length expansion.
    raw2 = ad.concat([ad.rows(params["embed.2"], hmg.comp2), Tensor(feats.x2)], axis=1)
    h2 = ssp(ad.linear(raw2, params["input.2.w"], params["input.2.b"]))
    return h1, h2


def _same_order_message(h, edge_feat, src, dst, n_nodes, g_mat, w_mat, b_vec):
    filt = ad.matmul(Tensor(edge_feat), g_mat)
    msg = ad.mul(filt, ssp(ad.linear(ad.rows(h, src), w_mat, b_vec)))
    return ad.segment_sum(msg, dst, n_nodes)


def _cross_order_message(h_src, src_idx, dst_idx, n_dst, w_mat, b_vec):
    msg = ssp(ad.linear(ad.rows(h_src, src_idx), w_mat, b_vec))
    return ad.segment_sum(msg, dst_idx, n_dst)


def _interaction(params, config, hmg, feats, h1, h2, t):
    n1, n2 = hmg.n_atoms, hmg.n_pairs
    f = config.n_feat
    m11 = _same_order_message(
        h1, feats.e11, hmg.e11_src, hmg.e11_dst, n1,
        params[f"inter.{t}.same.1.g"], params[f"inter.{t}.same.1.w"],
        params[f"inter.{t}.same.1.b"])
    if config.use_order_2:
        m22 = _same_order_message(
            h2, feats.e22, hmg.e22_src, hmg.e22_dst, n2,
            params[f"inter.{t}.same.2.g"], params[f"inter.{t}.same.2.w"],
            params[f"inter.{t}.same.2.b"])
        if config.use_inter_order:
            m21 = _cross_order_message(
                h2, hmg.e12_pair, hmg.e12_atom, n1,
                params[f"inter.{t}.cross.to1.w"], params[f"inter.{t}.cross.to1.b"])
            m12 = _cross_order_message(
                h1, hmg.e12_atom, hmg.e12_pair, n2,
                params[f"inter.{t}.cross.to2.w"], params[f"inter.{t}.cross.to2.b"])
        else:
            # Ablated inter-order blocks stay as zeros to keep shapes static.
            m21 = Tensor(np.zeros((n1, f)))
            m12 = Tensor(np.zeros((n2, f)))
        new_h1 = ad.add(h1, ssp(ad.linear(
            ad.concat([h1, m11, m21], axis=1),
            params[f"inter.{t}.update.1.w"], params[f"inter.{t}.update.1.b"])))
        new_h2 = ad.add(h2, ssp(ad.linear(
            ad.concat([h2, m12, m22], axis=1),
            params[f"inter.{t}.update.2.w"], params[f"inter.{t}.update.2.b"])))
    else:
        new_h1 = ad.add(h1, ssp(ad.linear(
            ad.concat([h1, m11], axis=1),
            params[f"inter.{t}.update.1.w"], params[f"inter.{t}.update.1.b"])))
        new_h2 = None

    def refine(h, p):
        for r in (0, 1):
            h = ad.add(h, ssp(ad.linear(
                h, params[f"inter.{t}.refine.{p}.{r}.w"],
                params[f"inter.{t}.refine.{p}.{r}.b"])))
        return h

    new_h1 = refine(new_h1, "1")
    if new_h2 is not None:
        new_h2 = refine(new_h2, "2")
    return new_h1, new_h2


def _output_module(params, h, comp, p):
    node = ad.linear(h, params[f"out.{p}.w"], params[f"out.{p}.b"])
    s = ad.rows(params[f"scale.{p}.s"], comp)
    r = ad.rows(params[f"scale.{p}.r"], comp)
    return ad.add(ad.mul(s, node), r)


def _fusion_module(params, config, hmg, h1, h2, training):
    n_mol = hmg.n_mol
    blocks = [ad.segment_sum(h1, hmg.mol_id1, n_mol)]
    if config.use_order_2:
        blocks.append(ad.segment_sum(h2, hmg.mol_id2, n_mol))
    vtilde = ad.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    v = ad.batch_norm(vtilde, params["fusion.bn.gamma"], params["fusion.bn.beta"],
                      params.bn_states["fusion.bn"], training=training)
    z = ssp(ad.linear(v, params["fusion.hidden.w"], params["fusion.hidden.b"]))
    orders = ("1", "2") if config.use_order_2 else ("1",)
    logits = ad.concat(
        [ad.leaky_relu(ad.matmul(z, params[f"fusion.attn.{p}"])) for p in orders],
        axis=1)
    return ad.softmax(logits, axis=1)


def forward(params: ParameterStore, config: ModelConfig, hmg: HeteroMolGraph,
            feats: HmgFeatures, training: bool) -> ForwardOutput:
    """One recorded forward pass over a (possibly batched) graph."""
    h1, h2 = _input_module(params, config, hmg, feats)
    for t in range(config.n_interactions):
        h1, h2 = _interaction(params, config, hmg, feats, h1, h2, t)

    n_mol = hmg.n_mol
    y_cols = [ad.segment_sum(_output_module(params, h1, hmg.comp1, "1"),
                             hmg.mol_id1, n_mol)]
    if config.use_order_2:
        y_cols.append(ad.segment_sum(_output_module(params, h2, hmg.comp2, "2"),
                                     hmg.mol_id2, n_mol))
    per_order = ad.concat(y_cols, axis=1) if len(y_cols) > 1 else y_cols[0]

    alpha = _fusion_module(params, config, hmg, h1, h2, training)
    fused = ad.tsum(ad.mul(alpha, per_order), axis=1, keepdims=True)
    return ForwardOutput(fused=fused, per_order=per_order, alpha=alpha)


def predict(params: ParameterStore, config: ModelConfig, hmg: HeteroMolGraph,
            feats: HmgFeatures, mode: str = "inference"):
    """Numpy view of a forward pass: (fused, per-order, alpha) per molecule."""
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    out = forward(params, config, hmg, feats, training=(mode == "train"))
    return (out.fused.data[:, 0].copy(), out.per_order.data.copy(),
            out.alpha.data.copy())
