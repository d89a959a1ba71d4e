"""Scene encoder: per-polyline subgraph encoding followed by a hierarchical
graph of masked attention blocks.

Each polyline (an agent's history or a lane's segments) becomes one token via
three rounds of encode / max-pool / fuse and a final max-pool. Agent tokens
then go through N interleaved rounds of (agent self-attention, agent-to-map
cross-attention); the concatenated token set [agents, lanes] goes through M
all-token rounds. Map tokens are only updated in the all-token rounds.

Parameter layout: "subgraph.{agent,map}.*", "interleave.{i}.{self,cross}.*",
"alltoken.{j}.*".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .scene_model import AgentFeatureTensor, FeatureConfig, MapFeatureTensor
from .tensor_engine import core as T
from .tensor_engine.nn import MLP, ParamSet, attention, linear


@dataclass
class BackboneConfig:
    token_dim: int = 64        # D
    n_interleave: int = 2      # rounds of (self, cross)
    m_alltoken: int = 3        # all-token rounds
    subgraph_layers: int = 3
    dropout: float = 0.1
    # Pre-residual layer norm (plus a norm on the subgraph tokens); default
    # off so the blocks are exactly MLP + residual.
    layer_norm: bool = False

    def __post_init__(self):
        if self.token_dim < 2 or self.token_dim % 2:
            raise ShapeError("token_dim must be even and >= 2")
        if min(self.n_interleave, self.m_alltoken, self.subgraph_layers) < 1:
            raise ShapeError("layer counts must be >= 1")


@dataclass
class TokenSet:
    """Encoder output: agents-then-lanes token order."""
    agent_tokens: T.DiffTensor     # (N_a, D)
    map_tokens: T.DiffTensor       # (N_m, D)
    combined: T.DiffTensor         # (N_a + N_m, D)
    agent_valid: np.ndarray
    map_valid: np.ndarray


class SubgraphEncoder:
    """Polyline encoder: layers of (encode, max-pool, concat, fuse), then pool.

    Fully padded polylines map to the exact zero token: biases would leak
    otherwise, so padded rows are re-zeroed by mask multiplication.
    """

    def __init__(self, params: ParamSet, prefix: str, in_dim: int,
                 cfg: BackboneConfig, rng: np.random.Generator):
        d = cfg.token_dim
        self.layers = []
        for layer in range(cfg.subgraph_layers):
            enc_in = in_dim if layer == 0 else d
            self.layers.append((
                params.new(f"{prefix}.l{layer}.enc.w", (enc_in, d), rng),
                params.zeros(f"{prefix}.l{layer}.enc.b", (d,)),
                params.new(f"{prefix}.l{layer}.fuse.w", (2 * d, d), rng),
                params.zeros(f"{prefix}.l{layer}.fuse.b", (d,)),
            ))
        self.token_dim = d
        self.use_ln = cfg.layer_norm
        if self.use_ln:
            self.ln_gain = params.ones(f"{prefix}.ln.g", (d,))
            self.ln_bias = params.zeros(f"{prefix}.ln.b", (d,))

    def __call__(self, feats: T.DiffTensor, valid: np.ndarray) -> T.DiffTensor:
        n_slots, s, f = feats.shape
        d = self.token_dim
        vidx = np.flatnonzero(valid)
        if vidx.size == 0:
            return T.constant(np.zeros((n_slots, d)))
        # only valid polylines are encoded; padded slots stay exactly zero
        n = vidx.size
        x = T.reshape(T.gather_rows(feats, vidx), (n * s, f))
        for enc_w, enc_b, fuse_w, fuse_b in self.layers:
            h = T.relu(linear(x, enc_w, enc_b))
            h3 = T.reshape(h, (n, s, d))
            pooled = T.max_pool(h3, axis=1)
            pooled3 = T.broadcast_to(T.reshape(pooled, (n, 1, d)), (n, s, d))
            cat = T.reshape(T.concat([h3, pooled3], axis=2), (n * s, 2 * d))
            x = T.relu(linear(cat, fuse_w, fuse_b))
        tokens = T.max_pool(T.reshape(x, (n, s, d)), axis=1)
        if self.use_ln:
            tokens = T.layer_norm(tokens, self.ln_gain, self.ln_bias)
        return T.scatter_rows(tokens, vidx, n_slots)


class AttentionBlock:
    """Masked single-head attention plus a residual two-layer MLP update."""

    def __init__(self, params: ParamSet, prefix: str, cfg: BackboneConfig,
                 rng: np.random.Generator):
        d = cfg.token_dim
        self.w_q = params.new(f"{prefix}.wq", (d, d), rng)
        self.w_k = params.new(f"{prefix}.wk", (d, d), rng)
        self.w_v = params.new(f"{prefix}.wv", (d, d), rng)
        self.mlp = MLP(params, f"{prefix}.mlp", [d, d, d], rng)
        self.dropout = cfg.dropout
        self.use_ln = cfg.layer_norm
        if self.use_ln:
            self.ln_q_gain = params.ones(f"{prefix}.ln_q.g", (d,))
            self.ln_q_bias = params.zeros(f"{prefix}.ln_q.b", (d,))
            self.ln_kv_gain = params.ones(f"{prefix}.ln_kv.g", (d,))
            self.ln_kv_bias = params.zeros(f"{prefix}.ln_kv.b", (d,))
        self.last_pair_count = 0

    def __call__(self, q_src: T.DiffTensor, kv_src: T.DiffTensor,
                 kv_invalid: np.ndarray, train: bool = False, rng=None) -> T.DiffTensor:
        q_in, kv_in = q_src, kv_src
        if self.use_ln:
            q_in = T.layer_norm(q_in, self.ln_q_gain, self.ln_q_bias)
            kv_in = T.layer_norm(kv_in, self.ln_kv_gain, self.ln_kv_bias)
        q = T.matmul(q_in, self.w_q)
        k = T.matmul(kv_in, self.w_k)
        v = T.matmul(kv_in, self.w_v)
        self.last_pair_count = q.shape[0] * k.shape[0]
        att = attention(q, k, v, mask=kv_invalid)
        att = T.dropout(att, self.dropout, train, rng)
        update = self.mlp(att, train=train, rng=rng, drop=self.dropout)
        return T.add(update, q_src)


class SceneEncoder:
    """The full backbone; owns parameters for the subgraph and all blocks."""

    def __init__(self, feat_cfg: FeatureConfig, cfg: BackboneConfig,
                 rng: np.random.Generator, params: ParamSet | None = None):
        self.feat_cfg = feat_cfg
        self.cfg = cfg
        self.params = params if params is not None else ParamSet()
        self.sub_agent = SubgraphEncoder(self.params, "subgraph.agent",
                                         feat_cfg.d_agent, cfg, rng)
        self.sub_map = SubgraphEncoder(self.params, "subgraph.map",
                                       feat_cfg.d_map, cfg, rng)
        self.self_blocks = [AttentionBlock(self.params, f"interleave.{i}.self", cfg, rng)
                            for i in range(cfg.n_interleave)]
        self.cross_blocks = [AttentionBlock(self.params, f"interleave.{i}.cross", cfg, rng)
                             for i in range(cfg.n_interleave)]
        self.all_blocks = [AttentionBlock(self.params, f"alltoken.{j}", cfg, rng)
                           for j in range(cfg.m_alltoken)]
        self.last_pair_counts: dict[str, list[int]] = {}

    # -- stages ------------------------------------------------------------
    def encode_agent_polylines(self, agent_features: AgentFeatureTensor) -> T.DiffTensor:
        return self.sub_agent(T.constant(agent_features.data), agent_features.valid_mask)

    def encode_map_polylines(self, map_data: np.ndarray, map_valid: np.ndarray) -> T.DiffTensor:
        return self.sub_map(T.constant(map_data), map_valid)

    def interact(self, agent_tokens: T.DiffTensor, map_tokens: T.DiffTensor,
                 agent_valid: np.ndarray, map_valid: np.ndarray,
                 train: bool = False, rng=None) -> TokenSet:
        agent_invalid = ~agent_valid
        map_invalid = ~map_valid
        interleave_counts = []
        a = agent_tokens
        for self_blk, cross_blk in zip(self.self_blocks, self.cross_blocks):
            a = self_blk(a, a, agent_invalid, train, rng)
            a = cross_blk(a, map_tokens, map_invalid, train, rng)
            interleave_counts.append(self_blk.last_pair_count + cross_blk.last_pair_count)
        combined = T.concat([a, map_tokens], axis=0)
        combined_invalid = np.concatenate([agent_invalid, map_invalid])
        alltoken_counts = []
        for blk in self.all_blocks:
            combined = blk(combined, combined, combined_invalid, train, rng)
            alltoken_counts.append(blk.last_pair_count)
        self.last_pair_counts = {"interleave": interleave_counts, "alltoken": alltoken_counts}
        n_a = agent_valid.shape[0]
        n_m = map_valid.shape[0]
        return TokenSet(
            agent_tokens=T.slice_axis(combined, 0, 0, n_a),
            map_tokens=T.slice_axis(combined, 0, n_a, n_m),
            combined=combined,
            agent_valid=agent_valid,
            map_valid=map_valid,
        )

    # -- full pass ----------------------------------------------------------
    def encode_scene(self, agent_features: AgentFeatureTensor,
                     map_features: MapFeatureTensor,
                     train: bool = False, rng=None) -> TokenSet:
        agent_tokens = self.encode_agent_polylines(agent_features)
        map_tokens = self.encode_map_polylines(map_features.data, map_features.valid_mask)
        return self.interact(agent_tokens, map_tokens,
                             agent_features.valid_mask, map_features.valid_mask,
                             train=train, rng=rng)


def backbone_param_count(feat_cfg: FeatureConfig, cfg: BackboneConfig) -> int:
    """Closed-form parameter count for one SceneEncoder (see README)."""
    d = cfg.token_dim

    def subgraph(in_dim: int) -> int:
        total = 0
        for layer in range(cfg.subgraph_layers):
            enc_in = in_dim if layer == 0 else d
            total += enc_in * d + d          # encode
            total += 2 * d * d + d           # fuse
        if cfg.layer_norm:
            total += 2 * d
        return total

    block = 3 * d * d                        # q, k, v projections (no bias)
    block += 2 * (d * d + d)                 # two-layer residual MLP
    if cfg.layer_norm:
        block += 4 * d                       # gains/biases for q and kv streams
    n_blocks = 2 * cfg.n_interleave + cfg.m_alltoken
    return subgraph(feat_cfg.d_agent) + subgraph(feat_cfg.d_map) + n_blocks * block
