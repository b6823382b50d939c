"""Cluster-aware encoder: initial embedding, depot cross-attention, dual-attention layers.

All functions operate on batches shaped ``(B, N, ...)`` where ``N = 2n+1``;
the role layout is identical across a batch because it only depends on ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from clusterpdp.instances import PdpInstance, role_vector
from clusterpdp.numcore import NEG_INF, ParamStore, layer_norm, linear, mha, uniform_init

NUM_ROLES = 3
INPUT_DIM = 2 + NUM_ROLES


@dataclass(frozen=True)
class EncoderConfig:
    d_h: int = 128
    layers: int = 6
    heads: int = 8
    ffn_hidden: int = 512
    cluster_attention: bool = True

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} must be divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")


def init_params(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    d = cfg.d_h
    store.add("encoder.embed.W", uniform_init(rng, (INPUT_DIM, d), INPUT_DIM))
    store.add("encoder.embed.b", np.zeros(d))
    for w in ("Wq", "Wk", "Wv", "Wo"):
        store.add(f"encoder.depot.{w}", uniform_init(rng, (d, d), d))
    for layer in range(cfg.layers):
        p = f"encoder.layers.{layer}."
        # the cluster branch is always allocated so ablations can share weights
        for branch in ("global", "cluster"):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                store.add(f"{p}{branch}.{w}", uniform_init(rng, (d, d), d))
        store.add(p + "combine.W", uniform_init(rng, (d, d), d))
        store.add(p + "combine.b", np.zeros(d))
        store.add(p + "ln1.gain", np.ones(d))
        store.add(p + "ln1.shift", np.zeros(d))
        store.add(p + "ffn.W1", uniform_init(rng, (d, cfg.ffn_hidden), d))
        store.add(p + "ffn.b1", np.zeros(cfg.ffn_hidden))
        store.add(p + "ffn.W2", uniform_init(rng, (cfg.ffn_hidden, d), cfg.ffn_hidden))
        store.add(p + "ffn.b2", np.zeros(d))
        store.add(p + "ln2.gain", np.ones(d))
        store.add(p + "ln2.shift", np.zeros(d))


def roles_tensor(n: int) -> torch.Tensor:
    return torch.as_tensor(role_vector(n))


def cluster_mask(roles: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive ``(N, N)`` mask: 0 between same-role nodes, -inf sentinel otherwise."""
    same = roles[:, None] == roles[None, :]
    return torch.where(same, torch.zeros((), dtype=dtype), torch.full((), NEG_INF, dtype=dtype))


def node_features(coords: torch.Tensor, roles: torch.Tensor) -> torch.Tensor:
    onehot = torch.nn.functional.one_hot(roles, NUM_ROLES).to(coords.dtype)
    return torch.cat([coords, onehot.expand(*coords.shape[:-1], NUM_ROLES)], dim=-1)


def embed_inputs(coords: torch.Tensor, roles: torch.Tensor, params: ParamStore) -> torch.Tensor:
    return linear(node_features(coords, roles), params["encoder.embed.W"], params["encoder.embed.b"])


def depot_cross_attention(H: torch.Tensor, params: ParamStore, heads: int) -> torch.Tensor:
    """Replace the depot row with its attention readout over the customer rows."""
    if H.shape[-2] < 2:
        return H
    p = "encoder.depot."
    depot, customers = H[..., :1, :], H[..., 1:, :]
    out = mha(
        depot @ params[p + "Wq"],
        customers @ params[p + "Wk"],
        customers @ params[p + "Wv"],
        heads,
        W_out=params[p + "Wo"],
    )
    return torch.cat([out, customers], dim=-2)


def _branch(H: torch.Tensor, params: ParamStore, prefix: str, heads: int, mask=None) -> torch.Tensor:
    return mha(
        H @ params[prefix + "Wq"],
        H @ params[prefix + "Wk"],
        H @ params[prefix + "Wv"],
        heads,
        add_mask=mask,
        W_out=params[prefix + "Wo"],
    )


def encoder_layer(
    H: torch.Tensor, mask: torch.Tensor, params: ParamStore, layer: int, cfg: EncoderConfig
) -> torch.Tensor:
    p = f"encoder.layers.{layer}."
    fused = _branch(H, params, p + "global.", cfg.heads)
    if cfg.cluster_attention:
        fused = fused + _branch(H, params, p + "cluster.", cfg.heads, mask)
    H1 = layer_norm(H + linear(fused, params[p + "combine.W"], params[p + "combine.b"]),
                    params[p + "ln1.gain"], params[p + "ln1.shift"])
    hidden = torch.relu(linear(H1, params[p + "ffn.W1"], params[p + "ffn.b1"]))
    ff = linear(hidden, params[p + "ffn.W2"], params[p + "ffn.b2"])
    return layer_norm(H1 + ff, params[p + "ln2.gain"], params[p + "ln2.shift"])


def encode_batch(coords: torch.Tensor, params: ParamStore, cfg: EncoderConfig) -> torch.Tensor:
    """``(B, 2n+1, 2)`` coordinates -> ``(B, 2n+1, d_h)`` embeddings."""
    n = (coords.shape[-2] - 1) // 2
    roles = roles_tensor(n)
    mask = cluster_mask(roles, coords.dtype)
    H = embed_inputs(coords, roles, params)
    H = depot_cross_attention(H, params, cfg.heads)
    for layer in range(cfg.layers):
        H = encoder_layer(H, mask, params, layer, cfg)
    return H


def encode(inst: PdpInstance, params: ParamStore, cfg: EncoderConfig) -> torch.Tensor:
    """Embeddings ``(2n+1, d_h)`` for a single instance."""
    dtype = next(iter(params.params.values())).dtype
    coords = torch.tensor(inst.coords, dtype=dtype)[None]
    return encode_batch(coords, params, cfg)[0]
