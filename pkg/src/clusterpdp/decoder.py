"""Dynamic dual-decoder: hierarchical queries, two masked pipelines and a stay/leave gate.

The batched core (:func:`rollout_batch`) drives training and evaluation. The
single-state functions (:func:`build_context`, :func:`decode_step`,
:func:`rollout`) wrap the same primitives for inspection and tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from clusterpdp import encoder, env
from clusterpdp.encoder import EncoderConfig, NUM_ROLES, encode_batch, roles_tensor
from clusterpdp.errors import EpisodeFinished
from clusterpdp.instances import PdpInstance, make_rng
from clusterpdp.numcore import NEG_INF, ParamStore, linear, mha, softmax_masked, uniform_init


@dataclass(frozen=True)
class DecoderConfig:
    clip: float = 10.0
    dual_decoder: bool = True
    gate_hidden: int = 128
    heads: int = 8

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be positive")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()

    @property
    def ablation(self) -> str:
        return ablation_name(self.encoder.cluster_attention, self.decoder.dual_decoder)

    def to_dict(self) -> dict:
        return {
            "d_h": self.encoder.d_h,
            "L": self.encoder.layers,
            "heads": self.encoder.heads,
            "ffn_hidden": self.encoder.ffn_hidden,
            "cluster_attention": self.encoder.cluster_attention,
            "clip": self.decoder.clip,
            "dual_decoder": self.decoder.dual_decoder,
            "gate_hidden": self.decoder.gate_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        heads = int(d.get("heads", 8))
        return cls(
            EncoderConfig(
                d_h=int(d.get("d_h", 128)),
                layers=int(d.get("L", 6)),
                heads=heads,
                ffn_hidden=int(d.get("ffn_hidden", 512)),
                cluster_attention=bool(d.get("cluster_attention", True)),
            ),
            DecoderConfig(
                clip=float(d.get("clip", 10.0)),
                dual_decoder=bool(d.get("dual_decoder", True)),
                gate_hidden=int(d.get("gate_hidden", 128)),
                heads=heads,
            ),
        )


ABLATIONS = {
    # name: (cluster attention in encoder, dual decoder with gate)
    "full": (True, True),
    "no_encoder": (False, True),
    "no_decoder": (True, False),
    "pomo": (False, False),
}


def ablation_name(cluster_attention: bool, dual_decoder: bool) -> str:
    for name, flags in ABLATIONS.items():
        if flags == (cluster_attention, dual_decoder):
            return name
    raise AssertionError("unreachable")


def model_config(
    ablation: str = "full",
    d_h: int = 128,
    layers: int = 6,
    heads: int = 8,
    ffn_hidden: int = 512,
    clip: float = 10.0,
    gate_hidden: int = 128,
) -> ModelConfig:
    try:
        cluster, dual = ABLATIONS[ablation]
    except KeyError:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {sorted(ABLATIONS)}") from None
    return ModelConfig(
        EncoderConfig(d_h=d_h, layers=layers, heads=heads, ffn_hidden=ffn_hidden, cluster_attention=cluster),
        DecoderConfig(clip=clip, dual_decoder=dual, gate_hidden=gate_hidden, heads=heads),
    )


def with_ablation(cfg: ModelConfig, ablation: str) -> ModelConfig:
    cluster, dual = ABLATIONS[ablation]
    return ModelConfig(
        EncoderConfig(cfg.encoder.d_h, cfg.encoder.layers, cfg.encoder.heads, cfg.encoder.ffn_hidden, cluster),
        DecoderConfig(cfg.decoder.clip, dual, cfg.decoder.gate_hidden, cfg.decoder.heads),
    )


def init_decoder_params(store: ParamStore, d: int, cfg: DecoderConfig, rng: np.random.Generator) -> None:
    for w in ("Wq_first", "Wq_last", "Wq_cluster", "Wk", "Wv", "Wo"):
        store.add(f"decoder.{w}", uniform_init(rng, (d, d), d))
    store.add("gate.W1", uniform_init(rng, (3 * d, cfg.gate_hidden), 3 * d))
    store.add("gate.b1", np.zeros(cfg.gate_hidden))
    store.add("gate.W2", uniform_init(rng, (cfg.gate_hidden, 1), cfg.gate_hidden))
    store.add("gate.b2", np.zeros(1))


def init_params(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ParamStore:
    """Fresh parameters for every component, whatever the ablation flags say."""
    rng = make_rng(seed, 0xC1A5)
    store = ParamStore(dtype)
    encoder.init_params(store, cfg.encoder, rng)
    init_decoder_params(store, cfg.encoder.d_h, cfg.decoder, rng)
    return store


@dataclass
class DecoderCache:
    """Per-instance quantities shared by every decoding step."""

    H: torch.Tensor  # (B, N, d)
    K: torch.Tensor
    V: torch.Tensor
    role_means: torch.Tensor  # (B, 3, d)
    roles: torch.Tensor  # (N,)


@dataclass
class DecodeContext:
    h_last: torch.Tensor
    h_first: torch.Tensor
    mean_current: torch.Tensor
    mean_other: torch.Tensor
    mask: torch.Tensor  # additive, (..., N)


@dataclass
class StepDistribution:
    p_intra: torch.Tensor
    p_inter: torch.Tensor
    pi: torch.Tensor
    p_stay: torch.Tensor
    logits_intra: torch.Tensor  # clipped, before masking
    logits_inter: torch.Tensor


def prepare(H: torch.Tensor, params: ParamStore) -> DecoderCache:
    n = (H.shape[-2] - 1) // 2
    roles = roles_tensor(n)
    onehot = torch.nn.functional.one_hot(roles, NUM_ROLES).to(H.dtype)  # (N, 3)
    role_means = (onehot.T @ H) / onehot.sum(0)[:, None]
    return DecoderCache(
        H=H,
        K=H @ params["decoder.Wk"],
        V=H @ params["decoder.Wv"],
        role_means=role_means,
        roles=roles,
    )


def _gather_rows(H: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``H`` (B, N, d), ``idx`` (B, P) -> (B, P, d)."""
    return torch.gather(H, 1, idx[..., None].expand(*idx.shape, H.shape[-1]))


def additive_mask(feasible: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    return torch.where(feasible, torch.zeros((), dtype=dtype), torch.full((), NEG_INF, dtype=dtype))


def context_batch(
    cache: DecoderCache, current: torch.Tensor, first: torch.Tensor, feasible: torch.Tensor
) -> DecodeContext:
    """Contexts for ``(B, P)`` partial routes given current node, sub-path start and feasibility."""
    H = cache.H
    cur_role = cache.roles[current]  # (B, P)
    mean_current = torch.gather(
        cache.role_means, 1, cur_role[..., None].expand(*cur_role.shape, H.shape[-1])
    )
    other = feasible & (cache.roles != cur_role[..., None])
    empty = other.sum(-1, keepdim=True) == 0
    w = torch.where(empty, feasible, other).to(H.dtype)
    mean_other = (w @ H) / w.sum(-1, keepdim=True).clamp(min=1.0)
    return DecodeContext(
        h_last=_gather_rows(H, current),
        h_first=_gather_rows(H, first),
        mean_current=mean_current,
        mean_other=mean_other,
        mask=additive_mask(feasible, H.dtype),
    )


def queries(ctx: DecodeContext, params: ParamStore) -> tuple[torch.Tensor, torch.Tensor]:
    last = ctx.h_last @ params["decoder.Wq_last"]
    q_intra = ctx.h_first @ params["decoder.Wq_first"] + last
    q_inter = last + ctx.mean_current @ params["decoder.Wq_cluster"]
    return q_intra, q_inter


def pipeline(
    q: torch.Tensor, cache: DecoderCache, add_mask: torch.Tensor, params: ParamStore, heads: int, clip: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """One decoding pipeline: masked glimpse, clipped compatibility logits, masked softmax.

    ``q`` is ``(B, P, d)``. Returns ``(P, clipped_logits)``, both ``(B, P, N)``.
    """
    d = q.shape[-1]
    # the P queries of an instance attend to the same keys, each under its own mask row
    glimpse = mha(q, cache.K, cache.V, heads, add_mask=add_mask, W_out=params["decoder.Wo"])
    u = glimpse @ cache.K.transpose(-1, -2) / math.sqrt(d)
    clipped = clip * torch.tanh(u)
    return softmax_masked(clipped, add_mask), clipped


def gate(ctx: DecodeContext, params: ParamStore) -> torch.Tensor:
    x = torch.cat([ctx.h_last, ctx.mean_current, ctx.mean_other], dim=-1)
    hidden = torch.relu(linear(x, params["gate.W1"], params["gate.b1"]))
    return torch.sigmoid(linear(hidden, params["gate.W2"], params["gate.b2"]))[..., 0]


def mix(p_stay: torch.Tensor, p_intra: torch.Tensor, p_inter: torch.Tensor) -> torch.Tensor:
    """Gate-weighted convex combination of the two pipeline distributions."""
    return p_stay[..., None] * p_intra + (1.0 - p_stay[..., None]) * p_inter


def step_distribution(
    ctx: DecodeContext, cache: DecoderCache, params: ParamStore, cfg: DecoderConfig,
    p_stay_override: Optional[float] = None,
) -> StepDistribution:
    q_intra, q_inter = queries(ctx, params)
    if not cfg.dual_decoder:
        # single decoder on the intra-style query; the gate is never evaluated
        p_intra, l_intra = pipeline(q_intra, cache, ctx.mask, params, cfg.heads, cfg.clip)
        one = torch.ones(p_intra.shape[:-1], dtype=p_intra.dtype)
        return StepDistribution(p_intra, p_intra, p_intra, one, l_intra, l_intra)
    # both pipelines share every weight, so they run as one call over stacked queries
    P = q_intra.shape[-2]
    probs, logits = pipeline(
        torch.cat([q_intra, q_inter], dim=-2), cache, torch.cat([ctx.mask, ctx.mask], dim=-2),
        params, cfg.heads, cfg.clip,
    )
    p_intra, p_inter = probs[..., :P, :], probs[..., P:, :]
    l_intra, l_inter = logits[..., :P, :], logits[..., P:, :]
    if p_stay_override is None:
        p_stay = gate(ctx, params)
    else:
        p_stay = torch.full(p_intra.shape[:-1], float(p_stay_override), dtype=p_intra.dtype)
    pi = mix(p_stay, p_intra, p_inter)
    return StepDistribution(p_intra, p_inter, pi, p_stay, l_intra, l_inter)


def initial_feasible(n: int, shape: tuple[int, ...]) -> torch.Tensor:
    f = torch.zeros(*shape, 2 * n + 1, dtype=torch.bool)
    f[..., 1 : n + 1] = True
    return f


def sample_from(pi: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draw; ``u`` in (0, 1]. Never lands on a zero-probability entry."""
    cdf = torch.cumsum(pi, dim=-1)
    target = u * cdf[..., -1]
    return (cdf < target[..., None]).sum(-1).clamp(max=pi.shape[-1] - 1)


def rollout_batch(
    coords: torch.Tensor,
    params: ParamStore,
    cfg: ModelConfig,
    starts: torch.Tensor,
    mode: str = "greedy",
    uniforms: Optional[torch.Tensor] = None,
    forced: Optional[torch.Tensor] = None,
    on_step: Optional[Callable[[int, DecodeContext, StepDistribution, torch.Tensor], None]] = None,
    H: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Construct ``P`` tours for each of ``B`` instances.

    ``starts`` (B, P) holds the forced first pickup of every rollout. In
    ``sample`` mode ``uniforms`` (B, P, 2n) supplies the randomness; slot 0 is
    unused because the first move is forced. ``forced`` mode replays the
    given orders (B, P, 2n) to score them. Returns customer orders
    ``(B, P, 2n)`` and summed log-probabilities ``(B, P)``.
    """
    B, P = starts.shape
    N = coords.shape[-2]
    n = (N - 1) // 2
    if mode not in ("greedy", "sample", "forced"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "forced":
        if forced is None or forced.shape != (B, P, 2 * n):
            raise ValueError("forced mode needs orders of shape (B, P, 2n)")
        starts = forced[..., 0]
    if mode == "sample" and (uniforms is None or uniforms.shape != (B, P, 2 * n)):
        raise ValueError("sample mode needs uniforms of shape (B, P, 2n)")
    if bool(((starts < 1) | (starts > n)).any()):
        raise ValueError("start nodes must be pickups")
    if H is None:
        H = encode_batch(coords, params, cfg.encoder)
    cache = prepare(H, params)
    roles = cache.roles

    visited = torch.zeros(B, P, N, dtype=torch.bool)
    visited[..., 0] = True
    current = torch.zeros(B, P, dtype=torch.long)
    first = torch.zeros(B, P, dtype=torch.long)
    feasible = initial_feasible(n, (B, P))
    logp = torch.zeros(B, P, dtype=H.dtype)
    actions = []
    for t in range(2 * n):
        ctx = context_batch(cache, current, first, feasible)
        dist = step_distribution(ctx, cache, params, cfg.decoder)
        pi = dist.pi
        if t == 0:
            action = starts
        elif mode == "greedy":
            action = pi.argmax(-1)
        elif mode == "forced":
            action = forced[..., t]
            if not bool(torch.gather(feasible, -1, action[..., None]).all()):
                raise ValueError(f"forced order is infeasible at step {t}")
        else:
            action = sample_from(pi.detach(), uniforms[..., t])
        if on_step is not None:
            on_step(t, ctx, dist, action)
        logp = logp + torch.log(torch.gather(pi, -1, action[..., None]).squeeze(-1))
        new_region = roles[action] != roles[current]
        first = torch.where(new_region, action, first)
        current = action
        visited = visited.scatter(-1, action[..., None], True)
        feasible = ~visited
        feasible[..., n + 1 :] &= visited[..., 1 : n + 1]
        actions.append(action)
    return torch.stack(actions, dim=-1), logp


def tour_lengths(coords: torch.Tensor, orders: torch.Tensor) -> torch.Tensor:
    """Closed-tour lengths in float64 for orders ``(B, P, 2n)``."""
    xy = coords.to(torch.float64)
    B, P, m = orders.shape
    depot = torch.zeros(B, P, 1, dtype=torch.long)
    path = torch.cat([depot, orders, depot], dim=-1)
    pts = torch.gather(xy[:, None].expand(B, P, *xy.shape[1:]), 2, path[..., None].expand(B, P, m + 2, 2))
    return (pts[:, :, 1:] - pts[:, :, :-1]).norm(dim=-1).sum(-1)


# single-state API ---------------------------------------------------------

def _suffix_start(state: env.RouteState) -> int:
    roles = state.inst.roles
    tour = state.tour
    role = roles[tour[-1]]
    s = len(tour) - 1
    while s > 0 and roles[tour[s - 1]] == role:
        s -= 1
    return tour[s]


def build_context(state: env.RouteState, H: torch.Tensor) -> DecodeContext:
    """Context for one partial route; ``H`` is ``(2n+1, d)``. Tensors come back shaped ``(d,)``."""
    if state.done:
        raise EpisodeFinished("all customers have been visited")
    cache = _context_cache(H)
    ctx = context_batch(
        cache,
        torch.tensor([[state.current]]),
        torch.tensor([[_suffix_start(state)]]),
        torch.as_tensor(env.feasible_mask(state))[None, None],
    )
    return DecodeContext(*(t[0, 0] for t in (ctx.h_last, ctx.h_first, ctx.mean_current, ctx.mean_other, ctx.mask)))


def _context_cache(H: torch.Tensor) -> DecoderCache:
    # contexts only read H, role means and roles; keys/values are left as H
    n = (H.shape[-2] - 1) // 2
    roles = roles_tensor(n)
    onehot = torch.nn.functional.one_hot(roles, NUM_ROLES).to(H.dtype)
    means = (onehot.T @ H) / onehot.sum(0)[:, None]
    return DecoderCache(H[None], H[None], H[None], means[None], roles)


def decode_step(
    state: env.RouteState, H: torch.Tensor, params: ParamStore, cfg: ModelConfig,
    p_stay_override: Optional[float] = None,
) -> StepDistribution:
    if state.done:
        raise EpisodeFinished("all customers have been visited")
    cache = prepare(H[None], params)
    ctx = context_batch(
        cache,
        torch.tensor([[state.current]]),
        torch.tensor([[_suffix_start(state)]]),
        torch.as_tensor(env.feasible_mask(state))[None, None],
    )
    dist = step_distribution(ctx, cache, params, cfg.decoder, p_stay_override)
    return StepDistribution(*(t[0, 0] for t in (
        dist.p_intra, dist.p_inter, dist.pi, dist.p_stay, dist.logits_intra, dist.logits_inter)))


def rollout(
    inst: PdpInstance,
    params: ParamStore,
    cfg: ModelConfig,
    start: int,
    mode: str = "greedy",
    rng: Optional[np.random.Generator] = None,
) -> tuple[env.Tour, float]:
    """One tour whose first move is forced to pickup ``start``; returns it with its log-probability."""
    dtype = params[params.names()[0]].dtype
    coords = torch.tensor(inst.coords, dtype=dtype)[None]
    uniforms = None
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        uniforms = torch.as_tensor(1.0 - rng.random((1, 1, 2 * inst.n)), dtype=dtype)
    with torch.no_grad():
        orders, logp = rollout_batch(coords, params, cfg, torch.tensor([[start]]), mode, uniforms)
    tour = env.make_tour(inst, orders[0, 0].tolist())
    return tour, float(logp[0, 0])
