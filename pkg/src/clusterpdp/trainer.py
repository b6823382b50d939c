"""POMO-style REINFORCE training with a shared mean-reward baseline."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from clusterpdp import numcore
from clusterpdp.decoder import ModelConfig, init_params, model_config, rollout_batch, tour_lengths
from clusterpdp.errors import CheckpointError, PdpError
from clusterpdp.instances import PdpInstance, coords_array, derive_seed, gen_dataset, generate, make_rng
from clusterpdp.numcore import ParamStore, adam_step, backward

log = logging.getLogger(__name__)

# stream tags keep training, validation and sampling randomness disjoint
TRAIN_TAG = 1
VALID_TAG = 2
SAMPLE_TAG = 3

METRIC_COLUMNS = ("epoch", "batch", "mean_reward", "mean_len", "loss", "wall_ms")
EPOCH_COLUMNS = ("epoch", "mean_len", "greedy_obj", "wall_s")


class TrainingDiverged(PdpError):
    pass


@dataclass
class TrainConfig:
    n: int = 20
    distribution: str = "clustered"
    ablation: str = "full"
    epochs: int = 800
    batches_per_epoch: int = 100
    batch_size: int = 512
    lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    eval_size: int = 100
    d_h: int = 128
    layers: int = 6
    heads: int = 8
    ffn_hidden: int = 512
    clip: float = 10.0
    gate_hidden: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    @property
    def model(self) -> ModelConfig:
        return model_config(
            self.ablation, d_h=self.d_h, layers=self.layers, heads=self.heads,
            ffn_hidden=self.ffn_hidden, clip=self.clip, gate_hidden=self.gate_hidden,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        flat = {}
        for key, value in d.items():
            # accept nested {"encoder": {...}, "decoder": {...}} sections too
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        if "L" in flat:
            flat["layers"] = flat.pop("L")
        known = {f.name for f in fields(cls)}
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RolloutBatch:
    """``P`` rollouts for each of ``B`` instances, with a per-instance mean baseline."""

    orders: torch.Tensor  # (B, P, 2n)
    rewards: torch.Tensor  # (B, P), float64, = -length
    log_probs: torch.Tensor  # (B, P), differentiable
    baseline: torch.Tensor = field(init=False)
    advantages: torch.Tensor = field(init=False)

    def __post_init__(self):
        self.baseline = self.rewards.mean(dim=-1)
        self.advantages = self.rewards - self.baseline[..., None]


def pickup_starts(batch: int, n: int) -> torch.Tensor:
    return torch.arange(1, n + 1).repeat(batch, 1)


def pomo_batch(
    coords: torch.Tensor, params: ParamStore, cfg: ModelConfig, rng: np.random.Generator
) -> RolloutBatch:
    """Sampled rollouts from every pickup start (N = n per instance)."""
    B, N, _ = coords.shape
    n = (N - 1) // 2
    uniforms = torch.as_tensor(1.0 - rng.random((B, n, 2 * n)), dtype=coords.dtype)
    orders, logp = rollout_batch(coords, params, cfg, pickup_starts(B, n), "sample", uniforms)
    rewards = -tour_lengths(coords, orders)
    return RolloutBatch(orders, rewards, logp)


def pomo_rollouts(
    inst: PdpInstance, params: ParamStore, cfg: ModelConfig, rng: Optional[np.random.Generator] = None
) -> RolloutBatch:
    rng = rng if rng is not None else make_rng(inst.seed, SAMPLE_TAG)
    coords = torch.tensor(inst.coords[None], dtype=params.dtype)
    return pomo_batch(coords, params, cfg, rng)


def instance_loss(batch: RolloutBatch) -> torch.Tensor:
    """Mean over instances of ``-(1/N) sum_j (R_j - b) log pi(tau_j)``; advantages are constants."""
    adv = batch.advantages.detach().to(batch.log_probs.dtype)
    return -(adv * batch.log_probs).mean(dim=-1).mean()


def model_meta(cfg: ModelConfig, **extra) -> dict:
    meta = cfg.to_dict()
    meta["ablation"] = cfg.ablation
    meta.update(extra)
    return meta


def save_checkpoint(params: ParamStore, cfg: ModelConfig, path: str | Path, **extra) -> None:
    numcore.save_checkpoint(params, model_meta(cfg, **extra), path)


def load_checkpoint(path: str | Path, expected: Optional[ModelConfig] = None) -> tuple[ParamStore, ModelConfig]:
    """Load parameters and the architecture they belong to.

    With ``expected`` given, any difference in dimensions or parameter shapes
    raises :class:`CheckpointError`. Instance size never matters.
    """
    store, header = numcore.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header)
    if expected is not None:
        mine, theirs = cfg.to_dict(), expected.to_dict()
        diffs = [k for k in ("d_h", "L", "heads", "ffn_hidden", "gate_hidden") if mine[k] != theirs[k]]
        if diffs:
            raise CheckpointError(f"checkpoint mismatch on {diffs}: file {mine} vs expected {theirs}")
    reference = init_params(cfg, 0)
    if reference.names() != store.names():
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    for name in store:
        if tuple(store[name].shape) != tuple(reference[name].shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(store[name].shape)}")
    return store, cfg


def greedy_objective(
    params: ParamStore, cfg: ModelConfig, instances: Sequence[PdpInstance], chunk: int = 256
) -> np.ndarray:
    """Best multi-start greedy tour length per instance."""
    out = []
    with torch.no_grad():
        for i in range(0, len(instances), chunk):
            part = instances[i : i + chunk]
            coords = torch.as_tensor(coords_array(part), dtype=params.dtype)
            orders, _ = rollout_batch(coords, params, cfg, pickup_starts(len(part), part[0].n), "greedy")
            out.append(tour_lengths(coords, orders).min(dim=-1).values.numpy())
    return np.concatenate(out)


@dataclass
class TrainResult:
    params: ParamStore
    model: ModelConfig
    metrics: list[dict]
    epochs: list[dict]

    def metrics_without_time(self) -> list[tuple]:
        return [tuple(row[c] for c in METRIC_COLUMNS if c != "wall_ms") for row in self.metrics]


def _write_csv(path: Path, columns: Sequence[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        w.writerows(rows)


def _dump_divergence(out_dir: Optional[Path], params: ParamStore, cfg: ModelConfig, coords: torch.Tensor) -> str:
    if out_dir is None:
        return ""
    path = out_dir / "diverged"
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, cfg, path / "params.ckpt")
    np.save(path / "coords.npy", coords.numpy())
    return f" (diagnostics in {path})"


def train(
    config: TrainConfig,
    out_dir: Optional[str | Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run the training loop; writes metrics, epoch curve and checkpoints when ``out_dir`` is set."""
    torch.manual_seed(config.seed)
    cfg = config.model
    params = init_params(cfg, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(config), indent=2))
    valid = gen_dataset(config.n, config.distribution, config.eval_size, derive_seed(config.seed, VALID_TAG))
    metrics: list[dict] = []
    epochs: list[dict] = []
    log.info("training %s on n=%d %s, %d params", cfg.ablation, config.n, config.distribution, params.numel())

    for epoch in range(1, config.epochs + 1):
        t_epoch = time.perf_counter()
        lengths = []
        for b in range(config.batches_per_epoch):
            t0 = time.perf_counter()
            insts = [
                generate(config.n, config.distribution, derive_seed(config.seed, TRAIN_TAG, epoch, b, i))
                for i in range(config.batch_size)
            ]
            coords = torch.as_tensor(coords_array(insts), dtype=params.dtype)
            batch = pomo_batch(coords, params, cfg, make_rng(config.seed, SAMPLE_TAG, epoch, b))
            loss = instance_loss(batch)
            if not math.isfinite(float(loss.detach())):
                where = _dump_divergence(out, params, cfg, coords)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}{where}")
            backward(loss, params)
            adam_step(params, lr=config.lr)
            mean_reward = float(batch.rewards.mean())
            lengths.append(-mean_reward)
            metrics.append({
                "epoch": epoch,
                "batch": b,
                "mean_reward": mean_reward,
                "mean_len": -mean_reward,
                "loss": float(loss.detach()),
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            })
        row = {
            "epoch": epoch,
            "mean_len": float(np.mean(lengths)),
            "greedy_obj": float(greedy_objective(params, cfg, valid).mean()),
            "wall_s": round(time.perf_counter() - t_epoch, 3),
        }
        epochs.append(row)
        log.info("epoch %d: sampled %.4f greedy %.4f (%.1fs)", epoch, row["mean_len"], row["greedy_obj"], row["wall_s"])
        if on_epoch is not None:
            on_epoch(row)
        if out is not None:
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(params, cfg, out / f"epoch{epoch:04d}.ckpt", epoch=epoch, n=config.n)
            _write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics)
            _write_csv(out / "epochs.csv", EPOCH_COLUMNS, epochs)

    if out is not None:
        save_checkpoint(params, cfg, out / "final.ckpt", epoch=config.epochs, n=config.n)
    return TrainResult(params, cfg, metrics, epochs)


def policy_gradcheck(
    seed: int,
    n: int = 2,
    d_h: int = 16,
    layers: int = 1,
    heads: int = 2,
    ablation: str = "full",
    h: float = 1e-5,
    floor: float = 1e-6,
) -> tuple[float, str]:
    """Autograd vs central differences for the POMO loss on one toy clustered instance.

    Tours are sampled once with the float32 model and then held fixed, so the
    loss depends on the parameters only through the replayed log-probs. The
    default step is small because ReLU kinks in the FFN and gate sit within
    1e-3 of typical pre-activations; a wider step straddles them.
    """
    cfg = model_config(ablation, d_h=d_h, layers=layers, heads=heads, ffn_hidden=2 * d_h, gate_hidden=d_h)
    params = init_params(cfg, seed)
    inst = generate(n, "clustered", derive_seed(seed, VALID_TAG))
    with torch.no_grad():
        batch = pomo_rollouts(inst, params, cfg, make_rng(seed, SAMPLE_TAG))
    orders, rewards = batch.orders, batch.rewards

    def loss_fn(store: ParamStore) -> torch.Tensor:
        coords = torch.tensor(inst.coords[None], dtype=store.dtype)
        _, logp = rollout_batch(coords, store, cfg, orders[..., 0], "forced", forced=orders)
        return instance_loss(RolloutBatch(orders, rewards, logp))

    return numcore.gradcheck(loss_fn, params, h=h, floor=floor)
