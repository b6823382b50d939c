"""PDP instance generation, persistence and distances.

Node layout is fixed: index 0 is the depot, ``1..n`` are pickups and
``n+1..2n`` are deliveries, with pickup ``i`` paired to delivery ``i+n``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from clusterpdp.errors import InvalidSize

FORMAT_VERSION = 1

PICKUP_CENTER = (0.25, 0.25)
DELIVERY_CENTER = (0.75, 0.75)
CLUSTER_STD = 0.1

DISTRIBUTIONS = ("clustered", "uniform")


class NodeRole(enum.IntEnum):
    Depot = 0
    Pickup = 1
    Delivery = 2


def make_rng(*key: int) -> np.random.Generator:
    """Seeded generator for a stream identified by a tuple of non-negative ints."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def derive_seed(*key: int) -> int:
    """Collapse a stream key into a single 64-bit instance seed."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)
    return int(state[0])


def role_vector(n: int) -> np.ndarray:
    roles = np.empty(2 * n + 1, dtype=np.int64)
    roles[0] = NodeRole.Depot
    roles[1 : n + 1] = NodeRole.Pickup
    roles[n + 1 :] = NodeRole.Delivery
    return roles


@dataclass(frozen=True, eq=False)
class PdpInstance:
    n: int
    coords: np.ndarray
    distribution: str
    seed: int
    speed: float = 1.0
    roles: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.n < 1:
            raise InvalidSize(f"need at least one pickup/delivery pair, got n={self.n}")
        if coords.shape[0] != 2 * self.n + 1:
            raise InvalidSize(f"expected {2 * self.n + 1} nodes, got {coords.shape[0]}")
        roles = role_vector(self.n) if self.roles is None else np.asarray(self.roles, dtype=np.int64)
        if not np.array_equal(roles, role_vector(self.n)):
            raise ValueError("roles must follow the depot/pickups/deliveries index convention")
        coords.setflags(write=False)
        roles = roles.copy()
        roles.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "roles", roles)

    @property
    def num_nodes(self) -> int:
        return 2 * self.n + 1

    def pair_of(self, node: int) -> int:
        if node == 0:
            raise ValueError("depot has no pair")
        return node + self.n if node <= self.n else node - self.n

    @cached_property
    def distances(self) -> np.ndarray:
        return distance_matrix(self)

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "n": self.n,
            "distribution": self.distribution,
            "seed": int(self.seed),
            "speed": float(self.speed),
            "coords": [[float(x), float(y)] for x, y in self.coords],
            "roles": [int(r) for r in self.roles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PdpInstance":
        if d.get("version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported instance version {d.get('version')}")
        return cls(
            n=int(d["n"]),
            coords=np.array(d["coords"], dtype=np.float64),
            distribution=d["distribution"],
            seed=int(d["seed"]),
            speed=float(d.get("speed", 1.0)),
            roles=np.array(d["roles"], dtype=np.int64) if "roles" in d else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def same_as(self, other: "PdpInstance") -> bool:
        return self.to_dict() == other.to_dict()


def gen_uniform(n: int, seed: int) -> PdpInstance:
    if n < 1:
        raise InvalidSize(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    coords = rng.random((2 * n + 1, 2))
    return PdpInstance(n=n, coords=coords, distribution="uniform", seed=seed)


def gen_clustered(n: int, seed: int) -> PdpInstance:
    if n < 1:
        raise InvalidSize(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    depot = rng.random((1, 2))
    pickups = rng.normal(PICKUP_CENTER, CLUSTER_STD, size=(n, 2))
    deliveries = rng.normal(DELIVERY_CENTER, CLUSTER_STD, size=(n, 2))
    coords = np.clip(np.concatenate([depot, pickups, deliveries]), 0.0, 1.0)
    return PdpInstance(n=n, coords=coords, distribution="clustered", seed=seed)


GENERATORS = {"clustered": gen_clustered, "uniform": gen_uniform}


def generate(n: int, distribution: str, seed: int) -> PdpInstance:
    try:
        gen = GENERATORS[distribution]
    except KeyError:
        raise ValueError(f"unknown distribution {distribution!r}; expected one of {DISTRIBUTIONS}") from None
    return gen(n, seed)


def gen_dataset(n: int, distribution: str, count: int, seed: int) -> list[PdpInstance]:
    """``count`` instances; instance ``i`` depends only on ``(seed, i)``."""
    return [generate(n, distribution, derive_seed(seed, i)) for i in range(count)]


def distance_matrix(inst: PdpInstance) -> np.ndarray:
    diff = inst.coords[:, None, :] - inst.coords[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    d.setflags(write=False)
    return d


def coords_array(instances: Sequence[PdpInstance]) -> np.ndarray:
    """Stack same-size instances into a ``(B, 2n+1, 2)`` array."""
    sizes = {inst.n for inst in instances}
    if len(sizes) != 1:
        raise InvalidSize(f"instances in a batch must share n, got {sorted(sizes)}")
    return np.stack([inst.coords for inst in instances])


def save_dataset(instances: Iterable[PdpInstance], path: str | Path) -> None:
    Path(path).write_text(json.dumps([inst.to_dict() for inst in instances]))


def load_dataset(path: str | Path) -> list[PdpInstance]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [PdpInstance.from_dict(d) for d in data]
