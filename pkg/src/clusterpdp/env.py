"""Route construction as a sequential decision process, plus tour evaluation.

The depot is never an action: an episode ends after the last customer and the
return leg is paid by :func:`terminal_reward`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from clusterpdp.errors import EpisodeFinished, InfeasibleAction, InvalidTour
from clusterpdp.instances import PdpInstance


@dataclass(frozen=True, eq=False)
class RouteState:
    inst: PdpInstance
    tour: tuple[int, ...]
    visited: tuple[bool, ...]
    open_pickups: frozenset[int]

    @property
    def current(self) -> int:
        return self.tour[-1]

    @property
    def done(self) -> bool:
        return len(self.tour) == self.inst.num_nodes

    @property
    def order(self) -> list[int]:
        """Customer sequence visited so far (depot stripped)."""
        return list(self.tour[1:])


@dataclass(frozen=True)
class Tour:
    order: tuple[int, ...]
    length: float

    def to_dict(self, instance_ref: Optional[str] = None) -> dict:
        return {"instance_ref": instance_ref, "order": list(self.order), "length": self.length}


@dataclass(frozen=True)
class Violation:
    """First constraint broken by a candidate order.

    ``kind`` is one of ``OutOfRange``, ``Duplicate``, ``Missing``, ``Precedence``.
    """

    kind: str
    node: int
    position: Optional[int] = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "node": self.node, "position": self.position}


def initial_state(inst: PdpInstance) -> RouteState:
    visited = [False] * inst.num_nodes
    visited[0] = True
    return RouteState(inst=inst, tour=(0,), visited=tuple(visited), open_pickups=frozenset())


def is_feasible(state: RouteState, node: int) -> Optional[str]:
    """``None`` if ``node`` may be visited next, otherwise the name of the violated rule."""
    n = state.inst.n
    if node == 0:
        return "Depot"
    if not 0 < node <= 2 * n:
        raise IndexError(f"node {node} out of range for n={n}")
    if state.visited[node]:
        return "Visited"
    if node > n and not state.visited[node - n]:
        return "Precedence"
    return None


def feasible_mask(state: RouteState) -> np.ndarray:
    if state.done:
        raise EpisodeFinished("all customers have been visited")
    n = state.inst.n
    visited = np.asarray(state.visited)
    mask = ~visited
    mask[0] = False
    mask[n + 1 :] &= visited[1 : n + 1]
    return mask


def step(state: RouteState, action: int) -> tuple[RouteState, float]:
    if state.done:
        raise EpisodeFinished("all customers have been visited")
    rule = is_feasible(state, action)
    if rule is not None:
        raise InfeasibleAction(rule, action)
    n = state.inst.n
    visited = list(state.visited)
    visited[action] = True
    if action <= n:
        open_pickups = state.open_pickups | {action}
    else:
        open_pickups = state.open_pickups - {action - n}
    reward = -float(state.inst.distances[state.current, action])
    new = RouteState(
        inst=state.inst,
        tour=state.tour + (action,),
        visited=tuple(visited),
        open_pickups=frozenset(open_pickups),
    )
    return new, reward


def terminal_reward(state: RouteState) -> float:
    """Return-to-depot leg, collected once the episode is done."""
    if not state.done:
        raise ValueError("episode still running")
    return -float(state.inst.distances[state.current, 0])


def _check_permutation(inst: PdpInstance, order: Sequence[int]) -> None:
    if sorted(int(v) for v in order) != list(range(1, 2 * inst.n + 1)):
        raise InvalidTour(f"order is not a permutation of 1..{2 * inst.n}")


def tour_length(inst: PdpInstance, order: Sequence[int]) -> float:
    _check_permutation(inst, order)
    d = inst.distances
    path = [0, *order, 0]
    return float(sum(d[a, b] for a, b in zip(path[:-1], path[1:])))


def arrival_times(inst: PdpInstance, order: Sequence[int]) -> list[float]:
    """Cumulative travel time at each customer in visiting order (depot departs at 0)."""
    _check_permutation(inst, order)
    d = inst.distances
    times = []
    t = 0.0
    prev = 0
    for node in order:
        t += d[prev, node] / inst.speed
        times.append(float(t))
        prev = node
    return times


def validate_tour(inst: PdpInstance, order: Sequence[int]) -> Optional[Violation]:
    """``None`` when ``order`` is a feasible PDP tour, otherwise the first violation found."""
    n = inst.n
    seen: dict[int, int] = {}
    for pos, node in enumerate(order):
        node = int(node)
        if not 0 < node <= 2 * n:
            return Violation("OutOfRange", node, pos)
        if node in seen:
            return Violation("Duplicate", node, pos)
        if node > n and node - n not in seen:
            return Violation("Precedence", node - n, pos)
        seen[node] = pos
    for node in range(1, 2 * n + 1):
        if node not in seen:
            return Violation("Missing", node)
    return None


def make_tour(inst: PdpInstance, order: Sequence[int]) -> Tour:
    violation = validate_tour(inst, order)
    if violation is not None:
        raise InvalidTour(f"{violation.kind} at node {violation.node}")
    return Tour(order=tuple(int(v) for v in order), length=tour_length(inst, order))
