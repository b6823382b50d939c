"""Reference solvers: precedence-constrained Held-Karp, brute force, nearest-feasible greedy."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from clusterpdp import env
from clusterpdp.errors import TooLarge
from clusterpdp.instances import PdpInstance

DP_MAX_CUSTOMERS = 16
BRUTE_MAX_CUSTOMERS = 8


@dataclass(frozen=True)
class OracleResult:
    order: tuple[int, ...]
    length: float
    explored_states: int


def _closed_subsets(n: int) -> list[int]:
    """Bitmasks over customers (bit ``k`` is node ``k+1``) where every delivery has its pickup."""
    subsets = []
    # each pair contributes one of: neither, pickup only, both
    for choice in itertools.product((0, 1, 2), repeat=n):
        mask = 0
        for i, c in enumerate(choice):
            if c >= 1:
                mask |= 1 << i
            if c == 2:
                mask |= 1 << (i + n)
        subsets.append(mask)
    subsets.sort(key=lambda m: (bin(m).count("1"), m))
    return subsets


def exact_dp(inst: PdpInstance, max_customers: int = DP_MAX_CUSTOMERS) -> OracleResult:
    """Optimal tour by dynamic programming over (visited subset, last node).

    Only precedence-closed subsets are ever stored, so the table holds at most
    ``3**n * 2n`` entries.
    """
    n = inst.n
    m = 2 * n
    if m > max_customers:
        raise TooLarge(f"exact_dp supports at most {max_customers} customers, got {m}")
    d = inst.distances
    cost: dict[tuple[int, int], float] = {}
    parent: dict[tuple[int, int], int] = {}
    for i in range(n):
        cost[(1 << i, i)] = float(d[0, i + 1])
        parent[(1 << i, i)] = -1

    for mask in _closed_subsets(n):
        if bin(mask).count("1") < 2:
            continue
        for j in range(m):
            if not mask >> j & 1:
                continue
            # j must be removable: a pickup whose delivery is still pending in mask
            if j < n and mask >> (j + n) & 1:
                continue
            prev = mask ^ (1 << j)
            best = math.inf
            arg = -1
            for k in range(m):
                if not prev >> k & 1:
                    continue
                c = cost.get((prev, k))
                if c is None:
                    continue
                c = c + d[k + 1, j + 1]
                if c < best:
                    best, arg = c, k
            if arg >= 0:
                cost[(mask, j)] = float(best)
                parent[(mask, j)] = arg

    full = (1 << m) - 1
    best = math.inf
    last = -1
    for j in range(n, m):
        c = cost.get((full, j))
        if c is not None and c + d[j + 1, 0] < best:
            best, last = c + d[j + 1, 0], j

    order = []
    mask = full
    j = last
    while j >= 0:
        order.append(j + 1)
        mask, j = mask ^ (1 << j), parent[(mask, j)]
    order.reverse()
    return OracleResult(order=tuple(order), length=env.tour_length(inst, order), explored_states=len(cost))


def valid_permutations(inst: PdpInstance):
    for perm in itertools.permutations(range(1, 2 * inst.n + 1)):
        if env.validate_tour(inst, perm) is None:
            yield perm


def brute_force(inst: PdpInstance, max_customers: int = BRUTE_MAX_CUSTOMERS) -> OracleResult:
    if 2 * inst.n > max_customers:
        raise TooLarge(f"brute_force supports at most {max_customers} customers, got {2 * inst.n}")
    d = inst.distances
    best = math.inf
    best_order: tuple[int, ...] = ()
    count = 0
    for perm in valid_permutations(inst):
        count += 1
        path = (0, *perm, 0)
        length = sum(d[a, b] for a, b in zip(path[:-1], path[1:]))
        if length < best:
            best, best_order = length, perm
    return OracleResult(order=best_order, length=env.tour_length(inst, best_order), explored_states=count)


def greedy_nearest_feasible(inst: PdpInstance) -> env.Tour:
    state = env.initial_state(inst)
    d = inst.distances
    while not state.done:
        mask = env.feasible_mask(state)
        dist = np.where(mask, d[state.current], np.inf)
        state, _ = env.step(state, int(np.argmin(dist)))
    return env.make_tour(inst, state.order)
