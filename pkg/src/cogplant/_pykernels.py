"""Pure-Python kernels. ``_core.pyx`` mirrors these operation for operation so
both backends return bit-identical floats."""

from __future__ import annotations

import math
from typing import Sequence

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_NEG53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi

EDGE = 0
CLOUD = 1


def splitmix64(state: int) -> tuple[int, int]:
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return state, z ^ (z >> 31)


def to_unit(u: int) -> float:
    """Top 53 bits as a double in [0, 1)."""
    return (u >> 11) * _TWO_NEG53


def gaussian(state: int) -> tuple[int, float]:
    """One standard normal via Box-Muller from two consecutive draws."""
    state, a = splitmix64(state)
    state, b = splitmix64(state)
    u1 = 1.0 - to_unit(a)
    u2 = to_unit(b)
    return state, math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


def gaussian_fill(state: int, count: int) -> tuple[int, list[float]]:
    out = []
    for _ in range(count):
        state, g = gaussian(state)
        out.append(g)
    return state, out


def window_zscore(values: Sequence[float], x: float, eps: float) -> tuple[float, float, float]:
    """Mean, sample standard deviation and z of ``x`` against ``values``."""
    n = len(values)
    total = 0.0
    for v in values:
        total += v
    mu = total / n
    ss = 0.0
    for v in values:
        d = v - mu
        ss += d * d
    s = math.sqrt(ss / (n - 1))
    return mu, s, (x - mu) / (s if s > eps else eps)


def place_bnb(
    cpu: Sequence[float],
    mem: Sequence[float],
    cost_edge: Sequence[float],
    cost_cloud: Sequence[float],
    edge_cpu: float,
    edge_mem: float,
    cloud_cpu: float,
    cloud_mem: float,
) -> tuple[float, list[int] | None]:
    """Depth-first branch and bound over Edge/Cloud assignments.

    Edge is tried before Cloud, so the first optimum reached is the
    lexicographically smallest one; pruning on ``bound >= best`` keeps it.
    """
    n = len(cpu)
    caps_cpu = (edge_cpu, cloud_cpu)
    caps_mem = (edge_mem, cloud_mem)
    costs = (cost_edge, cost_cloud)
    suffix_cpu = [0.0] * (n + 1)
    suffix_mem = [0.0] * (n + 1)
    for j in range(n - 1, -1, -1):
        suffix_cpu[j] = suffix_cpu[j + 1] + cpu[j]
        suffix_mem[j] = suffix_mem[j + 1] + mem[j]
    assign = [0] * n
    best = math.inf
    best_assign: list[int] | None = None
    used_cpu = [0.0, 0.0]
    used_mem = [0.0, 0.0]

    def bound(i: int) -> float:
        free_cpu = (caps_cpu[0] - used_cpu[0]) + (caps_cpu[1] - used_cpu[1])
        free_mem = (caps_mem[0] - used_mem[0]) + (caps_mem[1] - used_mem[1])
        if suffix_cpu[i] > free_cpu or suffix_mem[i] > free_mem:
            return math.inf
        lb = 0.0
        for j in range(i, n):
            cheapest = math.inf
            for node in (EDGE, CLOUD):
                if used_cpu[node] + cpu[j] <= caps_cpu[node] and used_mem[node] + mem[j] <= caps_mem[node]:
                    if costs[node][j] < cheapest:
                        cheapest = costs[node][j]
            if cheapest == math.inf:
                return math.inf
            lb += cheapest
        return lb

    def search(i: int, cost: float) -> None:
        nonlocal best, best_assign
        if i == n:
            if cost < best:
                best = cost
                best_assign = assign[:]
            return
        if cost + bound(i) >= best:
            return
        for node in (EDGE, CLOUD):
            c = used_cpu[node] + cpu[i]
            m = used_mem[node] + mem[i]
            if c <= caps_cpu[node] and m <= caps_mem[node]:
                prev_c, prev_m = used_cpu[node], used_mem[node]
                used_cpu[node], used_mem[node] = c, m
                assign[i] = node
                search(i + 1, cost + costs[node][i])
                used_cpu[node], used_mem[node] = prev_c, prev_m

    search(0, 0.0)
    return best, best_assign
