# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; operation order matches ``_pykernels`` exactly."""

from libc.math cimport sqrt, log, cos, INFINITY, M_PI
from libc.stdint cimport uint64_t
from libc.stdlib cimport malloc, free

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t M1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t M2 = 0x94D049BB133111EBULL

cdef double TWO_NEG53 = 1.0 / 9007199254740992.0
cdef double TWO_PI = 2.0 * M_PI

EDGE = 0
CLOUD = 1


cdef inline uint64_t _mix(uint64_t *state) nogil:
    state[0] = state[0] + GOLDEN
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * M1
    z = (z ^ (z >> 27)) * M2
    return z ^ (z >> 31)


cdef inline double _gauss(uint64_t *state) nogil:
    cdef uint64_t a = _mix(state)
    cdef uint64_t b = _mix(state)
    cdef double u1 = 1.0 - <double>(a >> 11) * TWO_NEG53
    cdef double u2 = <double>(b >> 11) * TWO_NEG53
    return sqrt(-2.0 * log(u1)) * cos(TWO_PI * u2)


def splitmix64(state):
    cdef uint64_t s = <uint64_t>(state & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t out = _mix(&s)
    return s, out


def to_unit(u):
    cdef uint64_t v = <uint64_t>u
    return <double>(v >> 11) * TWO_NEG53


def gaussian(state):
    cdef uint64_t s = <uint64_t>(state & 0xFFFFFFFFFFFFFFFF)
    cdef double g = _gauss(&s)
    return s, g


def gaussian_fill(state, Py_ssize_t count):
    cdef uint64_t s = <uint64_t>(state & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t i
    out = [0.0] * count
    for i in range(count):
        out[i] = _gauss(&s)
    return s, out


def window_zscore(values, double x, double eps):
    cdef Py_ssize_t n = len(values)
    cdef double total = 0.0, mu, ss = 0.0, d, s
    cdef double v
    for v in values:
        total += v
    mu = total / n
    for v in values:
        d = v - mu
        ss += d * d
    s = sqrt(ss / (n - 1))
    return mu, s, (x - mu) / (s if s > eps else eps)


cdef struct Problem:
    int n
    double *cpu
    double *mem
    double *cost[2]
    double cap_cpu[2]
    double cap_mem[2]
    double *suffix_cpu
    double *suffix_mem
    double used_cpu[2]
    double used_mem[2]
    int *assign
    int *best_assign
    double best


cdef double _bound(Problem *p, int i) nogil:
    cdef double free_cpu = (p.cap_cpu[0] - p.used_cpu[0]) + (p.cap_cpu[1] - p.used_cpu[1])
    cdef double free_mem = (p.cap_mem[0] - p.used_mem[0]) + (p.cap_mem[1] - p.used_mem[1])
    cdef double lb = 0.0, cheapest
    cdef int j, node
    if p.suffix_cpu[i] > free_cpu or p.suffix_mem[i] > free_mem:
        return INFINITY
    for j in range(i, p.n):
        cheapest = INFINITY
        for node in range(2):
            if p.used_cpu[node] + p.cpu[j] <= p.cap_cpu[node] and p.used_mem[node] + p.mem[j] <= p.cap_mem[node]:
                if p.cost[node][j] < cheapest:
                    cheapest = p.cost[node][j]
        if cheapest == INFINITY:
            return INFINITY
        lb += cheapest
    return lb


cdef void _search(Problem *p, int i, double cost) nogil:
    cdef int node, k
    cdef double c, m, prev_c, prev_m
    if i == p.n:
        if cost < p.best:
            p.best = cost
            for k in range(p.n):
                p.best_assign[k] = p.assign[k]
        return
    if cost + _bound(p, i) >= p.best:
        return
    for node in range(2):
        c = p.used_cpu[node] + p.cpu[i]
        m = p.used_mem[node] + p.mem[i]
        if c <= p.cap_cpu[node] and m <= p.cap_mem[node]:
            prev_c = p.used_cpu[node]
            prev_m = p.used_mem[node]
            p.used_cpu[node] = c
            p.used_mem[node] = m
            p.assign[i] = node
            _search(p, i + 1, cost + p.cost[node][i])
            p.used_cpu[node] = prev_c
            p.used_mem[node] = prev_m


def place_bnb(cpu, mem, cost_edge, cost_cloud,
              double edge_cpu, double edge_mem, double cloud_cpu, double cloud_mem):
    cdef Problem p
    cdef int n = len(cpu)
    cdef int j
    cdef double *block = <double *>malloc(sizeof(double) * (6 * n + 2))
    cdef int *ints = <int *>malloc(sizeof(int) * (2 * n + 1))
    if block == NULL or ints == NULL:
        free(block)
        free(ints)
        raise MemoryError()
    try:
        p.n = n
        p.cpu = block
        p.mem = block + n
        p.cost[0] = block + 2 * n
        p.cost[1] = block + 3 * n
        p.suffix_cpu = block + 4 * n
        p.suffix_mem = block + 5 * n + 1
        p.assign = ints
        p.best_assign = ints + n
        for j in range(n):
            p.cpu[j] = cpu[j]
            p.mem[j] = mem[j]
            p.cost[0][j] = cost_edge[j]
            p.cost[1][j] = cost_cloud[j]
            p.assign[j] = 0
            p.best_assign[j] = 0
        p.suffix_cpu[n] = 0.0
        p.suffix_mem[n] = 0.0
        for j in range(n - 1, -1, -1):
            p.suffix_cpu[j] = p.suffix_cpu[j + 1] + p.cpu[j]
            p.suffix_mem[j] = p.suffix_mem[j + 1] + p.mem[j]
        p.cap_cpu[0] = edge_cpu
        p.cap_cpu[1] = cloud_cpu
        p.cap_mem[0] = edge_mem
        p.cap_mem[1] = cloud_mem
        p.used_cpu[0] = 0.0
        p.used_cpu[1] = 0.0
        p.used_mem[0] = 0.0
        p.used_mem[1] = 0.0
        p.best = INFINITY
        with nogil:
            _search(&p, 0, 0.0)
        if p.best == INFINITY:
            return float("inf"), None
        return p.best, [p.best_assign[j] for j in range(n)]
    finally:
        free(block)
        free(ints)
