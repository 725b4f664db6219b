"""
Pooling design construction and evaluation.

A design is an n x k binary membership matrix U (well x compound). The analysis
works with the +/-1 coding X = 2U - 1. Three constructions are provided:

- CRowS: coordinate-exchange search on UE(s^2) with a pool-size cap c_max.
- MAPS: genetic algorithm on M with a minimum replication a_min.
- Random: balanced random pools under the n*c = k*a constraint.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.core.errors import DesignError
from src.core.workers import resolve_n_jobs

logger = logging.getLogger(__name__)

METHODS = ("crows", "maps", "random")
BUDGET_UNITS = ("proposals", "seconds")

# Share of exchange proposals that swap a present/absent pair inside one well.
SWAP_PROBABILITY = 0.8
REPAIR_ATTEMPTS = 10_000


@dataclass(frozen=True)
class DesignSpec:
    n: int
    k: int
    c_max: int
    method: str = "crows"
    a_min: int = 1
    seed: int = 0
    budget: int = 200_000
    budget_unit: str = "proposals"
    # CRowS exchange search
    restarts: int = 4
    # MAPS genetic algorithm (budget counts generations)
    population: int = 50
    elitism: int = 2
    tournament_size: int = 3
    mutation_rate: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise DesignError(f"Unknown design method '{self.method}'. Expected one of {METHODS}")
        if self.n < 2:
            raise DesignError(f"n must be >= 2, got {self.n}")
        if self.k < 1:
            raise DesignError(f"k must be >= 1, got {self.k}")
        if not 1 <= self.c_max <= self.k:
            raise DesignError(f"c_max must satisfy 1 <= c_max <= k ({self.k}), got {self.c_max}")
        if not 0 <= self.seed < 2**64:
            raise DesignError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.budget_unit not in BUDGET_UNITS:
            raise DesignError(f"budget_unit must be one of {BUDGET_UNITS}, got '{self.budget_unit}'")
        if self.method == "random" and (self.n * self.c_max) % self.k != 0:
            raise DesignError(self._nc_ka_message())

    @property
    def replication(self) -> Optional[int]:
        """a = n*c/k when integral, else None."""
        if (self.n * self.c_max) % self.k:
            return None
        return self.n * self.c_max // self.k

    def _nc_ka_message(self) -> str:
        return (
            f"nc = ka violated: n*c_max = {self.n * self.c_max} is not divisible by k = {self.k} "
            f"(a = {self.n * self.c_max / self.k:.3f}); balanced random pools need an integral replication"
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def default_compound_ids(k: int) -> List[str]:
    width = max(4, len(str(k)))
    return [f"C{j + 1:0{width}d}" for j in range(k)]


def default_well_ids(n: int) -> List[str]:
    width = max(3, len(str(n)))
    return [f"W{i + 1:0{width}d}" for i in range(n)]


@dataclass
class Design:
    membership: np.ndarray
    compound_ids: List[str]
    well_ids: List[str]
    spec: Optional[DesignSpec] = None
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        U = np.asarray(self.membership)
        if U.ndim != 2:
            raise DesignError(f"Membership must be a 2-D matrix, got {U.ndim} dimension(s)")
        n, k = U.shape
        if len(self.well_ids) != n or len(self.compound_ids) != k:
            raise DesignError(
                f"Dimension mismatch: membership is {n}x{k} but there are "
                f"{len(self.well_ids)} well ids and {len(self.compound_ids)} compound ids"
            )
        bad = ~np.isin(U, (0, 1))
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DesignError(
                f"Non-binary membership value {U[i, j]!r} at well '{self.well_ids[i]}', "
                f"compound '{self.compound_ids[j]}'"
            )
        if len(set(self.compound_ids)) != k:
            raise DesignError("Duplicate compound ids in design")
        if len(set(self.well_ids)) != n:
            raise DesignError("Duplicate well ids in design")
        self.membership = U.astype(np.uint8)
        self.compound_ids = [str(c) for c in self.compound_ids]
        self.well_ids = [str(w) for w in self.well_ids]

    @property
    def n(self) -> int:
        return self.membership.shape[0]

    @property
    def k(self) -> int:
        return self.membership.shape[1]

    def x_matrix(self) -> np.ndarray:
        """+/-1 coding X = 2U - J."""
        return 2.0 * self.membership - 1.0

    def row_sums(self) -> np.ndarray:
        return self.membership.sum(axis=1).astype(int)

    def column_sums(self) -> np.ndarray:
        return self.membership.sum(axis=0).astype(int)

    def wells_of(self, compound_id: str) -> np.ndarray:
        """Row indices of the wells that contain compound_id."""
        try:
            j = self.compound_ids.index(compound_id)
        except ValueError:
            raise DesignError(f"Compound '{compound_id}' is not part of the design")
        return np.flatnonzero(self.membership[:, j])

    @classmethod
    def from_membership(cls, U: np.ndarray, spec: Optional[DesignSpec] = None, **provenance) -> "Design":
        n, k = np.asarray(U).shape
        return cls(U, default_compound_ids(k), default_well_ids(n), spec=spec, provenance=dict(provenance))


@dataclass
class CriterionReport:
    sqrt_ue_s2: float
    sqrt_m: float
    c_min: int
    c_max: int
    a_min: int
    a_max: int
    violations: List[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------
# Criteria
# ---------------------------

def _exact_gram(M: np.ndarray) -> np.ndarray:
    # Integer Gram through BLAS; entries are small integers so float64 is exact.
    G = M.T.astype(np.float64) @ M.astype(np.float64)
    return np.rint(G).astype(np.int64)


def _intercept_augmented(U: np.ndarray) -> np.ndarray:
    X = 2 * U.astype(np.int64) - 1
    return np.hstack([np.ones((U.shape[0], 1), dtype=np.int64), X])


def _offdiagonal_square_sum(S: np.ndarray) -> int:
    """Sum over unordered pairs a < b of S_ab^2."""
    diag = np.diag(S)
    return int(((S * S).sum() - (diag * diag).sum()) // 2)


def evaluate_ue_s2(design: Design) -> float:
    """
    UE(s^2) of L = [1, X]: the mean squared off-diagonal element of S = L'L over
    the k(k+1)/2 unordered column pairs (intercept included).
    """
    k = design.k
    S = _exact_gram(_intercept_augmented(design.membership))
    return _offdiagonal_square_sum(S) / (k * (k + 1) / 2)


def _maps_objective(U: np.ndarray) -> float:
    G = _exact_gram(U)
    replication = np.diag(G)
    co_occurrence = float((G * G).sum() - (replication * replication).sum())
    spread = replication.astype(np.float64)
    return co_occurrence + float(((spread - spread.mean()) ** 2).sum())


def evaluate_maps_m(design: Design) -> float:
    """M = ||U'U - diag(U'U)||_F^2 + sum_j (a_j - mean a)^2."""
    return _maps_objective(design.membership)


def validate_design(design: Design, spec: Optional[DesignSpec] = None) -> CriterionReport:
    """Recomputes bounds and criteria and lists every spec violation. Never mutates the design."""
    rows = design.row_sums()
    cols = design.column_sums()
    violations: List[str] = []

    if spec is not None:
        if (design.n, design.k) != (spec.n, spec.k):
            violations.append(f"Shape mismatch: design is {design.n}x{design.k}, spec expects {spec.n}x{spec.k}")
        if spec.method in ("crows", "random"):
            for i in np.flatnonzero(rows > spec.c_max):
                violations.append(f"Oversized pool: well '{design.well_ids[i]}' has {rows[i]} compounds (c_max={spec.c_max})")
        if spec.method == "maps":
            for j in np.flatnonzero((cols < spec.a_min) & (cols > 0)):
                violations.append(
                    f"Under-replicated compound: '{design.compound_ids[j]}' appears in {cols[j]} wells (a_min={spec.a_min})"
                )
        if spec.method == "random" and spec.replication is not None:
            if (rows != spec.c_max).any():
                violations.append(f"Unbalanced pools: sizes range {rows.min()}-{rows.max()}, expected exactly {spec.c_max}")
            if (cols != spec.replication).any():
                violations.append(
                    f"Unbalanced replication: {cols.min()}-{cols.max()}, expected exactly {spec.replication}"
                )

    for j in np.flatnonzero(cols == 0):
        violations.append(f"Empty column: compound '{design.compound_ids[j]}' is in no well")

    return CriterionReport(
        sqrt_ue_s2=math.sqrt(evaluate_ue_s2(design)),
        sqrt_m=math.sqrt(evaluate_maps_m(design)),
        c_min=int(rows.min()),
        c_max=int(rows.max()),
        a_min=int(cols.min()),
        a_max=int(cols.max()),
        violations=violations,
    )


# ---------------------------
# Balanced random fill
# ---------------------------

def _balanced_fill(n: int, k: int, c: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random n x k membership with every row holding exactly c compounds and column
    sums differing by at most one. Slots are filled from consecutive shuffled
    passes over the compounds; duplicates inside a well are repaired by swaps.
    """
    slots = n * c
    passes = -(-slots // k)
    sequence = np.concatenate([rng.permutation(k) for _ in range(passes)])[:slots]
    pools = sequence.reshape(n, c)

    for i in range(n):
        attempts = 0
        while len(set(pools[i].tolist())) < c:
            attempts += 1
            if attempts > REPAIR_ATTEMPTS:
                raise DesignError(f"Could not repair duplicate compounds in well {i} after {REPAIR_ATTEMPTS} swaps")
            values, counts = np.unique(pools[i], return_counts=True)
            dup = values[counts > 1][0]
            pos = int(np.flatnonzero(pools[i] == dup)[0])
            r = int(rng.integers(n))
            if r == i:
                continue
            q = int(rng.integers(c))
            other = pools[r, q]
            if other in pools[i] or dup in pools[r]:
                continue
            pools[i, pos], pools[r, q] = other, dup

    U = np.zeros((n, k), dtype=np.uint8)
    np.put_along_axis(U, pools, 1, axis=1)
    return U


def construct_random_balanced(spec: DesignSpec) -> Design:
    if spec.method != "random":
        raise DesignError(f"construct_random_balanced needs method='random', got '{spec.method}'")
    if spec.replication is None:
        raise DesignError(spec._nc_ka_message())
    rng = np.random.default_rng(spec.seed)
    U = _balanced_fill(spec.n, spec.k, spec.c_max, rng)
    logger.info(f"Random balanced design {spec.n}x{spec.k} built (c={spec.c_max}, a={spec.replication})")
    return Design.from_membership(U, spec=spec, construction="random_balanced", seed=spec.seed)


# ---------------------------
# CRowS exchange search
# ---------------------------

class _ExchangeState:
    """
    Incumbent of the exchange search. Keeps S = L'L for L = [1, X] and the
    running off-diagonal square sum F, so each move is scored in O(k).
    """

    def __init__(self, U: np.ndarray):
        self.U = U.astype(np.uint8).copy()
        self.L = _intercept_augmented(self.U)
        self.S = _exact_gram(self.L)
        self.F = _offdiagonal_square_sum(self.S)
        self.row_sums = self.U.sum(axis=1).astype(np.int64)
        self.col_sums = self.U.sum(axis=0).astype(np.int64)
        self.width = self.L.shape[1]

    def delta(self, i: int, cols: List[int], steps: List[int]) -> int:
        """Change of F when L[i, cols] moves by steps (each +/-2)."""
        row = self.L[i]
        total = 0
        for a, d in zip(cols, steps):
            dot = int(self.S[a] @ row)
            for b in cols:
                dot -= int(self.S[a, b] * row[b])
            total += 2 * d * dot + 4 * (self.width - len(cols))
        for x in range(len(cols)):
            for y in range(x + 1, len(cols)):
                a, b = cols[x], cols[y]
                old = int(self.S[a, b])
                new = old - int(row[a] * row[b]) + int((row[a] + steps[x]) * (row[b] + steps[y]))
                total += new * new - old * old
        return total

    def apply(self, i: int, cols: List[int], steps: List[int], delta: int):
        row = self.L[i].copy()
        for a, d in zip(cols, steps):
            inc = d * row
            inc[cols] = 0
            self.S[a] += inc
            self.S[:, a] += inc
        for x in range(len(cols)):
            for y in range(x + 1, len(cols)):
                a, b = cols[x], cols[y]
                new = self.S[a, b] - row[a] * row[b] + (row[a] + steps[x]) * (row[b] + steps[y])
                self.S[a, b] = self.S[b, a] = new
        for a, d in zip(cols, steps):
            self.L[i, a] += d
            j = a - 1
            if d > 0:
                self.U[i, j] = 1
                self.row_sums[i] += 1
                self.col_sums[j] += 1
            else:
                self.U[i, j] = 0
                self.row_sums[i] -= 1
                self.col_sums[j] -= 1
        self.F += delta


@dataclass
class _SearchResult:
    membership: np.ndarray
    F: int
    proposals: int
    accepted: int
    restart: int
    trace: Optional[List[float]] = None


def _propose(state: _ExchangeState, c_max: int, rng: np.random.Generator) -> Optional[Tuple[int, List[int], List[int]]]:
    n, k = state.U.shape
    i = int(rng.integers(n))
    row = state.U[i]
    if rng.random() < SWAP_PROBABILITY and 0 < state.row_sums[i] < k:
        present = np.flatnonzero(row)
        p = int(present[rng.integers(len(present))])
        if state.col_sums[p] < 2:
            return None
        q = int(rng.integers(k))
        while row[q]:
            q = int(rng.integers(k))
        return i, [p + 1, q + 1], [-2, 2]

    j = int(rng.integers(k))
    if row[j]:
        if state.col_sums[j] < 2:
            return None
        return i, [j + 1], [-2]
    if state.row_sums[i] >= c_max:
        return None
    return i, [j + 1], [2]


def _exchange_search(
    spec: DesignSpec,
    seed_seq: np.random.SeedSequence,
    restart: int,
    budget: float,
    record_trace: bool,
) -> _SearchResult:
    rng = np.random.default_rng(seed_seq)
    state = _ExchangeState(_balanced_fill(spec.n, spec.k, spec.c_max, rng))
    trace = [state.F] if record_trace else None

    by_time = spec.budget_unit == "seconds"
    deadline = time.perf_counter() + budget if by_time else None
    proposals = accepted = 0
    while True:
        if by_time:
            if proposals % 1024 == 0 and time.perf_counter() >= deadline:
                break
        elif proposals >= budget:
            break
        proposals += 1
        move = _propose(state, spec.c_max, rng)
        if move is None:
            continue
        i, cols, steps = move
        delta = state.delta(i, cols, steps)
        if delta <= 0:
            state.apply(i, cols, steps, delta)
            accepted += 1
            if record_trace:
                trace.append(state.F)

    return _SearchResult(state.U, state.F, proposals, accepted, restart, trace)


def construct_crows(spec: DesignSpec, n_jobs: Optional[int] = 1, record_trace: bool = False) -> Design:
    """
    CRowS design: pool sizes capped at c_max, UE(s^2) locally minimized by an
    exchange search (within-well swaps and single bit flips, accepted when the
    criterion does not increase) with independent random restarts.
    """
    if spec.method != "crows":
        raise DesignError(f"construct_crows needs method='crows', got '{spec.method}'")
    if spec.k > spec.n * spec.c_max:
        raise DesignError(
            f"Infeasible spec: k = {spec.k} compounds cannot each appear once in "
            f"n*c_max = {spec.n * spec.c_max} slots"
        )
    if spec.budget <= 0:
        raise DesignError("Zero budget: the exchange search needs a positive budget")
    restarts = max(1, spec.restarts)
    share = spec.budget / restarts if spec.budget_unit == "seconds" else max(1, spec.budget // restarts)

    start = time.perf_counter()
    seeds = np.random.SeedSequence(spec.seed).spawn(restarts)
    results = Parallel(n_jobs=resolve_n_jobs(n_jobs))(
        delayed(_exchange_search)(spec, seeds[r], r, share, record_trace) for r in range(restarts)
    )
    best = min(results, key=lambda res: (res.F, res.restart))
    ue = best.F / (spec.k * (spec.k + 1) / 2)
    logger.info(
        f"CRowS {spec.n}x{spec.k} (c_max={spec.c_max}): sqrt(UE(s^2)) = {math.sqrt(ue):.4f} "
        f"from restart {best.restart}/{restarts} ({time.perf_counter() - start:.1f}s)"
    )
    provenance = {
        "construction": "crows_exchange",
        "seed": spec.seed,
        "restart": best.restart,
        "proposals": sum(r.proposals for r in results),
        "accepted": best.accepted,
        "ue_s2": ue,
    }
    if record_trace:
        provenance["trace"] = [F / (spec.k * (spec.k + 1) / 2) for F in best.trace]
    return Design.from_membership(best.membership, spec=spec, **provenance)


# ---------------------------
# MAPS genetic algorithm
# ---------------------------

def _random_maps_individual(n: int, k: int, a_min: int, rng: np.random.Generator) -> np.ndarray:
    U = np.zeros((n, k), dtype=np.uint8)
    for j in range(k):
        U[rng.choice(n, size=a_min, replace=False), j] = 1
    return U


def _mutate(U: np.ndarray, a_min: int, rate: float, rng: np.random.Generator):
    """Bit flips; a flip that would drop a column below a_min relocates the entry within its column."""
    n, k = U.shape
    flips = max(1, int(rng.binomial(n * k, rate)))
    for _ in range(flips):
        i, j = int(rng.integers(n)), int(rng.integers(k))
        if not U[i, j]:
            U[i, j] = 1
        elif U[:, j].sum() > a_min:
            U[i, j] = 0
        else:
            empty = np.flatnonzero(U[:, j] == 0)
            if len(empty):
                U[i, j] = 0
                U[empty[rng.integers(len(empty))], j] = 1


def construct_maps(spec: DesignSpec) -> Design:
    """
    MAPS design: every compound in at least a_min wells, M minimized by a genetic
    algorithm (tournament selection, uniform crossover on whole columns, a_min
    preserving mutation, elitism). Pool sizes are unconstrained.
    """
    if spec.method != "maps":
        raise DesignError(f"construct_maps needs method='maps', got '{spec.method}'")
    if spec.a_min < 1:
        raise DesignError(f"a_min must be >= 1, got {spec.a_min}")
    if spec.a_min > spec.n:
        raise DesignError(f"Infeasible spec: a_min = {spec.a_min} exceeds the number of wells n = {spec.n}")
    if spec.budget <= 0:
        raise DesignError("Zero budget: the genetic algorithm needs a positive budget")

    n, k = spec.n, spec.k
    rng = np.random.default_rng(spec.seed)
    size = max(spec.population, spec.elitism + 1)
    rate = spec.mutation_rate if spec.mutation_rate is not None else 1.0 / (n * k)

    population = [_random_maps_individual(n, k, spec.a_min, rng) for _ in range(size)]
    fitness = np.array([_maps_objective(U) for U in population])

    def tournament() -> int:
        entrants = rng.choice(size, size=min(spec.tournament_size, size), replace=False)
        return int(min(entrants, key=lambda e: (fitness[e], e)))

    start = time.perf_counter()
    generation = 0
    while True:
        if spec.budget_unit == "seconds":
            if time.perf_counter() - start >= spec.budget:
                break
        elif generation >= spec.budget:
            break
        generation += 1

        order = np.argsort(fitness, kind="stable")
        offspring = [population[e].copy() for e in order[: spec.elitism]]
        while len(offspring) < size:
            left, right = population[tournament()], population[tournament()]
            take_left = rng.random(k) < 0.5
            child = np.where(take_left[None, :], left, right).astype(np.uint8)
            _mutate(child, spec.a_min, rate, rng)
            offspring.append(child)
        population = offspring
        fitness = np.array([_maps_objective(U) for U in population])

        if generation % 100 == 0:
            logger.debug(f"MAPS generation {generation}: best M = {fitness.min():.1f}")

    best = int(np.argmin(fitness))
    logger.info(
        f"MAPS {n}x{k} (a_min={spec.a_min}): sqrt(M) = {math.sqrt(fitness[best]):.4f} "
        f"after {generation} generations ({time.perf_counter() - start:.1f}s)"
    )
    return Design.from_membership(
        population[best], spec=spec, construction="maps_ga", seed=spec.seed,
        generations=generation, m=float(fitness[best]),
    )


def construct_design(spec: DesignSpec, n_jobs: Optional[int] = 1) -> Design:
    if spec.method == "crows":
        return construct_crows(spec, n_jobs=n_jobs)
    if spec.method == "maps":
        return construct_maps(spec)
    return construct_random_balanced(spec)
