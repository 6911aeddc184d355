"""Samplers and exact solvers for the compiled models.

* :func:`brute_force` -- exact minimum by Gray-code enumeration (n <= 30),
* :func:`simulated_anneal` -- single-flip Metropolis, geometric schedule,
* :func:`tabu_search` -- best-improvement flips with a tabu list,
* :func:`solve_constrained` -- adaptive exterior-penalty loop over a
  :class:`~qubo_portfolio.compiler.ConstrainedModel`,
* :func:`reference_continuous` -- continuous optimum used as the classical
  benchmark.

Every read owns a ``numpy.random.Generator`` seeded with ``seed ^ read``;
all orderings break ties lexicographically on the bit string, so results are
reproducible bit for bit.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .analysis import check_constraints
from .compiler import ConstrainedModel, QuadraticModel
from .encoding import bits_to_str, decode_solution, str_to_bits
from .model import ConstraintOp, Problem

__all__ = [
    "BRUTE_FORCE_MAX_BITS",
    "SamplerConfigError",
    "SolverError",
    "ReferenceSolveError",
    "SamplerConfig",
    "Sample",
    "SampleSet",
    "ConstrainedResult",
    "ReferenceSolution",
    "default_temperatures",
    "derive_seed",
    "brute_force",
    "simulated_anneal",
    "tabu_search",
    "solve_constrained",
    "reference_continuous",
]

BRUTE_FORCE_MAX_BITS = 30
_MASK64 = (1 << 64) - 1


class SamplerConfigError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class ReferenceSolveError(SolverError):
    """The continuous benchmark found no feasible point or did not converge."""


def derive_seed(seed: int, index: int) -> int:
    """SplitMix64 step on ``seed + index``; used for rounds and sweep points."""
    z = (int(seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SamplerConfig:
    seed: int = 0
    num_reads: int = 10
    sweeps: int = 1000
    temperature_initial: Optional[float] = None
    temperature_final: Optional[float] = None
    tabu_tenure: Optional[int] = None
    time_limit: Optional[float] = None

    def __post_init__(self):
        if self.num_reads < 1:
            raise SamplerConfigError("num_reads must be >= 1")
        if self.sweeps < 1:
            raise SamplerConfigError("sweeps must be >= 1")
        ti, tf = self.temperature_initial, self.temperature_final
        if tf is not None and tf <= 0:
            raise SamplerConfigError("temperature_final must be > 0")
        if ti is not None and ti <= 0:
            raise SamplerConfigError("temperature_initial must be > 0")
        if ti is not None and tf is not None and not ti > tf:
            raise SamplerConfigError("temperature_initial must exceed temperature_final")
        if self.tabu_tenure is not None and self.tabu_tenure < 0:
            raise SamplerConfigError("tabu_tenure must be >= 0")
        if self.time_limit is not None and self.time_limit <= 0:
            raise SamplerConfigError("time_limit must be positive")

    def read_seed(self, read: int) -> int:
        return (int(self.seed) & _MASK64) ^ read

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_reads": self.num_reads,
            "sweeps": self.sweeps,
            "temperature_initial": self.temperature_initial,
            "temperature_final": self.temperature_final,
            "tabu_tenure": self.tabu_tenure,
            "time_limit": self.time_limit,
        }


@dataclass
class Sample:
    bits: np.ndarray
    energy: float
    read: int
    round: int = 0
    feasible: Optional[bool] = None

    @property
    def key(self) -> tuple:
        return (self.energy, tuple(int(b) for b in self.bits))

    @property
    def bit_string(self) -> str:
        return bits_to_str(self.bits)


@dataclass
class SampleSet:
    """Samples sorted by ``(energy, bits)``; ``info`` carries solver metadata."""

    samples: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = sorted(self.samples, key=lambda s: s.key)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def first(self) -> Sample:
        return self.samples[0]

    def merge(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(self.samples + other.samples, {**self.info, **other.info})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["read", "round", "energy", "bits", "feasible"])
            for s in self.samples:
                feas = "" if s.feasible is None else int(bool(s.feasible))
                writer.writerow([s.read, s.round, repr(float(s.energy)), s.bit_string, feas])

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        samples = []
        with open(path, newline="", encoding="ascii") as fh:
            for row in csv.DictReader(fh):
                feas = row.get("feasible", "")
                samples.append(
                    Sample(
                        str_to_bits(row["bits"]),
                        float(row["energy"]),
                        int(row["read"]),
                        int(row.get("round") or 0),
                        None if feas == "" else feas == "1",
                    )
                )
        return cls(samples)


# --- numba kernels ---------------------------------------------------------

@njit(cache=True)
def _penalty(value, kind, rhs, tol):
    if kind == 0:
        e = abs(value - rhs) - tol
    elif kind == 1:
        e = value - rhs - tol
    else:
        e = rhs - value - tol
    if e > 0.0:
        return e * e
    return 0.0


@njit(cache=True)
def _anneal_read(coupling, diag, x, betas, uniforms, ccoup, cdiag, coffset, ckind, crhs, ctol, clam):
    n = x.shape[0]
    nc = ccoup.shape[0]
    h = np.zeros(n)
    for i in range(n):
        if x[i]:
            for j in range(n):
                h[j] += coupling[j, i]
    g = np.zeros((nc, n))
    t = np.zeros(nc)
    for c in range(nc):
        t[c] = coffset[c]
        for i in range(n):
            if x[i]:
                t[c] += cdiag[c, i]
                for j in range(n):
                    g[c, j] += ccoup[c, j, i]
        for i in range(n):
            if x[i]:
                t[c] += 0.5 * g[c, i]
    dt = np.zeros(nc)
    for s in range(betas.shape[0]):
        beta = betas[s]
        for i in range(n):
            sgn = 1.0 - 2.0 * x[i]
            de = sgn * (diag[i] + h[i])
            for c in range(nc):
                dt[c] = sgn * (cdiag[c, i] + g[c, i])
                de += clam[c] * (
                    _penalty(t[c] + dt[c], ckind[c], crhs[c], ctol[c])
                    - _penalty(t[c], ckind[c], crhs[c], ctol[c])
                )
            if de <= 0.0 or uniforms[s, i] < math.exp(-beta * de):
                x[i] = 1 - x[i]
                for j in range(n):
                    h[j] += sgn * coupling[j, i]
                for c in range(nc):
                    t[c] += dt[c]
                    for j in range(n):
                        g[c, j] += sgn * ccoup[c, j, i]
    return x


@njit(cache=True)
def _tabu_read(coupling, diag, x, n_iter, tenure, stall_limit, eps):
    n = x.shape[0]
    h = np.zeros(n)
    for i in range(n):
        if x[i]:
            for j in range(n):
                h[j] += coupling[j, i]
    tabu_until = np.zeros(n, dtype=np.int64)
    best = x.copy()
    energy = 0.0
    best_energy = 0.0
    last_improve = 0
    for it in range(n_iter):
        move = -1
        move_delta = np.inf
        for i in range(n):
            d = (1.0 - 2.0 * x[i]) * (diag[i] + h[i])
            if tabu_until[i] > it and not (energy + d < best_energy - eps):
                continue
            if d < move_delta:
                move_delta = d
                move = i
        if move < 0:
            break
        if tenure == 0 and move_delta >= 0.0:
            break
        sgn = 1.0 - 2.0 * x[move]
        x[move] = 1 - x[move]
        energy += move_delta
        for j in range(n):
            h[j] += sgn * coupling[j, move]
        tabu_until[move] = it + 1 + tenure
        if energy < best_energy - eps:
            best_energy = energy
            best[:] = x
            last_improve = it
        elif it - last_improve > stall_limit:
            break
    return best


@njit(cache=True)
def _gray_min(coupling, diag, n):
    x = np.zeros(n, dtype=np.uint8)
    h = np.zeros(n)
    energy = 0.0
    best = 0.0
    total = np.int64(1) << n
    for k in range(1, total):
        i = 0
        kk = k
        while (kk & 1) == 0:
            kk >>= 1
            i += 1
        sgn = 1.0 - 2.0 * x[i]
        energy += sgn * (diag[i] + h[i])
        x[i] = 1 - x[i]
        for j in range(n):
            h[j] += sgn * coupling[j, i]
        if energy < best:
            best = energy
    return best


@njit(cache=True)
def _gray_collect(coupling, diag, n, threshold, cap):
    x = np.zeros(n, dtype=np.uint8)
    h = np.zeros(n)
    energy = 0.0
    state = np.int64(0)
    out = np.empty(cap, dtype=np.int64)
    count = 0
    if energy <= threshold:
        out[0] = 0
        count = 1
    total = np.int64(1) << n
    for k in range(1, total):
        i = 0
        kk = k
        while (kk & 1) == 0:
            kk >>= 1
            i += 1
        sgn = 1.0 - 2.0 * x[i]
        energy += sgn * (diag[i] + h[i])
        x[i] = 1 - x[i]
        state ^= np.int64(1) << i
        for j in range(n):
            h[j] += sgn * coupling[j, i]
        if energy <= threshold and count < cap:
            out[count] = state
            count += 1
    return out[:count]


# --- helpers ---------------------------------------------------------------

def _tie_tol(energy: float) -> float:
    return 1e-12 * max(1.0, abs(energy))


def _state_bits(state: int, n: int) -> np.ndarray:
    return np.array([(state >> i) & 1 for i in range(n)], dtype=np.uint8)


def default_temperatures(model: QuadraticModel, p_eff: Optional[float] = None) -> tuple[float, float]:
    """``(max|q|, 1e-3 * p_eff**2)``; without ``p_eff`` the smallest nonzero |q| sets the cold end."""
    q = np.abs(model.matrix)
    t_hi = float(q.max()) if q.size else 1.0
    if t_hi == 0.0:
        t_hi = 1.0
    if p_eff is not None and p_eff > 0:
        t_lo = 1e-3 * p_eff**2
    else:
        nz = q[q > 0]
        t_lo = 1e-3 * float(nz.min()) if nz.size else 1e-3 * t_hi
    if t_lo >= t_hi:
        t_lo = 1e-3 * t_hi
    return t_hi, t_lo


def _betas(t_hi: float, t_lo: float, sweeps: int) -> np.ndarray:
    if sweeps == 1:
        return np.array([1.0 / t_lo])
    temps = t_hi * (t_lo / t_hi) ** (np.arange(sweeps) / (sweeps - 1))
    return 1.0 / temps


def _out_of_time(start: float, limit: Optional[float]) -> bool:
    return limit is not None and time.perf_counter() - start > limit


# --- exact -----------------------------------------------------------------

def brute_force(model: QuadraticModel) -> tuple[np.ndarray, float]:
    """Global minimum; ties go to the lexicographically smallest bit string."""
    n = model.n
    if n > BRUTE_FORCE_MAX_BITS:
        raise SolverError(f"brute force is limited to {BRUTE_FORCE_MAX_BITS} bits, model has {n}")
    if n == 0:
        return np.zeros(0, dtype=np.uint8), model.offset
    coupling, diag = model.symmetric()
    best = _gray_min(coupling, diag, n)
    # incremental sums drift; gather near-ties and settle them exactly
    scale = float(np.abs(model.matrix).sum()) + 1.0
    candidates = _gray_collect(coupling, diag, n, best + 1e-9 * scale, 1 << 16)
    scored = []
    for state in candidates.tolist():
        bits = _state_bits(state, n)
        scored.append((model.energy(bits), bits))
    e_min = min(e for e, _ in scored)
    ties = [bits for e, bits in scored if e <= e_min + _tie_tol(e_min)]
    winner = min(ties, key=lambda b: tuple(int(v) for v in b))
    return winner, model.energy(winner)


# --- stochastic samplers ---------------------------------------------------

def _constraint_arrays(cmodel: Optional[ConstrainedModel], lambdas, n: int):
    if cmodel is None:
        return (
            np.zeros((0, n, n)),
            np.zeros((0, n)),
            np.zeros(0),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
            np.zeros(0),
            np.zeros(0),
        )
    kinds = {ConstraintOp.EQ: 0, ConstraintOp.LE: 1, ConstraintOp.GE: 2}
    nc = len(cmodel.constraints)
    ccoup = np.zeros((nc, n, n))
    cdiag = np.zeros((nc, n))
    for c, con in enumerate(cmodel.constraints):
        ccoup[c], cdiag[c] = con.form.symmetric()
    return (
        ccoup,
        cdiag,
        np.array([con.form.offset for con in cmodel.constraints]),
        np.array([kinds[con.op] for con in cmodel.constraints], dtype=np.int64),
        np.array([con.rhs for con in cmodel.constraints]),
        np.array(cmodel.tolerances, dtype=float),
        np.asarray(lambdas, dtype=float),
    )


def _anneal(objective: QuadraticModel, config: SamplerConfig, t_hi: float, t_lo: float, carrays, energy_fn):
    n = objective.n
    coupling, diag = objective.symmetric()
    betas = _betas(t_hi, t_lo, config.sweeps)
    samples = []
    start = time.perf_counter()
    for read in range(config.num_reads):
        if read and _out_of_time(start, config.time_limit):
            break
        rng = np.random.default_rng(config.read_seed(read))
        x = rng.integers(0, 2, size=n, dtype=np.uint8)
        uniforms = rng.random((config.sweeps, n))
        x = _anneal_read(coupling, diag, x, betas, uniforms, *carrays)
        samples.append(Sample(x.copy(), energy_fn(x), read))
    return samples


def simulated_anneal(model: QuadraticModel, config: SamplerConfig, p_eff: Optional[float] = None) -> SampleSet:
    """One sample per read: the state left after the final sweep."""
    if model.n < 1:
        raise SamplerConfigError("model has no variables")
    d_hi, d_lo = default_temperatures(model, p_eff)
    t_hi = config.temperature_initial or d_hi
    t_lo = config.temperature_final or min(d_lo, 1e-3 * t_hi)
    if not t_hi > t_lo:
        raise SamplerConfigError("temperature_initial must exceed temperature_final")
    carrays = _constraint_arrays(None, None, model.n)
    samples = _anneal(model, config, t_hi, t_lo, carrays, model.energy)
    return SampleSet(samples, {"solver": "sa", "temperature_initial": t_hi, "temperature_final": t_lo})


def tabu_search(model: QuadraticModel, config: SamplerConfig) -> SampleSet:
    """Best-improvement tabu search; ``config.sweeps`` bounds the moves per read.

    Each read starts from a random state and reports the best state it
    visited.  With tenure 0 a read stops at the first local minimum.
    """
    n = model.n
    if n < 1:
        raise SamplerConfigError("model has no variables")
    tenure = config.tabu_tenure
    if tenure is None:
        tenure = max(1, min(20, n // 4))
    tenure = min(tenure, max(n - 1, 0))
    coupling, diag = model.symmetric()
    eps = 1e-13 * (float(np.abs(model.matrix).sum()) + 1.0)
    stall = max(100, 10 * n)
    samples = []
    start = time.perf_counter()
    for read in range(config.num_reads):
        if read and _out_of_time(start, config.time_limit):
            break
        rng = np.random.default_rng(config.read_seed(read))
        x = rng.integers(0, 2, size=n, dtype=np.uint8)
        best = _tabu_read(coupling, diag, x, config.sweeps, tenure, stall, eps)
        samples.append(Sample(best.copy(), model.energy(best), read))
    return SampleSet(samples, {"solver": "tabu", "tabu_tenure": tenure})


# --- adaptive penalty loop -------------------------------------------------

@dataclass
class ConstrainedResult:
    sample_set: SampleSet
    incumbent: Optional[Sample]
    lambda_history: list
    rounds: int

    @property
    def feasible(self) -> bool:
        return self.incumbent is not None


def initial_constraint_lambdas(cmodel: ConstrainedModel) -> list[float]:
    """Starting multipliers: a budget or linear excess of one lattice step
    costs ten times the largest one-step return gain; the variance excess is
    priced relative to the variance ceiling."""
    problem = cmodel.problem
    r_max = float(np.max(np.abs(problem.returns))) or 1.0
    p_eff = max(cmodel.tolerances[0], 1e-300)
    base = 10.0 * r_max / p_eff
    lams = []
    for con in cmodel.constraints:
        lams.append(base / problem.sigma2_target**2 if con.kind == "volatility" else base)
    return lams


def _round_lambda_scale(cmodel: ConstrainedModel, lambdas) -> float:
    scale = float(np.abs(cmodel.objective.matrix).max())
    for lam, con in zip(lambdas, cmodel.constraints):
        step = float(np.abs(np.diag(con.form.matrix)).max()) if con.form.n else 0.0
        scale = max(scale, lam * step * step)
    return scale or 1.0


def solve_constrained(
    cmodel: ConstrainedModel,
    config: SamplerConfig,
    eta: float = 2.0,
    max_rounds: int = 20,
    initial_lambdas: Optional[Sequence[float]] = None,
) -> ConstrainedResult:
    """Adaptive exterior-penalty annealing over natural-form constraints.

    Each round anneals ``objective + sum_c lambda_c * excess_c(x)**2`` where
    ``excess_c`` is how far constraint ``c`` lies outside its tolerance band
    (zero when it holds).  After a round, the multiplier of every constraint
    violated by the round's lowest-energy sample is multiplied by ``eta``.
    The loop stops after ``max_rounds`` or once the incumbent -- the
    feasible sample with the highest return seen so far -- survives a whole
    round unchanged.  Samples of all rounds are returned; each carries its
    round number and feasibility flag.
    """
    if not eta > 1.0:
        raise SamplerConfigError("eta must be > 1")
    if max_rounds < 1:
        raise SamplerConfigError("max_rounds must be >= 1")
    problem, layout = cmodel.problem, cmodel.layout
    lambdas = list(initial_lambdas) if initial_lambdas is not None else initial_constraint_lambdas(cmodel)
    if len(lambdas) != len(cmodel.constraints) or not all(l > 0 for l in lambdas):
        raise SamplerConfigError("need one positive multiplier per constraint")
    p_eff = cmodel.tolerances[0]
    returns = problem.returns

    history = [tuple(lambdas)]
    all_samples: list[Sample] = []
    incumbent: Optional[Sample] = None
    incumbent_key = None
    rounds = 0
    for rnd in range(max_rounds):
        rounds = rnd + 1
        carrays = _constraint_arrays(cmodel, lambdas, layout.total_bits)
        lam_now = list(lambdas)

        def energy_fn(x, lam_now=lam_now):
            return cmodel.penalized_energy(x, lam_now)

        t_hi = config.temperature_initial or _round_lambda_scale(cmodel, lambdas)
        t_lo = config.temperature_final or min(1e-3 * p_eff**2, 1e-3 * t_hi)
        round_cfg = replace(config, seed=derive_seed(config.seed, rnd))
        samples = _anneal(cmodel.objective, round_cfg, t_hi, t_lo, carrays, energy_fn)

        reports = []
        for s in samples:
            s.round = rnd
            w, _ = decode_solution(s.bits, layout, problem)
            report = check_constraints(w, {}, problem, layout)
            s.feasible = report.not_satisfied == 0
            reports.append(report)
            if s.feasible:
                key = (-float(returns @ w), tuple(int(b) for b in s.bits))
                if incumbent_key is None or key < incumbent_key:
                    incumbent, incumbent_key = s, key
        all_samples.extend(samples)

        best_idx = min(range(len(samples)), key=lambda i: samples[i].key)
        violated = {e.label for e in reports[best_idx].entries if not e.satisfied}
        for c, con in enumerate(cmodel.constraints):
            if con.label in violated:
                lambdas[c] *= eta
        history.append(tuple(lambdas))
        if incumbent is not None and incumbent.round != rnd:
            break

    info = {"solver": "constrained", "rounds": rounds, "eta": eta}
    return ConstrainedResult(SampleSet(all_samples, info), incumbent, history, rounds)


# --- continuous benchmark --------------------------------------------------

@njit(cache=True)
def _project(v, lo, hi):
    """Euclidean projection onto ``{lo <= w <= hi, sum(w) = 1}``.

    The projection is ``clip(v - tau)`` for the shift ``tau`` that meets the
    budget; ``tau`` is found by bisection, then the leftover budget is put
    on the interior coordinates so the sum is exact.
    """
    n = v.shape[0]
    a = np.inf
    b = -np.inf
    for i in range(n):
        a = min(a, v[i] - hi[i])
        b = max(b, v[i] - lo[i])
    w = np.empty(n)
    for _ in range(200):
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        total = 0.0
        for i in range(n):
            total += min(max(v[i] - mid, lo[i]), hi[i])
        if total > 1.0:
            a = mid
        else:
            b = mid
    mid = 0.5 * (a + b)
    total = 0.0
    n_free = 0
    for i in range(n):
        w[i] = min(max(v[i] - mid, lo[i]), hi[i])
        total += w[i]
        if lo[i] < w[i] < hi[i]:
            n_free += 1
    if n_free > 0:
        shift = (1.0 - total) / n_free
        for i in range(n):
            if lo[i] < w[i] < hi[i]:
                w[i] = min(max(w[i] + shift, lo[i]), hi[i])
    return w


@dataclass(frozen=True)
class ReferenceSolution:
    weights: np.ndarray
    expected_return: float
    volatility: float
    risk_multiplier: float
    kkt_residual: float
    iterations: int
    iteration_cap: int
    bisection_steps: int


class _InnerSolver:
    """Maximize ``r.w - mu w^T S w`` over box, budget and linear rows (augmented Lagrangian)."""

    def __init__(self, problem: Problem, cap: int, tol: float):
        self.r = problem.returns
        self.sigma = np.asarray(problem.covariance)
        self.lo, self.hi = problem.weight_min, problem.weight_max
        a, ops, b = problem.constraint_matrix()
        self.a = a
        self.sign = np.array([{ConstraintOp.LE: 1.0, ConstraintOp.GE: -1.0, ConstraintOp.EQ: 0.0}[o] for o in ops])
        # inequalities are solved against a slightly tightened rhs so the
        # returned point meets them strictly despite multiplier round-off
        beta = np.array(
            [
                (bj - np.minimum(aj * self.lo, aj * self.hi).sum()) if s > 0
                else (np.maximum(aj * self.lo, aj * self.hi).sum() - bj) if s < 0
                else np.inf
                for aj, bj, s in zip(a, b, self.sign)
            ]
        )
        margin = np.where(self.sign != 0, np.minimum(1e-10, 0.5 * np.maximum(beta, 0.0)), 0.0)
        self.b = b - self.sign * margin
        self.nu = np.zeros(len(b))
        self.lam_max = float(np.linalg.eigvalsh(self.sigma)[-1]) if self.sigma.size else 0.0
        self.a_norm = float((a**2).sum())
        self.rho = 10.0 * (float(np.abs(self.r).max()) + 1.0)
        self.cap = cap
        self.tol = tol
        self.iterations = 0

    def _g(self, w):
        """Constraint functions oriented so that ``g <= 0`` (or ``== 0``) is feasible."""
        raw = self.a @ w - self.b
        return np.where(self.sign < 0, -raw, raw)

    def _orient(self):
        return np.where(self.sign < 0, -1.0, 1.0)

    def _grad(self, w, mu):
        grad = self.r - 2.0 * mu * (self.sigma @ w)
        if self.a.size:
            g = self._g(w)
            psi = g + self.nu / self.rho
            psi = np.where(self.sign != 0, np.maximum(psi, 0.0), psi)
            grad = grad - self.rho * ((psi * self._orient()) @ self.a)
        return grad

    def _lipschitz(self, mu):
        return max(2.0 * mu * self.lam_max + self.rho * self.a_norm, float(np.linalg.norm(self.r)), 1e-12)

    def _stationarity(self, w, mu, lip) -> float:
        return lip * float(np.max(np.abs(w - _project(w + self._grad(w, mu) / lip, self.lo, self.hi))))

    def _fista(self, w, mu):
        lip = self._lipschitz(mu)
        y, t, prev = w.copy(), 1.0, w.copy()
        for it in range(self.cap):
            self.iterations += 1
            grad = self._grad(y, mu)
            w = _project(y + grad / lip, self.lo, self.hi)
            step = w - prev
            if np.dot(step, grad) < 0:
                # adaptive restart
                t, y = 1.0, w.copy()
            else:
                t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
                y = w + ((t - 1.0) / t_next) * step
                t = t_next
            if it % 10 == 0 and self._stationarity(w, mu, lip) <= 0.1 * self.tol:
                return w
            prev = w
        raise ReferenceSolveError(f"projected gradient did not converge within {self.cap} steps")

    def solve(self, w, mu):
        if not self.a.size:
            return self._fista(w, mu)
        for _ in range(200):
            w = self._fista(w, mu)
            g = self._g(w)
            viol = np.where(self.sign != 0, np.maximum(g, 0.0), np.abs(g))
            self.nu = self.nu + self.rho * g
            self.nu = np.where(self.sign != 0, np.maximum(self.nu, 0.0), self.nu)
            if viol.max() <= 1e-13:
                return w
        raise ReferenceSolveError("linear constraints could not be met (infeasible or not converged)")

    def kkt_residual(self, w, mu) -> float:
        grad = self.r - 2.0 * mu * (self.sigma @ w)
        if self.a.size:
            grad = grad - (self.nu * self._orient()) @ self.a
        lip = self._lipschitz(mu)
        stat = lip * float(np.max(np.abs(w - _project(w + grad / lip, self.lo, self.hi))))
        g = self._g(w)
        feas = float(np.max(np.where(self.sign != 0, np.maximum(g, 0.0), np.abs(g)), initial=0.0))
        comp = float(np.max(np.abs(np.where(self.sign != 0, self.nu * g, 0.0)), initial=0.0))
        return max(stat, feas, comp)


def reference_continuous(
    problem: Problem,
    tolerance: float = 1e-8,
    *,
    iteration_cap: int = 100_000,
    bisection_steps: int = 60,
) -> ReferenceSolution:
    """Continuous maximum of ``r.w`` under box, budget, linear and variance constraints.

    The variance constraint is handled by bisection on its multiplier ``mu``:
    for fixed ``mu`` the concave problem ``max r.w - mu w^T S w`` is solved by
    accelerated projected gradient over box and budget, with the remaining
    linear constraints in an augmented Lagrangian.  The returned point is the
    one on the feasible side of the bracket.
    """
    inner = _InnerSolver(problem, iteration_cap, tolerance)
    sigma2 = problem.sigma2_target
    lo, hi = problem.weight_min, problem.weight_max
    w0 = _project(0.5 * (lo + hi), lo, hi)

    def var(w):
        return float(w @ problem.covariance @ w)

    w = inner.solve(w0, 0.0)
    mu = 0.0
    if var(w) > sigma2:
        lo_mu, hi_mu = 0.0, 1.0
        w_hi = inner.solve(w, hi_mu)
        grow = 0
        while var(w_hi) > sigma2:
            lo_mu, hi_mu = hi_mu, hi_mu * 4.0
            w_hi = inner.solve(w_hi, hi_mu)
            grow += 1
            if grow > 60:
                raise ReferenceSolveError("variance ceiling is below the minimum attainable variance")
        nu_hi = inner.nu.copy()
        w_mid = w_hi
        for _ in range(bisection_steps):
            mid = 0.5 * (lo_mu + hi_mu)
            if not lo_mu < mid < hi_mu:
                break
            w_mid = inner.solve(w_hi, mid)
            if var(w_mid) > sigma2:
                lo_mu = mid
            else:
                hi_mu, w_hi, nu_hi = mid, w_mid, inner.nu.copy()
        inner.nu = nu_hi
        w, mu = w_hi, hi_mu
    residual = inner.kkt_residual(w, mu)
    if mu > 0:
        residual = max(residual, mu * max(0.0, sigma2 - var(w)))
    if var(w) > sigma2 or residual > tolerance:
        raise ReferenceSolveError(f"no KKT point within tolerance (residual {residual:.3e})")
    return ReferenceSolution(
        weights=w,
        expected_return=float(problem.returns @ w),
        volatility=var(w),
        risk_multiplier=mu,
        kkt_residual=residual,
        iterations=inner.iterations,
        iteration_cap=iteration_cap,
        bisection_steps=bisection_steps,
    )
