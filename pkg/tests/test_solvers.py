import numpy as np
import pytest
from scipy.optimize import minimize

from conftest import random_problem, toy_problem
from oracles import brute_force_by_enumeration, enumerate_feasible_optimum
from qubo_portfolio.analysis import check_constraints
from qubo_portfolio.compiler import QuadraticModel, build_constrained
from qubo_portfolio.encoding import build_layout, decode_solution, max_effective_granularity
from qubo_portfolio.model import LinearConstraint, make_problem
from qubo_portfolio.solvers import (
    BRUTE_FORCE_MAX_BITS,
    ReferenceSolveError,
    Sample,
    SampleSet,
    SamplerConfig,
    SamplerConfigError,
    SolverError,
    brute_force,
    default_temperatures,
    derive_seed,
    initial_constraint_lambdas,
    reference_continuous,
    simulated_anneal,
    solve_constrained,
    tabu_search,
)

MASK = (1 << 64) - 1


class SplitMix64:
    """Textbook generator: the state advances by the golden gamma before mixing."""

    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)


def random_qubo(rng, n):
    return QuadraticModel(n, np.triu(rng.normal(size=(n, n))), float(rng.normal()))


def test_derive_seed_is_splitmix_stream():
    for seed in (0, 1, 12345, MASK):
        gen = SplitMix64(seed)
        assert [derive_seed(seed, i) for i in range(5)] == [gen.next() for _ in range(5)]
    # published first output of SplitMix64 seeded with 0
    assert derive_seed(0, 0) == 0xE220A8397B1DCDAF


def test_sampler_config_validation():
    for kwargs in (
        {"num_reads": 0},
        {"sweeps": 0},
        {"temperature_final": 0.0},
        {"temperature_initial": 1.0, "temperature_final": 2.0},
        {"tabu_tenure": -1},
        {"time_limit": 0.0},
    ):
        with pytest.raises(SamplerConfigError):
            SamplerConfig(**kwargs)
    cfg = SamplerConfig(seed=7)
    assert cfg.read_seed(3) == 7 ^ 3
    assert cfg.to_dict()["seed"] == 7


@pytest.mark.parametrize("seed", range(6))
def test_brute_force_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    model = random_qubo(rng, int(rng.integers(1, 11)))
    bits, energy = brute_force(model)
    ref_bits, ref_energy = brute_force_by_enumeration(model.matrix, model.offset)
    assert tuple(bits) == ref_bits
    assert energy == pytest.approx(ref_energy, abs=1e-12)


def test_brute_force_ties_and_guard():
    # x0 and x1 are interchangeable; the lexicographically smallest minimizer wins
    model = QuadraticModel.from_dict(3, {(0, 0): -1.0, (1, 1): -1.0, (0, 1): 2.0})
    bits, energy = brute_force(model)
    assert bits.tolist() == [0, 1, 0] and energy == -1.0
    zero_bits, zero_e = brute_force(QuadraticModel(4, offset=2.5))
    assert zero_bits.tolist() == [0, 0, 0, 0] and zero_e == 2.5
    with pytest.raises(SolverError):
        brute_force(QuadraticModel(BRUTE_FORCE_MAX_BITS + 1))


def test_default_temperatures():
    model = QuadraticModel.from_dict(2, {(0, 0): -4.0, (0, 1): 0.5})
    assert default_temperatures(model) == (4.0, 5e-4)
    assert default_temperatures(model, 0.01) == (4.0, pytest.approx(1e-7))


@pytest.mark.parametrize("sampler", [simulated_anneal, tabu_search])
def test_samplers_are_deterministic_and_consistent(sampler):
    rng = np.random.default_rng(0)
    model = random_qubo(rng, 14)
    cfg = SamplerConfig(seed=11, num_reads=8, sweeps=300)
    a, b = sampler(model, cfg), sampler(model, cfg)
    assert [s.key for s in a] == [s.key for s in b]
    c = sampler(model, SamplerConfig(seed=12, num_reads=8, sweeps=300))
    assert [s.bit_string for s in a] != [s.bit_string for s in c] or a.first.energy == c.first.energy
    assert len(a) == 8 and sorted(s.read for s in a) == list(range(8))
    for s in a:
        assert s.energy == pytest.approx(model.energy(s.bits), abs=1e-12)
    energies = [s.energy for s in a]
    assert energies == sorted(energies)


@pytest.mark.parametrize("sampler", [simulated_anneal, tabu_search])
def test_samplers_find_small_optimum(sampler):
    rng = np.random.default_rng(5)
    model = random_qubo(rng, 12)
    _, e_opt = brute_force(model)
    result = sampler(model, SamplerConfig(seed=3, num_reads=20, sweeps=2000))
    hits = sum(abs(s.energy - e_opt) <= 1e-9 for s in result)
    assert hits >= 18


def test_tabu_tenure_zero_stops_in_local_minimum():
    rng = np.random.default_rng(2)
    model = random_qubo(rng, 10)
    result = tabu_search(model, SamplerConfig(seed=1, num_reads=10, sweeps=500, tabu_tenure=0))
    for s in result:
        for i in range(model.n):
            y = s.bits.copy()
            y[i] ^= 1
            assert model.energy(y) >= s.energy - 1e-12


def test_time_limit_keeps_at_least_one_read():
    model = random_qubo(np.random.default_rng(1), 8)
    result = simulated_anneal(model, SamplerConfig(num_reads=1000, sweeps=1000, time_limit=1e-9))
    assert 1 <= len(result) < 1000


def test_sample_set_csv_roundtrip(tmp_path):
    samples = [Sample(np.array([1, 0, 1], dtype=np.uint8), -1.5, 0, 0, True), Sample(np.array([0, 0, 1], dtype=np.uint8), -2.0, 1, 2, None)]
    ss = SampleSet(samples)
    assert ss.first.read == 1
    path = tmp_path / "s.csv"
    ss.to_csv(path)
    assert path.read_text().splitlines() == ["read,round,energy,bits,feasible", "1,2,-2.0,001,", "0,0,-1.5,101,1"]
    back = SampleSet.from_csv(path)
    assert [(s.key, s.read, s.round, s.feasible) for s in back] == [(s.key, s.read, s.round, s.feasible) for s in ss]


def test_solve_constrained_recovers_enumerated_optimum():
    p = toy_problem(4)
    layout = build_layout(p, 3, with_slack=False)
    cm = build_constrained(p, layout)
    res = solve_constrained(cm, SamplerConfig(seed=4, num_reads=30, sweeps=1000))
    best, _ = enumerate_feasible_optimum(p, 3)
    assert res.feasible
    w, _ = decode_solution(res.incumbent.bits, layout, p)
    assert check_constraints(w, {}, p, layout).not_satisfied == 0
    assert float(p.returns @ w) == pytest.approx(best, abs=max_effective_granularity(p, 3) * p.returns.max())
    assert 1 <= res.rounds <= 20 and len(res.lambda_history) == res.rounds + 1
    for before, after in zip(res.lambda_history, res.lambda_history[1:]):
        assert all(b2 >= b1 for b1, b2 in zip(before, after))
    assert {s.round for s in res.sample_set} == set(range(res.rounds))
    assert all(s.feasible is not None for s in res.sample_set)


def test_solve_constrained_validation(toy):
    layout = build_layout(toy, 3, with_slack=False)
    cm = build_constrained(toy, layout)
    with pytest.raises(SamplerConfigError):
        solve_constrained(cm, SamplerConfig(), eta=1.0)
    with pytest.raises(SamplerConfigError):
        solve_constrained(cm, SamplerConfig(), max_rounds=0)
    with pytest.raises(SamplerConfigError):
        solve_constrained(cm, SamplerConfig(), initial_lambdas=[1.0])
    lams = initial_constraint_lambdas(cm)
    r_max = np.max(np.abs(toy.returns))
    p_eff = max_effective_granularity(toy, 3)
    assert lams[0] == pytest.approx(10 * r_max / p_eff)
    assert lams[-1] == pytest.approx(10 * r_max / p_eff / toy.sigma2_target**2)


def _slsqp(problem):
    cons = [
        {"type": "eq", "fun": lambda w: w.sum() - 1.0},
        {"type": "ineq", "fun": lambda w: problem.sigma2_target - w @ problem.covariance @ w},
    ]
    for c in problem.multi_constraints:
        a = np.array(c.coefficients)
        if c.op.value == "le":
            cons.append({"type": "ineq", "fun": lambda w, a=a, b=c.rhs: b - a @ w})
        elif c.op.value == "ge":
            cons.append({"type": "ineq", "fun": lambda w, a=a, b=c.rhs: a @ w - b})
        else:
            cons.append({"type": "eq", "fun": lambda w, a=a, b=c.rhs: a @ w - b})
    bounds = list(zip(problem.weight_min, problem.weight_max))
    x0 = np.full(problem.n_assets, 1.0 / problem.n_assets)
    res = minimize(lambda w: -problem.returns @ w, x0, bounds=bounds, constraints=cons, method="SLSQP", options={"ftol": 1e-14, "maxiter": 1000})
    return res.x, -res.fun


@pytest.mark.parametrize("seed", range(5))
def test_reference_matches_slsqp(seed):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, int(rng.integers(2, 6)), n_constraints=int(rng.integers(0, 2)))
    ref = reference_continuous(p)
    _, ret = _slsqp(p)
    assert ref.expected_return == pytest.approx(ret, abs=1e-6)
    assert ref.kkt_residual <= 1e-8
    layout = build_layout(p, 10)
    assert check_constraints(ref.weights, {}, p, layout).not_satisfied == 0


def test_reference_loose_ceiling_fills_best_assets():
    cov = np.diag([0.01, 0.02, 0.03])
    p = make_problem([0.05, 0.10, 0.02], cov, 1.0, bounds=(0.0, 0.7))
    ref = reference_continuous(p)
    assert ref.risk_multiplier == 0.0
    assert ref.weights == pytest.approx([0.3, 0.7, 0.0], abs=1e-10)


def test_reference_infeasible_ceiling_raises():
    cov = np.diag([0.01, 0.02])
    p = make_problem([0.05, 0.10], cov, 1e-4)
    with pytest.raises(ReferenceSolveError):
        reference_continuous(p)
    q = make_problem([0.05, 0.10], cov, 0.02, constraints=[LinearConstraint((1, 0), "eq", 0.5)])
    ref = reference_continuous(q)
    assert ref.weights == pytest.approx([0.5, 0.5], abs=1e-10)


def test_reference_two_asset_corner_and_symmetry():
    cov = np.eye(2) * 0.01
    corner = reference_continuous(make_problem([0.1, 0.05], cov, 10.0))
    assert corner.weights == pytest.approx([1.0, 0.0], abs=1e-10)
    sym = reference_continuous(make_problem([0.07, 0.07], cov, 0.006))
    assert sym.weights == pytest.approx([0.5, 0.5], abs=1e-9)


def test_brute_force_beats_random_strings():
    rng = np.random.default_rng(9)
    model = random_qubo(rng, 12)
    _, e_opt = brute_force(model)
    xs = rng.integers(0, 2, (10_000, 12))
    assert e_opt <= model.energies(xs).min() + 1e-12


def test_constrained_early_stop_keeps_lambdas():
    # loose ceiling and no linear rows: the lowest-energy sample of round 0 is feasible
    cov = np.diag([0.01, 0.02, 0.015])
    p = make_problem([0.05, 0.08, 0.03], cov, 1.0, bounds=(0.0, 0.6))
    layout = build_layout(p, 3, with_slack=False)
    res = solve_constrained(build_constrained(p, layout), SamplerConfig(seed=0, num_reads=10, sweeps=500))
    assert res.feasible and res.rounds <= 2
    assert all(h == res.lambda_history[0] for h in res.lambda_history)
