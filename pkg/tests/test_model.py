import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qubo_portfolio.model import (
    Asset,
    ConstraintOp,
    LinearConstraint,
    Problem,
    ProblemError,
    ValidationError,
    generate_instance,
    load_problem,
    make_problem,
    portfolio_return,
    portfolio_variance,
    problem_from_dict,
    problem_to_dict,
    save_problem,
)


def test_asset_box_checks():
    with pytest.raises(ValidationError):
        Asset("a", "EQ", 0.1, 0.6, 0.5)
    with pytest.raises(ValidationError):
        Asset("a", "EQ", 0.1, -0.1, 0.5)
    with pytest.raises(ValidationError):
        Asset("a", "EQ", float("nan"), 0.0, 0.5)
    assert Asset("a", "FI", 0.1, 0.2, 0.5).delta == pytest.approx(0.3)


def test_constraint_residual_and_ops():
    w = [0.3, 0.4, 0.3]
    le = LinearConstraint((1, 1, 0), "le", 0.7)
    assert le.residual(w) == pytest.approx(0.0, abs=1e-15)
    assert le.is_satisfied(w)
    assert not LinearConstraint((1, 1, 0), "le", 0.6).is_satisfied(w)
    assert LinearConstraint((1, 0, 0), "ge", 0.3).is_satisfied(w)
    assert not LinearConstraint((1, 0, 0), "eq", 0.31).is_satisfied(w)
    with pytest.raises(ValidationError):
        LinearConstraint((0, 0, 0), "le", 1.0)


def test_problem_validation():
    cov = np.eye(2) * 0.01
    ok = make_problem([0.1, 0.05], cov, 0.01)
    assert ok.n_assets == 2
    with pytest.raises(ValidationError, match="symmetric"):
        make_problem([0.1, 0.05], [[0.01, 0.002], [0.0, 0.01]], 0.01)
    with pytest.raises(ValidationError, match="semidefinite"):
        make_problem([0.1, 0.05], [[0.01, 0.02], [0.02, 0.01]], 0.01)
    with pytest.raises(ValidationError, match="normalization"):
        make_problem([0.1, 0.05], cov, 0.01, bounds=(0.0, 0.4))
    with pytest.raises(ValidationError, match="normalization"):
        make_problem([0.1, 0.05], cov, 0.01, bounds=(0.6, 1.0))
    with pytest.raises(ValidationError, match="sigma2"):
        make_problem([0.1, 0.05], cov, 0.0)
    with pytest.raises(ValidationError, match="coefficients"):
        make_problem([0.1, 0.05], cov, 0.01, constraints=[LinearConstraint((1, 1, 1), "le", 1)])


def test_covariance_is_read_only():
    p = make_problem([0.1, 0.05], np.eye(2) * 0.01, 0.01)
    with pytest.raises(ValueError):
        p.covariance[0, 0] = 1.0


def test_kpi_helpers_by_hand():
    cov = [[0.04, 0.01], [0.01, 0.09]]
    p = make_problem([0.1, 0.05], cov, 0.05)
    w = [0.25, 0.75]
    assert portfolio_return(w, p) == pytest.approx(0.1 * 0.25 + 0.05 * 0.75)
    expected = 0.04 * 0.0625 + 2 * 0.01 * 0.25 * 0.75 + 0.09 * 0.5625
    assert portfolio_variance(w, p) == pytest.approx(expected)
    with pytest.raises(ValueError):
        portfolio_return([1.0], p)


def test_file_roundtrip(tmp_path, toy):
    path = tmp_path / "p.json"
    save_problem(toy, path)
    back = load_problem(path)
    assert back == toy
    assert np.array_equal(back.covariance, toy.covariance)


def test_file_errors(tmp_path, toy):
    with pytest.raises(FileNotFoundError):
        load_problem(tmp_path / "missing.json")
    data = problem_to_dict(toy)
    text = json.dumps(data).replace(str(data["sigma2_target"]), "NaN", 1)
    bad = tmp_path / "nan.json"
    bad.write_text(text)
    with pytest.raises(ProblemError, match="non-finite"):
        load_problem(bad)
    data["assets"][1]["min"] = 0.9
    with pytest.raises(ValidationError, match="asset 1"):
        problem_from_dict(data)
    with pytest.raises(ProblemError):
        problem_from_dict({"assets": []})
    junk = tmp_path / "junk.json"
    junk.write_text("[1, 2]")
    with pytest.raises(ProblemError):
        load_problem(junk)


def test_generate_instance_properties():
    p = generate_instance(10, 3, 5)
    q = generate_instance(10, 3, 5)
    assert p == q
    assert p != generate_instance(10, 3, 6)
    assert np.all(p.weight_max == 0.2)  # widened: 10 * 0.1 < 2
    w = np.full(10, 0.1)
    assert portfolio_variance(w, p) == pytest.approx(p.sigma2_target)
    big = generate_instance(30, 3, 1)
    assert np.all(big.weight_max == 0.1)
    c = generate_instance(10, 3, 5, class_constraints=True)
    assert [con.op for con in c.multi_constraints] == [ConstraintOp.LE, ConstraintOp.GE, ConstraintOp.LE]
    with pytest.raises(ValueError):
        generate_instance(3, 4, 0)


def test_problem_equality_is_structural():
    a = make_problem([0.1, 0.05], np.eye(2) * 0.01, 0.01)
    b = make_problem([0.1, 0.05], np.eye(2) * 0.01, 0.01)
    assert a == b and a is not b
    assert (a == "x") is False


finite = st.floats(-0.5, 0.5, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=2, max_size=6), st.floats(1e-6, 1.0))
def test_roundtrip_preserves_every_float(returns, s2):
    n = len(returns)
    cov = np.diag(np.linspace(0.01, 0.02, n))
    p = make_problem(returns, cov, s2)
    back = problem_from_dict(json.loads(json.dumps(problem_to_dict(p))))
    assert back == p
    assert all(math.copysign(1, a.mean_return) == math.copysign(1, b.mean_return) for a, b in zip(p.assets, back.assets))
