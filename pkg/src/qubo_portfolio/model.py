"""Portfolio problem definition, validation, file I/O and synthetic instances.

A :class:`Problem` holds everything the Markowitz-style allocation needs:
per-asset returns and weight boxes, the return covariance, the variance
ceiling and any additional multi-asset linear constraints.  Vectors and
matrices are always indexed in asset order.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "AssetClass",
    "ConstraintOp",
    "Asset",
    "LinearConstraint",
    "Problem",
    "ProblemError",
    "ValidationError",
    "load_problem",
    "save_problem",
    "problem_from_dict",
    "problem_to_dict",
    "portfolio_return",
    "portfolio_variance",
    "generate_instance",
    "is_psd",
    "make_problem",
]


class ProblemError(ValueError):
    """Raised when a problem file cannot be parsed."""


class ValidationError(ProblemError):
    """Raised when a problem violates one of its invariants."""


class AssetClass(str, enum.Enum):
    EQ = "EQ"
    FI = "FI"
    MM = "MM"


class ConstraintOp(str, enum.Enum):
    EQ = "eq"
    LE = "le"
    GE = "ge"


@dataclass(frozen=True)
class Asset:
    name: str
    asset_class: AssetClass
    mean_return: float
    weight_min: float = 0.0
    weight_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "asset_class", AssetClass(self.asset_class))
        for attr in ("mean_return", "weight_min", "weight_max"):
            value = float(getattr(self, attr))
            if not math.isfinite(value):
                raise ValidationError(f"asset {self.name!r}: {attr} must be finite")
            object.__setattr__(self, attr, value)
        if self.weight_min < 0:
            raise ValidationError(f"asset {self.name!r}: weight_min < 0")
        if self.weight_max > 1:
            raise ValidationError(f"asset {self.name!r}: weight_max > 1")
        if self.weight_min > self.weight_max:
            raise ValidationError(f"asset {self.name!r}: weight_min > weight_max")

    @property
    def delta(self) -> float:
        return self.weight_max - self.weight_min


@dataclass(frozen=True)
class LinearConstraint:
    """Multi-asset condition ``coefficients . w  <op>  rhs``."""

    coefficients: tuple[float, ...]
    op: ConstraintOp
    rhs: float
    label: str = ""

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        if not all(math.isfinite(c) for c in coeffs) or not math.isfinite(float(self.rhs)):
            raise ValidationError("constraint coefficients and rhs must be finite")
        if not any(c != 0.0 for c in coeffs):
            raise ValidationError("constraint has no nonzero coefficient")
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "op", ConstraintOp(self.op))
        object.__setattr__(self, "rhs", float(self.rhs))

    def residual(self, weights) -> float:
        """``a . w - b``; the sign convention does not depend on ``op``."""
        return math.fsum(a * w for a, w in zip(self.coefficients, weights)) - self.rhs

    def is_satisfied(self, weights, tol: float = 1e-12) -> bool:
        res = self.residual(weights)
        if self.op is ConstraintOp.EQ:
            return abs(res) <= tol
        if self.op is ConstraintOp.LE:
            return res <= tol
        return res >= -tol


def is_psd(matrix: np.ndarray, rel_tol: float = 1e-10) -> bool:
    """Smallest eigenvalue is at least ``-rel_tol * trace``."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.size == 0:
        return True
    lo = np.linalg.eigvalsh(matrix)[0]
    return bool(lo >= -rel_tol * max(float(np.trace(matrix)), 0.0))


@dataclass(frozen=True, eq=False)
class Problem:
    """Validated, immutable portfolio problem.

    ``covariance`` is stored as a read-only float array; ``multi_constraints``
    excludes the normalization and the single-asset boxes, which are carried
    by the assets themselves.
    """

    assets: tuple[Asset, ...]
    covariance: np.ndarray
    sigma2_target: float
    multi_constraints: tuple[LinearConstraint, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        object.__setattr__(self, "multi_constraints", tuple(self.multi_constraints))
        cov = np.array(self.covariance, dtype=float)
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "sigma2_target", float(self.sigma2_target))
        self.validate()

    def validate(self) -> None:
        n = len(self.assets)
        if n == 0:
            raise ValidationError("problem has no assets")
        names = [a.name for a in self.assets]
        if len(set(names)) != n:
            raise ValidationError("asset names are not unique")
        cov = self.covariance
        if cov.shape != (n, n):
            raise ValidationError(f"covariance must be {n}x{n}, got {cov.shape}")
        if not np.all(np.isfinite(cov)):
            raise ValidationError("covariance contains non-finite entries")
        scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValidationError("covariance is not symmetric")
        if not is_psd(cov):
            raise ValidationError("covariance is not positive semidefinite")
        if not (math.isfinite(self.sigma2_target) and self.sigma2_target > 0):
            raise ValidationError("sigma2_target must be a positive finite number")
        for j, con in enumerate(self.multi_constraints):
            if len(con.coefficients) != n:
                raise ValidationError(
                    f"constraint {j}: expected {n} coefficients, got {len(con.coefficients)}"
                )
        lo = math.fsum(a.weight_min for a in self.assets)
        hi = math.fsum(a.weight_max for a in self.assets)
        if not lo <= 1.0 <= hi:
            raise ValidationError(
                f"normalization infeasible within the boxes: sum(min)={lo}, sum(max)={hi}"
            )

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def returns(self) -> np.ndarray:
        return np.array([a.mean_return for a in self.assets])

    @property
    def weight_min(self) -> np.ndarray:
        return np.array([a.weight_min for a in self.assets])

    @property
    def weight_max(self) -> np.ndarray:
        return np.array([a.weight_max for a in self.assets])

    @property
    def delta(self) -> np.ndarray:
        return self.weight_max - self.weight_min

    def constraint_matrix(self) -> tuple[np.ndarray, list[ConstraintOp], np.ndarray]:
        """Return ``(A, ops, b)`` for the multi-asset constraints."""
        n = self.n_assets
        a = np.array([c.coefficients for c in self.multi_constraints], dtype=float).reshape(-1, n)
        b = np.array([c.rhs for c in self.multi_constraints], dtype=float)
        return a, [c.op for c in self.multi_constraints], b

    def __eq__(self, other):
        if not isinstance(other, Problem):
            return NotImplemented
        return (
            self.assets == other.assets
            and self.sigma2_target == other.sigma2_target
            and self.multi_constraints == other.multi_constraints
            and np.array_equal(self.covariance, other.covariance)
        )

    __hash__ = None


def _check_weights(weights, problem: Problem) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (problem.n_assets,):
        raise ValueError(f"expected {problem.n_assets} weights, got shape {w.shape}")
    return w


def portfolio_return(weights, problem: Problem) -> float:
    w = _check_weights(weights, problem)
    return float(problem.returns @ w)


def portfolio_variance(weights, problem: Problem) -> float:
    w = _check_weights(weights, problem)
    return float(w @ problem.covariance @ w)


# --- file format -----------------------------------------------------------

def problem_to_dict(problem: Problem) -> dict:
    return {
        "assets": [
            {
                "name": a.name,
                "class": a.asset_class.value,
                "ret": a.mean_return,
                "min": a.weight_min,
                "max": a.weight_max,
            }
            for a in problem.assets
        ],
        "covariance": problem.covariance.tolist(),
        "sigma2_target": problem.sigma2_target,
        "constraints": [
            {"coeffs": list(c.coefficients), "op": c.op.value, "rhs": c.rhs, "label": c.label}
            for c in problem.multi_constraints
        ],
    }


def _reject_constant(token):
    raise ProblemError(f"non-finite number {token!r} is not permitted")


def problem_from_dict(data: dict) -> Problem:
    try:
        assets = []
        for i, item in enumerate(data["assets"]):
            try:
                assets.append(
                    Asset(
                        name=str(item["name"]),
                        asset_class=item.get("class", "EQ"),
                        mean_return=item["ret"],
                        weight_min=item.get("min", 0.0),
                        weight_max=item.get("max", 1.0),
                    )
                )
            except ValidationError as exc:
                raise ValidationError(f"asset {i}: {exc}") from None
        constraints = []
        for j, item in enumerate(data.get("constraints", [])):
            try:
                constraints.append(
                    LinearConstraint(
                        coefficients=item["coeffs"],
                        op=str(item["op"]).lower(),
                        rhs=item["rhs"],
                        label=str(item.get("label") or f"multi_{j}"),
                    )
                )
            except ValidationError as exc:
                raise ValidationError(f"constraint {j}: {exc}") from None
        return Problem(
            assets=assets,
            covariance=data["covariance"],
            sigma2_target=data["sigma2_target"],
            multi_constraints=constraints,
        )
    except ProblemError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemError(f"malformed problem data: {exc!r}") from exc


def load_problem(path) -> Problem:
    """Read and validate a JSON problem file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ProblemError(f"{path}: top-level JSON value must be an object")
    return problem_from_dict(data)


def save_problem(problem: Problem, path) -> None:
    # repr-based float serialization round-trips doubles exactly
    Path(path).write_text(
        json.dumps(problem_to_dict(problem), indent=2, allow_nan=False) + "\n", encoding="utf-8"
    )


# --- synthetic instances ---------------------------------------------------

_CLASS_CYCLE = (AssetClass.EQ, AssetClass.FI, AssetClass.MM)


def generate_instance(
    n_assets: int,
    n_factors: int,
    seed: int,
    *,
    class_constraints: bool = False,
) -> Problem:
    """Random factor-model instance for scaling studies.

    Covariance is ``F F^T + diag(noise)`` with Gaussian loadings, returns are
    uniform in [-0.02, 0.10] and every box is [0, 0.1].  When the boxes leave
    too little room for the budget (``N * 0.1 < 2``) they are widened to
    ``[0, min(1, 2/N)]``.  The variance ceiling is the variance of the
    equal-weight portfolio, which is always inside the boxes.

    With ``class_constraints`` three asset-class limits are added
    (EQ <= 0.5, FI >= 0.2, MM <= 0.4); classes are assigned cyclically.
    """
    if n_assets < 1 or n_factors < 1 or n_factors > n_assets:
        raise ValueError("need 1 <= n_factors <= n_assets")
    rng = np.random.default_rng(seed)
    loadings = rng.normal(0.0, 0.08, size=(n_assets, n_factors))
    noise = rng.uniform(1e-3, 1e-2, size=n_assets)
    cov = loadings @ loadings.T + np.diag(noise)
    cov = 0.5 * (cov + cov.T)
    returns = rng.uniform(-0.02, 0.10, size=n_assets)

    upper = 0.1 if n_assets * 0.1 >= 2 else min(1.0, 2.0 / n_assets)
    classes = [_CLASS_CYCLE[i % 3] for i in range(n_assets)]
    assets = [
        Asset(f"A{i:03d}", classes[i], float(returns[i]), 0.0, upper) for i in range(n_assets)
    ]
    uniform = np.full(n_assets, 1.0 / n_assets)
    sigma2 = float(uniform @ cov @ uniform)

    constraints: list[LinearConstraint] = []
    if class_constraints:
        limits = (
            (AssetClass.EQ, ConstraintOp.LE, 0.5),
            (AssetClass.FI, ConstraintOp.GE, 0.2),
            (AssetClass.MM, ConstraintOp.LE, 0.4),
        )
        for cls, op, rhs in limits:
            coeffs = [1.0 if c is cls else 0.0 for c in classes]
            if any(coeffs):
                constraints.append(LinearConstraint(coeffs, op, rhs, f"{cls.value.lower()}_{op.value}"))
    return Problem(assets, cov, sigma2, constraints)


def make_problem(
    returns: Sequence[float],
    covariance,
    sigma2_target: float,
    bounds=(0.0, 1.0),
    constraints: Sequence[LinearConstraint] = (),
) -> Problem:
    """Convenience constructor; ``bounds`` is one (lo, hi) pair or one per asset."""
    n = len(returns)
    if len(bounds) == 2 and not isinstance(bounds[0], (tuple, list)):
        bounds = [tuple(bounds)] * n
    assets = [
        Asset(f"A{i}", _CLASS_CYCLE[i % 3], r, lo, hi)
        for i, (r, (lo, hi)) in enumerate(zip(returns, bounds))
    ]
    return Problem(assets, covariance, sigma2_target, constraints)
