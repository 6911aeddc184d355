"""Compile a portfolio problem into penalty QUBOs over an encoding layout.

The total energy is ``l1*H1 + l2*H2 + l3*H3 + l4*H4``:

* ``H1`` -- negated portfolio return,
* ``H2`` -- squared deviation of the budget from one,
* ``H3`` -- squared residual of every multi-asset constraint with its slack,
* ``H4`` -- the volatility term in one of the supported quadratic forms.

All builders go through the same affine description of the decoded weights,
``w = c + V x``, so each term is either linear or a quadratic form in ``x``.
``x_i**2 == x_i`` is used to fold squares onto the diagonal.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .encoding import (
    EncodingLayout,
    decode_solution,
    granularity,
    max_effective_granularity,
    place_values,
    slack_sign,
)
from .model import ConstraintOp, Problem, portfolio_return, portfolio_variance

__all__ = [
    "PRUNE_TOL",
    "H4Mode",
    "UnsupportedModeError",
    "LayoutMismatchError",
    "QuadraticModel",
    "PenaltyWeights",
    "default_penalty_weights",
    "ModelConstraint",
    "ConstrainedModel",
    "weight_affine",
    "slack_affine",
    "build_h1",
    "build_h2",
    "build_h3",
    "build_h4",
    "assemble",
    "build_constrained",
    "penalty_energy_direct",
    "export_qubo",
    "read_qubo",
]

PRUNE_TOL = 1e-15


class H4Mode(str, enum.Enum):
    EQUALITY_TO_ZERO = "equality-to-zero"
    LINEARIZED = "linearized"
    SLACK_CONSTRAINT = "slack-constraint"


class UnsupportedModeError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


class QuadraticModel:
    """``E(x) = sum_{i<=j} q_ij x_i x_j + offset`` over ``n`` binary variables.

    Coefficients live in a dense upper-triangular array; entries with
    magnitude below :data:`PRUNE_TOL` are dropped on construction.
    """

    __slots__ = ("n", "_q", "offset", "layout")

    def __init__(self, n: int, q: Optional[np.ndarray] = None, offset: float = 0.0, layout=None):
        self.n = int(n)
        if q is None:
            q = np.zeros((self.n, self.n))
        q = np.array(q, dtype=float)
        if q.shape != (self.n, self.n):
            raise ValueError(f"coefficient array must be {self.n}x{self.n}")
        if np.any(np.tril(q, -1)):
            raise ValueError("coefficients below the diagonal; use QuadraticModel.from_square")
        q[np.abs(q) < PRUNE_TOL] = 0.0
        q.setflags(write=False)
        self._q = q
        self.offset = float(offset)
        self.layout = layout

    @classmethod
    def from_square(cls, m: np.ndarray, linear=None, offset: float = 0.0, layout=None) -> "QuadraticModel":
        """Fold a full matrix (``x^T M x``) plus linear terms into upper-triangular form."""
        m = np.asarray(m, dtype=float)
        upper = np.triu(m) + np.triu(m.T, 1)
        if linear is not None:
            upper = upper + np.diag(np.asarray(linear, dtype=float))
        return cls(m.shape[0], upper, offset, layout)

    @classmethod
    def from_dict(cls, n: int, terms: dict, offset: float = 0.0, layout=None) -> "QuadraticModel":
        q = np.zeros((n, n))
        for (i, j), v in terms.items():
            a, b = (i, j) if i <= j else (j, i)
            q[a, b] += v
        return cls(n, q, offset, layout)

    @property
    def matrix(self) -> np.ndarray:
        """Read-only upper-triangular coefficient array."""
        return self._q

    def terms(self) -> Iterator[tuple[int, int, float]]:
        """Nonzero ``(i, j, q_ij)`` with ``i <= j`` in ascending index order."""
        rows, cols = np.nonzero(self._q)
        for i, j in zip(rows.tolist(), cols.tolist()):
            yield i, j, float(self._q[i, j])

    def to_dict(self) -> dict:
        return {(i, j): v for i, j, v in self.terms()}

    @property
    def num_terms(self) -> int:
        return int(np.count_nonzero(self._q))

    @property
    def density(self) -> float:
        full = self.n * (self.n + 1) // 2
        return self.num_terms / full if full else 0.0

    def energy(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"expected {self.n} bits, got shape {x.shape}")
        return float(x @ self._q @ x) + self.offset

    def energies(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        return np.einsum("si,ij,sj->s", xs, self._q, xs) + self.offset

    def symmetric(self) -> tuple[np.ndarray, np.ndarray]:
        """``(coupling, diag)``: symmetric off-diagonal couplings and linear biases."""
        diag = np.diag(self._q).copy()
        off = self._q - np.diag(diag)
        return off + off.T, diag

    def scaled(self, factor: float) -> "QuadraticModel":
        return QuadraticModel(self.n, self._q * factor, self.offset * factor, self.layout)

    def __add__(self, other: "QuadraticModel") -> "QuadraticModel":
        if not isinstance(other, QuadraticModel):
            return NotImplemented
        if other.n != self.n:
            raise LayoutMismatchError(f"cannot add models over {self.n} and {other.n} bits")
        return QuadraticModel(self.n, self._q + other._q, self.offset + other.offset, self.layout or other.layout)

    def __repr__(self):
        return f"QuadraticModel(n={self.n}, terms={self.num_terms}, offset={self.offset:.6g})"


# --- affine descriptions ---------------------------------------------------

def weight_affine(problem: Problem, layout: EncodingLayout) -> tuple[np.ndarray, np.ndarray]:
    """``(c, V)`` with decoded weights ``w = c + V @ x``."""
    if layout.n_assets != problem.n_assets:
        raise LayoutMismatchError("layout was built for a different number of assets")
    n = layout.total_bits
    v = np.zeros((problem.n_assets, n))
    places = place_values(layout.bits_per_asset)
    delta = problem.delta
    for i in range(problem.n_assets):
        v[i, layout.asset_slice(i)] = delta[i] * places
    return problem.weight_min.copy(), v


def slack_affine(layout: EncodingLayout, constraint_index: int) -> np.ndarray:
    """Row vector ``u`` with slack value ``s_j = u @ x`` (zero if the constraint has no slack)."""
    u = np.zeros(layout.total_bits)
    block = layout.slack_block_for(constraint_index)
    if block is not None:
        u[block.start : block.start + block.n_bits] = block.bound * place_values(block.n_bits)
    return u


def _linear_model(const: float, coeff: np.ndarray, layout) -> QuadraticModel:
    return QuadraticModel(len(coeff), np.diag(coeff), const, layout)


def _square_model(const: float, coeff: np.ndarray, layout) -> QuadraticModel:
    """``(const + coeff @ x)**2`` as a QUBO."""
    m = np.outer(coeff, coeff)
    return QuadraticModel.from_square(m, 2.0 * const * coeff, const * const, layout)


def _quadform_model(c: np.ndarray, v: np.ndarray, sigma: np.ndarray, layout) -> QuadraticModel:
    """``(c + V x)^T S (c + V x)`` as a QUBO."""
    m = v.T @ sigma @ v
    linear = 2.0 * (c @ sigma @ v)
    return QuadraticModel.from_square(m, linear, float(c @ sigma @ c), layout)


# --- penalty terms ---------------------------------------------------------

def build_h1(problem: Problem, layout: EncodingLayout) -> QuadraticModel:
    """Negated return ``-r . w(x)``."""
    c, v = weight_affine(problem, layout)
    r = problem.returns
    return _linear_model(-float(r @ c), -(r @ v), layout)


def build_h2(problem: Problem, layout: EncodingLayout) -> QuadraticModel:
    """``(sum_i w_i(x) - 1)**2``."""
    c, v = weight_affine(problem, layout)
    return _square_model(float(np.sum(c)) - 1.0, v.sum(axis=0), layout)


def build_h3(problem: Problem, layout: EncodingLayout, weights: Optional[Sequence[float]] = None) -> QuadraticModel:
    """``sum_j l_j (a_j . w(x) + alpha_j s_j(x) - b_j)**2``.

    ``weights`` are the per-constraint multipliers; they default to one so the
    external ``lambda3`` in :func:`assemble` carries the overall scale.
    """
    c, v = weight_affine(problem, layout)
    total = QuadraticModel(layout.total_bits, layout=layout)
    cons = problem.multi_constraints
    if weights is None:
        weights = [1.0] * len(cons)
    if len(weights) != len(cons):
        raise ValueError("need one multiplier per multi-asset constraint")
    for j, con in enumerate(cons):
        a = np.array(con.coefficients)
        coeff = a @ v
        block = layout.slack_block_for(j)
        if con.op is not ConstraintOp.EQ:
            if block is None:
                raise LayoutMismatchError(f"constraint {j} needs a slack block")
            coeff = coeff + block.sign * slack_affine(layout, j)
        total = total + _square_model(float(a @ c) - con.rhs, coeff, layout).scaled(weights[j])
    return total


@dataclass(frozen=True)
class ModelConstraint:
    """A constraint kept in natural form: ``form(x) <op> rhs``."""

    form: QuadraticModel
    op: ConstraintOp
    rhs: float
    label: str
    kind: str

    def value(self, x) -> float:
        return self.form.energy(x)

    def residual(self, x) -> float:
        return self.value(x) - self.rhs


def build_h4(
    problem: Problem,
    layout: EncodingLayout,
    mode: H4Mode = H4Mode.EQUALITY_TO_ZERO,
    k: Optional[Sequence[float]] = None,
):
    """Volatility term.

    * equality-to-zero: ``w^T S w`` (the symmetric form equals the
      ``sigma_ii, 2 sigma_ij`` upper-triangular one),
    * linearized: ``(k^T S w - sigma2_target)**2`` with ``k_i = 1/N`` by default,
    * slack-constraint: returns a :class:`ModelConstraint`
      ``w^T S w <= sigma2_target``; squaring it with a slack would give a
      quartic polynomial, which is not representable as a QUBO.
    """
    mode = H4Mode(mode)
    c, v = weight_affine(problem, layout)
    sigma = problem.covariance
    if mode is H4Mode.EQUALITY_TO_ZERO:
        return _quadform_model(c, v, sigma, layout)
    if mode is H4Mode.LINEARIZED:
        n = problem.n_assets
        kvec = np.full(n, 1.0 / n) if k is None else np.asarray(k, dtype=float)
        if kvec.shape != (n,):
            raise ValueError(f"linearization vector must have length {n}")
        row = kvec @ sigma
        return _square_model(float(row @ c) - problem.sigma2_target, row @ v, layout)
    return ModelConstraint(
        _quadform_model(c, v, sigma, layout),
        ConstraintOp.LE,
        problem.sigma2_target,
        "volatility",
        "volatility",
    )


@dataclass(frozen=True)
class PenaltyWeights:
    lambda1: float
    lambda2: float
    lambda3: tuple[float, ...]
    lambda4: float

    def __post_init__(self):
        object.__setattr__(self, "lambda3", tuple(float(v) for v in self.lambda3))
        values = (self.lambda1, self.lambda2, self.lambda4, *self.lambda3)
        if not all(math.isfinite(v) and v > 0 for v in values):
            raise ValueError("penalty weights must be finite and strictly positive")

    def replace(self, **changes) -> "PenaltyWeights":
        data = {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "lambda4": self.lambda4,
        }
        data.update(changes)
        return PenaltyWeights(**data)

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": list(self.lambda3),
            "lambda4": self.lambda4,
        }


def default_penalty_weights(problem: Problem, K: int) -> PenaltyWeights:
    """Heuristic multipliers.

    The budget multiplier makes a one-step budget error cost ten times the
    largest return gain of one step.  The volatility multiplier prices a
    portfolio sitting exactly at the variance ceiling like the largest
    available return, so return and risk trade off instead of the variance
    term swamping the budget.
    """
    r_max = float(np.max(np.abs(problem.returns)))
    if r_max == 0.0:
        r_max = 1.0
    p_eff = max_effective_granularity(problem, K)
    if p_eff == 0.0:
        p_eff = granularity(K)
    lam2 = 10.0 * r_max / p_eff
    lam4 = r_max / problem.sigma2_target
    return PenaltyWeights(1.0, lam2, (lam2,) * len(problem.multi_constraints), lam4)


def assemble(
    problem: Problem,
    layout: EncodingLayout,
    weights: Optional[PenaltyWeights] = None,
    h4_mode: H4Mode = H4Mode.EQUALITY_TO_ZERO,
    k: Optional[Sequence[float]] = None,
) -> QuadraticModel:
    """Weighted sum ``l1 H1 + l2 H2 + l3 H3 + l4 H4``."""
    h4_mode = H4Mode(h4_mode)
    if h4_mode is H4Mode.SLACK_CONSTRAINT:
        raise UnsupportedModeError(
            "slack-constraint volatility yields a quartic (PUBO) term; "
            "use build_constrained for natural-form handling"
        )
    if layout.n_assets != problem.n_assets:
        raise LayoutMismatchError("layout was built for a different problem")
    if weights is None:
        weights = default_penalty_weights(problem, layout.bits_per_asset)
    if len(weights.lambda3) != len(problem.multi_constraints):
        raise ValueError("need one lambda3 entry per multi-asset constraint")
    total = build_h1(problem, layout).scaled(weights.lambda1)
    total = total + build_h2(problem, layout).scaled(weights.lambda2)
    if problem.multi_constraints:
        total = total + build_h3(problem, layout, weights.lambda3)
    total = total + build_h4(problem, layout, h4_mode, k).scaled(weights.lambda4)
    total.layout = layout
    return total


def penalty_energy_direct(
    bits,
    problem: Problem,
    layout: EncodingLayout,
    weights: PenaltyWeights,
    h4_mode: H4Mode = H4Mode.EQUALITY_TO_ZERO,
    k: Optional[Sequence[float]] = None,
) -> float:
    """Evaluate the penalty expression from decoded weights and slacks, without any QUBO."""
    w, slacks = decode_solution(bits, layout, problem)
    energy = -weights.lambda1 * portfolio_return(w, problem)
    energy += weights.lambda2 * (math.fsum(w) - 1.0) ** 2
    for j, con in enumerate(problem.multi_constraints):
        s = slacks.get(j, 0.0)
        energy += weights.lambda3[j] * (con.residual(w) + slack_sign(con.op) * s) ** 2
    h4_mode = H4Mode(h4_mode)
    if h4_mode is H4Mode.EQUALITY_TO_ZERO:
        energy += weights.lambda4 * portfolio_variance(w, problem)
    elif h4_mode is H4Mode.LINEARIZED:
        n = problem.n_assets
        kvec = np.full(n, 1.0 / n) if k is None else np.asarray(k, dtype=float)
        energy += weights.lambda4 * (float(kvec @ problem.covariance @ w) - problem.sigma2_target) ** 2
    else:
        raise UnsupportedModeError("slack-constraint volatility has no QUBO energy")
    return energy


# --- natural-form model ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConstrainedModel:
    """Return objective plus constraints kept as ``(form, op, rhs)``.

    ``tolerances`` gives, per constraint, the band within which it counts as
    met; it matches the post-selection rules used in the analysis module.
    """

    problem: Problem
    layout: EncodingLayout
    objective: QuadraticModel
    constraints: tuple[ModelConstraint, ...]
    tolerances: tuple[float, ...] = field(default=())

    def penalized_energy(self, x, lambdas: Sequence[float]) -> float:
        """Objective plus ``lambda_c * excess_c**2`` for every constraint outside its band."""
        energy = self.objective.energy(x)
        for lam, tol, con in zip(lambdas, self.tolerances, self.constraints):
            value = con.value(x)
            if con.op is ConstraintOp.EQ:
                excess = abs(value - con.rhs) - tol
            elif con.op is ConstraintOp.LE:
                excess = value - con.rhs - tol
            else:
                excess = con.rhs - value - tol
            if excess > 0:
                energy += lam * excess * excess
        return energy

    def constraint(self, label: str) -> ModelConstraint:
        for con in self.constraints:
            if con.label == label:
                return con
        raise KeyError(label)


def build_constrained(problem: Problem, layout: EncodingLayout) -> ConstrainedModel:
    if layout.slack_blocks or layout.vola_slack_block is not None:
        raise LayoutMismatchError("natural-form model expects a layout without slack blocks")
    c, v = weight_affine(problem, layout)
    objective = build_h1(problem, layout)
    p_eff = max_effective_granularity(problem, layout.bits_per_asset)
    cons = [ModelConstraint(_linear_model(float(np.sum(c)), v.sum(axis=0), layout), ConstraintOp.EQ, 1.0, "normalization", "normalization")]
    tols = [p_eff]
    for j, con in enumerate(problem.multi_constraints):
        a = np.array(con.coefficients)
        form = _linear_model(float(a @ c), a @ v, layout)
        cons.append(ModelConstraint(form, con.op, con.rhs, con.label or f"multi_{j}", "multi_linear"))
        tols.append(1e-12)
    cons.append(build_h4(problem, layout, H4Mode.SLACK_CONSTRAINT))
    tols.append(0.0)
    return ConstrainedModel(problem, layout, objective, tuple(cons), tuple(tols))


# --- export ----------------------------------------------------------------

def export_qubo(model: QuadraticModel, path) -> None:
    """Write ``i j coeff`` lines in ascending index order plus a ``# offset`` line."""
    lines = [f"# offset {model.offset!r}", f"# variables {model.n}"]
    lines.extend(f"{i} {j} {v!r}" for i, j, v in model.terms())
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_qubo(path) -> QuadraticModel:
    offset = 0.0
    n = 0
    terms = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[0] == "offset":
                offset = float(parts[1])
            elif parts[0] == "variables":
                n = int(parts[1])
            continue
        i, j, v = line.split()
        i, j = int(i), int(j)
        terms[(i, j)] = float(v)
        n = max(n, i + 1, j + 1)
    return QuadraticModel.from_dict(n, terms, offset)
