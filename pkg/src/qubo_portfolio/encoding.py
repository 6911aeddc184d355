"""Fixed-width binary encoding of asset weights and slack terms.

Every asset gets ``K`` bits.  Within a block, bit ``k`` (0-based, index 0
is the least significant bit) contributes ``2**k * p`` to the normalized
value, where ``p = 2**-K``; the normalized value is mapped onto the asset
box as ``w_min + (w_max - w_min) * value``.  The largest representable
value is therefore ``w_max - (w_max - w_min) * p``, so the box is always
respected.

Inequality constraints get a slack block of the same width whose scale
``beta`` is the largest residual the constraint can have over the box.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ConstraintOp, Problem

__all__ = [
    "MAX_BITS",
    "EncodingError",
    "InfeasibleConstraintError",
    "SlackBlock",
    "VolaSlackBlock",
    "EncodingLayout",
    "granularity",
    "effective_granularity",
    "max_effective_granularity",
    "place_values",
    "decode_weight",
    "encode_weight",
    "build_layout",
    "decode_solution",
    "encode_weights",
    "bits_to_str",
    "str_to_bits",
    "slack_sign",
]

MAX_BITS = 62


class EncodingError(ValueError):
    pass


class InfeasibleConstraintError(EncodingError):
    def __init__(self, index: int, label: str, beta: float):
        self.index = index
        self.label = label
        self.beta = beta
        super().__init__(
            f"constraint {index} ({label}) cannot be met anywhere in the weight boxes "
            f"(largest residual {beta:.6g} < 0)"
        )


def granularity(K: int) -> float:
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= MAX_BITS:
        raise EncodingError(f"bits per block must be an integer in [1, {MAX_BITS}], got {K!r}")
    return 2.0 ** -int(K)


def effective_granularity(K: int, weight_min: float, weight_max: float) -> float:
    if weight_min > weight_max:
        raise EncodingError("weight_min > weight_max")
    return (weight_max - weight_min) * granularity(K)


def max_effective_granularity(problem: Problem, K: int) -> float:
    return float(np.max(problem.delta)) * granularity(K)


def place_values(K: int) -> np.ndarray:
    """Per-bit contribution ``2**k * 2**-K`` to the normalized value, LSB first."""
    p = granularity(K)
    return np.array([2.0**k * p for k in range(K)])


def slack_sign(op: ConstraintOp) -> int:
    """+1 for <=, -1 for >=, 0 for =."""
    return {ConstraintOp.LE: 1, ConstraintOp.EQ: 0, ConstraintOp.GE: -1}[ConstraintOp(op)]


def _fraction(bits) -> float:
    bits = np.asarray(bits)
    # integer value first keeps the sum exact for K <= 62
    value = 0
    for k, b in enumerate(bits):
        if b:
            value |= 1 << k
    return value * granularity(len(bits))


def decode_weight(bits, weight_min: float, weight_max: float) -> float:
    """Weight represented by one K-bit block."""
    if len(bits) == 0:
        raise EncodingError("empty bit slice")
    return weight_min + (weight_max - weight_min) * _fraction(bits)


def encode_weight(value: float, K: int, weight_min: float, weight_max: float) -> np.ndarray:
    """Bits of the representable weight nearest to ``value`` (clamped to the lattice)."""
    delta = weight_max - weight_min
    top = (1 << K) - 1
    if delta <= 0:
        level = 0
    else:
        level = int(np.clip(np.rint((value - weight_min) / (delta * granularity(K))), 0, top))
    return np.array([(level >> k) & 1 for k in range(K)], dtype=np.uint8)


@dataclass(frozen=True)
class SlackBlock:
    constraint_index: int
    start: int
    n_bits: int
    bound: float
    sign: int


@dataclass(frozen=True)
class VolaSlackBlock:
    start: int
    n_bits: int
    bound: float


@dataclass(frozen=True)
class EncodingLayout:
    n_assets: int
    bits_per_asset: int
    asset_bit_offset: tuple[int, ...]
    slack_blocks: tuple[SlackBlock, ...]
    vola_slack_block: Optional[VolaSlackBlock]
    total_bits: int

    def asset_slice(self, i: int) -> slice:
        start = self.asset_bit_offset[i]
        return slice(start, start + self.bits_per_asset)

    @property
    def n_asset_bits(self) -> int:
        return self.n_assets * self.bits_per_asset

    def slack_block_for(self, constraint_index: int) -> Optional[SlackBlock]:
        for block in self.slack_blocks:
            if block.constraint_index == constraint_index:
                return block
        return None

    def to_dict(self) -> dict:
        return {
            "n_assets": self.n_assets,
            "bits_per_asset": self.bits_per_asset,
            "asset_bit_offset": list(self.asset_bit_offset),
            "slack_blocks": [
                {
                    "constraint": b.constraint_index,
                    "start": b.start,
                    "bits": b.n_bits,
                    "bound": b.bound,
                    "sign": b.sign,
                }
                for b in self.slack_blocks
            ],
            "vola_slack_block": None
            if self.vola_slack_block is None
            else {
                "start": self.vola_slack_block.start,
                "bits": self.vola_slack_block.n_bits,
                "bound": self.vola_slack_block.bound,
            },
            "total_bits": self.total_bits,
        }


def _slack_bound(coeffs: np.ndarray, op: ConstraintOp, rhs: float, lo: np.ndarray, hi: np.ndarray) -> float:
    if op is ConstraintOp.LE:
        return float(rhs - np.sum(np.minimum(coeffs * lo, coeffs * hi)))
    return float(np.sum(np.maximum(coeffs * lo, coeffs * hi)) - rhs)


def build_layout(
    problem: Problem,
    K: int,
    include_vola_slack: bool = False,
    *,
    slack_bits: Optional[int] = None,
    with_slack: bool = True,
) -> EncodingLayout:
    """Assign bit positions: asset blocks first, then slack blocks.

    ``slack_bits`` overrides the slack width (defaults to ``K``).  With
    ``with_slack=False`` only asset blocks are laid out, which is what the
    natural-form constrained model uses.
    """
    granularity(K)
    s_bits = K if slack_bits is None else slack_bits
    granularity(s_bits)
    n = problem.n_assets
    offsets = tuple(i * K for i in range(n))
    cursor = n * K
    blocks = []
    lo, hi = problem.weight_min, problem.weight_max
    for j, con in enumerate(problem.multi_constraints):
        if con.op is ConstraintOp.EQ:
            continue
        beta = _slack_bound(np.array(con.coefficients), con.op, con.rhs, lo, hi)
        if beta < 0:
            raise InfeasibleConstraintError(j, con.label or f"multi_{j}", beta)
        if with_slack:
            blocks.append(SlackBlock(j, cursor, s_bits, beta, slack_sign(con.op)))
            cursor += s_bits
    vola = None
    if include_vola_slack and with_slack:
        vola = VolaSlackBlock(cursor, s_bits, problem.sigma2_target)
        cursor += s_bits
    return EncodingLayout(n, K, offsets, tuple(blocks), vola, cursor)


def _check_length(bits, layout: EncodingLayout) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape != (layout.total_bits,):
        raise EncodingError(f"expected {layout.total_bits} bits, got shape {bits.shape}")
    return bits


def decode_solution(bits, layout: EncodingLayout, problem: Problem) -> tuple[np.ndarray, dict]:
    """Weights and slack values encoded by a full bit string.

    Slack values are keyed by constraint index; the volatility slack, when
    present, is stored under the key ``"volatility"``.
    """
    bits = _check_length(bits, layout)
    lo, hi = problem.weight_min, problem.weight_max
    weights = np.array(
        [decode_weight(bits[layout.asset_slice(i)], lo[i], hi[i]) for i in range(layout.n_assets)]
    )
    slacks: dict = {}
    for block in layout.slack_blocks:
        slacks[block.constraint_index] = block.bound * _fraction(bits[block.start : block.start + block.n_bits])
    if layout.vola_slack_block is not None:
        vb = layout.vola_slack_block
        slacks["volatility"] = vb.bound * _fraction(bits[vb.start : vb.start + vb.n_bits])
    return weights, slacks


def encode_weights(weights, layout: EncodingLayout, problem: Problem) -> np.ndarray:
    """Full bit string with each asset block at its nearest representable weight; slack bits zero."""
    bits = np.zeros(layout.total_bits, dtype=np.uint8)
    lo, hi = problem.weight_min, problem.weight_max
    for i, w in enumerate(np.asarray(weights, dtype=float)):
        bits[layout.asset_slice(i)] = encode_weight(w, layout.bits_per_asset, lo[i], hi[i])
    return bits


def bits_to_str(bits) -> str:
    """ASCII form used in logs and CSV files; index 0 is the leftmost character."""
    return "".join("1" if b else "0" for b in bits)


def str_to_bits(text: str) -> np.ndarray:
    if any(c not in "01" for c in text):
        raise EncodingError(f"not a bit string: {text!r}")
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")
