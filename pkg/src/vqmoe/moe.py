"""Structured 2D mixture-of-experts routing.

A gating network turns a context feature into a matrix of expert affinities,
normalized by softmax over all entries. Row means drive one expert axis,
column means the other, and a TopK over the flattened matrix drives the
joint (overall) mixture through its row and column marginals. Expert
mixtures are sparse convex combinations: at most k experts receive nonzero
weight, selections are renormalized to sum to 1, and unselected experts are
never evaluated, so they receive exactly zero gradient.

A conventional 1D gate (per-task softmax over a single expert axis) is also
provided as an ablation baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tz
from .errors import ConfigError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)


def _unit_mass_tol(dtype) -> float:
    # 1e-9 is asserted for float64; float32 cannot resolve below ~1e-7.
    return 1e-9 if np.dtype(dtype) == np.float64 else 1e-5


@dataclass
class Linear:
    """Single affine layer y = x @ weight + bias."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int,
             dtype="float64", scale: float = 0.05) -> "Linear":
        w = rng.normal(0.0, scale, size=(d_in, d_out))
        b = np.zeros(d_out)
        return cls(Tensor(w, dtype=dtype), Tensor(b, dtype=dtype))

    def apply(self, x: Tensor) -> Tensor:
        return tz.add(tz.matmul(x, self.weight), self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class Expert:
    """Two-layer MLP over channels: C -> h -> C with ReLU."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, hidden: int,
             dtype="float64", scale: float = 0.05) -> "Expert":
        return cls(
            Tensor(rng.normal(0.0, scale, size=(width, hidden)), dtype=dtype),
            Tensor(np.zeros(hidden), dtype=dtype),
            Tensor(rng.normal(0.0, scale, size=(hidden, width)), dtype=dtype),
            Tensor(np.zeros(width), dtype=dtype),
        )

    @property
    def width(self) -> int:
        return self.w1.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.width:
            raise ShapeError(
                f"expert expects width {self.width}, got {x.shape[-1]}"
            )
        h = tz.relu(tz.add(tz.matmul(x, self.w1), self.b1))
        return tz.add(tz.matmul(h, self.w2), self.b2)

    def named_params(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class ExpertPool:
    """The three shared expert groups used by the two prediction paths."""

    spatial: list[Expert]
    temporal: list[Expert]
    alignment: list[Expert]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, hidden: int,
             m: int, n: int, z: int, dtype="float64", scale: float = 0.05):
        def group(count):
            return [Expert.init(rng, width, hidden, dtype, scale) for _ in range(count)]

        return cls(group(m), group(n), group(z))


@dataclass
class GatingMatrix:
    """Softmax-normalized expert affinities; all entries sum to 1."""

    W: Tensor
    row_count: int
    col_count: int

    def __post_init__(self):
        if self.W.shape != (self.row_count, self.col_count):
            raise ShapeError(
                f"gating matrix shape {self.W.shape} != "
                f"({self.row_count}, {self.col_count})"
            )
        data = self.W.data
        tol = _unit_mass_tol(data.dtype)
        if (data < 0).any() or abs(float(np.sort(data, axis=None).sum()) - 1.0) > tol:
            raise ShapeError("gating matrix entries must be nonnegative and sum to 1")


@dataclass
class ExpertWeights:
    """Sparse convex mixture: ascending expert indices with their weights."""

    indices: tuple[int, ...]
    weights: Tensor
    k: int

    def __post_init__(self):
        if len(self.indices) != self.weights.shape[0] or self.weights.ndim != 1:
            raise ShapeError("indices and weights lengths differ")
        if len(self.indices) > self.k:
            raise ShapeError(f"{len(self.indices)} selections exceed k={self.k}")
        data = self.weights.data
        tol = _unit_mass_tol(data.dtype)
        if (data < -tol).any() or abs(float(np.sort(data).sum()) - 1.0) > tol:
            raise ShapeError("mixture weights must be nonnegative and sum to 1")


def make_gating(context: Tensor, rows: int, cols: int, net: Linear) -> GatingMatrix:
    """Produce a rows x cols gating matrix from a context vector.

    One linear layer maps the context to rows*cols logits; softmax runs over
    all entries jointly, so the whole matrix carries unit mass.
    """
    if rows <= 0 or cols <= 0:
        raise ConfigError(f"expert grid must be positive, got {rows}x{cols}")
    if context.ndim != 1:
        raise ShapeError(f"gating context must be a vector, got {context.shape}")
    logits = net.apply(context)
    if logits.shape != (rows * cols,):
        raise ShapeError(
            f"gating net emits {logits.shape}, expected ({rows * cols},)"
        )
    probs = tz.softmax(logits, axis=0)
    return GatingMatrix(tz.reshape(probs, (rows, cols)), rows, cols)


def make_token_gating(tokens: Tensor, cols: int, net: Linear) -> GatingMatrix:
    """Per-token gating rows, normalized jointly over all tokens x experts."""
    if cols <= 0:
        raise ConfigError(f"expert count must be positive, got {cols}")
    if tokens.ndim != 2:
        raise ShapeError(f"token features must be 2-D, got {tokens.shape}")
    rows = tokens.shape[0]
    logits = net.apply(tokens)
    flat = tz.softmax(tz.reshape(logits, (rows * cols,)), axis=0)
    return GatingMatrix(tz.reshape(flat, (rows, cols)), rows, cols)


def topk_renorm(scores: Tensor, k: int) -> ExpertWeights:
    """Keep the k largest scores (ties to the lowest index), renormalize.

    All-zero scores carry no preference; the first k experts get uniform
    weight and the condition is logged.
    """
    if scores.ndim != 1:
        raise ShapeError(f"scores must be a vector, got {scores.shape}")
    n = scores.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    data = scores.data
    if (data == 0).all():
        log.warning("topk_renorm: all-zero scores, using uniform weights over first %d", k)
        idx = tuple(range(k))
        uniform = Tensor(np.full(k, 1.0 / k), dtype=str(scores.dtype))
        return ExpertWeights(idx, uniform, k)
    order = np.argsort(-data, kind="stable")[:k]
    idx = tuple(sorted(int(i) for i in order))
    kept = tz.gather(scores, list(idx), axis=0)
    total = tz.sum_pool(kept, (0,))
    weights = tz.div(kept, total)
    return ExpertWeights(idx, weights, k)


def structured_weights(W: GatingMatrix, k: int, k_joint: int | None = None):
    """Row-mean, column-mean, and joint-TopK mixtures from one gating matrix.

    k is clamped to each component's extent, so passing k = rows*cols keeps
    everything and the joint marginals equal exact row/column sums. Returns
    (row_mix, col_mix, joint_row_marginal, joint_col_marginal).
    """
    rows, cols = W.row_count, W.col_count
    if k < 1:
        raise ConfigError(f"k={k} must be >= 1")
    kj = k if k_joint is None else k_joint
    if kj < 1:
        raise ConfigError(f"k_joint={kj} must be >= 1")
    kj = min(kj, rows * cols)

    row_means = tz.mean_pool(W.W, (1,))
    col_means = tz.mean_pool(W.W, (0,))
    w_rows = topk_renorm(row_means, min(k, rows))
    w_cols = topk_renorm(col_means, min(k, cols))

    flat = tz.reshape(W.W, (rows * cols,))
    joint = topk_renorm(flat, kj)
    scatter = np.zeros((rows * cols, len(joint.indices)))
    for col, flat_idx in enumerate(joint.indices):
        scatter[flat_idx, col] = 1.0
    grid = tz.reshape(
        tz.matmul(Tensor(scatter, dtype=str(joint.weights.dtype)), joint.weights),
        (rows, cols),
    )
    row_idx = tuple(sorted({i // cols for i in joint.indices}))
    col_idx = tuple(sorted({i % cols for i in joint.indices}))
    joint_rows = ExpertWeights(
        row_idx, tz.gather(tz.sum_pool(grid, (1,)), list(row_idx), axis=0), kj
    )
    joint_cols = ExpertWeights(
        col_idx, tz.gather(tz.sum_pool(grid, (0,)), list(col_idx), axis=0), kj
    )
    return w_rows, w_cols, joint_rows, joint_cols


def mix_experts(weights: ExpertWeights, pool: Sequence[Expert], x: Tensor) -> Tensor:
    """Convex combination of the selected experts applied to x.

    Only selected experts run. The accumulation over experts sums values in
    canonical sorted order, so relabeling experts (with their weights)
    cannot change the result at the bit level.
    """
    if not weights.indices:
        raise ShapeError("empty expert selection")
    for idx in weights.indices:
        if not 0 <= idx < len(pool):
            raise ShapeError(f"expert id {idx} outside pool of {len(pool)}")
    parts = []
    for pos, idx in enumerate(weights.indices):
        w = tz.take(weights.weights, pos, axis=0)
        parts.append(tz.mul(w, pool[idx].forward(x)))
    if len(parts) == 1:
        return parts[0]
    return tz.sum_pool(tz.stack(parts), (0,))


def vanilla_gating(context: Tensor, n_experts: int, net: Linear) -> Tensor:
    """Conventional 1D gate: softmax over one expert axis."""
    if n_experts <= 0:
        raise ConfigError(f"expert count must be positive, got {n_experts}")
    logits = net.apply(context)
    if logits.shape != (n_experts,):
        raise ShapeError(f"gate emits {logits.shape}, expected ({n_experts},)")
    return tz.softmax(logits, axis=0)


def vanilla_moe(context: Tensor, pool: Sequence[Expert], x: Tensor,
                k: int, net: Linear) -> Tensor:
    """1D-gated mixture: gate from context, TopK-renormalize, mix."""
    gate = vanilla_gating(context, len(pool), net)
    return mix_experts(topk_renorm(gate, k), pool, x)
