"""Textual and visual graph construction.

Textual graph: words are nodes, edges come from the dependency parse (sparse) or
connect every pair of words (dense). Edge weights are the row-softmax word
similarity masked by the adjacency and L2-normalized per row.

Visual graph: regions are nodes, fully connected; each ordered pair carries the
polar offset (rho, theta) between bounding-box centres, rho scaled by the image
diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ConfigurationError, ContractError, GraphError, NumericError
from .graphio import ImageRecord, TextRecord

VARIANTS = ("sparse", "dense")


@dataclass
class TextGraph:
    node_count: int
    adjacency: np.ndarray
    edge_weights: Tensor
    variant: str


@dataclass
class VisualGraph:
    node_count: int
    polar: np.ndarray  # (n, n, 2): rho, theta


def text_similarity(tape: Tape, U: Tensor, lam: float, mask=None) -> Tensor:
    """Row-softmax of ``lam * U U^T`` over the last two axes.

    ``mask`` marks real (non-padding) nodes along the last node axis.
    """
    if not lam > 0:
        raise ContractError(f"lambda must be positive, got {lam}")
    if not np.all(np.isfinite(U.data)):
        raise NumericError("text_similarity received non-finite features")
    gram = tape.matmul(U, tape.swap_last(U))
    col_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    return tape.softmax_rows(gram, scale=lam, mask=col_mask)


def text_edge_weights(tape: Tape, S: Tensor, A) -> Tensor:
    """Hadamard-mask the similarity with the adjacency, then L2-normalize rows."""
    return tape.l2_normalize_rows(tape.mul(S, Tensor(A)))


def text_adjacency(record: TextRecord, variant: str) -> np.ndarray:
    m = len(record.tokens)
    if variant == "dense":
        return np.ones((m, m))
    if variant != "sparse":
        raise ConfigurationError(f"unknown text graph variant {variant!r}")
    A = np.eye(m)
    for i, j in record.dep_edges:
        if not (0 <= i < m and 0 <= j < m):
            raise GraphError(f"text {record.id!r}: edge ({i}, {j}) out of range for {m} tokens")
        A[i, j] = A[j, i] = 1.0
    return A


def build_text_graph(record: TextRecord, U: Tensor, variant: str = "sparse", lam: float = 10.0,
                     tape: Tape | None = None) -> TextGraph:
    m = len(record.tokens)
    if U.shape[0] != m:
        raise ContractError(f"text {record.id!r} has {m} tokens but {U.shape[0]} feature rows")
    tape = Tape(record=False) if tape is None else tape
    A = text_adjacency(record, variant)
    W = text_edge_weights(tape, text_similarity(tape, U, lam), A)
    return TextGraph(node_count=m, adjacency=A, edge_weights=W, variant=variant)


def polar_coordinates(centers: np.ndarray, diagonal: float) -> np.ndarray:
    """Pairwise (rho, theta) from node i to node j; coincident centres give (0, 0)."""
    centers = np.asarray(centers, dtype=np.float64)
    delta = centers[None, :, :] - centers[:, None, :]
    dx, dy = delta[..., 0], delta[..., 1]
    rho = np.hypot(dx, dy) / diagonal
    coincident = rho == 0.0
    theta = np.where(coincident, 0.0, np.arctan2(dy, dx))
    # atan2 returns [-pi, pi]; fold -pi onto pi so theta lies in (-pi, pi]
    theta = np.where(theta <= -math.pi, math.pi, theta)
    return np.stack([rho, theta], axis=-1)


def build_visual_graph(record: ImageRecord) -> VisualGraph:
    centers = np.array([r.center for r in record.regions])
    return VisualGraph(node_count=len(centers), polar=polar_coordinates(centers, record.diagonal))
