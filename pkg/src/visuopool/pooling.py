"""Pooling heads that collapse an H x W x D token grid into a policy feature vector.

Each head has a graph-building ``forward(tape, tokens, params)`` that works on a
batch of flattened grids ``(B, N, D)`` (row-major cells, ``n = i * W + j``) and
returns the pooled features ``(B, out_dim)`` plus, for attention heads, the
per-head weights ``(B, heads, N)``. The module-level functions ``mean_pool``,
``spatial_softmax``, ``token_learner``, ``afa_pool`` and ``pool`` are the
plain-array front ends for a single grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .tape import DimensionError, Node, Tape


class ConfigurationError(ValueError):
    """A head or experiment is configured inconsistently."""


POOLING_KINDS = ("mean", "spatial_softmax", "token_learner", "afa")


def grid_coords(n: int) -> np.ndarray:
    """``n`` points linearly spaced over [-1, 1] inclusive."""
    if n < 2:
        raise ConfigurationError("coordinate spacing needs at least 2 cells per axis")
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise DimensionError(f"token grid must be H x W x D, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise T.DomainError("token grid has non-finite entries")
    return grid


@dataclass
class AttentionRecord:
    """Per-head nonnegative weights over the N cells of an H x W grid."""

    weights: np.ndarray  # (heads, N)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.grid_shape = tuple(int(s) for s in self.grid_shape)
        h, w = self.grid_shape
        if self.weights.shape[1] != h * w:
            raise DimensionError(f"record has {self.weights.shape[1]} cells, grid is {h}x{w}")

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    def mean_weights(self) -> np.ndarray:
        return self.weights.mean(axis=0)

    def heatmap(self) -> np.ndarray:
        return self.mean_weights().reshape(self.grid_shape)

    def to_dict(self) -> dict:
        return {"grid_shape": list(self.grid_shape), "heads": self.heads,
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionRecord":
        rec = cls(np.array(d["weights"], dtype=np.float64), tuple(d["grid_shape"]))
        if rec.heads != d.get("heads", rec.heads):
            raise DimensionError("head count does not match weight rows")
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "AttentionRecord":
        return cls.from_dict(json.loads(s))


class MeanPoolHead:
    kind = "mean"

    def __init__(self, dim: int):
        self.dim = dim

    @property
    def out_dim(self) -> int:
        return self.dim

    def init_params(self, rng) -> dict[str, np.ndarray]:
        return {}

    def forward(self, tape: Tape, tokens: Node, params: dict[str, Node]):
        return T.mean_axis(tokens, axis=-2), None


@dataclass
class SpatialSoftmaxHead:
    height: int
    width: int
    dim: int
    coord_x: np.ndarray = field(init=False, repr=False)
    coord_y: np.ndarray = field(init=False, repr=False)

    kind = "spatial_softmax"

    def __post_init__(self):
        self.coord_x = grid_coords(self.width)
        self.coord_y = grid_coords(self.height)

    @property
    def out_dim(self) -> int:
        return 2 * self.dim

    def init_params(self, rng) -> dict[str, np.ndarray]:
        return {}

    def cell_coords(self) -> np.ndarray:
        """(N, 2) table of (x_j, y_i) for every cell in row-major order."""
        xs = np.tile(self.coord_x, self.height)
        ys = np.repeat(self.coord_y, self.width)
        return np.stack([xs, ys], axis=1)

    def forward(self, tape: Tape, tokens: Node, params: dict[str, Node]):
        # channels become rows: (B, D, N), softmax over cells, then expected coordinates
        weights = T.softmax_rows(T.transpose(tokens))
        expected = T.matmul(weights, tape.constant(self.cell_coords()))  # (B, D, 2)
        batch = tokens.shape[:-2]
        return T.reshape(expected, (*batch, 2 * self.dim)), weights


@dataclass
class TokenLearnerHead:
    """M spatial attention maps from per-cell 2-layer perceptrons (D -> hidden -> 1)."""

    dim: int
    tokens: int = 4
    hidden: int = 32

    kind = "token_learner"

    @property
    def out_dim(self) -> int:
        return self.tokens * self.dim

    def init_params(self, rng) -> dict[str, np.ndarray]:
        m, d, h = self.tokens, self.dim, self.hidden
        return {
            "tl_w1": rng.normal(0.0, math.sqrt(2.0 / d), (m, d, h)),
            "tl_b1": np.zeros((m, 1, h)),
            # no output bias: the softmax over cells would cancel it
            "tl_w2": rng.normal(0.0, math.sqrt(1.0 / h), (m, h, 1)),
        }

    def forward(self, tape: Tape, tokens: Node, params: dict[str, Node]):
        batch = tokens.shape[:-2]
        n = tokens.shape[-2]
        m, hd = self.tokens, self.hidden
        # the M perceptrons side by side: first layers as one D x (M*hidden) matrix,
        # second layers as a block-diagonal (M*hidden) x M matrix
        w1 = T.reshape(T.transpose(params["tl_w1"], (1, 0, 2)), (self.dim, m * hd))
        b1 = T.reshape(params["tl_b1"], (1, m * hd))
        hid = T.relu(T.add(T.matmul(tokens, w1), b1))  # (B, N, M*hidden)
        block = tape.constant(np.eye(m)[:, None, :])
        w2 = T.reshape(T.mul(params["tl_w2"], block), (m * hd, m))
        logits = T.matmul(hid, w2)  # (B, N, M)
        nb = len(batch)
        maps = T.softmax_rows(T.transpose(logits, (*range(nb), nb + 1, nb)))  # (B, M, N)
        pooled = T.matmul(maps, tokens)  # (B, M, D)
        return T.reshape(pooled, (*batch, self.out_dim)), maps


@dataclass
class AfaHead:
    """Single learned query cross-attending over the tokens, split into heads.

    Head ``i`` uses columns ``i*d_h:(i+1)*d_h`` of the key and value projections
    and row ``i`` of the query matrix. Head outputs are concatenated.
    """

    dim: int
    heads: int = 4
    output_dim: int = 64
    query_init: float = 16.0  # std of the query entries
    key_init: float = 0.25  # key projection std, in units of 1/sqrt(dim)

    kind = "afa"

    def __post_init__(self):
        if self.heads < 1 or self.output_dim % self.heads:
            raise ConfigurationError(
                f"output_dim {self.output_dim} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.output_dim // self.heads

    @property
    def out_dim(self) -> int:
        return self.output_dim

    def init_params(self, rng) -> dict[str, np.ndarray]:
        d, o = self.dim, self.output_dim
        return {
            "afa_q": rng.normal(0.0, self.query_init, (self.heads, self.head_dim)),
            "afa_wk": rng.normal(0.0, self.key_init * math.sqrt(1.0 / d), (d, o)),
            "afa_wv": rng.normal(0.0, math.sqrt(1.0 / d), (d, o)),
        }

    def forward(self, tape: Tape, tokens: Node, params: dict[str, Node]):
        # Associativity keeps the big (B*N x D) products narrow:
        #   q_i . (F W_K,i)^T = F (W_K,i q_i^T)   and   w_i (F W_V,i) = (w_i F) W_V,i
        batch = tokens.shape[:-2]
        nb = len(batch)
        h, dh, d = self.heads, self.head_dim, self.dim
        wk = T.transpose(T.reshape(params["afa_wk"], (d, h, dh)), (1, 0, 2))  # (h, D, dh)
        q = T.reshape(params["afa_q"], (h, dh, 1))
        folded = T.transpose(T.reshape(T.matmul(wk, q), (h, d)))  # (D, h)
        logits = T.transpose(T.matmul(tokens, folded), (*range(nb), nb + 1, nb))  # (B, h, N)
        weights = T.softmax_rows(T.scale(logits, 1.0 / math.sqrt(dh)))
        pooled = T.matmul(weights, tokens)  # (B, h, D)
        flat = T.reshape(pooled, (-1, h, d))
        per_head = T.transpose(flat, (1, 0, 2))  # (h, B, D)
        wv = T.transpose(T.reshape(params["afa_wv"], (d, h, dh)), (1, 0, 2))  # (h, D, dh)
        out = T.transpose(T.matmul(per_head, wv), (1, 0, 2))  # (B, h, dh)
        return T.reshape(out, (*batch, self.output_dim)), weights


def make_head(kind: str, height: int, width: int, dim: int, *, heads: int = 4,
              output_dim: int = 64, tokens: int = 4, hidden: int = 32):
    if kind == "mean":
        return MeanPoolHead(dim)
    if kind == "spatial_softmax":
        return SpatialSoftmaxHead(height, width, dim)
    if kind == "token_learner":
        return TokenLearnerHead(dim, tokens=tokens, hidden=hidden)
    if kind == "afa":
        return AfaHead(dim, heads=heads, output_dim=output_dim)
    raise ConfigurationError(f"unknown pooling kind {kind!r}; expected one of {POOLING_KINDS}")


def _run_single(head, grid: np.ndarray, params: dict[str, np.ndarray] | None):
    grid = _check_grid(grid)
    h, w, d = grid.shape
    with Tape() as tape:
        tokens = tape.constant(grid.reshape(1, h * w, d))
        nodes = {k: tape.leaf(v) for k, v in (params or {}).items()}
        feats, weights = head.forward(tape, tokens, nodes)
        return feats.value[0], (None if weights is None else weights.value[0])


def mean_pool(grid) -> np.ndarray:
    grid = _check_grid(grid)
    return _run_single(MeanPoolHead(grid.shape[2]), grid, None)[0]


def spatial_softmax(grid) -> np.ndarray:
    """Expected (x, y) per channel, interleaved as ``[x_0, y_0, x_1, y_1, ...]``."""
    grid = _check_grid(grid)
    h, w, d = grid.shape
    return _run_single(SpatialSoftmaxHead(h, w, d), grid, None)[0]


def token_learner(grid, head: TokenLearnerHead, params: dict[str, np.ndarray]):
    grid = _check_grid(grid)
    feats, maps = _run_single(head, grid, params)
    return feats.reshape(head.tokens, head.dim), AttentionRecord(maps, grid.shape[:2])


def afa_pool(grid, head: AfaHead, params: dict[str, np.ndarray]):
    grid = _check_grid(grid)
    if grid.shape[2] != head.dim:
        raise DimensionError(f"grid dim {grid.shape[2]} does not match AFA projections ({head.dim})")
    feats, weights = _run_single(head, grid, params)
    return feats, AttentionRecord(weights, grid.shape[:2])


def pool(kind: str, grid, head=None, params: dict[str, np.ndarray] | None = None):
    """Dispatch to one of the four heads. Returns ``(features, record_or_None)``."""
    grid = _check_grid(grid)
    if kind == "mean":
        return mean_pool(grid), None
    if kind == "spatial_softmax":
        return spatial_softmax(grid), None
    if kind == "token_learner":
        feats, rec = token_learner(grid, head, params)
        return feats.reshape(-1), rec
    if kind == "afa":
        return afa_pool(grid, head, params)
    raise ConfigurationError(f"unknown pooling kind {kind!r}; expected one of {POOLING_KINDS}")
