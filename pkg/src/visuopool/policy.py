"""Behaviour-cloned policy: pooled tokens + proprioception + time -> action mean."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .pooling import ConfigurationError, make_head
from .tape import ContractError, DimensionError, Tape


def temporal_embed(t, horizon: int, dim: int) -> np.ndarray:
    """Sinusoids of ``t / horizon`` at frequencies pi * 2**j, j = 0..dim/2-1.

    The lowest frequency covers half a period over the episode, so the map is
    injective on [0, horizon]. Frequencies are capped at pi * horizon.
    Accepts a scalar or an array of timesteps; returns ``(..., dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ConfigurationError(f"temporal embedding dim must be even and positive, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > horizon):
        raise ContractError(f"timestep outside [0, {horizon}]")
    freqs = np.minimum(math.pi * 2.0 ** np.arange(dim // 2), math.pi * horizon)
    phase = (t / horizon)[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


@dataclass(frozen=True)
class ActionDistribution:
    mean: np.ndarray
    sigma: float


def sample_action(dist: ActionDistribution, rng: np.random.Generator,
                  max_rejections: int = 100) -> np.ndarray:
    """Per-dimension rejection sampling of N(mu, sigma^2) restricted to [-1, 1].

    A dimension that is still rejected after ``max_rejections`` draws falls
    back to ``clip(mu)``.
    """
    mu = np.asarray(dist.mean, dtype=np.float64)
    out = np.empty_like(mu)
    for idx in np.ndindex(mu.shape):
        for _ in range(max_rejections):
            a = rng.normal(mu[idx], dist.sigma)
            if -1.0 <= a <= 1.0:
                out[idx] = a
                break
        else:
            out[idx] = np.clip(mu[idx], -1.0, 1.0)
    return out


@dataclass(frozen=True)
class PolicyNet:
    """Four affine layers, ReLU between them, tanh on the output."""

    in_dim: int
    action_dim: int = 2
    hidden: tuple[int, ...] = (256, 256, 256)

    def __post_init__(self):
        if len(self.hidden) != 3:
            raise ConfigurationError("the policy MLP has exactly 4 affine layers (3 hidden widths)")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.action_dim]

    def init_params(self, rng) -> dict[str, np.ndarray]:
        params = {}
        widths = self.widths
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            std = math.sqrt(2.0 / a) if i < 4 else 0.1 * math.sqrt(1.0 / a)
            params[f"l{i}_w"] = rng.normal(0.0, std, (a, b))
            params[f"l{i}_b"] = np.zeros((1, b))
        return params

    def forward(self, tape: Tape, x: T.Node, params: dict[str, T.Node]) -> T.Node:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"policy input width {x.shape[-1]} != {self.in_dim}")
        h = x
        for i in range(1, 5):
            h = T.add(T.matmul(h, params[f"l{i}_w"]), params[f"l{i}_b"])
            h = T.relu(h) if i < 4 else T.tanh(h)
        return h


NORM_EPS = 1e-5
FEATURE_STD = 0.3  # target spread of each standardised pooled feature


class Policy:
    """Pooling head and MLP sharing one flat parameter dict.

    Pooled features are standardised per dimension before the MLP using
    ``stats`` (mean and variance from :meth:`feature_stats`) and rescaled to a
    spread of ``FEATURE_STD``. The statistics enter the graph as constants;
    with ``stats=None`` features pass through raw.
    """

    def __init__(self, head, net: PolicyNet, *, proprio_dim: int, temporal_dim: int,
                 horizon: int, grid_shape: tuple[int, int]):
        self.head = head
        self.net = net
        self.proprio_dim = proprio_dim
        self.temporal_dim = temporal_dim
        self.horizon = horizon
        self.grid_shape = tuple(grid_shape)
        if net.in_dim != head.out_dim + proprio_dim + temporal_dim:
            raise DimensionError("policy input width does not match pooled + proprio + temporal")

    @classmethod
    def build(cls, kind: str, *, height: int, width: int, dim: int, proprio_dim: int = 2,
              action_dim: int = 2, temporal_dim: int = 8, horizon: int = 60,
              hidden: tuple[int, ...] = (256, 256, 256), heads: int = 4, output_dim: int = 64,
              tokens: int = 4, tl_hidden: int = 32) -> "Policy":
        head = make_head(kind, height, width, dim, heads=heads, output_dim=output_dim,
                         tokens=tokens, hidden=tl_hidden)
        net = PolicyNet(head.out_dim + proprio_dim + temporal_dim, action_dim, tuple(hidden))
        return cls(head, net, proprio_dim=proprio_dim, temporal_dim=temporal_dim,
                   horizon=horizon, grid_shape=(height, width))

    def init_params(self, rng) -> dict[str, np.ndarray]:
        return {**self.head.init_params(rng), **self.net.init_params(rng)}

    @property
    def fixed_head(self) -> bool:
        """True when the pooling head has no trainable parameters."""
        return not self.head.init_params(np.random.default_rng(0))

    def precompute(self, tokens, chunk: int = 512) -> np.ndarray:
        """Pooled features of a parameter-free head, so training can skip re-pooling."""
        tokens = np.asarray(tokens, dtype=np.float64)
        out = []
        for start in range(0, len(tokens), chunk):
            with Tape() as tape:
                feats, _ = self.head.forward(tape, tape.constant(tokens[start:start + chunk]), {})
                out.append(feats.value)
        return np.concatenate(out)

    def pooled_features(self, params: dict[str, np.ndarray], tokens, chunk: int = 256) -> np.ndarray:
        """Raw (unnormalised) head outputs for ``(B, N, D)`` tokens."""
        if self.fixed_head:
            return self.precompute(tokens, chunk)
        tokens = np.asarray(tokens, dtype=np.float64)
        out = []
        for start in range(0, len(tokens), chunk):
            with Tape() as tape:
                nodes = {k: tape.constant(v) for k, v in params.items()}
                feats, _ = self.head.forward(tape, tape.constant(tokens[start:start + chunk]), nodes)
                out.append(feats.value)
        return np.concatenate(out)

    def feature_stats(self, params: dict[str, np.ndarray], tokens, pooled: bool = False) -> dict:
        """Mean and variance of the pooled features over a whole dataset."""
        feats = np.asarray(tokens, dtype=np.float64) if pooled else self.pooled_features(params, tokens)
        return {"mean": feats.mean(axis=0, keepdims=True), "var": feats.var(axis=0, keepdims=True)}

    def _normalize(self, tape: Tape, feats: T.Node, stats: dict | None) -> T.Node:
        if stats is None:
            return feats
        shift = tape.constant(-np.asarray(stats["mean"]))
        inv = tape.constant(FEATURE_STD / np.sqrt(np.asarray(stats["var"]) + NORM_EPS))
        return T.mul(T.add(feats, shift), inv)

    def graph(self, tape: Tape, params: dict[str, T.Node], tokens, proprio, timesteps,
              pooled: bool = False, stats: dict | None = None):
        """Build the forward graph for a batch. Returns ``(mu, attention_or_None)``.

        ``tokens`` is ``(B, N, D)`` (or ``(B, out_dim)`` features from
        :meth:`precompute` when ``pooled``), ``proprio`` ``(B, P)``, ``timesteps`` ``(B,)``.
        """
        tokens = np.asarray(tokens, dtype=np.float64)
        proprio = np.atleast_2d(np.asarray(proprio, dtype=np.float64))
        if proprio.shape[-1] != self.proprio_dim:
            raise DimensionError(f"proprio width {proprio.shape[-1]} != {self.proprio_dim}")
        if pooled:
            if not self.fixed_head:
                raise ContractError("only parameter-free heads accept precomputed features")
            pooled, attn = tape.constant(tokens), None
        else:
            pooled, attn = self.head.forward(tape, tape.constant(tokens), params)
        pooled = self._normalize(tape, pooled, stats)
        te = temporal_embed(np.asarray(timesteps), self.horizon, self.temporal_dim)
        x = T.concat_cols(T.concat_cols(pooled, tape.constant(proprio)),
                          tape.constant(te.reshape(-1, self.temporal_dim)))
        return self.net.forward(tape, x, params), attn

    def act(self, params: dict[str, np.ndarray], stats: dict | None, tokens, proprio, timesteps):
        """Mean actions and attention weights as plain arrays (no gradients kept)."""
        with Tape() as tape:
            nodes = {k: tape.constant(v) for k, v in params.items()}
            mu, attn = self.graph(tape, nodes, tokens, proprio, timesteps, stats=stats)
            weights = None
            if attn is not None and self.head.kind in ("afa", "token_learner"):
                weights = attn.value
            return mu.value, weights


def policy_forward(pooled, proprio, t: int, net: PolicyNet, params: dict[str, np.ndarray],
                   horizon: int, temporal_dim: int, stats: dict | None = None) -> np.ndarray:
    """Action mean for one already-pooled observation (standardised by ``stats`` if given)."""
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    if stats is not None:
        pooled = FEATURE_STD * (pooled - stats["mean"]) / np.sqrt(stats["var"] + NORM_EPS)
    proprio = np.atleast_2d(np.asarray(proprio, dtype=np.float64))
    te = temporal_embed(t, horizon, temporal_dim).reshape(1, -1)
    x = np.concatenate([pooled, proprio, te], axis=1)
    if x.shape[1] != net.in_dim:
        raise DimensionError(f"policy input width {x.shape[1]} != {net.in_dim}")
    with Tape() as tape:
        nodes = {k: tape.constant(v) for k, v in params.items()}
        return net.forward(tape, tape.constant(x), nodes).value[0]


def bc_loss_node(policy: Policy, tape: Tape, params: dict[str, T.Node], batch,
                 pooled: bool = False, stats: dict | None = None) -> T.Node:
    """Squared L2 action error, summed over action dims and averaged over the batch.

    ``batch`` is ``(tokens, proprio, actions, timesteps)``.
    """
    tokens, proprio, actions, timesteps = batch
    actions = np.asarray(actions, dtype=np.float64)
    if actions.size == 0:
        raise ContractError("bc_loss needs a nonempty batch")
    actions = actions.reshape(len(actions), -1)
    mu, _ = policy.graph(tape, params, tokens, proprio, timesteps, pooled=pooled, stats=stats)
    err = T.add(mu, tape.constant(-actions))
    return T.scale(T.sum_all(T.mul(err, err)), 1.0 / actions.shape[0])


def bc_loss(policy: Policy, params: dict[str, np.ndarray], batch, stats: dict | None = None) -> float:
    if len(batch[2]) == 0:
        raise ContractError("bc_loss needs a nonempty batch")
    with Tape() as tape:
        nodes = {k: tape.constant(v) for k, v in params.items()}
        return float(bc_loss_node(policy, tape, nodes, batch, stats=stats).value[0, 0])


def loss_and_grads(policy: Policy, params: dict[str, np.ndarray], batch, pooled: bool = False,
                   stats: dict | None = None):
    with Tape() as tape:
        nodes = {k: tape.leaf(v) for k, v in params.items()}
        loss = bc_loss_node(policy, tape, nodes, batch, pooled=pooled, stats=stats)
        T.backward(tape, loss)
        return float(loss.value[0, 0]), {k: n.grad for k, n in nodes.items()}
