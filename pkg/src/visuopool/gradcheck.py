"""Central finite-difference audits of tape gradients.

The error for one parameter array is the largest absolute deviation between
analytic and numerical gradients, divided by the larger of the two gradients'
max-norms. It is scale-free and does not blow up on entries whose true
gradient is ~0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import Policy, loss_and_grads, bc_loss

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5


def numerical_grad(f, x: np.ndarray, step: float = DEFAULT_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; only ``coords`` (flat indices) if given."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, coords=None) -> float:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    if coords is not None:
        a, n = a[coords], n[coords]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_function(f_and_grad, f, x: np.ndarray, step: float = DEFAULT_STEP) -> float:
    """Audit a single-array function: ``f_and_grad()`` returns the analytic gradient."""
    return relative_error(f_and_grad(), numerical_grad(f, x, step))


@dataclass
class AuditRow:
    component: str
    n_params: int
    max_rel_error: float | None  # None when the component has nothing to differentiate
    worst_param: str | None

    def passed(self, tol: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error is None or self.max_rel_error <= tol


def _perturbed(params: dict[str, np.ndarray], rng) -> dict[str, np.ndarray]:
    # move off the zero-bias initialisation so ReLUs sit at generic points
    return {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}


def audit_policy(policy: Policy, params: dict[str, np.ndarray], batch, *,
                 step: float = DEFAULT_STEP, coords_per_param: int | None = None,
                 rng=None, stats: dict | None = None) -> dict[str, float]:
    """Per-parameter relative errors of the BC-loss gradient.

    With ``coords_per_param`` only that many randomly chosen entries of each
    array are differenced; otherwise every entry is. Feature statistics are
    measured on the batch once (at the unperturbed parameters) unless given.
    """
    rng = rng or np.random.default_rng(0)
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    if stats is None:
        stats = policy.feature_stats(params, batch[0])
    _, analytic = loss_and_grads(policy, params, batch, stats=stats)
    errors = {}
    for name, value in params.items():
        coords = None
        if coords_per_param is not None and value.size > coords_per_param:
            coords = rng.choice(value.size, size=coords_per_param, replace=False)
        numeric = numerical_grad(lambda: bc_loss(policy, params, batch, stats), value, step, coords)
        errors[name] = relative_error(analytic[name], numeric, coords)
    return errors


def audit_components(policy: Policy, params: dict[str, np.ndarray], batch, **kwargs) -> list[AuditRow]:
    """Split an audit into the pooling head's parameters and the policy MLP's."""
    errors = audit_policy(policy, params, batch, **kwargs)
    head_keys = set(policy.head.init_params(np.random.default_rng(0)))
    rows = []
    for component, keys in ((policy.head.kind, head_keys), ("policy_mlp", set(errors) - head_keys)):
        if not keys:
            rows.append(AuditRow(component, 0, None, None))
            continue
        worst = max(keys, key=lambda k: errors[k])
        rows.append(AuditRow(component, sum(params[k].size for k in keys), errors[worst], worst))
    return rows


def random_batch(policy: Policy, rng, batch_size: int = 4):
    h, w = policy.grid_shape
    dim = policy.head.dim
    tokens = rng.normal(size=(batch_size, h * w, dim))
    proprio = rng.uniform(-1, 1, size=(batch_size, policy.proprio_dim))
    actions = rng.uniform(-1, 1, size=(batch_size, policy.net.action_dim))
    ts = rng.integers(0, policy.horizon + 1, size=batch_size)
    return tokens, proprio, actions, ts


def generic_params(policy: Policy, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return _perturbed(policy.init_params(rng), rng)
