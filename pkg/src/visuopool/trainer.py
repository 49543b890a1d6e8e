"""Behaviour-cloning training loop and the ID/OOD evaluation harness."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import CONDITIONS, FORMAT_VERSION, ExperimentConfig
from .env import (EnvConfig, SceneConfig, SignatureBank, WorldState, expert_action, generate_demos,
                  perturb_lighting, perturb_texture, render_tokens, sample_episode_start, step,
                  task_mask)
from .metrics import PredictorSample, attention_entropy, attention_mass
from .optim import AdamState, LrSchedule, adam_update, lr_at
from .policy import Policy, loss_and_grads
from .pooling import AttentionRecord, ConfigurationError
from .tape import ContractError

log = logging.getLogger(__name__)

_INIT_TAG = 0x1417
_BATCH_TAG = 0xBA7C
_EVAL_TAG = 0xE7A1
_STATS_FRAMES = 512


def build_policy(config: ExperimentConfig) -> Policy:
    e, p = config.env, config.pooling
    return Policy.build(p.kind, height=e.height, width=e.width, dim=e.dim,
                        temporal_dim=p.temporal_dim, horizon=e.horizon, hidden=p.hidden,
                        heads=p.heads, output_dim=p.output_dim, tokens=p.tokens,
                        tl_hidden=p.tl_hidden)


def init_params(policy: Policy, seed: int) -> dict[str, np.ndarray]:
    return policy.init_params(np.random.default_rng([_INIT_TAG, seed]))


def flatten_demos(demos):
    """Stack every timestep of every demo into (tokens, proprio, actions, timesteps)."""
    if not demos:
        raise ContractError("need at least one demonstration")
    tokens = np.concatenate([d.tokens.reshape(len(d), -1, d.tokens.shape[-1]) for d in demos])
    proprio = np.concatenate([d.proprio for d in demos])
    actions = np.concatenate([d.actions for d in demos])
    ts = np.concatenate([d.timesteps for d in demos])
    if len(ts) == 0:
        raise ContractError("demonstrations contain no timesteps")
    return tokens, proprio, actions, ts


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_history: list[tuple[int, float]]
    seed: int
    stats: dict[str, np.ndarray] = field(default_factory=dict)  # pooled-feature mean / var


def lr_schedule(cfg) -> LrSchedule:
    """Cosine schedule for a train section; warm-up is a fraction of the run."""
    return LrSchedule(cfg.peak_lr, int(cfg.warmup_fraction * cfg.steps), cfg.steps)


def train(config: ExperimentConfig, demos, seed: int, policy: Policy | None = None) -> TrainResult:
    """Adam on uniformly sampled minibatches under cosine-with-warmup.

    The minibatch loss is logged after every ``log_every`` updates.

    Pooled features are standardised with fixed statistics. A trainable head
    has them re-measured every ``stats_every`` updates on a fixed subset of
    frames; after the last update they are measured over every demo frame,
    and evaluation normalises with those.
    """
    policy = policy or build_policy(config)
    tokens, proprio, actions, ts = flatten_demos(demos)
    pooled = policy.fixed_head
    if pooled:
        tokens = policy.precompute(tokens)
    cfg = config.train
    params = init_params(policy, seed)
    history: list[tuple[int, float]] = []
    stats = policy.feature_stats(params, tokens, pooled)
    if cfg.steps == 0:
        return TrainResult(params, history, seed, stats)
    schedule = lr_schedule(cfg)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([_BATCH_TAG, seed])
    probe = np.sort(rng.choice(len(ts), size=min(len(ts), _STATS_FRAMES), replace=False))
    for it in range(cfg.steps):
        if not pooled and it and it % cfg.stats_every == 0:
            stats = policy.feature_stats(params, tokens[probe])
        idx = rng.integers(0, len(ts), size=cfg.batch_size)
        batch = (tokens[idx], proprio[idx], actions[idx], ts[idx])
        loss, grads = loss_and_grads(policy, params, batch, pooled=pooled, stats=stats)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {it}")
        params = adam_update(params, grads, state, lr_at(schedule, it + 1))
        if (it + 1) % cfg.log_every == 0:
            history.append((it + 1, loss))
            if (it + 1) % (cfg.log_every * 20) == 0:
                log.info("%s seed %d step %d loss %.5f", config.pooling.kind, seed, it + 1, loss)
    if not pooled:
        stats = policy.feature_stats(params, tokens)
    return TrainResult(params, history, seed, stats)


def _arrays_to_json(arrays: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in sorted(arrays.items())}


def _arrays_from_json(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def checkpoint_dict(config: ExperimentConfig, result: TrainResult) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "config_hash": config.model_hash(),
        "seed": result.seed,
        "params": _arrays_to_json(result.params),
        "feature_stats": _arrays_to_json(result.stats),
        "loss_history": [[s, l] for s, l in result.loss_history],
    }


def params_from_checkpoint(ckpt: dict) -> dict[str, np.ndarray]:
    return _arrays_from_json(ckpt["params"])


def result_from_checkpoint(ckpt: dict) -> TrainResult:
    return TrainResult(_arrays_from_json(ckpt["params"]),
                       [(int(s), float(l)) for s, l in ckpt.get("loss_history", [])],
                       int(ckpt["seed"]), _arrays_from_json(ckpt["feature_stats"]))


# ---------------------------------------------------------------- evaluation

def condition_scene(condition: str, seed: int) -> SceneConfig:
    base = SceneConfig(seed=seed)
    if condition == "in_domain":
        return base
    if condition == "lighting":
        return perturb_lighting(base, seed)
    if condition == "texture":
        return perturb_texture(base, seed)
    raise ConfigurationError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


class PolicyActor:
    """Mean actions of a trained policy (no sampling at evaluation time)."""

    def __init__(self, policy: Policy, params: dict[str, np.ndarray], stats: dict):
        self.policy = policy
        self.params = params
        self.stats = stats

    def __call__(self, tokens, proprio, timesteps, states):
        mu, weights = self.policy.act(self.params, self.stats, tokens, proprio, timesteps)
        return np.clip(mu, -1.0, 1.0), weights


class ExpertActor:
    """The scripted expert, reading the true state; used as an evaluation oracle."""

    def __init__(self, env: EnvConfig):
        self.env = env

    def __call__(self, tokens, proprio, timesteps, states):
        return np.array([expert_action(s, self.env) for s in states]), None


class ConstantActor:
    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float64)

    def __call__(self, tokens, proprio, timesteps, states):
        return np.tile(self.action, (len(states), 1)), None


@dataclass
class EpisodeTrace:
    episode: int
    condition: str
    seed: int
    success: bool
    final_distance: float
    steps: int
    mass: float | None = None
    entropy: float | None = None


def episode_seed(eval_seed: int, condition: str, episode: int) -> int:
    return int(np.random.SeedSequence(
        [_EVAL_TAG, eval_seed, CONDITIONS.index(condition), episode]).generate_state(1)[0])


def evaluate(actor, condition: str, n_episodes: int, seed: int, env: EnvConfig,
             bank: SignatureBank, run_seed: int = 0) -> dict:
    """Closed-loop episodes under one condition; all active episodes step as a batch.

    Attention mass and entropy are averaged over each episode's timesteps.
    """
    if condition not in CONDITIONS:
        raise ConfigurationError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    seeds = [episode_seed(seed, condition, i) for i in range(n_episodes)]
    scenes = [condition_scene(condition, s) for s in seeds]
    states = [sample_episode_start(np.random.default_rng(s), env) for s in seeds]
    done = [False] * n_episodes
    steps = [0] * n_episodes
    mass_sum = [0.0] * n_episodes
    ent_sum = [0.0] * n_episodes
    has_attn = False
    grid = (env.height, env.width)
    for t in range(env.horizon):
        active = [i for i in range(n_episodes) if not done[i]]
        if not active:
            break
        obs = np.stack([render_tokens(states[i], scenes[i], bank, env).reshape(-1, env.dim)
                        for i in active])
        proprio = np.array([states[i].agent_pos for i in active])
        actions, weights = actor(obs, proprio, np.full(len(active), t), [states[i] for i in active])
        for row, i in enumerate(active):
            if weights is not None:
                has_attn = True
                rec = AttentionRecord(weights[row], grid)
                mass_sum[i] += attention_mass(rec, task_mask(states[i], env))
                ent_sum[i] += attention_entropy(rec)
            states[i] = step(states[i], actions[row], env)
            steps[i] += 1
            if states[i].distance <= env.success_radius:
                done[i] = True
    traces = []
    for i in range(n_episodes):
        success = states[i].distance <= env.success_radius
        traces.append(EpisodeTrace(i, condition, seeds[i], bool(success), states[i].distance,
                                   steps[i],
                                   mass_sum[i] / steps[i] if has_attn and steps[i] else None,
                                   ent_sum[i] / steps[i] if has_attn and steps[i] else None))
    rate = float(np.mean([tr.success for tr in traces])) if traces else 0.0
    out = {"condition": condition, "seed": run_seed, "success_rate": rate, "traces": traces}
    if has_attn:
        out["mass"] = float(np.mean([tr.mass for tr in traces if tr.mass is not None]))
        out["entropy"] = float(np.mean([tr.entropy for tr in traces if tr.entropy is not None]))
    return out


def iqm(values) -> float:
    """Interquartile mean: drop floor(n/4) values at each end, average the rest."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ContractError("iqm of an empty list")
    k = len(vals) // 4
    kept = vals[k:len(vals) - k]
    return math.fsum(kept) / len(kept)


# ---------------------------------------------------------------- experiments

@dataclass
class EvalReport:
    kind: str
    config: dict
    per_seed: dict[str, list[float]] = field(default_factory=dict)  # condition -> rate per seed
    iqm: dict[str, float] = field(default_factory=dict)
    attention: dict[str, list[dict]] = field(default_factory=dict)  # condition -> [{seed, mass, entropy}]
    traces: list[dict] = field(default_factory=list)
    loss_histories: dict[str, list[list[float]]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {"format_version": self.format_version, "kind": self.kind, "config": self.config,
                "seeds": self.seeds, "per_seed": self.per_seed, "iqm": self.iqm,
                "attention": self.attention, "traces": self.traces,
                "loss_histories": self.loss_histories}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(kind=d["kind"], config=d["config"], per_seed=d["per_seed"], iqm=d["iqm"],
                   attention=d["attention"], traces=d["traces"],
                   loss_histories=d["loss_histories"], seeds=d["seeds"],
                   format_version=d["format_version"])

    def predictor_samples(self) -> list[PredictorSample]:
        """One sample per (seed, OOD condition) for heads that expose attention."""
        out = []
        for cond in ("lighting", "texture"):
            for row in self.attention.get(cond, []):
                out.append(PredictorSample(f"{self.kind}-s{row['seed']}/{cond}", self.kind,
                                           row["mass"], row["entropy"], row["success_rate"]))
        return out


def trace_row(trace: EpisodeTrace) -> dict:
    return {"episode": trace.episode, "condition": trace.condition, "seed": trace.seed,
            "success": trace.success, "final_distance": trace.final_distance, "steps": trace.steps}


def add_fragment(report: EvalReport, fragment: dict, run_seed: int) -> None:
    cond = fragment["condition"]
    report.per_seed.setdefault(cond, []).append(fragment["success_rate"])
    if "mass" in fragment:
        report.attention.setdefault(cond, []).append(
            {"seed": run_seed, "mass": fragment["mass"], "entropy": fragment["entropy"],
             "success_rate": fragment["success_rate"]})
    for tr in fragment["traces"]:
        row = trace_row(tr)
        row["run_seed"] = run_seed
        report.traces.append(row)


def finalize(report: EvalReport) -> EvalReport:
    report.iqm = {c: iqm(v) for c, v in report.per_seed.items()}
    return report


def run_experiment(config: ExperimentConfig, demos=None) -> EvalReport:
    """Train one policy per seed on a shared demo set and evaluate every condition."""
    env = config.env.env_config()
    bank = SignatureBank.create(env)
    if demos is None:
        demos = generate_demos(config.env.n_demos, seed=config.env.demo_seed, config=env, bank=bank)
    policy = build_policy(config)
    report = EvalReport(kind=config.pooling.kind, config=config.to_dict(),
                        seeds=list(config.train.seeds))
    for seed in config.train.seeds:
        result = train(config, demos, seed, policy)
        report.loss_histories[str(seed)] = [[s, l] for s, l in result.loss_history]
        actor = PolicyActor(policy, result.params, result.stats)
        for cond in config.eval.conditions:
            frag = evaluate(actor, cond, config.eval.episodes, config.eval.seed, env, bank, seed)
            add_fragment(report, frag, seed)
    return finalize(report)
