import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visuopool.config import ExperimentConfig
from visuopool.env import (SignatureBank, generate_demos, render_tokens, sample_episode_start, step,
                           task_mask)
from visuopool.metrics import attention_entropy, attention_mass
from visuopool.policy import bc_loss
from visuopool.pooling import AttentionRecord, ConfigurationError
from visuopool.tape import ContractError
from visuopool.trainer import (ConstantActor, EvalReport, ExpertActor, PolicyActor, build_policy,
                               checkpoint_dict, condition_scene, episode_seed, evaluate,
                               flatten_demos, init_params, iqm, result_from_checkpoint,
                               run_experiment, train)


def tiny_config(kind="afa", steps=60, seeds=(1,), episodes=3, **train_kw):
    return ExperimentConfig.from_dict({
        "env": {"n_demos": 3},
        "pooling": {"kind": kind, "hidden": [16, 16, 16], "heads": 2, "output_dim": 8,
                    "tokens": 2, "tl_hidden": 4},
        "train": {"steps": steps, "batch_size": 16, "seeds": list(seeds), **train_kw},
        "eval": {"episodes": episodes},
    })


@pytest.fixture(scope="module")
def demos():
    cfg = tiny_config()
    return generate_demos(3, seed=cfg.env.demo_seed, config=cfg.env.env_config())


# ---------------------------------------------------------------- iqm

def test_iqm_singleton():
    assert iqm([0.5]) == 0.5


def test_iqm_of_one_to_eight():
    assert iqm([1, 2, 3, 4, 5, 6, 7, 8]) == 4.5


def test_iqm_drops_nothing_below_four():
    assert iqm([0, 0, 100]) == pytest.approx(100 / 3, abs=1e-12)


def test_iqm_empty():
    with pytest.raises(ContractError):
        iqm([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers(0, 19), st.floats(0, 1))
def test_iqm_monotone_and_constant(values, index, bump):
    assert iqm([values[0]] * len(values)) == pytest.approx(values[0], abs=1e-12)
    raised = list(values)
    raised[index % len(values)] += bump
    assert iqm(raised) >= iqm(values) - 1e-12


# ---------------------------------------------------------------- training

def test_zero_steps_returns_initialisation(demos):
    cfg = tiny_config(steps=0)
    policy = build_policy(cfg)
    result = train(cfg, demos, 1, policy)
    init = init_params(policy, 1)
    assert result.loss_history == []
    assert all(np.array_equal(result.params[k], init[k]) for k in init)


def test_training_is_deterministic(demos):
    cfg = tiny_config(steps=40)
    a = json.dumps(checkpoint_dict(cfg, train(cfg, demos, 2)), sort_keys=True)
    b = json.dumps(checkpoint_dict(cfg, train(cfg, demos, 2)), sort_keys=True)
    assert a == b


def test_loss_logged_every_fifty_steps(demos):
    cfg = tiny_config(steps=150)
    hist = train(cfg, demos, 1).loss_history
    assert [s for s, _ in hist] == [50, 100, 150]


def test_empty_demos():
    with pytest.raises(ContractError):
        train(tiny_config(), [], 1)


@pytest.mark.parametrize("kind", ["mean", "spatial_softmax", "token_learner", "afa"])
def test_loss_drops_and_stays_finite(demos, kind):
    cfg = tiny_config(kind, steps=800)
    hist = train(cfg, demos, 3).loss_history
    assert all(np.isfinite(l) for _, l in hist)
    policy = build_policy(cfg)
    batch = flatten_demos(demos)
    params = init_params(policy, 3)
    initial = bc_loss(policy, params, batch, policy.feature_stats(params, batch[0]))
    assert np.mean([l for _, l in hist[-4:]]) < 0.1 * initial


def test_checkpoint_round_trip(demos):
    cfg = tiny_config(steps=20)
    result = train(cfg, demos, 4)
    ckpt = json.loads(json.dumps(checkpoint_dict(cfg, result)))
    back = result_from_checkpoint(ckpt)
    assert back.seed == 4 and back.loss_history == result.loss_history
    for k in result.params:
        assert np.array_equal(back.params[k], result.params[k])
    for k in result.stats:
        assert np.array_equal(back.stats[k], result.stats[k])
    assert ckpt["config"] == cfg.to_dict() and ckpt["format_version"] == 1


# ---------------------------------------------------------------- evaluation

def test_expert_solves_every_condition():
    cfg = tiny_config()
    env = cfg.env.env_config()
    bank = SignatureBank.create(env)
    for cond in ("in_domain", "lighting", "texture"):
        frag = evaluate(ExpertActor(env), cond, 20, 0, env, bank)
        assert frag["success_rate"] == 1.0 and "mass" not in frag


def test_zero_policy_almost_never_succeeds():
    cfg = tiny_config()
    env = cfg.env.env_config()
    frag = evaluate(ConstantActor([0.0, 0.0]), "in_domain", 200, 0, env, SignatureBank.create(env))
    # starts inside the success radius are redrawn, so a still agent never succeeds
    assert frag["success_rate"] == 0.0
    assert all(tr.steps == env.horizon for tr in frag["traces"])


def test_unknown_condition():
    cfg = tiny_config()
    env = cfg.env.env_config()
    with pytest.raises(ConfigurationError):
        evaluate(ConstantActor([0, 0]), "night", 1, 0, env, SignatureBank.create(env))


def test_evaluation_is_deterministic_and_records_attention(demos):
    cfg = tiny_config(steps=30)
    env = cfg.env.env_config()
    bank = SignatureBank.create(env)
    policy = build_policy(cfg)
    result = train(cfg, demos, 1, policy)
    actor = PolicyActor(policy, result.params, result.stats)
    a = evaluate(actor, "texture", 3, 5, env, bank, 1)
    b = evaluate(actor, "texture", 3, 5, env, bank, 1)
    assert a["success_rate"] == b["success_rate"] and a["mass"] == b["mass"]
    assert [t.final_distance for t in a["traces"]] == [t.final_distance for t in b["traces"]]
    assert 0.0 <= a["mass"] <= 1.0 and 0.0 <= a["entropy"] <= np.log(64) + 1e-12


def test_attention_statistics_average_over_timesteps(demos):
    # replay episode 0 step by step and average mass / entropy by hand
    cfg = tiny_config(steps=30)
    env = cfg.env.env_config()
    bank = SignatureBank.create(env)
    policy = build_policy(cfg)
    result = train(cfg, demos, 1, policy)
    actor = PolicyActor(policy, result.params, result.stats)
    frag = evaluate(actor, "in_domain", 1, 9, env, bank, 1)
    seed = episode_seed(9, "in_domain", 0)
    scene = condition_scene("in_domain", seed)
    state = sample_episode_start(np.random.default_rng(seed), env)
    masses, ents = [], []
    for t in range(frag["traces"][0].steps):
        tokens = render_tokens(state, scene, bank, env).reshape(1, -1, env.dim)
        act, w = actor(tokens, np.array([state.agent_pos]), np.array([t]), [state])
        rec = AttentionRecord(w[0], (env.height, env.width))
        masses.append(attention_mass(rec, task_mask(state, env)))
        ents.append(attention_entropy(rec))
        state = step(state, act[0], env)
    trace = frag["traces"][0]
    assert trace.mass == pytest.approx(np.mean(masses), abs=1e-12)
    assert trace.entropy == pytest.approx(np.mean(ents), abs=1e-12)


def test_eval_seeds_disjoint_from_demo_seeds():
    demo_seeds = {int(np.random.SeedSequence([0, i]).generate_state(1)[0]) for i in range(25)}
    eval_seeds = {episode_seed(0, c, i) for c in ("in_domain", "lighting", "texture")
                  for i in range(100)}
    assert not demo_seeds & eval_seeds
    assert len(eval_seeds) == 300


# ---------------------------------------------------------------- experiments

def test_run_experiment_smoke_and_round_trip():
    cfg = tiny_config(steps=20, episodes=1)
    rep = run_experiment(cfg)
    assert set(rep.per_seed) == {"in_domain", "lighting", "texture"}
    assert all(len(v) == 1 and 0 <= v[0] <= 1 for v in rep.per_seed.values())
    assert len(rep.traces) == 3 and set(rep.attention) == set(rep.per_seed)
    assert rep.loss_histories == {"1": []}
    d = json.loads(json.dumps(rep.to_dict()))
    assert EvalReport.from_dict(d).to_dict() == rep.to_dict()


def test_run_experiment_single_condition():
    cfg = tiny_config(steps=0, episodes=2)
    cfg = replace(cfg, eval=replace(cfg.eval, conditions=("in_domain",)))
    rep = run_experiment(cfg)
    assert list(rep.iqm) == ["in_domain"]


def test_trained_policy_not_worse_than_untrained(demos):
    cfg = tiny_config("mean", steps=400, episodes=30)
    env = cfg.env.env_config()
    bank = SignatureBank.create(env)
    policy = build_policy(cfg)
    trained = train(cfg, demos, 1, policy)
    untrained = train(replace(cfg, train=replace(cfg.train, steps=0)), demos, 1, policy)
    rate = lambda r: evaluate(PolicyActor(policy, r.params, r.stats), "in_domain", 30, 0, env,
                              bank)["success_rate"]
    assert rate(trained) >= rate(untrained)
