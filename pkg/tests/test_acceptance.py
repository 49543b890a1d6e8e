"""End-to-end acceptance checks.

The experiment fixture drives the real command line at full desk scale
(25 demonstrations, 5000 steps, 5 seeds, 100 episodes per condition) for the
mean, AFA and TokenLearner heads, then reads every claim back from the files
it wrote. Expect roughly half an hour on one core.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from visuopool import cli
from visuopool import gradcheck as gc
from visuopool import tape as T
from visuopool.config import ExperimentConfig
from visuopool.env import N_TEXTURES, SceneConfig, perturb_lighting, perturb_texture
from visuopool.metrics import attention_entropy, pearson
from visuopool.optim import LrSchedule, lr_at
from visuopool.policy import ActionDistribution, sample_action
from visuopool.pooling import (AfaHead, AttentionRecord, TokenLearnerHead, afa_pool,
                               spatial_softmax, token_learner)
from visuopool.trainer import build_policy, iqm

from test_pooling import naive_afa, naive_spatial_softmax, naive_token_learner

KINDS = ("mean", "afa", "token_learner")


def criterion(label):
    return pytest.mark.criterion(label)


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiment")
    timings = {}
    assert cli.main(["gen-demos", "--out", str(root / "demos")]) == 0
    for kind in KINDS:
        cfg = root / f"{kind}.yaml"
        cfg.write_text(f"pooling: {{kind: {kind}}}\n")
        start = time.perf_counter()
        assert cli.main(["train", "--config", str(cfg), "--demos", str(root / "demos"),
                         "--out", str(root / kind)]) == 0
        assert cli.main(["eval", "--config", str(cfg), "--checkpoint", str(root / kind),
                         "--out", str(root / kind), "--jobs", "4"]) == 0
        timings[kind] = time.perf_counter() - start
    assert cli.main(["report", *(str(root / k) for k in KINDS), "--out", str(root / "summary")]) == 0
    reports = {k: json.loads((root / k / "report.json").read_text()) for k in KINDS}
    print({k: round(v) for k, v in timings.items()})
    return root, reports, timings


# ---------------------------------------------------------------- 1. gradient audit

@criterion("1. gradient audit")
def test_gradient_audit_all_heads_ten_seeds():
    start = time.perf_counter()
    worst = {}
    for kind in ("spatial_softmax", "token_learner", "afa"):
        policy = build_policy(ExperimentConfig().with_pooling(kind=kind))
        for seed in range(10):
            rng = np.random.default_rng([0x6C, seed])
            rows = gc.audit_components(policy, gc.generic_params(policy, seed),
                                       gc.random_batch(policy, rng), step=1e-5,
                                       coords_per_param=cli.GRADCHECK_COORDS, rng=rng)
            for row in rows:
                if row.max_rel_error is None:  # parameter-free head
                    continue
                name = f"{row.component}[{kind}]"
                worst[name] = max(worst.get(name, 0.0), row.max_rel_error)
    elapsed = time.perf_counter() - start
    print(worst, f"{elapsed:.1f}s")
    assert max(worst.values()) <= 1e-5
    assert elapsed < 60


# ---------------------------------------------------------------- 2. oracle equivalence

@criterion("2. oracle equivalence")
def test_heads_match_naive_loops_on_100_inputs():
    for seed in range(100):
        rng = np.random.default_rng([2, seed])
        grid = rng.normal(scale=2.0, size=(4, 4, 6))
        np.testing.assert_allclose(spatial_softmax(grid), naive_spatial_softmax(grid),
                                   rtol=0, atol=1e-12)
        tl = TokenLearnerHead(6, tokens=3, hidden=5)
        p = tl.init_params(rng)
        p["tl_b1"] = rng.normal(size=p["tl_b1"].shape)
        rows, rec = token_learner(grid, tl, p)
        want_rows, want_maps = naive_token_learner(grid, p)
        np.testing.assert_allclose(rows, want_rows, rtol=0, atol=1e-12)
        np.testing.assert_allclose(rec.weights, want_maps, rtol=0, atol=1e-12)
        afa = AfaHead(6, heads=2, output_dim=4, query_init=1.0, key_init=1.0)
        p = afa.init_params(rng)
        feats, rec = afa_pool(grid, afa, p)
        want, want_w = naive_afa(grid, p, 2)
        np.testing.assert_allclose(feats, want, rtol=0, atol=1e-12)
        np.testing.assert_allclose(rec.weights, want_w, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- 3. closed forms

@criterion("3. closed-form values")
def test_closed_form_values():
    s = T.softmax_rows(T.Tape().leaf([[1 / math.sqrt(2), 0.0]])).value[0]
    np.testing.assert_allclose(s, [0.6698, 0.3302], atol=1e-4)
    uniform = AttentionRecord(np.full((1, 64), 1 / 64), (8, 8))
    assert abs(attention_entropy(uniform) - math.log(64)) <= 1e-12
    assert iqm([1, 2, 3, 4, 5, 6, 7, 8]) == 4.5
    base = np.random.default_rng(3).normal(size=(5, 5))
    sym = base + base[::-1] + base[:, ::-1] + base[::-1, ::-1]
    np.testing.assert_allclose(spatial_softmax(sym[:, :, None]), [0.0, 0.0], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- 4. protocol shape

@pytest.mark.slow
@criterion("4. protocol shape")
def test_protocol_shape_from_artifacts(experiment):
    root, reports, _ = experiment
    manifest = json.loads((root / "demos" / "manifest.json").read_text())
    assert manifest["n_episodes"] == 25 and len(list((root / "demos").glob("episode_*.bin"))) == 25
    for kind in KINDS:
        ckpts = sorted((root / kind).glob("checkpoint-s*.json"))
        assert len(ckpts) == 5
        for path in ckpts:
            train_cfg = json.loads(path.read_text())["config"]["train"]
            assert train_cfg["batch_size"] == 128 and train_cfg["steps"] == 5000
            schedule = LrSchedule(train_cfg["peak_lr"],
                                  int(train_cfg["warmup_fraction"] * train_cfg["steps"]),
                                  train_cfg["steps"])
            seed = json.loads(path.read_text())["seed"]
            rows = list(csv.DictReader(open(root / kind / f"loss-s{seed}.csv")))
            lrs = np.array([float(r["lr"]) for r in rows])
            steps = [int(r["step"]) for r in rows]
            np.testing.assert_allclose(lrs, [lr_at(schedule, s) for s in steps], rtol=0, atol=1e-15)
            peak = int(np.argmax(lrs))
            assert 0 < peak < len(lrs) - 1
            assert np.all(np.diff(lrs[:peak + 1]) > 0) and np.all(np.diff(lrs[peak:]) <= 0)
        rep = reports[kind]
        assert rep["seeds"] == [1, 2, 3, 4, 5]
        for cond, rates in rep["per_seed"].items():
            assert len(rates) == 5 and rep["iqm"][cond] == iqm(rates)
    summary = json.loads((root / "summary" / "summary.json").read_text())
    assert summary["n_runs"] == 15 and set(summary["iqm"]) == set(KINDS)


# ---------------------------------------------------------------- 5. robustness direction

@pytest.mark.slow
@criterion("5. directional robustness")
def test_afa_robustness_direction(experiment):
    root, reports, timings = experiment
    afa, mean = reports["afa"]["iqm"], reports["mean"]["iqm"]
    print(f"in-domain afa {afa['in_domain']:.3f} mean {mean['in_domain']:.3f}; "
          f"texture afa {afa['texture']:.3f} mean {mean['texture']:.3f}; "
          f"lighting afa {afa['lighting']:.3f} mean {mean['lighting']:.3f}")
    margins = json.loads((root / "summary" / "summary.json").read_text())["afa_minus_mean"]
    assert margins["texture"] == afa["texture"] - mean["texture"]
    for kind in ("afa", "mean"):
        rows = list(csv.DictReader(open(root / kind / "traces.csv")))
        assert len(rows) == 5 * 3 * 100
    assert afa["in_domain"] >= 0.9 and mean["in_domain"] >= 0.9
    assert afa["texture"] > mean["texture"]
    assert afa["lighting"] >= mean["lighting"]
    assert timings["afa"] + timings["mean"] < 30 * 60


# ---------------------------------------------------------------- 6. predictor signs

@pytest.mark.slow
@criterion("6. predictor signs")
def test_attention_predictors_have_expected_signs(experiment):
    root, _, _ = experiment
    corr = json.loads((root / "summary" / "correlations.json").read_text())
    rows = list(csv.DictReader(open(root / "summary" / "predictors.csv")))
    assert {r["kind"] for r in rows} == {"afa", "token_learner"} and len(rows) == 20
    success = [float(r["ood_success"]) for r in rows]
    # recompute from the scatter file rather than trusting the stored numbers
    rho_mass = pearson([float(r["mass"]) for r in rows], success)
    rho_entropy = pearson([float(r["entropy"]) for r in rows], success)
    assert corr["rho_mass"] == pytest.approx(rho_mass, abs=1e-12)
    assert corr["rho_entropy"] == pytest.approx(rho_entropy, abs=1e-12)
    print(f"rho_mass {rho_mass:+.3f} rho_entropy {rho_entropy:+.3f}")
    assert rho_mass > 0
    assert rho_entropy < 0


# ---------------------------------------------------------------- 7. distribution ranges

@criterion("7. distribution ranges")
def test_perturbation_and_action_ranges():
    scenes = [perturb_lighting(SceneConfig(), s) for s in range(10_000)]
    diffuse = np.array([sc.diffuse for sc in scenes])
    specular = np.array([sc.specular for sc in scenes])
    assert diffuse.min() >= 0.3 and diffuse.max() <= 1.0
    assert specular.min() >= 0.1 and specular.max() <= 0.5
    ids = {perturb_texture(SceneConfig(), s).texture_id for s in range(10_000)}
    assert N_TEXTURES == 30 and ids == set(range(1, 30))
    rng = np.random.default_rng(7)
    mu = rng.uniform(-1.2, 1.2, size=(50_000, 2))  # 10**5 draws in total
    a = sample_action(ActionDistribution(mu, 0.5), rng)
    assert a.size == 100_000 and np.all((a >= -1.0) & (a <= 1.0))


# ---------------------------------------------------------------- 8. determinism

@criterion("8. determinism")
def test_commands_are_byte_identical_on_rerun(tmp_path):
    (tmp_path / "c.yaml").write_text("pooling: {kind: afa}\ntrain: {steps: 200, seeds: [1, 2, 3]}\n"
                                     "eval: {episodes: 10}\n")
    cfg = str(tmp_path / "c.yaml")
    outputs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        assert cli.main(["gen-demos", "--config", cfg, "--out", str(d / "demos")]) == 0
        assert cli.main(["train", "--config", cfg, "--demos", str(d / "demos"),
                         "--out", str(d / "run")]) == 0
        assert cli.main(["eval", "--config", cfg, "--checkpoint", str(d / "run"), "--out",
                         str(d / "run"), "--jobs", "3" if rep == "a" else "1"]) == 0
        assert cli.main(["report", str(d / "run"), "--out", str(d / "summary")]) == 0
        outputs.append({sub: snapshot(d / sub) for sub in ("demos", "run", "summary")})
    assert outputs[0] == outputs[1]
    assert len(outputs[0]["demos"]) == 25 * 2 + 1


@pytest.mark.slow
@criterion("8. determinism")
def test_full_scale_eval_rerun_is_byte_identical(experiment, tmp_path):
    root, _, _ = experiment
    assert cli.main(["eval", "--config", str(root / "afa.yaml"), "--checkpoint", str(root / "afa"),
                     "--out", str(tmp_path), "--jobs", "1"]) == 0
    for name in ("report.json", "traces.csv"):
        assert (tmp_path / name).read_bytes() == (root / "afa" / name).read_bytes()
