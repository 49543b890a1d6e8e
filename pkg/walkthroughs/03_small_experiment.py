"""
A small robustness experiment
=============================

Train mean-pool and AFA policies on the same expert demonstrations, then
evaluate them in the training scene and under lighting and texture shifts.
This runs a shortened schedule so it finishes in a few minutes; the full
protocol is ``visuopool train`` with the default config.
"""

import time

from visuopool.config import ExperimentConfig
from visuopool.env import generate_demos
from visuopool.trainer import run_experiment

base = ExperimentConfig.from_dict({
    "train": {"steps": 1500, "seeds": [1, 2]},
    "eval": {"episodes": 30},
})
env = base.env.env_config()
demos = generate_demos(base.env.n_demos, seed=base.env.demo_seed, config=env)
print(f"{len(demos)} demonstrations, {sum(len(d) for d in demos)} frames")

reports = {}
for kind in ("mean", "afa"):
    start = time.perf_counter()
    reports[kind] = run_experiment(base.with_pooling(kind=kind), demos)
    print(f"{kind}: {time.perf_counter() - start:.0f}s")

print(f"\n{'kind':<6}" + "".join(f"{c:>12}" for c in ("in_domain", "lighting", "texture")))
for kind, rep in reports.items():
    print(f"{kind:<6}" + "".join(f"{rep.iqm[c]:12.3f}" for c in ("in_domain", "lighting", "texture")))

# attention mass inside the task mask, per seed, under texture shift
for row in reports["afa"].attention["texture"]:
    print(f"afa seed {row['seed']}: mass {row['mass']:.3f} entropy {row['entropy']:.3f} "
          f"success {row['success_rate']:.2f}")
