"""
Four ways to pool a token grid
==============================

Render one scene of the token world, pool it with each head, and see how
much of the learned attention lands on the agent and goal cells.
"""

import numpy as np

from visuopool.env import EnvConfig, SceneConfig, SignatureBank, WorldState, render_tokens, task_mask
from visuopool.metrics import attention_entropy, attention_mass
from visuopool.pooling import POOLING_KINDS, make_head, pool

env = EnvConfig()
bank = SignatureBank.create(env)
state = WorldState(agent_pos=(-0.55, 0.3), goal_pos=(0.6875, -0.6875))
grid = render_tokens(state, SceneConfig(), bank, env)
mask = task_mask(state, env)
print("grid", grid.shape, "task cells", int(mask.sum()))

rng = np.random.default_rng(1)
for kind in POOLING_KINDS:
    head = make_head(kind, env.height, env.width, env.dim)
    params = head.init_params(rng) if hasattr(head, "init_params") else None
    feats, record = pool(kind, grid, head, params)
    line = f"{kind:<16} features {feats.size:4d}"
    if record is not None:
        # untrained attention: mass is close to the uniform share of the mask
        line += (f"   mass {attention_mass(record, mask):.3f}"
                 f"   entropy {attention_entropy(record):.3f}")
    print(line)

print("uniform share %.3f, max entropy %.3f" % (mask.mean(), np.log(grid.shape[0] * grid.shape[1])))

# an AFA query aligned with the agent signature pulls mass toward the agent's cells
head = make_head("afa", env.height, env.width, env.dim, heads=1, output_dim=env.dim)
params = {"afa_q": 60.0 * bank.agent_sig[None, :], "afa_wk": np.eye(env.dim), "afa_wv": np.eye(env.dim)}
_, record = pool("afa", grid, head, params)
print("aligned query     mass %.3f   entropy %.3f" % (attention_mass(record, mask),
                                                     attention_entropy(record)))
