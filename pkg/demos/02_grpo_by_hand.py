"""The GRPO step on numbers small enough to check with a pencil.

1. Four completions for one prompt get rewards; the group normalises them.
2. The clipped surrogate caps how far one update can move a token's probability.
3. The k3 KL estimate stays non-negative and vanishes when policy == reference.
Run: python demos/02_grpo_by_hand.py
"""

import numpy as np

from fewshot_rlvr.autodiff import Tensor
from fewshot_rlvr.grpo import group_advantages, kl_penalty, pg_loss

rewards = [2.0, 1.0, 1.0, 0.0]
adv = group_advantages(rewards).advantages
print("rewards    ", rewards)
print("advantages ", np.round(adv, 4), "(mean 0, population std 1)")
print("all equal  ", group_advantages([2.0] * 4).advantages, "(no signal, exact zeros)")

print("\nclipping with eps = 0.2, one token, advantage +1:")
for ratio in (0.7, 1.0, 1.1, 1.5):
    new = Tensor(np.log([[ratio * 0.3]]))
    loss = pg_loss(new, np.log([[0.3]]), np.array([1.0]), 0.2)
    print(f"  ratio {ratio:.1f} -> surrogate {-loss.item():.3f}")

print("\nk3 estimate exp(ref-new) - (ref-new) - 1 on one token:")
for gap in (-2.0, -0.5, 0.0, 0.5, 1.0):
    v = kl_penalty(Tensor(np.zeros((1, 1))), np.array([[gap]])).item()
    print(f"  ref - new = {gap:+.1f} -> {v:.5f}")
