"""
What the effect logits measure
==============================

The factual branch pools features under generated attention A, the
counterfactual branch does the same under an alternative C, and training
targets the difference of their logits. Identical attention gives no effect
and a loss of exactly ln K. Attention that finds the class-bearing region
produces a large effect.

Run with ``python demos/counterfactual_effect.py``.
"""

# %%
import math

import numpy as np

from gaitgci.cil import AttentionMaps, counterfactual_loss, intervention_likelihoods, predefined_counterfactual
from gaitgci.tensor_core import make_rng

rng = make_rng(1)
K, C, H, W = 4, 6, 8, 6

# A feature map whose channels light up only in the top-left quadrant.
X = 0.1 * rng.standard_normal((C, H, W))
X[:, : H // 2, : W // 2] += 2.0
head = rng.standard_normal((K, C))
label = int(np.argmax(head @ X[:, : H // 2, : W // 2].mean(axis=(1, 2))))

# %%
# No intervention, no effect
# --------------------------
A = AttentionMaps("factual", rng.random((2, H, W)))
same = intervention_likelihoods(X, A, AttentionMaps("counterfactual", A.maps.copy()), head)
print(f"identical maps: loss {counterfactual_loss(same, label):.6f} vs ln K {math.log(K):.6f}")

# %%
# Attention on the informative quadrant
# -------------------------------------
focus = np.full((2, H, W), 0.05)
focus[:, : H // 2, : W // 2] = 0.95
random_c = predefined_counterfactual((2, H, W), "uniform", seed=3)
for name, maps in (("random", rng.random((2, H, W))), ("focused", focus)):
    e = intervention_likelihoods(X, AttentionMaps("factual", maps), random_c, head)
    print(f"{name:8s} factual attention: effect {np.round(e.y_e, 2)}, loss {counterfactual_loss(e, label):.3f}")
