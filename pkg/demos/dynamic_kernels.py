"""
Sample-adaptive kernels, two ways
=================================

A classic dynamic convolution mixes S static candidates with softmax scores.
The decomposed form keeps one static kernel and adds a low-rank, per-sample
offset ``P @ phi(X) @ Q.T``. This script builds both, checks the algebra, and
shows what the nuclear-norm term does to the bases during optimisation.

Run with ``python demos/dynamic_kernels.py``.
"""

# %%
import numpy as np

from gaitgci.dcdc import (
    DcdcKernelSet,
    VanillaDynConv,
    affinity,
    assemble_kernel,
    parameter_counts,
    reformulate,
    vanilla_kernel,
    vanilla_scores,
)
from gaitgci.diversity import diversity_loss, nuclear_norm
from gaitgci.tensor_core import make_rng

rng = make_rng(0)

# %%
# Mean kernel plus offsets
# ------------------------
# Any score-weighted sum of candidates equals their mean plus the same
# weighted sum of offsets, because the offsets sum to zero.
dc = VanillaDynConv.init(cin=8, cout=4, k=3, S=4, rng=rng)
X = rng.standard_normal((8, 6, 5))
pi = vanilla_scores(dc, X)
W0, deltas = reformulate(dc.candidates)
gap = np.abs(vanilla_kernel(dc, X) - (W0 + np.tensordot(pi, deltas, axes=1))).max()
print(f"scores {np.round(pi, 3)}, max |difference| {gap:.1e}")

# %%
# The decomposed kernel
# ---------------------
# Two different inputs give two different kernels from one parameter set.
ks = DcdcKernelSet.init(cin=8, cout=4, k=3, L=4, r=4, rng=rng)
X2 = rng.standard_normal((8, 6, 5))
k1, k2 = (assemble_kernel(ks, affinity(ks, x)) for x in (X, X2))
print(f"kernel shape {k1.shape}, max change between inputs {np.abs(k1 - k2).max():.3f}")

# Parameter budgets depend on the output width. With wide outputs the
# decomposition is far cheaper than four full candidates.
for cout in (2, 128):
    d, v = parameter_counts(cin=128, cout=cout, k=3, L=8, r=4, S=4)
    print(f"Cout={cout:3d}: decomposed {d:6d} params, 4 candidates {v:6d}")

# %%
# Pushing the bases apart
# -----------------------
# The diversity term is minus the nuclear norm. Descending on it spreads the
# singular values of a nearly rank-one basis.
P = np.outer(rng.standard_normal(16), rng.standard_normal(4)) + 1e-3 * rng.standard_normal((16, 4))
P /= np.linalg.norm(P) / 4.0
print("singular values before", np.round(np.linalg.svd(P, compute_uv=False), 3))
for _ in range(50):
    term = diversity_loss(P_A=P)
    P = P - 0.05 * term.grads["P_A"]
    P /= np.linalg.norm(P) / 4.0  # fixed Frobenius norm, so only the spread can change
print("singular values after ", np.round(np.linalg.svd(P, compute_uv=False), 3))
print(f"nuclear norm {nuclear_norm(P):.3f}")
