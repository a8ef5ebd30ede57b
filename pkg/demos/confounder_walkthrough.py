"""
A planted shortcut, end to end
==============================

Each synthetic sequence shows a walking blob whose outline frequency encodes
the identity, plus a small corner marker that agrees with the identity 95% of
the time during training and is random at test time. This script generates
the data, trains the baseline and full arms briefly, and reports test
retrieval and how much attention lands on the marker.

The iteration count is cut so the script finishes in about a minute. The
acceptance suite runs the full-length version over five seeds.

Run with ``python demos/confounder_walkthrough.py [outdir]``.
"""

# %%
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from gaitgci.config import RunConfig
from gaitgci.data_synth import gallery_probe, generate, marker_rule_accuracy, split
from gaitgci.train_eval import evaluate, export_attention, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="gaitgci-demo-"))
rc = RunConfig.preset("confounder")
spec = rc.dataset_spec()
data = generate(spec)

# %%
# How strong is the shortcut?
# ---------------------------
# Reading the marker position alone nearly solves training and is at chance on test.
for which in ("train", "test"):
    print(f"marker-only accuracy on {which}: {marker_rule_accuracy(split(data, which), spec):.3f}")

# %%
# Two arms, same seed and architecture
# ------------------------------------
gallery, probe = gallery_probe(split(data, "test"))
for arm in ("baseline", "full"):
    cfg = replace(rc.train_config([arm]), iterations=200)
    result = train(cfg, data, out_dir=out / arm)
    print(f"{arm:8s} {evaluate(result, gallery, probe).line()}")

# %%
# Look at the maps
# ----------------
# Factual maps for one probe are written as PGM files beside its frames.
paths = export_attention(result, probe[0], out / "attention")
print(f"wrote {len(paths)} images under {out / 'attention'}")
