# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # A tour of repsnet
#
# Nucleus instance segmentation by boundary voting: a U-shaped network
# predicts a nucleus mask (NP), a type map (NT) and, for every nucleus pixel,
# its distance to the instance boundary in four directions (BD). Each pixel
# then votes for the four boundary positions; heavily voted pixels split
# touching nuclei apart.
#
# Everything runs on numpy. Run this file top to bottom with
# `python notebooks/tour.py`, or open it as a notebook through jupytext.

# %%
import numpy as np

from repsnet import groundtruth, postprocess
from repsnet.metrics import instance_classes, pq
from repsnet.network import RepSNet, RepSNetConfig, analytic_param_count, reparameterize
from repsnet.reparam import RepVggUnit, fuse_repvgg, fused_conv_forward, repvgg_forward
from repsnet.train import Sample, evaluate_net, fit

# %% [markdown]
# ## Ground truth for one synthetic scene
#
# The generator paints textured ellipses, some of them touching. From the
# instance map we derive the four BD channels and the isoheight map, which
# is the Chebyshev distance to the nearest boundary pixel clamped at 5.

# %%
image, inst, types = groundtruth.synth_sample(3)
targets = groundtruth.make_targets(inst, types)
print("instances:", inst.max(), " image:", image.shape)
y, x = np.argwhere(inst == 1).mean(axis=0).astype(int)
print("BD (left, right, up, down) at the center of nucleus 1:", targets["bd"][:, y, x])
print("isoheight values present:", np.unique(targets["psi"]))

# %% [markdown]
# ## Boundary voting with perfect predictions
#
# Feeding the exact targets through the post-processing recovers every
# nucleus, including the touching ones that plain connected components
# would merge.

# %%
fg = inst > 0
np_logits = np.stack([~fg, fg]).astype(float)
nt_logits = (np.arange(7)[:, None, None] == types[None]).astype(float)
bd = targets["bd"].astype(float)

voted, _ = postprocess.segment(np_logits, nt_logits, bd)
naive, _ = postprocess.segment(np_logits, nt_logits, bd, postprocess.BvmConfig(post="naive"))
print("boundary voting: PQ", pq(inst, voted).pq, "with", voted.max(), "instances")
print("naive components: PQ", round(pq(inst, naive).pq, 3), "with", naive.max(), "instances")

# %% [markdown]
# ## Re-parameterization of one unit
#
# A RepVGG unit trains with three branches (3x3, 1x1, identity), each
# followed by batch norm. At inference they fold into one 3x3 convolution.

# %%
rng = np.random.default_rng(0)
unit = RepVggUnit.create(8, 8, 1, rng)
for bn in unit.batchnorms():
    bn.running_mean[:] = rng.normal(0, 0.5, 8)
    bn.running_var[:] = rng.uniform(0.5, 2, 8)
x = rng.uniform(-1, 1, (1, 8, 16, 16)).astype(np.float32)
diff = np.abs(repvgg_forward(unit, x) - fused_conv_forward(fuse_repvgg(unit), x)).max()
print("multi-branch vs fused max abs diff:", diff)

cfg = RepSNetConfig()
print("default network parameters:", analytic_param_count(cfg, fused=False),
      "-> fused", analytic_param_count(cfg, fused=True))

# %% [markdown]
# ## A short training run
#
# A narrow network trained on 56 scenes for ten epochs (under a minute of
# CPU). Expect a clean foreground mask and many split or spurious instances;
# the test suite trains the default network on 200 images for the real
# benchmark.

# %%
data = [Sample(*groundtruth.synth_sample(100 + i)) for i in range(72)]
small = RepSNetConfig(num_blocks=3, units_per_block=[1, 2, 1], base_width=8)
net = RepSNet.create(small, seed=0)
best, history = fit(net, data[:56], data[56:64], epochs=10, lr=3e-3)
for row in history:
    print(f"epoch {row['epoch']:2d}  train {row['train_total']:.3f}  val {row['val_total']:.3f}")

fused = reparameterize(best)
scores = evaluate_net(fused, data[64:])
print({k: round(scores[k], 3) for k in ("dice", "aji", "pq", "mpq")},
      {k: scores[k] for k in ("tp", "fp", "fn")})

# %% [markdown]
# Classes come from a majority vote of the NT map inside each instance.

# %%
s = data[64]
inst_pred, classes = postprocess.segment(*(o[0] for o in fused.forward(s.image[None])))
print("true classes:     ", sorted(instance_classes(s.inst, s.types).values()))
print("predicted classes:", sorted(classes.values()))
