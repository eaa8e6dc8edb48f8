# coding: utf-8

# # What an HVEC block sees
#
# An HVEC block splits its channels into four groups. Three groups get a thin
# 3x3 kernel lying in one of the orthogonal planes, the fourth gets the same
# in-plane kernel on a half-resolution copy of the volume. With inter-branch
# connections each group also receives the previous group's output before its
# own convolution, so later groups see further.
#
# The quickest way to look at this is to push a single bright voxel through a
# block whose kernels are all ones and see how far it spreads.

import numpy as np

from hivenet.hvec import ABLATION_VARIANTS, HvecConfig, hvec_forward, impulse_support, ones_params

# ## Support of each ablation variant
#
# A: plain grouped views, B: + focal branch, C: + inter-branch adds, D: both.

for name, (inter, focal) in sorted(ABLATION_VARIANTS.items()):
    cfg = HvecConfig(4, 4, inter, focal)
    print(f"variant {name}  inter={inter!s:5s} focal={focal!s:5s}  support (D,H,W) = {impulse_support(cfg)}")

# Variant A never leaves a 3x3x3 neighbourhood. The focal branch stretches the
# in-plane extent, the serial adds stretch depth. D dominates B on every axis.

# ## Which group reaches where
#
# Looking at each output group separately (fusion skipped) shows the chain:
# the XY group is flat, XZ adds depth, YZ inherits both, the focal group sees
# the widest in-plane window.

cfg = HvecConfig(4, 4, True, True)
p = ones_params(cfg)
x = np.zeros((1, 4, 9, 21, 21))
x[0, :, 4, 10, 10] = 1.0
cache = {}
hvec_forward(x, cfg, p, cache, normalize=False)
for g, label in enumerate(["XY", "XZ", "YZ", "focal XY"]):
    out = cache["outs"][g][0, 0]
    nz = np.argwhere(out != 0)
    ext = tuple(int(v) for v in nz.max(0) - nz.min(0) + 1)
    print(f"{label:9s} extent {ext}")
