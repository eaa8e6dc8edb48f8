# coding: utf-8

# # Overfitting one phantom
#
# The smallest useful end-to-end check of the training stack: a quarter-width
# network, a single 24x64x64 volume, and a few hundred Adam steps. If the
# forward pass, the gradients and the optimizer are all right, both heads
# should fit the volume almost perfectly.
#
# Takes about 4 minutes single-task and 12 minutes multitask on one core.
# Pass "quick" as the first argument for a 40-step run.

import sys
import time

import numpy as np

from hivenet.config import RunConfig, TrainConfig
from hivenet.metrics import dsc_jac
from hivenet.network import count_params, overfit_config
from hivenet.phantom import PhantomConfig, generate
from hivenet.train import predict, train

quick = len(sys.argv) > 1 and sys.argv[1] == "quick"
vol = generate(PhantomConfig(dims=(24, 64, 64), instance_count=(3, 5), radius_range=(2.0, 3.5), seed=1))
print("volume", vol.dims, "foreground", round(float(vol.labels.mean()), 4))


def run(multitask, iterations):
    cfg = RunConfig(network=overfit_config(multitask=multitask),
                    train=TrainConfig(lr0=2e-3, lr_step=1000, augment=False, crops_per_epoch=1,
                                      max_epochs=iterations, patience=iterations))
    t0 = time.perf_counter()

    def show(row):
        if row["iterations"] % 25 == 0 or row["iterations"] == 1:
            print(f"  it {row['iterations']:4d}  seg {row['l_seg']:.4f}  reg {row['l_reg']:.5f}  "
                  f"jac {row['train_jac']:.4f}  {time.perf_counter() - t0:6.0f}s")

    st = train(cfg, vol, progress=show)
    return st


# ## Single task
#
# Only the segmentation decoder. The Jaccard loss drops from ~0.98 (a
# foreground fraction of 2% is hard to hit by chance) to near zero.

st = run(False, 40 if quick else 150)
print("params", count_params(st.net), "final train JAC", round(st.log[-1]["train_jac"], 4))

# ## Multitask
#
# Both decoders, lambda = 0.7. The regression loss is the mean squared error
# between the detection head and the normalized proximity map.

st = run(True, 40 if quick else 400)
first, last = st.log[0]["l_reg"], st.log[-1]["l_reg"]
print(f"regression loss {first:.4f} -> {last:.4f}  ({first / last:.1f}x lower)")

# ## Looking at the prediction
#
# Run the trained net through the sliding-window path (one window here) and
# compare the proximity output to its target along the densest centerline.

prob, prox = predict(st.net, vol.image)
print("JAC of thresholded prediction", round(dsc_jac(prob >= 0.5, vol.labels > 0)[1], 4))
target = vol.proximity()
on_line = target >= 0.99
print(f"mean proximity on centerlines: predicted {prox[on_line].mean():.3f}, target {target[on_line].mean():.3f}")
print(f"mean proximity elsewhere:      predicted {prox[~on_line].mean():.3f}, target {target[~on_line].mean():.3f}")
