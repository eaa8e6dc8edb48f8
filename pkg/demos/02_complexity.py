# coding: utf-8

# # Parameter and FLOP budget
#
# The network is small on purpose. This script builds every preset, counts
# its parameters, and counts FLOPs for one 40x136x136 crop under both common
# conventions (one FLOP per multiply-add, or two).

from hivenet.network import PRESETS, build_network, count_flops, count_params, layer_summary

TARGETS = {  # parameters (M), FLOPs at 40x136x136 (G)
    "default": (3.2, 97.7),
    "reduced-192-256": (1.27, None),
    "reduced-192-192": (1.04, None),
    "reduced-128-128": (0.69, 70.1),
}

dims = (40, 136, 136)
print(f"{'preset':18s} {'params':>10s} {'target':>7s} {'GFLOP mac':>10s} {'GFLOP 2mac':>11s} {'target':>7s}")
for name, (pt, ft) in TARGETS.items():
    net = build_network(PRESETS[name]())
    n = count_params(net)
    f1, f2 = (count_flops(net, dims, c) / 1e9 for c in ("mac", "2mac"))
    ft_s = f"{ft:.1f}" if ft else "-"
    print(f"{name:18s} {n / 1e6:9.3f}M {pt:6.2f}M {f1:10.2f} {f2:11.2f} {ft_s:>7s}")

# The 2mac column is the one that lands near the targets.
#
# ## Where the cost sits
#
# Most multiply-adds happen at full resolution even though most parameters
# live at the bottleneck.

rows = layer_summary(build_network(PRESETS["default"]()), dims)
total_macs = sum(r.macs for r in rows)
total_params = sum(r.params for r in rows)
top = sorted(rows, key=lambda r: -r.macs)[:6]
for r in top:
    print(f"{r.name:24s} {100 * r.macs / total_macs:5.1f}% of MACs  {100 * r.params / total_params:5.1f}% of params")
