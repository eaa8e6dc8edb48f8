"""Hierarchical view-ensemble convolution (HVEC) block and module.

The block splits its input channels into four groups. Groups 1-3 go through
1x3x3, 3x1x3 and 3x3x1 convolutions; group 4 goes through a 1x3x3
convolution on in-plane downsampled features (the focal view). With
inter-branch connections enabled, each branch's output is added to the next
branch's input group before that branch's convolution. Branch outputs are
concatenated and fused by a 1x1x1 convolution.

Every convolution is followed by instance norm and ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvKernel,
    NormState,
    ShapeError,
    activation,
    activation_backward,
    concat_backward,
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    instance_norm,
    instance_norm_backward,
    max_pool,
    max_pool_backward,
    split_channels,
    trilinear_upsample,
    trilinear_upsample_backward,
)

BRANCH_ORIENTATIONS = ("XY", "XZ", "YZ", "XY")

# ablation variants: (inter_branch_connections, focal_view_branch)
ABLATION_VARIANTS = {
    "A": (False, False),
    "B": (False, True),
    "C": (True, False),
    "D": (True, True),
}


@dataclass(frozen=True)
class HvecConfig:
    in_channels: int
    out_channels: int
    inter_branch_connections: bool = True
    focal_view_branch: bool = True
    focal_axis: str = "depth-normal"
    focal_downsample_factor: tuple[int, int, int] = (1, 2, 2)

    def __post_init__(self):
        if self.in_channels <= 0 or self.in_channels % 4:
            raise ValueError(f"in_channels must be a positive multiple of 4, got {self.in_channels}")
        if self.out_channels <= 0 or self.out_channels % 4:
            raise ValueError(f"out_channels must be a positive multiple of 4, got {self.out_channels}")
        if self.focal_axis != "depth-normal":
            raise ValueError(f"unsupported focal axis {self.focal_axis!r}")
        object.__setattr__(self, "focal_downsample_factor",
                           tuple(int(f) for f in self.focal_downsample_factor))

    @property
    def needs_projection(self) -> bool:
        return self.inter_branch_connections and self.in_channels != self.out_channels

    def with_channels(self, cin: int, cout: int) -> "HvecConfig":
        return HvecConfig(cin, cout, self.inter_branch_connections, self.focal_view_branch,
                          self.focal_axis, self.focal_downsample_factor)


@dataclass
class HvecParams:
    branches: list[ConvKernel]
    branch_norms: list[NormState]
    fusion: ConvKernel
    fusion_norm: NormState
    # POINT projections of branch i-1 output onto group i width (only when Cin != Cout)
    projections: list[ConvKernel] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: HvecConfig, rng: np.random.Generator) -> "HvecParams":
        gi, go = cfg.in_channels // 4, cfg.out_channels // 4
        branches = [ConvKernel.init(gi, go, o, rng) for o in BRANCH_ORIENTATIONS]
        norms = [NormState.init(go) for _ in range(4)]
        fusion = ConvKernel.init(cfg.out_channels, cfg.out_channels, "POINT", rng)
        projections = []
        if cfg.needs_projection:
            projections = [ConvKernel.init(go, gi, "POINT", rng) for _ in range(3)]
        return cls(branches, norms, fusion, NormState.init(cfg.out_channels), projections)

    def named_arrays(self, prefix: str = "hvec"):
        for i, k in enumerate(self.branches):
            yield from k.named_arrays(f"{prefix}.branch{i + 1}")
        for i, n in enumerate(self.branch_norms):
            yield from n.named_arrays(f"{prefix}.norm{i + 1}")
        for i, k in enumerate(self.projections):
            yield from k.named_arrays(f"{prefix}.proj{i + 2}")
        yield from self.fusion.named_arrays(f"{prefix}.fusion")
        yield from self.fusion_norm.named_arrays(f"{prefix}.fusion_norm")

    def zeros_like(self) -> "HvecParams":
        return HvecParams(
            [k.zeros_like() for k in self.branches],
            [n.zeros_like() for n in self.branch_norms],
            self.fusion.zeros_like(),
            self.fusion_norm.zeros_like(),
            [k.zeros_like() for k in self.projections],
        )


def hvec_param_count(cfg: HvecConfig) -> int:
    """Closed-form number of scalars in :class:`HvecParams` for ``cfg``."""
    gi, go = cfg.in_channels // 4, cfg.out_channels // 4
    c = cfg.out_channels
    n = 4 * (9 * gi * go + go)      # branch kernels + bias
    n += 4 * 2 * go                 # branch norm affine
    n += c * c + c + 2 * c          # fusion conv + norm
    if cfg.needs_projection:
        n += 3 * (go * gi + gi)
    return n


def _ceil_pad(x: np.ndarray, factor) -> np.ndarray:
    pads = [(0, (-s) % f) for s, f in zip(x.shape[2:], factor)]
    if not any(p for _, p in pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), *pads), constant_values=-np.inf)


def _norm(x, s, normalize):
    return instance_norm(x, s) if normalize else x


def hvec_forward(x: np.ndarray, cfg: HvecConfig, p: HvecParams, cache: dict | None = None,
                 normalize: bool = True) -> np.ndarray:
    """Forward pass of one HVEC block.

    Pass a dict as ``cache`` to keep the intermediates needed by
    :func:`hvec_backward`. ``normalize=False`` bypasses every instance norm
    (used only for receptive-field analysis).
    """
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"HVEC expects {cfg.in_channels} input channels, got shape {x.shape}")
    groups = split_channels(x, 4)
    factor = cfg.focal_downsample_factor
    outs, inputs, pre, post = [], [], [], []
    focal = None
    prev = None
    for i in range(4):
        u = groups[i]
        if cfg.inter_branch_connections and prev is not None:
            link = conv3d_forward(prev, p.projections[i - 1]) if p.projections else prev
            u = u + link
        inputs.append(u)
        k, ns = p.branches[i], p.branch_norms[i]
        if i == 3 and cfg.focal_view_branch:
            padded = _ceil_pad(u, factor)
            pooled, argmax = max_pool(padded, factor)
            z = conv3d_forward(pooled, k)
            zn = _norm(z, ns, normalize)
            a = activation(zn, "relu")
            up = trilinear_upsample(a, factor)
            b = np.ascontiguousarray(up[:, :, :u.shape[2], :u.shape[3], :u.shape[4]])
            focal = (padded.shape, pooled, argmax)
        else:
            z = conv3d_forward(u, k)
            zn = _norm(z, ns, normalize)
            b = activation(zn, "relu")
        pre.append(z)
        post.append(zn)
        outs.append(b)
        prev = b
    cat = concat_channels(outs)
    f = conv3d_forward(cat, p.fusion)
    fn = _norm(f, p.fusion_norm, normalize)
    y = activation(fn, "relu")
    if cache is not None:
        cache.update(inputs=inputs, pre=pre, post=post, outs=outs, focal=focal,
                     cat=cat, f=f, fn=fn, normalize=normalize)
    return y


def hvec_backward(grad_y: np.ndarray, cfg: HvecConfig, p: HvecParams, cache: dict):
    """Backward pass of one HVEC block. Returns ``(grad_x, grads)`` with
    ``grads`` structured like ``p``."""
    normalize = cache["normalize"]
    g = p.zeros_like()
    gfn = activation_backward(cache["fn"], "relu", grad_y)
    if normalize:
        gf, g.fusion_norm.scale[:], g.fusion_norm.shift[:] = instance_norm_backward(
            cache["f"], p.fusion_norm, gfn)
    else:
        gf = gfn
    gcat, g.fusion.weight[:], g.fusion.bias[:] = conv3d_backward(cache["cat"], p.fusion, gf)
    gouts = concat_backward(gcat, [cfg.out_channels // 4] * 4)
    factor = cfg.focal_downsample_factor
    ggroups = [None] * 4
    carry = None
    for i in reversed(range(4)):
        gb = gouts[i] if carry is None else gouts[i] + carry
        k, ns = p.branches[i], p.branch_norms[i]
        u = cache["inputs"][i]
        z, zn = cache["pre"][i], cache["post"][i]
        if i == 3 and cfg.focal_view_branch:
            padded_shape, pooled, argmax = cache["focal"]
            gup = np.zeros(gb.shape[:2] + tuple(padded_shape[2:]))
            gup[:, :, :u.shape[2], :u.shape[3], :u.shape[4]] = gb
            ga = trilinear_upsample_backward(gup, factor)
            gzn = activation_backward(zn, "relu", ga)
            gz = _norm_back(z, ns, gzn, g.branch_norms[i], normalize)
            gpooled, g.branches[i].weight[:], g.branches[i].bias[:] = conv3d_backward(pooled, k, gz)
            gpad = max_pool_backward(gpooled, argmax, factor)
            gu = np.ascontiguousarray(gpad[:, :, :u.shape[2], :u.shape[3], :u.shape[4]])
        else:
            gzn = activation_backward(zn, "relu", gb)
            gz = _norm_back(z, ns, gzn, g.branch_norms[i], normalize)
            gu, g.branches[i].weight[:], g.branches[i].bias[:] = conv3d_backward(u, k, gz)
        ggroups[i] = gu
        carry = None
        if cfg.inter_branch_connections and i > 0:
            if p.projections:
                prev = cache["outs"][i - 1]
                kp = p.projections[i - 1]
                carry, g.projections[i - 1].weight[:], g.projections[i - 1].bias[:] = \
                    conv3d_backward(prev, kp, gu)
            else:
                carry = gu
    return concat_channels(ggroups), g


def _norm_back(z, ns, gzn, gstate, normalize):
    if not normalize:
        return gzn
    gz, gstate.scale[:], gstate.shift[:] = instance_norm_backward(z, ns, gzn)
    return gz


# ---------------------------------------------------------------------------
# two-sub-block module with residual shortcut
# ---------------------------------------------------------------------------

@dataclass
class HvecModuleParams:
    first: HvecParams
    second: HvecParams
    shortcut: ConvKernel | None = None

    def named_arrays(self, prefix: str = "module"):
        yield from self.first.named_arrays(f"{prefix}.sub1")
        yield from self.second.named_arrays(f"{prefix}.sub2")
        if self.shortcut is not None:
            yield from self.shortcut.named_arrays(f"{prefix}.shortcut")

    def zeros_like(self) -> "HvecModuleParams":
        return HvecModuleParams(self.first.zeros_like(), self.second.zeros_like(),
                                None if self.shortcut is None else self.shortcut.zeros_like())


def module_configs(cfg: HvecConfig) -> tuple[HvecConfig, HvecConfig]:
    """Sub-block configs: the first changes width, the second keeps it."""
    return cfg, cfg.with_channels(cfg.out_channels, cfg.out_channels)


def hvec_module_forward(x: np.ndarray, cfg: HvecConfig, p1: HvecParams, p2: HvecParams,
                        shortcut: ConvKernel | None = None, cache: dict | None = None) -> np.ndarray:
    """``y = shortcut(x) + hvec(hvec(x))``; the shortcut is identity unless
    the module changes width."""
    c1, c2 = module_configs(cfg)
    if cfg.in_channels != cfg.out_channels and shortcut is None:
        raise ShapeError("a width-changing HVEC module needs a shortcut projection")
    k1 = {} if cache is not None else None
    k2 = {} if cache is not None else None
    h = hvec_forward(x, c1, p1, k1)
    y = hvec_forward(h, c2, p2, k2)
    s = x if shortcut is None else conv3d_forward(x, shortcut)
    if cache is not None:
        cache.update(x=x, sub1=k1, sub2=k2)
    return y + s


def hvec_module_backward(grad_y: np.ndarray, cfg: HvecConfig, params: HvecModuleParams,
                         cache: dict):
    c1, c2 = module_configs(cfg)
    gh, g2 = hvec_backward(grad_y, c2, params.second, cache["sub2"])
    gx, g1 = hvec_backward(gh, c1, params.first, cache["sub1"])
    gsc = None
    if params.shortcut is None:
        gx = gx + grad_y
    else:
        gs, gw, gb = conv3d_backward(cache["x"], params.shortcut, grad_y)
        gx = gx + gs
        gsc = ConvKernel(gw, gb, "POINT")
    return gx, HvecModuleParams(g1, g2, gsc)


def hvec_module_param_count(cfg: HvecConfig) -> int:
    c1, c2 = module_configs(cfg)
    n = hvec_param_count(c1) + hvec_param_count(c2)
    if cfg.in_channels != cfg.out_channels:
        n += cfg.in_channels * cfg.out_channels + cfg.out_channels
    return n


class HvecModule:
    """Stateful wrapper used inside the network: owns parameters, gradient
    buffers and the forward cache."""

    def __init__(self, cfg: HvecConfig, rng: np.random.Generator):
        c1, c2 = module_configs(cfg)
        self.cfg = cfg
        shortcut = None
        if cfg.in_channels != cfg.out_channels:
            shortcut = ConvKernel.init(cfg.in_channels, cfg.out_channels, "POINT", rng)
        self.params = HvecModuleParams(HvecParams.init(c1, rng), HvecParams.init(c2, rng), shortcut)
        self.grads = self.params.zeros_like()
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        cache = {} if train else None
        p = self.params
        y = hvec_module_forward(x, self.cfg, p.first, p.second, p.shortcut, cache)
        self._cache = cache
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called without a training-mode forward")
        gx, g = hvec_module_backward(grad_y, self.cfg, self.params, self._cache)
        for (_, acc), (_, new) in zip(self.grads.named_arrays(), g.named_arrays()):
            acc += new
        self._cache = None
        return gx

    def named_arrays(self, prefix: str):
        return self.params.named_arrays(prefix)

    def named_grads(self, prefix: str):
        return self.grads.named_arrays(prefix)


# ---------------------------------------------------------------------------
# analysis helpers
# ---------------------------------------------------------------------------

def ones_params(cfg: HvecConfig) -> HvecParams:
    """Parameters with all-ones kernels and zero biases."""
    p = HvecParams.init(cfg, np.random.default_rng(0))
    for _, arr in p.named_arrays():
        arr[...] = 0.0
    for k in p.branches + p.projections + [p.fusion]:
        k.weight[...] = 1.0
    for n in p.branch_norms + [p.fusion_norm]:
        n.scale[...] = 1.0
    return p


def impulse_support(cfg: HvecConfig, shape=(15, 31, 31)) -> tuple[int, int, int]:
    """Extent (voxels per axis) of the nonzero output region produced by a
    centred unit impulse, with all-ones kernels and normalization bypassed."""
    x = np.zeros((1, cfg.in_channels) + tuple(shape))
    x[:, :, shape[0] // 2, shape[1] // 2, shape[2] // 2] = 1.0
    y = hvec_forward(x, cfg, ones_params(cfg), normalize=False)
    nz = np.argwhere(np.abs(y[0]).sum(axis=0) > 0)
    if nz.size == 0:
        return (0, 0, 0)
    return tuple(int(v) for v in nz.max(axis=0) - nz.min(axis=0) + 1)
