"""HIVE-Net graph: shared encoder, segmentation and detection decoders.

Topology (d = 3 downsampling stages, stage widths ``e[k]``)::

    stem      3x3x3 conv (1 -> e0) + norm + relu
    enc[0]    HVEC module e0
    enc[k]    maxpool(pool[k-1]) -> POINT e[k-1]->e[k] -> HVEC module e[k]
    decoder   POINT e3->c3 at the bottleneck, then for k = 2, 1, 0:
              upsample(pool[k]) -> POINT (if width changes) -> + skip(enc[k]) -> HVEC module c[k]
    seg tail  concat(seg stage-0, det stage-0) -> HVEC module -> POINT -> sigmoid = P
    det head  POINT -> sigmoid = D_out

Skips are summed, projected by a POINT conv when encoder and decoder widths
differ. The segmentation path therefore holds one more HVEC module than the
detection path.

Every POINT conv outside the two heads is followed by norm + relu. Without
that, the chain of plain 1x1 projections lets per-channel offsets grow
unchecked and the detection head saturates early in training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .hvec import ABLATION_VARIANTS, HvecConfig, HvecModule, hvec_module_param_count
from .tensor import (
    ConvKernel,
    NormState,
    ShapeError,
    activation,
    activation_backward,
    as_tensor5,
    concat_backward,
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    instance_norm,
    instance_norm_backward,
    max_pool,
    max_pool_backward,
    trilinear_upsample,
    trilinear_upsample_backward,
)

STAGES = 3


@dataclass
class NetworkConfig:
    encoder_channels: list[int] = field(default_factory=lambda: [32, 96, 256, 512])
    segmentation_decoder_channels: list[int] = field(default_factory=lambda: [32, 96, 144, 512])
    detection_decoder_channels: list[int] = field(default_factory=lambda: [16, 48, 72, 256])
    pool_windows: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(2, 2, 2), (2, 2, 2), (2, 2, 2)])
    inter_branch_connections: bool = True
    focal_view_branch: bool = True
    focal_downsample_factor: tuple[int, int, int] = (1, 2, 2)
    multitask: bool = True
    input_crop: tuple[int, int, int] = (40, 136, 136)
    stem_kernel: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.segmentation_decoder_channels = [int(c) for c in self.segmentation_decoder_channels]
        self.detection_decoder_channels = [int(c) for c in self.detection_decoder_channels]
        self.pool_windows = [tuple(int(a) for a in p) for p in self.pool_windows]
        self.focal_downsample_factor = tuple(int(a) for a in self.focal_downsample_factor)
        self.input_crop = tuple(int(a) for a in self.input_crop)
        self.stem_kernel = tuple(int(a) for a in self.stem_kernel)

    def validate(self) -> "NetworkConfig":
        lists = {
            "encoder_channels": self.encoder_channels,
            "segmentation_decoder_channels": self.segmentation_decoder_channels,
            "detection_decoder_channels": self.detection_decoder_channels,
        }
        for name, chans in lists.items():
            if len(chans) != STAGES + 1:
                raise ValueError(f"{name} must list {STAGES + 1} stage widths, got {len(chans)}")
            for c in chans:
                if c <= 0 or c % 4:
                    raise ValueError(f"{name}: every width must be a positive multiple of 4, got {c}")
        if len(self.pool_windows) != STAGES:
            raise ValueError(f"pool_windows must list {STAGES} windows")
        if any(a < 1 for p in self.pool_windows for a in p):
            raise ValueError("pool windows must be >= 1 per axis")
        if any(k % 2 == 0 for k in self.stem_kernel):
            raise ValueError("stem kernel sizes must be odd")
        check_crop(self.input_crop, self.pool_windows)
        return self

    @property
    def crop_multiple(self) -> tuple[int, int, int]:
        return tuple(int(np.prod([p[a] for p in self.pool_windows])) for a in range(3))

    def hvec_config(self, cin: int, cout: int) -> HvecConfig:
        return HvecConfig(cin, cout, self.inter_branch_connections, self.focal_view_branch,
                          focal_downsample_factor=self.focal_downsample_factor)

    def with_ablation(self, variant: str) -> "NetworkConfig":
        inter, focal = ABLATION_VARIANTS[variant]
        return replace(self, inter_branch_connections=inter, focal_view_branch=focal)


def check_crop(dims, pool_windows) -> None:
    mult = [int(np.prod([p[a] for p in pool_windows])) for a in range(3)]
    for a, (s, m) in enumerate(zip(dims, mult)):
        if s <= 0 or s % m:
            raise ShapeError(
                f"crop size {tuple(dims)} must be divisible by the pooling product {tuple(mult)} "
                f"(axis {a})")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def default_config(**kw) -> NetworkConfig:
    return NetworkConfig(**kw).validate()


def reduced_config(e2: int, e3: int, **kw) -> NetworkConfig:
    """Default network with the widths after the 2nd and 3rd downsampling
    replaced; the decoder entry widths follow ``e3``."""
    base = NetworkConfig()
    enc = base.encoder_channels[:2] + [e2, e3]
    seg = base.segmentation_decoder_channels[:3] + [e3]
    det = base.detection_decoder_channels[:3] + [e3 // 2]
    return NetworkConfig(encoder_channels=enc, segmentation_decoder_channels=seg,
                         detection_decoder_channels=det, **kw).validate()


def tiny_config(**kw) -> NetworkConfig:
    kw.setdefault("input_crop", (8, 16, 16))
    return NetworkConfig(encoder_channels=[8, 16, 16, 16],
                         segmentation_decoder_channels=[8, 16, 16, 16],
                         detection_decoder_channels=[4, 8, 8, 8], **kw).validate()


def scaled_config(divisor: int, **kw) -> NetworkConfig:
    """Default widths divided by ``divisor``, rounded up to multiples of 4."""
    def f(cs):
        return [max(4, 4 * math.ceil(c / divisor / 4)) for c in cs]
    base = NetworkConfig()
    return NetworkConfig(encoder_channels=f(base.encoder_channels),
                         segmentation_decoder_channels=f(base.segmentation_decoder_channels),
                         detection_decoder_channels=f(base.detection_decoder_channels),
                         **kw).validate()


def overfit_config(**kw) -> NetworkConfig:
    kw.setdefault("input_crop", (24, 64, 64))
    return scaled_config(4, **kw)


PRESETS = {
    "default": default_config,
    "reduced-192-256": lambda **kw: reduced_config(192, 256, **kw),
    "reduced-192-192": lambda **kw: reduced_config(192, 192, **kw),
    "reduced-128-128": lambda **kw: reduced_config(128, 128, **kw),
    "tiny": tiny_config,
    "overfit": overfit_config,
}


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class ConvUnit:
    """Convolution, optionally followed by instance norm and ReLU."""

    def __init__(self, cin, cout, orientation, rng, size=None, norm_act=False):
        self.kernel = ConvKernel.init(cin, cout, orientation, rng, size)
        self.norm = NormState.init(cout) if norm_act else None
        self.kgrad = self.kernel.zeros_like()
        self.ngrad = self.norm.zeros_like() if norm_act else None
        self._cache = None

    def forward(self, x, train=True):
        z = conv3d_forward(x, self.kernel)
        if self.norm is None:
            y = z
            zn = None
        else:
            zn = instance_norm(z, self.norm)
            y = activation(zn, "relu")
        self._cache = (x, z, zn) if train else None
        return y

    def backward(self, gy):
        x, z, zn = self._cache
        if self.norm is not None:
            gzn = activation_backward(zn, "relu", gy)
            gz, gs, gb = instance_norm_backward(z, self.norm, gzn)
            self.ngrad.scale += gs
            self.ngrad.shift += gb
        else:
            gz = gy
        gx, gw, gb = conv3d_backward(x, self.kernel, gz)
        self.kgrad.weight += gw
        self.kgrad.bias += gb
        self._cache = None
        return gx

    def named_arrays(self, prefix):
        yield from self.kernel.named_arrays(f"{prefix}.conv")
        if self.norm is not None:
            yield from self.norm.named_arrays(f"{prefix}.norm")

    def named_grads(self, prefix):
        yield from self.kgrad.named_arrays(f"{prefix}.conv")
        if self.ngrad is not None:
            yield from self.ngrad.named_arrays(f"{prefix}.norm")


class Decoder:
    def __init__(self, cfg: NetworkConfig, chans, rng, name):
        e = cfg.encoder_channels
        self.name = name
        self.chans = chans
        self.pools = cfg.pool_windows
        self.entry = ConvUnit(e[STAGES], chans[STAGES], "POINT", rng, norm_act=True)
        self.up_proj, self.skip_proj, self.modules = {}, {}, {}
        prev = chans[STAGES]
        for k in reversed(range(STAGES)):
            if prev != chans[k]:
                self.up_proj[k] = ConvUnit(prev, chans[k], "POINT", rng, norm_act=True)
            if e[k] != chans[k]:
                self.skip_proj[k] = ConvUnit(e[k], chans[k], "POINT", rng, norm_act=True)
            self.modules[k] = HvecModule(cfg.hvec_config(chans[k], chans[k]), rng)
            prev = chans[k]

    def forward(self, enc, train=True):
        x = self.entry.forward(enc[STAGES], train)
        for k in reversed(range(STAGES)):
            u = trilinear_upsample(x, self.pools[k])
            if k in self.up_proj:
                u = self.up_proj[k].forward(u, train)
            s = self.skip_proj[k].forward(enc[k], train) if k in self.skip_proj else enc[k]
            x = self.modules[k].forward(u + s, train)
        return x

    def backward(self, gx, genc):
        """Accumulates encoder-feature gradients into ``genc`` (list by stage)."""
        for k in range(STAGES):
            gsum = self.modules[k].backward(gx)
            gs = self.skip_proj[k].backward(gsum) if k in self.skip_proj else gsum
            genc[k] = gs if genc[k] is None else genc[k] + gs
            gu = self.up_proj[k].backward(gsum) if k in self.up_proj else gsum
            gx = trilinear_upsample_backward(gu, self.pools[k])
        gb = self.entry.backward(gx)
        genc[STAGES] = gb if genc[STAGES] is None else genc[STAGES] + gb

    def layers(self):
        yield f"{self.name}.entry", self.entry
        for k in reversed(range(STAGES)):
            if k in self.up_proj:
                yield f"{self.name}.up{k}", self.up_proj[k]
            if k in self.skip_proj:
                yield f"{self.name}.skip{k}", self.skip_proj[k]
            yield f"{self.name}.stage{k}", self.modules[k]


class HiveNet:
    """Instantiated network (the layer graph). Build with :func:`build_network`."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(seed))
        e = cfg.encoder_channels
        self.stem = ConvUnit(1, e[0], "GENERIC", rng, size=cfg.stem_kernel, norm_act=True)
        self.transitions = {k: ConvUnit(e[k - 1], e[k], "POINT", rng, norm_act=True)
                            for k in range(1, STAGES + 1)}
        self.enc_modules = {k: HvecModule(cfg.hvec_config(e[k], e[k]), rng)
                            for k in range(STAGES + 1)}
        s = cfg.segmentation_decoder_channels
        self.seg_decoder = Decoder(cfg, s, rng, "seg")
        self.det_decoder = None
        tail_in = s[0]
        if cfg.multitask:
            t = cfg.detection_decoder_channels
            self.det_decoder = Decoder(cfg, t, rng, "det")
            tail_in = s[0] + t[0]
        self.seg_tail = HvecModule(cfg.hvec_config(tail_in, s[0]), rng)
        self.seg_head = ConvUnit(s[0], 1, "POINT", rng)
        self.det_head = ConvUnit(cfg.detection_decoder_channels[0], 1, "POINT", rng) \
            if cfg.multitask else None
        self._cache = None

    # -- structure ---------------------------------------------------------

    def layers(self):
        """Layers in forward (topological) order as ``(name, layer)``."""
        yield "stem", self.stem
        for k in range(STAGES + 1):
            if k:
                yield f"enc.down{k}", self.transitions[k]
            yield f"enc.stage{k}", self.enc_modules[k]
        if self.det_decoder is not None:
            yield from self.det_decoder.layers()
        yield from self.seg_decoder.layers()
        yield "seg.tail", self.seg_tail
        yield "seg.head", self.seg_head
        if self.det_head is not None:
            yield "det.head", self.det_head

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.layers():
            out.extend(layer.named_arrays(name))
        return out

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.layers():
            out.extend(layer.named_grads(name))
        return out

    def zero_grad(self):
        for _, g in self.named_grads():
            g[...] = 0.0

    # -- execution ---------------------------------------------------------

    def encode(self, x, train=True):
        pools = self.cfg.pool_windows
        enc, argmaxes, shapes = [], [], []
        h = self.stem.forward(x, train)
        enc.append(self.enc_modules[0].forward(h, train))
        for k in range(1, STAGES + 1):
            p, am = max_pool(enc[k - 1], pools[k - 1])
            argmaxes.append(am)
            t = self.transitions[k].forward(p, train)
            enc.append(self.enc_modules[k].forward(t, train))
        return enc, argmaxes

    def forward(self, x, train: bool = False):
        """Returns ``(P, D_out)``; ``D_out`` is ``None`` for the single-task net.

        With ``train=True`` the intermediates needed by :meth:`backward` are kept.
        """
        x = as_tensor5(x)
        if x.shape[1] != 1:
            raise ShapeError(f"network input must have 1 channel, got shape {x.shape}")
        check_crop(x.shape[2:], self.cfg.pool_windows)
        enc, argmaxes = self.encode(x, train)
        xs = self.seg_decoder.forward(enc, train)
        d_out = None
        if self.det_decoder is not None:
            xt = self.det_decoder.forward(enc, train)
            zs = self.seg_tail.forward(concat_channels([xs, xt]), train)
            zd = self.det_head.forward(xt, train)
            d_out = activation(zd, "sigmoid")
        else:
            zs = self.seg_tail.forward(xs, train)
            zd = None
        zp = self.seg_head.forward(zs, train)
        p = activation(zp, "sigmoid")
        self._cache = (argmaxes, zp, zd) if train else None
        return p, d_out

    def backward(self, grad_p, grad_d=None):
        """Backpropagate output gradients; parameter gradients accumulate in the
        layers' buffers. Returns the gradient w.r.t. the input volume."""
        if self._cache is None:
            raise RuntimeError("backward needs a preceding forward(train=True)")
        argmaxes, zp, zd = self._cache
        gz = self.seg_head.backward(activation_backward(zp, "sigmoid", grad_p))
        gcat = self.seg_tail.backward(gz)
        genc = [None] * (STAGES + 1)
        if self.det_decoder is not None:
            s0 = self.cfg.segmentation_decoder_channels[0]
            t0 = self.cfg.detection_decoder_channels[0]
            gxs, gxt = concat_backward(gcat, [s0, t0])
            if grad_d is not None:
                gxt = gxt + self.det_head.backward(activation_backward(zd, "sigmoid", grad_d))
            else:
                self.det_head._cache = None
            self.det_decoder.backward(gxt, genc)
        else:
            gxs = gcat
        self.seg_decoder.backward(gxs, genc)
        pools = self.cfg.pool_windows
        g = genc[STAGES]
        for k in range(STAGES, 0, -1):
            gt = self.enc_modules[k].backward(g)
            gp = self.transitions[k].backward(gt)
            g = genc[k - 1] + max_pool_backward(gp, argmaxes[k - 1], pools[k - 1])
        gh = self.enc_modules[0].backward(g)
        self._cache = None
        return self.stem.backward(gh)


def build_network(cfg: NetworkConfig, seed: int = 0) -> HiveNet:
    return HiveNet(cfg, seed)


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    elementwise: int
    out_shape: tuple


def count_params(net: HiveNet) -> int:
    return int(sum(a.size for _, a in net.named_parameters()))


def _conv_cost(cin, cout, ksize, vox, norm_act=False):
    k = int(np.prod(ksize))
    macs = cin * cout * k * vox
    elem = cout * vox                      # bias
    if norm_act:
        elem += 2 * cout * vox             # norm + relu
    return macs, elem


def _hvec_block_cost(cfg: HvecConfig, dims):
    vox = int(np.prod(dims))
    gi, go = cfg.in_channels // 4, cfg.out_channels // 4
    f = cfg.focal_downsample_factor
    pdims = [-(-s // a) for s, a in zip(dims, f)]
    pvox = int(np.prod(pdims))
    macs = elem = 0
    for i in range(4):
        if i and cfg.inter_branch_connections:
            elem += gi * vox               # hierarchical add
            if cfg.needs_projection:
                m, e = _conv_cost(go, gi, (1, 1, 1), vox)
                macs += m
                elem += e
        if i == 3 and cfg.focal_view_branch:
            m, e = _conv_cost(gi, go, (1, 3, 3), pvox, norm_act=True)
            elem += gi * int(np.prod([p * a for p, a in zip(pdims, f)]))  # pool
            elem += go * vox               # upsample
        else:
            m, e = _conv_cost(gi, go, (1, 3, 3), vox, norm_act=True)
        macs += m
        elem += e
    m, e = _conv_cost(cfg.out_channels, cfg.out_channels, (1, 1, 1), vox, norm_act=True)
    return macs + m, elem + e


def _module_cost(cfg: HvecConfig, dims):
    c2 = cfg.with_channels(cfg.out_channels, cfg.out_channels)
    m1, e1 = _hvec_block_cost(cfg, dims)
    m2, e2 = _hvec_block_cost(c2, dims)
    vox = int(np.prod(dims))
    macs, elem = m1 + m2, e1 + e2 + cfg.out_channels * vox   # residual add
    if cfg.in_channels != cfg.out_channels:
        m, e = _conv_cost(cfg.in_channels, cfg.out_channels, (1, 1, 1), vox)
        macs += m
        elem += e
    return macs, elem


def layer_summary(net: HiveNet, input_dims=None) -> list[LayerCost]:
    """Per-layer parameter and operation counts in forward order."""
    cfg = net.cfg
    dims = tuple(input_dims or cfg.input_crop)
    check_crop(dims, cfg.pool_windows)
    stage_dims = [dims]
    for p in cfg.pool_windows:
        stage_dims.append(tuple(s // a for s, a in zip(stage_dims[-1], p)))
    vox = [int(np.prod(d)) for d in stage_dims]
    rows = []

    def nparams(layer, name):
        return sum(a.size for _, a in layer.named_arrays(name))

    for name, layer in net.layers():
        stage = 0
        extra = 0
        if isinstance(layer, HvecModule):
            cin = layer.cfg.in_channels
            stage = int(name[-1]) if name[-1].isdigit() else 0
            macs, elem = _module_cost(layer.cfg, stage_dims[stage])
            kind = "hvec"
            cout = layer.cfg.out_channels
        else:
            k = layer.kernel
            if name.startswith("enc.down"):
                stage = int(name[-1])
                extra = k.cin * vox[stage - 1]                # max pool
            elif ".entry" in name:
                stage = STAGES
            elif ".up" in name:
                stage = int(name[-1])
            elif ".skip" in name:
                stage = int(name[-1])
            macs, elem = _conv_cost(k.cin, k.cout, k.size, vox[stage], layer.norm is not None)
            if ".up" in name:
                extra = k.cin * vox[stage]                    # upsample (before projection)
            elem += extra
            kind = k.orientation.lower()
            cout = k.cout
            if name.endswith("head"):
                elem += vox[0]                                # sigmoid
        rows.append(LayerCost(name, kind, nparams(layer, name), int(macs), int(elem),
                              (cout,) + stage_dims[stage]))
    # decoder stages without an up-projection still upsample and add the skip
    for dec in (net.seg_decoder, net.det_decoder):
        if dec is None:
            continue
        for k in range(STAGES):
            prev = dec.chans[k + 1]
            e = dec.chans[k] * vox[k]                         # skip sum
            if k not in dec.up_proj:
                e += prev * vox[k]                            # upsample
            rows.append(LayerCost(f"{dec.name}.merge{k}", "merge", 0, 0, int(e),
                                  (dec.chans[k],) + stage_dims[k]))
    return rows


def count_flops(net: HiveNet, input_dims=None, convention: str = "2mac") -> int:
    """Analytic operation count for one forward pass.

    ``convention`` selects how multiply-accumulates are counted: ``"mac"``
    counts one op per MAC, ``"2mac"`` counts two. Elementwise ops (bias,
    norm, activation, add, pool, upsample) count one op per output element in
    both conventions.
    """
    factor = {"mac": 1, "2mac": 2}.get(convention)
    if factor is None:
        raise ValueError(f"convention must be 'mac' or '2mac', got {convention!r}")
    rows = layer_summary(net, input_dims)
    return int(sum(factor * r.macs + r.elementwise for r in rows))


def count_params_analytic(cfg: NetworkConfig) -> int:
    """Closed-form parameter count, independent of instantiation."""
    e = cfg.encoder_channels

    def conv(ci, co, k=1):
        return ci * co * k + co

    def unit(ci, co, k=1):
        return conv(ci, co, k) + 2 * co                # conv + norm affine

    n = unit(1, e[0], int(np.prod(cfg.stem_kernel)))
    for k in range(STAGES + 1):
        if k:
            n += unit(e[k - 1], e[k])
        n += hvec_module_param_count(cfg.hvec_config(e[k], e[k]))

    def dec(c):
        m = unit(e[STAGES], c[STAGES])
        prev = c[STAGES]
        for k in reversed(range(STAGES)):
            if prev != c[k]:
                m += unit(prev, c[k])
            if e[k] != c[k]:
                m += unit(e[k], c[k])
            m += hvec_module_param_count(cfg.hvec_config(c[k], c[k]))
            prev = c[k]
        return m

    s = cfg.segmentation_decoder_channels
    n += dec(s)
    tail_in = s[0]
    if cfg.multitask:
        t = cfg.detection_decoder_channels
        n += dec(t) + conv(t[0], 1)
        tail_in += t[0]
    n += hvec_module_param_count(cfg.hvec_config(tail_in, s[0])) + conv(s[0], 1)
    return n
