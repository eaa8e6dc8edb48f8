import numpy as np
import pytest

from hivenet.hvec import (
    ABLATION_VARIANTS,
    HvecConfig,
    HvecModule,
    HvecModuleParams,
    HvecParams,
    hvec_backward,
    hvec_forward,
    hvec_module_backward,
    hvec_module_forward,
    hvec_module_param_count,
    hvec_param_count,
    impulse_support,
    module_configs,
)
from hivenet.tensor import ConvKernel, ShapeError, grad_check

from oracles import conv_loops, conv_taps, hvec_ref, norm_ref, relu


def randomized(cfg, seed):
    """Block parameters with nonzero biases and non-trivial norm affines."""
    rng = np.random.default_rng(seed)
    p = HvecParams.init(cfg, rng)
    for name, a in p.named_arrays():
        if name.endswith("bias") or name.endswith("shift"):
            a[...] = 0.3 * rng.standard_normal(a.shape)
        elif name.endswith("scale"):
            a[...] = 1.0 + 0.3 * rng.standard_normal(a.shape)
    return p


def ref_args(p):
    return dict(
        branches=[(k.weight, k.bias) for k in p.branches],
        norms=[(n.scale, n.shift) for n in p.branch_norms],
        fusion=(p.fusion.weight, p.fusion.bias),
        fusion_norm=(p.fusion_norm.scale, p.fusion_norm.shift),
        projections=[(k.weight, k.bias) for k in p.projections],
    )


# --- configuration --------------------------------------------------------------

@pytest.mark.parametrize("cin,cout", [(6, 8), (8, 10), (0, 4)])
def test_config_divisibility(cin, cout):
    with pytest.raises(ValueError):
        HvecConfig(cin, cout)


def test_params_shapes():
    p = HvecParams.init(HvecConfig(8, 16), np.random.default_rng(0))
    assert [k.orientation for k in p.branches] == ["XY", "XZ", "YZ", "XY"]
    assert all(k.weight.shape[:2] == (4, 2) for k in p.branches)
    assert p.fusion.weight.shape == (16, 16, 1, 1, 1)
    assert [k.weight.shape[:2] for k in p.projections] == [(2, 4)] * 3


def test_input_channel_mismatch():
    cfg = HvecConfig(8, 8)
    p = HvecParams.init(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        hvec_forward(np.zeros((1, 4, 2, 4, 4)), cfg, p)


# --- forward vs straight-line reference -------------------------------------------

@pytest.mark.parametrize("variant", sorted(ABLATION_VARIANTS))
@pytest.mark.parametrize("cin,cout", [(8, 8), (4, 8), (8, 4)])
def test_forward_matches_reference(variant, cin, cout):
    inter, focal = ABLATION_VARIANTS[variant]
    cfg = HvecConfig(cin, cout, inter, focal)
    p = randomized(cfg, 7)
    x = np.random.default_rng(1).standard_normal((1, cin, 3, 5, 7))    # odd in-plane dims
    y = hvec_forward(x, cfg, p)
    assert y.shape == (1, cout, 3, 5, 7)
    np.testing.assert_allclose(y, hvec_ref(x, inter, focal, **ref_args(p)), atol=1e-10)


def test_zero_input_variant_a_gives_fusion_shift():
    cfg = HvecConfig(8, 8, False, False)
    p = randomized(cfg, 3)
    y = hvec_forward(np.zeros((1, 8, 2, 4, 4)), cfg, p)
    # every conv output is constant per channel, so each norm emits its shift
    expect = np.maximum(p.fusion_norm.shift, 0.0)
    np.testing.assert_allclose(y, np.broadcast_to(expect[None, :, None, None, None], y.shape), atol=1e-12)


def test_zero_input_matches_reference():
    # with inter-branch adds the constant branch output meets zero padding,
    # so only the reference evaluation pins the result down
    cfg = HvecConfig(8, 8)
    p = randomized(cfg, 3)
    x = np.zeros((1, 8, 2, 4, 4))
    np.testing.assert_allclose(hvec_forward(x, cfg, p), hvec_ref(x, True, True, **ref_args(p)), atol=1e-12)


def test_shape_preservation_64():
    cfg = HvecConfig(64, 64)
    p = HvecParams.init(cfg, np.random.default_rng(0))
    x = np.random.default_rng(0).standard_normal((1, 64, 8, 16, 16))
    assert hvec_forward(x, cfg, p).shape == (1, 64, 8, 16, 16)


def test_variant_a_is_grouped_multiview_conv():
    cfg = HvecConfig(8, 8, False, False)
    p = randomized(cfg, 5)
    x = np.random.default_rng(2).standard_normal((1, 8, 3, 4, 5))
    outs = []
    for i, (k, n) in enumerate(zip(p.branches, p.branch_norms)):
        g = x[:, 2 * i:2 * i + 2]
        outs.append(relu(norm_ref(conv_loops(g, k.weight, k.bias), n.scale, n.shift)))
    z = conv_loops(np.concatenate(outs, axis=1), p.fusion.weight, p.fusion.bias)
    expect = relu(norm_ref(z, p.fusion_norm.scale, p.fusion_norm.shift))
    np.testing.assert_allclose(hvec_forward(x, cfg, p), expect, atol=1e-10)


@pytest.mark.parametrize("variant", sorted(ABLATION_VARIANTS))
def test_view_decomposition(variant):
    inter, focal = ABLATION_VARIANTS[variant]
    cfg = HvecConfig(8, 8, inter, focal)
    p = randomized(cfg, 9)
    for k in p.branches[1:]:
        k.weight[...] = 0.0
        k.bias[...] = 0.0
    p.fusion.weight[...] = 0.0
    p.fusion.bias[...] = 0.0
    for c in range(2):
        p.fusion.weight[c, c] = 1.0
    x = np.random.default_rng(4).standard_normal((1, 8, 3, 5, 5))
    y = hvec_forward(x, cfg, p, normalize=False)
    k1 = p.branches[0]
    expect = relu(conv_taps(x[:, :2], k1.weight, k1.bias))
    np.testing.assert_allclose(y[:, :2], expect, atol=1e-12)
    assert not y[:, 2:].any()


# --- parameter counting ---------------------------------------------------------

def enumerate_count(p):
    return sum(a.size for _, a in p.named_arrays())


@pytest.mark.parametrize("cin,cout", [(4, 4), (8, 8), (8, 16), (16, 8), (32, 32)])
@pytest.mark.parametrize("variant", sorted(ABLATION_VARIANTS))
def test_param_count_matches_enumeration(cin, cout, variant):
    cfg = HvecConfig(cin, cout, *ABLATION_VARIANTS[variant])
    assert hvec_param_count(cfg) == enumerate_count(HvecParams.init(cfg, np.random.default_rng(0)))


def test_param_count_4_to_4():
    # 4 branch kernels of 9 weights + bias, 4 norms of 2, fusion 16 + 4, fusion norm 8
    assert hvec_param_count(HvecConfig(4, 4)) == 4 * 10 + 8 + 20 + 8


def test_branch_weights_scale_quadratically():
    def branch_weights(c):
        p = HvecParams.init(HvecConfig(c, c), np.random.default_rng(0))
        return sum(k.weight.size for k in p.branches)
    assert branch_weights(16) == 4 * branch_weights(8)


def test_variant_a_and_d_same_count():
    # flags change wiring, not kernel shapes
    assert hvec_param_count(HvecConfig(16, 16, False, False)) == hvec_param_count(HvecConfig(16, 16, True, True))


@pytest.mark.parametrize("cin,cout", [(8, 8), (8, 16)])
def test_module_param_count(cin, cout):
    m = HvecModule(HvecConfig(cin, cout), np.random.default_rng(0))
    assert hvec_module_param_count(m.cfg) == sum(a.size for _, a in m.named_arrays("m"))


# --- module -------------------------------------------------------------------

def test_module_identity_when_zeroed():
    cfg = HvecConfig(8, 8)
    c1, c2 = module_configs(cfg)
    rng = np.random.default_rng(0)
    p1, p2 = HvecParams.init(c1, rng), HvecParams.init(c2, rng)
    for p in (p1, p2):
        for _, a in p.named_arrays():
            a[...] = 0.0
    x = rng.standard_normal((1, 8, 2, 4, 4))
    np.testing.assert_array_equal(hvec_module_forward(x, cfg, p1, p2), x)


def test_module_shape_128():
    m = HvecModule(HvecConfig(128, 128), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((1, 128, 8, 16, 16))
    assert m.forward(x, train=False).shape == x.shape


def test_module_width_change_needs_shortcut():
    cfg = HvecConfig(8, 16)
    c1, c2 = module_configs(cfg)
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        hvec_module_forward(np.zeros((1, 8, 2, 4, 4)), cfg, HvecParams.init(c1, rng), HvecParams.init(c2, rng))


def module_gradcheck(cfg, seed, shape=(3, 4, 4)):
    rng = np.random.default_rng(seed)
    c1, c2 = module_configs(cfg)
    sc = ConvKernel.init(cfg.in_channels, cfg.out_channels, "POINT", rng) \
        if cfg.in_channels != cfg.out_channels else None
    params = HvecModuleParams(randomized(c1, seed), randomized(c2, seed + 100), sc)
    x = rng.standard_normal((1, cfg.in_channels) + shape)
    w = rng.standard_normal((1, cfg.out_channels) + shape)

    def loss(*_):
        return float((hvec_module_forward(x, cfg, params.first, params.second, params.shortcut) * w).sum())

    cache = {}
    hvec_module_forward(x, cfg, params.first, params.second, params.shortcut, cache)
    gx, g = hvec_module_backward(w, cfg, params, cache)
    inputs = [x] + [a for _, a in params.named_arrays()]
    grads = [gx] + [a for _, a in g.named_arrays()]
    return grad_check(loss, grads, inputs, h=1e-5, max_entries=400, seed=seed, refine=2)


@pytest.mark.parametrize("variant", sorted(ABLATION_VARIANTS))
@pytest.mark.parametrize("cin,cout", [(8, 8), (4, 8)])
def test_module_gradient(variant, cin, cout):
    rep = module_gradcheck(HvecConfig(cin, cout, *ABLATION_VARIANTS[variant]), seed=11)
    assert rep.max_rel_error < 1e-4, rep.max_rel_error
    assert rep.refined < 0.05 * rep.checked


@pytest.mark.parametrize("seed", range(3))
def test_block_gradient_focal_odd_dims(seed):
    cfg = HvecConfig(8, 8)
    p = randomized(cfg, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 8, 2, 3, 5))
    w = rng.standard_normal(x.shape)

    def loss(*_):
        return float((hvec_forward(x, cfg, p) * w).sum())

    cache = {}
    hvec_forward(x, cfg, p, cache)
    gx, g = hvec_backward(w, cfg, p, cache)
    rep = grad_check(loss, [gx] + [a for _, a in g.named_arrays()],
                     [x] + [a for _, a in p.named_arrays()], h=1e-5, max_entries=300, seed=seed, refine=2)
    assert rep.max_rel_error < 1e-4


def test_stateful_module_accumulates_grads():
    m = HvecModule(HvecConfig(8, 8), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((1, 8, 2, 4, 4))
    g = np.ones_like(x)
    m.forward(x)
    m.backward(g)
    first = [a.copy() for _, a in m.named_grads("m")]
    m.forward(x)
    m.backward(g)
    for a, b in zip(first, (a for _, a in m.named_grads("m"))):
        np.testing.assert_allclose(b, 2 * a)
    with pytest.raises(RuntimeError):
        m.backward(g)


# --- receptive field -------------------------------------------------------------

def test_receptive_field_d_contains_b():
    b = impulse_support(HvecConfig(4, 4, False, True))
    d = impulse_support(HvecConfig(4, 4, True, True))
    assert all(dv > bv for dv, bv in zip(d, b)), (b, d)


def test_receptive_field_values():
    # without inter-branch adds, the union of 1x3x3 / 3x1x3 / 3x3x1 views is 3 wide
    a = impulse_support(HvecConfig(4, 4, False, False))
    assert a == (3, 3, 3)
    c = impulse_support(HvecConfig(4, 4, True, False))
    assert c == (5, 7, 7)
