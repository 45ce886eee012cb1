import numpy as np
import pytest

from dslnet import nn, ops
from dslnet.config import ConfigError, ModelConfig, PRESET_NAMES, TOGGLES, ablation_config, preset
from dslnet.dmfa import DMFA, LDOE, offset_channels
from dslnet.gradcheck import gradcheck
from dslnet.model import DSLNet, LKQE, build_model, param_count_formula
from dslnet.stfm import (CME, SME, STFM, TME, ColorBlock, ConditionNet, ModulationBranch, ModulationVector,
                         ResidualBranch, apply_modulation, replicate_pad)
from dslnet.tensor import Tensor, graph_ops, precision, take_slice

TINY = dict(c_feat=8, c_cond=8, c_offset=8)

# (T, deform_groups, c_feat, seed) used wherever an equivalence is asserted over random configs
RANDOM_CONFIGS = [(1, 1, 8, 0), (2, 3, 6, 1), (0, 3, 4, 2), (1, 9, 5, 3)]


def frames(rng, n, T, h, w):
    return rng.uniform(0, 1, size=(n, 3 * (2 * T + 1), h, w)).astype(np.float32)


def to_float64(module):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
    return module


def zero_(*tensors):
    for t in tensors:
        if t is not None:
            t.data = np.zeros_like(t.data)


def randomize_heads(stfm, rng, scale=0.3):
    """Give the zero-initialized modulation heads generic weights."""
    for e in (stfm.tme, stfm.cme, stfm.sme):
        if e is not None:
            for t in (e.head.weight, e.head.bias):
                t.data = rng.uniform(-scale, scale, size=t.shape).astype(t.data.dtype)


def randomize_offsets(dmfa, rng, scale=0.3):
    """Give the zero-initialized offset projection generic weights, so sampling
    positions are fractional and away from bilinear kinks."""
    p = dmfa.ldoe.proj
    p.weight.data = rng.uniform(-scale, scale, size=p.weight.shape).astype(p.weight.data.dtype)
    p.bias.data = rng.uniform(0.1, 0.4, size=p.bias.shape).astype(p.bias.data.dtype)


# -- DMFA / LDOE ------------------------------------------------------------------------------

@pytest.mark.parametrize("k,dg", [(3, 1), (3, 2), (3, 3), (5, 1), (1, 4)])
def test_offset_channel_law(k, dg):
    assert offset_channels(k, dg) == 2 * k * k * dg


@pytest.mark.parametrize("T,dg", [(0, 1), (1, 1), (1, 3), (2, 5), (1, 9)])
def test_ldoe_output_channels_follow_law_for_configs(T, dg):
    cfg = ModelConfig(T=T, deform_groups=dg, **TINY)
    dmfa = DMFA(cfg, np.random.default_rng(0))
    off = dmfa.offsets(Tensor(frames(np.random.default_rng(1), 1, T, 8, 12)))
    assert off.shape == (1, 2 * 3 * 3 * dg, 8, 12)


def test_ldoe_shape_and_zero_init():
    ldoe = LDOE(9, 8, np.random.default_rng(0))
    off = ldoe(Tensor(frames(np.random.default_rng(1), 1, 1, 32, 32)))
    assert off.shape == (1, 18, 32, 32)
    assert not off.data.any()


def test_ldoe_rejects_odd_extents():
    ldoe = LDOE(9, 8, np.random.default_rng(0))
    with pytest.raises(ValueError, match="even"):
        ldoe(Tensor(np.zeros((1, 9, 9, 8))))


@pytest.mark.parametrize("dynamic", [True, False])
def test_ldoe_gradcheck(dynamic):
    rng = np.random.default_rng(3)
    ldoe = to_float64(LDOE(9, 8, rng, dynamic=dynamic))
    ldoe.proj.weight.data = rng.uniform(-0.5, 0.5, size=ldoe.proj.weight.shape)
    x = rng.uniform(0, 1, size=(1, 9, 8, 8))
    assert gradcheck(ldoe, [x], step=1e-5) < 1e-2


def test_ldoe_gradcheck_wrt_first_conv_weight():
    rng = np.random.default_rng(4)
    ldoe = to_float64(LDOE(9, 8, rng))
    ldoe.proj.weight.data = rng.uniform(-0.5, 0.5, size=ldoe.proj.weight.shape)
    x = Tensor(rng.uniform(0, 1, size=(1, 9, 8, 8)))

    def fn(w):
        ldoe.down.weight = w
        return ldoe(x)

    with precision(np.float64):
        assert gradcheck(fn, [ldoe.down.weight.data.copy()], step=1e-5, max_coords=60) < 1e-2


@pytest.mark.parametrize("T,dg,c,seed", RANDOM_CONFIGS)
def test_zero_offset_dmfa_is_plain_conv(T, dg, c, seed):
    cfg = ModelConfig(T=T, deform_groups=dg, c_feat=c, c_cond=c, c_offset=c)
    rng = np.random.default_rng(seed)
    dmfa = DMFA(cfg, rng)
    x = Tensor(frames(rng, 2, T, 10, 12))
    ref = ops.conv2d(x, dmfa.fuse.weight, dmfa.fuse.bias, padding=1)
    np.testing.assert_allclose(dmfa(x).data, ref.data, atol=1e-6, rtol=0)


def test_dmfa_static_scene_reference_replacement():
    rng = np.random.default_rng(5)
    dmfa = DMFA(ModelConfig(T=2, **TINY), rng)
    randomize_offsets(dmfa, rng)
    center = rng.uniform(0, 1, size=(1, 3, 16, 16)).astype(np.float32)
    stacked = np.concatenate([center] * 5, axis=1)
    a = dmfa(Tensor(stacked)).data
    b = dmfa(Tensor(stacked.copy())).data
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


def test_dmfa_preserves_extents():
    dmfa = DMFA(ModelConfig(T=1, **TINY), np.random.default_rng(0))
    for h, w in [(8, 8), (10, 16), (24, 6)]:
        assert dmfa(Tensor(np.zeros((1, 9, h, w), np.float32))).shape == (1, 8, h, w)


def test_gradient_reaches_first_ldoe_conv():
    rng = np.random.default_rng(6)
    dmfa = DMFA(ModelConfig(T=1, **TINY), rng)
    x = Tensor(frames(rng, 1, 1, 16, 16))
    dmfa(x).sum().backward()
    # at initialization the projection is zero, so only it receives gradient
    assert np.abs(dmfa.ldoe.proj.weight.grad).sum() > 0
    assert not np.any(dmfa.ldoe.down.weight.grad)
    # after the projection moves off zero (one optimizer step), the gradient flows through
    dmfa.zero_grad()
    dmfa.ldoe.proj.weight.data = -1e-3 * np.sign(dmfa.ldoe.proj.weight.data + 1)
    dmfa(x).sum().backward()
    assert np.linalg.norm(dmfa.ldoe.down.weight.grad) > 0


def test_controlled_shift_learns_offset():
    """Reference frame = centre content displaced so that X_ref(y, x) = C(y + 2, x).

    Fusion is frozen to copy the reference frame through the centre tap; training
    only the offset estimator to reproduce the centre frame must learn dy = -2.
    """
    from scipy.ndimage import gaussian_filter

    from dslnet.train import Adam

    rng = np.random.default_rng(7)
    size, pad = 32, 8
    cfg = ModelConfig(T=1, **TINY)
    dmfa = DMFA(cfg, rng)
    w = np.zeros(dmfa.fuse.weight.shape, np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0  # output channels 0..2 <- reference frame 0, centre tap
    dmfa.fuse.weight = Tensor(w)
    dmfa.fuse.bias = Tensor(np.zeros(dmfa.fuse.bias.shape, np.float32))
    opt = Adam(dmfa.ldoe.named_parameters())
    learned = []
    for step in range(300):
        big = gaussian_filter(rng.uniform(0, 1, size=(3, size + 2 * pad, size + 2 * pad)), (0, 3, 3))
        big = (big - big.min()) / (big.max() - big.min())
        centre = big[:, pad:pad + size, pad:pad + size]
        ref = big[:, pad + 2:pad + 2 + size, pad:pad + size]
        x = Tensor(np.concatenate([ref, centre, centre])[None].astype(np.float32))
        target = Tensor(centre[None].astype(np.float32))
        dmfa.ldoe.zero_grad()
        out = take_slice(dmfa(x), (slice(None), slice(0, 3)))
        loss = ops.l1_loss(out, target)
        loss.backward()
        opt.step(1e-2)
        if step >= 250:
            off = dmfa.offsets(x).data[0]
            learned.append(off[:, 4:-4, 4:-4].mean(axis=(1, 2)))
    dy, dx = np.mean(learned, axis=0)[8:10]  # centre tap (index 4) of group 0
    assert abs(dy - (-2.0)) < 0.5
    assert abs(dx) < 0.5


# -- STFM --------------------------------------------------------------------------------------

def test_color_block_halves_extents_and_constant_input_gives_bias():
    rng = np.random.default_rng(0)
    block = ColorBlock(3, 5, rng)
    out = block(Tensor(rng.uniform(size=(2, 3, 8, 6))))
    assert out.shape == (2, 5, 4, 3)
    const = block(Tensor(np.full((1, 3, 4, 4), 0.7)))
    expected = np.broadcast_to(block.conv.bias.data[None, :, None, None], (1, 5, 2, 2))
    np.testing.assert_allclose(const.data, expected, atol=1e-6)
    with pytest.raises(ValueError, match="extents"):
        block(Tensor(np.zeros((1, 3, 1, 4))))


def test_condition_net_contracts():
    rng = np.random.default_rng(1)
    net = ConditionNet(6, rng)
    frame = rng.uniform(size=(1, 3, 32, 48)).astype(np.float32)
    feats = net(Tensor(np.concatenate([frame] * 5, axis=1)), 5)
    assert len(feats) == 5
    assert feats[0].shape == (1, 6, 2, 3)
    for f in feats[1:]:
        np.testing.assert_array_equal(f.data, feats[0].data)
    assert net(Tensor(np.zeros((1, 9, 24, 34), np.float32)), 3)[0].shape == (1, 6, 2, 3)


def test_replicate_pad():
    x = np.arange(2 * 3 * 5, dtype=np.float64).reshape(1, 2, 3, 5)
    got = replicate_pad(Tensor(x), 4).data
    np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 3)), mode="edge"))
    y = np.ones((1, 1, 16, 32))
    np.testing.assert_array_equal(replicate_pad(Tensor(y), 16).data, y)


def test_gradcheck_replicate_pad():
    rng = np.random.default_rng(20)
    assert gradcheck(lambda t: replicate_pad(t, 4), [rng.standard_normal((1, 2, 3, 6))]) < 1e-6


def test_vector_extents_for_configs():
    for T, c, h, w in [(1, 8, 16, 16), (2, 4, 32, 16), (0, 6, 16, 48)]:
        cfg = ModelConfig(T=T, c_feat=c, c_cond=c, c_offset=c)
        stfm = STFM(cfg, np.random.default_rng(T))
        v_tm, v_cm, v_sm = stfm.vectors(Tensor(frames(np.random.default_rng(0), 2, T, h, w)), (h, w))
        for v, kind in [(v_tm, "temporal"), (v_cm, "current")]:
            assert v.kind == kind
            assert v.scale.shape == v.shift.shape == (2, c, 1, 1)
        assert v_sm.kind == "spatial"
        assert v_sm.scale.shape == v_sm.shift.shape == (2, c, h, w)


def test_sme_packs_scale_and_shift():
    rng = np.random.default_rng(2)
    sme = SME(4, 6, rng)
    assert sme.head.weight.shape[0] == 12
    v = sme(Tensor(rng.uniform(size=(1, 4, 2, 2))), (16, 16))
    assert v.scale.shape == (1, 6, 16, 16)


def test_apply_modulation_examples():
    f = Tensor(np.full((1, 2, 3, 3), 0.5))
    ones, zeros = Tensor(np.ones((1, 2, 1, 1))), Tensor(np.zeros((1, 2, 1, 1)))
    np.testing.assert_array_equal(apply_modulation(f, ModulationVector(ones, zeros, "current")).data, f.data)
    c = Tensor(np.full((1, 2, 1, 1), 0.25))
    np.testing.assert_array_equal(apply_modulation(f, ModulationVector(zeros, c, "current")).data, 0.25)
    two, minus = Tensor(np.full((1, 2, 1, 1), 2.0)), Tensor(np.full((1, 2, 1, 1), -1.0))
    np.testing.assert_array_equal(apply_modulation(f, ModulationVector(two, minus, "temporal")).data, 0.0)
    with pytest.raises(ValueError):
        apply_modulation(f, ModulationVector(Tensor(np.ones((1, 3, 1, 1))), zeros, "current"))


def test_reference_perturbation_dataflow():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(T=1, **TINY)
    stfm = STFM(cfg, rng)
    randomize_heads(stfm, rng)
    x = frames(rng, 1, 1, 16, 16)
    y = x.copy()
    y[:, :3] = rng.uniform(size=(1, 3, 16, 16))
    y[:, 6:] = rng.uniform(size=(1, 3, 16, 16))
    a = stfm.vectors(Tensor(x), (16, 16))
    b = stfm.vectors(Tensor(y), (16, 16))
    for va, vb in [(a[1], b[1]), (a[2], b[2])]:  # V_CM, V_SM
        np.testing.assert_array_equal(va.scale.data, vb.scale.data)
        np.testing.assert_array_equal(va.shift.data, vb.shift.data)
    assert np.abs(a[0].scale.data - b[0].scale.data).max() > 0


def test_tme_invariant_to_swapping_identical_references():
    rng = np.random.default_rng(4)
    stfm = STFM(ModelConfig(T=1, **TINY), rng)
    randomize_heads(stfm, rng)
    ref, mid = rng.uniform(size=(1, 3, 16, 16)), rng.uniform(size=(1, 3, 16, 16))
    x = np.concatenate([ref, mid, ref], axis=1).astype(np.float32)
    swapped = np.concatenate([x[:, 6:], x[:, 3:6], x[:, :3]], axis=1)
    a = stfm.vectors(Tensor(x), (16, 16))[0]
    b = stfm.vectors(Tensor(swapped), (16, 16))[0]
    np.testing.assert_array_equal(a.scale.data, b.scale.data)


def _reduced_modulation(branch, f):
    out = ops.conv2d(f, branch.entry.weight, branch.entry.bias)
    for conv in branch.stages:
        out = ops.conv2d(ops.relu(out), conv.weight, conv.bias)
    return out


def test_modulation_starts_at_identity():
    rng = np.random.default_rng(8)
    stfm = STFM(ModelConfig(T=1, **TINY), rng)
    for v in stfm.vectors(Tensor(frames(rng, 1, 1, 16, 16)), (16, 16)):
        np.testing.assert_array_equal(v.scale.data, 1.0)
        np.testing.assert_array_equal(v.shift.data, 0.0)


@pytest.mark.parametrize("T,dg,c,seed", RANDOM_CONFIGS)
def test_identity_modulation_reduces_to_plain_branch(T, dg, c, seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(T=T, deform_groups=dg, c_feat=c, c_cond=c, c_offset=c)
    stfm = STFM(cfg, rng)
    for head in (stfm.tme.head, stfm.cme.head, stfm.sme.head):
        zero_(head.weight, head.bias)
    x = Tensor(frames(rng, 2, T, 16, 32))
    f = Tensor(rng.standard_normal((2, c, 16, 32)).astype(np.float32))
    got = stfm(f, x).data
    want = (_reduced_modulation(stfm.modulation, f) + stfm.residual(f)).data
    np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


@pytest.mark.parametrize("T,dg,c,seed", RANDOM_CONFIGS)
def test_identity_modulation_network_equals_unmodulated_network(T, dg, c, seed):
    """Weight-copy oracle: the whole network with identity modulation heads
    matches the network built without any modulation."""
    cfg = ModelConfig(T=T, deform_groups=dg, c_feat=c, c_cond=c, c_offset=c)
    full = DSLNet(cfg, seed)
    reduced = DSLNet(cfg.replace(tfm=False, cfm=False, sfm=False), seed + 100)
    for head in (full.stfm.tme.head, full.stfm.cme.head, full.stfm.sme.head):
        zero_(head.weight, head.bias)
    rng = np.random.default_rng(seed)
    randomize_offsets(full.align, rng)
    src = dict(full.named_parameters())
    for path, p in reduced.named_parameters():
        p.data = src[path].data.copy()
    x = Tensor(frames(rng, 1, T, 16, 16))
    np.testing.assert_allclose(full(x).data, reduced(x).data, atol=1e-6, rtol=0)


def test_stfm_sum_decomposition_and_additivity():
    rng = np.random.default_rng(5)
    stfm = STFM(ModelConfig(T=1, **TINY), rng)
    randomize_heads(stfm, rng)
    x = Tensor(frames(rng, 1, 1, 16, 16))
    f = Tensor(rng.standard_normal((1, 8, 16, 16)).astype(np.float32))
    out = stfm(f, x).data
    v = stfm.vectors(x, (16, 16))
    mod = stfm.modulation(f, *v).data
    skip = stfm.skip(f).data
    np.testing.assert_array_equal(out, mod + skip)
    # silence the modulation branch: last stage conv and the per-stage shifts to zero
    zero_(stfm.modulation.stages[-1].weight, stfm.modulation.stages[-1].bias)
    for head in (stfm.cme.head, stfm.sme.head):
        zero_(head.weight, head.bias)
    np.testing.assert_array_equal(stfm(f, x).data, skip)


def test_stfm_shape():
    rng = np.random.default_rng(6)
    stfm = STFM(ModelConfig(T=2, **TINY), rng)
    f = Tensor(rng.standard_normal((2, 8, 16, 32)).astype(np.float32))
    assert stfm(f, Tensor(frames(rng, 2, 2, 16, 32))).shape == (2, 8, 16, 32)


def test_zero_residual_lkrb_is_identity():
    rng = np.random.default_rng(7)
    block = nn.LKRB(4, rng)
    zero_(block.conv.weight, block.conv.bias)
    x = Tensor(rng.standard_normal((1, 4, 20, 20)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_residual_branch_with_zero_lkrbs_is_conv_stages():
    rng = np.random.default_rng(8)
    branch = ResidualBranch(4, 4, rng)
    for b in branch.blocks:
        zero_(b.conv.weight, b.conv.bias)
    f = Tensor(rng.standard_normal((1, 4, 12, 12)).astype(np.float32))
    g = ops.leaky_relu(ops.conv2d(f, branch.conv_a.weight, branch.conv_a.bias, padding=1), 0.1)
    g = ops.leaky_relu(ops.conv2d(g, branch.conv_b.weight, branch.conv_b.bias, padding=1), 0.1)
    want = ops.conv2d(g, branch.out.weight, branch.out.bias, padding=1)
    np.testing.assert_allclose(branch(f).data, want.data, atol=1e-6, rtol=0)


def test_lkrb_impulse_support_at_least_19():
    rng = np.random.default_rng(9)
    block = to_float64(nn.LKRB(2, rng))
    block.dw.weight.data = rng.uniform(0.1, 1.0, size=block.dw.weight.shape)
    zero_(block.dw.bias, block.conv.bias)
    x = np.zeros((1, 2, 41, 41))
    x[0, :, 20, 20] = 1.0
    with precision(np.float64):
        diff = block(Tensor(x)).data - block(Tensor(np.zeros_like(x))).data - x
    rows, cols = np.nonzero(np.abs(diff).sum(axis=(0, 1)) > 1e-12)
    assert rows.max() - rows.min() + 1 >= 19
    assert cols.max() - cols.min() + 1 >= 19


# -- gradchecks of the composite blocks -------------------------------------------------------

def _gc(module, *inputs, **kw):
    to_float64(module)
    return gradcheck(module, list(inputs), step=kw.pop("step", 1e-5), **kw)


def test_gradcheck_color_block():
    rng = np.random.default_rng(10)
    assert _gc(ColorBlock(3, 4, rng), rng.uniform(size=(2, 3, 6, 6))) < 1e-2


def test_gradcheck_condition_net():
    rng = np.random.default_rng(11)
    net = to_float64(ConditionNet(4, rng))
    x = rng.uniform(size=(1, 9, 16, 16))
    assert gradcheck(lambda t: ops.resize_bilinear(net(t, 3)[0], (1, 1)), [x], step=1e-5) < 1e-2


def test_gradcheck_sme_tme_cme():
    rng = np.random.default_rng(12)
    sme, tme, cme = to_float64(SME(4, 3, rng)), to_float64(TME(4, 3, 3, rng)), to_float64(CME(4, 3, rng))
    f = rng.standard_normal((1, 4, 3, 3))
    assert gradcheck(lambda t: sme(t, (8, 8)).scale + sme(t, (8, 8)).shift, [f], step=1e-5) < 1e-2
    fs = [rng.standard_normal((1, 4, 2, 2)) for _ in range(3)]
    assert gradcheck(lambda a, b, c: tme([a, b, c]).scale * tme([a, b, c]).shift, fs, step=1e-5) < 1e-2
    assert gradcheck(lambda t: cme(t).scale * cme(t).shift, [fs[0]], step=1e-5) < 1e-2


def test_gradcheck_modulation_branch():
    rng = np.random.default_rng(13)
    branch = to_float64(ModulationBranch(4, rng))
    f = rng.standard_normal((1, 4, 5, 5))
    vs = [rng.uniform(0.5, 1.5, size=(1, 4, 1, 1)), rng.standard_normal((1, 4, 1, 1)),
          rng.uniform(0.5, 1.5, size=(1, 4, 1, 1)), rng.standard_normal((1, 4, 1, 1)),
          rng.uniform(0.5, 1.5, size=(1, 4, 5, 5)), rng.standard_normal((1, 4, 5, 5))]

    def fn(f, a, b, c, d, e, g):
        return branch(f, ModulationVector(a, b, "temporal"), ModulationVector(c, d, "current"),
                      ModulationVector(e, g, "spatial"))

    assert gradcheck(fn, [f] + vs, step=1e-5) < 1e-2


def test_gradcheck_residual_branch_and_lkqe():
    rng = np.random.default_rng(14)
    f = rng.standard_normal((1, 3, 6, 6))
    assert _gc(ResidualBranch(3, 2, rng), f) < 1e-2
    assert _gc(LKQE(3, 2, rng), f) < 1e-2


def test_gradcheck_stfm_end_to_end_tiny():
    rng = np.random.default_rng(15)
    stfm = to_float64(STFM(ModelConfig(T=1, c_feat=4, c_cond=4, c_offset=4, n_lkrb_stfm=1), rng))
    randomize_heads(stfm, rng)
    f = rng.standard_normal((1, 4, 16, 16))
    x = rng.uniform(size=(1, 9, 16, 16))
    assert gradcheck(stfm, [f, x], step=1e-5, max_coords=120) < 1e-2


def test_gradcheck_dslnet_tiny():
    rng = np.random.default_rng(16)
    model = to_float64(DSLNet(ModelConfig(T=1, c_feat=4, c_cond=4, c_offset=4, n_lkrb_stfm=1, n_lkrb_lkqe=1), 0))
    randomize_offsets(model.align, rng)
    randomize_heads(model.stfm, rng)
    x = rng.uniform(size=(1, 9, 16, 16))
    assert gradcheck(model, [x], step=1e-5, max_coords=120) < 1e-2


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_dslnet_float32_weights(seed):
    """Float32 parameters as built; the probe itself accumulates in float64."""
    rng = np.random.default_rng(seed)
    model = DSLNet(ModelConfig(T=0, c_feat=4, c_cond=4, c_offset=4, n_lkrb_stfm=1, n_lkrb_lkqe=1), seed)
    randomize_offsets(model.align, rng)
    randomize_heads(model.stfm, rng)
    assert all(p.data.dtype == np.float32 for p in model.parameters())
    x = rng.uniform(size=(1, 3, 8, 8)).astype(np.float32)
    assert gradcheck(model, [x], step=1e-4, max_coords=120) < 1e-2


# -- LKQE and the assembled network ------------------------------------------------------------

def test_lkqe_shape_and_reduced_network():
    rng = np.random.default_rng(17)
    lkqe = LKQE(6, 4, rng)
    f = Tensor(rng.standard_normal((2, 6, 10, 10)).astype(np.float32))
    assert lkqe(f).shape == (2, 3, 10, 10)
    for b in lkqe.blocks:
        zero_(b.conv.weight, b.conv.bias)
    hidden = ops.relu(ops.conv2d(f, lkqe.entry.weight, lkqe.entry.bias, padding=1))
    want = ops.conv2d(hidden, lkqe.head.weight, lkqe.head.bias, padding=1)
    np.testing.assert_allclose(lkqe(f).data, want.data, atol=1e-6, rtol=0)


def test_lkqe_disabled_is_head_only():
    lkqe = LKQE(4, 4, np.random.default_rng(0), enabled=False)
    assert [p for p, _ in lkqe.named_parameters()] == ["head.weight", "head.bias"]


@pytest.mark.parametrize("h,w", [(16, 16), (32, 16), (16, 48), (48, 32)])
def test_output_extents_match_center_frame(h, w):
    model = DSLNet(ModelConfig(T=1, **TINY), 0)
    assert model(Tensor(frames(np.random.default_rng(0), 1, 1, h, w))).shape == (1, 3, h, w)


@pytest.mark.parametrize("name", ["M0", "M1", "M2", "mresnet"])
def test_output_extents_without_condition_constraint(name):
    # configs without the condition network only need even extents
    cfg = preset(name, **TINY)
    model = DSLNet(cfg, 0)
    if cfg.uses_condition_net:
        h, w = 16, 32
    else:
        h, w = 10, 6
    assert model(Tensor(frames(np.random.default_rng(0), 1, cfg.T, h, w))).shape == (1, 3, h, w)


def test_wrong_frame_count_states_expected():
    model = DSLNet(ModelConfig(T=1, **TINY), 0)
    with pytest.raises(ValueError, match=r"2T\+1 = 3"):
        model([np.zeros((1, 3, 16, 16), np.float32)] * 2)
    with pytest.raises(ValueError, match=r"2T\+1 = 3"):
        model(Tensor(np.zeros((1, 12, 16, 16), np.float32)))
    with pytest.raises(ValueError, match="even"):
        model(Tensor(np.zeros((1, 9, 15, 16), np.float32)))


def test_frame_list_and_stacked_input_agree():
    rng = np.random.default_rng(18)
    model = DSLNet(ModelConfig(T=1, **TINY), 0)
    x = frames(rng, 1, 1, 16, 16)
    a = model([x[:, 3 * j:3 * j + 3] for j in range(3)]).data
    np.testing.assert_array_equal(a, model(Tensor(x)).data)


def test_determinism_same_seed_same_output():
    x = frames(np.random.default_rng(19), 1, 1, 16, 16)
    a = DSLNet(ModelConfig(T=1, **TINY), 5).infer(Tensor(x))
    b = DSLNet(ModelConfig(T=1, **TINY), 5).infer(Tensor(x))
    np.testing.assert_array_equal(a, b)


def test_inference_is_clamped():
    model = DSLNet(ModelConfig(T=1, **TINY), 0)
    model.lkqe.head.bias.data = np.array([5.0, -5.0, 0.5], np.float32)
    out = model.infer(Tensor(frames(np.random.default_rng(0), 2, 1, 16, 16)))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert (out[:, 0] == 1.0).all() and (out[:, 1] == 0.0).all()


def test_static_scene_reference_replacement_whole_network():
    rng = np.random.default_rng(20)
    model = DSLNet(ModelConfig(T=1, **TINY), 0)
    randomize_offsets(model.align, rng)
    centre = rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)
    a = model(Tensor(np.concatenate([centre] * 3, axis=1))).data
    b = model([centre, centre, centre]).data
    np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


# -- graph inspection ----------------------------------------------------------------------------

def _ops_for(cfg):
    model = DSLNet(cfg, 0)
    T = cfg.T
    return graph_ops(model(Tensor(frames(np.random.default_rng(0), 1, T, 16, 16))))


def test_graph_without_align_has_no_deformable_node():
    assert "deformable_conv2d" in _ops_for(ModelConfig(T=1, **TINY))
    assert "deformable_conv2d" not in _ops_for(ModelConfig(T=1, align=False, dynamic_offset=False, **TINY))


def test_graph_without_modulation_has_no_modulation_node():
    assert "apply_modulation" in _ops_for(ModelConfig(T=1, **TINY))
    cfg = ModelConfig(T=1, tfm=False, cfm=False, sfm=False, **TINY)
    assert "apply_modulation" not in _ops_for(cfg)


# -- presets and parameter counts -----------------------------------------------------------------

def test_m0_is_single_frame_all_off():
    cfg = ablation_config(0)
    assert cfg.T == 0
    assert not any(getattr(cfg, t) for t in TOGGLES)


def test_m7_equals_full_toggles():
    m7, full = preset("M7"), preset("full")
    assert {t: getattr(m7, t) for t in TOGGLES} == {t: getattr(full, t) for t in TOGGLES}
    assert all(getattr(full, t) for t in TOGGLES)
    assert m7.replace(preset="full") == full


def test_ablation_rows_are_cumulative():
    prev = set()
    for k in range(8):
        cfg = preset(f"M{k}")
        on = {t for t in TOGGLES if getattr(cfg, t)}
        assert prev <= on and len(on) == k
        prev = on


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigError) as e:
        preset("M9")
    for name in PRESET_NAMES:
        assert name in str(e.value)


def test_inconsistent_toggles_rejected():
    with pytest.raises(ConfigError, match="dynamic_offset requires align"):
        ModelConfig(align=False, dynamic_offset=True)
    with pytest.raises(ConfigError):
        build_model(preset("tiny", deform_groups=2))


def test_same_seed_same_parameters():
    a, b = build_model(preset("tiny"), 3), build_model(preset("tiny"), 3)
    for (pa, ta), (pb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert pa == pb
        np.testing.assert_array_equal(ta.data, tb.data)
    c = build_model(preset("tiny"), 4)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), c.parameters()))


def test_parameter_paths_unique():
    paths = [p for p, _ in build_model(preset("full")).named_parameters()]
    assert len(paths) == len(set(paths))


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_param_count_matches_formula(name):
    cfg = preset(name)
    assert build_model(cfg).param_count() == param_count_formula(cfg)


@pytest.mark.parametrize("overrides", [dict(T=2, deform_groups=3), dict(c_feat=16, dyn_k=3, n_lkrb_stfm=2),
                                       dict(c_offset=12, deform_groups=9, large_kernel=9)])
def test_param_formula_for_custom_configs(overrides):
    cfg = preset("tiny", **overrides)
    assert build_model(cfg).param_count() == param_count_formula(cfg)


def test_param_count_monotone_over_ablation_rows():
    counts = [param_count_formula(preset(f"M{k}")) for k in range(8)]
    assert counts == sorted(counts)
    assert counts[-1] == param_count_formula(preset("full"))


def test_full_preset_budget():
    n = build_model(preset("full")).param_count()
    assert abs(n - 0.93e6) / 0.93e6 <= 0.10


def test_mresnet_formula():
    cfg = preset("mresnet")
    assert cfg.T == 1 and not any(getattr(cfg, t) for t in TOGGLES)
    C = cfg.c_feat
    by_hand = (9 * C * 9 + C) + 4 * (C * C + C) + (C * 3 * 9 + 3)
    assert param_count_formula(cfg) == by_hand == build_model(cfg).param_count()
