import pytest
import torch
from torch import nn

from latentcast.blocks import (
    PAPER_VIT, Attention, ConvModule, LonPeriodicConv2d, MSRBlock, PatchEmbed, PatchRecovery, TemporalConv3d, ViT,
    ViTBlock, VitSpec, default_groups, init_weights, msr_stack,
)
from latentcast.errors import ConfigError, ShapeError

SMALL = VitSpec(embed_dim=32, depth=2, heads=4)


def seeded(seed=0):
    torch.manual_seed(seed)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_default_groups():
    assert default_groups(24) == 8 and default_groups(4) == 4 and default_groups(12) == 1


def test_full_size_vit_spec():
    assert PAPER_VIT == VitSpec((4, 4), 768, 8, 12, 4)
    with pytest.raises(ConfigError):
        VitSpec(embed_dim=100, heads=12)


# MSR ---------------------------------------------------------------------------


def test_msr_shape_contract():
    seeded()
    assert MSRBlock(24, 24)(torch.randn(1, 24, 16, 32)).shape == (1, 24, 16, 32)
    assert MSRBlock(12, 32)(torch.randn(2, 12, 8, 8)).shape == (2, 32, 8, 8)


def test_msr_kernel_sizes_and_residual_kind():
    blk = MSRBlock(8, 8)
    assert [b[0].kernel_size for b in blk.branches] == [(3, 3), (5, 5)]
    assert isinstance(blk.skip, nn.Identity)
    assert isinstance(MSRBlock(8, 16).skip, nn.Conv2d)


def test_msr_zero_weights_is_identity():
    seeded()
    blk = MSRBlock(8, 8)
    zero_(blk)
    x = torch.randn(2, 8, 6, 7)
    torch.testing.assert_close(blk(x), x, rtol=0, atol=0)


def test_msr_group_divisibility():
    with pytest.raises(ConfigError):
        MSRBlock(4, 10, norm_groups=4)


def test_msr_rejects_tiny_grid():
    with pytest.raises(ShapeError):
        MSRBlock(2, 2)(torch.zeros(1, 2, 4, 8))


def test_msr_impulse_receptive_field():
    # GroupNorm couples every cell through its statistics, which shifts the far field by a
    # per-channel constant; the spatial footprint of the impulse must stay inside 5x5.
    seeded(1)
    blk = MSRBlock(4, 4)
    init_weights(blk)
    with torch.no_grad():
        for b in blk.branches:
            b[1].bias.normal_()
            b[1].weight.normal_()
    x = torch.zeros(1, 4, 16, 16)
    x[0, 1, 8, 8] = 1.0
    y = blk(x)[0] - x[0]
    far = y[:, 0:1, 0:1]
    dev = (y - far).abs()
    mask = torch.zeros(16, 16, dtype=torch.bool)
    mask[6:11, 6:11] = True
    assert dev[:, ~mask].max() < 1e-6
    assert dev[:, mask].max() > 1e-3


def test_lon_periodic_padding():
    conv = LonPeriodicConv2d(1, 1, 3)
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        conv.weight[0, 0, 1, 0] = 1.0  # picks the western neighbour
    x = torch.zeros(1, 1, 5, 6)
    x[0, 0, 2, 5] = 1.0
    y = conv(x)
    assert y[0, 0, 2, 0] == 1.0  # wrapped across the date line
    x = torch.zeros(1, 1, 5, 6)
    x[0, 0, 2, 2] = 1.0
    conv.weight.data.zero_()
    conv.weight.data[0, 0, 0, 1] = 1.0  # picks the previous latitude row
    y = conv(x)
    assert y[0, 0, 3, 2] == 1.0
    x = torch.zeros(1, 1, 5, 6)
    x[0, 0, 4, 2] = 1.0
    assert conv(x)[0, 0, 0, 2] == 0.0  # latitude is not wrapped


def test_msr_stack_schedule():
    st = msr_stack([12, 32, 24, 16, 8])
    assert [(b.in_channels, b.out_channels) for b in st] == [(12, 32), (32, 24), (24, 16), (16, 8)]


def test_conv_module_layers():
    m = ConvModule(3, 8, 5, 4, eps=0.5)
    assert isinstance(m[1], nn.GroupNorm) and m[1].num_groups == 4 and m[1].eps == 0.5
    assert isinstance(m[2], nn.SiLU)


# temporal ------------------------------------------------------------------------


def test_temporal_zero_weights_zero_output():
    tc = TemporalConv3d(4, residual=False)
    zero_(tc)
    assert torch.count_nonzero(tc(torch.randn(2, 2, 4, 5, 6))) == 0


def test_temporal_shape_and_determinism():
    seeded()
    tc = TemporalConv3d(4)
    x = torch.randn(2, 2, 4, 5, 6)
    assert tc(x).shape == x.shape
    torch.testing.assert_close(tc(x), tc(x), rtol=0, atol=0)


def test_temporal_mixing():
    seeded(2)
    tc = TemporalConv3d(4, residual=False)
    x = torch.randn(1, 2, 4, 5, 6)
    x2 = x.clone()
    x2[:, 1] += 0.5
    assert (tc(x)[:, 0] - tc(x2)[:, 0]).abs().max() > 1e-4


def test_temporal_needs_two_steps():
    with pytest.raises(ShapeError):
        TemporalConv3d(4)(torch.zeros(1, 3, 4, 5, 6))


# patchify / ViT ----------------------------------------------------------------


def test_patch_grid():
    pe = PatchEmbed(6, SMALL, (16, 32))
    assert pe(torch.randn(1, 6, 16, 32)).shape == (1, 32, 4, 8)


def test_patch_zero_input_zero_tokens():
    pe = PatchEmbed(6, SMALL, (16, 32))
    with torch.no_grad():
        pe.pos.zero_()
        pe.proj.bias.zero_()
    assert torch.count_nonzero(pe(torch.zeros(1, 6, 16, 32))) == 0


def test_patch_locality():
    seeded()
    pe = PatchEmbed(3, SMALL, (16, 32))
    x = torch.randn(1, 3, 16, 32)
    x2 = x.clone()
    x2[:, :, 4:8, 12:16] += 1.0
    diff = (pe(x) - pe(x2)).abs().sum(dim=1)[0]
    assert diff[1, 3] > 0
    diff[1, 3] = 0
    assert diff.max() == 0


def test_patch_divisibility():
    with pytest.raises(ShapeError):
        PatchEmbed(3, SMALL, (18, 32))


def test_vit_block_zero_outputs_is_identity():
    blk = ViTBlock(32, 4, 4)
    with torch.no_grad():
        for lin in (blk.attn.proj, blk.mlp[2]):
            lin.weight.zero_()
            lin.bias.zero_()
    x = torch.randn(2, 10, 32)
    torch.testing.assert_close(blk(x), x, rtol=0, atol=0)


def test_attention_rows_sum_to_one():
    seeded()
    att = Attention(32, 4)
    _, w = att(torch.randn(3, 17, 32) * 5, return_weights=True)
    assert w.shape == (3, 4, 17, 17)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(3, 4, 17), rtol=0, atol=1e-6)


def test_vit_block_permutation_equivariance():
    seeded()
    blk = ViTBlock(32, 4, 4)
    x = torch.randn(2, 12, 32)
    perm = torch.randperm(12)
    torch.testing.assert_close(blk(x[:, perm]), blk(x)[:, perm], rtol=1e-5, atol=1e-5)


def test_vit_permutation_with_position_table():
    seeded()
    vit = ViT(4, VitSpec(embed_dim=32, depth=1, heads=4), (8, 8))
    # tokens and their position vectors permuted together: outputs permute the same way
    x = torch.randn(1, 4, 8, 8)
    t = vit.embed(x).flatten(2).transpose(1, 2)
    perm = torch.randperm(t.shape[1])
    out = vit.blocks[0](t)
    torch.testing.assert_close(vit.blocks[0](t[:, perm]), out[:, perm], rtol=1e-5, atol=1e-5)


def test_patch_recovery_shapes():
    rec = PatchRecovery(PAPER_VIT, 48)
    assert rec(torch.randn(1, 768, 4, 8)).shape == (1, 48, 16, 32)
    with pytest.raises(ShapeError):
        rec(torch.randn(1, 64, 4, 8))


def test_patch_recovery_zero():
    rec = PatchRecovery(SMALL, 4)
    with torch.no_grad():
        rec.fc.bias.zero_()
    assert torch.count_nonzero(rec(torch.zeros(1, 32, 2, 2))) == 0


def test_vit_shape_round_trip():
    seeded()
    vit = ViT(8, SMALL, (16, 32))
    assert vit(torch.randn(2, 8, 16, 32)).shape == (2, 8, 16, 32)


def test_patchify_recovery_can_learn_identity():
    seeded(0)
    spec = VitSpec(embed_dim=64, depth=1, heads=4)
    pe, rec = PatchEmbed(4, spec, (8, 8)), PatchRecovery(spec, 4)
    x = torch.randn(8, 4, 8, 8)
    opt = torch.optim.Adam(list(pe.parameters()) + list(rec.parameters()), lr=3e-3)
    for _ in range(200):
        opt.zero_grad()
        loss = ((rec(pe(x)) - x) ** 2).mean()
        loss.backward()
        opt.step()
    assert loss.item() < 0.1 * x.var().item()
