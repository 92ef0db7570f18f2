import pytest
import torch
import torch.nn.functional as F

from msvsr import errors
from msvsr.deform import AlignmentParams, FlowGuidedAlign, ReAlign, deform_conv, deform_conv_oracle
from msvsr.flow import warp


def _instance(g, b=1, cin=4, cout=4, h=6, w=7, k=3, groups=1, dgroups=1, spread=2.0):
    taps = k * k * dgroups
    x = torch.rand(b, cin, h, w, generator=g, dtype=torch.float64)
    off = (torch.rand(b, 2 * taps, h, w, generator=g, dtype=torch.float64) - 0.5) * 2 * spread
    m = torch.rand(b, taps, h, w, generator=g, dtype=torch.float64)
    wt = torch.randn(cout, cin // groups, k, k, generator=g, dtype=torch.float64)
    bias = torch.randn(cout, generator=g, dtype=torch.float64)
    return x, off, m, wt, bias


@pytest.mark.parametrize("groups,dgroups", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_deform_conv_matches_oracle_with_groups(groups, dgroups):
    g = torch.Generator().manual_seed(10 * groups + dgroups)
    args = _instance(g, groups=groups, dgroups=dgroups)
    out = deform_conv(*args, groups=groups, deformable_groups=dgroups)
    ref = deform_conv_oracle(*args, groups=groups, deformable_groups=dgroups)
    torch.testing.assert_close(out, ref, atol=1e-10, rtol=0)


def test_deform_conv_single_row_path_matches_oracle():
    g = torch.Generator().manual_seed(3)
    args = _instance(g, h=1, w=5)
    torch.testing.assert_close(deform_conv(*args), deform_conv_oracle(*args), atol=1e-10, rtol=0)


def test_float32_path_close_to_oracle():
    g = torch.Generator().manual_seed(4)
    args = [t.float() for t in _instance(g)]
    torch.testing.assert_close(deform_conv(*args).double(), deform_conv_oracle(*args), atol=1e-4, rtol=0)


def test_zero_offsets_unit_masks_equal_conv2d():
    g = torch.Generator().manual_seed(5)
    x, off, m, wt, bias = _instance(g, cin=4, cout=6, k=5, groups=2)
    out = deform_conv(x, torch.zeros_like(off.new_empty(1, 50, 6, 7)), torch.ones(1, 25, 6, 7, dtype=torch.float64), wt, bias, groups=2)
    torch.testing.assert_close(out, F.conv2d(x, wt, bias, padding=2, groups=2), atol=1e-12, rtol=0)


def test_impulse_response_lands_at_offset_location():
    # 1x1 kernel, offset (+2, -1): output at p reads input at p + (2, -1)
    x = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
    x[0, 0, 1, 3] = 1.0
    off = torch.zeros(1, 2, 5, 5, dtype=torch.float64)
    off[:, 0], off[:, 1] = 2.0, -1.0
    out = deform_conv(x, off, torch.ones(1, 1, 5, 5, dtype=torch.float64), torch.ones(1, 1, 1, 1, dtype=torch.float64))
    expected = torch.zeros_like(x)
    expected[0, 0, 2, 1] = 1.0
    torch.testing.assert_close(out, expected, atol=0, rtol=0)


def test_uniform_offset_equals_warp_then_conv():
    g = torch.Generator().manual_seed(6)
    x, _, _, wt, _ = _instance(g, k=1)
    flow = torch.zeros(1, 2, 6, 7, dtype=torch.float64)
    flow[:, 0], flow[:, 1] = 0.3, -1.6
    out = deform_conv(x, flow, torch.ones(1, 1, 6, 7, dtype=torch.float64), wt)
    torch.testing.assert_close(out, F.conv2d(warp(x, flow), wt), atol=1e-12, rtol=0)


def test_deform_conv_argument_validation():
    x = torch.rand(1, 4, 5, 5)
    wt = torch.rand(4, 4, 3, 3)
    with pytest.raises(errors.ShapeMismatch):
        deform_conv(x, torch.zeros(1, 17, 5, 5), torch.ones(1, 9, 5, 5), wt)
    with pytest.raises(errors.ShapeMismatch):
        deform_conv(x, torch.zeros(1, 18, 5, 5), torch.ones(1, 9, 5, 5), torch.rand(4, 4, 2, 2))
    with pytest.raises(errors.InvariantViolation):
        deform_conv(x, torch.zeros(1, 18, 5, 5), torch.full((1, 9, 5, 5), 1.5), wt)


def test_deform_conv_gradcheck():
    g = torch.Generator().manual_seed(7)
    x, off, m, wt, bias = _instance(g, cin=2, cout=2, h=4, w=4)
    # keep offsets off integer positions, where bilinear sampling has kinks
    off = torch.floor(off) + 0.2 + 0.6 * torch.rand(off.shape, generator=g, dtype=torch.float64)
    inputs = [t.clone().requires_grad_(True) for t in (x, off, m, wt, bias)]
    assert torch.autograd.gradcheck(lambda *a: deform_conv(*a), inputs, eps=1e-6, atol=1e-6)


def _zero(conv):
    torch.nn.init.zeros_(conv.weight)
    torch.nn.init.zeros_(conv.bias)


def test_fga_with_zero_residual_uses_flow_and_half_masks():
    torch.manual_seed(0)
    fga = FlowGuidedAlign(4, deformable_groups=2).double()
    _zero(fga.head)
    nbr, cur = torch.rand(2, 1, 4, 5, 6, dtype=torch.float64).unbind(0)
    flow = torch.randn(1, 2, 5, 6, dtype=torch.float64)
    out, params = fga(nbr, cur, flow)
    assert torch.equal(params.offsets, flow.repeat(1, 18, 1, 1))
    assert torch.all(params.masks == 0.5)
    torch.testing.assert_close(out, deform_conv(nbr, params.offsets, params.masks, fga.dcn.weight, fga.dcn.bias, 1, 2))


def test_realign_zero_residual_reproduces_pre_alignment():
    torch.manual_seed(1)
    ram = ReAlign(4).double()
    _zero(ram.head)
    cur, nbr = torch.rand(2, 1, 4, 5, 6, dtype=torch.float64).unbind(0)
    params = AlignmentParams(torch.randn(1, 18, 5, 6, dtype=torch.float64), torch.rand(1, 9, 5, 6, dtype=torch.float64))
    out, summed = ram(cur, nbr, params)
    assert torch.equal(out, ram.pre_align(nbr, params))
    assert torch.equal(summed.offsets, params.offsets)
    assert torch.equal(summed.masks, params.masks)


def test_realign_masks_are_clamped():
    ram = ReAlign(4).double()
    _zero(ram.head)
    ram.head.bias.data[18:] = 5.0
    cur, nbr = torch.rand(2, 1, 4, 3, 3, dtype=torch.float64).unbind(0)
    params = AlignmentParams(torch.zeros(1, 18, 3, 3, dtype=torch.float64), torch.rand(1, 9, 3, 3, dtype=torch.float64))
    _, summed = ram(cur, nbr, params)
    assert torch.all(summed.masks == 1.0)


def test_integer_offset_with_identity_tap_kernel_shifts_input():
    x = torch.rand(1, 1, 6, 6, dtype=torch.float64)
    wt = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    wt[0, 0, 1, 1] = 1.0
    off = torch.zeros(1, 18, 6, 6, dtype=torch.float64)
    off[:, 0::2] = 1.0
    out = deform_conv(x, off, torch.ones(1, 9, 6, 6, dtype=torch.float64), wt)
    torch.testing.assert_close(out[..., :-1], x[..., 1:], rtol=0, atol=1e-12)


def test_zero_input_gives_bias_only():
    g = torch.Generator().manual_seed(8)
    _, off, m, wt, bias = _instance(g)
    x = torch.zeros(1, 4, 6, 7, dtype=torch.float64)
    for fn in (deform_conv, deform_conv_oracle):
        out = fn(x, off, m, wt, bias)
        torch.testing.assert_close(out, bias.view(1, -1, 1, 1).expand_as(out), rtol=0, atol=0)


def test_impulse_footprint_by_hand():
    # 1x1 kernel with weight 2, offset (0.25, 0.5): output at (1, 1) samples (1.5, 1.25)
    x = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    x[0, 0, 1, 1] = 1.0
    off = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    off[:, 0], off[:, 1] = 0.25, 0.5
    out = deform_conv_oracle(x, off, torch.ones(1, 1, 3, 3, dtype=torch.float64), torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64))
    # (1,1) reads x at y=1.5, x=1.25: weight on (1,1) is 0.5*0.75; (0,0) reads y=0.5, x=0.25: weight 0.5*0.25
    assert out[0, 0, 1, 1].item() == pytest.approx(2 * 0.5 * 0.75)
    assert out[0, 0, 0, 0].item() == pytest.approx(2 * 0.5 * 0.25)
    torch.testing.assert_close(deform_conv(x, off, torch.ones(1, 1, 3, 3, dtype=torch.float64), torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)), out)


def test_deform_conv_finite_differences_1x2x5x5():
    g = torch.Generator().manual_seed(9)
    x, off, m, wt, bias = _instance(g, cin=2, cout=2, h=5, w=5)
    off = torch.floor(off) + 0.2 + 0.6 * torch.rand(off.shape, generator=g, dtype=torch.float64)
    inputs = [t.clone().requires_grad_(True) for t in (x, off, m, wt)]
    assert torch.autograd.gradcheck(lambda *a: deform_conv(*a), inputs, eps=1e-6, atol=1e-6, rtol=1e-3)


def test_fga_with_known_integer_flow_matches_oracle():
    torch.manual_seed(2)
    fga = FlowGuidedAlign(4).double()
    _zero(fga.head)
    cur = torch.rand(1, 4, 6, 6, dtype=torch.float64)
    nbr = torch.roll(cur, shifts=1, dims=-1)
    flow = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
    flow[:, 0] = 1.0
    out, params = fga(nbr, cur, flow)
    ref = deform_conv_oracle(nbr, params.offsets, params.masks, fga.dcn.weight, fga.dcn.bias)
    torch.testing.assert_close(out, ref, atol=1e-10, rtol=0)
    assert params.offsets.shape == (1, 18, 6, 6) and params.masks.shape == (1, 9, 6, 6)


def test_fga_zero_flow_zero_residual_is_masked_conv():
    fga = FlowGuidedAlign(4).double()
    _zero(fga.head)
    nbr, cur = torch.rand(2, 1, 4, 5, 5, dtype=torch.float64).unbind(0)
    out, _ = fga(nbr, cur, torch.zeros(1, 2, 5, 5, dtype=torch.float64))
    # sigmoid(0) = 0.5 scales every tap
    expected = F.conv2d(nbr, 0.5 * fga.dcn.weight, fga.dcn.bias, padding=1)
    torch.testing.assert_close(out, expected, atol=1e-12, rtol=0)


def test_realign_matches_oracle_at_summed_params():
    torch.manual_seed(3)
    ram = ReAlign(4).double()
    cur, nbr = torch.rand(2, 1, 4, 5, 5, dtype=torch.float64).unbind(0)
    params = AlignmentParams(torch.randn(1, 18, 5, 5, dtype=torch.float64), torch.rand(1, 9, 5, 5, dtype=torch.float64))
    out, summed = ram(cur, nbr, params)
    ref = deform_conv_oracle(nbr, summed.offsets, summed.masks, ram.dcn.weight, ram.dcn.bias)
    torch.testing.assert_close(out, ref, atol=1e-10, rtol=0)


def test_realign_composed_degenerate_case_is_standard_conv():
    ram = ReAlign(4).double()
    _zero(ram.head)
    cur, nbr = torch.rand(2, 1, 4, 5, 5, dtype=torch.float64).unbind(0)
    params = AlignmentParams(torch.zeros(1, 18, 5, 5, dtype=torch.float64), torch.ones(1, 9, 5, 5, dtype=torch.float64))
    out, _ = ram(cur, nbr, params)
    torch.testing.assert_close(out, F.conv2d(nbr, ram.dcn.weight, ram.dcn.bias, padding=1), atol=1e-12, rtol=0)
