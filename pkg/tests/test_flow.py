import pytest
import torch

from msvsr import errors
from msvsr.flow import FlowNet, FlowPyramidConfig, bilinear_sample, fit_flow, warp


def _warp_loops(src, flow):
    b, c, h, w = src.shape
    out = torch.zeros_like(src)
    for n in range(b):
        for y in range(h):
            for x in range(w):
                sx = x + flow[n, 0, y, x].item()
                sy = y + flow[n, 1, y, x].item()
                x0, y0 = int(torch.floor(torch.tensor(sx))), int(torch.floor(torch.tensor(sy)))
                for xi, wx in ((x0, 1 - (sx - x0)), (x0 + 1, sx - x0)):
                    for yi, wy in ((y0, 1 - (sy - y0)), (y0 + 1, sy - y0)):
                        if 0 <= xi < w and 0 <= yi < h:
                            out[n, :, y, x] += wx * wy * src[n, :, yi, xi]
    return out


def test_warp_zero_flow_is_bit_identical():
    src = torch.rand(2, 3, 7, 9)
    assert torch.equal(warp(src, torch.zeros(2, 2, 7, 9)), src)


def test_warp_matches_loop_oracle():
    g = torch.Generator().manual_seed(1)
    src = torch.rand(1, 2, 5, 6, generator=g, dtype=torch.float64)
    flow = (torch.rand(1, 2, 5, 6, generator=g, dtype=torch.float64) - 0.5) * 6
    torch.testing.assert_close(warp(src, flow), _warp_loops(src, flow), atol=1e-12, rtol=0)


def test_integer_shift_reads_neighbor_and_pads_with_zero():
    src = torch.arange(20.0).reshape(1, 1, 4, 5)
    flow = torch.zeros(1, 2, 4, 5)
    flow[:, 0] = 1.0
    out = warp(src, flow)
    torch.testing.assert_close(out[..., :-1], src[..., 1:], rtol=0, atol=0)
    assert torch.all(out[..., -1] == 0)


def test_fully_outside_samples_are_zero():
    src = torch.rand(1, 3, 4, 4)
    flow = torch.full((1, 2, 4, 4), 10.0)
    assert torch.all(warp(src, flow) == 0)


def test_bilinear_sample_half_pixel_average():
    src = torch.tensor([[[[0.0, 2.0], [4.0, 6.0]]]])
    out = bilinear_sample(src, torch.tensor([[0.5]]), torch.tensor([[0.5]]))
    assert out.item() == pytest.approx(3.0)


def test_warp_shape_errors():
    with pytest.raises(errors.ShapeMismatch):
        warp(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4))
    with pytest.raises(errors.ShapeMismatch):
        warp(torch.rand(1, 3, 4, 4), torch.rand(1, 2, 4, 5))


def test_warp_gradcheck():
    g = torch.Generator().manual_seed(2)
    src = torch.rand(1, 2, 4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    # keep sample positions away from integer grid lines where bilinear is not differentiable
    flow = (torch.rand(1, 2, 4, 5, generator=g, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    assert torch.autograd.gradcheck(warp, (src, flow), eps=1e-6, atol=1e-6)


def test_flownet_zero_heads_give_zero_flow():
    net = FlowNet(FlowPyramidConfig(3, 8))
    for level in net.levels:
        torch.nn.init.zeros_(level.head.weight)
        torch.nn.init.zeros_(level.head.bias)
    ref, sup = torch.rand(2, 1, 3, 12, 10).unbind(0)
    assert torch.all(net(ref, sup) == 0)


def test_flownet_output_shape_with_padding():
    net = FlowNet(FlowPyramidConfig(3, 8))
    out = net(torch.rand(2, 3, 13, 10), torch.rand(2, 3, 13, 10))
    assert out.shape == (2, 2, 13, 10)


def test_flownet_coarse_flow_is_upsampled_and_doubled():
    # only the coarsest head emits a constant; each finer level doubles it
    cfg = FlowPyramidConfig(3, 8)
    net = FlowNet(cfg)
    for i, level in enumerate(net.levels):
        torch.nn.init.zeros_(level.head.weight)
        torch.nn.init.zeros_(level.head.bias)
        if i == 0:
            level.head.bias.data[:] = torch.tensor([0.25, -0.5])
    out = net(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))
    torch.testing.assert_close(out[0, 0], torch.full((8, 8), 1.0))
    torch.testing.assert_close(out[0, 1], torch.full((8, 8), -2.0))


def test_fit_flow_recovers_one_pixel_shift():
    torch.manual_seed(0)
    base = torch.rand(1, 3, 32, 33)
    base = torch.nn.functional.avg_pool2d(base, 3, 1, 1)
    ref, sup = base[..., :, 1:], base[..., :, :-1]  # ref(x) = sup(x + 1)
    net = FlowNet(FlowPyramidConfig(3, 8))
    losses = fit_flow(net, ref, sup, iters=300, lr=1e-3)
    assert losses[-1] < losses[0]
    flow = net(ref, sup).detach()
    interior = flow[:, :, 4:-4, 4:-4]
    assert (interior[:, 0] - 1.0).abs().mean() < 0.3
    assert interior[:, 1].abs().mean() < 0.3


def test_warp_finite_differences_on_1x4x6x6():
    g = torch.Generator().manual_seed(5)
    src = torch.rand(1, 4, 6, 6, generator=g, dtype=torch.float64, requires_grad=True)
    flow = (torch.floor((torch.rand(1, 2, 6, 6, generator=g, dtype=torch.float64) - 0.5) * 4)
            + 0.2 + 0.6 * torch.rand(1, 2, 6, 6, generator=g, dtype=torch.float64)).requires_grad_(True)
    assert torch.autograd.gradcheck(warp, (src, flow), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_warp_undoes_known_shift():
    src = torch.rand(1, 3, 6, 8)
    shifted = torch.zeros_like(src)
    shifted[..., :-1] = src[..., 1:]  # content moved one pixel left
    flow = torch.zeros(1, 2, 6, 8)
    flow[:, 0] = -1.0
    out = warp(shifted, flow)
    torch.testing.assert_close(out[..., 1:-1], src[..., 1:-1], rtol=0, atol=0)
