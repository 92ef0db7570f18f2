"""Multi-stage video super-resolution: local fusion, flow-guided deformable
propagation with auxiliary supervision, and re-alignment."""

from .data import ClipPair, DegradationSpec, FrameSequence, bd_degrade, load_sequence, make_synthetic_dataset, sample_patch
from .deform import AlignmentParams, FlowGuidedAlign, ReAlign, deform_conv, deform_conv_oracle
from .flow import FlowNet, FlowPyramidConfig, estimate_flow, warp
from .losses import LossConfig, aux_loss, charbonnier, total_loss
from .metrics import MetricReport, psnr, rgb_to_y, ssim
from .model import MSVSR, ForwardOutput, ModelConfig, build_model, get_config, model_stats

__version__ = "0.1.0"
