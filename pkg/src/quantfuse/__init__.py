"""Scale-only fake-quantized visual-odometry front-end with fused execution."""
from .tensor import Precision, Tensor, TensorError, conv2d, demote_half
from .quant import QuantConfig, QuantError, ScaleParams, fake_quantize, fake_quantize_backward, int8_codes
from .engine import ArenaAllocator, ExecutionPlan, ExecutionTrace, Mode, PrecisionPolicy, run_frontend
from .frontend import FrontendModel, build_toy_patchifier, forward, inject_qat, strip_qat
from .distill import DistillConfig, distill_loss, train_scales
from .geometry import Pose, Trajectory, ate_rmse, generate_scene, match_descriptors, run_pipeline, solve_pose_gn

__version__ = "0.1.0"
