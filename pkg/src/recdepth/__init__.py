"""recdepth: recurrent depth estimation and completion on video sequences.

One encoder-ConvLSTM-decoder backbone serves three regimes: supervised depth
prediction, self-supervised prediction from monocular video, and
self-supervised completion from video plus sparse depth.
"""

from .errors import ConfigurationError
from .geometry import Intrinsics, backproject, bilinear_sample, inverse_warp, pose_to_matrix, project
from .losses import LossWeights, berhu, lambda_schedule, min_reprojection, photometric, smoothness, ssim, total_loss
from .model import ModelConfig, PoseNetwork, RecurrentDepthModel, disp_to_depth, load_checkpoint, save_checkpoint
from .sparsity import SparsePattern, sample_full, sample_lines, sample_random
from .training import TrainConfig, infer_sequence, stage1_train, stage2_train, train
from .evaluation import EvalConfig, accumulated_rmse, arte, depth_metrics, emit_report, median_scale

__version__ = "0.1.0"
