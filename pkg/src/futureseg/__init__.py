"""Future segmentation-map prediction at desk scale.

Given the class maps of four consecutive frames, predict the next frame's
class map (and, autoregressively, several frames ahead). Built on a
self-contained rank-4 tensor core with reverse-mode autodiff; includes a
synthetic moving-shapes benchmark, training with Adam, mIoU evaluation
against a copy-last baseline, and binary dataset/checkpoint formats.
"""

from .autodiff import (
    GradientSet,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    double_precision,
    finite_diff_grad,
    no_grad,
    tensor_new,
)
from .convlstm import CellState, ConvLSTMParams, cell_step, run_bidirectional, run_sequence, zero_state
from .data import GenConfig, SegDataset, SegvError, augment, generate_dataset, one_hot_encode, read_segv, write_segv
from .segnet import ModelConfig, ModelParams, forward_one_step, init_model_params
from .train_eval import (
    Checkpoint,
    CheckpointError,
    MetricsReport,
    TrainConfig,
    copy_last_baseline,
    evaluate_miou,
    load_checkpoint,
    predict_autoregressive,
    predict_one_step,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
