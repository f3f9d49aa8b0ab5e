"""Pressure-ulcer wound segmentation with a residual attention U-Net, in numpy."""
from .augment import AugmentConfig, build_augmented_set, rotate_pair, reflect_pair, watershed_enhance, watershed_segment
from .data_io import (
    Dataset,
    Sample,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    read_checkpoint,
    read_report,
    render_overlay,
    save_checkpoint,
    save_dataset,
    write_report,
)
from .errors import (
    CorruptionError,
    DataError,
    FileReadError,
    FormatError,
    ParameterError,
    PucareError,
    ShapeError,
    SkipAugmentation,
    VerificationError,
    VersionError,
)
from .gradcheck import run_suite
from .metrics import Confusion, MetricTriple, accuracy, confusion_counts, dsc, iou, macro_average, micro_average
from .model import ModelConfig, ModelParams, forward, init_params
from .preprocess import PreprocessConfig, normalize, preprocess_pair, resize_bilinear, resize_mask_nearest
from .tensor import Tensor, backward, grad_check
from .training import SplitSpec, TrainConfig, evaluate_model, fit, pretrain_finetune, split_dataset

__version__ = "0.1.0"
