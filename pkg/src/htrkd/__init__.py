"""Handwritten text recognition with a gated-convolution / BiLSTM / attention
network, CTC training and teacher-student knowledge distillation, built on a
small numpy autodiff core."""

__version__ = "0.1.0"

from .ctc import beam_decode, ctc_log_prob, ctc_loss, ctc_loss_and_grad, greedy_decode
from .data import Charset, build_charset, class_weights, normalize_image, render_text
from .distill import LossWeights, kd_loss, total_loss, weight_schedule
from .evaluation import edit_distance, lexicon_correct, metrics
from .model import STUDENT, TEACHER, ModelConfig, forward, init_params, param_count
from .numerics import Tape, Tensor, grad_check

__all__ = [
    "Charset", "LossWeights", "ModelConfig", "STUDENT", "TEACHER", "Tape", "Tensor",
    "beam_decode", "build_charset", "class_weights", "ctc_log_prob", "ctc_loss", "ctc_loss_and_grad",
    "edit_distance", "forward", "grad_check", "greedy_decode", "init_params", "kd_loss",
    "lexicon_correct", "metrics", "normalize_image", "param_count", "render_text", "total_loss",
    "weight_schedule",
]
