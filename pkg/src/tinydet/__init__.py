"""Desk-scale tiny-object detector with a from-scratch autograd engine."""

from . import tensor
from .adapter import BilinearSurrogatePyramid, FeaturePyramid, SpatialSemanticAdapter
from .config import PRESETS, ConfigError, RunConfig, load_config
from .data import Dataset, SynthConfig, synth_generate
from .evaluate import EvalResult, ap_eval
from .head import Box, Detection, GtAnnotation, HeadConfig, MatchAssignment, build_cost_matrix, giou, hungarian_match, postprocess_topk, set_loss
from .model import Detector
from .neck import BiFusionBlock, CspFusionBlock, Neck, NeckConfig
from .optim import ParamStore, adamw_step
from .rng import Rng
from .tensor import Tape, Tensor

__version__ = "0.1.0"
