"""Nucleus instance segmentation with a re-parameterizable encoder-decoder,
boundary-distance regression and boundary voting."""

from .groundtruth import SynthSpec, make_targets, synth_sample
from .losses import LossWeights, IsoheightConfig, total_loss
from .metrics import evaluate, summarize
from .network import RepSNet, RepSNetConfig, reparameterize
from .postprocess import BvmConfig, segment

__all__ = [
    "BvmConfig",
    "IsoheightConfig",
    "LossWeights",
    "RepSNet",
    "RepSNetConfig",
    "SynthSpec",
    "evaluate",
    "make_targets",
    "reparameterize",
    "segment",
    "summarize",
    "synth_sample",
    "total_loss",
]

__version__ = "0.1.0"
