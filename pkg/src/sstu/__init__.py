"""Body segmentation and video see-through compositing toolkit."""

from .model import (ArchConfig, WeightBundle, aggregate_max, build,
                    expand_to_dual, infer, infer_dual, infer_single,
                    load_weights, save_weights)
from .nn import GradTape
from .training import TrainConfig, bce_loss, finetune, gradcheck, train_base, train_ego_decoder

__version__ = "0.1.0"
