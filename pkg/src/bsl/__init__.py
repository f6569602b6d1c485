"""Block shuffling learning for forgery detectors."""
from .shuffle import (ShuffleConfig, ShuffleOutcome, assemble_blocks, image_stream,
                      intra_shuffle_block, partition_blocks, shuffle_image, unshuffle)
from .models import BSLModel, build_backbone, build_model, decode_coords
from .objectives import LossBundle, LossWeights, loss_adv, loss_cls, loss_loc, loss_total
from .datasets import ArrayDataset, Degradation, Manifest, apply_degradation, synth_forgery
from .evaluation import MetricReport, accuracy, auc, restoration_histogram, robustness_sweep
from .training import RunConfig, Trainer

__version__ = "0.1.0"
