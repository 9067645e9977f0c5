"""milbench: a desk-scale whole-slide-image MIL classification pipeline.

Tile extraction with darkest-tile bag selection, attention-pooled MIL
classification trained with a class-weighted log loss, MoCo-style contrastive
pretraining, patient-grouped stratified cross-validation, and
threshold-optimized evaluation.
"""

__version__ = "0.1.0"

from .augment import AugmentSpec, make_two_views
from .embedder import EmbeddingBag, ToyEncoderParams, encode_bag, encode_tile
from .evalkit import (
    FoldAssignment,
    stratified_group_kfold,
    sweep_threshold,
    weighted_log_loss,
)
from .mil_head import HeadParams, TrainConfig, head_forward, predict, train_fold
from .rng import SeededRng
from .slides import SlideImage, load_slide
from .ssl_pretrain import SSLConfig, info_nce_loss, pretrain
from .tiler import TileBag, TilerConfig, build_bag

__all__ = [
    "AugmentSpec",
    "EmbeddingBag",
    "FoldAssignment",
    "HeadParams",
    "SSLConfig",
    "SeededRng",
    "SlideImage",
    "TileBag",
    "TilerConfig",
    "ToyEncoderParams",
    "TrainConfig",
    "build_bag",
    "encode_bag",
    "encode_tile",
    "head_forward",
    "info_nce_loss",
    "load_slide",
    "make_two_views",
    "predict",
    "pretrain",
    "stratified_group_kfold",
    "sweep_threshold",
    "train_fold",
    "weighted_log_loss",
]
