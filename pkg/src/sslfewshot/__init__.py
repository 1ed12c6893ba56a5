"""Few-shot classification with the self-compacting softmax loss.

Stage 1 trains an MLP extractor with a cosine classifier on base classes.
Stage 2 freezes the extractor and fits a per-episode classifier on the
support set. Both stages can use SSL or the plain cosine softmax loss.
"""

from .analysis import AngleStats, OccupancyStats, export_embeddings, occupancy_stats, prototype_angles
from .data import (
    Dataset,
    EpisodeSpec,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    rng_for,
    sample_episode,
    save_dataset,
    split_by_class,
)
from .loss import adjust_weights, loss_fn, sl_loss, ssl_loss
from .nn import ClassifierWeights, FeatureExtractor, init_extractor, load_checkpoint, save_checkpoint
from .train import EvalReport, TrainConfig, evaluate, fit_episode_classifier, pretrain, run_ablation

__version__ = "0.1.0"
