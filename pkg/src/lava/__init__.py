"""Desk-scale teacher-student transfer learning lab.

Core pieces: an EMA teacher-student model stack, multi-crop view generation,
pseudo-label and semantic-grounding losses, label-embedding tables, episodic
and KNN evaluation protocols, a procedural composite-image dataset generator,
and a staged training pipeline with a `lava` CLI.
"""

from .models import (ModelStack, StackConfig, TeacherStudentPair, Schedule,
                     ema_update, temperature_softmax, update_center)
from .losses import (AggregationStrategy, LossWeights, cross_entropy,
                     semantic_hinge_loss, aggregate_teacher, multicrop_pl_loss,
                     self_distillation_loss, total_loss, ImageForward)
from .views import CropConfig, ViewSet, ViewMeta, generate_views
from .semantics import (LabelEmbeddingTable, SimilarityGroup, load_embeddings,
                        save_embeddings, synthesize_embeddings,
                        semantic_classify, sample_negative)
from .data import (CompositeSpec, DatasetManifest, ManifestItem,
                   generate_composite_dataset, load_dataset, save_dataset,
                   make_ssl_split, item_image, GLYPH_NAMES)
from .evaluation import (FeatureBank, Episode, knn_classify, evaluate,
                         run_episodes, sample_episode, disagreement_rate,
                         rank_by_disagreement, collapse_fraction,
                         oracle_pseudo_label_accuracy, confidence_interval,
                         oracle_label)
from .config import RunConfig, default_config, parse_config
from .errors import ConfigurationError, DataError, CheckpointError

__version__ = "0.1.0"
