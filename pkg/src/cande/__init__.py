"""Context-aware novelty detection with FiLM-conditioned autoencoders."""
from .context import EmbeddingTable, collect_activations, context_embeddings, one_hot
from .data import ContextScheme, Dataset, SplitSpec, build_contextual_dataset, load_feature_csv, load_idx
from .evaluation import auc, group_scores, novelty_score, novelty_scores, rank_summary
from .models import (Autoencoder, Discriminator, TrainConfig, build_autoencoder, build_discriminator,
                     load_checkpoint, save_checkpoint, train_autoencoder, train_discriminator)

__version__ = "0.1.0"
