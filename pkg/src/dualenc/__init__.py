"""Desk-scale dual-encoder retrieval lab.

Train two-tower encoders with in-batch contrastive objectives (standard,
same-tower-negative, and hybrid pair losses), retrieve with exact cosine
kNN, score with P@1 / MRR / NDCG@10, and probe the embedding space with
top-1 similarity distributions, query-query/query-document ratio
histograms, and exact t-SNE maps.
"""

from .data import PairCorpus, PairRecord, SynthConfig, generate_synthetic, load_corpus, save_corpus, unique_document_rate
from .diagnostics import (
    DistributionStats,
    Histogram,
    Projection2D,
    TsneConfig,
    gaussian_affinities,
    inter_tower_alignment,
    qq_qd_ratio_histogram,
    top1_similarity_distribution,
    tsne,
)
from .encoder import (
    ModelParams,
    TowerConfig,
    encode,
    encode_backward,
    encode_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from .errors import (
    DataError,
    DegenerateInputError,
    DivergenceError,
    DualEncError,
    ParameterError,
    ParseError,
    SampleSizeError,
    SchemaError,
    ShapeError,
)
from .losses import (
    LossConfig,
    LossResult,
    SimMatrices,
    bidirectional_loss,
    contrastive_loss,
    duplicate_mask,
    evaluate_loss,
    pair_loss,
    samtone_loss,
    similarity_matrices,
)
from .numerics import Rng, l2_normalize_rows, matmul, row_softmax
from .retrieval import (
    Index,
    build_index,
    judgments_from_corpus,
    knn,
    load_judgments_tsv,
    mrr,
    ndcg_at_10,
    precision_at_1,
    random_ranking_mrr,
    rank_queries,
    save_judgments_tsv,
    save_rankings_tsv,
)
from .trainer import TrainConfig, TrainLog, lr_schedule, make_batches, train, train_step

__version__ = "0.1.0"
