"""Bilinear knowledge-graph embedding toolkit: DistMult, ComplEx and SimplE
with optional joint pair-occurrence training and biased negative sampling,
plus filtered ranking evaluation and reproduction tooling."""

from kgforge.data import (
    DatasetError,
    DatasetNotFoundError,
    FilterSet,
    KGDataset,
    PairIndex,
    TripleStore,
    Vocab,
    dataset_stats,
    load_dataset,
    pair_label,
)
from kgforge.evaluation import (
    EvalReport,
    RankMode,
    TiePolicy,
    compare,
    evaluate,
    rank_triple,
)
from kgforge.models import (
    CheckpointError,
    EmbeddingTable,
    ModelKind,
    grad_score,
    init_table,
    load_checkpoint,
    save_checkpoint,
    score_batch,
    score_complex,
    score_distmult,
    score_simple,
    score_vectors,
    scores_against_all,
)
from kgforge.sampling import (
    CorruptedBatch,
    NegSpec,
    NegativeSampler,
    corrupt_biased,
    corrupt_uniform,
    make_batch_negatives,
)
from kgforge.training import (
    AdamState,
    ConfigError,
    LossMode,
    MemoryBudgetError,
    TrainConfig,
    TrainLog,
    adam_step,
    fit,
    loss_bi_bce,
    loss_full_softmax,
    loss_joint,
    loss_tri_sampled_softmax,
    train_epoch,
)

__version__ = "0.1.0"
