"""Text-conditioned audio/video retrieval engine.

A query text attends over video frame embeddings and audio token embeddings
through two independent cross-attention blocks; the two conditioned
embeddings are fused (by addition, by default) and compared to the query by
cosine similarity.  The package provides the blocks with hand-written
backward rules, symmetric InfoNCE training with a learnable temperature, an
adaptive-shift Mel filter-bank audio front end, ranking metrics, two-stage
re-ranking, dual-softmax post-processing, and binary persistence for
embeddings and checkpoints.
"""

from .attention import (
    XAttnParams,
    attend,
    conditioned_embedding,
    export_attention_weights,
    project,
)
from .audiofeat import (
    MelFilterBank,
    PatchGrid,
    Waveform,
    adaptive_frame_shift,
    compute_fbank,
    patch_count,
    patch_grid,
    read_wav,
    zero_fbank,
)
from .config import ConfigError, TrainConfig, load_config
from .contrastive import Temperature, cosine_similarity, infonce
from .corpus import Corpus, synth_corpus
from .fusion import FusionKind, FusionParams, audio_summary, fuse
from .linalg import (
    ParamStore,
    ShapeError,
    grad_check,
    layernorm_rows,
    matmul,
    softmax_rows,
)
from .model import RetrievalModel, create_model, named_parameters, similarity_matrix
from .ranking import (
    EvalStats,
    RankingMetrics,
    compute_metrics,
    dual_softmax_postprocess,
    mean_pool,
    rank_exhaustive,
    ranks_from_similarity,
    rerank_two_stage,
)
from .storage import (
    FormatError,
    load_checkpoint,
    load_corpus,
    read_embeddings,
    read_fbank,
    save_checkpoint,
    save_corpus,
    write_embeddings,
    write_fbank,
)
from .training import AdamW, EvalResult, TrainingDiverged, TrainResult, evaluate, train
from .verify import end_to_end_check, run_grad_checks

__version__ = "0.1.0"
