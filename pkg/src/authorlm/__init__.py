"""Temporal author-conditioned language modeling.

A numpy library for training and analyzing language models whose decoder
is conditioned on per-author latent states that evolve through time,
together with the static and naively-temporal baselines they are
measured against.
"""

from .corpus import (
    Corpus,
    Document,
    Vocab,
    build_vocab,
    corpus_stats,
    encode_document,
    load_corpus,
    normalize_and_tokenize,
    save_corpus,
)
from .evaluate import (
    EvalReport,
    evaluate_split,
    gain_series,
    macro_perplexity,
    micro_perplexity,
    state_for_eval,
)
from .generate import beam_search
from .model import AuthorLatents, ConditionedLM, ModelConfig, force_uniform, make_batch
from .numeric import ParamSet, Tape, Tensor, backward, dropout_masks, finite_diff_check
from .optim import AdamState, adam_step, clip_global_norm
from .splits import (
    SplitAssignment,
    TaskKind,
    make_split,
    split_imputation,
    split_modeling,
    split_prediction,
    train_presence,
    verify_split,
)
from .synth import (
    DriftWorldSpec,
    generate_corpus,
    make_drift_spec,
    oracle_cross_entropy,
)
from .train import (
    Checkpoint,
    TrainConfig,
    fit,
    load_checkpoint,
    lr_at,
    minibatch_loss,
    save_checkpoint,
    seed_sweep,
)

__version__ = "0.1.0"
