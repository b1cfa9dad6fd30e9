//! Frequency-aware multimodal sequential recommender: item tokens from
//! projected modality embeddings and semantic-ID embeddings, a small causal
//! transformer with optional low-rank adapters, and a gated fusion head.

mod backbone;
mod eval;
mod frequency;
mod head;
mod model;
mod tokenizer;
mod train;

pub use backbone::{
    Backbone, BackboneBase, BackboneCache, BackboneConfig, Block, LayerNorm, LoraAdapters, LoraPair,
};
pub use eval::{evaluate, metrics_from_ranks, rank_of, EvalResult, UserRank, DEFAULT_KS};
pub use frequency::{frequency_feature, frequency_from_counts};
pub use head::{
    combine_scores, combined_item_matrix, fused_score, FusionHead, GateCache, FUSION_WEIGHTS,
};
pub use model::{
    bce_with_logit, InferenceTables, ParameterReport, Recommender, SeqRecConfig, TrainSequence,
};
pub use tokenizer::{
    build_item_token, code_matrices, sid_init_registry, CodeEmbeddingInit, FuseCache, ItemCatalog,
    ItemTokenizer, ProjectionCache, RandomInit, SidInit, TokenMode,
};
pub use train::{sample_negatives, train_recommender, training_sequences, RecTrace};
