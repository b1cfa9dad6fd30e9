//! Multimodal residual quantizer: per-modality encoder, residual codebooks
//! and decoder, trained with a reconstruction loss, cross-modal alignment
//! and the residual-quantization loss.

mod codebook;
mod ids;
mod model;
mod recon;
mod train;

pub use codebook::{kmeans_pp, quantize_level, residual_quantize, Codebook};
pub use ids::{
    assign_ids, code_table_file_name, encode_item, export_code_embeddings, load_assignments_jsonl,
    save_assignments_jsonl, sid_matrix, CodeTable, EncodedItem, SemanticIdAssignment,
};
pub use model::{
    batch_loss, take_snapshot, Branch, BranchSnapshot, Encoded, LossParts, LossWeights,
    QuantSnapshot, QuantizerModel,
};
pub use recon::{recon_registry, MmdRecon, MseRecon, ReconContext, ReconLoss};
pub use train::{
    init_model, revive_dead_codes, train_from, train_mm_rqvae, EpochLosses, QuantizerConfig,
    TrainTrace,
};
