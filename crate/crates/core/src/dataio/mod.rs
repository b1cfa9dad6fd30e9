//! Embedding tables, interaction sequences, the leave-last-out split and the
//! synthetic multimodal corpus generator.

mod dataset;
mod modality;
mod synth;
mod table;

pub use dataset::{CorpusStats, InteractionDataset, LeaveLastOut, SplitExample, UserSequence};
pub use modality::{Modality, PerModality};
pub use synth::{generate_synth, SynthConfig, SynthCorpus};
pub use table::{
    load_table, parse_table, save_table, table_bytes, EmbeddingTable, TableTag, TABLE_MAGIC,
    TABLE_VERSION,
};
