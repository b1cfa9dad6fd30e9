use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::QuantizerModel;
use crate::dataio::{EmbeddingTable, Modality, PerModality, TableTag};
use crate::diffkit::Matrix;
use crate::error::{FormatErrorKind, MmqError, Result};

/// Semantic ids of one item in one modality, with `ẑ = Σ_l CE_l[sid_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticIdAssignment {
    pub item: u64,
    pub modality: Modality,
    pub sids: Vec<u32>,
    pub quantized: Vec<f64>,
}

/// Encoding of one item: encoder output, ids and quantized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedItem {
    pub z: Vec<f64>,
    pub sids: Vec<usize>,
    pub zhat: Vec<f64>,
}

pub fn encode_item(model: &QuantizerModel, modality: Modality, s: &[f64]) -> Result<EncodedItem> {
    let enc = model.encode(modality, &Matrix::row_vector(s))?;
    Ok(EncodedItem {
        z: enc.z.row(0).to_vec(),
        sids: enc.sids.into_iter().next().unwrap_or_default(),
        zhat: enc.zhat.row(0).to_vec(),
    })
}

/// Ids of every item in every modality, ordered by modality then item.
pub fn assign_ids(
    model: &QuantizerModel,
    tables: &PerModality<EmbeddingTable>,
) -> Result<Vec<SemanticIdAssignment>> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        let data = &tables[m].data;
        let branch = &model.branches[m];
        let rows: Vec<SemanticIdAssignment> = (0..data.rows())
            .into_par_iter()
            .map(|i| {
                let enc = branch.encode(&Matrix::row_vector(data.row(i)))?;
                Ok(SemanticIdAssignment {
                    item: i as u64,
                    modality: m,
                    sids: enc.sids[0].iter().map(|&s| s as u32).collect(),
                    quantized: enc.zhat.row(0).to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        out.extend(rows);
    }
    Ok(out)
}

/// Per-row ids of one modality, `items × L`, from a full assignment list.
pub fn sid_matrix(
    assignments: &[SemanticIdAssignment],
    modality: Modality,
    items: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); items];
    let mut seen = vec![false; items];
    for a in assignments.iter().filter(|a| a.modality == modality) {
        let i = a.item as usize;
        if i >= items {
            return Err(MmqError::InvalidArgument(format!(
                "assignment for item {i} beyond {items} items"
            )));
        }
        out[i] = a.sids.iter().map(|&s| s as usize).collect();
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(MmqError::Missing(format!(
            "semantic ids for item {i} in modality {modality}"
        )));
    }
    Ok(out)
}

/// Code embeddings of one modality and level.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    pub modality: Modality,
    pub level: usize,
    pub table: EmbeddingTable,
}

/// Copies every codebook out as a `Code` table, by modality then level.
pub fn export_code_embeddings(model: &QuantizerModel) -> Vec<CodeTable> {
    let mut out = Vec::new();
    for (m, b) in model.branches.iter() {
        for cb in &b.codebooks {
            out.push(CodeTable {
                modality: m,
                level: cb.level,
                table: EmbeddingTable {
                    tag: TableTag::Code,
                    data: cb.codes.clone(),
                    provenance: format!("codebook modality={m} level={}", cb.level),
                },
            });
        }
    }
    out
}

pub fn code_table_file_name(modality: Modality, level: usize) -> String {
    format!("codes_{modality}_{level}.mmqe")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssignmentLine {
    item: u64,
    modality: Modality,
    sids: Vec<u32>,
}

pub fn save_assignments_jsonl(
    path: impl AsRef<Path>,
    assignments: &[SemanticIdAssignment],
) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| MmqError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for a in assignments {
        let line = AssignmentLine {
            item: a.item,
            modality: a.modality,
            sids: a.sids.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| MmqError::io(path, e))?;
    }
    w.flush().map_err(|e| MmqError::io(path, e))
}

/// Reads ids back; quantized embeddings are left empty.
pub fn load_assignments_jsonl(path: impl AsRef<Path>) -> Result<Vec<SemanticIdAssignment>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| MmqError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| MmqError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AssignmentLine = serde_json::from_str(&line).map_err(|e| {
            MmqError::format(
                path,
                FormatErrorKind::CorruptHeader(format!("line {}: {e}", n + 1)),
            )
        })?;
        out.push(SemanticIdAssignment {
            item: a.item,
            modality: a.modality,
            sids: a.sids,
            quantized: Vec::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{parse_table, table_bytes};
    use crate::quantizer::model::tests::tiny_model;
    use crate::rng::Rng;

    fn tables(n: usize) -> PerModality<EmbeddingTable> {
        let mut rng = Rng::new(12);
        PerModality::from_fn(|m| {
            EmbeddingTable::new(
                TableTag::Modality(m),
                Matrix::randn(n, [3, 4, 5][m.index()], 1.0, &mut rng),
                "t",
            )
            .unwrap()
        })
    }

    #[test]
    fn assignments_are_deterministic_and_sum_codes() {
        let model = tiny_model(1, "mse");
        let t = tables(20);
        let a = assign_ids(&model, &t).unwrap();
        assert_eq!(a, assign_ids(&model, &t).unwrap());
        assert_eq!(a.len(), 60);
        let codes = export_code_embeddings(&model);
        for x in &a {
            let mut sum = vec![0.0; 2];
            for (l, &s) in x.sids.iter().enumerate() {
                let ct = codes
                    .iter()
                    .find(|c| c.modality == x.modality && c.level == l)
                    .unwrap();
                for (acc, v) in sum.iter_mut().zip(ct.table.data.row(s as usize)) {
                    *acc += v;
                }
            }
            assert_eq!(sum, x.quantized);
        }
    }

    #[test]
    fn identical_items_get_identical_ids() {
        let model = tiny_model(2, "mse");
        let mut t = tables(5);
        let row = t.t.data.row(0).to_vec();
        t.t.data.row_mut(3).copy_from_slice(&row);
        let a = assign_ids(&model, &t).unwrap();
        let text: Vec<_> = a.iter().filter(|x| x.modality == Modality::Text).collect();
        assert_eq!(text[0].sids, text[3].sids);
    }

    #[test]
    fn export_shape_and_byte_roundtrip() {
        let model = tiny_model(3, "mmd");
        let codes = export_code_embeddings(&model);
        assert_eq!(codes.len(), 3 * 2);
        for c in &codes {
            assert_eq!(c.table.data.shape(), (3, 2));
            let bytes = table_bytes(&c.table).unwrap();
            let back = parse_table(&bytes, Path::new("x")).unwrap();
            assert_eq!(table_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn jsonl_line_format() {
        let model = tiny_model(4, "mse");
        let a = assign_ids(&model, &tables(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        save_assignments_jsonl(&p, &a).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with(r#"{"item":0,"modality":"c","sids":["#),
            "{first}"
        );
        let back = load_assignments_jsonl(&p).unwrap();
        assert_eq!(back.len(), a.len());
        assert_eq!(sid_matrix(&back, Modality::Visual, 3).unwrap()[2].len(), 2);
    }
}
