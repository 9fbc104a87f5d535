use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SimilarityKind;
use crate::error::{Error, Result};

/// JSON metadata written next to an embedding TSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub dimension: usize,
    pub similarity: SimilarityKind,
    /// Whether vectors were L2-normalized before writing.
    pub normalized: bool,
    pub note: String,
}

impl EmbeddingSidecar {
    pub fn new(dimension: usize, similarity: SimilarityKind) -> Self {
        let note = match similarity {
            SimilarityKind::Dot => "scores are raw inner products; do not normalize before indexing",
            SimilarityKind::Cosine => {
                "scores are cosine similarities; L2-normalize both sides for inner-product indexes"
            }
            SimilarityKind::Euclidean => {
                "scores are 1 - euclidean distance; use an L2 nearest-neighbour index"
            }
        };
        Self {
            dimension,
            similarity,
            normalized: false,
            note: note.to_string(),
        }
    }
}

/// Writes `entity_id <TAB> v_0 <TAB> ... <TAB> v_{d-1}` lines.
pub fn write_embeddings_tsv(path: &Path, ids: &[String], vectors: &Array2<f64>) -> Result<()> {
    if ids.len() != vectors.nrows() {
        return Err(Error::Shape(format!(
            "{} ids for {} embedding rows",
            ids.len(),
            vectors.nrows()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (id, row) in ids.iter().zip(vectors.rows()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
