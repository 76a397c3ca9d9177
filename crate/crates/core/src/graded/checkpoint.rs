//! Self-describing JSON checkpoints. Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{EdgeSet, EgtReweighting, GradeNorm, Grading, LayerBlocks};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Tagged envelope: `kind` names the payload type, `version` the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub version: u32,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn new(kind: impl Into<String>, payload: T) -> Self {
        Self {
            kind: kind.into(),
            version: CHECKPOINT_VERSION,
            payload,
        }
    }

    pub fn to_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_str(s: &str, kind: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.check(kind)?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let c: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        c.check(kind)?;
        Ok(c)
    }

    fn check(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected {kind}, found {}", self.kind)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        Ok(())
    }
}

/// Everything needed to rebuild one graded layer's linear part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub grading: Grading,
    pub edges: EdgeSet,
    pub blocks: LayerBlocks,
    /// Per-edge `[1, d_h]` biases in edge order, if any.
    pub bias: Option<Vec<Tensor>>,
    pub norm: GradeNorm,
    pub reweighting: Option<EgtReweighting>,
}

pub const LAYER_KIND: &str = "graded-layer";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graded::{build_banded_lgt, NormKind};

    #[test]
    fn layer_record_round_trips_bitwise() {
        let g = Grading::new(&[("a", 3), ("b", 3), ("c", 3)]).unwrap();
        let (edges, bank) = build_banded_lgt(&g, &[0, 1], 5).unwrap();
        let d = EgtReweighting::scalar_geometric(&g, 1.7).unwrap();
        let rec = LayerRecord {
            grading: g.clone(),
            edges,
            blocks: LayerBlocks::Egt {
                bank,
                reweighting: d.clone(),
            },
            bias: None,
            norm: GradeNorm::new(&g, NormKind::RmsNorm, 1e-6),
            reweighting: Some(d),
        };
        let ck = Checkpoint::new(LAYER_KIND, rec.clone());
        let back = Checkpoint::<LayerRecord>::from_str(&ck.to_string().unwrap(), LAYER_KIND).unwrap();
        assert_eq!(back.payload, rec);
        assert_eq!(back.payload.grading.offset(2), 6);
        assert!(Checkpoint::<LayerRecord>::from_str(&ck.to_string().unwrap(), "other").is_err());
    }
}
