//! Parameter checkpoints: a JSON document holding a flat list of
//! `(name, shape, values)` entries in parameter visiting order.
//!
//! ```json
//! {"format":"cyclecast-checkpoint","version":1,
//!  "params":[{"name":"bilstm.0.forward.w_x","kind":"weight","shape":[42,96],"values":[...]}]}
//! ```
//!
//! Floats are written in shortest round-trip form, so loading a saved
//! checkpoint reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamKind, Parameterized, Tensor};

pub const CHECKPOINT_FORMAT: &str = "cyclecast-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn capture<T: Parameterized<Tensor>>(params: &T) -> Self {
        let mut entries = Vec::new();
        params.visit("", &mut |name, t, kind| {
            entries.push(CheckpointEntry {
                name: name.to_string(),
                kind,
                shape: vec![t.rows(), t.cols()],
                values: t.data().to_vec(),
            })
        });
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            params: entries,
        }
    }

    /// Copies values into a tree of identical structure.
    pub fn restore<T: Parameterized<Tensor>>(&self, params: &mut T) -> Result<(), AutodiffError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::Checkpoint(format!("unknown format {}", self.format)));
        }
        let mut i = 0;
        let mut error = None;
        params.visit_mut("", &mut |name, t, _| {
            if error.is_some() {
                return;
            }
            match self.params.get(i) {
                Some(e) if e.name == name && e.shape == [t.rows(), t.cols()] && e.values.len() == t.len() => {
                    t.data_mut().copy_from_slice(&e.values);
                }
                Some(e) => {
                    error = Some(format!("entry {i}: expected {name} {:?}, found {} {:?}", t.shape(), e.name, e.shape))
                }
                None => error = Some(format!("missing entry for {name}")),
            }
            i += 1;
        });
        if let Some(e) = error {
            return Err(AutodiffError::Checkpoint(e));
        }
        if i != self.params.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "{} entries in file, {i} parameters in model",
                self.params.len()
            )));
        }
        Ok(())
    }
}

pub fn write_checkpoint<T: Parameterized<Tensor>>(params: &T, path: &Path) -> std::io::Result<()> {
    let json = serde_json::to_string(&Checkpoint::capture(params))?;
    fs::write(path, json)
}

pub fn read_checkpoint<T: Parameterized<Tensor>>(params: &mut T, path: &Path) -> std::io::Result<()> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.restore(params)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}
