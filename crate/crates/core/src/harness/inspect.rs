//! Dump of the token groupings a model realizes on one input.
//!
//! JSON schema, version 1:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "input": "synthetic:digits:eval",
//!   "index": 0,
//!   "seed": 0,
//!   "records": [
//!     {
//!       "layer": "stage1.block0",
//!       "head_group": "rs",
//!       "sample_map": { "min": 0.0, "max": 1.0, "mean": 0.5, "std": 0.3 },
//!       "ids_shuffle": [[3, 0, 2, 1]],
//!       "window_assignment": [[0, 1, 1, 0]]
//!     }
//!   ]
//! }
//! ```
//!
//! `ids_shuffle[b][j]` is the source token placed at position `j`;
//! `window_assignment[b][t]` is the window token `t` joined.

use serde::{Deserialize, Serialize};

use crate::attention::{ForwardCtx, GroupRecord};
use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape, Tensor};

use super::data::{Dataset, Normalization};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectDump {
    pub schema_version: u32,
    pub input: String,
    pub index: usize,
    pub seed: u64,
    pub records: Vec<GroupRecord>,
}

impl InspectDump {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dump serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: Self = serde_json::from_str(text)?;
        if dump.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported inspect schema {}", dump.schema_version)));
        }
        Ok(dump)
    }
}

/// Load sample `index` of `input` as a `[1, C, H, W]` model input.
///
/// `input` is a data spec (`synthetic:…` or `idx:…`) or the path of a bare
/// IDX image file.
pub fn load_input(
    input: &str,
    index: usize,
    model: &ModelConfig,
    norm: Option<&Normalization>,
) -> Result<Tensor<f32>> {
    let data = if input.starts_with("synthetic:") || input.starts_with("idx:") {
        Dataset::load(input)?
    } else {
        Dataset::from_idx_images(std::path::Path::new(input))?
    };
    if index >= data.len() {
        return Err(Error::IndexOutOfBounds {
            index,
            len: data.len(),
        });
    }
    let mut data = data_slice(&data, index);
    data.num_classes = 0;
    data.prepare(model, norm)?;
    Ok(data.batch::<f32>(&[0], &[false]).0)
}

fn data_slice(d: &Dataset, i: usize) -> Dataset {
    Dataset {
        images: d.image(i).to_vec(),
        labels: vec![d.labels[i]],
        ..d.clone()
    }
}

/// Run one traced forward pass and collect every layer's groupings.
pub fn inspect<T: Element>(model: &Model<T>, image: Tensor<T>, seed: u64, input: &str, index: usize) -> Result<InspectDump> {
    let tape = Tape::new();
    let mut ctx = ForwardCtx::traced(SeedRng::new(seed));
    model.forward(tape.constant(image), &mut ctx)?;
    Ok(InspectDump {
        schema_version: SCHEMA_VERSION,
        input: input.into(),
        index,
        seed,
        records: ctx.take_trace(),
    })
}
