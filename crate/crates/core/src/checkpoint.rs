//! Checkpoint container.
//!
//! ```text
//! proto-margin checkpoint v1
//! backbone {"mlp":{"widths":[16,32,16]}}
//! param layer0.weight 16x32
//! ...
//! end
//! <little-endian f32 values of every param, in header order>
//! state epoch=12 global_episode=1300 best_val_loss=0.8123   (optional footer)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::embedding::{Backbone, EmbeddingParams};
use crate::error::{Error, Result};
use crate::io::{f32s_to_le, le_to_f32s, split_header, write_atomic};
use crate::tensor::Tensor;

const MAGIC: &str = "proto-margin checkpoint v1";

/// Where training stood when a checkpoint was taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub global_episode: usize,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EmbeddingParams<f32>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let backbone = serde_json::to_string(&self.params.backbone).expect("backbone serializes");
        let mut header = format!("{MAGIC}\nbackbone {backbone}\n");
        for (name, entry) in self.params.store.iter() {
            let dims: Vec<String> = entry.value.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("param {name} {}\n", dims.join("x")));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for (_, entry) in self.params.store.iter() {
            f32s_to_le(entry.value.data().iter().copied(), &mut bytes);
        }
        if let Some(s) = &self.state {
            bytes.extend_from_slice(
                format!(
                    "state epoch={} global_episode={} best_val_loss={}\n",
                    s.epoch, s.global_episode, s.best_val_loss
                )
                .as_bytes(),
            );
        }
        bytes
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (lines, body) = split_header(path, bytes, MAGIC)?;
        let mut backbone: Option<Backbone> = None;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for line in &lines[1..] {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "backbone" => {
                    backbone = Some(
                        serde_json::from_str(rest).map_err(|e| Error::format(path, format!("backbone: {e}")))?,
                    );
                }
                "param" => {
                    let (name, dims) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::format(path, format!("malformed param line `{line}`")))?;
                    let dims = dims
                        .split('x')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| Error::format(path, format!("malformed shape in `{line}`")))?;
                    shapes.push((name.to_owned(), dims));
                }
                _ => return Err(Error::format(path, format!("unknown header line `{line}`"))),
            }
        }
        let backbone = backbone.ok_or_else(|| Error::format(path, "missing backbone line"))?;
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if body.len() < total * 4 {
            return Err(Error::format(path, "truncated parameter data"));
        }
        let values = le_to_f32s(&body[..total * 4]);
        let mut store = ParamStore::new();
        let mut offset = 0;
        for (name, shape) in shapes {
            let len: usize = shape.iter().product();
            store.insert(name, Tensor::new(shape, values[offset..offset + len].to_vec())?)?;
            offset += len;
        }
        let state = parse_footer(path, &body[total * 4..])?;
        let params = EmbeddingParams::from_store(backbone, store).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Checkpoint { params, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::format(path, "checkpoint not found"));
        }
        Self::from_bytes(path, &crate::io::read(path)?)
    }
}

fn parse_footer(path: &Path, bytes: &[u8]) -> Result<Option<TrainState>> {
    if bytes.is_empty() {
        return Ok(None);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format(path, "footer is not UTF-8"))?;
    let line = text
        .strip_prefix("state ")
        .and_then(|l| l.strip_suffix('\n'))
        .ok_or_else(|| Error::format(path, "trailing bytes after parameter data"))?;
    let mut state = TrainState {
        epoch: 0,
        global_episode: 0,
        best_val_loss: f64::INFINITY,
    };
    for field in line.split(' ') {
        let bad = || Error::format(path, format!("malformed state field `{field}`"));
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "epoch" => state.epoch = v.parse().map_err(|_| bad())?,
            "global_episode" => state.global_episode = v.parse().map_err(|_| bad())?,
            "best_val_loss" => state.best_val_loss = v.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    Ok(Some(state))
}
