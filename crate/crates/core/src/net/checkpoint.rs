//! `LWI1` checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "LWI1" | version u32 | layer count u32 | layers... | head count u32 | heads...
//! layer = rows u32 | cols u32 | weight f64 x rows*cols (row-major) | bias f64 x rows
//! ```
//!
//! A JSON dump with the same content is available for inspection.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{LayerWeights, Model, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LWI1";

pub fn encode(model: &Model) -> Vec<u8> {
    let n_params = model.parameters().count();
    let mut out = Vec::with_capacity(16 + 8 * n_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for group in [&model.feature_layers, &model.heads] {
        out.extend_from_slice(&(group.len() as u32).to_le_bytes());
        for layer in group {
            out.extend_from_slice(&(layer.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(layer.cols() as u32).to_le_bytes());
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated: need {n} bytes for {what}, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn layer(&mut self, what: &str) -> Result<LayerWeights> {
        let start = self.pos as u64;
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let weight = self.f64s(rows * cols, what)?;
        let bias = self.f64s(rows, what)?;
        let weight = Array2::from_shape_vec((rows, cols), weight).expect("length checked");
        LayerWeights::new(weight, Array1::from(bias)).map_err(|e| Error::Format {
            offset: start,
            message: format!("{what}: {e}"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected magic \"LWI1\""),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let n_layers = r.u32("layer count")? as usize;
    let feature_layers = (0..n_layers)
        .map(|i| r.layer(&format!("feature layer {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let heads_at = r.pos as u64;
    let n_heads = r.u32("head count")? as usize;
    let heads = (0..n_heads)
        .map(|i| r.layer(&format!("head {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Model::new(feature_layers, heads).map_err(|e| Error::Format {
        offset: heads_at,
        message: e.to_string(),
    })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDump {
    rows: usize,
    cols: usize,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDump {
    format: String,
    version: u32,
    feature_layers: Vec<LayerDump>,
    heads: Vec<LayerDump>,
}

fn dump_layer(l: &LayerWeights) -> LayerDump {
    LayerDump {
        rows: l.rows(),
        cols: l.cols(),
        weight: l.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
        bias: l.bias.to_vec(),
    }
}

fn undump_layer(d: LayerDump) -> Result<LayerWeights> {
    if d.weight.len() != d.rows || d.weight.iter().any(|r| r.len() != d.cols) {
        return Err(Error::InvalidInput(format!(
            "layer dump does not match declared shape {}x{}",
            d.rows, d.cols
        )));
    }
    let flat: Vec<f64> = d.weight.into_iter().flatten().collect();
    LayerWeights::new(
        Array2::from_shape_vec((d.rows, d.cols), flat).expect("shape checked"),
        Array1::from(d.bias),
    )
}

/// Pretty-printed JSON with the same content as the binary form.
pub fn to_text(model: &Model) -> String {
    let dump = ModelDump {
        format: "LWI1".into(),
        version: FORMAT_VERSION,
        feature_layers: model.feature_layers.iter().map(dump_layer).collect(),
        heads: model.heads.iter().map(dump_layer).collect(),
    };
    serde_json::to_string_pretty(&dump).expect("plain data serializes")
}

pub fn from_text(text: &str) -> Result<Model> {
    let dump: ModelDump = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    if dump.format != "LWI1" || dump.version != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported dump {} v{}",
            dump.format, dump.version
        )));
    }
    let layers = dump.feature_layers.into_iter().map(undump_layer).collect::<Result<_>>()?;
    let heads = dump.heads.into_iter().map(undump_layer).collect::<Result<_>>()?;
    Model::new(layers, heads)
}
