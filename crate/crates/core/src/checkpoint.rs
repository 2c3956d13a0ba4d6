//! Checkpoint persistence.
//!
//! Layout: the 9-byte magic `XCAMCKPT1`, a little-endian `u64` byte length
//! of the JSON header, the JSON header itself (graph metadata and layer
//! specs with parameter shapes), then every parameter tensor as raw
//! little-endian `f64` values in declaration order (weight, then bias).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layers::Layer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"XCAMCKPT1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    designated_layer: usize,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerHeader {
    Conv2d {
        weight_shape: Vec<usize>,
        bias_shape: Vec<usize>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool2d {
        size: usize,
        stride: usize,
    },
    GlobalAveragePool,
    Dense {
        weight_shape: Vec<usize>,
        bias_shape: Vec<usize>,
    },
    Flatten,
    Softmax,
}

impl From<&Layer> for LayerHeader {
    fn from(layer: &Layer) -> Self {
        match layer {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => LayerHeader::Conv2d {
                weight_shape: weight.shape().to_vec(),
                bias_shape: bias.shape().to_vec(),
                stride: *stride,
                padding: *padding,
            },
            Layer::Relu => LayerHeader::Relu,
            Layer::MaxPool2d { size, stride } => LayerHeader::Maxpool2d {
                size: *size,
                stride: *stride,
            },
            Layer::GlobalAvgPool => LayerHeader::GlobalAveragePool,
            Layer::Dense { weight, bias } => LayerHeader::Dense {
                weight_shape: weight.shape().to_vec(),
                bias_shape: bias.shape().to_vec(),
            },
            Layer::Flatten => LayerHeader::Flatten,
            Layer::Softmax => LayerHeader::Softmax,
        }
    }
}

pub fn encode(graph: &ModelGraph) -> Result<Vec<u8>> {
    let header = Header {
        name: graph.name().to_string(),
        input_shape: graph.input_shape().to_vec(),
        num_classes: graph.num_classes(),
        designated_layer: graph.designated_layer(),
        layers: graph.layers().iter().map(LayerHeader::from).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + graph.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in graph.flat_params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(mut bytes: &[u8]) -> Result<ModelGraph> {
    let mut magic = [0u8; 9];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint", "truncated magic"))?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut len = [0u8; 8];
    bytes
        .read_exact(&mut len)
        .map_err(|_| Error::format("checkpoint", "truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > bytes.len() {
        return Err(Error::format(
            "checkpoint",
            "header length exceeds file size",
        ));
    }
    let (json, mut rest) = bytes.split_at(len);
    let header: Header = serde_json::from_slice(json)
        .map_err(|e| Error::format("checkpoint", format!("header: {e}")))?;

    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if rest.len() < n * 8 {
            return Err(Error::format("checkpoint", "truncated parameter block"));
        }
        let (block, tail) = rest.split_at(n * 8);
        rest = tail;
        let data = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data)
            .map_err(|e| Error::format("checkpoint", format!("parameter block: {e}")))
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        layers.push(match lh {
            LayerHeader::Conv2d {
                weight_shape,
                bias_shape,
                stride,
                padding,
            } => {
                let weight = take(weight_shape)?;
                let bias = take(bias_shape)?;
                Layer::conv2d(weight, bias, *stride, *padding)?
            }
            LayerHeader::Relu => Layer::Relu,
            LayerHeader::Maxpool2d { size, stride } => Layer::MaxPool2d {
                size: *size,
                stride: *stride,
            },
            LayerHeader::GlobalAveragePool => Layer::GlobalAvgPool,
            LayerHeader::Dense {
                weight_shape,
                bias_shape,
            } => {
                let weight = take(weight_shape)?;
                let bias = take(bias_shape)?;
                Layer::dense(weight, bias)?
            }
            LayerHeader::Flatten => Layer::Flatten,
            LayerHeader::Softmax => Layer::Softmax,
        });
    }
    if !rest.is_empty() {
        return Err(Error::format(
            "checkpoint",
            "trailing bytes after parameters",
        ));
    }
    ModelGraph::new(
        header.name,
        header.input_shape,
        header.num_classes,
        layers,
        header.designated_layer,
    )
}

pub fn save(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(graph)?;
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
