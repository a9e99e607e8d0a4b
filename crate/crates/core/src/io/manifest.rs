use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cp::CpDecomposition;
use crate::error::{Error, Result};
use crate::nn::network::{Layer, LayerKind, Network};
use crate::nn::{ConvLayer, Maxout, Padding, SoftmaxClassifier};
use crate::tensor::{DenseTensor, FactorMatrix};

use super::cpt::{read_tensor, write_tensor};
use super::{create_dir, read_text, write_bytes};

pub const NETWORK_MANIFEST: &str = "network.toml";
pub const CP_MANIFEST: &str = "cp.toml";

const NETWORK_FORMAT: &str = "cpconv-network";
const CP_FORMAT: &str = "cpconv-cp";
const VERSION: u32 = 1;

/// `network.toml`. Blob paths are relative to the manifest's directory.
#[derive(Debug, Serialize, Deserialize)]
struct NetworkManifest {
    format: String,
    version: u32,
    /// `[C, H, W]`.
    input_shape: [usize; 3],
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerEntry {
    Conv {
        name: String,
        /// `[d_h, d_w, S/groups, T]`.
        kernel_shape: [usize; 4],
        groups: usize,
        padding: Padding,
        kernel: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        #[serde(default)]
        frozen: bool,
        #[serde(default)]
        inserted: bool,
    },
    Maxout {
        name: String,
        group_size: usize,
    },
    Classifier {
        name: String,
        classes: usize,
        features: usize,
        weights: String,
        bias: String,
        #[serde(default)]
        frozen: bool,
    },
}

fn vector(v: &[f64]) -> Result<DenseTensor> {
    DenseTensor::from_vec(&[v.len()], v.to_vec())
}

/// Writes `network.toml` and the weight blobs into `dir`, creating it.
pub fn save_network(net: &Network, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let name = layer.name.clone();
        let entry = match &layer.kind {
            LayerKind::Conv(c) => {
                let kernel = format!("{name}.kernel.cpt");
                write_tensor(&dir.join(&kernel), c.kernel())?;
                let bias = match c.bias() {
                    Some(b) => {
                        let file = format!("{name}.bias.cpt");
                        write_tensor(&dir.join(&file), &vector(b)?)?;
                        Some(file)
                    }
                    None => None,
                };
                LayerEntry::Conv {
                    kernel_shape: c.kernel().shape().try_into().expect("4-D kernel"),
                    groups: c.groups(),
                    padding: c.padding(),
                    kernel,
                    bias,
                    frozen: c.frozen,
                    inserted: c.inserted,
                    name,
                }
            }
            LayerKind::Maxout(m) => LayerEntry::Maxout {
                name,
                group_size: m.group_size,
            },
            LayerKind::Classifier(c) => {
                let weights = format!("{name}.weights.cpt");
                let bias = format!("{name}.bias.cpt");
                write_tensor(&dir.join(&weights), c.weights())?;
                write_tensor(&dir.join(&bias), &vector(c.bias())?)?;
                LayerEntry::Classifier {
                    classes: c.classes(),
                    features: c.features(),
                    weights,
                    bias,
                    frozen: c.frozen,
                    name,
                }
            }
        };
        layers.push(entry);
    }
    let manifest = NetworkManifest {
        format: NETWORK_FORMAT.into(),
        version: VERSION,
        input_shape: net.input_shape(),
        layers,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_bytes(&dir.join(NETWORK_MANIFEST), text.as_bytes())
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.message().to_string()))
}

fn check_header(path: &Path, format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected || version != VERSION {
        return Err(Error::format(
            path,
            format!("expected {expected} version {VERSION}, found {format} version {version}"),
        ));
    }
    Ok(())
}

fn blob(dir: &Path, file: &str, shape: &[usize]) -> Result<DenseTensor> {
    let path = dir.join(file);
    let t: DenseTensor = read_tensor(&path)?;
    if t.shape() != shape {
        return Err(Error::format(
            &path,
            format!("shape {:?}, manifest says {shape:?}", t.shape()),
        ));
    }
    Ok(t)
}

pub fn load_network(dir: &Path) -> Result<Network> {
    let path = dir.join(NETWORK_MANIFEST);
    let m: NetworkManifest = parse(&path)?;
    check_header(&path, &m.format, m.version, NETWORK_FORMAT)?;
    let mut layers = Vec::with_capacity(m.layers.len());
    for entry in m.layers {
        let layer = match entry {
            LayerEntry::Conv {
                name,
                kernel_shape,
                groups,
                padding,
                kernel,
                bias,
                frozen,
                inserted,
            } => {
                let k = blob(dir, &kernel, &kernel_shape)?;
                let b = bias
                    .map(|f| blob(dir, &f, &[kernel_shape[3]]).map(DenseTensor::into_data))
                    .transpose()?;
                let mut conv = ConvLayer::new(k, b, groups, padding)?;
                conv.frozen = frozen;
                conv.inserted = inserted;
                Layer::conv(name, conv)
            }
            LayerEntry::Maxout { name, group_size } => Layer::maxout(name, Maxout::new(group_size)?),
            LayerEntry::Classifier {
                name,
                classes,
                features,
                weights,
                bias,
                frozen,
            } => {
                let w = blob(dir, &weights, &[classes, features])?;
                let b = blob(dir, &bias, &[classes])?.into_data();
                let mut cls = SoftmaxClassifier::new(w, b)?;
                cls.frozen = frozen;
                Layer::classifier(name, cls)
            }
        };
        layers.push(layer);
    }
    Network::new(m.input_shape, layers).map_err(|e| Error::format(&path, e.to_string()))
}

/// Provenance stored next to a decomposition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CpMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_error: Option<f64>,
}

/// `cp.toml`.
#[derive(Debug, Serialize, Deserialize)]
struct CpManifest {
    format: String,
    version: u32,
    rank: usize,
    shape: Vec<usize>,
    dtype: String,
    /// One `rows × rank` blob per mode.
    factors: Vec<String>,
    #[serde(default)]
    meta: CpMeta,
}

/// Writes the decomposition with any component scales folded into the first
/// factor.
pub fn save_cp(d: &CpDecomposition, meta: &CpMeta, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let d = d.clone().absorbed();
    let mut files = Vec::with_capacity(d.factors().len());
    for (m, f) in d.factors().iter().enumerate() {
        let file = format!("factor_{m}.cpt");
        write_tensor(&dir.join(&file), &f.to_tensor())?;
        files.push(file);
    }
    let manifest = CpManifest {
        format: CP_FORMAT.into(),
        version: VERSION,
        rank: d.rank(),
        shape: d.shape(),
        dtype: "f64".into(),
        factors: files,
        meta: meta.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_bytes(&dir.join(CP_MANIFEST), text.as_bytes())
}

pub fn load_cp(dir: &Path) -> Result<(CpDecomposition, CpMeta)> {
    let path = dir.join(CP_MANIFEST);
    let m: CpManifest = parse(&path)?;
    check_header(&path, &m.format, m.version, CP_FORMAT)?;
    if m.dtype != "f64" {
        return Err(Error::format(&path, format!("unsupported dtype `{}`", m.dtype)));
    }
    if m.factors.len() != m.shape.len() {
        return Err(Error::format(&path, "one factor file per mode is required"));
    }
    let factors = m
        .factors
        .iter()
        .zip(&m.shape)
        .map(|(file, &rows)| FactorMatrix::from_tensor(&blob(dir, file, &[rows, m.rank])?))
        .collect::<Result<Vec<_>>>()?;
    let d = CpDecomposition::new(factors).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok((d, m.meta))
}
