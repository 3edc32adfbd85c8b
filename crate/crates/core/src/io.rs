//! Binary tensor and template-layer files, and directory checkpoints built
//! from them.
//!
//! Tensor file: four little-endian `u32` dims, then little-endian `f64`
//! values in row-major order.
//!
//! Layer file: magic `TCL1`; little-endian `u32` fields N, C, K, M, G,
//! stride, padding, family tag, sharing flag (1 = independent group
//! templates); the M kept output indices as `u32`; then the templates and
//! the transform parameters (ascending non-identity output, then group) as
//! little-endian `f64`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{TemplateConvConfig, TemplateConvLayer};
use crate::nn::{BatchNorm, DenseConv, Layer, Linear, Network, TemplateConv};
use crate::tensor::{ConvGeometry, Tensor4};
use crate::transforms::TransformFamily;

pub const LAYER_MAGIC: &[u8; 4] = b"TCL1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn put_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}

fn expect_end(r: &mut impl Read) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes".into())),
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor4) -> Result<()> {
    for d in t.dims() {
        put_u32(w, d)?;
    }
    put_f64s(w, t.as_slice())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor4> {
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = get_u32(r)?;
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    Tensor4::new(dims, get_f64s(r, len)?)
}

pub fn save_tensor(path: &Path, t: &Tensor4) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor4> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    expect_end(&mut r)?;
    Ok(t)
}

pub fn write_layer(w: &mut impl Write, layer: &TemplateConvLayer) -> Result<()> {
    let cfg = layer.config();
    w.write_all(LAYER_MAGIC)?;
    for v in [
        cfg.out_channels,
        cfg.in_channels,
        cfg.kernel,
        layer.num_templates(),
        cfg.groups,
        cfg.stride,
        cfg.padding,
        cfg.family.tag() as usize,
        cfg.independent_group_templates as usize,
    ] {
        put_u32(w, v)?;
    }
    for &k in layer.kept() {
        put_u32(w, k)?;
    }
    put_f64s(w, layer.templates())?;
    put_f64s(w, layer.transform_params())
}

pub fn read_layer(r: &mut impl Read) -> Result<TemplateConvLayer> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != LAYER_MAGIC {
        return Err(Error::Format("bad layer magic".into()));
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = get_u32(r)?;
    }
    let [n, c, k, m, g, stride, padding, tag, sharing] = f;
    let family = u32::try_from(tag)
        .ok()
        .and_then(|t| TransformFamily::from_tag(t).ok())
        .ok_or_else(|| Error::Format(format!("unknown family tag {tag}")))?;
    if sharing > 1 {
        return Err(Error::Format(format!("bad sharing flag {sharing}")));
    }
    if m == 0 || m > n || g == 0 || c % g != 0 {
        return Err(Error::Format("inconsistent layer header".into()));
    }
    let config = TemplateConvConfig {
        in_channels: c,
        out_channels: n,
        kernel: k,
        stride,
        padding,
        groups: g,
        family,
        independent_group_templates: sharing == 1,
    };
    let kept = (0..m).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let templates = get_f64s(r, config.template_count(m) * config.template_len())?;
    let transforms = get_f64s(r, (n - m) * g * config.params_per_transform())?;
    TemplateConvLayer::from_parts(config, &kept, templates, transforms)
        .map_err(|e| Error::Format(format!("invalid layer: {e}")))
}

pub fn save_layer(path: &Path, layer: &TemplateConvLayer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_layer(&mut w, layer)?;
    w.flush()?;
    Ok(())
}

pub fn load_layer(path: &Path) -> Result<TemplateConvLayer> {
    let mut r = BufReader::new(File::open(path)?);
    let layer = read_layer(&mut r)?;
    expect_end(&mut r)?;
    Ok(layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Conv {
        stride: usize,
        padding: usize,
        groups: usize,
    },
    TemplateConv,
    BatchNorm {
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    layers: Vec<LayerEntry>,
}

const MANIFEST: &str = "network.json";
const MANIFEST_FORMAT: &str = "tplconv-checkpoint-1";

fn vector(v: &[f64]) -> Tensor4 {
    Tensor4::new([1, 1, 1, v.len()], v.to_vec()).expect("matching length")
}

fn load_vector(path: &Path, len: Option<usize>) -> Result<Vec<f64>> {
    let t = load_tensor(path)?;
    if let Some(len) = len {
        if t.len() != len {
            return Err(Error::Format(format!(
                "{} holds {} values, expected {len}",
                path.display(),
                t.len()
            )));
        }
    }
    Ok(t.into_vec())
}

/// Writes `network.json` plus one tensor or layer file per parameter buffer.
pub fn save_network(dir: &Path, net: &Network) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let file = |name: &str| dir.join(format!("{i:02}_{name}"));
        let entry = match layer {
            Layer::Conv(c) => {
                save_tensor(&file("weight.tensor"), &c.weight)?;
                save_tensor(&file("bias.tensor"), &vector(&c.bias))?;
                LayerEntry::Conv {
                    stride: c.geom.stride,
                    padding: c.geom.padding,
                    groups: c.geom.groups,
                }
            }
            Layer::TemplateConv(t) => {
                save_layer(&file("layer.tcl"), &t.layer)?;
                save_tensor(&file("bias.tensor"), &vector(&t.bias))?;
                LayerEntry::TemplateConv
            }
            Layer::BatchNorm(b) => {
                for (name, v) in [
                    ("gamma", &b.gamma),
                    ("beta", &b.beta),
                    ("running_mean", &b.running_mean),
                    ("running_var", &b.running_var),
                ] {
                    save_tensor(&file(&format!("{name}.tensor")), &vector(v))?;
                }
                LayerEntry::BatchNorm {
                    eps: b.eps,
                    momentum: b.momentum,
                }
            }
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool { kernel, stride } => LayerEntry::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            Layer::Flatten => LayerEntry::Flatten,
            Layer::Linear(l) => {
                let w = Tensor4::new([1, 1, l.out_features, l.in_features], l.weight.clone())?;
                save_tensor(&file("weight.tensor"), &w)?;
                save_tensor(&file("bias.tensor"), &vector(&l.bias))?;
                LayerEntry::Linear
            }
        };
        layers.push(entry);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        layers,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

pub fn load_network(dir: &Path) -> Result<Network> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format `{}`",
            manifest.format
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.into_iter().enumerate() {
        let file = |name: &str| dir.join(format!("{i:02}_{name}"));
        let layer = match entry {
            LayerEntry::Conv {
                stride,
                padding,
                groups,
            } => {
                let weight = load_tensor(&file("weight.tensor"))?;
                let [n, _, kh, kw] = weight.dims();
                let geom = ConvGeometry::with_kernel(kh, kw, stride, padding, groups)?;
                let bias = load_vector(&file("bias.tensor"), Some(n))?;
                Layer::Conv(DenseConv { weight, bias, geom })
            }
            LayerEntry::TemplateConv => {
                let layer = load_layer(&file("layer.tcl"))?;
                let bias = load_vector(&file("bias.tensor"), Some(layer.out_channels()))?;
                Layer::TemplateConv(TemplateConv { layer, bias })
            }
            LayerEntry::BatchNorm { eps, momentum } => {
                let gamma = load_vector(&file("gamma.tensor"), None)?;
                let c = Some(gamma.len());
                Layer::BatchNorm(BatchNorm {
                    beta: load_vector(&file("beta.tensor"), c)?,
                    running_mean: load_vector(&file("running_mean.tensor"), c)?,
                    running_var: load_vector(&file("running_var.tensor"), c)?,
                    gamma,
                    eps,
                    momentum,
                })
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
            LayerEntry::Flatten => Layer::Flatten,
            LayerEntry::Linear => {
                let w = load_tensor(&file("weight.tensor"))?;
                let [_, _, out_features, in_features] = w.dims();
                Layer::Linear(Linear {
                    bias: load_vector(&file("bias.tensor"), Some(out_features))?,
                    weight: w.into_vec(),
                    in_features,
                    out_features,
                })
            }
        };
        layers.push(layer);
    }
    Ok(Network::new(layers))
}
