//! Checkpoint container: magic `BPTC`, format version, the model
//! configuration as a key=value section, then named tensor records
//! (little-endian throughout).
//!
//! Training checkpoints store every tensor as float64 (latent shadows stay
//! resumable); deploy checkpoints store binary weights as packed bits plus
//! per-row scales and are strictly smaller for any model with a binary layer.

use ndarray::{ArrayD, IxDyn};

use crate::binarize::ScaledBinary;
use crate::bitops::{BitMatrix, LaneWidth};
use crate::error::{Error, Result};
use crate::model::{AttnThreshold, BptModel, FrozenModel, HeadConfig, ModelConfig, Twin};
use crate::params::ParamValue;
use crate::pointops::{NeighborEmbedConfig, SgStageConfig};

pub const MAGIC: &[u8; 4] = b"BPTC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Dense(ArrayD<f64>),
    Packed { bits: BitMatrix, scales: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub payload: TensorPayload,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn is_deploy(&self) -> bool {
        self.tensors.iter().any(|t| matches!(t.payload, TensorPayload::Packed { .. }))
    }

    pub fn find(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_dense(out: &mut Vec<u8>, a: &ArrayD<f64>) {
    out.push(0u8);
    out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_packed(out: &mut Vec<u8>, sb: &ScaledBinary) {
    out.push(1u8);
    let rank: u32 = 2;
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&(sb.bits.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(sb.bits.cols() as u64).to_le_bytes());
    sb.bits.write_to(out);
    out.extend_from_slice(&(sb.scale.len() as u64).to_le_bytes());
    for &v in &sb.scale {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a resumable training checkpoint: every parameter (latent shadows
/// included) and every buffer as float64.
pub fn save_training(model: &BptModel) -> Vec<u8> {
    let mut records: Vec<(String, Vec<u8>)> = Vec::new();
    for (_, entry) in model.store().iter() {
        let mut payload = Vec::new();
        put_dense(&mut payload, &entry.value.to_array());
        records.push((entry.name.clone(), payload));
    }
    for buf in model.store().iter_buffers() {
        let mut payload = Vec::new();
        put_dense(&mut payload, &buf.value.clone().into_dyn());
        records.push((buf.name.clone(), payload));
    }
    assemble(&model.config, records)
}

/// Serialize a deploy checkpoint: binary weights as packed bits + scales,
/// everything else as float64.
pub fn save_deploy(model: &BptModel) -> Result<Vec<u8>> {
    if model.config.twin != Twin::Binary {
        return Err(Error::Contract(
            "deploy export requires the binary twin (the full-precision twin has no packed form)"
                .into(),
        ));
    }
    let frozen = FrozenModel::from_model(model);
    let packed: std::collections::HashMap<String, &ScaledBinary> =
        frozen.binary_weights().into_iter().collect();
    let mut records: Vec<(String, Vec<u8>)> = Vec::new();
    for (_, entry) in model.store().iter() {
        let mut payload = Vec::new();
        match (&entry.value, packed.get(entry.name.as_str())) {
            (ParamValue::Latent(_), Some(sb)) => put_packed(&mut payload, sb),
            _ => put_dense(&mut payload, &entry.value.to_array()),
        }
        records.push((entry.name.clone(), payload));
    }
    for buf in model.store().iter_buffers() {
        let mut payload = Vec::new();
        put_dense(&mut payload, &buf.value.clone().into_dyn());
        records.push((buf.name.clone(), payload));
    }
    Ok(assemble(&model.config, records))
}

fn assemble(config: &ModelConfig, records: Vec<(String, Vec<u8>)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = encode_config(config);
    put_str(&mut out, &cfg);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, payload) in records {
        put_str(&mut out, &name);
        out.extend_from_slice(&payload);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

/// Parse a checkpoint, validating magic, version, and structure.
pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a BPTC checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config = decode_config(&r.str()?)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let payload = match dtype {
            0 => {
                let len: usize = dims.iter().product();
                let mut vals = Vec::with_capacity(len);
                for _ in 0..len {
                    vals.push(r.f64()?);
                }
                TensorPayload::Dense(
                    ArrayD::from_shape_vec(IxDyn(&dims), vals)
                        .map_err(|e| Error::Checkpoint(format!("tensor shape: {e}")))?,
                )
            }
            1 => {
                let (bits, rest) = BitMatrix::read_from(&bytes[r.pos..])?;
                r.pos = bytes.len() - rest.len();
                if bits.rows() != dims[0] || bits.cols() != dims[1] {
                    return Err(Error::Checkpoint("packed tensor dims disagree with header".into()));
                }
                let ns = r.u64()? as usize;
                let mut scales = Vec::with_capacity(ns);
                for _ in 0..ns {
                    scales.push(r.f64()?);
                }
                TensorPayload::Packed { bits, scales }
            }
            d => return Err(Error::Checkpoint(format!("unknown tensor dtype {d}"))),
        };
        tensors.push(TensorRecord { name, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { config, tensors })
}

impl BptModel {
    /// Rebuild a trainable model from a training checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<BptModel> {
        if ck.is_deploy() {
            return Err(Error::Checkpoint(
                "deploy checkpoint has no shadow weights; training cannot resume from it".into(),
            ));
        }
        let mut model = BptModel::init(ck.config.clone(), 0)?;
        let param_ids: Vec<_> = model.store().iter().map(|(id, e)| (id, e.name.clone())).collect();
        for (id, name) in param_ids {
            let rec = ck
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let TensorPayload::Dense(values) = &rec.payload else {
                return Err(Error::Checkpoint(format!("tensor {name} is not dense")));
            };
            if model.store().param(id).value.shape() != values.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} shape mismatch")));
            }
            model.store_mut().set_from_array(id, values);
        }
        let buffer_names: Vec<String> =
            model.store().iter_buffers().map(|b| b.name.clone()).collect();
        for name in buffer_names {
            let rec = ck
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            let TensorPayload::Dense(values) = &rec.payload else {
                return Err(Error::Checkpoint(format!("buffer {name} is not dense")));
            };
            let id = model.store().find_buffer(&name).expect("buffer exists");
            let v1 = values
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::Checkpoint(format!("buffer {name} must be rank 1")))?;
            if model.store().buffer(id).len() != v1.len() {
                return Err(Error::Checkpoint(format!("buffer {name} length mismatch")));
            }
            *model.store_mut().buffer_mut(id) = v1;
        }
        Ok(model)
    }
}

impl FrozenModel {
    /// Build an inference model from either checkpoint kind.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<FrozenModel> {
        if !ck.is_deploy() {
            let model = BptModel::from_checkpoint(ck)?;
            return Ok(FrozenModel::from_model(&model));
        }
        // Deploy: fill the dense side through a skeleton, then swap in packed
        // weights by name.
        let mut skeleton = BptModel::init(ck.config.clone(), 0)?;
        let param_ids: Vec<_> =
            skeleton.store().iter().map(|(id, e)| (id, e.name.clone())).collect();
        let mut packed: Vec<(String, ScaledBinary)> = Vec::new();
        for (id, name) in param_ids {
            let rec = ck
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            match &rec.payload {
                TensorPayload::Dense(values) => {
                    if skeleton.store().param(id).value.shape() != values.shape() {
                        return Err(Error::Checkpoint(format!("tensor {name} shape mismatch")));
                    }
                    skeleton.store_mut().set_from_array(id, values);
                }
                TensorPayload::Packed { bits, scales } => {
                    packed.push((
                        name.clone(),
                        ScaledBinary { bits: bits.clone(), scale: scales.clone() },
                    ));
                }
            }
        }
        let buffer_names: Vec<String> =
            skeleton.store().iter_buffers().map(|b| b.name.clone()).collect();
        for name in buffer_names {
            let rec = ck
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            let TensorPayload::Dense(values) = &rec.payload else {
                return Err(Error::Checkpoint(format!("buffer {name} is not dense")));
            };
            let id = skeleton.store().find_buffer(&name).expect("buffer exists");
            *skeleton.store_mut().buffer_mut(id) = values
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::Checkpoint(format!("buffer {name} must be rank 1")))?;
        }
        let mut frozen = FrozenModel::from_model(&skeleton);
        for (name, sb) in packed {
            if !frozen.replace_binary(&name, sb) {
                return Err(Error::Checkpoint(format!("packed tensor {name} has no binary slot")));
            }
        }
        Ok(frozen)
    }
}

// --- ModelConfig key=value section -----------------------------------------

fn encode_config(c: &ModelConfig) -> String {
    let mut s = String::new();
    let twin = match c.twin {
        Twin::Binary => "binary",
        Twin::FullPrecision => "fp",
    };
    s.push_str(&format!("twin={twin}\n"));
    s.push_str(&format!("d_model={}\n", c.d_model));
    s.push_str(&format!("n_blocks={}\n", c.n_blocks));
    s.push_str(&format!("qk_width={}\n", c.qk_width));
    s.push_str(&format!("output_width={}\n", c.output_width));
    match &c.head {
        HeadConfig::Classifier { num_classes, hidden } => {
            let h: Vec<String> = hidden.iter().map(|v| v.to_string()).collect();
            s.push_str(&format!("head=classifier:{}:{}\n", num_classes, h.join(",")));
        }
        HeadConfig::Descriptor { dim } => s.push_str(&format!("head=descriptor:{dim}\n")),
    }
    let pm: Vec<String> = c.neighbor.point_mlp.iter().map(|v| v.to_string()).collect();
    s.push_str(&format!("point_mlp={}\n", pm.join(",")));
    let st: Vec<String> = c
        .neighbor
        .stages
        .iter()
        .map(|t| format!("{}:{}:{}:{}", t.centers, t.k, t.width, t.mlp_layers))
        .collect();
    s.push_str(&format!("stages={}\n", st.join(";")));
    let at = match c.attn_threshold {
        AttnThreshold::PaperLiteral => "paper",
        AttnThreshold::MedianPerRow => "median",
    };
    s.push_str(&format!("attn_threshold={at}\n"));
    s.push_str(&format!("bn_momentum={}\n", c.bn_momentum));
    s.push_str(&format!("bn_eps={}\n", c.bn_eps));
    s.push_str(&format!("lane_width={}\n", c.lane_width.bits()));
    s.push_str(&format!("n_points={}\n", c.n_points));
    s
}

fn decode_config(s: &str) -> Result<ModelConfig> {
    let mut kv = std::collections::BTreeMap::new();
    for line in s.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line: {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing config key {k}")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad usize for {k}")))
    };
    let f64_of = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad float for {k}")))
    };
    let twin = match get("twin")?.as_str() {
        "binary" => Twin::Binary,
        "fp" => Twin::FullPrecision,
        o => return Err(Error::Checkpoint(format!("unknown twin {o}"))),
    };
    let head_s = get("head")?;
    let head = if let Some(rest) = head_s.strip_prefix("classifier:") {
        let (nc, hidden) = rest
            .split_once(':')
            .ok_or_else(|| Error::Checkpoint("bad classifier head".into()))?;
        let num_classes =
            nc.parse().map_err(|_| Error::Checkpoint("bad class count".into()))?;
        let hidden: Vec<usize> = if hidden.is_empty() {
            vec![]
        } else {
            hidden
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad hidden width".into())))
                .collect::<Result<_>>()?
        };
        HeadConfig::Classifier { num_classes, hidden }
    } else if let Some(d) = head_s.strip_prefix("descriptor:") {
        HeadConfig::Descriptor {
            dim: d.parse().map_err(|_| Error::Checkpoint("bad descriptor dim".into()))?,
        }
    } else {
        return Err(Error::Checkpoint(format!("unknown head {head_s}")));
    };
    let pm_s = get("point_mlp")?;
    let point_mlp: Vec<usize> = if pm_s.is_empty() {
        vec![]
    } else {
        pm_s.split(',')
            .map(|v| v.parse().map_err(|_| Error::Checkpoint("bad point_mlp".into())))
            .collect::<Result<_>>()?
    };
    let stages = get("stages")?
        .split(';')
        .map(|t| {
            let parts: Vec<&str> = t.split(':').collect();
            if parts.len() != 4 {
                return Err(Error::Checkpoint(format!("bad stage spec {t}")));
            }
            let f = |i: usize| -> Result<usize> {
                parts[i].parse().map_err(|_| Error::Checkpoint(format!("bad stage field {t}")))
            };
            Ok(SgStageConfig { centers: f(0)?, k: f(1)?, width: f(2)?, mlp_layers: f(3)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let attn_threshold = match get("attn_threshold")?.as_str() {
        "paper" => AttnThreshold::PaperLiteral,
        "median" => AttnThreshold::MedianPerRow,
        o => return Err(Error::Checkpoint(format!("unknown attention threshold {o}"))),
    };
    let lane_width = LaneWidth::from_tag(usize_of("lane_width")? as u8)?;
    Ok(ModelConfig {
        twin,
        d_model: usize_of("d_model")?,
        n_blocks: usize_of("n_blocks")?,
        qk_width: usize_of("qk_width")?,
        output_width: usize_of("output_width")?,
        head,
        neighbor: NeighborEmbedConfig { point_mlp, stages },
        attn_threshold,
        bn_momentum: f64_of("bn_momentum")?,
        bn_eps: f64_of("bn_eps")?,
        lane_width,
        n_points: usize_of("n_points")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn config_roundtrip() {
        for cfg in [
            ModelConfig::desk_descriptor(),
            ModelConfig::desk_classifier(7),
            ModelConfig::reference_classification(40),
        ] {
            let enc = encode_config(&cfg);
            let back = decode_config(&enc).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn training_checkpoint_roundtrip_byte_identical() {
        let model = BptModel::init(ModelConfig::desk_descriptor(), 9).unwrap();
        let bytes = save_training(&model);
        let ck = load(&bytes).unwrap();
        assert!(!ck.is_deploy());
        let model2 = BptModel::from_checkpoint(&ck).unwrap();
        let bytes2 = save_training(&model2);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn deploy_checkpoint_smaller_and_loads() {
        let model = BptModel::init(ModelConfig::desk_descriptor(), 9).unwrap();
        let train_bytes = save_training(&model);
        let deploy_bytes = save_deploy(&model).unwrap();
        assert!(deploy_bytes.len() < train_bytes.len());
        let ck = load(&deploy_bytes).unwrap();
        assert!(ck.is_deploy());
        let frozen = FrozenModel::from_checkpoint(&ck).unwrap();
        let direct = FrozenModel::from_model(&model);
        let pc = crate::pointops::PointCloud::new(ndarray::Array2::from_shape_fn(
            (32, 3),
            |(i, j)| ((i * 3 + j) as f64).sin(),
        ));
        assert_eq!(frozen.describe(&pc, 0).unwrap(), direct.describe(&pc, 0).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let model = BptModel::init(ModelConfig::desk_descriptor(), 1).unwrap();
        let mut bytes = save_training(&model);
        assert!(matches!(load(&bytes[..10]), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(load(&bytes), Err(Error::Checkpoint(_))));
    }
}
