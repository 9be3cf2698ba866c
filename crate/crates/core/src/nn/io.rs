//! SETN tensor files and the on-disk model directory.
//!
//! SETN layout: magic `SETN`, version byte (1), dtype byte (0 = f32 LE), two
//! reserved zero bytes, `u32` LE rank, rank × `u32` LE dims, row-major payload.
//!
//! A model directory holds `topology.json` (layer lists plus a weight index
//! mapping each name to its byte offset and dims) and `weights.bin`, the raw
//! f32 LE arrays concatenated in index order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{LayerSpec, NetworkModel};
use crate::tensor::{Real, Tensor};

pub const SETN_MAGIC: &[u8; 4] = b"SETN";
pub const SETN_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub const MODEL_FORMAT: &str = "cellsplit-model";
pub const MODEL_VERSION: u32 = 1;
pub const TOPOLOGY_FILE: &str = "topology.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

pub fn encode_setn<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(SETN_MAGIC);
    out.extend_from_slice(&[SETN_VERSION, DTYPE_F32, 0, 0]);
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode_setn<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let short = || Error::invalid("SETN stream shorter than its header");
    let magic = bytes.get(0..4).ok_or_else(short)?;
    if magic != SETN_MAGIC {
        return Err(Error::BadMagic {
            expected: "SETN".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = *bytes.get(4).ok_or_else(short)?;
    if version != SETN_VERSION {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let dtype = *bytes.get(5).ok_or_else(short)?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = read_u32(bytes, 8).ok_or_else(short)? as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 12 + 4 * i).map(|d| d as usize).ok_or_else(short))
        .collect::<Result<Vec<_>>>()?;
    let start = 12 + 4 * ndim;
    let n: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + 4 * n)
        .ok_or_else(|| Error::invalid(format!("SETN payload truncated: need {} values", n)))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_setn<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_setn(t))?;
    Ok(())
}

pub fn read_setn<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = crate::error::read_file(path)?;
    decode_setn(&bytes).map_err(|e| match e {
        Error::InvalidArgument(detail) => Error::Format {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightEntry {
    pub offset: u64,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub format: String,
    pub version: u32,
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub bn_eps: f64,
    pub trunk: Vec<LayerSpec>,
    pub seg_head: Vec<LayerSpec>,
    pub cc_head: Vec<LayerSpec>,
    pub weights: BTreeMap<String, WeightEntry>,
}

pub fn save_model<T: Real>(model: &NetworkModel<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, t) in &model.weights {
        index.insert(
            name.clone(),
            WeightEntry {
                offset: blob.len() as u64,
                dims: t.dims().to_vec(),
            },
        );
        for v in t.data() {
            blob.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let topo = Topology {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        depth: model.depth,
        base_width: model.base_width,
        in_channels: model.in_channels,
        bn_eps: crate::nn::model::BN_EPS,
        trunk: model.trunk.clone(),
        seg_head: model.seg_head.clone(),
        cc_head: model.cc_head.clone(),
        weights: index,
    };
    fs::write(dir.join(TOPOLOGY_FILE), serde_json::to_vec_pretty(&topo)?)?;
    fs::File::create(dir.join(WEIGHTS_FILE))?.write_all(&blob)?;
    Ok(())
}

pub fn load_model<T: Real>(dir: impl AsRef<Path>) -> Result<NetworkModel<T>> {
    let dir = dir.as_ref();
    let topo: Topology = serde_json::from_slice(&crate::error::read_file(&dir.join(TOPOLOGY_FILE))?)?;
    if topo.format != MODEL_FORMAT {
        return Err(Error::BadMagic {
            expected: MODEL_FORMAT.into(),
            found: topo.format,
        });
    }
    if topo.version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(topo.version));
    }
    // batch norm is evaluated with the built-in epsilon only
    if (topo.bn_eps - crate::nn::model::BN_EPS).abs() > 1e-12 {
        return Err(Error::Topology(format!(
            "bn_eps {} differs from the supported {}",
            topo.bn_eps,
            crate::nn::model::BN_EPS
        )));
    }
    let blob = crate::error::read_file(&dir.join(WEIGHTS_FILE))?;

    let mut model = NetworkModel {
        depth: topo.depth,
        base_width: topo.base_width,
        in_channels: topo.in_channels,
        trunk: topo.trunk,
        seg_head: topo.seg_head,
        cc_head: topo.cc_head,
        weights: BTreeMap::new(),
    };
    let mut entries: Vec<(&String, &WeightEntry)> = topo.weights.iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    for (name, entry) in entries {
        let n: usize = entry.dims.iter().product();
        let start = entry.offset as usize;
        let bytes = blob
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::TruncatedWeights(name.clone()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        model
            .weights
            .insert(name.clone(), Tensor::new(entry.dims.clone(), data)?);
    }
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::WeightInit;

    #[test]
    fn setn_header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode_setn(&t);
        assert_eq!(&b[0..8], b"SETN\x01\x00\x00\x00");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert_eq!(decode_setn::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn setn_rejects_bad_headers() {
        let t = Tensor::<f32>::zeros(&[3]);
        let mut b = encode_setn(&t);
        b[0] = b'X';
        assert!(matches!(decode_setn::<f32>(&b), Err(Error::BadMagic { .. })));
        let mut b = encode_setn(&t);
        b[4] = 2;
        assert!(matches!(decode_setn::<f32>(&b), Err(Error::UnsupportedVersion(2))));
        let mut b = encode_setn(&t);
        b[5] = 1;
        assert!(matches!(decode_setn::<f32>(&b), Err(Error::UnsupportedDtype(1))));
        let b = encode_setn(&t);
        assert!(decode_setn::<f32>(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = NetworkModel::<f32>::unet(2, 4, WeightInit::Random { seed: 11, zero_bias: false });
        save_model(&m, dir.path()).unwrap();
        let back: NetworkModel<f32> = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_blob_names_first_missing_array() {
        let dir = tempfile::tempdir().unwrap();
        let m = NetworkModel::<f32>::unet(1, 2, WeightInit::He { seed: 1 });
        save_model(&m, dir.path()).unwrap();
        let topo: Topology =
            serde_json::from_slice(&fs::read(dir.path().join(TOPOLOGY_FILE)).unwrap()).unwrap();
        let (cut_name, cut) = topo
            .weights
            .iter()
            .map(|(n, e)| (n.clone(), e.offset as usize))
            .filter(|(_, o)| *o > 0)
            .min_by_key(|(_, o)| *o)
            .unwrap();
        let blob = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), &blob[..cut + 2]).unwrap();
        match load_model::<f32>(dir.path()) {
            Err(Error::TruncatedWeights(n)) => assert_eq!(n, cut_name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn absent_weight_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = NetworkModel::<f32>::unet(1, 2, WeightInit::He { seed: 1 });
        m.weights.remove("enc1.conv1.w");
        save_model(&m, dir.path()).unwrap();
        match load_model::<f32>(dir.path()) {
            Err(Error::MissingWeight(n)) => assert_eq!(n, "enc1.conv1.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dims_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = NetworkModel::<f32>::unet(1, 2, WeightInit::He { seed: 1 });
        m.weights.insert("seg.out.b".into(), Tensor::zeros(&[3]));
        save_model(&m, dir.path()).unwrap();
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::WeightDims { .. })));
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = NetworkModel::<f32>::unet(1, 2, WeightInit::Zero);
        save_model(&m, dir.path()).unwrap();
        let p = dir.path().join(TOPOLOGY_FILE);
        let s = fs::read_to_string(&p).unwrap().replace(MODEL_FORMAT, "other");
        fs::write(&p, s).unwrap();
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn foreign_bn_eps_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&NetworkModel::<f32>::unet(1, 2, WeightInit::Zero), dir.path()).unwrap();
        let p = dir.path().join(TOPOLOGY_FILE);
        let mut topo: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        topo["bn_eps"] = serde_json::json!(1e-3);
        fs::write(&p, serde_json::to_vec(&topo).unwrap()).unwrap();
        assert!(matches!(load_model::<f32>(dir.path()), Err(Error::Topology(_))));
    }
}
