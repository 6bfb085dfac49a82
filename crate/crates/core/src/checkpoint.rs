//! On-disk checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, UTF-8 JSON
//! manifest, then the raw little-endian tensor payload. Each tensor record
//! carries its byte range inside the payload and a CRC-32 of those bytes.
//!
//! Positional state (sinusoid tables, rotary angles, ALiBi slopes) is never
//! stored; it is rebuilt from `config.pe_kind` at load. Changing the scheme of
//! a checkpoint is therefore a manifest edit that leaves every payload byte alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdapterState, ModelConfig, TransformerModel};
use crate::numerics::{DType, ParamStore, Scalar, Tensor};
use crate::positional::PEKind;

pub const MAGIC: &[u8; 8] = b"PESWAPCK";
pub const OPTIM_MAGIC: &[u8; 8] = b"PESWAPOP";
pub const SCHEMA_VERSION: u32 = 1;
pub const CREATED_BY: &str = concat!("peswap ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    pub created_by: String,
    /// Only adapter tensors are stored; the base weights live in `base_checkpoint`.
    pub adapters_only: bool,
    pub adapters: Option<AdapterState>,
    pub base_checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapReport {
    pub old_pe: PEKind,
    pub new_pe: PEKind,
    pub tensors_changed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorDiff {
    Changed,
    OnlyInA,
    OnlyInB,
}

/// Differences between two checkpoints. Identical files give an empty report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffReport {
    /// `(field, value in a, value in b)`; config fields appear under their own name.
    pub fields: Vec<(String, String, String)>,
    pub tensors: Vec<(String, TensorDiff)>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.fields.is_empty() && self.tensors.is_empty()
    }

    pub fn changed_tensors(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|(_, d)| *d == TensorDiff::Changed)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// A verified checkpoint held in memory.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub manifest: Manifest,
    payload: Vec<u8>,
}

impl RawCheckpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let (manifest_bytes, payload) = read_container(path, MAGIC)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::CorruptHeader(format!("manifest: {e}")))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::CorruptHeader(format!(
                "unsupported schema version {}",
                manifest.schema_version
            )));
        }
        verify(&manifest.tensors, &payload)?;
        Ok(RawCheckpoint { manifest, payload })
    }

    pub fn tensor_bytes(&self, rec: &TensorRecord) -> &[u8] {
        &self.payload[rec.byte_offset as usize..(rec.byte_offset + rec.byte_length) as usize]
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_container(path, MAGIC, &serde_json::to_vec(&self.manifest)?, &self.payload)
    }

    fn params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for rec in &self.manifest.tensors {
            store.insert(rec.name.clone(), decode_tensor(rec, self.tensor_bytes(rec)))?;
        }
        Ok(store)
    }
}

pub fn save<T: Scalar>(model: &TransformerModel<T>, path: &Path) -> Result<()> {
    let tensors: Vec<(&str, &Tensor<T>)> = model
        .params()
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    write_model(model, tensors, false, None, path)
}

/// Stores only the adapter tensors of `model`, pointing at `base` for the rest.
pub fn save_adapters<T: Scalar>(model: &TransformerModel<T>, base: &Path, path: &Path) -> Result<()> {
    if model.adapters().is_none() {
        return Err(Error::Usage("model carries no adapters".into()));
    }
    let tensors: Vec<(&str, &Tensor<T>)> = model
        .params()
        .iter()
        .filter(|(_, p)| is_adapter_name(&p.name))
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    write_model(model, tensors, true, Some(base.display().to_string()), path)
}

fn write_model<T: Scalar>(
    model: &TransformerModel<T>,
    tensors: Vec<(&str, &Tensor<T>)>,
    adapters_only: bool,
    base_checkpoint: Option<String>,
    path: &Path,
) -> Result<()> {
    let (records, payload) = encode_payload(&tensors);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: model.config().clone(),
        tensors: records,
        created_by: CREATED_BY.into(),
        adapters_only,
        adapters: model.adapters().cloned(),
        base_checkpoint,
    };
    write_container(path, MAGIC, &serde_json::to_vec(&manifest)?, &payload)
}

/// Loads a checkpoint into a model of element type `T`, converting stored
/// values if their dtype differs. Adapter-only files pull in their base.
pub fn load<T: Scalar>(path: &Path) -> Result<TransformerModel<T>> {
    let raw = RawCheckpoint::read(path)?;
    let mut params = if raw.manifest.adapters_only {
        let base_path = raw
            .manifest
            .base_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Integrity("adapter checkpoint names no base".into()))?;
        let base = RawCheckpoint::read(&resolve_base(path, base_path))?;
        if base.manifest.adapters_only {
            return Err(Error::Integrity("base checkpoint is itself adapter-only".into()));
        }
        let mut store = base.params::<T>()?;
        for rec in &raw.manifest.tensors {
            store.insert(rec.name.clone(), decode_tensor(rec, raw.tensor_bytes(rec)))?;
        }
        store
    } else {
        raw.params::<T>()?
    };
    if raw.manifest.adapters.is_some() {
        for p in params.iter_mut() {
            p.trainable = is_adapter_name(&p.name);
        }
    }
    TransformerModel::from_parts(raw.manifest.config, params, raw.manifest.adapters)
}

fn resolve_base(path: &Path, base: &str) -> PathBuf {
    let b = PathBuf::from(base);
    if b.is_absolute() || b.exists() {
        b
    } else {
        path.parent().map(|d| d.join(&b)).unwrap_or(b)
    }
}

pub(crate) fn is_adapter_name(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Rewrites `input` with a different positional scheme. Payload bytes are copied verbatim.
pub fn swap_pe(input: &Path, new_pe: PEKind, output: &Path) -> Result<SwapReport> {
    let mut raw = RawCheckpoint::read(input)?;
    let old_pe = raw.manifest.config.pe_kind;
    raw.manifest.config.pe_kind = new_pe;
    raw.manifest.config.validate()?;
    raw.write(output)?;
    Ok(SwapReport {
        old_pe,
        new_pe,
        tensors_changed: 0,
    })
}

pub fn diff(a: &Path, b: &Path) -> Result<DiffReport> {
    let ra = RawCheckpoint::read(a)?;
    let rb = RawCheckpoint::read(b)?;
    let mut report = DiffReport::default();

    let mut fa = manifest_fields(&ra.manifest)?;
    let mut fb = manifest_fields(&rb.manifest)?;
    let keys: std::collections::BTreeSet<String> = fa.keys().chain(fb.keys()).cloned().collect();
    for k in keys {
        let va = fa.remove(&k).unwrap_or_default();
        let vb = fb.remove(&k).unwrap_or_default();
        if va != vb {
            report.fields.push((k, va, vb));
        }
    }

    let index_b: BTreeMap<&str, &TensorRecord> =
        rb.manifest.tensors.iter().map(|r| (r.name.as_str(), r)).collect();
    for rec in &ra.manifest.tensors {
        match index_b.get(rec.name.as_str()) {
            None => report.tensors.push((rec.name.clone(), TensorDiff::OnlyInA)),
            Some(other) => {
                let same = rec.shape == other.shape
                    && rec.dtype == other.dtype
                    && ra.tensor_bytes(rec) == rb.tensor_bytes(other);
                if !same {
                    report.tensors.push((rec.name.clone(), TensorDiff::Changed));
                }
            }
        }
    }
    let names_a: std::collections::HashSet<&str> = ra.manifest.tensors.iter().map(|r| r.name.as_str()).collect();
    for rec in &rb.manifest.tensors {
        if !names_a.contains(rec.name.as_str()) {
            report.tensors.push((rec.name.clone(), TensorDiff::OnlyInB));
        }
    }
    Ok(report)
}

/// Flattens the manifest to comparable `field -> value` pairs, excluding tensor records.
fn manifest_fields(m: &Manifest) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if let serde_json::Value::Object(cfg) = serde_json::to_value(&m.config)? {
        for (k, v) in cfg {
            out.insert(k, v.to_string());
        }
    }
    out.insert("schema_version".into(), m.schema_version.to_string());
    out.insert("created_by".into(), m.created_by.clone());
    out.insert("adapters_only".into(), m.adapters_only.to_string());
    out.insert("adapters".into(), serde_json::to_string(&m.adapters)?);
    out.insert("base_checkpoint".into(), format!("{:?}", m.base_checkpoint));
    Ok(out)
}

pub(crate) fn encode_payload<T: Scalar>(tensors: &[(&str, &Tensor<T>)]) -> (Vec<TensorRecord>, Vec<u8>) {
    let mut payload = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let start = payload.len();
        for &x in t.data() {
            x.write_le(&mut payload);
        }
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            byte_offset: start as u64,
            byte_length: (payload.len() - start) as u64,
            crc32: crc32fast::hash(&payload[start..]),
        });
    }
    (records, payload)
}

pub(crate) fn decode_tensor<T: Scalar>(rec: &TensorRecord, bytes: &[u8]) -> Tensor<T> {
    let w = rec.dtype.width();
    let data: Vec<T> = match rec.dtype {
        d if d == T::DTYPE => bytes.chunks_exact(w).map(T::read_le).collect(),
        DType::F32 => bytes
            .chunks_exact(w)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes.chunks_exact(w).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(&rec.shape, data).expect("record verified")
}

/// Checks record layout, payload length and per-tensor checksums.
pub(crate) fn verify(records: &[TensorRecord], payload: &[u8]) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    let mut cursor = 0u64;
    for rec in records {
        if !names.insert(rec.name.as_str()) {
            return Err(Error::CorruptHeader(format!("duplicate tensor `{}`", rec.name)));
        }
        let expected_len = rec.shape.iter().product::<usize>() as u64 * rec.dtype.width() as u64;
        if rec.byte_length != expected_len {
            return Err(Error::CorruptHeader(format!(
                "tensor `{}` declares {} bytes for shape {:?}",
                rec.name, rec.byte_length, rec.shape
            )));
        }
        if rec.byte_offset < cursor {
            return Err(Error::OffsetOverlap(rec.name.clone()));
        }
        cursor = rec.byte_offset + rec.byte_length;
    }
    if (payload.len() as u64) < cursor {
        return Err(Error::Truncated {
            expected: cursor,
            found: payload.len() as u64,
        });
    }
    if (payload.len() as u64) > cursor {
        return Err(Error::CorruptHeader(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - cursor
        )));
    }
    for rec in records {
        let bytes = &payload[rec.byte_offset as usize..(rec.byte_offset + rec.byte_length) as usize];
        let computed = crc32fast::hash(bytes);
        if computed != rec.crc32 {
            return Err(Error::Checksum {
                name: rec.name.clone(),
                stored: rec.crc32,
                computed,
            });
        }
    }
    Ok(())
}

pub(crate) fn write_container(path: &Path, magic: &[u8; 8], manifest: &[u8], payload: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(magic)?;
        f.write_all(&(manifest.len() as u64).to_le_bytes())?;
        f.write_all(manifest)?;
        f.write_all(payload)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::CorruptHeader(format!("{}: bad magic", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len > (bytes.len() - 16) as u64 {
        return Err(Error::CorruptHeader(format!(
            "manifest length {len} exceeds file size {}",
            bytes.len()
        )));
    }
    let payload = bytes.split_off(16 + len as usize);
    let manifest = bytes.split_off(16);
    std::str::from_utf8(&manifest).map_err(|e| Error::CorruptHeader(format!("manifest is not UTF-8: {e}")))?;
    Ok((manifest, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn tiny() -> TransformerModel<f32> {
        let mut cfg = ModelConfig::toy(12, 12, PEKind::Sine);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.ffn_dim = 16;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        TransformerModel::new(cfg, &mut RngStream::new(1, 0)).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny();
        save(&m, &p).unwrap();
        let back: TransformerModel<f32> = load(&p).unwrap();
        assert_eq!(back.config(), m.config());
        for ((_, a), (_, b)) in back.params().iter().zip(m.params().iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncation_and_corruption_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&tiny(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        let t = dir.path().join("t.ckpt");
        fs::write(&t, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load::<f32>(&t), Err(Error::Truncated { .. })));

        let c = dir.path().join("c.ckpt");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x10;
        fs::write(&c, &flipped).unwrap();
        assert!(matches!(load::<f32>(&c), Err(Error::Checksum { .. })));

        let h = dir.path().join("h.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&h, &bad).unwrap();
        assert!(matches!(load::<f32>(&h), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn overlap_detected() {
        let a = Tensor::<f32>::zeros(&[2]);
        let (mut recs, payload) = encode_payload(&[("a", &a), ("b", &a)]);
        recs[1].byte_offset = 4;
        assert!(matches!(verify(&recs, &payload), Err(Error::OffsetOverlap(_))));
    }

    #[test]
    fn swap_touches_only_pe_kind() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("base.ckpt");
        save(&tiny(), &base).unwrap();
        for kind in PEKind::ALL {
            let out = dir.path().join(format!("{kind}.ckpt"));
            let rep = swap_pe(&base, kind, &out).unwrap();
            assert_eq!(rep.tensors_changed, 0);
            let d = diff(&base, &out).unwrap();
            assert!(d.tensors.is_empty());
            if kind == PEKind::Sine {
                assert!(d.is_empty());
                assert_eq!(fs::read(&base).unwrap(), fs::read(&out).unwrap());
            } else {
                assert_eq!(d.fields.len(), 1);
                assert_eq!(d.fields[0].0, "pe_kind");
            }
            let back = dir.path().join(format!("{kind}.back.ckpt"));
            swap_pe(&out, PEKind::Sine, &back).unwrap();
            assert_eq!(fs::read(&base).unwrap(), fs::read(&back).unwrap());
        }
    }
}
