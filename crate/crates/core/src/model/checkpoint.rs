//! Versioned checkpoint container.
//!
//! ```text
//! ESOLM-CHECKPOINT v1
//! key=value            (model config, then caller metadata)
//! ...
//! tensors=<count>
//! <blank line>
//! per tensor: u32 name length, name bytes, u32 ndim, u64 dims, f32 data (all LE)
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::{Denoiser, DenoiserConfig, Params};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ESOLM-CHECKPOINT";

/// A loaded model plus the free-form metadata written alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub metadata: BTreeMap<String, String>,
}

pub fn write_to(w: &mut impl Write, model: &Denoiser, metadata: &BTreeMap<String, String>) -> Result<()> {
    writeln!(w, "{MAGIC} v{FORMAT_VERSION}")?;
    let model_keys = model.config().to_kv();
    for (k, v) in &model_keys {
        writeln!(w, "model.{k}={v}")?;
    }
    for (k, v) in metadata {
        if k.contains('=') || k.contains('\n') || v.contains('\n') || k.starts_with("model.") || k == "tensors" {
            return Err(Error::Checkpoint(format!("metadata key `{k}` is not storable")));
        }
        writeln!(w, "{k}={v}")?;
    }
    let tensors = model.params().tensors();
    writeln!(w, "tensors={}", tensors.len())?;
    writeln!(w)?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &dim in &t.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &x in &t.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save(path: &Path, model: &Denoiser, metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, model, metadata)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    read_from(&mut std::io::BufReader::new(file))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor block: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor block: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_from(r: &mut impl BufRead) -> Result<Checkpoint> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let version = line
        .trim_end()
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().strip_prefix('v'))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?
        .parse::<u32>()
        .map_err(|_| Error::Checkpoint("unreadable format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let mut model_kv = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    let mut count = None;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("header ended before the tensor block".into()));
        }
        let l = line.trim_end_matches('\n');
        if l.is_empty() {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad header line `{l}`")))?;
        if let Some(mk) = k.strip_prefix("model.") {
            model_kv.insert(mk.to_string(), v.to_string());
        } else if k == "tensors" {
            count = Some(v.parse::<usize>().map_err(|_| Error::Checkpoint("bad tensor count".into()))?);
        } else {
            metadata.insert(k.to_string(), v.to_string());
        }
    }
    let config = DenoiserConfig::from_kv(&model_kv).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = count.ok_or_else(|| Error::Checkpoint("missing tensor count".into()))?;

    let mut params = Params::init(&config, 1.0, true, &mut crate::rng::seeded(0));
    let slots = params.tensors_mut();
    if slots.len() != count {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            slots.len()
        )));
    }
    for slot in slots {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != slot.name || shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                slot.name, slot.shape
            )));
        }
        for x in slot.data.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
            *x = f32::from_le_bytes(b) as f64;
        }
    }
    Ok(Checkpoint {
        model: Denoiser::from_params(config, params)?,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::Vocab;
    use crate::rng::seeded;

    fn model() -> Denoiser {
        let cfg = DenoiserConfig::toy(Vocab::new(9, 7).unwrap(), 8);
        Denoiser::init(cfg, 0.1, false, &mut seeded(5)).unwrap()
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let m = model();
        let meta: BTreeMap<String, String> = [("config_hash".to_string(), "abc".to_string())].into();
        let mut buf = Vec::new();
        write_to(&mut buf, &m, &meta).unwrap();
        let ck = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.metadata, meta);
        assert_eq!(ck.model.config(), m.config());
        for (a, b) in m.params().tensors().iter().zip(ck.model.params().tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn version_mismatch_is_loud() {
        let mut buf = Vec::new();
        write_to(&mut buf, &model(), &BTreeMap::new()).unwrap();
        let text = String::from_utf8_lossy(&buf).replacen("v1", "v2", 1);
        let err = read_from(&mut text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 2, expected: 1 }));
    }

    #[test]
    fn truncation_is_detected() {
        let mut buf = Vec::new();
        write_to(&mut buf, &model(), &BTreeMap::new()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_from(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
