//! Binary checkpoint: `"GUPZ"`, version, flags, embedded TOML config, then
//! count-prefixed named tensor records. All integers little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::network::GatedUniPoseModel;

pub const MAGIC: &[u8; 4] = b"GUPZ";
pub const VERSION: u32 = 1;
const FLAG_DEPLOYED: u32 = 1;
/// Records under this prefix are auxiliary state, not model parameters.
pub const AUX_PREFIX: &str = "aux.";

/// Auxiliary named tensors stored alongside the model (optimizer moments, step counters).
pub type AuxRecords<S> = Vec<(String, Tensor<S>)>;

pub fn encode<S: Scalar>(model: &GatedUniPoseModel<S>, aux: &[(String, Tensor<S>)]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(if model.is_deployed() { FLAG_DEPLOYED } else { 0 });
    let cfg = model.config().to_toml();
    w.u32(cfg.len() as u32);
    w.bytes(cfg.as_bytes());
    let params = model.parameters();
    w.u32((params.len() + aux.len()) as u32);
    let mut record = |name: &str, t: &Tensor<S>| {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.tensor(t);
    };
    for p in &params {
        record(p.name(), p.tensor());
    }
    for (name, t) in aux {
        if !name.starts_with(AUX_PREFIX) {
            return Err(Error::Checkpoint(format!("auxiliary record `{name}` must start with `{AUX_PREFIX}`")));
        }
        record(name, t);
    }
    Ok(w.buf)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(GatedUniPoseModel<S>, AuxRecords<S>)> {
    let mut r = Reader::new(bytes, "checkpoint");
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version} is not supported (expected {VERSION})")));
    }
    let flags = r.u32()?;
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let config = ModelConfig::from_toml(cfg_text)?;
    let mut model = GatedUniPoseModel::<S>::build(&config)?;
    if flags & FLAG_DEPLOYED != 0 {
        model.switch_to_deploy()?;
    }
    let count = r.u32()? as usize;
    let mut records: HashMap<String, Tensor<S>> = HashMap::with_capacity(count);
    let mut aux = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint record name is not UTF-8".into()))?;
        let t = r.tensor::<S>()?;
        if name.starts_with(AUX_PREFIX) {
            aux.push((name, t));
        } else if records.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if !r.is_at_end() {
        return Err(Error::Format(format!("trailing bytes after record {count}")));
    }
    let mut failure: Option<Error> = None;
    model.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match records.remove(p.name()) {
            None => failure = Some(Error::Checkpoint(format!("missing parameter `{}`", p.name()))),
            Some(t) if t.shape() != p.shape() => {
                failure = Some(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name(),
                    t.shape(),
                    p.shape()
                )))
            }
            Some(t) => {
                if let Err(e) = p.set_values(t.data()) {
                    failure = Some(e);
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = records.keys().min() {
        return Err(Error::Checkpoint(format!("unknown parameter `{name}`")));
    }
    Ok((model, aux))
}

pub fn save<S: Scalar>(model: &GatedUniPoseModel<S>, aux: &[(String, Tensor<S>)], path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, aux)?)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<(GatedUniPoseModel<S>, AuxRecords<S>)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GatedUniPoseModel<f32> {
        let mut c = ModelConfig::toy();
        c.input_size = [32, 32];
        c.heatmap_size = [8, 8];
        GatedUniPoseModel::build(&c).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let aux = vec![("aux.step".to_string(), Tensor::scalar(3.0))];
        let (back, aux2) = decode::<f32>(&encode(&m, &aux).unwrap()).unwrap();
        assert_eq!(aux2, aux);
        for (a, b) in m.parameters().iter().zip(back.parameters()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.tensor().data(), b.tensor().data());
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(&small(), &[]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode::<f32>(&ver), Err(Error::Format(_))));
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn deployed_flag_round_trips() {
        let mut m = small();
        m.switch_to_deploy().unwrap();
        let (back, _) = decode::<f32>(&encode(&m, &[]).unwrap()).unwrap();
        assert!(back.is_deployed());
        assert_eq!(back.parameters().len(), m.parameters().len());
    }
}
