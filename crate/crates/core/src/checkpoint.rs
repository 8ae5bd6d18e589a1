//! Checkpoint directories: `manifest.json` plus one raw little-endian `f64`
//! file per named array, each covered by a SHA-256 in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::sha256_hex;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::optim::{AdamWState, SgdState};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dismae-checkpoint-v1";

/// Everything a training run needs to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedState {
    pub params: ParamStore,
    pub adamw: AdamWState,
    pub sgd: SgdState,
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the word position is a u128.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub epoch: usize,
    pub config_fingerprint: String,
    pub rng: RngState,
    pub adamw_step: u64,
    pub arrays: Vec<ArrayEntry>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adamw.m/";
const ADAM_V: &str = "adamw.v/";
const SGD_MOM: &str = "sgd.momentum/";

fn file_for(name: &str) -> String {
    format!("{}.bin", name.replace('/', "--"))
}

fn ckpt_err(name: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bytes = hex::decode(&s.seed).map_err(|e| ckpt_err("rng", format!("bad seed hex: {e}")))?;
    let seed: [u8; 32] = bytes
        .try_into()
        .map_err(|_| ckpt_err("rng", "seed must be 32 bytes"))?;
    let pos: u128 = s
        .word_pos
        .parse()
        .map_err(|e| ckpt_err("rng", format!("bad word_pos: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

pub fn save(state: &TrainedState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    let mut sections: Vec<(&str, &BTreeMap<String, Tensor>)> = vec![
        (ADAM_M, &state.adamw.m),
        (ADAM_V, &state.adamw.v),
        (SGD_MOM, &state.sgd.momentum),
    ];
    let params: BTreeMap<String, Tensor> = state.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    sections.insert(0, (PARAM, &params));
    for (prefix, map) in sections {
        for (name, t) in map {
            let full = format!("{prefix}{name}");
            let file = file_for(&full);
            let bytes = t.to_le_bytes();
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            arrays.push(ArrayEntry {
                name: full,
                file,
                shape: t.shape().to_vec(),
                dtype: "f64le".into(),
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        epoch: state.epoch,
        config_fingerprint: state.fingerprint.clone(),
        rng: rng_state(&state.rng),
        adamw_step: state.adamw.step,
        arrays,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(ckpt_err("manifest.json", format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

/// Load and verify a checkpoint. `expected_fingerprint` of `None` skips the
/// config check (used by inspection tools only).
pub fn load(dir: &Path, expected_fingerprint: Option<&str>) -> Result<TrainedState> {
    let m = read_manifest(dir)?;
    if let Some(fp) = expected_fingerprint {
        if fp != m.config_fingerprint {
            return Err(ckpt_err(
                "config_fingerprint",
                format!(
                    "checkpoint was written under config {} but the supplied config hashes to {fp}",
                    m.config_fingerprint
                ),
            ));
        }
    }
    let mut state = TrainedState {
        params: ParamStore::new(),
        adamw: AdamWState {
            step: m.adamw_step,
            ..Default::default()
        },
        sgd: SgdState::default(),
        epoch: m.epoch,
        rng: restore_rng(&m.rng)?,
        fingerprint: m.config_fingerprint.clone(),
    };
    for a in &m.arrays {
        if a.dtype != "f64le" {
            return Err(ckpt_err(&a.name, format!("unsupported dtype {}", a.dtype)));
        }
        let path = dir.join(&a.file);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ckpt_err(&a.name, format!("missing array file {}", a.file)),
            _ => Error::io(&path, e),
        })?;
        if sha256_hex(&bytes) != a.sha256 {
            return Err(ckpt_err(&a.name, "SHA-256 mismatch; array file is corrupted"));
        }
        let t = Tensor::from_le_bytes(a.shape.clone(), &bytes)
            .map_err(|e| ckpt_err(&a.name, e.to_string()))?;
        if let Some(n) = a.name.strip_prefix(PARAM) {
            state.params.insert(n, t);
        } else if let Some(n) = a.name.strip_prefix(ADAM_M) {
            state.adamw.m.insert(n.to_string(), t);
        } else if let Some(n) = a.name.strip_prefix(ADAM_V) {
            state.adamw.v.insert(n.to_string(), t);
        } else if let Some(n) = a.name.strip_prefix(SGD_MOM) {
            state.sgd.momentum.insert(n.to_string(), t);
        } else {
            return Err(ckpt_err(&a.name, "unknown array namespace"));
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> TrainedState {
        let mut params = ParamStore::new();
        params.insert("semantic.cls", Tensor::new(vec![1, 2], vec![0.5, -1.25]).unwrap());
        params.insert("decoder.pred.b", Tensor::new(vec![3], vec![1e-300, -0.0, 7.0]).unwrap());
        let mut adamw = AdamWState::default();
        adamw.step = 3;
        adamw.m.insert("semantic.cls".into(), Tensor::full(&[1, 2], 0.1));
        adamw.v.insert("semantic.cls".into(), Tensor::full(&[1, 2], 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rand::Rng::random(&mut rng);
        TrainedState {
            params,
            adamw,
            sgd: SgdState::default(),
            epoch: 4,
            rng,
            fingerprint: "abc".into(),
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let st = sample_state();
        save(&st, &tmp.path().join("a")).unwrap();
        let back = load(&tmp.path().join("a"), Some("abc")).unwrap();
        assert_eq!(back, st);
        save(&back, &tmp.path().join("b")).unwrap();
        assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    }

    #[test]
    fn corruption_names_the_array() {
        let tmp = tempfile::tempdir().unwrap();
        save(&sample_state(), tmp.path()).unwrap();
        let m = read_manifest(tmp.path()).unwrap();
        let entry = m.arrays.iter().find(|a| a.name == "param/decoder.pred.b").unwrap();
        let path = tmp.path().join(&entry.file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = load(tmp.path(), Some("abc")).unwrap_err().to_string();
        assert!(err.contains("param/decoder.pred.b"), "{err}");
    }

    #[test]
    fn missing_array_and_fingerprint() {
        let tmp = tempfile::tempdir().unwrap();
        save(&sample_state(), tmp.path()).unwrap();
        let err = load(tmp.path(), Some("other")).unwrap_err().to_string();
        assert!(err.contains("config_fingerprint"), "{err}");
        fs::remove_file(tmp.path().join(file_for("adamw.v/semantic.cls"))).unwrap();
        let err = load(tmp.path(), Some("abc")).unwrap_err().to_string();
        assert!(err.contains("adamw.v/semantic.cls"), "{err}");
    }
}
