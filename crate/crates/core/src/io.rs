//! Binary containers and manifests.
//!
//! All numeric payloads are little-endian 64-bit floats regardless of the
//! in-memory element type, so files are portable across builds:
//!
//! * `BNNP` — parameter checkpoint: magic, u32 version, u64 spec hash,
//!   u64 count, values.
//! * `BNNT` — tensor: magic, u32 version, u32 ndim, u64 dims, values.
//! * `BNNC` — chain record: magic, u32 version, serialized spec and sampler
//!   config, dataset identity, and the file name of the initial-parameter
//!   checkpoint next to it.
//!
//! Ensemble directories hold one `BNNP` per kept sample plus a JSON manifest
//! mapping sample index to file name.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamVector};
use crate::sampler::{ChainRecord, SgldConfig};
use crate::tensor::{Elem, Tensor};

const PARAMS_MAGIC: [u8; 4] = *b"BNNP";
const TENSOR_MAGIC: [u8; 4] = *b"BNNT";
const CHAIN_MAGIC: [u8; 4] = *b"BNNC";
const VERSION: u32 = 1;

struct Writer<W: Write>(BufWriter<W>);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

struct Reader<R: Read> {
    inner: BufReader<R>,
    path: String,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::TruncatedFile(self.path.clone()))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::TruncatedFile(self.path.clone()))?;
        String::from_utf8(buf).map_err(|_| Error::TruncatedFile(self.path.clone()))
    }
    fn expect_magic(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.bytes::<4>()?;
        if found != magic {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected: u32::from_be_bytes(magic),
                found: u32::from_be_bytes(found),
            });
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported container version {version}",
                self.path
            )));
        }
        Ok(())
    }
}

fn open_reader(path: &Path) -> Result<Reader<File>> {
    Ok(Reader {
        inner: BufReader::new(File::open(path)?),
        path: path.display().to_string(),
    })
}

/// Write a parameter checkpoint bound to a network spec hash.
pub fn save_params(path: &Path, params: &ParamVector, spec_hash: u64) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.0.write_all(&PARAMS_MAGIC)?;
    w.u32(VERSION)?;
    w.u64(spec_hash)?;
    w.u64(params.len() as u64)?;
    for &v in params.as_slice() {
        w.f64(v as f64)?;
    }
    Ok(w.0.flush()?)
}

/// Read a parameter checkpoint; when `expect_spec_hash` is given, refuse
/// checkpoints written for a different architecture.
pub fn load_params(path: &Path, expect_spec_hash: Option<u64>) -> Result<ParamVector> {
    let mut r = open_reader(path)?;
    r.expect_magic(PARAMS_MAGIC)?;
    let spec_hash = r.u64()?;
    if let Some(expected) = expect_spec_hash {
        if spec_hash != expected {
            return Err(Error::Config(format!(
                "{}: checkpoint belongs to a different network (spec hash {spec_hash:#018x}, expected {expected:#018x})",
                path.display()
            )));
        }
    }
    let count = r.u64()? as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f64()? as Elem);
    }
    Ok(ParamVector::from_vec(values))
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.0.write_all(&TENSOR_MAGIC)?;
    w.u32(VERSION)?;
    w.u32(tensor.shape().len() as u32)?;
    for &d in tensor.shape() {
        w.u64(d as u64)?;
    }
    for &v in tensor.data() {
        w.f64(v as f64)?;
    }
    Ok(w.0.flush()?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = open_reader(path)?;
    r.expect_magic(TENSOR_MAGIC)?;
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.f64()? as Elem);
    }
    Tensor::new(shape, data)
}

fn write_spec<W: Write>(w: &mut Writer<W>, spec: &NetworkSpec) -> Result<()> {
    let json = serde_json::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    w.str(&json)
}

fn read_spec<R: Read>(r: &mut Reader<R>) -> Result<NetworkSpec> {
    let json = r.str()?;
    serde_json::from_str(&json).map_err(|e| Error::Config(e.to_string()))
}

fn write_sgld_config<W: Write>(w: &mut Writer<W>, cfg: &SgldConfig) -> Result<()> {
    let json = serde_json::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    w.str(&json)
}

fn read_sgld_config<R: Read>(r: &mut Reader<R>) -> Result<SgldConfig> {
    let json = r.str()?;
    serde_json::from_str(&json).map_err(|e| Error::Config(e.to_string()))
}

/// Persist a chain record at `path`, writing the initial parameters to a
/// `BNNP` checkpoint next to it and referencing that file by name.
pub fn save_chain_record(path: &Path, record: &ChainRecord) -> Result<()> {
    let init_name = format!(
        "{}.init.bnnp",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("chain")
    );
    let init_path = path.with_file_name(&init_name);
    save_params(&init_path, &record.init_params, record.spec.content_hash())?;

    let mut w = Writer(BufWriter::new(File::create(path)?));
    w.0.write_all(&CHAIN_MAGIC)?;
    w.u32(VERSION)?;
    write_spec(&mut w, &record.spec)?;
    write_sgld_config(&mut w, &record.config)?;
    w.str(&record.dataset_name)?;
    w.u64(record.dataset_hash)?;
    w.str(&init_name)?;
    Ok(w.0.flush()?)
}

pub fn load_chain_record(path: &Path) -> Result<ChainRecord> {
    let mut r = open_reader(path)?;
    r.expect_magic(CHAIN_MAGIC)?;
    let spec = read_spec(&mut r)?;
    let config = read_sgld_config(&mut r)?;
    let dataset_name = r.str()?;
    let dataset_hash = r.u64()?;
    let init_name = r.str()?;
    let init_path = path.with_file_name(&init_name);
    let init_params = load_params(&init_path, Some(spec.content_hash()))?;
    Ok(ChainRecord {
        spec,
        init_params,
        config,
        dataset_name,
        dataset_hash,
    })
}

/// Index manifest of a materialized ensemble directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub spec_hash: u64,
    pub dataset_hash: u64,
    pub chain_seed: u64,
    /// sample index (ascending) -> checkpoint file name
    pub members: Vec<MemberEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemberEntry {
    pub index: u64,
    pub file: String,
}

pub const ENSEMBLE_MANIFEST: &str = "manifest.json";

/// File name for kept sample `k` inside an ensemble directory.
pub fn member_file_name(index: u64) -> String {
    format!("sample-{index:05}.bnnp")
}

pub fn save_ensemble_manifest(dir: &Path, manifest: &EnsembleManifest) -> Result<()> {
    let json =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(ENSEMBLE_MANIFEST), json)?;
    Ok(())
}

pub fn load_ensemble_manifest(dir: &Path) -> Result<EnsembleManifest> {
    let json = fs::read_to_string(dir.join(ENSEMBLE_MANIFEST))?;
    serde_json::from_str(&json).map_err(|e| Error::Config(e.to_string()))
}

/// Adversarial-set sidecar: attack configuration, provider identity, and
/// per-example outcomes. The inputs themselves live in a `BNNT` file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversarialManifest {
    pub provider: String,
    pub dataset_hash: u64,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub clip: (f64, f64),
    pub gradient_mode: String,
    pub random_start: bool,
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
    pub inputs_file: String,
}

pub fn save_adversarial_manifest(path: &Path, manifest: &AdversarialManifest) -> Result<()> {
    let json =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_adversarial_manifest(path: &Path) -> Result<AdversarialManifest> {
    let json = fs::read_to_string(path)?;
    serde_json::from_str(&json).map_err(|e| Error::Config(e.to_string()))
}

/// Create `dir` if needed and return it.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::NoiseConvention;

    fn sample_params() -> ParamVector {
        let mut rng = crate::rng::SplitMix64::new(8);
        ParamVector::from_vec((0..64).map(|_| rng.uniform(-2.0, 2.0) as Elem).collect())
    }

    #[test]
    fn params_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bnnp");
        let params = sample_params();
        save_params(&path, &params, 0xDEAD).unwrap();
        let loaded = load_params(&path, Some(0xDEAD)).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn params_reject_wrong_spec_hash_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bnnp");
        save_params(&path, &sample_params(), 1).unwrap();
        assert!(load_params(&path, Some(2)).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_params(&path, None),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_params_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bnnp");
        save_params(&path, &sample_params(), 1).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_params(&path, None),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bnnt");
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 9.5, -0.125]).unwrap();
        save_tensor(&path, &t).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
    }

    #[test]
    fn chain_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bnnc");
        let spec = NetworkSpec::mlp(4, 6, 2);
        let record = ChainRecord {
            spec: spec.clone(),
            init_params: ParamVector::zeros(
                crate::nn::Network::new(spec).unwrap().param_count(),
            ),
            config: SgldConfig {
                learning_rate: 1e-4,
                prior_precision: 10.0,
                dataset_size: 100,
                batch_size: 10,
                burn_in: 10,
                thinning: 5,
                total_iters: 100,
                seed: 7,
                noise: NoiseConvention::VarianceEta,
                eta_decay: None,
            },
            dataset_name: "two_gaussians".into(),
            dataset_hash: 0xABCDEF,
        };
        save_chain_record(&path, &record).unwrap();
        let loaded = load_chain_record(&path).unwrap();
        assert_eq!(loaded.spec, record.spec);
        assert_eq!(loaded.init_params, record.init_params);
        assert_eq!(loaded.dataset_hash, record.dataset_hash);
        assert_eq!(loaded.config.seed, record.config.seed);
        assert_eq!(loaded.kept_samples(), record.kept_samples());
    }
}
