//! Checkpoint files: a JSON header followed by raw parameter blocks.
//!
//! Layout: the 8-byte magic `CATNCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! parameter tensor as little-endian `f64` values in `collect_params` order.
//! Random conditioning maps are not stored; they are rebuilt from the seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionPolicy;
use crate::error::{Error, Result};
use crate::models::{ArchConfig, ModelSuite, Net};
use crate::nn::{MlpSpec, Parameterized};
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"CATNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    spec: MlpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: usize,
    config: TrainConfig,
    nets: Vec<NetEntry>,
    conditioning: ConditionPolicy,
    param_shapes: Vec<Vec<usize>>,
    num_scalars: usize,
}

/// A restored suite with the configuration it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub suite: ModelSuite,
    pub config: TrainConfig,
    pub step: usize,
}

fn header_for(suite: &ModelSuite, config: &TrainConfig, step: usize) -> Header {
    let params = suite.params();
    Header {
        format_version: FORMAT_VERSION,
        step,
        config: config.clone(),
        nets: Net::ALL
            .iter()
            .map(|&n| NetEntry { name: n.name().to_string(), spec: suite.net(n).spec().clone() })
            .collect(),
        conditioning: suite.arch().conditioning.clone(),
        param_shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        num_scalars: params.iter().map(|p| p.len()).sum(),
    }
}

pub fn encode_checkpoint(suite: &ModelSuite, config: &TrainConfig, step: usize) -> Result<Vec<u8>> {
    if suite.arch() != &config.arch {
        return Err(Error::Checkpoint("suite architecture differs from the config's".into()));
    }
    let header = serde_json::to_vec(&header_for(suite, config, step))?;
    let params = suite.params();
    let scalars: usize = params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint(suite: &ModelSuite, config: &TrainConfig, step: usize, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(suite, config, step)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("file truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<Checkpoint> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let header_len = u64::from_le_bytes(take(b, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(b, header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with file version".into()));
    }
    header.config.validate().map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

    let mut suite = ModelSuite::build(&header.config.arch)?;
    let expected = header_for(&suite, &header.config, header.step);
    if expected.nets != header.nets || expected.param_shapes != header.param_shapes || expected.conditioning != header.conditioning {
        return Err(Error::Checkpoint("network layout in header does not match its architecture config".into()));
    }
    if b.len() != 8 * expected.num_scalars {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * expected.num_scalars,
            b.len()
        )));
    }
    let mut chunks = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for p in suite.params_mut() {
        for v in p.data_mut() {
            *v = chunks.next().expect("length checked");
        }
    }
    Ok(Checkpoint { suite, config: header.config, step: header.step })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and additionally requires the stored architecture to equal `arch`.
pub fn load_checkpoint_for(path: &Path, arch: &ArchConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.config.arch != arch {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has {}, expected {}",
            serde_json::to_string(&ck.config.arch)?,
            serde_json::to_string(arch)?
        )));
    }
    Ok(ck)
}
