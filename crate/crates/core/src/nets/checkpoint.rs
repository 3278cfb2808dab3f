//! Self-describing checkpoint container: magic header, JSON metadata
//! (specs, step counter, condition layout, tensor directory), then the
//! raw little-endian float32 payloads in directory order. Round trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VtsError};
use crate::nn::params::ParamStore;

use super::pix2pix::Pix2PixGeneratorSpec;
use super::srcnn::SrcnnSpec;
use super::{DiscriminatorSpec, GeneratorSpec};

pub const MAGIC: &[u8; 8] = b"VTSCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    /// Model family: "vts", "vts-nocond", "vts-nohf", "srcnn", "pix2pix".
    kind: String,
    step: u64,
    condition_layout: String,
    gen_spec: Option<GeneratorSpec>,
    disc_spec: Option<DiscriminatorSpec>,
    #[serde(default)]
    p2p_spec: Option<Pix2PixGeneratorSpec>,
    #[serde(default)]
    srcnn_spec: Option<SrcnnSpec>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub condition_layout: String,
    pub gen_spec: Option<GeneratorSpec>,
    pub disc_spec: Option<DiscriminatorSpec>,
    pub p2p_spec: Option<Pix2PixGeneratorSpec>,
    pub srcnn_spec: Option<SrcnnSpec>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            condition_layout: self.condition_layout.clone(),
            gen_spec: self.gen_spec.clone(),
            disc_spec: self.disc_spec.clone(),
            p2p_spec: self.p2p_spec.clone(),
            srcnn_spec: self.srcnn_spec.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, p)| TensorEntry {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(
            File::create(path).map_err(|e| VtsError::io(path, e))?,
        );
        let werr = |e| VtsError::io(path, e);
        w.write_all(MAGIC).map_err(werr)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(werr)?;
        w.write_all(&header_json).map_err(werr)?;
        for (_, p) in self.params.iter() {
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for &v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(werr)?;
        }
        w.flush().map_err(werr)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(
            File::open(path).map_err(|e| VtsError::io(path, e))?,
        );
        let rerr = |e| VtsError::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(rerr)?;
        if &magic != MAGIC {
            return Err(VtsError::Data(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8).map_err(rerr)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(rerr)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(rerr)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), vals)
                .map_err(|e| VtsError::Data(format!("tensor {}: {e}", t.name)))?;
            params.insert(&t.name, arr, t.trainable);
        }
        Ok(Checkpoint {
            kind: header.kind,
            step: header.step,
            condition_layout: header.condition_layout,
            gen_spec: header.gen_spec,
            disc_spec: header.disc_spec,
            p2p_spec: header.p2p_spec,
            srcnn_spec: header.srcnn_spec,
            params,
        })
    }
}

/// Content hash recorded in provenance sidecars.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| VtsError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf).map_err(|e| VtsError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
