//! On-disk formats: binary event-frame datasets and JSON checkpoints.
//!
//! Event-frame layout, little-endian: `b"MSNN"`, version `u16`, then
//! `T, C, H, W, samples, classes` as `u32`, then per sample a `u32` label
//! followed by `T*C*H*W` bytes, each 0 or 1.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use morphsnn_core::network::MorphNet;
use morphsnn_core::neuron::SpikeTensor;
use morphsnn_core::training::{SynthStream, TrainConfig};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"MSNN";
pub const EVENT_FORMAT_VERSION: u16 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventFrameFile {
    pub dims: [usize; 4],
    pub classes: usize,
    pub samples: Vec<SynthStream>,
}

impl EventFrameFile {
    pub fn new(samples: Vec<SynthStream>, classes: usize) -> Result<Self> {
        let first = samples.first().context("dataset has no samples")?;
        let dims = first.frames.dims();
        for (i, s) in samples.iter().enumerate() {
            ensure!(s.frames.dims() == dims, "sample {i} has dims {:?}, expected {dims:?}", s.frames.dims());
            ensure!(s.label < classes, "sample {i} has label {} but only {classes} classes", s.label);
        }
        Ok(Self { dims, classes, samples })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(30 + self.samples.len() * (4 + self.dims.iter().product::<usize>()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&EVENT_FORMAT_VERSION.to_le_bytes());
        for v in self.dims.iter().chain([&self.samples.len(), &self.classes]) {
            out.extend_from_slice(&u32::try_from(*v).context("header field exceeds u32")?.to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            out.extend_from_slice(s.frames.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).context("file too short for header")?;
        ensure!(&magic == MAGIC, "bad magic {magic:?}, not an event-frame file");
        let mut v = [0u8; 2];
        r.read_exact(&mut v).context("file too short for header")?;
        let version = u16::from_le_bytes(v);
        ensure!(version == EVENT_FORMAT_VERSION, "unsupported event-frame version {version}");
        let read_u32 = |r: &mut &[u8]| -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).context("truncated file")?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let mut header = [0usize; 6];
        for h in &mut header {
            *h = read_u32(&mut r)?;
        }
        let [t, c, h, w, n, classes] = header;
        let len = t * c * h * w;
        ensure!(len > 0, "frame dims {t}x{c}x{h}x{w} are empty");
        let expected = n * (4 + len);
        ensure!(r.len() == expected, "header declares {n} samples ({expected} body bytes) but body has {} bytes", r.len());
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let label = read_u32(&mut r)?;
            ensure!(label < classes, "sample {i} has label {label} but only {classes} classes");
            let (body, rest) = r.split_at(len);
            if let Some(bad) = body.iter().find(|&&b| b > 1) {
                bail!("sample {i} contains byte value {bad}; spikes must be 0 or 1");
            }
            samples.push(SynthStream { frames: SpikeTensor::from_vec([t, c, h, w], body.to_vec())?, label });
            r = rest;
        }
        Ok(Self { dims: [t, c, h, w], classes, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("cannot read data file {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("invalid data file {}", path.display()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub net: MorphNet,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, net: MorphNet) -> Self {
        Self { format_version: CHECKPOINT_VERSION, config, net }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: Checkpoint = serde_json::from_str(text)?;
        ensure!(ck.format_version == CHECKPOINT_VERSION, "unsupported checkpoint version {}", ck.format_version);
        ck.net.finalize()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use morphsnn_core::training::{generate_dataset, DatasetKind};

    fn sample_file() -> EventFrameFile {
        let data = generate_dataset(DatasetKind::MovingBar, 3, 2, [4, 2, 8, 8], 1).unwrap();
        EventFrameFile::new(data, 3).unwrap()
    }

    #[test]
    fn header_layout() {
        let f = sample_file();
        let b = f.to_bytes().unwrap();
        assert_eq!(&b[..4], b"MSNN");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        let field = |i: usize| u32::from_le_bytes(b[6 + 4 * i..10 + 4 * i].try_into().unwrap());
        assert_eq!((0..6).map(field).collect::<Vec<_>>(), vec![4, 2, 8, 8, 6, 3]);
        assert_eq!(b.len(), 30 + 6 * (4 + 4 * 2 * 64));
    }

    #[test]
    fn round_trip_is_lossless() {
        let f = sample_file();
        assert_eq!(EventFrameFile::from_bytes(&f.to_bytes().unwrap()).unwrap(), f);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = sample_file().to_bytes().unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(EventFrameFile::from_bytes(&bad_magic).is_err());
        assert!(EventFrameFile::from_bytes(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(EventFrameFile::from_bytes(&extra).is_err());
        let mut two = good.clone();
        let last = two.len() - 1;
        two[last] = 2;
        let err = EventFrameFile::from_bytes(&two).unwrap_err().to_string();
        assert!(err.contains("byte value 2"), "{err}");
        let mut label = good;
        label[30] = 9;
        assert!(EventFrameFile::from_bytes(&label).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = TrainConfig::default();
        let net = MorphNet::new(cfg.net_config(), 5).unwrap();
        let ck = Checkpoint::new(cfg, net);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }
}
