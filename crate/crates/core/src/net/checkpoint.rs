//! Checkpoint files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "PWSL" version count
//! count × { name_len name_bytes rank extents[rank] payload[f32 LE; product(extents)] }
//! ```
//!
//! A `meta.arch` entry records the architecture; the normalization mode is
//! recognised from the parameter names.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::arch::{ArchConfig, ArchitectureSpec, NormMode, Preset};
use crate::net::network::{NetOptions, Network};
use crate::norm::PwsConfig;
use crate::tensor::{Rng, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PWSL";
pub const VERSION: u32 = 1;
const META_ARCH: &str = "meta.arch";

pub type Entry = (String, Tensor<f32>);

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.source,
                format!("truncated at offset {} while reading {what}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(source, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(source, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name =
            String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::format(source, format!("entry {i} name is not utf-8")))?;
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(source, format!("entry '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(source, format!("entry '{name}': {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(source, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}

fn arch_entry(cfg: &ArchConfig) -> Tensor<f32> {
    let v = [
        cfg.preset.code() as f64,
        cfg.width,
        cfg.depth as f64,
        cfg.classes as f64,
        cfg.in_channels as f64,
        cfg.in_size as f64,
    ];
    Tensor::from_f64(&[6], &v).expect("fixed shape")
}

fn parse_arch(t: &Tensor<f32>, source: &str) -> Result<ArchConfig> {
    let v: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    if v.len() != 6 {
        return Err(Error::format(source, "meta.arch must hold 6 values"));
    }
    let preset = Preset::from_code(v[0] as u32).ok_or_else(|| Error::format(source, format!("unknown architecture code {}", v[0])))?;
    Ok(ArchConfig {
        preset,
        width: v[1],
        depth: v[2] as usize,
        classes: v[3] as usize,
        in_channels: v[4] as usize,
        in_size: v[5] as usize,
    })
}

/// Recognises the normalization mode from parameter names.
pub fn infer_mode<'a>(names: impl IntoIterator<Item = &'a str>) -> NormMode {
    let mut mode = NormMode::Plain;
    for n in names {
        if n.ends_with(".alpha") {
            return NormMode::Pws;
        } else if n.ends_with(".bn.running_mean") {
            mode = NormMode::Bn;
        } else if n.ends_with(".gn.groups") {
            mode = NormMode::Gn;
        } else if n.ends_with(".g") {
            mode = NormMode::Wn;
        }
    }
    mode
}

impl<T: Scalar> Network<T> {
    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = vec![(META_ARCH.to_string(), arch_entry(&self.spec().config))];
        out.extend(self.registry().entries().iter().map(|e| (e.name.clone(), e.value.cast())));
        out
    }

    /// Rebuilds a network from checkpoint entries. Every registered name must
    /// be present with the right shape and nothing else may be.
    pub fn from_entries(entries: Vec<Entry>, source: &str) -> Result<Self> {
        let mut arch = None;
        let mut values = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            if name == META_ARCH {
                arch = Some(parse_arch(&t, source)?);
            } else {
                values.push((name, t));
            }
        }
        let arch = arch.ok_or_else(|| Error::format(source, "missing meta.arch entry"))?;
        let spec = ArchitectureSpec::from_config(arch).map_err(|e| Error::format(source, e.to_string()))?;
        let mode = infer_mode(values.iter().map(|(n, _)| n.as_str()));
        let find = |suffix: &str| values.iter().find(|(n, _)| n.ends_with(suffix)).map(|(_, t)| t.data()[0] as f64);
        let mut options = NetOptions::default();
        if let Some(g) = find(".gn.groups") {
            options.gn_groups = g as usize;
        }
        if mode == NormMode::Pws {
            options.pws = PwsConfig {
                gamma: find(".gamma").unwrap_or(options.pws.gamma),
                scale_sqrt2nl: find(".pws_scale").map_or(true, |v| v != 0.0),
            };
        }
        let mut net = Network::build(spec, mode, options, &mut Rng::new(0)).map_err(|e| Error::format(source, e.to_string()))?;
        if values.len() != net.registry().len() {
            return Err(Error::format(
                source,
                format!(
                    "{} entries for a {mode} network with {} parameters",
                    values.len(),
                    net.registry().len()
                ),
            ));
        }
        for (name, t) in values {
            let id = net
                .registry()
                .id(&name)
                .ok_or_else(|| Error::format(source, format!("unexpected entry '{name}' for a {mode} network")))?;
            let slot = net.registry_mut().value_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::format(
                    source,
                    format!("entry '{name}' has shape {:?}, network expects {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.cast();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(read_checkpoint(path)?, &path.display().to_string())
    }
}

/// Reads a PWS checkpoint and writes the equivalent plain-conv checkpoint.
pub fn fold_checkpoint(input: &Path, output: &Path) -> Result<()> {
    let net = Network::<f32>::load(input)?;
    net.fold()?.save(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::Mode;

    fn tiny(mode: NormMode) -> Network<f32> {
        let mut cfg = ArchConfig::new(Preset::Tiny);
        cfg.in_size = 8;
        let spec = ArchitectureSpec::from_config(cfg).unwrap();
        let options = NetOptions {
            gn_groups: 4,
            ..NetOptions::default()
        };
        Network::build(spec, mode, options, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn encode_layout() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let bytes = encode(&[("ab".into(), t)]);
        let mut want = b"PWSL".to_vec();
        for v in [1u32, 1, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(b"ab");
        for v in [1u32, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        let back = decode(&bytes, "mem").unwrap();
        assert_eq!(back[0].0, "ab");
        assert_eq!(back[0].1.data(), &[1.0, -2.0]);
    }

    #[test]
    fn truncation_and_garbage_are_format_errors() {
        let t = Tensor::<f32>::zeros(&[3]).unwrap();
        let bytes = encode(&[("w".into(), t)]);
        for cut in [2, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], "mem"), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, "mem").is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long, "mem").is_err());
    }

    #[test]
    fn round_trip_every_mode() {
        let dir = tempfile::tempdir().unwrap();
        let x = Rng::new(2).gaussian_tensor(&[2, 3, 8, 8], 0.0, 1.0).unwrap();
        for mode in NormMode::ALL {
            let mut net = tiny(mode);
            net.forward(&x, Mode::Train).unwrap();
            let path = dir.path().join(format!("{mode}.ckpt"));
            net.save(&path).unwrap();
            let back = Network::<f32>::load(&path).unwrap();
            assert_eq!(back.mode(), mode);
            assert_eq!(back.registry().snapshot(), net.registry().snapshot());
            assert_eq!(back.infer(&x).unwrap().data(), net.infer(&x).unwrap().data());
        }
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let entries = tiny(NormMode::Plain).to_entries();
        let mut dropped = entries.clone();
        dropped.pop();
        assert!(matches!(Network::<f32>::from_entries(dropped, "mem"), Err(Error::Format { .. })));
        let mut reshaped = entries.clone();
        let last = reshaped.len() - 1;
        reshaped[last].1 = Tensor::zeros(&[99]).unwrap();
        assert!(matches!(Network::<f32>::from_entries(reshaped, "mem"), Err(Error::Format { .. })));
        let no_meta: Vec<Entry> = entries.into_iter().skip(1).collect();
        assert!(Network::<f32>::from_entries(no_meta, "mem").is_err());
    }

    #[test]
    fn fold_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
        tiny(NormMode::Pws).save(&a).unwrap();
        fold_checkpoint(&a, &b).unwrap();
        assert_eq!(Network::<f32>::load(&b).unwrap().mode(), NormMode::Plain);
        assert!(matches!(fold_checkpoint(&b, &c), Err(Error::Domain(_))));
        assert!(matches!(fold_checkpoint(&dir.path().join("missing"), &c), Err(Error::Io { .. })));
    }
}
