//! Single-file checkpoints.
//!
//! Layout: a UTF-8 manifest terminated by a line `end`, followed by the raw
//! entry bytes. The manifest starts with `outpaint-checkpoint <version>`,
//! then `key value` header lines, then one line per entry:
//!
//! ```text
//! entry <name> <dtype> <shape> <offset> <nbytes> <crc32>
//! ```
//!
//! `dtype` is `f32` (little-endian) or `utf8`; `shape` is `2x3x4`, or `-` for
//! a scalar; offsets are relative to the first byte after the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &str = "outpaint-checkpoint";
pub const VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed training steps.
    pub step: u64,
    /// Seed of the run; the data order is derived from it and the step.
    pub seed: u64,
    pub config: Config,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

enum Payload<'a> {
    F32(&'a Tensor),
    Utf8(&'a str),
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

fn push_set<'a>(out: &mut Vec<(String, Payload<'a>)>, prefix: &str, set: &'a ParamSet) {
    for (name, t) in set.iter() {
        out.push((format!("{prefix}/{name}"), Payload::F32(t)));
    }
}

/// Serialises `ck` to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let config = ck.config.to_toml_string();
    let mut entries = vec![("config".to_string(), Payload::Utf8(&config))];
    push_set(&mut entries, "g", &ck.generator);
    push_set(&mut entries, "d", &ck.discriminator);
    push_set(&mut entries, "opt_g.m", &ck.opt_g.m);
    push_set(&mut entries, "opt_g.v", &ck.opt_g.v);
    push_set(&mut entries, "opt_d.m", &ck.opt_d.m);
    push_set(&mut entries, "opt_d.v", &ck.opt_d.v);

    let mut manifest = format!("{MAGIC} {VERSION}\n");
    manifest += &format!("step {}\nseed {}\n", ck.step, ck.seed);
    for (key, opt) in [("opt_g", &ck.opt_g), ("opt_d", &ck.opt_d)] {
        manifest += &format!(
            "{key} {} {} {} {} {}\n",
            opt.t,
            f64_hex(opt.lr),
            f64_hex(opt.beta1),
            f64_hex(opt.beta2),
            f64_hex(opt.eps)
        );
    }
    let mut blob = Vec::new();
    for (name, payload) in &entries {
        let start = blob.len();
        let (dtype, shape) = match payload {
            Payload::F32(t) => {
                for &v in t.data() {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
                ("f32", shape_str(t.shape()))
            }
            Payload::Utf8(s) => {
                blob.extend_from_slice(s.as_bytes());
                ("utf8", "-".to_string())
            }
        };
        let bytes = &blob[start..];
        manifest += &format!(
            "entry {name} {dtype} {shape} {start} {} {:08x}\n",
            bytes.len(),
            crc32fast::hash(bytes)
        );
    }
    manifest += "end\n";
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    out
}

fn f64_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64_hex(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let end = find_manifest_end(bytes).ok_or_else(|| corrupt("manifest terminator not found"))?;
    let manifest =
        std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("manifest is not UTF-8"))?;
    let blob = &bytes[end..];
    let mut lines = manifest.lines();
    let first = lines.next().unwrap_or_default();
    let mut head = first.split_whitespace();
    if head.next() != Some(MAGIC) {
        return Err(corrupt("not a checkpoint file"));
    }
    let version: u32 = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("missing format version"))?;
    if version != VERSION {
        return Err(corrupt(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }

    let mut step = None;
    let mut seed = None;
    let mut opts: BTreeMap<String, (u64, [f64; 4])> = BTreeMap::new();
    let mut config = None;
    let mut sets: BTreeMap<String, ParamSet> = BTreeMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end"] => break,
            ["step", v] => step = v.parse().ok(),
            ["seed", v] => seed = v.parse().ok(),
            [key @ ("opt_g" | "opt_d"), t, rest @ ..] if rest.len() == 4 => {
                let t = t.parse().map_err(|_| corrupt(format!("bad {key} counter")))?;
                let mut h = [0.0; 4];
                for (slot, s) in h.iter_mut().zip(rest) {
                    *slot = parse_f64_hex(s).ok_or_else(|| corrupt(format!("bad {key} setting")))?;
                }
                opts.insert(key.to_string(), (t, h));
            }
            ["entry", name, dtype, shape, offset, nbytes, crc] => {
                let bad = || corrupt(format!("malformed entry line `{line}`"));
                let offset: usize = offset.parse().map_err(|_| bad())?;
                let nbytes: usize = nbytes.parse().map_err(|_| bad())?;
                let crc = u32::from_str_radix(crc, 16).map_err(|_| bad())?;
                let shape = parse_shape(shape).ok_or_else(bad)?;
                let data = blob
                    .get(offset..offset.checked_add(nbytes).ok_or_else(bad)?)
                    .ok_or_else(|| corrupt(format!("file truncated inside `{name}`")))?;
                if crc32fast::hash(data) != crc {
                    return Err(corrupt(format!("checksum mismatch in `{name}`")));
                }
                match *dtype {
                    "utf8" if *name == "config" => {
                        let text = std::str::from_utf8(data).map_err(|_| bad())?;
                        config = Some(Config::from_toml_str(text)?);
                    }
                    "f32" => {
                        let numel: usize = shape.iter().product();
                        if numel * 4 != nbytes {
                            return Err(bad());
                        }
                        let values = data
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                            .collect();
                        let (set, tensor_name) = name.split_once('/').ok_or_else(bad)?;
                        sets.entry(set.to_string())
                            .or_default()
                            .insert(tensor_name, Tensor::new(&shape, values)?);
                    }
                    _ => return Err(bad()),
                }
            }
            _ => return Err(corrupt(format!("unrecognised manifest line `{line}`"))),
        }
    }
    let config = config.ok_or_else(|| corrupt("missing config entry"))?;
    let mut take = |key: &str| sets.remove(key).unwrap_or_default();
    let (generator, discriminator) = (take("g"), take("d"));
    let mut opt = |key: &str, params: &ParamSet| -> Result<Adam> {
        let (t, [lr, b1, b2, eps]) = *opts
            .get(key)
            .ok_or_else(|| corrupt(format!("missing {key} header")))?;
        let m = take(&format!("{key}.m"));
        let v = take(&format!("{key}.v"));
        params.check_compatible(&m)?;
        params.check_compatible(&v)?;
        Ok(Adam { lr, beta1: b1, beta2: b2, eps, t, m, v })
    };
    let opt_g = opt("opt_g", &generator)?;
    let opt_d = opt("opt_d", &discriminator)?;
    Ok(Checkpoint {
        step: step.ok_or_else(|| corrupt("missing step"))?,
        seed: seed.ok_or_else(|| corrupt("missing seed"))?,
        config,
        generator,
        discriminator,
        opt_g,
        opt_d,
    })
}

fn find_manifest_end(bytes: &[u8]) -> Option<usize> {
    const END: &[u8] = b"\nend\n";
    bytes.windows(END.len()).position(|w| w == END).map(|p| p + END.len())
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Checks that the stored generator and discriminator match the shapes that
/// `expected` would create.
pub fn check_against(ck: &Checkpoint, generator: &ParamSet, discriminator: &ParamSet) -> Result<()> {
    generator.check_compatible(&ck.generator)?;
    discriminator.check_compatible(&ck.discriminator)
}
