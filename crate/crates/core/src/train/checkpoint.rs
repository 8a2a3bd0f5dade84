//! Flat binary checkpoints.
//!
//! Layout: magic `DFN1`, then the section tag `PARM` with a u32 array count
//! and the arrays, then `VELO` with the velocity arrays. Each array is a u32
//! name length, the name bytes, a dtype tag (1 = f32, 2 = f64), a u8 rank,
//! rank u64 extents and the raw little-endian values. All integers are
//! little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusenet::FusedNet;
use crate::tensor::{LayerGrads, LayerKind, LayerParams, Scalar};

const MAGIC: &[u8; 4] = b"DFN1";
const PARAMS: &[u8; 4] = b"PARM";
const VELOCITY: &[u8; 4] = b"VELO";

/// One stored array, values widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointArray {
    pub name: String,
    pub dtype: u8,
    pub extents: Vec<u64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<CheckpointArray>,
    pub velocity: Vec<CheckpointArray>,
}

fn weight_extents<T>(p: &LayerParams<T>) -> Vec<u64> {
    let (o, i) = (p.out_channels as u64, p.in_channels as u64);
    match p.kind {
        LayerKind::Conv3x3 => vec![o, i, 3, 3],
        LayerKind::Conv1x1 => vec![o, i, 1, 1],
        _ => vec![o, i],
    }
}

/// (suffix, extents, values) of every array a layer stores.
fn param_arrays<T: Scalar>(p: &LayerParams<T>) -> Vec<(&'static str, Vec<u64>, &[T])> {
    let mut out = Vec::new();
    if !p.weights.is_empty() {
        out.push(("weight", weight_extents(p), &p.weights[..]));
    }
    for (name, v) in [
        ("bias", &p.bias),
        ("gamma", &p.bn_gamma),
        ("beta", &p.bn_beta),
        ("running_mean", &p.bn_running_mean),
        ("running_var", &p.bn_running_var),
    ] {
        if !v.is_empty() {
            out.push((name, vec![v.len() as u64], &v[..]));
        }
    }
    out
}

fn velocity_arrays<'a, T: Scalar>(
    p: &LayerParams<T>,
    v: &'a LayerGrads<T>,
) -> Vec<(&'static str, Vec<u64>, &'a [T])> {
    let mut out = Vec::new();
    if !v.weights.is_empty() {
        out.push(("weight", weight_extents(p), &v.weights[..]));
    }
    for (name, a) in [("bias", &v.bias), ("gamma", &v.bn_gamma), ("beta", &v.bn_beta)] {
        if !a.is_empty() {
            out.push((name, vec![a.len() as u64], &a[..]));
        }
    }
    out
}

fn write_array<T: Scalar>(out: &mut Vec<u8>, name: &str, extents: &[u64], values: &[T]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(T::DTYPE_TAG);
    out.push(extents.len() as u8);
    for e in extents {
        out.extend(e.to_le_bytes());
    }
    out.extend(T::to_le_bytes_vec(values));
}

/// Serialize parameters, running statistics and (optionally) velocity.
pub fn encode_checkpoint<T: Scalar>(net: &FusedNet<T>, velocity: Option<&[LayerGrads<T>]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    let section = |tag: &[u8; 4], arrays: Vec<(String, Vec<u64>, &[T])>, out: &mut Vec<u8>| {
        out.extend(tag);
        out.extend((arrays.len() as u32).to_le_bytes());
        for (name, extents, values) in arrays {
            write_array(out, &name, &extents, values);
        }
    };
    let params = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(id, p)| {
            param_arrays(p)
                .into_iter()
                .map(move |(s, e, v)| (format!("{}.{s}", net.layer_name(id)), e, v))
        })
        .collect();
    section(PARAMS, params, &mut out);
    let vel = velocity
        .map(|vs| {
            net.layers()
                .iter()
                .zip(vs)
                .enumerate()
                .flat_map(|(id, (p, v))| {
                    velocity_arrays(p, v)
                        .into_iter()
                        .map(move |(s, e, a)| (format!("{}.{s}", net.layer_name(id)), e, a))
                })
                .collect()
        })
        .unwrap_or_default();
    section(VELOCITY, vel, &mut out);
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, net: &FusedNet<T>, velocity: Option<&[LayerGrads<T>]>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, velocity)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tag(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "section tag")?;
        if got != expected {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "expected tag {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    fn array(&mut self) -> Result<CheckpointArray> {
        let len = self.u32("name length")? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                message: "array name is not UTF-8".into(),
            })?
            .to_string();
        let at = self.pos;
        let dtype = self.take(1, "dtype")?[0];
        let width = match dtype {
            1 => 4,
            2 => 8,
            other => {
                return Err(Error::Format {
                    offset: at,
                    message: format!("unknown dtype tag {other} for {name}"),
                })
            }
        };
        let rank = self.take(1, "rank")?[0] as usize;
        let extents = (0..rank).map(|_| self.u64("extent")).collect::<Result<Vec<_>>>()?;
        let count = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e as usize));
        let count = count.filter(|c| c.checked_mul(width).is_some()).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("extents {extents:?} of {name} overflow"),
        })?;
        let raw = self.take(count * width, &format!("values of {name}"))?;
        let values = if width == 4 {
            raw.chunks_exact(4).map(|c| f32::from_le_chunk(c) as f64).collect()
        } else {
            raw.chunks_exact(8).map(f64::from_le_chunk).collect()
        };
        Ok(CheckpointArray { name, dtype, extents, values })
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Vec<CheckpointArray>> {
        self.tag(tag)?;
        let n = self.u32("array count")?;
        (0..n).map(|_| self.array()).collect()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    r.tag(MAGIC)?;
    let params = r.section(PARAMS)?;
    let velocity = r.section(VELOCITY)?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint { params, velocity })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn fill<T: Scalar>(
    arrays: &std::collections::HashMap<&str, &CheckpointArray>,
    name: &str,
    extents: &[u64],
    dst: &mut [T],
) -> Result<()> {
    let a = arrays.get(name).ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no array {name}")))?;
    if a.dtype != T::DTYPE_TAG {
        return Err(Error::InvalidArgument(format!(
            "{name}: checkpoint dtype tag {} but the net uses {}",
            a.dtype,
            T::DTYPE_TAG
        )));
    }
    if a.extents != extents {
        return Err(Error::Shape(format!(
            "{name}: checkpoint extents {:?}, net expects {extents:?}",
            a.extents
        )));
    }
    for (d, &v) in dst.iter_mut().zip(&a.values) {
        *d = T::from_f64(v);
    }
    Ok(())
}

/// Restore parameters into `net` (same spec and options) and return the
/// stored velocity, if any.
pub fn load_checkpoint<T: Scalar>(path: &Path, net: &mut FusedNet<T>) -> Result<Option<Vec<LayerGrads<T>>>> {
    let ck = read_checkpoint(path)?;
    apply_checkpoint(&ck, net)
}

pub fn apply_checkpoint<T: Scalar>(ck: &Checkpoint, net: &mut FusedNet<T>) -> Result<Option<Vec<LayerGrads<T>>>> {
    let params: std::collections::HashMap<&str, &CheckpointArray> =
        ck.params.iter().map(|a| (a.name.as_str(), a)).collect();
    let names = net.layer_names().to_vec();
    let expected: usize = net.layers().iter().map(|p| param_arrays(p).len()).sum();
    if expected != ck.params.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds {} parameter arrays, the net has {expected}",
            ck.params.len()
        )));
    }
    for (p, name) in net.layers_mut().iter_mut().zip(&names) {
        let we = weight_extents(p);
        if !p.weights.is_empty() {
            fill(&params, &format!("{name}.weight"), &we, &mut p.weights)?;
        }
        for (suffix, v) in [
            ("bias", &mut p.bias),
            ("gamma", &mut p.bn_gamma),
            ("beta", &mut p.bn_beta),
            ("running_mean", &mut p.bn_running_mean),
            ("running_var", &mut p.bn_running_var),
        ] {
            if !v.is_empty() {
                let e = [v.len() as u64];
                fill(&params, &format!("{name}.{suffix}"), &e, v)?;
            }
        }
    }
    net.clear_retained();
    if ck.velocity.is_empty() {
        return Ok(None);
    }
    let vel: std::collections::HashMap<&str, &CheckpointArray> =
        ck.velocity.iter().map(|a| (a.name.as_str(), a)).collect();
    let mut out = Vec::with_capacity(names.len());
    for (p, name) in net.layers().iter().zip(&names) {
        let mut v = LayerGrads::zeros_like(p);
        let we = weight_extents(p);
        if !v.weights.is_empty() {
            fill(&vel, &format!("{name}.weight"), &we, &mut v.weights)?;
        }
        for (suffix, a) in [("bias", &mut v.bias), ("gamma", &mut v.bn_gamma), ("beta", &mut v.bn_beta)] {
            if !a.is_empty() {
                let e = [a.len() as u64];
                fill(&vel, &format!("{name}.{suffix}"), &e, a)?;
            }
        }
        out.push(v);
    }
    Ok(Some(out))
}
