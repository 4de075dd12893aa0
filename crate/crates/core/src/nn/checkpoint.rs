//! Versioned binary checkpoints.
//!
//! Layout: a text header (`cdcml-ckpt v1`, one `network <name> <layers>`
//! line followed by its layer specs per network, then one
//! `tensor <name> <dims...>` line per stored tensor), a `data` line, and
//! finally every tensor's values as little-endian `f64` in header order.

use std::fmt::Write as _;
use std::path::Path;

use super::layer::LayerSpec;
use super::model::{ModelParams, NETWORK_NAMES};
use super::network::Network;
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::scalar::Scalar;

const MAGIC: &str = "cdcml-ckpt";
const VERSION: &str = "v1";

/// Serializes every parameter, running statistic and layer spec.
pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    let nets = params.networks();
    for (name, net) in &nets {
        let specs = net.specs();
        let _ = writeln!(header, "network {name} {}", specs.len());
        for s in specs {
            let _ = writeln!(header, "{s}");
        }
    }
    let mut data = Vec::new();
    for (name, net) in &nets {
        for (tname, shape, values) in net.tensors() {
            let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
            let _ = writeln!(header, "tensor {name}.{tname} {}", dims.join(" "));
            for v in values {
                data.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&data);
    out
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

struct Parsed {
    networks: Vec<(String, Vec<LayerSpec>)>,
    tensors: Vec<(String, Vec<usize>)>,
    data: Vec<f64>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let bad = |m: String| Error::Checkpoint(m);
    let first_line_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let magic_line = std::str::from_utf8(&bytes[..first_line_end]).unwrap_or("");
    match magic_line.split_once(' ') {
        Some((MAGIC, VERSION)) => {}
        Some((MAGIC, other)) => return Err(bad(format!("unsupported checkpoint version `{other}`"))),
        _ => return Err(bad("missing `cdcml-ckpt` magic header".into())),
    }
    let marker = b"\ndata\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("truncated: no data section".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| bad("header is not UTF-8".into()))?;
    let body = &bytes[split + marker.len()..];

    let mut networks: Vec<(String, Vec<LayerSpec>)> = Vec::new();
    let mut tensors = Vec::new();
    let mut lines = header.lines().skip(1);
    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("network") => {
                let name = parts.next().ok_or_else(|| bad(format!("bad line `{line}`")))?;
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad(format!("bad line `{line}`")))?;
                let specs = (0..count)
                    .map(|_| {
                        lines
                            .next()
                            .ok_or_else(|| bad(format!("truncated layer table for `{name}`")))?
                            .parse()
                    })
                    .collect::<Result<Vec<LayerSpec>>>()?;
                networks.push((name.to_string(), specs));
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad(format!("bad line `{line}`")))?;
                let dims = parts
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dims in `{line}`"))))
                    .collect::<Result<Vec<usize>>>()?;
                tensors.push((name.to_string(), dims));
            }
            _ => return Err(bad(format!("unexpected header line `{line}`"))),
        }
    }
    let expected: usize = tensors.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if body.len() != expected * 8 {
        return Err(bad(format!(
            "truncated: expected {} bytes of tensor data, found {}",
            expected * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Parsed {
        networks,
        tensors,
        data,
    })
}

/// Copies the parsed tensors into `target`, which must have exactly the
/// stored layout.
fn fill<T: Scalar>(parsed: &Parsed, target: &mut ModelParams<T>) -> Result<()> {
    let mut declared = parsed.tensors.iter();
    let mut offset = 0;
    for (name, net) in target.networks_mut() {
        for (tname, shape, slot) in net.tensors_mut() {
            let full = format!("{name}.{tname}");
            let (dname, dims) = declared
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{full}` missing")))?;
            if *dname != full {
                return Err(Error::Checkpoint(format!("expected tensor `{full}`, found `{dname}`")));
            }
            if *dims != shape {
                return Err(Error::ShapeMismatch {
                    tensor: full,
                    expected: shape,
                    actual: dims.clone(),
                });
            }
            for (dst, &src) in slot.iter_mut().zip(&parsed.data[offset..offset + dims.iter().product::<usize>()]) {
                *dst = T::of(src);
            }
            offset += dims.iter().product::<usize>();
        }
    }
    if let Some((extra, _)) = declared.next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let parsed = parse(bytes)?;
    let mut nets: Vec<Option<Network<T>>> = vec![None, None, None, None, None];
    for (name, specs) in &parsed.networks {
        let slot = NETWORK_NAMES
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown network `{name}`")))?;
        nets[slot] = Some(Network::new(specs, 0).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    let mut take = |i: usize| {
        nets[i]
            .take()
            .ok_or_else(|| Error::Checkpoint(format!("network `{}` missing", NETWORK_NAMES[i])))
    };
    let mut params = ModelParams::from_networks(take(0)?, take(1)?, take(2)?, take(3)?, take(4).ok())?;
    fill(&parsed, &mut params)?;
    Ok(params)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}

/// Loads stored parameters into an existing model of the same layout,
/// reporting the first tensor whose shape disagrees.
pub fn load_checkpoint_into<T: Scalar>(path: &Path, target: &mut ModelParams<T>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let parsed = parse(&bytes)?;
    fill(&parsed, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Modality;
    use crate::nn::{ArchConfig, Mode};
    use ndarray::Array;

    fn arch() -> ArchConfig {
        ArchConfig {
            embed_dim: 4,
            branch_hidden: vec![5],
            sim_hidden: vec![3, 3],
            va_hidden: vec![3, 2],
            dropout: 0.5,
            per_modality_va: false,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ModelParams::<f64>::new(3, 2, &arch(), 1).unwrap();
        // move the running statistics off their initial values
        let x = Array::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.37 - 1.0);
        m.image_branch.forward(x.view(), Mode::Train, 0).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back: ModelParams<f64> = load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in m.networks().iter().zip(back.networks()) {
            assert_eq!(a.specs(), b.specs());
            assert_eq!(a.tensors(), b.tensors());
        }
        assert_eq!(
            m.predict_va(Modality::Image, x.view()).unwrap(),
            back.predict_va(Modality::Image, x.view()).unwrap()
        );
    }

    #[test]
    fn corrupt_magic_and_version() {
        let m = ModelParams::<f64>::new(3, 2, &arch(), 1).unwrap();
        let mut bytes = encode_checkpoint(&m);
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Checkpoint(_))));
        let text = String::from_utf8_lossy(&encode_checkpoint(&m)[..20]).replace("v1", "v9");
        let mut v9 = encode_checkpoint(&m);
        v9[..20].copy_from_slice(text.as_bytes());
        match decode_checkpoint::<f64>(&v9) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = ModelParams::<f64>::new(3, 2, &arch(), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        match decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_dims_name_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ModelParams::<f64>::new(3, 2, &arch(), 1).unwrap(), &path).unwrap();
        let mut other = ModelParams::<f64>::new(7, 2, &arch(), 1).unwrap();
        match load_checkpoint_into(&path, &mut other) {
            Err(Error::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "image_branch.0.weight"),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn single_precision_models_round_trip() {
        let m = ModelParams::<f32>::new(3, 2, &arch(), 4).unwrap();
        let back: ModelParams<f32> = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(m, back);
    }
}
