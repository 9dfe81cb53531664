//! Binary network files: magic, version, layer specs, little-endian `f32`
//! weights and biases, trailing CRC-32 of everything before it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{LayerKind, LayerParams, LayerSpec, Network, NetworkSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGNET\0";
const VERSION: u32 = 1;

/// Largest layer dimension accepted when reading, to reject garbage before
/// allocating.
const MAX_DIM: u32 = 1 << 16;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(format!("network block: {e}"))
}

/// Writes the layer block (specs then parameters) without framing.
pub fn write_network(out: &mut impl Write, net: &Network<f32>) -> Result<()> {
    let put = |out: &mut dyn Write, v: usize| out.write_u32::<LittleEndian>(v as u32);
    put(out, net.input_channels).map_err(io_err)?;
    put(out, net.labels).map_err(io_err)?;
    put(out, net.layers.len()).map_err(io_err)?;
    for l in &net.layers {
        let s = &l.spec;
        out.write_u8(match s.kind {
            LayerKind::Conv => 0,
            LayerKind::TransposeConv => 1,
        })
        .map_err(io_err)?;
        for v in [s.kernel, s.in_channels, s.out_channels, s.stride, s.dilation, s.padding] {
            put(out, v).map_err(io_err)?;
        }
        out.write_u8(s.relu as u8).map_err(io_err)?;
    }
    for l in &net.layers {
        for v in l.weight.iter().chain(&l.bias) {
            out.write_f32::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Reads a block written by [`write_network`].
pub fn read_network(input: &mut impl Read) -> Result<Network<f32>> {
    let get = |input: &mut dyn Read| -> Result<usize> {
        let v = input.read_u32::<LittleEndian>().map_err(io_err)?;
        if v > MAX_DIM {
            return Err(Error::Format(format!("implausible network dimension {v}")));
        }
        Ok(v as usize)
    };
    let input_channels = get(input)?;
    let labels = get(input)?;
    let count = get(input)?;
    let mut specs = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let kind = match input.read_u8().map_err(io_err)? {
            0 => LayerKind::Conv,
            1 => LayerKind::TransposeConv,
            k => return Err(Error::Format(format!("unknown layer kind {k}"))),
        };
        let mut d = [0usize; 6];
        for v in &mut d {
            *v = get(input)?;
        }
        let relu = input.read_u8().map_err(io_err)? != 0;
        specs.push(LayerSpec {
            kind,
            kernel: d[0],
            in_channels: d[1],
            out_channels: d[2],
            stride: d[3],
            dilation: d[4],
            padding: d[5],
            relu,
        });
    }
    let spec = NetworkSpec {
        input_channels,
        labels,
        layers: specs,
    };
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for s in &spec.layers {
        let mut read = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0f32; n];
            input.read_f32_into::<LittleEndian>(&mut v).map_err(io_err)?;
            Ok(v)
        };
        let weight = read(s.weight_len())?;
        let bias = read(s.out_channels)?;
        layers.push(LayerParams { spec: *s, weight, bias });
    }
    Ok(Network {
        input_channels,
        labels,
        layers,
    })
}

/// Appends the CRC-32 of `body` and writes the file.
pub(crate) fn write_framed(path: &Path, mut body: Vec<u8>) -> Result<()> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads a file, verifies its trailing CRC-32 and magic, and returns the
/// bytes between magic and CRC.
pub(crate) fn read_framed(path: &Path, magic: &[u8], version: u32) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < magic.len() + 8 {
        return Err(Error::parse(path, "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::parse(path, "checksum mismatch"));
    }
    if &body[..magic.len()] != magic {
        return Err(Error::parse(path, "bad magic"));
    }
    let mut rest = &body[magic.len()..];
    let v = rest
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    if v != version {
        return Err(Error::parse(path, format!("unsupported version {v}")));
    }
    Ok(rest.to_vec())
}

pub fn save_network(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut body = MAGIC.to_vec();
    body.extend_from_slice(&VERSION.to_le_bytes());
    write_network(&mut body, net)?;
    write_framed(path.as_ref(), body)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let body = read_framed(path, MAGIC, VERSION)?;
    let mut cursor = body.as_slice();
    let net = read_network(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::parse(path, "trailing bytes after network block"));
    }
    Ok(net)
}

/// Loads a network for `input_channels` inputs and `labels` outputs. A
/// first layer trained on a different number of input channels is adapted
/// by averaging its kernels over the source channels and replicating the
/// average into every target channel.
pub fn import_weights(path: impl AsRef<Path>, input_channels: usize, labels: usize) -> Result<Network<f32>> {
    let mut net = load_network(path)?;
    if net.labels != labels {
        return Err(Error::ShapeMismatch(format!(
            "imported network has {} labels, expected {labels}",
            net.labels
        )));
    }
    if net.input_channels == input_channels {
        return Ok(net);
    }
    let first = &mut net.layers[0];
    if first.spec.kind != LayerKind::Conv {
        return Err(Error::ShapeMismatch(
            "first layer must be a convolution to adapt its inputs".into(),
        ));
    }
    let (k, cin, cout) = (first.spec.kernel, first.spec.in_channels, first.spec.out_channels);
    let mut weight = vec![0f32; k * k * input_channels * cout];
    for tap in 0..k * k {
        for o in 0..cout {
            let sum: f64 = (0..cin).map(|c| first.weight[(tap * cin + c) * cout + o] as f64).sum();
            let mean = (sum / cin as f64) as f32;
            for c in 0..input_channels {
                weight[(tap * input_channels + c) * cout + o] = mean;
            }
        }
    }
    first.weight = weight;
    first.spec.in_channels = input_channels;
    net.input_channels = input_channels;
    net.spec().validate()?;
    Ok(net)
}
