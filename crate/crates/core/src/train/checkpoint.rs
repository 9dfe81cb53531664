//! Training checkpoints: network, CRF weights, momentum buffers, progress
//! counters and RNG position, framed by magic, version and CRC-32.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::net::checkpoint::{read_framed, write_framed};
use crate::net::{read_network, write_network, Network};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub net_velocity: Network<f32>,
    pub crf: CrfParams,
    /// Momentum of the CRF weights; entries may be negative.
    pub crf_velocity: CrfParams,
    pub epoch: u32,
    pub step: u64,
    pub rng: RngState,
}

fn write_crf(out: &mut Vec<u8>, crf: &CrfParams) {
    out.write_u32::<LittleEndian>(crf.labels as u32).unwrap();
    for v in crf.flat() {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
}

fn read_crf(input: &mut &[u8]) -> std::io::Result<CrfParams> {
    let labels = input.read_u32::<LittleEndian>()? as usize;
    if labels > 4096 {
        return Err(std::io::Error::other("implausible label count"));
    }
    let mut crf = CrfParams::zeros(labels);
    for v in crf.flat_mut() {
        *v = input.read_f64::<LittleEndian>()?;
    }
    Ok(crf)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = MAGIC.to_vec();
        body.extend_from_slice(&VERSION.to_le_bytes());
        write_network(&mut body, &self.network)?;
        write_network(&mut body, &self.net_velocity)?;
        write_crf(&mut body, &self.crf);
        write_crf(&mut body, &self.crf_velocity);
        body.write_u32::<LittleEndian>(self.epoch).unwrap();
        body.write_u64::<LittleEndian>(self.step).unwrap();
        body.extend_from_slice(&self.rng.seed);
        body.write_u64::<LittleEndian>(self.rng.stream).unwrap();
        body.write_u128::<LittleEndian>(self.rng.word_pos).unwrap();
        Ok(body)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_framed(path.as_ref(), self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let body = read_framed(path, MAGIC, VERSION)?;
        let mut r = body.as_slice();
        let bad = |e: std::io::Error| Error::parse(path, e.to_string());
        let network = read_network(&mut r)?;
        let net_velocity = read_network(&mut r)?;
        if net_velocity.spec() != network.spec() {
            return Err(Error::parse(path, "momentum buffer layout differs from the network"));
        }
        let crf = read_crf(&mut r).map_err(bad)?;
        let crf_velocity = read_crf(&mut r).map_err(bad)?;
        if crf.labels != network.labels || crf_velocity.labels != crf.labels {
            return Err(Error::parse(path, "CRF label count differs from the network"));
        }
        crf.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        let epoch = r.read_u32::<LittleEndian>().map_err(bad)?;
        let step = r.read_u64::<LittleEndian>().map_err(bad)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(bad)?;
        let stream = r.read_u64::<LittleEndian>().map_err(bad)?;
        let word_pos = r.read_u128::<LittleEndian>().map_err(bad)?;
        if !r.is_empty() {
            return Err(Error::parse(path, "trailing bytes"));
        }
        Ok(Checkpoint {
            network,
            net_velocity,
            crf,
            crf_velocity,
            epoch,
            step,
            rng: RngState { seed, stream, word_pos },
        })
    }
}
