//! Training state and the MXCK checkpoint format.
//!
//! A checkpoint holds everything a run needs to continue: parameters, Adam
//! moments, RNG stream states, the recent-metrics ring, and the config
//! digest it was produced under. Serialization is exact, so
//! save → load → save reproduces identical bytes.

use super::optimizer::Adam;
use super::trainconfig::TrainConfig;
use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::synthdata::Vocab;
use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsEntry {
    pub step: u64,
    /// seg, re_pair, re_multilabel, ori_pair, ori_multilabel, total
    pub losses: [f32; 6],
}

#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: EncoderParams<Tensor<f32>>,
    pub adam: Adam,
    pub rng_mixing: RngStream,
    pub rng_gumbel: RngStream,
    pub rng_data: RngStream,
    pub metrics: VecDeque<MetricsEntry>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, vocab: &Vocab) -> Self {
        use crate::numerics::rng::labels;
        let seed = cfg.model.seed;
        let mut init = RngStream::new(seed, labels::INIT);
        TrainState {
            step: 0,
            params: EncoderParams::init(&cfg.model, vocab.len(), &mut init),
            adam: Adam::new(),
            rng_mixing: RngStream::new(seed, labels::MIXING),
            rng_gumbel: RngStream::new(seed, labels::GUMBEL),
            rng_data: RngStream::new(seed, labels::DATA),
            metrics: VecDeque::with_capacity(METRICS_CAPACITY),
        }
    }

    pub fn push_metrics(&mut self, entry: MetricsEntry) {
        if self.metrics.len() == METRICS_CAPACITY {
            self.metrics.pop_front();
        }
        self.metrics.push_back(entry);
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        self.params.for_each(&mut |name, t| {
            out.push((format!("param.{name}"), t.clone()));
        });
        for (name, t) in &self.adam.m {
            out.push((format!("adam.m.{name}"), t.clone()));
        }
        for (name, t) in &self.adam.v {
            out.push((format!("adam.v.{name}"), t.clone()));
        }
        out
    }

    pub fn save_to(&self, w: &mut impl Write, config_digest: u64) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&config_digest.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;

        let streams: [(&str, &RngStream); 3] = [
            ("mixing", &self.rng_mixing),
            ("gumbel", &self.rng_gumbel),
            ("data", &self.rng_data),
        ];
        w.write_all(&(streams.len() as u32).to_le_bytes())?;
        for (label, stream) in streams {
            w.write_all(&(label.len() as u32).to_le_bytes())?;
            w.write_all(label.as_bytes())?;
            for word in stream.state() {
                w.write_all(&word.to_le_bytes())?;
            }
        }

        w.write_all(&(self.metrics.len() as u32).to_le_bytes())?;
        for entry in &self.metrics {
            w.write_all(&entry.step.to_le_bytes())?;
            for v in entry.losses {
                w.write_all(&v.to_le_bytes())?;
            }
        }

        let tensors = self.named_tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, config_digest: u64) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_to(&mut f, config_digest)
    }

    pub fn load_from(
        r: &mut impl Read,
        name: &str,
        cfg: &TrainConfig,
        vocab: &Vocab,
    ) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |r: &mut dyn Read, buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf).map_err(|_| {
                Error::format(name, offset, format!("truncated while reading {what}"))
            })?;
            offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        take(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(name, 0, format!("bad magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        take(r, &mut u32b, "version")?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(name, 4, format!("unsupported version {version}")));
        }
        take(r, &mut u64b, "config digest")?;
        let digest = u64::from_le_bytes(u64b);
        if digest != cfg.digest() {
            return Err(Error::format(
                name,
                8,
                format!(
                    "config digest mismatch: checkpoint {digest:#018x}, config {:#018x}",
                    cfg.digest()
                ),
            ));
        }
        take(r, &mut u64b, "step")?;
        let step = u64::from_le_bytes(u64b);

        take(r, &mut u32b, "rng stream count")?;
        let nstreams = u32::from_le_bytes(u32b) as usize;
        let mut streams: BTreeMap<String, [u64; 4]> = BTreeMap::new();
        for _ in 0..nstreams {
            take(r, &mut u32b, "rng label length")?;
            let len = u32::from_le_bytes(u32b) as usize;
            let mut label = vec![0u8; len];
            take(r, &mut label, "rng label")?;
            let label = String::from_utf8_lossy(&label).into_owned();
            let mut state = [0u64; 4];
            for word in state.iter_mut() {
                take(r, &mut u64b, "rng state")?;
                *word = u64::from_le_bytes(u64b);
            }
            streams.insert(label, state);
        }
        let stream = |key: &str| -> Result<RngStream> {
            streams
                .get(key)
                .map(|s| RngStream::from_state(*s))
                .ok_or_else(|| Error::format(name, 0, format!("missing rng stream {key:?}")))
        };

        take(r, &mut u32b, "metrics count")?;
        let nmetrics = u32::from_le_bytes(u32b) as usize;
        let mut metrics = VecDeque::with_capacity(nmetrics.min(METRICS_CAPACITY));
        let mut f32b = [0u8; 4];
        for _ in 0..nmetrics {
            take(r, &mut u64b, "metrics step")?;
            let mstep = u64::from_le_bytes(u64b);
            let mut losses = [0f32; 6];
            for v in losses.iter_mut() {
                take(r, &mut f32b, "metrics value")?;
                *v = f32::from_le_bytes(f32b);
            }
            metrics.push_back(MetricsEntry { step: mstep, losses });
        }

        take(r, &mut u32b, "tensor count")?;
        let ntensors = u32::from_le_bytes(u32b) as usize;
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..ntensors {
            take(r, &mut u32b, "tensor name length")?;
            let len = u32::from_le_bytes(u32b) as usize;
            let mut tname = vec![0u8; len];
            take(r, &mut tname, "tensor name")?;
            let tname = String::from_utf8_lossy(&tname).into_owned();
            take(r, &mut u32b, "tensor rank")?;
            let rank = u32::from_le_bytes(u32b) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                take(r, &mut u32b, "tensor dim")?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0f32; numel];
            let mut payload = vec![0u8; numel * 4];
            take(r, &mut payload, &format!("tensor {tname} payload"))?;
            for (v, c) in data.iter_mut().zip(payload.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            tensors.insert(tname, Tensor::new(shape, data)?);
        }

        // Rebuild parameters by name; every expected tensor must be present
        // with the right shape.
        let mut params = EncoderParams::<Tensor<f32>>::init(
            &cfg.model,
            vocab.len(),
            &mut RngStream::new(cfg.model.seed, "load-scratch"),
        );
        let mut missing = Vec::new();
        params.for_each_mut(&mut |pname, t| {
            match tensors.remove(&format!("param.{pname}")) {
                Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
                Some(loaded) => missing.push(format!(
                    "param.{pname}: shape {:?} vs expected {:?}",
                    loaded.shape(),
                    t.shape()
                )),
                None => missing.push(format!("param.{pname}: missing")),
            }
        });
        if !missing.is_empty() {
            return Err(Error::format(name, 0, format!("checkpoint incomplete: {}", missing.join("; "))));
        }
        let mut adam = Adam::new();
        for (tname, t) in tensors {
            if let Some(rest) = tname.strip_prefix("adam.m.") {
                adam.m.insert(rest.to_string(), t);
            } else if let Some(rest) = tname.strip_prefix("adam.v.") {
                adam.v.insert(rest.to_string(), t);
            } else {
                return Err(Error::format(name, 0, format!("unexpected tensor {tname:?}")));
            }
        }

        Ok(TrainState {
            step,
            params,
            adam,
            rng_mixing: stream("mixing")?,
            rng_gumbel: stream("gumbel")?,
            rng_data: stream("data")?,
            metrics,
        })
    }

    pub fn load(path: &Path, cfg: &TrainConfig, vocab: &Vocab) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load_from(&mut f, &path.display().to_string(), cfg, vocab)
    }
}

/// Exact checkpoint byte size implied by the format.
pub fn expected_checkpoint_size(state: &TrainState) -> usize {
    let mut size = 4 + 4 + 8 + 8; // magic, version, digest, step
    size += 4;
    for label in ["mixing", "gumbel", "data"] {
        size += 4 + label.len() + 32;
    }
    size += 4 + state.metrics.len() * (8 + 24);
    size += 4;
    state.params.for_each(&mut |name, t| {
        size += 4 + "param.".len() + name.len() + 4 + 4 * t.rank() + 4 * t.numel();
    });
    for (name, t) in &state.adam.m {
        size += 4 + "adam.m.".len() + name.len() + 4 + 4 * t.rank() + 4 * t.numel();
    }
    for (name, t) in &state.adam.v {
        size += 4 + "adam.v.".len() + name.len() + 4 + 4 * t.rank() + 4 * t.numel();
    }
    size
}
