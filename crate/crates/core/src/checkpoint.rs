//! Versioned binary checkpoint.
//!
//! Layout, all integers u64 and floats f64, little-endian:
//! magic `STADCKPT`, version, config echo (length + UTF-8), model sizes,
//! parameter seed, iteration, named parameters (name, shape, data), Adam
//! hyper-parameters, step and moments, the progressive color state, and
//! the batch sampler's stream position (u128 as low then high word).

use std::fs;
use std::path::Path;

use crate::color::ProgressiveState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OcclusionNetConfig, ParamSet, StereoNetConfig};
use crate::tensor::{Adam, AdamConfig, Tensor4};

const MAGIC: &[u8; 8] = b"STADCKPT";
const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Training configuration as `key = value` text.
    pub config_echo: String,
    pub model: ModelConfig,
    pub params: ParamSet,
    pub adam: Adam,
    pub color: ProgressiveState,
    pub iteration: u64,
    /// Word position of the batch sampler, so a resumed run draws the same batches.
    pub sampler_pos: u128,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, t: &Tensor4) {
        t.shape().iter().for_each(|&s| self.u64(s as u64));
        t.data().iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::invalid("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::invalid("checkpoint size field overflows"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::invalid("checkpoint string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor4> {
        let shape = [self.usize()?, self.usize()?, self.usize()?, self.usize()?];
        let len = shape
            .iter()
            .try_fold(1usize, |a, &s| a.checked_mul(s))
            .filter(|&l| l <= self.buf.len() / 8)
            .ok_or_else(|| Error::invalid("checkpoint tensor shape is implausible"))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor4::from_vec(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u64(VERSION);
        w.bytes(self.config_echo.as_bytes());

        let s = &self.model.stereo;
        let o = &self.model.occlusion;
        for v in [s.feature_channels, s.feature_layers, s.max_disp, s.regularizer_layers] {
            w.u64(v as u64);
        }
        w.u64(s.cost_norm as u64);
        w.u64(o.hidden_channels as u64);
        w.u64(o.layers as u64);
        w.u64(self.params.seed);
        w.u64(self.iteration);

        w.u64(self.params.names().len() as u64);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }

        let AdamConfig { lr, beta1, beta2, eps } = self.adam.config;
        [lr, beta1, beta2, eps].iter().for_each(|&v| w.f64(v));
        w.u64(self.adam.step_count());
        w.u64(self.adam.first_moments().len() as u64);
        for t in self.adam.first_moments().iter().chain(self.adam.second_moments()) {
            w.tensor(t);
        }

        let c = &self.color;
        c.mu_t.iter().chain(&c.sigma_t).for_each(|&v| w.f64(v));
        w.f64(c.gamma);
        w.u64(c.update_count);
        w.u64(self.sampler_pos as u64);
        w.u64((self.sampler_pos >> 64) as u64);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::invalid("not a checkpoint file"));
        }
        let version = r.u64()?;
        if version != VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let config_echo = r.string()?;
        let stereo = StereoNetConfig {
            feature_channels: r.usize()?,
            feature_layers: r.usize()?,
            max_disp: r.usize()?,
            regularizer_layers: r.usize()?,
            cost_norm: r.u64()? != 0,
        };
        let occlusion = OcclusionNetConfig {
            hidden_channels: r.usize()?,
            layers: r.usize()?,
        };
        let model = ModelConfig { stereo, occlusion };
        model.validate()?;
        let seed = r.u64()?;
        let iteration = r.u64()?;

        let n = r.usize()?;
        let mut named = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            named.push((r.string()?, r.tensor()?));
        }
        let params = ParamSet::from_named(&model, seed, named)?;

        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let k = r.usize()?;
        let m = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..k).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let adam = Adam::from_parts(config, step, m, v)?;

        let mut stats = [0.0; 6];
        for s in &mut stats {
            *s = r.f64()?;
        }
        let color = ProgressiveState {
            mu_t: [stats[0], stats[1], stats[2]],
            sigma_t: [stats[3], stats[4], stats[5]],
            gamma: r.f64()?,
            update_count: r.u64()?,
        };
        let lo = r.u64()? as u128;
        let sampler_pos = lo | (r.u64()? as u128) << 64;
        if r.pos != buf.len() {
            return Err(Error::invalid("trailing bytes after checkpoint"));
        }
        Ok(Self {
            config_echo,
            model,
            params,
            adam,
            color,
            iteration,
            sampler_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::format(path, e.to_string()))
    }
}
