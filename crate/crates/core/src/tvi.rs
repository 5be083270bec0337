//! Temporal-viewpoint indicator tokens.
//!
//! Each frame's visual tokens are preceded by one indicator built from a
//! shared base embedding plus optional time and viewpoint terms:
//!
//! | mode       | indicator                                        |
//! |------------|--------------------------------------------------|
//! | navigation | `base + time_proj(time_pe(t)) + angle_proj(angle_pe(phi))` |
//! | video QA   | `base + time_proj(time_pe(t))`                   |
//! | image QA   | `base`                                           |

use std::f64::consts::TAU;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::TaskMode;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_PE_DIM: usize = 64;
pub const FREQUENCY_BASE: f64 = 10_000.0;

const MAGIC: &[u8; 4] = b"TVIP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TviError {
    #[error("encoding dimension {0} must be even")]
    OddDimension(usize),
    #[error("angle encoding dimension {0} must be a positive multiple of 4")]
    BadDimension(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{mode:?} indicator needs {what}")]
    MissingArgument { mode: TaskMode, what: &'static str },
    #[error("{mode:?} indicator does not take {what}")]
    UnexpectedArgument { mode: TaskMode, what: &'static str },
    #[error("parameter file mismatch: {0}")]
    VersionMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Standard interleaved sinusoidal encoding of a real position.
fn sinusoid(x: f64, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = FREQUENCY_BASE.powf(-(2.0 * i as f64) / dim as f64);
        out.push((x * freq).sin() as f32);
        out.push((x * freq).cos() as f32);
    }
    out
}

pub fn time_pe(t: u32, dim: usize) -> Result<Vec<f32>, TviError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TviError::OddDimension(dim));
    }
    Ok(sinusoid(t as f64, dim))
}

/// Sinusoidal encodings of `cos(phi)` and `sin(phi)`, concatenated.
pub fn angle_pe(phi: f64, dim: usize) -> Result<Vec<f32>, TviError> {
    if dim == 0 || dim % 4 != 0 {
        return Err(TviError::BadDimension(dim));
    }
    let phi = phi.rem_euclid(TAU);
    let mut out = sinusoid(phi.cos(), dim / 2);
    out.extend(sinusoid(phi.sin(), dim / 2));
    Ok(out)
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// tanh approximation.
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Self::Gelu => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Self::Identity => x,
        }
    }
}

/// Two affine layers with an activation in between. Weights are row-major
/// `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub activation: Activation,
}

impl Projector {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
            activation: Activation::Gelu,
        }
    }

    /// Copies the input into the output, zero-padding or truncating, when
    /// paired with [`Activation::Identity`].
    pub fn identity(input: usize, output: usize) -> Self {
        let hidden = input;
        let mut p = Self::zeros(input, hidden, output);
        for i in 0..input {
            p.w1[i * input + i] = 1.0;
        }
        for o in 0..output.min(hidden) {
            p.w2[o * hidden + o] = 1.0;
        }
        p.activation = Activation::Identity;
        p
    }

    fn random(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let a1 = (6.0 / (input + hidden) as f32).sqrt();
        let a2 = (6.0 / (hidden + output) as f32).sqrt();
        let mut draw = |n: usize, a: f32| (0..n).map(|_| rng.gen_range(-a..a)).collect::<Vec<f32>>();
        let w1 = draw(hidden * input, a1);
        let b1 = draw(hidden, 0.01);
        let w2 = draw(output * hidden, a2);
        let b2 = draw(output, 0.01);
        Self { input, hidden, output, w1, b1, w2, b2, activation: Activation::Gelu }
    }

    fn check(&self) -> Result<(), TviError> {
        let shapes = [
            (self.w1.len(), self.hidden * self.input),
            (self.b1.len(), self.hidden),
            (self.w2.len(), self.output * self.hidden),
            (self.b2.len(), self.output),
        ];
        for (got, expected) in shapes {
            if got != expected {
                return Err(TviError::ShapeMismatch { expected, got });
            }
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(TviError::InvalidParams("non-finite projector weight".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>, TviError> {
        if x.len() != self.input {
            return Err(TviError::ShapeMismatch { expected: self.input, got: x.len() });
        }
        let h: Vec<f32> = self
            .w1
            .chunks_exact(self.input)
            .zip(&self.b1)
            .map(|(row, b)| self.activation.apply(dot(row, x) + b))
            .collect();
        Ok(self.w2.chunks_exact(self.hidden).zip(&self.b2).map(|(row, b)| dot(row, &h) + b).collect())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn projector_forward(weights: &Projector, x: &[f32]) -> Result<Vec<f32>, TviError> {
    weights.forward(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TviParams {
    pub embed_dim: usize,
    pub pe_dim: usize,
    pub base: Vec<f32>,
    pub time: Projector,
    pub angle: Projector,
}

impl TviParams {
    /// Seeded initialisation; the same seed always yields identical bits.
    pub fn init(embed_dim: usize, pe_dim: usize, seed: u64) -> Result<Self, TviError> {
        if embed_dim == 0 {
            return Err(TviError::InvalidParams("embedding dimension must be positive".into()));
        }
        if pe_dim == 0 || pe_dim % 4 != 0 {
            return Err(TviError::BadDimension(pe_dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = (0..embed_dim).map(|_| rng.gen_range(-0.035f32..0.035)).collect();
        let hidden = 2 * pe_dim;
        let time = Projector::random(pe_dim, hidden, embed_dim, &mut rng);
        let angle = Projector::random(pe_dim, hidden, embed_dim, &mut rng);
        Ok(Self { embed_dim, pe_dim, base, time, angle })
    }

    pub fn validate(&self) -> Result<(), TviError> {
        if self.base.len() != self.embed_dim {
            return Err(TviError::ShapeMismatch { expected: self.embed_dim, got: self.base.len() });
        }
        for p in [&self.time, &self.angle] {
            p.check()?;
            if p.input != self.pe_dim || p.output != self.embed_dim {
                return Err(TviError::InvalidParams(format!(
                    "projector maps {} -> {}, expected {} -> {}",
                    p.input, p.output, self.pe_dim, self.embed_dim
                )));
            }
        }
        if !self.base.iter().all(|x| x.is_finite()) {
            return Err(TviError::InvalidParams("non-finite base embedding".into()));
        }
        Ok(())
    }

    pub fn time_term(&self, t: u32) -> Result<Vec<f32>, TviError> {
        self.time.forward(&time_pe(t, self.pe_dim)?)
    }

    pub fn angle_term(&self, phi: f64) -> Result<Vec<f32>, TviError> {
        self.angle.forward(&angle_pe(phi, self.pe_dim)?)
    }

    /// Layout: magic, version, embed_dim, pe_dim, then base, time projector
    /// (w1, b1, w2, b2) and angle projector, all little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, self.embed_dim as u32, self.pe_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tensors = [
            &self.base,
            &self.time.w1,
            &self.time.b1,
            &self.time.w2,
            &self.time.b2,
            &self.angle.w1,
            &self.angle.b1,
            &self.angle.w2,
            &self.angle.b2,
        ];
        for t in tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, TviError> {
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| TviError::VersionMismatch("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(TviError::VersionMismatch("bad magic".into()));
        }
        let mut word = || -> Result<u32, TviError> {
            let mut b = [0u8; 4];
            bytes.read_exact(&mut b).map_err(|_| TviError::VersionMismatch("truncated header".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != FORMAT_VERSION {
            return Err(TviError::VersionMismatch(format!("version {version}, expected {FORMAT_VERSION}")));
        }
        let embed_dim = word()? as usize;
        let pe_dim = word()? as usize;
        if embed_dim == 0 || pe_dim == 0 || pe_dim % 4 != 0 {
            return Err(TviError::VersionMismatch(format!("bad dimensions C={embed_dim} pe_dim={pe_dim}")));
        }
        let hidden = 2 * pe_dim;
        let projector_len = hidden * pe_dim + hidden + embed_dim * hidden + embed_dim;
        let expected = 4 * (embed_dim + 2 * projector_len);
        if bytes.len() != expected {
            return Err(TviError::VersionMismatch(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
        let base = take(embed_dim);
        let mut projector = || Projector {
            input: pe_dim,
            hidden,
            output: embed_dim,
            w1: take(hidden * pe_dim),
            b1: take(hidden),
            w2: take(embed_dim * hidden),
            b2: take(embed_dim),
            activation: Activation::Gelu,
        };
        let time = projector();
        let angle = projector();
        let params = Self { embed_dim, pe_dim, base, time, angle };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TviError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TviError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the dimensions against what the caller expects.
    pub fn load_expecting(path: impl AsRef<Path>, embed_dim: usize, pe_dim: usize) -> Result<Self, TviError> {
        let p = Self::load(path)?;
        if p.embed_dim != embed_dim || p.pe_dim != pe_dim {
            return Err(TviError::VersionMismatch(format!(
                "file has C={} pe_dim={}, expected C={embed_dim} pe_dim={pe_dim}",
                p.embed_dim, p.pe_dim
            )));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TviToken {
    pub vector: Vec<f32>,
    pub mode: TaskMode,
    pub t: Option<u32>,
    pub azimuth: Option<f64>,
}

pub fn tvi_token(params: &TviParams, mode: TaskMode, t: Option<u32>, azimuth: Option<f64>) -> Result<TviToken, TviError> {
    let wants_time = matches!(mode, TaskMode::Navigation | TaskMode::VideoQa);
    let wants_angle = matches!(mode, TaskMode::Navigation);
    match (wants_time, t) {
        (true, None) => return Err(TviError::MissingArgument { mode, what: "a timestep" }),
        (false, Some(_)) => return Err(TviError::UnexpectedArgument { mode, what: "a timestep" }),
        _ => {}
    }
    match (wants_angle, azimuth) {
        (true, None) => return Err(TviError::MissingArgument { mode, what: "an azimuth" }),
        (false, Some(_)) => return Err(TviError::UnexpectedArgument { mode, what: "an azimuth" }),
        _ => {}
    }
    let mut vector = params.base.clone();
    if let Some(t) = t {
        add_assign(&mut vector, &params.time_term(t)?);
    }
    if let Some(phi) = azimuth {
        add_assign(&mut vector, &params.angle_term(phi)?);
    }
    Ok(TviToken { vector, mode, t, azimuth })
}

fn add_assign(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
