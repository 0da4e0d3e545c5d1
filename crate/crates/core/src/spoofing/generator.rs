use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SpoofError};
use crate::grad::{Scalar, Tape, Tensor, Var};
use crate::nn;
use crate::signal::{self, IqWaveform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorArch {
    pub input_len: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Conv blocks before the output projection; all but the first are
    /// residual.
    pub blocks: usize,
    /// Modification energy is capped at `output_scale^2` times the input
    /// energy.
    pub output_scale: f64,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            input_len: 512,
            channels: 32,
            kernel: 9,
            blocks: 3,
            output_scale: 0.1,
        }
    }
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.channels == 0 || self.kernel == 0 || self.blocks == 0 {
            return Err(SpoofError::Architecture("generator dimensions must be positive".into()));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(SpoofError::Architecture("output scale must be positive".into()));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let c = self.channels;
        let mut shapes = vec![vec![c, 2, self.kernel], vec![c]];
        for _ in 1..self.blocks {
            shapes.push(vec![c, c, self.kernel]);
            shapes.push(vec![c]);
        }
        shapes.push(vec![2, c, 1]);
        shapes.push(vec![2]);
        shapes
    }
}

/// Residual waveform generator: maps a header to an additive modification
/// of bounded energy. The output projection starts at zero, so an untrained
/// generator leaves its input untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    arch: GeneratorArch,
    params: Vec<Tensor<f32>>,
}

const ENERGY_EPS: f64 = 1e-9;

impl Generator {
    pub fn init(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.param_shapes();
        let last = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() == 3 && i < last {
                    nn::uniform_init(&mut rng, s, nn::he_bound(s[1] * s[2]))
                } else {
                    Tensor::zeros(s)
                }
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: GeneratorArch, params: Vec<Tensor<f32>>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if expected.len() != params.len() || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(SpoofError::Architecture("generator parameter shapes do not match".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<Var>> {
        Ok(nn::bind(tape, &self.params, trainable)?)
    }

    /// `[n, 2, len]` headers to `[n, 2, len]` energy-capped modifications.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        if shape.len() != 3 || shape[1] != 2 || shape[2] != self.arch.input_len {
            return Err(SpoofError::Architecture(format!(
                "generator expects [n, 2, {}], got {shape:?}",
                self.arch.input_len
            )));
        }
        let h = nn::conv(tape, x, params[0], params[1], 1)?;
        let mut h = tape.tanh(h)?;
        for b in 1..self.arch.blocks {
            let r = nn::conv(tape, h, params[2 * b], params[2 * b + 1], 1)?;
            let r = tape.tanh(r)?;
            h = tape.add(h, r)?;
        }
        let k = 2 * self.arch.blocks;
        let raw = nn::conv(tape, h, params[k], params[k + 1], 1)?;

        let (n, len) = (shape[0], shape[2]);
        let ex = row_energy(tape, x, n, len)?;
        let em = row_energy(tape, raw, n, len)?;
        let em = tape.offset(em, S::of(ENERGY_EPS))?;
        let num = tape.sqrt(ex)?;
        let num = tape.scale(num, S::of(self.arch.output_scale))?;
        let den = tape.sqrt(em)?;
        let factor = tape.div(num, den)?;
        let factor = tape.clamp(factor, S::zero(), S::one())?;
        let factor = tape.reshape(factor, &[n, 1, 1])?;
        Ok(tape.mul(raw, factor)?)
    }

    /// Modifications for a batch of headers.
    pub fn modifications(&self, waves: &[IqWaveform]) -> Result<Vec<IqWaveform>> {
        let Some(first) = waves.first() else {
            return Ok(Vec::new());
        };
        let mut tape = Tape::<f32>::new();
        let params = self.bind(&mut tape, false)?;
        let x = tape.constant(signal::stack(waves)?)?;
        let m = self.forward(&mut tape, &params, x)?;
        Ok(signal::unstack(tape.value(m)?, first)?)
    }

    /// `w + G(w)` for each header.
    pub fn apply(&self, waves: &[IqWaveform]) -> Result<Vec<IqWaveform>> {
        let mods = self.modifications(waves)?;
        waves
            .iter()
            .zip(mods)
            .map(|(w, m)| {
                let s = w.samples().iter().zip(m.samples()).map(|(a, b)| a + b).collect();
                Ok(w.with_samples(s)?)
            })
            .collect()
    }
}

fn row_energy<S: Scalar>(tape: &mut Tape<S>, x: Var, n: usize, len: usize) -> Result<Var> {
    let sq = tape.square(x)?;
    let flat = tape.reshape(sq, &[n, 2 * len])?;
    Ok(tape.sum_axis(flat, 1)?)
}
