use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FingerprintError, Result};
use crate::grad::{conv1d_output_len, Conv1dSpec, Scalar, Tape, Tensor, Var};
use crate::nn;
use crate::par;
use crate::signal::{self, IqWaveform};

/// Layer dimensions of the embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderArch {
    pub input_len: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub embedding_dim: usize,
}

impl Default for EmbedderArch {
    fn default() -> Self {
        Self {
            input_len: 512,
            channels: vec![16, 32, 64, 64],
            kernel: 9,
            stride: 2,
            embedding_dim: 64,
        }
    }
}

impl EmbedderArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FingerprintError::Architecture(m.into()));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("need at least one conv block with positive channels");
        }
        if self.kernel == 0 || self.stride == 0 || self.embedding_dim == 0 {
            return bad("kernel, stride and embedding dim must be positive");
        }
        let mut len = self.input_len;
        for _ in &self.channels {
            len = conv1d_output_len(len, self.kernel, Conv1dSpec::same(self.kernel, self.stride))
                .ok_or_else(|| FingerprintError::Architecture("input too short for the conv stack".into()))?;
        }
        Ok(())
    }

    /// Conv weights and biases per block, then the dense weight and bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = 2;
        for &c in &self.channels {
            shapes.push(vec![c, c_in, self.kernel]);
            shapes.push(vec![c]);
            c_in = c;
        }
        shapes.push(vec![c_in, self.embedding_dim]);
        shapes.push(vec![self.embedding_dim]);
        shapes
    }
}

/// Conv encoder: input power normalisation, strided conv + relu blocks,
/// global average pool, dense projection, L2 normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderModel {
    arch: EmbedderArch,
    params: Vec<Tensor<f32>>,
    version: String,
}

pub const EMBEDDER_VERSION: &str = "embedder-v1";

impl EmbedderModel {
    pub fn init(arch: EmbedderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| match s.len() {
                3 => nn::uniform_init(&mut rng, s, nn::he_bound(s[1] * s[2])),
                2 => nn::uniform_init(&mut rng, s, nn::xavier_bound(s[0], s[1])),
                _ => Tensor::zeros(s),
            })
            .collect();
        Ok(Self {
            arch,
            params,
            version: EMBEDDER_VERSION.into(),
        })
    }

    pub fn from_parts(arch: EmbedderArch, params: Vec<Tensor<f32>>, version: String) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_shapes();
        if expected.len() != params.len() || expected.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(FingerprintError::Architecture(format!(
                "expected parameter shapes {expected:?}, got {:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(Self { arch, params, version })
    }

    pub fn arch(&self) -> &EmbedderArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    pub fn check_len(&self, w: &IqWaveform) -> Result<()> {
        if w.len() != self.arch.input_len {
            return Err(FingerprintError::LengthMismatch {
                expected: self.arch.input_len,
                got: w.len(),
            });
        }
        Ok(())
    }

    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<Var>> {
        Ok(nn::bind(tape, &self.params, trainable)?)
    }

    /// `[n, 2, input_len]` to `[n, embedding_dim]` unit-norm rows.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        if shape.len() != 3 || shape[1] != 2 || shape[2] != self.arch.input_len {
            return Err(FingerprintError::LengthMismatch {
                expected: self.arch.input_len,
                got: shape.get(2).copied().unwrap_or(0),
            });
        }
        let mut h = nn::unit_power(tape, x)?;
        let blocks = self.arch.channels.len();
        for b in 0..blocks {
            h = nn::conv(tape, h, params[2 * b], params[2 * b + 1], self.arch.stride)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.mean_axis(h, 2)?;
        let z = nn::dense(tape, pooled, params[2 * blocks], params[2 * blocks + 1])?;
        Ok(tape.l2_normalize(z)?)
    }
}

/// Unit-norm fingerprint vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

pub const UNIT_TOLERANCE: f64 = 1e-5;

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(FingerprintError::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    /// Normalise an arbitrary non-zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(FingerprintError::NotUnitNorm(norm));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Angular distance in `[0, 1]`.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FingerprintError::DimensionMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0).acos() / PI)
}

/// Row-wise angular distance between `[n, d]` variables (`b` may be `[d]`).
/// The dot product is clamped just inside `[-1, 1]` so the gradient stays
/// finite.
pub fn distance_on_tape<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let prod = tape.mul(a, b)?;
    let dot = tape.sum_axis(prod, 1)?;
    let lim = S::one() - S::of(1e-6);
    let dot = tape.clamp(dot, -lim, lim)?;
    let ang = tape.acos(dot)?;
    Ok(tape.scale(ang, S::of(1.0 / PI))?)
}

fn rows_to_embeddings<S: Scalar>(t: &Tensor<S>) -> Result<Vec<Embedding>> {
    let d = t.shape()[1];
    t.values()
        .chunks(d)
        .map(|r| Embedding::new(r.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

pub fn embed(model: &EmbedderModel, w: &IqWaveform) -> Result<Embedding> {
    Ok(embed_batch(model, std::slice::from_ref(w))?.remove(0))
}

const EMBED_CHUNK: usize = 32;

/// Embed many waveforms; each result is independent of batching.
pub fn embed_batch(model: &EmbedderModel, waves: &[IqWaveform]) -> Result<Vec<Embedding>> {
    for w in waves {
        model.check_len(w)?;
    }
    let chunks: Vec<&[IqWaveform]> = waves.chunks(EMBED_CHUNK).collect();
    let parts = par::map_range(chunks.len(), |c| -> Result<Vec<Embedding>> {
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false)?;
        let x = tape.constant(signal::stack(chunks[c])?)?;
        let e = model.forward(&mut tape, &params, x)?;
        rows_to_embeddings(tape.value(e)?)
    });
    let mut out = Vec::with_capacity(waves.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_check;
    use crate::grad::GradError;
    use crate::signal::{synthesize_header, HeaderSpec};

    fn small_arch() -> EmbedderArch {
        EmbedderArch {
            input_len: 32,
            channels: vec![4, 4],
            kernel: 3,
            stride: 2,
            embedding_dim: 5,
        }
    }

    fn wave(len: usize, phase: f64) -> IqWaveform {
        let s = (0..len)
            .map(|n| num_complex::Complex64::from_polar(1.0 + 0.1 * (n as f64 * 0.3).sin(), phase + n as f64 * 0.21))
            .collect();
        IqWaveform::new(s, 1.0).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = EmbedderModel::init(EmbedderArch::default(), 1).unwrap();
        let h = synthesize_header(&HeaderSpec::default()).unwrap();
        let a = embed(&m, &h).unwrap();
        let n: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(a, embed(&m, &h).unwrap());
        assert_eq!(a.dim(), 64);
    }

    #[test]
    fn batch_results_match_single() {
        let m = EmbedderModel::init(small_arch(), 3).unwrap();
        let waves: Vec<_> = (0..40).map(|k| wave(32, k as f64 * 0.1)).collect();
        let batch = embed_batch(&m, &waves).unwrap();
        for (w, e) in waves.iter().zip(&batch) {
            assert_eq!(&embed(&m, w).unwrap(), e);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let m = EmbedderModel::init(small_arch(), 3).unwrap();
        assert!(matches!(
            embed(&m, &wave(31, 0.0)),
            Err(FingerprintError::LengthMismatch { expected: 32, got: 31 })
        ));
    }

    #[test]
    fn distance_reference_values() {
        let e = Embedding::new(vec![1.0, 0.0]).unwrap();
        let neg = Embedding::new(vec![-1.0, 0.0]).unwrap();
        let orth = Embedding::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(distance(&e, &e).unwrap(), 0.0);
        assert_eq!(distance(&e, &neg).unwrap(), 1.0);
        assert!((distance(&e, &orth).unwrap() - 0.5).abs() < 1e-15);
        assert!(Embedding::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn tape_distance_matches_plain() {
        let a = Embedding::normalized(vec![0.3, -0.2, 0.9]).unwrap();
        let b = Embedding::normalized(vec![-0.5, 0.1, 0.4]).unwrap();
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(Tensor::new(vec![1, 3], a.values().to_vec()).unwrap()).unwrap();
        let vb = tape.constant(Tensor::new(vec![3], b.values().to_vec()).unwrap()).unwrap();
        let d = distance_on_tape(&mut tape, va, vb).unwrap();
        let got = tape.value(d).unwrap().values()[0];
        assert!((got - distance(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = EmbedderModel::init(small_arch(), 5).unwrap();
        let w = wave(32, 0.4);
        let target = Embedding::normalized(vec![0.1, 0.5, -0.3, 0.2, 0.7]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let p = m.bind(t, false).map_err(to_grad)?;
                let e = m.forward(t, &p, x).map_err(to_grad)?;
                let tv = t.constant(Tensor::new(vec![5], target.values().to_vec())?)?;
                let d = distance_on_tape(t, e, tv).map_err(to_grad)?;
                t.sum(d)
            },
            &w.to_tensor(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    fn to_grad(e: FingerprintError) -> GradError {
        match e {
            FingerprintError::Grad(g) => g,
            other => GradError::Invalid {
                op: "embed",
                detail: other.to_string(),
            },
        }
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = EmbedderModel::init(small_arch(), 0).unwrap();
        let mut params = m.params().to_vec();
        assert!(EmbedderModel::from_parts(small_arch(), params.clone(), "x".into()).is_ok());
        params.pop();
        assert!(EmbedderModel::from_parts(small_arch(), params, "x".into()).is_err());
    }
}
