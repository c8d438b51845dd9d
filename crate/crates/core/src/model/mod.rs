//! Trainable parameters and the forward pipeline: dual semantic projection,
//! sequence encoding and dot-product scoring.

mod checkpoint;
mod encoder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot, Tensor};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{EncoderTrace, GruStep};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty-history: cannot encode an empty sequence")]
    EmptyHistory,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint bad magic")]
    BadMagic,
    #[error("checkpoint version {0} unsupported")]
    UnsupportedVersion(u32),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    MeanPool,
    RecurrentGate,
}

impl EncoderKind {
    pub fn label(self) -> &'static str {
        match self {
            EncoderKind::MeanPool => "MeanPool",
            EncoderKind::RecurrentGate => "GRU",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean-pool" => Ok(EncoderKind::MeanPool),
            "recurrent-gate" | "gru" => Ok(EncoderKind::RecurrentGate),
            other => Err(format!("unknown encoder {other:?} (mean-pool | recurrent-gate)")),
        }
    }
}

/// How the two projection outputs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    #[default]
    Sum,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_h: usize,
    pub d_l: usize,
    pub encoder: EncoderKind,
    pub max_seq_len: usize,
    pub merge: MergeMode,
}

impl ModelSpec {
    pub fn new(d_h: usize, d_l: usize, encoder: EncoderKind) -> Self {
        Self {
            d_h,
            d_l,
            encoder,
            max_seq_len: 50,
            merge: MergeMode::Sum,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_l == 0 || self.d_h == 0 {
            return Err(ModelError::InvalidSpec("dimensions must be positive".into()));
        }
        if self.d_l >= self.d_h {
            return Err(ModelError::InvalidSpec(format!(
                "latent dim {} must be smaller than semantic dim {}",
                self.d_l, self.d_h
            )));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::InvalidSpec("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// Update, reset and candidate gate weights of a single-layer gated recurrence.
/// `w_*` act on the input, `u_*` on the previous hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights<T> {
    pub w_z: Tensor<T>,
    pub u_z: Tensor<T>,
    pub b_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub u_r: Tensor<T>,
    pub b_r: Tensor<T>,
    pub w_n: Tensor<T>,
    pub u_n: Tensor<T>,
    pub b_n: Tensor<T>,
}

impl<T: Copy + Default> GruWeights<T> {
    fn zeros(d_l: usize) -> Self {
        let m = || Tensor::zeros(d_l, d_l);
        let v = || Tensor::zeros(d_l, 1);
        Self {
            w_z: m(),
            u_z: m(),
            b_z: v(),
            w_r: m(),
            u_r: m(),
            b_r: v(),
            w_n: m(),
            u_n: m(),
            b_n: v(),
        }
    }
}

/// Every trainable tensor. Instantiated with `f32` for parameters and `f64`
/// for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub proj2_w: Tensor<T>,
    pub proj2_b: Tensor<T>,
    pub gru: Option<GruWeights<T>>,
    pub fusion_w: Tensor<T>,
}

impl<T: Copy + Default> ParamSet<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            proj_w: Tensor::zeros(spec.d_l, spec.d_h),
            proj_b: Tensor::zeros(spec.d_l, 1),
            proj2_w: Tensor::zeros(spec.d_l, spec.d_h),
            proj2_b: Tensor::zeros(spec.d_l, 1),
            gru: match spec.encoder {
                EncoderKind::RecurrentGate => Some(GruWeights::zeros(spec.d_l)),
                EncoderKind::MeanPool => None,
            },
            fusion_w: Tensor::zeros(spec.d_l, 2 * spec.d_l),
        }
    }
}

impl<T> ParamSet<T> {
    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v: Vec<(&'static str, &Tensor<T>)> = vec![
            ("proj.w", &self.proj_w),
            ("proj.b", &self.proj_b),
            ("proj2.w", &self.proj2_w),
            ("proj2.b", &self.proj2_b),
        ];
        if let Some(g) = &self.gru {
            v.extend([
                ("gru.w_z", &g.w_z),
                ("gru.u_z", &g.u_z),
                ("gru.b_z", &g.b_z),
                ("gru.w_r", &g.w_r),
                ("gru.u_r", &g.u_r),
                ("gru.b_r", &g.b_r),
                ("gru.w_n", &g.w_n),
                ("gru.u_n", &g.u_n),
                ("gru.b_n", &g.b_n),
            ]);
        }
        v.push(("fusion.w", &self.fusion_w));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v: Vec<(&'static str, &mut Tensor<T>)> = vec![
            ("proj.w", &mut self.proj_w),
            ("proj.b", &mut self.proj_b),
            ("proj2.w", &mut self.proj2_w),
            ("proj2.b", &mut self.proj2_b),
        ];
        if let Some(g) = &mut self.gru {
            v.extend([
                ("gru.w_z", &mut g.w_z),
                ("gru.u_z", &mut g.u_z),
                ("gru.b_z", &mut g.b_z),
                ("gru.w_r", &mut g.w_r),
                ("gru.u_r", &mut g.u_r),
                ("gru.b_r", &mut g.b_r),
                ("gru.w_n", &mut g.w_n),
                ("gru.u_n", &mut g.u_n),
                ("gru.b_n", &mut g.b_n),
            ]);
        }
        v.push(("fusion.w", &mut self.fusion_w));
        v
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl ParamSet<f64> {
    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill_zero();
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// How the fusion matrix is initialised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionInit {
    #[default]
    Random,
    /// `[I | 0]`: the fused representation starts out equal to the user's own.
    LeftIdentity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub weights: ParamSet<f32>,
}

impl ModelParams {
    /// Matrices uniform in ±1/√fan_in, biases zero.
    pub fn init(spec: ModelSpec, seed: u64, fusion_init: FusionInit) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamSet::<f32>::zeros(&spec);
        for (name, t) in weights.tensors_mut() {
            if t.cols() == 1 {
                continue;
            }
            if name == "fusion.w" && fusion_init == FusionInit::LeftIdentity {
                for r in 0..t.rows() {
                    t.row_mut(r)[r] = 1.0;
                }
                continue;
            }
            let bound = 1.0 / (t.cols() as f64).sqrt();
            for v in t.as_mut_slice() {
                *v = rng.gen_range(-bound..bound) as f32;
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn d_l(&self) -> usize {
        self.spec.d_l
    }

    pub fn d_h(&self) -> usize {
        self.spec.d_h
    }

    pub fn is_finite(&self) -> bool {
        self.weights.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Projection in `f64`: `W_p·x + b_p + W_p2·x + b_p2`.
    pub fn project_into(&self, e_sem: &[f32], out: &mut [f64]) {
        let w = &self.weights;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = w.proj_b.as_slice()[r] as f64 + w.proj2_b.as_slice()[r] as f64;
            for ((&a, &b), &x) in w.proj_w.row(r).iter().zip(w.proj2_w.row(r)).zip(e_sem) {
                acc += a as f64 * x as f64 + b as f64 * x as f64;
            }
            *o = acc;
        }
    }

    pub fn project_f64(&self, e_sem: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_l()];
        self.project_into(e_sem, &mut out);
        out
    }

    /// Maps a raw semantic embedding into the latent space.
    pub fn project_item(&self, e_sem: &[f32]) -> Result<Vec<f32>, ModelError> {
        if e_sem.len() != self.d_h() {
            return Err(ModelError::DimMismatch {
                what: "semantic embedding",
                expected: self.d_h(),
                found: e_sem.len(),
            });
        }
        if e_sem.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("semantic embedding"));
        }
        Ok(self.project_f64(e_sem).into_iter().map(|v| v as f32).collect())
    }

    /// Encodes the last `max_seq_len` entries of a latent sequence.
    pub fn encode_f64(&self, embeddings: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        if embeddings.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        if let Some(bad) = embeddings.iter().find(|e| e.len() != self.d_l()) {
            return Err(ModelError::DimMismatch {
                what: "sequence element",
                expected: self.d_l(),
                found: bad.len(),
            });
        }
        let start = embeddings.len().saturating_sub(self.spec.max_seq_len);
        Ok(encoder::encode_last(self, &embeddings[start..]))
    }

    pub fn encode_sequence(&self, embeddings: &[Vec<f32>]) -> Result<Vec<f32>, ModelError> {
        let wide: Vec<Vec<f64>> = embeddings
            .iter()
            .map(|e| e.iter().map(|&v| v as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = wide.iter().map(|v| v.as_slice()).collect();
        Ok(self
            .encode_f64(&refs)?
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }

    /// Runs the encoder over the whole (already truncated) window and keeps the
    /// per-step state needed for backpropagation.
    pub fn encoder_trace(&self, inputs: &[&[f64]]) -> EncoderTrace {
        encoder::trace(self, inputs)
    }
}

pub fn score(user_repr: &[f32], item_emb: &[f32]) -> Result<f32, ModelError> {
    if user_repr.len() != item_emb.len() {
        return Err(ModelError::DimMismatch {
            what: "score operands",
            expected: user_repr.len(),
            found: item_emb.len(),
        });
    }
    let a: Vec<f64> = user_repr.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = item_emb.iter().map(|&v| v as f64).collect();
    Ok(dot(&a, &b) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(d_h: usize, d_l: usize, enc: EncoderKind) -> ModelSpec {
        ModelSpec::new(d_h, d_l, enc)
    }

    fn zero_model(d_h: usize, d_l: usize) -> ModelParams {
        let s = spec(d_h, d_l, EncoderKind::MeanPool);
        ModelParams {
            weights: ParamSet::zeros(&s),
            spec: s,
        }
    }

    #[test]
    fn zero_weights_return_summed_bias() {
        let mut m = zero_model(3, 2);
        m.weights.proj_b = Tensor::from_vec(2, 1, vec![1.0, 2.0]);
        assert_eq!(m.project_item(&[5.0, 6.0, 7.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn identity_block_slices_input() {
        let mut m = zero_model(4, 2);
        m.weights.proj_w = Tensor::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.project_item(&[3.0, 4.0, 9.0, 9.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn projection_matches_triple_loop() {
        let m = ModelParams::init(spec(5, 3, EncoderKind::MeanPool), 42, FusionInit::Random).unwrap();
        let x = [0.3f32, -1.2, 2.0, 0.7, -0.1];
        let got = m.project_item(&x).unwrap();
        let w = &m.weights;
        for r in 0..3 {
            let mut acc = 0.0f64;
            for c in 0..5 {
                acc += w.proj_w.row(r)[c] as f64 * x[c] as f64;
            }
            for c in 0..5 {
                acc += w.proj2_w.row(r)[c] as f64 * x[c] as f64;
            }
            acc += w.proj_b.as_slice()[r] as f64 + w.proj2_b.as_slice()[r] as f64;
            assert!((got[r] as f64 - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_rejects_wrong_dim() {
        let m = zero_model(3, 2);
        assert!(matches!(m.project_item(&[1.0]), Err(ModelError::DimMismatch { .. })));
    }

    #[test]
    fn latent_dim_must_be_smaller() {
        let err = ModelParams::init(spec(4, 4, EncoderKind::MeanPool), 0, FusionInit::Random);
        assert!(matches!(err, Err(ModelError::InvalidSpec(_))));
    }

    #[test]
    fn scores_are_dot_products() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
        let a = [0.25f32, -1.5, 3.0, 0.125];
        let b = [2.0f32, 0.5, -0.75, 8.0];
        let mut oracle = 0.0f64;
        for i in 0..4 {
            oracle += a[i] as f64 * b[i] as f64;
        }
        assert!((score(&a, &b).unwrap() as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let s = spec(16, 4, EncoderKind::RecurrentGate);
        let a = ModelParams::init(s.clone(), 9, FusionInit::Random).unwrap();
        let b = ModelParams::init(s.clone(), 9, FusionInit::Random).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 4.0f32;
        assert!(a.weights.proj_w.as_slice().iter().all(|v| v.abs() <= bound));
        assert!(a.weights.proj_b.as_slice().iter().all(|&v| v == 0.0));
        let id = ModelParams::init(s, 9, FusionInit::LeftIdentity).unwrap();
        assert_eq!(id.weights.fusion_w.row(1)[1], 1.0);
        assert_eq!(id.weights.fusion_w.row(1)[5], 0.0);
    }

    proptest! {
        #[test]
        fn projection_is_linear_without_bias(
            x in proptest::collection::vec(-3.0f32..3.0, 6),
            y in proptest::collection::vec(-3.0f32..3.0, 6),
            a in -2.0f32..2.0,
            b in -2.0f32..2.0,
        ) {
            let m = ModelParams::init(spec(6, 3, EncoderKind::MeanPool), 1, FusionInit::Random).unwrap();
            let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = m.project_f64(&mix);
            let px = m.project_f64(&x);
            let py = m.project_f64(&y);
            for r in 0..3 {
                let rhs = a as f64 * px[r] + b as f64 * py[r];
                prop_assert!((lhs[r] - rhs).abs() < 1e-4 * (1.0 + rhs.abs()));
            }
        }
    }
}
