//! Sequential patterns: k-means over source user representations, attention
//! over the resulting centroids and fusion with the user's own representation.
//!
//! Bank file layout (little endian):
//!
//! ```text
//! "PTRN" | u32 version | u32 k | u32 d_l | k·d_l f32 centroids | 32-byte fingerprint | u32 CRC32
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{dot, norm, softmax_into, Tensor};

pub const PATTERN_MAGIC: &[u8; 4] = b"PTRN";
pub const PATTERN_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 32;
pub const MAX_LLOYD_ITERS: usize = 300;
pub const SHIFT_TOL: f64 = 1e-6;
const COS_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("need at least {k} distinct points, found {distinct}")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dim { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad magic: not a pattern bank")]
    BadMagic,
    #[error("unsupported pattern bank version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed pattern bank: {0}")]
    Format(String),
    #[error("fingerprint mismatch: bank was built from a different checkpoint or corpus")]
    FingerprintMismatch,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternBank {
    pub centroids: Tensor<f32>,
    /// Final k-means inertia; not stored in the bank file.
    pub inertia: Option<f64>,
    pub fingerprint: [u8; 32],
}

/// Result of a k-means run, including the per-iteration inertia trace.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[Vec<f64>], cap: usize) -> usize {
    let mut seen: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !seen.iter().any(|s| *s == p) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// Nearest centroid per point (lowest index wins ties) and its squared distance.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centroids.iter().enumerate() {
                let d = sq_dist(p, ctr);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Stops when the largest centroid
/// shift drops below `tol` or after `max_iter` iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans, PatternError> {
    if k == 0 {
        return Err(PatternError::InvalidK);
    }
    let distinct = count_distinct(points, k);
    if distinct < k {
        return Err(PatternError::TooFewPoints { k, distinct });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(PatternError::Dim {
            expected: dim,
            found: p.len(),
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PatternError::NonFinite("k-means input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut trace = Vec::new();
    let mut assigned = assign(points, &centroids);
    trace.push(assigned.iter().map(|a| a.1).sum());
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assigned) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Farthest point from its own centroid, not already used as a reseed.
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken.push(far);
                points[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        assigned = assign(points, &centroids);
        trace.push(assigned.iter().map(|a| a.1).sum());
        if shift < tol {
            converged = true;
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment: assigned.into_iter().map(|a| a.0).collect(),
        inertia_trace: trace,
        iterations,
        converged,
    })
}

/// `sha256(corpus digest ‖ checkpoint bytes)`.
pub fn fingerprint(corpus_digest: &[u8; 32], checkpoint_bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(corpus_digest);
    h.update(checkpoint_bytes);
    h.finalize().into()
}

pub fn extract_patterns(
    source_reprs: &[Vec<f64>],
    k: usize,
    seed: u64,
    fingerprint: [u8; 32],
) -> Result<PatternBank, PatternError> {
    let km = kmeans(source_reprs, k, seed, MAX_LLOYD_ITERS, SHIFT_TOL)?;
    if !km.converged {
        log::warn!("k-means stopped after {} iterations without converging", km.iterations);
    }
    let d = source_reprs[0].len();
    let data: Vec<f32> = km.centroids.iter().flatten().map(|&v| v as f32).collect();
    Ok(PatternBank {
        centroids: Tensor::from_vec(k, d, data),
        inertia: Some(km.inertia()),
        fingerprint,
    })
}

/// Attention weights and fused pattern for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedUser {
    pub y: Vec<f64>,
    pub attn: Vec<f64>,
    pub s_tilde: Vec<f64>,
    pub g: Vec<f64>,
}

fn cos_parts(y: &[f64], s: &[f64]) -> (f64, f64, f64) {
    let ny = norm(y);
    let ns = norm(s);
    (dot(y, s) / (ny * ns).max(COS_EPS), ny, ns)
}

impl PatternBank {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn d_l(&self) -> usize {
        self.centroids.cols()
    }

    fn centroid(&self, i: usize) -> Vec<f64> {
        self.centroids.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<(), PatternError> {
        if &self.fingerprint != expected {
            return Err(PatternError::FingerprintMismatch);
        }
        Ok(())
    }

    /// Softmax over raw cosines to every centroid, and the weighted centroid sum.
    pub fn attend(&self, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PatternError> {
        if y.len() != self.d_l() {
            return Err(PatternError::Dim {
                expected: self.d_l(),
                found: y.len(),
            });
        }
        let cents: Vec<Vec<f64>> = (0..self.k()).map(|i| self.centroid(i)).collect();
        let logits: Vec<f64> = cents.iter().map(|s| cos_parts(y, s).0).collect();
        let mut attn = vec![0.0; self.k()];
        softmax_into(&logits, &mut attn);
        let mut s_tilde = vec![0.0; self.d_l()];
        for (a, s) in attn.iter().zip(&cents) {
            for (o, v) in s_tilde.iter_mut().zip(s) {
                *o += a * v;
            }
        }
        Ok((attn, s_tilde))
    }

    /// Gradient of `⟨d_s_tilde, s̃(y)⟩` with respect to `y`; centroids are constants.
    pub fn attend_backward(&self, y: &[f64], attn: &[f64], d_s_tilde: &[f64]) -> Vec<f64> {
        let cents: Vec<Vec<f64>> = (0..self.k()).map(|i| self.centroid(i)).collect();
        let d_attn: Vec<f64> = cents.iter().map(|s| dot(d_s_tilde, s)).collect();
        let mean: f64 = attn.iter().zip(&d_attn).map(|(a, d)| a * d).sum();
        let mut dy = vec![0.0; y.len()];
        for ((s, &a), &da) in cents.iter().zip(attn).zip(&d_attn) {
            let dc = a * (da - mean);
            let (cos, ny, ns) = cos_parts(y, s);
            let den = ny * ns;
            if den <= COS_EPS || dc == 0.0 {
                continue;
            }
            let k = cos / (ny * ny);
            for ((o, &yv), &sv) in dy.iter_mut().zip(y).zip(s) {
                *o += dc * (sv / den - k * yv);
            }
        }
        dy
    }

    pub fn fuse_user(&self, y: &[f64], w_f: &Tensor<f32>) -> Result<FusedUser, PatternError> {
        let (attn, s_tilde) = self.attend(y)?;
        let g = fuse(y, &s_tilde, w_f)?;
        Ok(FusedUser {
            y: y.to_vec(),
            attn,
            s_tilde,
            g,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.centroids.len() * 4 + 36);
        out.extend_from_slice(PATTERN_MAGIC);
        out.extend_from_slice(&PATTERN_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_l() as u32).to_le_bytes());
        for v in self.centroids.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PatternError> {
        if bytes.len() < 8 || &bytes[..4] != PATTERN_MAGIC {
            return Err(PatternError::BadMagic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != PATTERN_VERSION {
            return Err(PatternError::UnsupportedVersion(version));
        }
        if bytes.len() < 16 + 36 {
            return Err(PatternError::Format("truncated pattern bank".into()));
        }
        let k = u32_at(8) as usize;
        let d = u32_at(12) as usize;
        if k == 0 || d == 0 {
            return Err(PatternError::Format(format!("invalid shape {k}x{d}")));
        }
        let expected = k
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(16 + 36))
            .ok_or_else(|| PatternError::Format("shape overflows".into()))?;
        if bytes.len() != expected {
            return Err(PatternError::Format(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let body = bytes.len() - 4;
        let stored = u32_at(body);
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(PatternError::Crc { stored, computed });
        }
        let data: Vec<f32> = bytes[16..16 + k * d * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PatternError::NonFinite("pattern centroids"));
        }
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(&bytes[16 + k * d * 4..body]);
        Ok(Self {
            centroids: Tensor::from_vec(k, d, data),
            inertia: None,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PatternError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| PatternError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PatternError> {
        let bytes = std::fs::read(path).map_err(|e| PatternError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// `g = W_f · [y ; s̃]` with `W_f` of shape `d_l × 2·d_l`.
pub fn fuse(y: &[f64], s_tilde: &[f64], w_f: &Tensor<f32>) -> Result<Vec<f64>, PatternError> {
    let d = y.len();
    if s_tilde.len() != d || w_f.shape() != (d, 2 * d) {
        return Err(PatternError::Dim {
            expected: 2 * d,
            found: w_f.cols().max(s_tilde.len()),
        });
    }
    Ok((0..d)
        .map(|r| {
            let row = w_f.row(r);
            let mut acc = 0.0;
            for c in 0..d {
                acc += row[c] as f64 * y[c] + row[d + c] as f64 * s_tilde[c];
            }
            acc
        })
        .collect())
}

/// Backward of [`fuse`]: accumulates `dW_f` and returns `(dy, ds̃)`.
pub fn fuse_backward(
    y: &[f64],
    s_tilde: &[f64],
    w_f: &Tensor<f32>,
    d_g: &[f64],
    d_w_f: &mut Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let d = y.len();
    let mut dy = vec![0.0; d];
    let mut ds = vec![0.0; d];
    for (r, &g) in d_g.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = w_f.row(r);
        let drow = d_w_f.row_mut(r);
        for c in 0..d {
            drow[c] += g * y[c];
            drow[d + c] += g * s_tilde[c];
            dy[c] += g * row[c] as f64;
            ds[c] += g * row[d + c] as f64;
        }
    }
    (dy, ds)
}
