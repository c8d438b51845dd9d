//! Alignment/uniformity numbers for projected item embeddings: centre distance,
//! mean within-domain cosine, a linear domain probe and a 2-D PCA.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::tensor::{dot, norm, softmax_into};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.8,
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean Euclidean distance between domain centres.
    pub center_distance: f64,
    /// Mean over domains of the mean pairwise cosine (i ≠ j).
    pub mean_intra_cosine: f64,
    /// Held-out accuracy of a softmax-regression domain classifier, in [0, 1].
    pub probe_accuracy: f64,
    pub n_items: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn rows(&self) -> Vec<(String, f64)> {
        vec![
            ("center_distance".into(), self.center_distance),
            ("mean_intra_cosine".into(), self.mean_intra_cosine),
            ("probe_accuracy".into(), self.probe_accuracy),
            ("n_items".into(), self.n_items as f64),
        ]
    }
}

fn mean_pairwise_cosine(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let units: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let nr = norm(r).max(1e-12);
            r.iter().map(|v| v / nr).collect()
        })
        .collect();
    // Σ_{i≠j} û_i·û_j = |Σ û|² − Σ |û|²
    let d = units[0].len();
    let mut sum = vec![0.0; d];
    let mut self_terms = 0.0;
    for u in &units {
        for (s, v) in sum.iter_mut().zip(u) {
            *s += v;
        }
        self_terms += dot(u, u);
    }
    (dot(&sum, &sum) - self_terms) / (n * (n - 1)) as f64
}

/// Held-out accuracy of a multinomial logistic regression on standardized
/// features, trained by full-batch gradient descent.
pub fn linear_probe(rows: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> f64 {
    let n = rows.len();
    if n < 2 || n_classes < 2 {
        return 1.0;
    }
    let d = rows[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&rows[i]) {
            *m += v / n_train as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in train {
        for ((s, v), m) in sd.iter_mut().zip(&rows[i]).zip(&mean) {
            *s += (v - m) * (v - m) / n_train as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let x = |i: usize| -> Vec<f64> { rows[i].iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xs_train: Vec<Vec<f64>> = train.iter().map(|&i| x(i)).collect();

    let mut w = vec![vec![0.0; d]; n_classes];
    let mut b = vec![0.0; n_classes];
    let mut p = vec![0.0; n_classes];
    let mut logits = vec![0.0; n_classes];
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; d]; n_classes];
        let mut gb = vec![0.0; n_classes];
        for (xi, &i) in xs_train.iter().zip(train) {
            for c in 0..n_classes {
                logits[c] = b[c] + dot(&w[c], xi);
            }
            softmax_into(&logits, &mut p);
            for c in 0..n_classes {
                let g = p[c] - if labels[i] == c { 1.0 } else { 0.0 };
                gb[c] += g;
                for (gwk, xk) in gw[c].iter_mut().zip(xi) {
                    *gwk += g * xk;
                }
            }
        }
        let scale = cfg.learning_rate / n_train as f64;
        for c in 0..n_classes {
            b[c] -= scale * gb[c];
            for (wk, gk) in w[c].iter_mut().zip(&gw[c]) {
                *wk -= scale * gk + cfg.learning_rate * cfg.l2 * *wk;
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let xi = x(i);
            let pred = (0..n_classes)
                .map(|c| b[c] + dot(&w[c], &xi))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap_or(0);
            pred == labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Projects rows onto their top two principal axes. Each axis is signed so that
/// its largest-magnitude component is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            if k >= d {
                return vec![0.0; d];
            }
            let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if pivot < 0.0 {
                col.iter().map(|v| -v).collect()
            } else {
                col
            }
        })
        .collect();
    (0..n)
        .map(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            [dot(&row, &axes[0]), dot(&row, &axes[1])]
        })
        .collect()
}

/// Centre distance, within-domain cosine, probe accuracy and PCA coordinates.
pub fn embedding_diagnostics(
    rows: &[Vec<f64>],
    domain_of: &[usize],
    n_domains: usize,
    probe: &ProbeConfig,
) -> Result<(Diagnostics, Vec<[f64; 2]>), EvalError> {
    if n_domains < 2 {
        return Err(EvalError::Config("diagnostics need at least 2 domains".into()));
    }
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); n_domains];
    for (r, &dom) in rows.iter().zip(domain_of) {
        groups[dom].push(r.as_slice());
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(EvalError::Config("every domain needs at least one embedding".into()));
    }
    let mut warnings = Vec::new();
    let centers: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut c = vec![0.0; d];
            for r in g {
                for (cv, v) in c.iter_mut().zip(r.iter()) {
                    *cv += v / g.len() as f64;
                }
            }
            c
        })
        .collect();
    let mut dist = 0.0;
    let mut pairs = 0;
    for a in 0..n_domains {
        for b in a + 1..n_domains {
            let diff: Vec<f64> = centers[a].iter().zip(&centers[b]).map(|(x, y)| x - y).collect();
            dist += norm(&diff);
            pairs += 1;
        }
    }
    let spread: f64 = rows
        .iter()
        .map(|r| r.iter().zip(&centers[0]).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    if spread == 0.0 {
        warnings.push("degenerate embedding matrix: all rows identical".to_string());
        log::warn!("degenerate embedding matrix: all rows identical");
    }
    let mean_intra_cosine = groups.iter().map(|g| mean_pairwise_cosine(g)).sum::<f64>() / n_domains as f64;
    let probe_accuracy = linear_probe(rows, domain_of, n_domains, probe);
    Ok((
        Diagnostics {
            center_distance: dist / pairs as f64,
            mean_intra_cosine,
            probe_accuracy,
            n_items: rows.len(),
            warnings,
        },
        pca_2d(rows),
    ))
}

fn io_err(path: &Path, e: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// `metric,value` CSV.
pub fn write_metrics_csv(path: &Path, rows: &[(String, f64)]) -> Result<(), EvalError> {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(|e| io_err(path, e))
}

/// `item_id,domain,x,y` CSV.
pub fn write_pca_csv(path: &Path, rows: &[(String, String, [f64; 2])]) -> Result<(), EvalError> {
    let mut s = String::from("item_id,domain,x,y\n");
    for (id, dom, p) in rows {
        s.push_str(&format!("{id},{dom},{},{}\n", p[0], p[1]));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(|e| io_err(path, e))
}
