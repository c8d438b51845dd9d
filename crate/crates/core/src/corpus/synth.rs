use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, DomainId, DomainMeta, ItemFields, ItemRecord, UserSequence};
use crate::semstore::SemanticStore;

/// Two-domain benchmark generator.
///
/// Item embeddings are `topic_center + noise + bias_strength * domain_offset`.
/// Both domains share the topic centers and the topic-level Markov chain that
/// drives user sequences, so the only systematic difference between domains is
/// the offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub d_h: usize,
    pub bias_strength: f64,
    pub n_latent_topics: usize,
    pub transition_sharpness: f64,
    pub noise_std: f64,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub domain_names: [String; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 5000,
            d_h: 64,
            bias_strength: 3.0,
            n_latent_topics: 16,
            transition_sharpness: 2.0,
            noise_std: 0.5,
            min_seq_len: 5,
            max_seq_len: 12,
            seed: 0,
            domain_names: ["A".to_string(), "B".to_string()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_items == 0 || self.n_users == 0 || self.d_h == 0 {
            return bad("n_items, n_users and d_h must be positive");
        }
        if self.n_latent_topics == 0 || self.n_latent_topics > self.n_items {
            return bad("n_latent_topics must be in 1..=n_items");
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return bad("bias_strength must be finite and non-negative");
        }
        if !(self.transition_sharpness > 0.0 && self.transition_sharpness.is_finite()) {
            return bad("transition_sharpness must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.min_seq_len < 3 || self.max_seq_len < self.min_seq_len {
            return bad("sequence lengths must satisfy 3 <= min_seq_len <= max_seq_len");
        }
        if self.domain_names[0] == self.domain_names[1] {
            return bad("domain names must differ");
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

pub fn synthesize(cfg: &SynthConfig) -> Result<(Corpus, SemanticStore), CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = cfg.n_latent_topics;

    let topic_centers: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(&mut rng, cfg.d_h, 1.0)).collect();

    // Each topic prefers to stay and to move to one successor topic.
    let mut successor: Vec<usize> = (0..t).collect();
    successor.shuffle(&mut rng);
    let transitions: Vec<Vec<f64>> = (0..t)
        .map(|a| {
            let mut w = vec![1.0; t];
            w[a] *= cfg.transition_sharpness.exp();
            w[successor[a]] *= cfg.transition_sharpness.exp();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        })
        .collect();

    let offsets: Vec<Vec<f64>> = (0..2)
        .map(|_| normal_vec(&mut rng, cfg.d_h, cfg.bias_strength))
        .collect();

    let domains: Vec<DomainMeta> = cfg
        .domain_names
        .iter()
        .map(|n| DomainMeta { name: n.clone() })
        .collect();

    let mut items = Vec::with_capacity(2 * cfg.n_items);
    let mut ids = Vec::with_capacity(2 * cfg.n_items);
    let mut rows: Vec<f32> = Vec::with_capacity(2 * cfg.n_items * cfg.d_h);
    // topic -> item indices, per domain
    let mut by_topic: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); t]; 2];

    for (d, name) in cfg.domain_names.iter().enumerate() {
        // Balanced topic assignment so topic proportions are identical across
        // domains.
        let mut topics: Vec<usize> = (0..cfg.n_items).map(|j| j % t).collect();
        topics.shuffle(&mut rng);
        for (j, &topic) in topics.iter().enumerate() {
            let noise = normal_vec(&mut rng, cfg.d_h, cfg.noise_std);
            for c in 0..cfg.d_h {
                rows.push((topic_centers[topic][c] + noise[c] + offsets[d][c]) as f32);
            }
            let item_id = format!("{name}:i{j:05}");
            let fields = ItemFields {
                title: format!("{name} item {j}"),
                features: format!("synthetic; domain {name}"),
                description: format!("Generated catalog entry {j} of domain {name}."),
            };
            by_topic[d][topic].push(items.len());
            items.push(ItemRecord {
                item_id: item_id.clone(),
                domain: DomainId(d as u32),
                text: fields.render(),
                fields,
            });
            ids.push(item_id);
        }
    }

    let mut users = Vec::with_capacity(2 * cfg.n_users);
    for (d, name) in cfg.domain_names.iter().enumerate() {
        for u in 0..cfg.n_users {
            let len = rng.gen_range(cfg.min_seq_len..=cfg.max_seq_len);
            let mut topic = rng.gen_range(0..t);
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                let pool = &by_topic[d][topic];
                seq.push(pool[rng.gen_range(0..pool.len())]);
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                let mut next = t - 1;
                for (b, p) in transitions[topic].iter().enumerate() {
                    acc += p;
                    if r < acc {
                        next = b;
                        break;
                    }
                }
                topic = next;
            }
            let start = 1_600_000_000i64 + rng.gen_range(0..86_400i64);
            users.push(UserSequence {
                user_id: format!("{name}:u{u:05}"),
                timestamps: (0..len as i64).map(|k| start + 3600 * k).collect(),
                items: seq,
            });
        }
    }

    let corpus = Corpus::from_parts(domains, items, users)?;
    let store = SemanticStore::new(cfg.d_h, ids, rows)
        .map_err(|e| CorpusError::Invalid(format!("synthetic store: {e}")))?;
    Ok((corpus, store))
}
