//! Planted-topic behavior logs with known per-user interests.
//!
//! Topic `t` owns the token range `[t * tokens_per_topic, (t + 1) * tokens_per_topic)`
//! of a pool of `vocab_size` tokens. Each user picks between one and
//! `topics_per_user` topics, a mixture over them, and for every topic a
//! personal subset of that topic's tokens. A behavior first draws a topic
//! from the mixture and then draws each word from the user's subset for
//! that topic, or with probability `noise` uniformly from the whole pool.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::dataset::{prepare_users, Payload, RawBehavior, UserLog};
use super::vocab::Vocabulary;
use super::window::{Interval, Truncation, WindowBounds, WindowedUser};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub topics: usize,
    pub tokens_per_topic: usize,
    /// Size of the token pool; topics must fit in it without overlapping.
    pub vocab_size: usize,
    /// Maximum number of topics a user mixes (k_u).
    pub topics_per_user: usize,
    /// Size of a user's personal subset of each of their topics.
    pub tokens_per_user_topic: usize,
    pub behaviors_per_window: usize,
    pub words_per_behavior: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 2000,
            topics: 8,
            tokens_per_topic: 100,
            vocab_size: 800,
            topics_per_user: 2,
            tokens_per_user_topic: 25,
            behaviors_per_window: 20,
            words_per_behavior: 5,
            noise: 0.1,
            seed: 17,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("topics", self.topics),
            ("tokens_per_topic", self.tokens_per_topic),
            ("topics_per_user", self.topics_per_user),
            ("tokens_per_user_topic", self.tokens_per_user_topic),
            ("behaviors_per_window", self.behaviors_per_window),
            ("words_per_behavior", self.words_per_behavior),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("synthetic {name} must be positive")));
            }
        }
        if self.topics * self.tokens_per_topic > self.vocab_size {
            return Err(Error::config(format!(
                "{} topics x {} tokens do not fit disjointly in a pool of {}",
                self.topics, self.tokens_per_topic, self.vocab_size
            )));
        }
        if self.topics_per_user > self.topics {
            return Err(Error::config("topics_per_user exceeds topics"));
        }
        if self.tokens_per_user_topic > self.tokens_per_topic {
            return Err(Error::config("tokens_per_user_topic exceeds tokens_per_topic"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise must be in [0, 1), got {}", self.noise)));
        }
        Ok(())
    }

    /// History is `[1, n]`, the short window `[n+1, 2n]`, the long window `[n+1, 3n]`.
    pub fn bounds(&self) -> WindowBounds {
        let n = self.behaviors_per_window as i64;
        WindowBounds {
            history: Interval::new(1, n),
            short: Interval::new(n + 1, 2 * n),
            long: Interval::new(n + 1, 3 * n),
        }
    }

    /// Tokens owned by a topic.
    pub fn topic_tokens(&self, topic: usize) -> std::ops::Range<usize> {
        topic * self.tokens_per_topic..(topic + 1) * self.tokens_per_topic
    }
}

pub fn token_name(index: usize) -> String {
    format!("w{index}")
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub logs: Vec<UserLog>,
    /// Dominant (largest-weight) topic per user.
    pub labels: BTreeMap<String, usize>,
    /// Topics each user draws from, dominant first.
    pub user_topics: BTreeMap<String, Vec<usize>>,
}

impl SyntheticDataset {
    pub fn vocabulary(&self, max_size: usize) -> Result<Vocabulary> {
        Vocabulary::build(self.logs.iter().flat_map(|l| l.corpus_tokens()), max_size)
    }

    pub fn windowed(&self, vocab: &Vocabulary, truncation: &Truncation) -> Result<Vec<WindowedUser>> {
        prepare_users(&self.logs, &self.config.bounds(), vocab, truncation)
    }
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let mut u: f64 = rng.gen();
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.behaviors_per_window;
    let total_behaviors = 3 * n;

    let mut logs = Vec::with_capacity(config.users);
    let mut labels = BTreeMap::new();
    let mut user_topics = BTreeMap::new();
    for u in 0..config.users {
        let user_id = format!("u{u:05}");
        let count = rng.gen_range(1..=config.topics_per_user);
        let topics: Vec<usize> = sample(&mut rng, config.topics, count).into_vec();
        // the first sampled topic is dominant
        let weights: Vec<f64> = if count == 1 {
            vec![1.0]
        } else {
            let dominant = rng.gen_range(0.65..0.9);
            let rest: Vec<f64> = (1..count).map(|_| rng.gen_range(0.1..1.0)).collect();
            let z: f64 = rest.iter().sum();
            std::iter::once(dominant)
                .chain(rest.iter().map(|r| (1.0 - dominant) * r / z))
                .collect()
        };
        let subsets: Vec<Vec<usize>> = topics
            .iter()
            .map(|&t| {
                let base = config.topic_tokens(t).start;
                sample(&mut rng, config.tokens_per_topic, config.tokens_per_user_topic)
                    .into_iter()
                    .map(|i| base + i)
                    .collect()
            })
            .collect();

        let mut behaviors = Vec::with_capacity(total_behaviors);
        for ts in 1..=total_behaviors as i64 {
            let k = sample_weighted(&mut rng, &weights);
            let words = (0..config.words_per_behavior)
                .map(|_| {
                    let tok = if rng.gen::<f64>() < config.noise {
                        rng.gen_range(0..config.vocab_size)
                    } else {
                        subsets[k][rng.gen_range(0..subsets[k].len())]
                    };
                    token_name(tok)
                })
                .collect();
            behaviors.push(RawBehavior {
                ts,
                payload: Payload::Tokens(words),
            });
        }
        labels.insert(user_id.clone(), topics[0]);
        user_topics.insert(user_id.clone(), topics);
        logs.push(UserLog { user_id, behaviors });
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        logs,
        labels,
        user_topics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            users: 50,
            ..SyntheticConfig::default()
        }
    }

    fn token_index(t: &str) -> usize {
        t[1..].parse().unwrap()
    }

    #[test]
    fn noiseless_single_topic_stays_in_topic() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            topics_per_user: 1,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for log in &ds.logs {
            let topic = ds.labels[&log.user_id];
            let range = cfg.topic_tokens(topic);
            assert!(log.corpus_tokens().all(|t| range.contains(&token_index(t))));
        }
    }

    #[test]
    fn noiseless_tokens_subset_of_planted_topics() {
        let cfg = SyntheticConfig { noise: 0.0, ..small() };
        let ds = generate_synthetic(&cfg).unwrap();
        for log in &ds.logs {
            let topics = &ds.user_topics[&log.user_id];
            assert!(log
                .corpus_tokens()
                .all(|t| topics.iter().any(|&k| cfg.topic_tokens(k).contains(&token_index(t)))));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        crate::data::write_jsonl(&pa, &a.logs).unwrap();
        crate::data::write_jsonl(&pb, &b.logs).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        assert_eq!(a.labels, b.labels);
        let c = generate_synthetic(&SyntheticConfig { seed: 99, ..small() }).unwrap();
        assert_ne!(a.logs, c.logs);
    }

    #[test]
    fn dominant_topics_roughly_uniform() {
        let cfg = SyntheticConfig {
            users: 2000,
            behaviors_per_window: 2,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut counts = [0usize; 8];
        for &l in ds.labels.values() {
            counts[l] += 1;
        }
        for c in counts {
            let frac = c as f64 / 2000.0;
            assert!((frac - 0.125).abs() < 0.03, "{counts:?}");
        }
    }

    #[test]
    fn config_errors() {
        let overlap = SyntheticConfig {
            vocab_size: 799,
            ..small()
        };
        assert!(matches!(generate_synthetic(&overlap), Err(Error::Config(_))));
        let too_many = SyntheticConfig {
            topics_per_user: 9,
            ..small()
        };
        assert!(generate_synthetic(&too_many).is_err());
        let bad_noise = SyntheticConfig { noise: 1.0, ..small() };
        assert!(generate_synthetic(&bad_noise).is_err());
    }

    #[test]
    fn windows_are_populated() {
        let ds = generate_synthetic(&small()).unwrap();
        let vocab = ds.vocabulary(50_000).unwrap();
        let users = ds.windowed(&vocab, &Truncation::default()).unwrap();
        for u in &users {
            assert_eq!(u.history.len(), 20);
            assert_eq!(u.short.len(), 20);
            assert_eq!(u.long.len(), 25);
            assert!(u.history.iter().all(|b| b.tokens.len() == 5));
        }
    }
}
