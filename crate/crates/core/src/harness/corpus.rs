//! Synthetic corpora with known structure.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::dataset::InstructionRecord;
use crate::rng::substream;

pub const DIALECT_WORDS: usize = 8;

/// Which transformation a two-dialect record asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dialect {
    /// Words `a0..a7`; the response shifts every word up by one, cyclically.
    Shift,
    /// Words `b0..b7`; the response is the instruction reversed.
    Reverse,
}

impl Dialect {
    pub fn tag(self) -> &'static str {
        match self {
            Dialect::Shift => "dialect-a",
            Dialect::Reverse => "dialect-b",
        }
    }
}

fn dialect_record(dialect: Dialect, words: &[usize], id: String) -> InstructionRecord {
    let (instruction, response) = match dialect {
        Dialect::Shift => (
            words.iter().map(|w| format!("a{w}")).collect::<Vec<_>>(),
            words
                .iter()
                .map(|w| format!("a{}", (w + 1) % DIALECT_WORDS))
                .collect::<Vec<_>>(),
        ),
        Dialect::Reverse => (
            words.iter().map(|w| format!("b{w}")).collect::<Vec<_>>(),
            words
                .iter()
                .rev()
                .map(|w| format!("b{w}"))
                .collect::<Vec<_>>(),
        ),
    };
    InstructionRecord {
        id,
        instruction: instruction.join(" "),
        response: response.join(" "),
        source: Some(dialect.tag().to_string()),
    }
}

/// Train and held-out two-dialect sets with `len`-word instructions and no shared prompts.
///
/// Each record picks its dialect with probability one half.
pub fn two_dialect_split(
    n_train: usize,
    n_test: usize,
    len: usize,
    seed: u64,
) -> (Vec<InstructionRecord>, Vec<InstructionRecord>) {
    let mut rng = substream(seed, "corpus/two-dialect");
    let mut seen = HashSet::new();
    let mut draw = |prefix: &str, count: usize, rng: &mut crate::rng::Rng| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let dialect = if rng.gen_bool(0.5) {
                Dialect::Shift
            } else {
                Dialect::Reverse
            };
            let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..DIALECT_WORDS)).collect();
            if !seen.insert((dialect, words.clone())) {
                continue;
            }
            out.push(dialect_record(
                dialect,
                &words,
                format!("{prefix}-{:05}", out.len()),
            ));
        }
        out
    };
    let train = draw("train", n_train, &mut rng);
    let test = draw("test", n_test, &mut rng);
    (train, test)
}

pub fn two_dialect_corpus(n: usize, len: usize, seed: u64) -> Vec<InstructionRecord> {
    two_dialect_split(n, 0, len, seed).0
}

/// Copy tasks in which `dominance` of all words are the single word `s0`.
///
/// Token representations are nearly identical, which pushes every router toward one expert.
pub fn skewed_corpus(n: usize, len: usize, dominance: f64, seed: u64) -> Vec<InstructionRecord> {
    let mut rng = substream(seed, "corpus/skewed");
    (0..n)
        .map(|i| {
            let words: Vec<String> = (0..len)
                .map(|_| {
                    if rng.gen_bool(dominance) {
                        "s0".to_string()
                    } else {
                        format!("s{}", rng.gen_range(1..DIALECT_WORDS))
                    }
                })
                .collect();
            let text = words.join(" ");
            InstructionRecord {
                id: format!("skew-{i:05}"),
                instruction: text.clone(),
                response: text,
                source: Some("skewed".into()),
            }
        })
        .collect()
}

/// Copy tasks over blob-private vocabularies `v{blob}w0..v{blob}w7`.
///
/// Records cycle through `blobs` in order, so each blob gets an equal share.
pub fn vocabulary_blob_corpus(
    n: usize,
    blobs: &[usize],
    len: usize,
    seed: u64,
) -> Vec<InstructionRecord> {
    let mut rng = substream(seed, "corpus/blobs");
    (0..n)
        .map(|i| {
            let b = blobs[i % blobs.len()];
            let text = (0..len)
                .map(|_| format!("v{b}w{}", rng.gen_range(0..DIALECT_WORDS)))
                .collect::<Vec<_>>()
                .join(" ");
            InstructionRecord {
                id: format!("blob{b}-{i:05}"),
                instruction: text.clone(),
                response: text,
                source: Some(format!("blob{b}")),
            }
        })
        .collect()
}

/// Points drawn from isotropic Gaussian blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBlobs {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Root-mean-square distance of a point from its blob center, `σ·√dim`.
    pub radius: f64,
}

/// `n` points in `dim` dimensions around `k` random centers whose pairwise
/// distances are all at least `separation × radius`. Points are split as evenly
/// as possible and shuffled.
pub fn planted_blobs(k: usize, n: usize, dim: usize, separation: f64, seed: u64) -> PlantedBlobs {
    let mut rng = substream(seed, "corpus/planted-blobs");
    let sigma = 1.0;
    let radius = sigma * (dim as f64).sqrt();
    let min_dist = separation * radius;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // centers ~ N(0, s²I) with s chosen so typical pairwise distance is 1.5 × min_dist
    let spread = 1.5 * min_dist / (2.0 * dim as f64).sqrt();
    let centers = loop {
        let cs: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| spread * normal.sample(&mut rng)).collect())
            .collect();
        let ok = (0..k).all(|i| {
            (i + 1..k).all(|j| {
                cs[i]
                    .iter()
                    .zip(&cs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    >= min_dist
            })
        });
        if ok {
            break cs;
        }
    };
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let points = labels
        .iter()
        .map(|&l| {
            centers[l]
                .iter()
                .map(|c| c + sigma * normal.sample(&mut rng))
                .collect()
        })
        .collect();
    PlantedBlobs {
        points,
        labels,
        centers,
        radius,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dialects_follow_their_rules() {
        let (train, test) = two_dialect_split(200, 50, 4, 1);
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 50);
        let prompts: HashSet<&str> = train.iter().map(|r| r.instruction.as_str()).collect();
        assert!(test
            .iter()
            .all(|r| !prompts.contains(r.instruction.as_str())));
        for r in train.iter().chain(&test) {
            let ins: Vec<&str> = r.instruction.split(' ').collect();
            let res: Vec<&str> = r.response.split(' ').collect();
            assert_eq!(ins.len(), 4);
            if r.source.as_deref() == Some("dialect-a") {
                for (i, o) in ins.iter().zip(&res) {
                    let a: usize = i[1..].parse().unwrap();
                    assert_eq!(*o, format!("a{}", (a + 1) % 8));
                }
            } else {
                assert!(ins.iter().rev().eq(res.iter()));
            }
        }
        let a = train
            .iter()
            .filter(|r| r.source.as_deref() == Some("dialect-a"))
            .count();
        assert!((60..140).contains(&a));
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(two_dialect_corpus(30, 5, 3), two_dialect_corpus(30, 5, 3));
        assert_ne!(two_dialect_corpus(30, 5, 3), two_dialect_corpus(30, 5, 4));
        assert_eq!(skewed_corpus(10, 6, 0.8, 1), skewed_corpus(10, 6, 0.8, 1));
    }

    #[test]
    fn planted_blobs_respect_separation() {
        let b = planted_blobs(4, 200, 8, 10.0, 2);
        assert_eq!(b.points.len(), 200);
        for i in 0..4 {
            assert_eq!(b.labels.iter().filter(|l| **l == i).count(), 50);
            for j in i + 1..4 {
                let d: f64 = b.centers[i]
                    .iter()
                    .zip(&b.centers[j])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 10.0 * b.radius);
            }
        }
    }
}
