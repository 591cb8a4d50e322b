//! Seeded synthetic base-model outputs for exercising the stacker.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmax, one_hot, stack_features, FeatureVector};

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
    /// Class predicted by the discrete base model.
    pub base_a: Vec<usize>,
    /// Argmax of the probabilistic base model.
    pub base_b: Vec<usize>,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n - holdout` examples for training, the rest held out.
    pub fn split(&self, holdout: usize) -> (SyntheticSet, SyntheticSet) {
        let cut = self.len().saturating_sub(holdout);
        let part = |r: std::ops::Range<usize>| SyntheticSet {
            features: self.features[r.clone()].to_vec(),
            labels: self.labels[r.clone()].to_vec(),
            base_a: self.base_a[r.clone()].to_vec(),
            base_b: self.base_b[r].to_vec(),
        };
        (part(0..cut), part(cut..self.len()))
    }
}

fn other_class(rng: &mut ChaCha8Rng, k: usize, not: usize) -> usize {
    let choices: Vec<usize> = (0..k).filter(|&c| c != not).collect();
    *choices.choose(rng).expect("k >= 2")
}

/// Distribution with `mass` on `peak` and the rest spread over the other
/// classes with random weights in `[1, 2]`.
fn peaked(rng: &mut ChaCha8Rng, k: usize, peak: usize, mass: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..k)
        .map(|c| {
            if c == peak {
                0.0
            } else {
                rng.random_range(1.0..2.0)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total * (1.0 - mass)).collect();
    probs[peak] = mass;
    // Fold rounding error into the peak so the sum is 1 to within an ulp or two.
    let drift = 1.0 - probs.iter().sum::<f64>();
    probs[peak] += drift;
    probs
}

fn push(set: &mut SyntheticSet, a: usize, probs: Vec<f64>, label: usize) {
    let k = probs.len();
    set.base_b.push(argmax(&probs));
    set.base_a.push(a);
    set.features
        .push(stack_features(&one_hot(a, k).expect("a < k"), &probs).expect("valid features"));
    set.labels.push(label);
}

/// Base models whose errors fall in disjoint, feature-identifiable regions:
///
/// * 30%: A right; B wrong but unconfident (peak 0.22–0.30 on a wrong class)
/// * 30%: A wrong; B right and confident (0.90–0.99 on the true class)
/// * 40%: both right, B confident
///
/// "Trust B when its peak is high, otherwise trust A" separates all three,
/// and is expressible as a diagonal linear rule. Needs `k >= 8` so the
/// unconfident peak stays the argmax of B.
pub fn complementary(k: usize, n: usize, seed: u64) -> SyntheticSet {
    assert!(
        k >= 8,
        "complementary construction needs at least 8 classes"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SyntheticSet {
        features: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        base_a: Vec::with_capacity(n),
        base_b: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let y = rng.random_range(0..k);
        let region: f64 = rng.random();
        if region < 0.3 {
            let wrong = other_class(&mut rng, k, y);
            let mass = rng.random_range(0.22..0.30);
            let probs = peaked(&mut rng, k, wrong, mass);
            push(&mut set, y, probs, y);
        } else if region < 0.6 {
            let wrong = other_class(&mut rng, k, y);
            let mass = rng.random_range(0.90..0.99);
            let probs = peaked(&mut rng, k, y, mass);
            push(&mut set, wrong, probs, y);
        } else {
            let mass = rng.random_range(0.90..0.99);
            let probs = peaked(&mut rng, k, y, mass);
            push(&mut set, y, probs, y);
        }
    }
    set
}

/// Labels equal A's prediction; B is an unrelated random distribution.
pub fn a_perfect(k: usize, n: usize, seed: u64) -> SyntheticSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = SyntheticSet {
        features: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        base_a: Vec::with_capacity(n),
        base_b: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let y = rng.random_range(0..k);
        let peak = rng.random_range(0..k);
        let mass = rng.random_range(0.2..0.9);
        let probs = peaked(&mut rng, k, peak, mass);
        push(&mut set, y, probs, y);
    }
    set
}
