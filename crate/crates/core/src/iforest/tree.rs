use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
/// Below this the harmonic number is summed exactly.
const EXACT_HARMONIC_LIMIT: usize = 10_000;

fn harmonic(m: usize) -> f64 {
    if m <= EXACT_HARMONIC_LIMIT {
        (1..=m).map(|k| 1.0 / k as f64).sum()
    } else {
        let m = m as f64;
        m.ln() + EULER_GAMMA + 1.0 / (2.0 * m) - 1.0 / (12.0 * m * m)
    }
}

/// Average unsuccessful-search path length in a binary search tree of `n`
/// points; `c(0) = c(1) = 0` by convention.
pub(crate) fn path_normalizer(n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    2.0 * harmonic(n - 1) - 2.0 * (nf - 1.0) / nf
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        size: usize,
    },
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    fn build(data: &[Vec<f64>], sample: Vec<usize>, height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow(data, sample, 0, height_limit, rng);
        tree
    }

    fn grow(
        &mut self,
        data: &[Vec<f64>],
        rows: Vec<usize>,
        depth: usize,
        height_limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= height_limit || rows.len() <= 1 {
            return id;
        }
        let n_features = data[rows[0]].len();
        // Only attributes that still vary inside this node can split it.
        let candidates: Vec<(usize, f64, f64)> = (0..n_features)
            .filter_map(|f| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    (lo.min(data[r][f]), hi.max(data[r][f]))
                });
                (lo < hi).then_some((f, lo, hi))
            })
            .collect();
        if candidates.is_empty() {
            return id;
        }
        let (feature, lo, hi) = candidates[rng.random_range(0..candidates.len())];
        let value = rng.random_range(lo..hi);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| data[r][feature] < value);
        let left = self.grow(data, left_rows, depth + 1, height_limit, rng);
        let right = self.grow(data, right_rows, depth + 1, height_limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        id
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                Node::Leaf { size } => return depth as f64 + path_normalizer(*size),
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *value { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }
}

/// Ensemble of isolation trees over dense feature rows.
///
/// Tree `t` draws from its own ChaCha stream (`seed`, stream `t`), so parallel
/// construction yields the same forest as sequential construction.
#[derive(Debug, Clone)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample_size: usize,
}

impl IsolationForest {
    /// `subsample_size` is clamped to `data.len()`. `data` must be non-empty
    /// with rows of equal width.
    pub fn fit(data: &[Vec<f64>], n_trees: usize, subsample_size: usize, seed: u64) -> Self {
        assert!(!data.is_empty(), "isolation forest needs at least one row");
        let psi = subsample_size.clamp(1, data.len());
        let height_limit = (psi as f64).log2().ceil() as usize;
        let trees = (0..n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let sample = index::sample(&mut rng, data.len(), psi).into_vec();
                IsolationTree::build(data, sample, height_limit, &mut rng)
            })
            .collect();
        IsolationForest {
            trees,
            subsample_size: psi,
        }
    }

    pub fn subsample_size(&self) -> usize {
        self.subsample_size
    }

    /// Mean path length E[h(x)] over the trees, summed in tree order.
    pub fn expected_path_length(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        total / self.trees.len() as f64
    }

    /// `2^(−E[h(x)] / c(ψ))`; 0.5 when the normalizer vanishes (ψ = 1).
    pub fn score(&self, x: &[f64]) -> f64 {
        score_from_path_length(self.expected_path_length(x), self.subsample_size)
    }

    pub fn score_all(&self, data: &[Vec<f64>]) -> Vec<f64> {
        data.par_iter().map(|x| self.score(x)).collect()
    }
}

pub fn score_from_path_length(expected_path_length: f64, subsample_size: usize) -> f64 {
    let c = path_normalizer(subsample_size);
    if c == 0.0 {
        return 0.5;
    }
    (-expected_path_length / c).exp2()
}
