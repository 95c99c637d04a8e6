//! Mixed contextual stochastic block model: every node is either homophilic
//! (intra-class edges more likely) or heterophilic (inter-class more likely),
//! with the two regimes degree-matched. Features are class-conditional
//! Gaussians with covariance I/d.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, LabelVector};
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Which edge regime governs a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Homophilic,
    Heterophilic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsbmParams {
    pub n: usize,
    pub d: usize,
    /// Class-0 feature mean; norm must not exceed 1.
    pub mu: Vec<f64>,
    /// Class-1 feature mean; norm must not exceed 1.
    pub nu: Vec<f64>,
    /// Intra/inter edge probabilities for homophilic nodes (p0 > q0).
    pub p0: f64,
    pub q0: f64,
    /// Intra/inter edge probabilities for heterophilic nodes (p1 < q1).
    pub p1: f64,
    pub q1: f64,
    /// Probability that a node is homophilic.
    pub prob_homophilic: f64,
    pub seed: u64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl CsbmParams {
    /// Convenience constructor: means along +/- the all-ones direction with
    /// the requested distance between them.
    pub fn with_mean_distance(
        n: usize,
        d: usize,
        (p0, q0): (f64, f64),
        (p1, q1): (f64, f64),
        prob_homophilic: f64,
        mean_distance: f64,
        seed: u64,
    ) -> Result<CsbmParams> {
        if !(mean_distance > 0.0 && mean_distance <= 2.0) {
            return Err(Error::invalid(
                "mean distance must lie in (0, 2] so that both means have norm <= 1",
            ));
        }
        let half = mean_distance / 2.0;
        let coord = half / (d as f64).sqrt();
        let params = CsbmParams {
            n,
            d,
            mu: vec![coord; d],
            nu: vec![-coord; d],
            p0,
            q0,
            p1,
            q1,
            prob_homophilic,
            seed,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("need at least 2 nodes"));
        }
        if self.d == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if self.mu.len() != self.d || self.nu.len() != self.d {
            return Err(Error::invalid("mean vectors must have length d"));
        }
        if norm(&self.mu) > 1.0 + 1e-12 || norm(&self.nu) > 1.0 + 1e-12 {
            return Err(Error::invalid("class means must have norm <= 1"));
        }
        for (name, v) in [
            ("p0", self.p0),
            ("q0", self.q0),
            ("p1", self.p1),
            ("q1", self.q1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name}={v} outside [0, 1]")));
            }
        }
        if self.p0 <= self.q0 {
            return Err(Error::invalid("homophilic regime requires p0 > q0"));
        }
        if self.p1 >= self.q1 {
            return Err(Error::invalid("heterophilic regime requires p1 < q1"));
        }
        if ((self.p0 + self.q0) - (self.p1 + self.q1)).abs() > 1e-12 {
            return Err(Error::invalid(
                "degree matching requires p0 + q0 == p1 + q1",
            ));
        }
        if !(0.0..=1.0).contains(&self.prob_homophilic) {
            return Err(Error::invalid("pattern probability outside [0, 1]"));
        }
        Ok(())
    }

    pub fn mean_distance(&self) -> f64 {
        self.mu
            .iter()
            .zip(&self.nu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Expected row-normalized-adjacency-filtered feature mean for the given
    /// class and pattern: (p mu + q nu)/(p + q) for class 0, with the roles
    /// of mu and nu swapped for class 1.
    pub fn expected_filtered_mean(&self, class: usize, pattern: Pattern) -> Vec<f64> {
        let (p, q) = match pattern {
            Pattern::Homophilic => (self.p0, self.q0),
            Pattern::Heterophilic => (self.p1, self.q1),
        };
        let (own, other): (&[f64], &[f64]) = if class == 0 {
            (&self.mu, &self.nu)
        } else {
            (&self.nu, &self.mu)
        };
        own.iter()
            .zip(other)
            .map(|(a, b)| (p * a + q * b) / (p + q))
            .collect()
    }
}

/// A generated sample: graph, features, labels, and per-node pattern flags.
#[derive(Debug, Clone)]
pub struct CsbmSample {
    pub graph: Graph,
    pub features: Matrix,
    pub labels: LabelVector,
    pub patterns: Vec<Pattern>,
}

impl CsbmSample {
    pub fn pattern_indices(&self, pattern: Pattern) -> Vec<usize> {
        self.patterns
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == pattern)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draw a sample. The RNG stream is consumed in a fixed order (labels,
/// patterns, features, then one draw per node pair i < j), so a given seed
/// always produces a bit-identical sample. For a pair (i, j) with i < j the
/// edge probability comes from the lower-indexed node's pattern, which keeps
/// a single draw per pair while preserving the marginal edge rates.
pub fn generate(params: &CsbmParams) -> Result<CsbmSample> {
    params.validate()?;
    let n = params.n;
    let d = params.d;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let labels: Vec<usize> = (0..n)
        .map(|_| if rng.random::<f64>() < 0.5 { 0 } else { 1 })
        .collect();
    let patterns: Vec<Pattern> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < params.prob_homophilic {
                Pattern::Homophilic
            } else {
                Pattern::Heterophilic
            }
        })
        .collect();

    let mut features = Matrix::zeros(n, d);
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..n {
        let mean = if labels[i] == 0 { &params.mu } else { &params.nu };
        let row = features.row_mut(i);
        for (x, &m) in row.iter_mut().zip(mean) {
            let z: f64 = rng.sample(StandardNormal);
            *x = m + z * scale;
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        let (p, q) = match patterns[i] {
            Pattern::Homophilic => (params.p0, params.q0),
            Pattern::Heterophilic => (params.p1, params.q1),
        };
        for j in (i + 1)..n {
            let prob = if labels[i] == labels[j] { p } else { q };
            if rng.random::<f64>() < prob {
                edges.push((i, j));
            }
        }
    }

    Ok(CsbmSample {
        graph: Graph::build(&edges, n)?,
        features,
        labels: LabelVector::new(labels, 2)?,
        patterns,
    })
}

/// A sample with row-conditional neighborhoods: node i's neighbor list is
/// drawn with node i's own pattern rates. Labels, patterns, and features
/// coincide with [`generate`] for the same params (the RNG stream is laid
/// out identically up to the edge draws).
///
/// This is the object the separability analysis studies. An undirected graph
/// cannot give both endpoints of a mixed-pattern pair their own rates, so
/// the per-node filtered-feature statistics hold only in this row-wise form.
#[derive(Debug, Clone)]
pub struct RowConditionalSample {
    pub neighborhoods: Vec<Vec<usize>>,
    pub features: Matrix,
    pub labels: LabelVector,
    pub patterns: Vec<Pattern>,
}

impl RowConditionalSample {
    pub fn pattern_indices(&self, pattern: Pattern) -> Vec<usize> {
        self.patterns
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == pattern)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-normalized neighbor mean of the features (the low-pass filter
    /// D^{-1} A with A the row-conditional adjacency). Rows without
    /// neighbors stay zero.
    pub fn filtered_features(&self) -> Matrix {
        let n = self.features.rows();
        let d = self.features.cols();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let nbrs = &self.neighborhoods[i];
            if nbrs.is_empty() {
                continue;
            }
            let inv = 1.0 / nbrs.len() as f64;
            let row = out.row_mut(i);
            for &j in nbrs {
                for (o, &v) in row.iter_mut().zip(self.features.row(j)) {
                    *o += inv * v;
                }
            }
        }
        out
    }
}

pub fn generate_row_conditional(params: &CsbmParams) -> Result<RowConditionalSample> {
    params.validate()?;
    let n = params.n;
    let d = params.d;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let labels: Vec<usize> = (0..n)
        .map(|_| if rng.random::<f64>() < 0.5 { 0 } else { 1 })
        .collect();
    let patterns: Vec<Pattern> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < params.prob_homophilic {
                Pattern::Homophilic
            } else {
                Pattern::Heterophilic
            }
        })
        .collect();
    let mut features = Matrix::zeros(n, d);
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..n {
        let mean = if labels[i] == 0 { &params.mu } else { &params.nu };
        let row = features.row_mut(i);
        for (x, &m) in row.iter_mut().zip(mean) {
            let z: f64 = rng.sample(StandardNormal);
            *x = m + z * scale;
        }
    }

    let mut neighborhoods = Vec::with_capacity(n);
    for i in 0..n {
        let (p, q) = match patterns[i] {
            Pattern::Homophilic => (params.p0, params.q0),
            Pattern::Heterophilic => (params.p1, params.q1),
        };
        let mut nbrs = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let prob = if labels[i] == labels[j] { p } else { q };
            if rng.random::<f64>() < prob {
                nbrs.push(j);
            }
        }
        neighborhoods.push(nbrs);
    }

    Ok(RowConditionalSample {
        neighborhoods,
        features,
        labels: LabelVector::new(labels, 2)?,
        patterns,
    })
}
