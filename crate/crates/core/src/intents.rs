//! Discrete intent set: K-means centroids of user behaviour embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum IntentError {
    #[error("K = {k} exceeds the {distinct} distinct embeddings available")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("invalid k-means config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpace {
    /// `K x d_m`, one centroid per row.
    pub centroids: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 32,
            seed: 7,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub space: IntentSpace,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl IntentSpace {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        self.centroids.row(j)
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign(&self, embedding: &[f64]) -> Result<usize, IntentError> {
        if embedding.len() != self.dim() {
            return Err(IntentError::Dimension {
                expected: self.dim(),
                actual: embedding.len(),
            });
        }
        Ok(nearest(&self.centroids, embedding).0)
    }
}

fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(centroids.row(j), x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding followed by Lloyd iterations. An emptied cluster is
/// re-seeded with the point farthest from its assigned centroid.
pub fn fit_kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansFit, IntentError> {
    let k = config.k;
    if k == 0 || config.max_iters == 0 {
        return Err(IntentError::Config("k and max_iters must be at least 1".into()));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(IntentError::TooFewPoints { k, distinct });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(IntentError::Dimension {
            expected: dim,
            actual: p.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // k-means++
    let mut centroids = Matrix::zeros(k, dim);
    let first = rng.gen_range(0..points.len());
    centroids.row_mut(0).copy_from_slice(&points[first]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            unreachable!("k <= distinct points guarantees a positive distance")
        };
        centroids.row_mut(j).copy_from_slice(&points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        iterations += 1;
        let mut total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(&centroids, p);
            assignments[i] = j;
            total += d;
        }
        inertia.push(total);

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            crate::nn::axpy(1.0, p, sums.row_mut(j));
        }
        for j in 0..k {
            if counts[j] == 0 {
                // farthest point from its current centroid, not already a centroid row
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, centroids.row(assignments[i]))))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                let old = assignments[far];
                counts[old] -= 1;
                crate::nn::axpy(-1.0, &points[far], sums.row_mut(old));
                assignments[far] = j;
                counts[j] = 1;
                sums.row_mut(j).copy_from_slice(&points[far]);
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            let inv = 1.0 / counts[j] as f64;
            let new: Vec<f64> = sums.row(j).iter().map(|x| x * inv).collect();
            shift = shift.max(sq_dist(&new, centroids.row(j)).sqrt());
            centroids.row_mut(j).copy_from_slice(&new);
        }
        if shift < config.tol {
            break;
        }
    }
    // Final assignment against the returned centroids.
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(&centroids, p).0;
    }
    Ok(KMeansFit {
        space: IntentSpace { centroids },
        inertia,
        assignments,
        iterations,
    })
}

/// Cluster purity against ground-truth labels under the best one-to-one
/// matching of clusters to labels (exhaustive over permutations for K ≤ 8,
/// majority label per cluster otherwise).
pub fn cluster_purity(assignments: &[usize], labels: &[usize], k: usize) -> f64 {
    let n_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; n_labels.max(k)]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        table[a][l] += 1;
    }
    let n = assignments.len().max(1) as f64;
    if k <= 8 && n_labels <= 8 {
        let cols = n_labels.max(k);
        let mut perm: Vec<usize> = (0..cols).collect();
        let mut best = 0;
        permute(&mut perm, 0, &mut |p| {
            let s: usize = (0..k).map(|c| table[c][p[c]]).sum();
            best = best.max(s);
        });
        best as f64 / n
    } else {
        table.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum::<usize>() as f64 / n
    }
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}
