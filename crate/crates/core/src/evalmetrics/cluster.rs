//! Spherical k-means, purity and normalized mutual information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;

pub const MAX_ITERATIONS: usize = 100;
/// Independent k-means++ restarts; the lowest-objective run is kept.
pub const DEFAULT_RESTARTS: usize = 10;

/// `|cluster_k ∩ class_j|` counts with class labels in first-seen order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub classes: Vec<String>,
    /// `counts[k][j]`, one row per cluster index `0..K`.
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
}

impl Contingency {
    pub fn new<L: AsRef<str>>(assignments: &[usize], labels: &[L]) -> Result<Self, MetricError> {
        if assignments.len() != labels.len() {
            return Err(MetricError::LengthMismatch {
                left: assignments.len(),
                right: labels.len(),
            });
        }
        if assignments.is_empty() {
            return Err(MetricError::Empty);
        }
        let mut classes: Vec<String> = Vec::new();
        let mut class_idx = Vec::with_capacity(labels.len());
        for l in labels {
            let l = l.as_ref();
            let j = match classes.iter().position(|c| c == l) {
                Some(j) => j,
                None => {
                    classes.push(l.to_string());
                    classes.len() - 1
                }
            };
            class_idx.push(j);
        }
        let k = assignments.iter().max().unwrap() + 1;
        let mut counts = vec![vec![0; classes.len()]; k];
        for (&a, &j) in assignments.iter().zip(&class_idx) {
            counts[a][j] += 1;
        }
        Ok(Self {
            classes,
            counts,
            n: assignments.len(),
        })
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.classes.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn purity(&self) -> f64 {
        let dominant: usize = self
            .counts
            .iter()
            .map(|r| r.iter().copied().max().unwrap_or(0))
            .sum();
        dominant as f64 / self.n as f64
    }

    /// `2 I / (H(clusters) + H(classes))` with natural logs.
    ///
    /// Both entropies zero gives 1; exactly one zero gives 0.
    pub fn nmi(&self) -> f64 {
        let n = self.n as f64;
        let entropy = |sizes: &[usize]| -> f64 {
            sizes
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        let a = self.cluster_sizes();
        let b = self.class_sizes();
        let h_a = entropy(&a);
        let h_b = entropy(&b);
        if h_a == 0.0 && h_b == 0.0 {
            return 1.0;
        }
        if h_a == 0.0 || h_b == 0.0 {
            return 0.0;
        }
        let mut mi = 0.0;
        for (k, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (n * c / (a[k] as f64 * b[j] as f64)).ln();
                }
            }
        }
        (2.0 * mi / (h_a + h_b)).clamp(0.0, 1.0)
    }
}

pub fn purity<L: AsRef<str>>(assignments: &[usize], labels: &[L]) -> Result<f64, MetricError> {
    Ok(Contingency::new(assignments, labels)?.purity())
}

pub fn nmi<L: AsRef<str>>(assignments: &[usize], labels: &[L]) -> Result<f64, MetricError> {
    Ok(Contingency::new(assignments, labels)?.nmi())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub assignments: Vec<usize>,
    pub labels: Vec<String>,
    pub k: usize,
    pub contingency: Contingency,
    pub purity: f64,
    pub nmi: f64,
}

impl ClusterReport {
    pub fn new(
        assignments: Vec<usize>,
        labels: Vec<String>,
        k: usize,
    ) -> Result<Self, MetricError> {
        let mut contingency = Contingency::new(&assignments, &labels)?;
        // keep a row for every requested cluster, even empty ones
        while contingency.counts.len() < k {
            contingency.counts.push(vec![0; contingency.classes.len()]);
        }
        Ok(Self {
            purity: contingency.purity(),
            nmi: contingency.nmi(),
            assignments,
            labels,
            k,
            contingency,
        })
    }
}

fn normalize(v: &[f64]) -> Result<Vec<f64>, MetricError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(MetricError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm mean direction of each cluster; `None` for empty clusters.
fn centroids(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut sizes = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sizes[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(sizes)
        .map(|(s, size)| if size == 0 { None } else { normalize(&s).ok() })
        .collect()
}

/// Sum over points of `1 - cos(point, centroid of its cluster)`.
pub fn cosine_objective(
    points: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
) -> Result<f64, MetricError> {
    let unit: Vec<Vec<f64>> = points
        .iter()
        .map(|p| normalize(p))
        .collect::<Result<_, _>>()?;
    let cents = centroids(&unit, assignments, k);
    Ok(unit
        .iter()
        .zip(assignments)
        .map(|(p, &a)| match &cents[a] {
            Some(c) => 1.0 - dot(p, c),
            None => 1.0,
        })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut best = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = &points[*chosen.last().unwrap()];
        for (b, p) in best.iter_mut().zip(points) {
            // squared chord length between unit vectors
            *b = b.min((2.0 - 2.0 * dot(p, last)).max(0.0));
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if best[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| best[i] > 0.0).unwrap();
            }
            pick
        } else {
            // every point coincides with a seed; take any unused index
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn lloyd(points: &[Vec<f64>], mut cents: Vec<Vec<f64>>) -> (Vec<usize>, usize) {
    let k = cents.len();
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    for iter in 1..=MAX_ITERATIONS {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_sim = f64::NEG_INFINITY;
                for (j, c) in cents.iter().enumerate() {
                    let s = dot(p, c);
                    if s > best_sim {
                        best = j;
                        best_sim = s;
                    }
                }
                best
            })
            .collect();
        if next == assignments {
            return (assignments, iter);
        }
        assignments = next;
        let mut updated = centroids(points, &assignments, k);
        // Empty cluster: move the point farthest from its own centroid into it.
        for j in 0..k {
            if updated[j].is_some() {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| {
                    let a = assignments[i];
                    assignments.iter().filter(|&&x| x == a).count() > 1
                })
                .max_by(|&x, &y| {
                    let dx = updated[assignments[x]]
                        .as_ref()
                        .map_or(0.0, |c| 1.0 - dot(&points[x], c));
                    let dy = updated[assignments[y]]
                        .as_ref()
                        .map_or(0.0, |c| 1.0 - dot(&points[y], c));
                    dx.total_cmp(&dy).then(y.cmp(&x))
                });
            if let Some(i) = far {
                assignments[i] = j;
                updated = centroids(points, &assignments, k);
            }
        }
        cents = updated
            .into_iter()
            .enumerate()
            .map(|(j, c)| c.unwrap_or_else(|| cents[j].clone()))
            .collect();
    }
    (assignments, MAX_ITERATIONS)
}

/// Spherical k-means: normalized inputs, k-means++ seeding, Lloyd updates
/// with renormalized centroids, best of `restarts` seeded runs.
pub fn spherical_kmeans(
    embeddings: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeansResult, MetricError> {
    if embeddings.is_empty() {
        return Err(MetricError::Empty);
    }
    if k == 0 || k > embeddings.len() {
        return Err(MetricError::BadClusterCount {
            k,
            n: embeddings.len(),
        });
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(MetricError::LengthMismatch {
            left: dim,
            right: 0,
        });
    }
    let points: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| normalize(e))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus_seeds(&points, k, &mut rng);
        let (assignments, iterations) = lloyd(&points, seeds);
        let objective = cosine_objective(&points, &assignments, k)?;
        if best
            .as_ref()
            .is_none_or(|b| objective < b.objective - 1e-12)
        {
            best = Some(KMeansResult {
                assignments,
                objective,
                iterations,
            });
        }
    }
    Ok(best.unwrap())
}

/// Cluster indices in `0..k` for each embedding.
pub fn kmeans_cluster(
    embeddings: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, MetricError> {
    Ok(spherical_kmeans(embeddings, k, seed, DEFAULT_RESTARTS)?.assignments)
}
