//! Lloyd's algorithm with k-means++ seeding. Candidate order is
//! canonicalized (rows sorted lexicographically) before any random draw,
//! so permuting the input rows cannot change the fitted centroids.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KMeansError {
    #[error("need at least {k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("non-finite value in input data")]
    NonFinite,
    #[error("only {distinct} distinct points for {k} clusters (duplicate centroids)")]
    TooFewDistinct { distinct: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, KMeansError>;

const MAX_ITER: usize = 300;
const RESTARTS: u64 = 10;

#[derive(Clone, Debug)]
pub struct LloydFit {
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Post-update inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// Fewer distinct input rows than clusters: some centroids coincide.
    pub duplicate_centroids: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(data: &Array2<f64>, i: usize) -> &[f64] {
    let d = data.ncols();
    &data.as_slice().expect("standard layout")[i * d..(i + 1) * d]
}

fn lex_less(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// Full fit: never errors on duplicate points, only flags them.
pub fn lloyd(data: &Array2<f64>, k: usize, seed: u64) -> Result<LloydFit> {
    let (n, d) = data.dim();
    if k == 0 {
        return Err(KMeansError::ZeroK);
    }
    if n < k {
        return Err(KMeansError::TooFewSamples { n, k });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(KMeansError::NonFinite);
    }

    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| lex_less(row(data, a), row(data, b)));
    let distinct = 1 + canonical
        .windows(2)
        .filter(|w| lex_less(row(data, w[0]), row(data, w[1])) != std::cmp::Ordering::Equal)
        .count();

    let mut best: Option<LloydFit> = None;
    for restart in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut centroids = seed_plus_plus(data, k, &canonical, &mut rng);
        let mut labels = vec![0usize; n];
        let mut trace = Vec::new();
        for _ in 0..MAX_ITER {
            let mut changed = false;
            for i in 0..n {
                let x = row(data, i);
                let mut best_j = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in centroids.iter().enumerate() {
                    let dd = dist2(x, c);
                    if dd < best_d {
                        best_d = dd;
                        best_j = j;
                    }
                }
                if labels[i] != best_j {
                    labels[i] = best_j;
                    changed = true;
                }
            }
            // means; repair empty clusters with the farthest point
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[labels[i]] += 1;
                for (s, v) in sums[labels[i]].iter_mut().zip(row(data, i)) {
                    *s += v;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    for s in sums[j].iter_mut() {
                        *s /= counts[j] as f64;
                    }
                    centroids[j] = std::mem::take(&mut sums[j]);
                } else {
                    let far = canonical
                        .iter()
                        .copied()
                        .max_by(|&a, &b| {
                            dist2(row(data, a), &centroids[labels[a]])
                                .total_cmp(&dist2(row(data, b), &centroids[labels[b]]))
                        })
                        .expect("non-empty data");
                    centroids[j] = row(data, far).to_vec();
                }
            }
            let inertia: f64 = (0..n).map(|i| dist2(row(data, i), &centroids[labels[i]])).sum();
            trace.push(inertia);
            if !changed {
                break;
            }
        }
        let inertia = *trace.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            let flat: Vec<f64> = centroids.iter().flatten().copied().collect();
            best = Some(LloydFit {
                centroids: Array2::from_shape_vec((k, d), flat).expect("centroid layout"),
                labels,
                inertia,
                inertia_trace: trace,
                duplicate_centroids: distinct < k,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn seed_plus_plus(
    data: &Array2<f64>,
    k: usize,
    canonical: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let n = canonical.len();
    let first = canonical[rng.gen_range(0..n)];
    let mut centroids = vec![row(data, first).to_vec()];
    let mut d2: Vec<f64> = canonical
        .iter()
        .map(|&i| dist2(row(data, i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = canonical[n - 1];
            for (pos, &i) in canonical.iter().enumerate() {
                acc += d2[pos];
                if acc > u {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all remaining mass at existing centroids; duplicate the first
            // canonical point deterministically
            canonical[0]
        };
        let c = row(data, next).to_vec();
        for (pos, &i) in canonical.iter().enumerate() {
            d2[pos] = d2[pos].min(dist2(row(data, i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Centroid initialization for the clustering head; duplicate centroids
/// (fewer distinct embeddings than clusters) are an error here.
pub fn init_centroids(embeddings: &Array2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    let fit = lloyd(embeddings, k, seed)?;
    if fit.duplicate_centroids {
        let distinct = count_distinct(embeddings);
        return Err(KMeansError::TooFewDistinct { distinct, k });
    }
    Ok(fit.centroids)
}

pub(crate) fn count_distinct(data: &Array2<f64>) -> usize {
    let n = data.nrows();
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| lex_less(row(data, a), row(data, b)));
    1 + canonical
        .windows(2)
        .filter(|w| lex_less(row(data, w[0]), row(data, w[1])) != std::cmp::Ordering::Equal)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::seq::SliceRandom;

    #[test]
    fn single_cluster_centroid_is_the_mean() {
        let data = array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let fit = lloyd(&data, 1, 7).unwrap();
        assert_eq!(fit.centroids.row(0).to_vec(), vec![3.0, 2.0]);
        assert_eq!(fit.labels, vec![0, 0, 0]);
    }

    #[test]
    fn two_separated_pairs_match_exhaustive_search() {
        let data = array![[0.0], [0.1], [10.0], [10.1]];
        let fit = lloyd(&data, 2, 3).unwrap();
        let mut cents: Vec<f64> = fit.centroids.iter().copied().collect();
        cents.sort_by(f64::total_cmp);
        assert!((cents[0] - 0.05).abs() < 1e-12);
        assert!((cents[1] - 10.05).abs() < 1e-12);
        assert_eq!(fit.labels[0], fit.labels[1]);
        assert_eq!(fit.labels[2], fit.labels[3]);
        assert_ne!(fit.labels[0], fit.labels[2]);

        let (_, best_cost) = stclust_naive::best_partition(&data, 2);
        assert!((fit.inertia - best_cost).abs() < 1e-12);
    }

    #[test]
    fn permuting_rows_does_not_change_fitted_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array2::from_shape_fn((20, 3), |_| rng.gen_range(-1.0..1.0));
        let fit_a = lloyd(&data, 4, 99).unwrap();

        let mut order: Vec<usize> = (0..20).collect();
        order.shuffle(&mut rng);
        let permuted = Array2::from_shape_fn((20, 3), |(i, j)| data[[order[i], j]]);
        let fit_b = lloyd(&permuted, 4, 99).unwrap();
        for (a, b) in fit_a.centroids.iter().zip(fit_b.centroids.iter()) {
            assert_eq!(a, b, "centroids differ under row permutation");
        }
        for i in 0..20 {
            assert_eq!(fit_a.labels[order[i]], fit_b.labels[i]);
        }
    }

    #[test]
    fn inertia_never_increases_across_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..10 {
            let data = Array2::from_shape_fn((30, 4), |_| rng.gen_range(-2.0..2.0));
            let fit = lloyd(&data, 3, trial).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "inertia increased: {:?}", w);
            }
        }
    }

    #[test]
    fn too_few_distinct_points_is_reported() {
        let data = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let err = init_centroids(&data, 2, 5).unwrap_err();
        assert!(matches!(err, KMeansError::TooFewDistinct { distinct: 1, k: 2 }));
        // the raw fit still succeeds with a flag
        let fit = lloyd(&data, 2, 5).unwrap();
        assert!(fit.duplicate_centroids);
        assert_eq!(fit.inertia, 0.0);
    }
}
