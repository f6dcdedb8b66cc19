//! Planted-regime synthetic grids: each temporal segment draws its frames
//! from a regime-specific smooth spatial pattern plus i.i.d. Gaussian
//! noise, giving the pipeline a ground truth that real archives cannot.
//! Regime mean fields are low-order 2-D sinusoid mixtures, so regimes
//! differ in spatial pattern rather than mean level.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::{GridDataset, GridError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid regime spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSpec {
    pub n_regimes: usize,
    /// One temporal segment per regime, in order; lengths sum to T.
    pub segment_lengths: Vec<usize>,
    pub lon_len: usize,
    pub lat_len: usize,
    pub n_vars: usize,
    pub noise_sigma: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_regimes == 0 {
            return Err(SynthError::Invalid("n_regimes must be >= 1".into()));
        }
        if self.segment_lengths.len() != self.n_regimes {
            return Err(SynthError::Invalid(format!(
                "{} segment lengths for {} regimes",
                self.segment_lengths.len(),
                self.n_regimes
            )));
        }
        if self.segment_lengths.iter().any(|&l| l == 0) {
            return Err(SynthError::Invalid("zero-length segment".into()));
        }
        if self.lon_len == 0 || self.lat_len == 0 || self.n_vars == 0 {
            return Err(SynthError::Invalid("zero grid extent".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::Invalid("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(SynthError::Invalid("missing_rate must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn t_len(&self) -> usize {
        self.segment_lengths.iter().sum()
    }

    /// Equal segment lengths (remainder spread over the leading segments).
    pub fn even_segments(n_regimes: usize, t_len: usize) -> Vec<usize> {
        let base = t_len / n_regimes;
        let extra = t_len % n_regimes;
        (0..n_regimes)
            .map(|r| base + usize::from(r < extra))
            .collect()
    }
}

/// Smooth per-(regime, variable) mean field on the unit square: a two-term
/// sinusoid mixture whose integer frequencies depend on the regime index,
/// with seeded random phases and amplitudes.
fn mean_field(spec: &RegimeSpec, regime: usize, var: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (l, w) = (spec.lon_len, spec.lat_len);
    let mut field = Array2::zeros((l, w));
    let two_pi = std::f64::consts::TAU;
    for harmonic in 0..2usize {
        let fx = 1 + (regime + var + harmonic) % 3;
        let fy = 1 + (regime + 2 * var + 2 * harmonic + 1) % 3;
        let phase_x: f64 = rng.gen_range(0.0..two_pi);
        let phase_y: f64 = rng.gen_range(0.0..two_pi);
        let amplitude: f64 = rng.gen_range(0.25..0.45);
        for x in 0..l {
            for y in 0..w {
                let u = (x as f64 + 0.5) / l as f64;
                let v = (y as f64 + 0.5) / w as f64;
                field[[x, y]] += amplitude
                    * (two_pi * fx as f64 * u + phase_x).sin()
                    * (two_pi * fy as f64 * v + phase_y).cos();
            }
        }
    }
    field
}

/// Seed-deterministic dataset plus its ground-truth regime labels.
pub fn generate(spec: &RegimeSpec) -> Result<(GridDataset, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut fields = Vec::with_capacity(spec.n_regimes);
    for regime in 0..spec.n_regimes {
        let per_var: Vec<Array2<f64>> = (0..spec.n_vars)
            .map(|var| mean_field(spec, regime, var, &mut rng))
            .collect();
        fields.push(per_var);
    }

    let t_len = spec.t_len();
    let mut labels = Vec::with_capacity(t_len);
    for (regime, &len) in spec.segment_lengths.iter().enumerate() {
        labels.extend(std::iter::repeat_n(regime, len));
    }

    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("valid normal parameters");
    let mut values = Vec::with_capacity(t_len * spec.lon_len * spec.lat_len * spec.n_vars);
    for &regime in &labels {
        for x in 0..spec.lon_len {
            for y in 0..spec.lat_len {
                for var in 0..spec.n_vars {
                    let mean = fields[regime][var][[x, y]];
                    let noise = if spec.noise_sigma > 0.0 {
                        normal.sample(&mut rng)
                    } else {
                        0.0
                    };
                    let missing = spec.missing_rate > 0.0 && rng.gen::<f64>() < spec.missing_rate;
                    values.push(if missing { f64::NAN } else { mean + noise });
                }
            }
        }
    }

    let var_names = (0..spec.n_vars).map(|v| format!("var{v}")).collect();
    let dataset = GridDataset::new(
        t_len,
        spec.lon_len,
        spec.lat_len,
        spec.n_vars,
        var_names,
        values,
    )?;
    Ok((dataset, labels))
}

/// Contingency table of two labelings (rows: first, cols: second).
pub fn confusion_matrix(a: &[usize], b: &[usize]) -> Array2<u64> {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::zeros((ka, kb));
    for (&x, &y) in a.iter().zip(b) {
        table[[x, y]] += 1;
    }
    table
}

/// Adjusted Rand index via the pair-counting formula; 1 for identical
/// partitions (up to relabeling), ~0 for independent ones.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as f64;
    let table = confusion_matrix(a, b);
    let comb2 = |x: f64| x * (x - 1.0) / 2.0;

    let mut sum_cells = 0.0;
    for &c in table.iter() {
        sum_cells += comb2(c as f64);
    }
    let sum_rows: f64 = table
        .rows()
        .into_iter()
        .map(|r| comb2(r.iter().sum::<u64>() as f64))
        .sum();
    let sum_cols: f64 = table
        .columns()
        .into_iter()
        .map(|c| comb2(c.iter().sum::<u64>() as f64))
        .sum();
    let total = comb2(n);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_cells - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, missing: f64, seed: u64) -> RegimeSpec {
        RegimeSpec {
            n_regimes: 2,
            segment_lengths: vec![6, 6],
            lon_len: 8,
            lat_len: 8,
            n_vars: 2,
            noise_sigma: noise,
            missing_rate: missing,
            seed,
        }
    }

    #[test]
    fn zero_noise_frames_equal_their_regime_mean() {
        let (d, labels) = generate(&spec(0.0, 0.0, 5)).unwrap();
        // frames inside one regime are identical
        for t in 1..6 {
            for x in 0..8 {
                for y in 0..8 {
                    for v in 0..2 {
                        assert_eq!(d.get(t, x, y, v), d.get(0, x, y, v));
                    }
                }
            }
        }
        // and regimes differ
        assert_ne!(labels[0], labels[6]);
        let differs = (0..8).any(|x| (0..8).any(|y| d.get(0, x, y, 0) != d.get(6, x, y, 0)));
        assert!(differs, "regime means coincide");
    }

    #[test]
    fn zero_missing_rate_gives_empty_mask() {
        let (d, _) = generate(&spec(0.1, 0.0, 6)).unwrap();
        assert_eq!(d.missing_count(), 0);
    }

    #[test]
    fn missing_rate_marks_cells() {
        let (d, _) = generate(&spec(0.1, 0.2, 7)).unwrap();
        let frac = d.missing_count() as f64 / (12.0 * 8.0 * 8.0 * 2.0);
        assert!((frac - 0.2).abs() < 0.05, "missing fraction {frac}");
    }

    #[test]
    fn same_seed_regenerates_bit_identical_data() {
        let (a, la) = generate(&spec(0.3, 0.1, 9)).unwrap();
        let (b, lb) = generate(&spec(0.3, 0.1, 9)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.values().len(), b.values().len());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!(x.to_bits() == y.to_bits());
        }
    }

    #[test]
    fn ari_is_one_for_identical_and_permuted_labelings() {
        let labels = vec![0, 0, 1, 1, 2, 2, 0, 1];
        assert_eq!(adjusted_rand_index(&labels, &labels), 1.0);
        let permuted: Vec<usize> = labels.iter().map(|&l| (l + 2) % 3).collect();
        assert_eq!(adjusted_rand_index(&labels, &permuted), 1.0);
    }

    #[test]
    fn ari_matches_reference_implementation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..50 {
            let a: Vec<usize> = (0..40).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<usize> = (0..40).map(|_| rng.gen_range(0..3)).collect();
            let ours = adjusted_rand_index(&a, &b);
            let theirs = stclust_naive::adjusted_rand_index(&a, &b);
            assert!((ours - theirs).abs() < 1e-12);
        }
    }

    #[test]
    fn random_labels_score_near_zero_over_twenty_seeds() {
        use rand::Rng;
        let truth: Vec<usize> = (0..200).map(|t| t / 50).collect(); // 4 balanced regimes
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let random: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
            let ari = adjusted_rand_index(&truth, &random);
            assert!(ari.abs() < 0.1, "seed {seed}: ARI {ari}");
        }
    }

    #[test]
    fn ari_is_invariant_under_relabeling_either_argument() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let a: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
        let b: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
        let base = adjusted_rand_index(&a, &b);
        let bijection = [2usize, 0, 1];
        let a2: Vec<usize> = a.iter().map(|&l| bijection[l]).collect();
        let b2: Vec<usize> = b.iter().map(|&l| bijection[l]).collect();
        assert!((adjusted_rand_index(&a2, &b) - base).abs() < 1e-12);
        assert!((adjusted_rand_index(&a, &b2) - base).abs() < 1e-12);
    }

    #[test]
    fn noiseless_regimes_are_separable_by_kmeans_on_the_flattened_matrix() {
        let spec = RegimeSpec {
            n_regimes: 3,
            segment_lengths: vec![8, 8, 8],
            lon_len: 8,
            lat_len: 8,
            n_vars: 2,
            noise_sigma: 0.0,
            missing_rate: 0.0,
            seed: 11,
        };
        let (d, truth) = generate(&spec).unwrap();
        let d = d.impute_mean().unwrap().minmax_normalize().unwrap();
        let labeling = crate::eval::kmeans_cluster(&d.flatten_2d(), 3, 0).unwrap();
        assert_eq!(adjusted_rand_index(labeling.labels(), &truth), 1.0);
    }
}
