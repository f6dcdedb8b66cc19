//! Internal cluster validation (silhouette, Davies-Bouldin,
//! Calinski-Harabasz, centroid RMSE, mean within-cluster variance, mean
//! inter-centroid distance), the distortion-score elbow, and the k-means
//! and hierarchical-agglomerative baselines.

use ndarray::Array2;
use serde_json::json;
use thiserror::Error;

use crate::train::kmeans::{count_distinct, lloyd, KMeansError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need k >= 2 clusters, got {0}")]
    KTooSmall(usize),
    #[error("need at least {k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("label {label} out of range for k = {k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("label count {labels} does not match sample count {samples}")]
    LengthMismatch { labels: usize, samples: usize },
    #[error("non-finite value in input data")]
    NonFinite,
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error("elbow range is empty or exceeds the sample count")]
    BadElbowRange,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A hard partition of T samples into clusters 0..k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labeling {
    labels: Vec<usize>,
    k: usize,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(EvalError::KTooSmall(k));
        }
        for &l in &labels {
            if l >= k {
                return Err(EvalError::LabelOutOfRange { label: l, k });
            }
        }
        Ok(Labeling { labels, k })
    }

    /// Infer k as max label + 1.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Labeling::new(labels, k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The six internal validation scores for one (data, labels) pair.
/// Davies-Bouldin is undefined when two centroids coincide.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub method_name: String,
    pub k: usize,
    pub n_samples: usize,
    pub silhouette: f64,
    pub davies_bouldin: Option<f64>,
    pub calinski_harabasz: f64,
    pub rmse: f64,
    pub variance: f64,
    pub inter_cluster_distance: f64,
    pub flags: Vec<String>,
}

impl MetricReport {
    /// key=value text block, one metric per line.
    pub fn to_text_block(&self) -> String {
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v}")
            } else {
                "undefined".to_string()
            }
        };
        let mut s = String::new();
        s.push_str(&format!("method={}\n", self.method_name));
        s.push_str(&format!("k={}\n", self.k));
        s.push_str(&format!("n_samples={}\n", self.n_samples));
        s.push_str(&format!("silhouette={}\n", fmt(self.silhouette)));
        s.push_str(&format!(
            "davies_bouldin={}\n",
            self.davies_bouldin.map_or("undefined".to_string(), fmt)
        ));
        s.push_str(&format!("calinski_harabasz={}\n", fmt(self.calinski_harabasz)));
        s.push_str(&format!("rmse={}\n", fmt(self.rmse)));
        s.push_str(&format!("variance={}\n", fmt(self.variance)));
        s.push_str(&format!(
            "inter_cluster_distance={}\n",
            fmt(self.inter_cluster_distance)
        ));
        if !self.flags.is_empty() {
            s.push_str(&format!("flags={}\n", self.flags.join(",")));
        }
        s
    }

    /// JSON with non-finite and undefined values mapped to null.
    pub fn to_json(&self) -> String {
        let num = |v: f64| {
            if v.is_finite() {
                json!(v)
            } else {
                json!(null)
            }
        };
        let value = json!({
            "method": self.method_name,
            "k": self.k,
            "n_samples": self.n_samples,
            "silhouette": num(self.silhouette),
            "davies_bouldin": self.davies_bouldin.map_or(json!(null), num),
            "calinski_harabasz": num(self.calinski_harabasz),
            "rmse": num(self.rmse),
            "variance": num(self.variance),
            "inter_cluster_distance": num(self.inter_cluster_distance),
            "flags": self.flags,
        });
        serde_json::to_string_pretty(&value).expect("json encoding")
    }
}

fn check_inputs(data: &Array2<f64>, labeling: &Labeling) -> Result<()> {
    let (n, _) = data.dim();
    if labeling.len() != n {
        return Err(EvalError::LengthMismatch {
            labels: labeling.len(),
            samples: n,
        });
    }
    if n < labeling.k() {
        return Err(EvalError::TooFewSamples { n, k: labeling.k() });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn row(data: &Array2<f64>, i: usize) -> &[f64] {
    let d = data.ncols();
    &data.as_slice().expect("standard layout")[i * d..(i + 1) * d]
}

/// All six metrics in one pass over the partition.
pub fn evaluate_internal(
    data: &Array2<f64>,
    labeling: &Labeling,
    method_name: &str,
) -> Result<MetricReport> {
    check_inputs(data, labeling)?;
    let (n, d) = data.dim();
    let k = labeling.k();
    let labels = labeling.labels();
    let mut flags = Vec::new();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let nonempty: Vec<usize> = (0..k).filter(|&j| !members[j].is_empty()).collect();
    if nonempty.len() < k {
        flags.push("empty-clusters".to_string());
    }
    if nonempty.len() < 2 {
        return Err(EvalError::KTooSmall(nonempty.len()));
    }

    let centroid = |idx: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for &i in idx {
            for (s, v) in c.iter_mut().zip(row(data, i)) {
                *s += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= idx.len() as f64);
        c
    };
    let centroids: Vec<Vec<f64>> = nonempty.iter().map(|&j| centroid(&members[j])).collect();
    // position of each original cluster id in the non-empty list
    let mut compact = vec![usize::MAX; k];
    for (pos, &j) in nonempty.iter().enumerate() {
        compact[j] = pos;
    }

    // silhouette over the pairwise distances
    let mut silhouette_total = 0.0;
    let mut degenerate_contribs = 0usize;
    {
        // mean distance from each sample to each non-empty cluster
        let kk = nonempty.len();
        let mut sums = vec![0.0; n * kk];
        for i in 0..n {
            for j in (i + 1)..n {
                let dij = dist(row(data, i), row(data, j));
                sums[i * kk + compact[labels[j]]] += dij;
                sums[j * kk + compact[labels[i]]] += dij;
            }
        }
        for i in 0..n {
            let own = compact[labels[i]];
            let own_size = members[labels[i]].len();
            if own_size <= 1 {
                degenerate_contribs += 1;
                continue; // singleton contributes 0
            }
            let a = sums[i * kk + own] / (own_size - 1) as f64;
            let mut b = f64::INFINITY;
            for (pos, &j) in nonempty.iter().enumerate() {
                if pos == own {
                    continue;
                }
                let m = sums[i * kk + pos] / members[j].len() as f64;
                if m < b {
                    b = m;
                }
            }
            let denom = a.max(b);
            if denom > 0.0 {
                silhouette_total += (b - a) / denom;
            } else {
                degenerate_contribs += 1;
            }
        }
    }
    let silhouette = silhouette_total / n as f64;
    if degenerate_contribs == n {
        flags.push("silhouette-degenerate".to_string());
    }

    // Davies-Bouldin
    let sigmas: Vec<f64> = nonempty
        .iter()
        .enumerate()
        .map(|(pos, &j)| {
            members[j]
                .iter()
                .map(|&i| dist(row(data, i), &centroids[pos]))
                .sum::<f64>()
                / members[j].len() as f64
        })
        .collect();
    let kk = nonempty.len();
    let mut db_total = 0.0;
    let mut db_defined = true;
    'outer: for i in 0..kk {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..kk {
            if i == j {
                continue;
            }
            let dc = dist(&centroids[i], &centroids[j]);
            if dc == 0.0 {
                db_defined = false;
                break 'outer;
            }
            worst = worst.max((sigmas[i] + sigmas[j]) / dc);
        }
        db_total += worst;
    }
    let davies_bouldin = if db_defined {
        Some(db_total / kk as f64)
    } else {
        flags.push("db-undefined".to_string());
        None
    };

    // Calinski-Harabasz
    let overall = centroid(&(0..n).collect::<Vec<_>>());
    let mut between = 0.0;
    let mut within = 0.0;
    for (pos, &j) in nonempty.iter().enumerate() {
        let dc = dist(&centroids[pos], &overall);
        between += members[j].len() as f64 * dc * dc;
        for &i in &members[j] {
            let dd = dist(row(data, i), &centroids[pos]);
            within += dd * dd;
        }
    }
    let calinski_harabasz = if within == 0.0 {
        flags.push("ch-infinite".to_string());
        f64::INFINITY
    } else {
        (between / (kk - 1) as f64) / (within / (n - kk) as f64)
    };

    // centroid RMSE
    let rmse = {
        let mut total = 0.0;
        for i in 0..n {
            let c = &centroids[compact[labels[i]]];
            let dd = dist(row(data, i), c);
            total += dd * dd;
        }
        (total / n as f64).sqrt()
    };

    // mean within-cluster per-coordinate variance
    let variance = {
        let mut total = 0.0;
        for (pos, &j) in nonempty.iter().enumerate() {
            let mut per_cluster = 0.0;
            for coord in 0..d {
                let mut v = 0.0;
                for &i in &members[j] {
                    let diff = data[[i, coord]] - centroids[pos][coord];
                    v += diff * diff;
                }
                per_cluster += v / members[j].len() as f64;
            }
            total += per_cluster / d as f64;
        }
        total / kk as f64
    };

    // mean pairwise centroid distance
    let inter_cluster_distance = {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..kk {
            for j in (i + 1)..kk {
                total += dist(&centroids[i], &centroids[j]);
                pairs += 1;
            }
        }
        total / pairs as f64
    };

    Ok(MetricReport {
        method_name: method_name.to_string(),
        k,
        n_samples: n,
        silhouette,
        davies_bouldin,
        calinski_harabasz,
        rmse,
        variance,
        inter_cluster_distance,
        flags,
    })
}

// ---- k-means labeling ----------------------------------------------------

/// Lloyd fit to a hard labeling; duplicate centroids are an error.
pub fn kmeans_cluster(data: &Array2<f64>, k: usize, seed: u64) -> Result<Labeling> {
    let fit = lloyd(data, k, seed)?;
    if fit.duplicate_centroids {
        return Err(EvalError::KMeans(KMeansError::TooFewDistinct {
            distinct: count_distinct(data),
            k,
        }));
    }
    Ok(Labeling {
        labels: fit.labels,
        k,
    })
}

// ---- the distortion elbow --------------------------------------------------

#[derive(Clone, Debug)]
pub struct ElbowResult {
    pub k_star: usize,
    /// (k, distortion) pairs across the scanned range.
    pub curve: Vec<(usize, f64)>,
    pub flags: Vec<String>,
}

/// Distortion (k-means inertia) over a k range with the
/// maximum-perpendicular-distance knee rule on the normalized curve.
pub fn elbow_k(data: &Array2<f64>, k_min: usize, k_max: usize, seed: u64) -> Result<ElbowResult> {
    let n = data.nrows();
    if k_min == 0 || k_min > k_max || k_max >= n {
        return Err(EvalError::BadElbowRange);
    }
    let mut curve = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let fit = lloyd(data, k, seed)?;
        curve.push((k, fit.inertia));
    }
    let mut flags = Vec::new();
    if curve
        .windows(2)
        .any(|w| w[1].1 > w[0].1 + 1e-9 * w[0].1.abs().max(1.0))
    {
        flags.push("non-monotone".to_string());
    }

    let d_lo = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let d_hi = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let k_span = (k_max - k_min) as f64;
    if d_hi - d_lo <= 1e-12 || k_span == 0.0 {
        flags.push("degenerate-knee".to_string());
        return Ok(ElbowResult {
            k_star: k_min,
            curve,
            flags,
        });
    }

    // distance from each normalized point to the chord between the endpoints
    let norm: Vec<(f64, f64)> = curve
        .iter()
        .map(|&(k, v)| (((k - k_min) as f64) / k_span, (v - d_lo) / (d_hi - d_lo)))
        .collect();
    let (x0, y0) = norm[0];
    let (x1, y1) = *norm.last().unwrap();
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = (k_min, f64::NEG_INFINITY);
    for (i, &(x, y)) in norm.iter().enumerate() {
        let dist = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / len;
        if dist > best.1 + 1e-15 {
            best = (curve[i].0, dist);
        }
    }
    if best.1 <= 1e-9 {
        flags.push("degenerate-knee".to_string());
        best.0 = k_min;
    }
    Ok(ElbowResult {
        k_star: best.0,
        curve,
        flags,
    })
}

// ---- hierarchical agglomerative clustering -----------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Linkage {
    Ward,
    Average,
}

impl std::str::FromStr for Linkage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ward" => Ok(Linkage::Ward),
            "average" => Ok(Linkage::Average),
            other => Err(format!("unknown linkage `{other}` (ward|average)")),
        }
    }
}

/// Agglomerative merge by Lance-Williams recurrence, cut at k clusters.
/// Merge candidates tie-break toward the lexicographically smallest index
/// pair. Output labels are ordered by each cluster's smallest member.
pub fn hac_cluster(data: &Array2<f64>, k: usize, linkage: Linkage) -> Result<Labeling> {
    let n = data.nrows();
    if k < 1 || n < k {
        return Err(EvalError::TooFewSamples { n, k });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }

    // dissimilarity matrix: squared distances for ward, plain for average
    let mut dmat = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let base = dist(row(data, i), row(data, j));
            let v = match linkage {
                Linkage::Ward => base * base,
                Linkage::Average => base,
            };
            dmat[i * n + j] = v;
            dmat[j * n + i] = v;
        }
    }
    let mut active: Vec<bool> = vec![true; n];
    let mut sizes: Vec<f64> = vec![1.0; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut n_active = n;

    while n_active > k {
        // smallest dissimilarity, lowest index pair on ties
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if !active[j] {
                    continue;
                }
                let v = dmat[i * n + j];
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        let (i, j, dij) = best;

        // Lance-Williams update of every other active cluster's distance
        for h in 0..n {
            if !active[h] || h == i || h == j {
                continue;
            }
            let dhi = dmat[h * n + i];
            let dhj = dmat[h * n + j];
            let new = match linkage {
                Linkage::Ward => {
                    let (ni, nj, nh) = (sizes[i], sizes[j], sizes[h]);
                    ((ni + nh) * dhi + (nj + nh) * dhj - nh * dij) / (ni + nj + nh)
                }
                Linkage::Average => {
                    let (ni, nj) = (sizes[i], sizes[j]);
                    (ni * dhi + nj * dhj) / (ni + nj)
                }
            };
            dmat[h * n + i] = new;
            dmat[i * n + h] = new;
        }
        sizes[i] += sizes[j];
        active[j] = false;
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        n_active -= 1;
    }

    let mut labels = vec![0usize; n];
    let mut next = 0usize;
    for i in 0..n {
        if active[i] {
            for &m in &members[i] {
                labels[m] = next;
            }
            next += 1;
        }
    }
    Ok(Labeling { labels, k })
}
