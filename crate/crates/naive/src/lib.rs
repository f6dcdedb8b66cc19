//! Naive reference implementations, written straight from the textbook
//! definitions with plain double loops. The main library is validated
//! against these in its test suites; nothing here is shared with the
//! optimized code paths.

use ndarray::Array2;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn row(data: &Array2<f64>, i: usize) -> Vec<f64> {
    data.row(i).to_vec()
}

fn members(labels: &[usize], j: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == j).collect()
}

fn centroid(data: &Array2<f64>, idx: &[usize]) -> Vec<f64> {
    let d = data.ncols();
    let mut c = vec![0.0; d];
    for &i in idx {
        for (k, v) in c.iter_mut().enumerate() {
            *v += data[[i, k]];
        }
    }
    for v in c.iter_mut() {
        *v /= idx.len() as f64;
    }
    c
}

fn nonempty_clusters(labels: &[usize], k: usize) -> Vec<usize> {
    (0..k).filter(|&j| !members(labels, j).is_empty()).collect()
}

/// Mean over samples of (b - a) / max(a, b); singletons contribute 0,
/// and a degenerate 0/0 term also counts as 0.
pub fn silhouette(data: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = members(labels, labels[i]);
        if own.len() <= 1 {
            continue; // contributes 0
        }
        let mut a = 0.0;
        for &j in &own {
            if j != i {
                a += dist(&row(data, i), &row(data, j));
            }
        }
        a /= (own.len() - 1) as f64;
        let mut b = f64::INFINITY;
        for c in nonempty_clusters(labels, k) {
            if c == labels[i] {
                continue;
            }
            let other = members(labels, c);
            let mut m = 0.0;
            for &j in &other {
                m += dist(&row(data, i), &row(data, j));
            }
            m /= other.len() as f64;
            if m < b {
                b = m;
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// (1/k) * sum over clusters of the worst (sigma_i + sigma_j) / d(c_i, c_j),
/// where sigma is the mean distance of members to their own centroid.
/// `None` when some pair of centroids coincides.
pub fn davies_bouldin(data: &Array2<f64>, labels: &[usize], k: usize) -> Option<f64> {
    let clusters = nonempty_clusters(labels, k);
    let cents: Vec<Vec<f64>> = clusters
        .iter()
        .map(|&j| centroid(data, &members(labels, j)))
        .collect();
    let sigmas: Vec<f64> = clusters
        .iter()
        .enumerate()
        .map(|(ci, &j)| {
            let m = members(labels, j);
            m.iter().map(|&i| dist(&row(data, i), &cents[ci])).sum::<f64>() / m.len() as f64
        })
        .collect();
    let kk = clusters.len();
    let mut total = 0.0;
    for i in 0..kk {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..kk {
            if i == j {
                continue;
            }
            let d = dist(&cents[i], &cents[j]);
            if d == 0.0 {
                return None;
            }
            let r = (sigmas[i] + sigmas[j]) / d;
            if r > worst {
                worst = r;
            }
        }
        total += worst;
    }
    Some(total / kk as f64)
}

/// [B / (k-1)] / [W / (n-k)] with between/within dispersion traces.
pub fn calinski_harabasz(data: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let clusters = nonempty_clusters(labels, k);
    let kk = clusters.len();
    let overall = centroid(data, &(0..n).collect::<Vec<_>>());
    let mut between = 0.0;
    let mut within = 0.0;
    for &j in &clusters {
        let m = members(labels, j);
        let c = centroid(data, &m);
        let dc = dist(&c, &overall);
        between += m.len() as f64 * dc * dc;
        for &i in &m {
            let d = dist(&row(data, i), &c);
            within += d * d;
        }
    }
    if kk <= 1 || within == 0.0 {
        return if within == 0.0 && kk > 1 { f64::INFINITY } else { 0.0 };
    }
    (between / (kk - 1) as f64) / (within / (n - kk) as f64)
}

/// sqrt(mean squared distance of samples to their assigned centroid).
pub fn rmse(data: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let cents: Vec<Option<Vec<f64>>> = (0..k)
        .map(|j| {
            let m = members(labels, j);
            if m.is_empty() { None } else { Some(centroid(data, &m)) }
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let c = cents[labels[i]].as_ref().unwrap();
        let d = dist(&row(data, i), c);
        total += d * d;
    }
    (total / n as f64).sqrt()
}

/// Mean over clusters of the per-coordinate population variance,
/// averaged over coordinates.
pub fn variance(data: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let d = data.ncols();
    let clusters = nonempty_clusters(labels, k);
    let mut total = 0.0;
    for &j in &clusters {
        let m = members(labels, j);
        let c = centroid(data, &m);
        let mut per_cluster = 0.0;
        for coord in 0..d {
            let mut v = 0.0;
            for &i in &m {
                let diff = data[[i, coord]] - c[coord];
                v += diff * diff;
            }
            per_cluster += v / m.len() as f64;
        }
        total += per_cluster / d as f64;
    }
    total / clusters.len() as f64
}

/// Mean pairwise Euclidean distance between cluster centroids.
pub fn inter_cluster_distance(data: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let clusters = nonempty_clusters(labels, k);
    let cents: Vec<Vec<f64>> = clusters
        .iter()
        .map(|&j| centroid(data, &members(labels, j)))
        .collect();
    let kk = clusters.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..kk {
        for j in (i + 1)..kk {
            total += dist(&cents[i], &cents[j]);
            pairs += 1;
        }
    }
    if pairs == 0 { 0.0 } else { total / pairs as f64 }
}

/// Adjusted Rand index by the standard pair-counting formula.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for i in 0..n {
        table[a[i]][b[i]] += 1;
    }
    let comb2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let mut sum_ij = 0.0;
    for r in &table {
        for &c in r {
            sum_ij += comb2(c);
        }
    }
    let sum_a: f64 = table.iter().map(|r| comb2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| comb2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = comb2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

/// One LSTM step on plain vectors (gate order i, f, g, o), followed by the
/// same per-channel normalization (eps inside the sqrt) and a linear
/// residual projection of the input. This is the 1x1-spatial degeneration
/// of a convolutional recurrent cell.
#[allow(clippy::too_many_arguments)]
pub struct ScalarLstmStep<'a> {
    pub w_x: [&'a Array2<f64>; 4],
    pub w_h: [&'a Array2<f64>; 4],
    pub bias: [&'a [f64]; 4],
    pub ln_gamma: &'a [f64],
    pub ln_beta: &'a [f64],
    pub ln_eps: f64,
    pub res_w: &'a Array2<f64>,
}

fn matvec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    // w is [in, out]; x is [in]
    let (inn, out) = (w.nrows(), w.ncols());
    assert_eq!(inn, x.len());
    let mut y = vec![0.0; out];
    for i in 0..inn {
        for j in 0..out {
            y[j] += x[i] * w[[i, j]];
        }
    }
    y
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ScalarLstmStep<'_> {
    /// Returns (hidden, cell). The hidden state is the normalized,
    /// residual-corrected output and is both emitted and carried.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c_out = c.len();
        let gate = |g: usize| -> Vec<f64> {
            let mut v = matvec(self.w_x[g], x);
            let hv = matvec(self.w_h[g], h);
            for j in 0..c_out {
                v[j] += hv[j] + self.bias[g][j];
            }
            v
        };
        let i: Vec<f64> = gate(0).iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = gate(1).iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = gate(2).iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = gate(3).iter().map(|&v| sigmoid(v)).collect();
        let c_new: Vec<f64> = (0..c_out).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
        let h_raw: Vec<f64> = (0..c_out).map(|j| o[j] * c_new[j].tanh()).collect();

        let mean = h_raw.iter().sum::<f64>() / c_out as f64;
        let var = h_raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c_out as f64;
        let inv = 1.0 / (var + self.ln_eps).sqrt();
        let res = matvec(self.res_w, x);
        let emitted: Vec<f64> = (0..c_out)
            .map(|j| (h_raw[j] - mean) * inv * self.ln_gamma[j] + self.ln_beta[j] + res[j])
            .collect();
        (emitted, c_new)
    }
}

/// Exhaustive best k-partition by total squared distance to cluster means.
/// Only usable for tiny n (enumerates k^n assignments).
pub fn best_partition(data: &Array2<f64>, k: usize) -> (Vec<usize>, f64) {
    let n = data.nrows();
    assert!(n <= 12, "exhaustive search only for tiny instances");
    let mut best = (vec![0; n], f64::INFINITY);
    let mut assign = vec![0usize; n];
    loop {
        if assign.iter().any(|&a| a == 0) || k == 1 {
            let mut cost = 0.0;
            let mut feasible = true;
            for j in 0..k {
                let m = members(&assign, j);
                if m.is_empty() {
                    feasible = false;
                    break;
                }
                let c = centroid(data, &m);
                for &i in &m {
                    let d = dist(&row(data, i), &c);
                    cost += d * d;
                }
            }
            if feasible && cost < best.1 {
                best = (assign.clone(), cost);
            }
        }
        // next assignment in base k
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            assign[pos] += 1;
            if assign[pos] < k {
                break;
            }
            assign[pos] = 0;
            pos += 1;
        }
    }
}

/// Student's-t kernel soft assignment of one embedding against centroids.
pub fn soft_assign(e: &[f64], centroids: &Array2<f64>, alpha: f64) -> Vec<f64> {
    let k = centroids.nrows();
    let mut kern = vec![0.0; k];
    for j in 0..k {
        let d2: f64 = e
            .iter()
            .zip(centroids.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        kern[j] = (1.0 + d2 / alpha).powf(-(alpha + 1.0) / 2.0);
    }
    let s: f64 = kern.iter().sum();
    kern.iter().map(|v| v / s).collect()
}

/// Frequency-normalized sharpening of a soft-assignment matrix.
pub fn target_distribution(q: &Array2<f64>) -> Array2<f64> {
    let (t, k) = (q.nrows(), q.ncols());
    let mut f = vec![0.0; k];
    for j in 0..k {
        for i in 0..t {
            f[j] += q[[i, j]];
        }
    }
    let mut p = Array2::zeros((t, k));
    for i in 0..t {
        let mut denom = 0.0;
        for l in 0..k {
            denom += q[[i, l]] * q[[i, l]] / f[l];
        }
        for j in 0..k {
            p[[i, j]] = q[[i, j]] * q[[i, j]] / f[j] / denom;
        }
    }
    p
}

/// (1/T) * sum_i sum_j p log(p/q).
pub fn kl_divergence(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let t = p.nrows();
    let mut total = 0.0;
    for i in 0..t {
        for j in 0..p.ncols() {
            let pij = p[[i, j]];
            if pij > 0.0 {
                total += pij * (pij / q[[i, j]]).ln();
            }
        }
    }
    total / t as f64
}
