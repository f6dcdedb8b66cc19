//! Gridded multivariate spatiotemporal datasets: ingestion from the
//! `STGRID1` container or CSV, mean imputation, per-variable min-max
//! scaling, 2D flattening, and windowed 5D sequence tensors.
//!
//! Container layout: one UTF-8 header line of `key=value` pairs
//! (`magic=STGRID1`, `T`, `L`, `W`, `n`, `var_names` comma-separated)
//! terminated by a newline, followed by `T*L*W*n` little-endian f64
//! values in (t, lon, lat, var) row-major order. Missing values are NaN.
//! CSV carries columns `t,lon,lat,var,value` with empty value = missing.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: expected {expected} values, found {actual}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("malformed csv at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },
    #[error("duplicate cell (t={t}, lon={lon}, lat={lat}, var={var})")]
    DuplicateCell { t: usize, lon: usize, lat: usize, var: usize },
    #[error("dataset has no observed values to impute from")]
    AllMissing,
    #[error("dataset still contains unimputed missing values")]
    NotImputed,
    #[error("window length {window} exceeds time-step count {t}")]
    WindowTooLong { window: usize, t: usize },
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

pub const CONTAINER_MAGIC: &str = "STGRID1";

/// 4D field (time x lon x lat x var) with a missing-value mask and,
/// once normalized, the per-variable (min, max) pairs for inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    values: Vec<f64>,
    t_len: usize,
    lon_len: usize,
    lat_len: usize,
    n_vars: usize,
    var_names: Vec<String>,
    missing: Vec<bool>,
    normalization: Option<Vec<(f64, f64)>>,
}

impl GridDataset {
    pub fn new(
        t_len: usize,
        lon_len: usize,
        lat_len: usize,
        n_vars: usize,
        var_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if t_len == 0 || lon_len == 0 || lat_len == 0 || n_vars == 0 {
            return Err(GridError::Invalid("zero extent".into()));
        }
        if var_names.len() != n_vars {
            return Err(GridError::Invalid(format!(
                "{} variable names for {} variables",
                var_names.len(),
                n_vars
            )));
        }
        let expected = t_len * lon_len * lat_len * n_vars;
        if values.len() != expected {
            return Err(GridError::PayloadLength {
                expected,
                actual: values.len(),
            });
        }
        let missing = values.iter().map(|v| v.is_nan()).collect();
        Ok(GridDataset {
            values,
            t_len,
            lon_len,
            lat_len,
            n_vars,
            var_names,
            missing,
            normalization: None,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn lon_len(&self) -> usize {
        self.lon_len
    }

    pub fn lat_len(&self) -> usize {
        self.lat_len
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Option<&[(f64, f64)]> {
        self.normalization.as_deref()
    }

    #[inline]
    fn idx(&self, t: usize, lon: usize, lat: usize, var: usize) -> usize {
        ((t * self.lon_len + lon) * self.lat_len + lat) * self.n_vars + var
    }

    pub fn get(&self, t: usize, lon: usize, lat: usize, var: usize) -> f64 {
        self.values[self.idx(t, lon, lat, var)]
    }

    pub fn is_missing(&self, t: usize, lon: usize, lat: usize, var: usize) -> bool {
        self.missing[self.idx(t, lon, lat, var)]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    fn has_nan(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Observed (min, max) per variable, ignoring unimputed missing cells.
    pub fn variable_ranges(&self) -> Vec<(f64, f64)> {
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n_vars];
        for (i, &v) in self.values.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            let var = i % self.n_vars;
            let r = &mut ranges[var];
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
        ranges
    }

    /// Replace every missing cell by the overall mean of all observed
    /// values across the whole dataset (not per variable). The missing
    /// mask is preserved.
    pub fn impute_mean(mut self) -> Result<Self> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (v, &m) in self.values.iter().zip(&self.missing) {
            if !m {
                total += v;
                count += 1;
            }
        }
        if count == 0 {
            return Err(GridError::AllMissing);
        }
        let mean = total / count as f64;
        for (v, &m) in self.values.iter_mut().zip(&self.missing) {
            if m {
                *v = mean;
            }
        }
        Ok(self)
    }

    /// Per-variable min-max scaling to [0, 1]; constant variables map to 0.
    /// The (min, max) pairs are recorded for inversion.
    pub fn minmax_normalize(mut self) -> Result<Self> {
        if self.has_nan() {
            return Err(GridError::NotImputed);
        }
        let ranges = self.variable_ranges();
        for (i, v) in self.values.iter_mut().enumerate() {
            let (lo, hi) = ranges[i % self.n_vars];
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
        self.normalization = Some(ranges);
        Ok(self)
    }

    /// Row t = row-major flattening over (lon, lat, var).
    pub fn flatten_2d(&self) -> Array2<f64> {
        let cols = self.lon_len * self.lat_len * self.n_vars;
        Array2::from_shape_vec((self.t_len, cols), self.values.clone())
            .expect("layout matches by construction")
    }

    /// Inverse of [`flatten_2d`] given the spatial extents.
    pub fn unflatten(
        matrix: &Array2<f64>,
        lon_len: usize,
        lat_len: usize,
        n_vars: usize,
        var_names: Vec<String>,
    ) -> Result<Self> {
        let (t_len, cols) = matrix.dim();
        if cols != lon_len * lat_len * n_vars {
            return Err(GridError::Invalid(format!(
                "{cols} columns cannot reshape to {lon_len}x{lat_len}x{n_vars}"
            )));
        }
        GridDataset::new(
            t_len,
            lon_len,
            lat_len,
            n_vars,
            var_names,
            matrix.iter().copied().collect(),
        )
    }

    /// Split the time axis into consecutive windows of `window_length`;
    /// the final short window is zero-padded and its frames flagged invalid.
    pub fn to_sequence_tensor(&self, window_length: usize) -> Result<SequenceTensor> {
        if window_length < 2 {
            return Err(GridError::WindowTooShort(window_length));
        }
        if window_length > self.t_len {
            return Err(GridError::WindowTooLong {
                window: window_length,
                t: self.t_len,
            });
        }
        let frame = self.lon_len * self.lat_len * self.n_vars;
        let batches = self.t_len.div_ceil(window_length);
        let mut data = vec![0.0; batches * window_length * frame];
        let mut frame_valid = vec![false; batches * window_length];
        let mut window_starts = Vec::with_capacity(batches);
        for b in 0..batches {
            let start = b * window_length;
            window_starts.push(start);
            for tw in 0..window_length {
                let t = start + tw;
                if t < self.t_len {
                    let src = t * frame;
                    let dst = (b * window_length + tw) * frame;
                    data[dst..dst + frame].copy_from_slice(&self.values[src..src + frame]);
                    frame_valid[b * window_length + tw] = true;
                }
            }
        }
        let tensor = Tensor::new(
            vec![
                batches,
                window_length,
                self.lon_len,
                self.lat_len,
                self.n_vars,
            ],
            data,
        )
        .map_err(|e| GridError::Invalid(e.to_string()))?;
        Ok(SequenceTensor {
            tensor,
            window_length,
            window_starts,
            frame_valid,
            source_t_len: self.t_len,
        })
    }

    pub fn write_container(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        write!(
            header,
            "magic={} T={} L={} W={} n={} var_names={}",
            CONTAINER_MAGIC,
            self.t_len,
            self.lon_len,
            self.lat_len,
            self.n_vars,
            self.var_names.join(",")
        )
        .expect("string write");
        header.push('\n');
        let mut file = fs::File::create(path)?;
        file.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for (v, &m) in self.values.iter().zip(&self.missing) {
            let out = if m { f64::NAN } else { *v };
            buf.extend_from_slice(&out.to_le_bytes());
        }
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn read_container(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GridError::MalformedHeader("no newline-terminated header".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| GridError::MalformedHeader("header is not UTF-8".into()))?;

        let mut magic = None;
        let mut t_len = None;
        let mut lon_len = None;
        let mut lat_len = None;
        let mut n_vars = None;
        let mut var_names: Option<Vec<String>> = None;
        for pair in header.split_whitespace() {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| GridError::MalformedHeader(format!("bad pair `{pair}`")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| GridError::MalformedHeader(format!("bad integer `{v}` for {key}")))
            };
            match key {
                "magic" => magic = Some(value.to_string()),
                "T" => t_len = Some(parse(value)?),
                "L" => lon_len = Some(parse(value)?),
                "W" => lat_len = Some(parse(value)?),
                "n" => n_vars = Some(parse(value)?),
                "var_names" => {
                    var_names = Some(value.split(',').map(|s| s.to_string()).collect())
                }
                other => {
                    return Err(GridError::MalformedHeader(format!("unknown key `{other}`")))
                }
            }
        }
        let magic = magic.ok_or_else(|| GridError::MalformedHeader("missing magic".into()))?;
        if magic != CONTAINER_MAGIC {
            return Err(GridError::MalformedHeader(format!("bad magic `{magic}`")));
        }
        let missing_key = |k: &str| GridError::MalformedHeader(format!("missing key `{k}`"));
        let t_len = t_len.ok_or_else(|| missing_key("T"))?;
        let lon_len = lon_len.ok_or_else(|| missing_key("L"))?;
        let lat_len = lat_len.ok_or_else(|| missing_key("W"))?;
        let n_vars = n_vars.ok_or_else(|| missing_key("n"))?;
        let var_names = var_names.ok_or_else(|| missing_key("var_names"))?;

        let payload = &bytes[newline + 1..];
        let expected = t_len * lon_len * lat_len * n_vars;
        if payload.len() != expected * 8 {
            return Err(GridError::PayloadLength {
                expected,
                actual: payload.len() / 8,
            });
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        GridDataset::new(t_len, lon_len, lat_len, n_vars, var_names, values)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut text = String::new();
        let mut reader = reader;
        reader.read_to_string(&mut text)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| GridError::MalformedCsv {
                line: 1,
                reason: "empty file".into(),
            })?;
        if header.trim() != "t,lon,lat,var,value" {
            return Err(GridError::MalformedCsv {
                line: 1,
                reason: format!("expected header `t,lon,lat,var,value`, got `{header}`"),
            });
        }
        let mut cells: Vec<(usize, usize, usize, usize, Option<f64>)> = Vec::new();
        let mut max = [0usize; 4];
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(GridError::MalformedCsv {
                    line: i + 1,
                    reason: format!("{} fields, expected 5", parts.len()),
                });
            }
            let mut nums = [0usize; 4];
            for (j, p) in parts[..4].iter().enumerate() {
                nums[j] = p.trim().parse().map_err(|_| GridError::MalformedCsv {
                    line: i + 1,
                    reason: format!("bad index `{p}`"),
                })?;
                max[j] = max[j].max(nums[j]);
            }
            let value = if parts[4].trim().is_empty() {
                None
            } else {
                Some(parts[4].trim().parse().map_err(|_| GridError::MalformedCsv {
                    line: i + 1,
                    reason: format!("bad value `{}`", parts[4]),
                })?)
            };
            cells.push((nums[0], nums[1], nums[2], nums[3], value));
        }
        if cells.is_empty() {
            return Err(GridError::MalformedCsv {
                line: 1,
                reason: "no data rows".into(),
            });
        }
        let (t_len, lon_len, lat_len, n_vars) = (max[0] + 1, max[1] + 1, max[2] + 1, max[3] + 1);
        let var_names = (0..n_vars).map(|v| format!("var{v}")).collect();
        let mut values = vec![f64::NAN; t_len * lon_len * lat_len * n_vars];
        let mut seen = vec![false; values.len()];
        for (t, lon, lat, var, value) in cells {
            let idx = ((t * lon_len + lon) * lat_len + lat) * n_vars + var;
            if seen[idx] {
                return Err(GridError::DuplicateCell { t, lon, lat, var });
            }
            seen[idx] = true;
            if let Some(v) = value {
                values[idx] = v;
            }
        }
        GridDataset::new(t_len, lon_len, lat_len, n_vars, var_names, values)
    }
}

/// Windowed 5D view (B, T_w, H, W, C) of a [`GridDataset`], plus the
/// bookkeeping to map frames back to source time steps.
#[derive(Clone, Debug)]
pub struct SequenceTensor {
    tensor: Tensor,
    window_length: usize,
    window_starts: Vec<usize>,
    frame_valid: Vec<bool>,
    source_t_len: usize,
}

impl SequenceTensor {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn batches(&self) -> usize {
        self.window_starts.len()
    }

    pub fn window_length(&self) -> usize {
        self.window_length
    }

    pub fn window_starts(&self) -> &[usize] {
        &self.window_starts
    }

    pub fn source_t_len(&self) -> usize {
        self.source_t_len
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[2], s[3], s[4])
    }

    pub fn frame_is_valid(&self, batch: usize, t: usize) -> bool {
        self.frame_valid[batch * self.window_length + t]
    }

    /// Source time index of frame (batch, t); None for padding.
    pub fn source_index(&self, batch: usize, t: usize) -> Option<usize> {
        self.frame_is_valid(batch, t)
            .then(|| self.window_starts[batch] + t)
    }

    /// One window as a [T_w, H, W, C] tensor.
    pub fn window(&self, batch: usize) -> Tensor {
        let s = self.tensor.shape();
        let frame: usize = s[2] * s[3] * s[4];
        let lane = self.window_length * frame;
        let data = self.tensor.data()[batch * lane..(batch + 1) * lane].to_vec();
        Tensor::new(vec![self.window_length, s[2], s[3], s[4]], data).expect("window layout")
    }

    /// Per-frame validity mask of one window.
    pub fn window_mask(&self, batch: usize) -> Vec<bool> {
        (0..self.window_length)
            .map(|t| self.frame_is_valid(batch, t))
            .collect()
    }
}
