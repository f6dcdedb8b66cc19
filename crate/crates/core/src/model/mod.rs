//! The full clustering autoencoder: a four-level convolutional-recurrent
//! encoder pyramid (2x2 max pooling between levels), a bottleneck that
//! builds a kNN graph over the deepest spatial nodes per time slice,
//! applies neighborhood attention, mean-pools nodes and summarizes the
//! sequence bidirectionally, a mirrored decoder with skip concatenation
//! and a tanh output head, and a Student's-t soft-assignment head over
//! trainable centroids.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layers::{
    bilstm_encode, build_knn_graph, convlstm_sequence, dense, graph_attention, BiLstmParams,
    BiLstmVars, ConvLstmCellParams, ConvLstmCellVars, DenseParams, DenseVars,
    GraphAttentionParams, GraphAttentionVars, ParamGroup,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("spatial extent {0} is below the minimum of 8")]
    SpatialTooSmall(usize),
    #[error("input geometry ({h}, {w}, {c}) does not match the model ({mh}, {mw}, {mc})")]
    GeometryMismatch {
        h: usize,
        w: usize,
        c: usize,
        mh: usize,
        mw: usize,
        mc: usize,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Inputs live in [0, 1]; the tanh head produces (-1, 1). Loss targets are
/// mapped into this narrower band and inverted on the way out.
pub const MODEL_RANGE_SCALE: f64 = 1.8;
pub const MODEL_RANGE_OFFSET: f64 = -0.9;

pub fn to_model_range(x: f64) -> f64 {
    MODEL_RANGE_SCALE * x + MODEL_RANGE_OFFSET
}

pub fn from_model_range(y: f64) -> f64 {
    (y - MODEL_RANGE_OFFSET) / MODEL_RANGE_SCALE
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Channel capacities of the four encoder levels (decoder mirrors).
    pub channel_capacities: [usize; 4],
    /// Latent dimensionality d.
    pub latent_dim: usize,
    /// Neighbors per node in the bottleneck graph.
    pub knn_k: usize,
    /// Bidirectional summary width d_b (split across the two directions).
    pub bilstm_hidden: usize,
    /// Cluster count k.
    pub n_clusters: usize,
    /// Student's-t degrees of freedom.
    pub alpha: f64,
    /// Frames per window.
    pub window_length: usize,
    /// Attention heads (averaged); the bottleneck is single-head by default.
    pub attention_heads: usize,
    /// Width of the learned score map inside attention.
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channel_capacities: [8, 16, 32, 64],
            latent_dim: 32,
            knn_k: 3,
            bilstm_hidden: 64,
            n_clusters: 3,
            alpha: 1.0,
            window_length: 8,
            attention_heads: 1,
            attention_dim: 16,
        }
    }
}

impl ModelConfig {
    /// Capacities used in the full-scale configuration.
    pub fn full_scale() -> Self {
        ModelConfig {
            channel_capacities: [64, 128, 256, 512],
            latent_dim: 256,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_capacities.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("zero channel capacity".into()));
        }
        if self.latent_dim == 0 {
            return Err(ModelError::Config("latent_dim must be >= 1".into()));
        }
        if self.n_clusters < 2 {
            return Err(ModelError::Config("n_clusters must be >= 2".into()));
        }
        if self.alpha <= 0.0 {
            return Err(ModelError::Config("alpha must be > 0".into()));
        }
        if self.bilstm_hidden < 2 || self.bilstm_hidden % 2 != 0 {
            return Err(ModelError::Config(
                "bilstm_hidden must be an even number >= 2".into(),
            ));
        }
        if self.window_length < 2 {
            return Err(ModelError::Config("window_length must be >= 2".into()));
        }
        if self.knn_k == 0 {
            return Err(ModelError::Config("knn_k must be >= 1".into()));
        }
        if self.attention_heads == 0 || self.attention_dim == 0 {
            return Err(ModelError::Config(
                "attention_heads and attention_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Spatial bookkeeping: raw input extents, zero-padded extents (multiples
/// of 8 for the three poolings) and the deepest-level extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub n_vars: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub h4: usize,
    pub w4: usize,
}

impl Geometry {
    pub fn for_input(in_h: usize, in_w: usize, n_vars: usize) -> Result<Self> {
        if in_h < 8 {
            return Err(ModelError::SpatialTooSmall(in_h));
        }
        if in_w < 8 {
            return Err(ModelError::SpatialTooSmall(in_w));
        }
        let pad_h = in_h.div_ceil(8) * 8;
        let pad_w = in_w.div_ceil(8) * 8;
        Ok(Geometry {
            in_h,
            in_w,
            n_vars,
            pad_h,
            pad_w,
            h4: pad_h / 8,
            w4: pad_w / 8,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.h4 * self.w4
    }
}

/// Every learnable parameter of the model, including the cluster centroids.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub geometry: Geometry,
    pub encoder: [ConvLstmCellParams; 4],
    pub attention: GraphAttentionParams,
    pub bilstm: BiLstmParams,
    pub latent_proj: DenseParams,
    pub seed_proj: DenseParams,
    pub decoder: [ConvLstmCellParams; 4],
    pub head: ConvLstmCellParams,
    pub centroids: Tensor, // [k, d]
}

pub struct ModelVars {
    pub encoder: [ConvLstmCellVars; 4],
    pub attention: GraphAttentionVars,
    pub bilstm: BiLstmVars,
    pub latent_proj: DenseVars,
    pub seed_proj: DenseVars,
    pub decoder: [ConvLstmCellVars; 4],
    pub head: ConvLstmCellVars,
    pub centroids: Var,
}

/// Everything one forward pass produces for a window.
pub struct WindowForward {
    /// Reconstructed frames [H, W, n] in tanh range, cropped to raw extents.
    pub recon_frames: Vec<Var>,
    /// Per-valid-frame latents [T_valid, d].
    pub latents: Var,
    /// Window summary latent [1, d]; also the decoder seed source.
    pub window_latent: Var,
    /// Soft assignments [T_valid, k] for the valid frames, in order.
    pub q: Var,
    /// Positions (within the window) of the valid frames.
    pub valid_positions: Vec<usize>,
}

impl ModelState {
    pub fn init(config: ModelConfig, in_h: usize, in_w: usize, n_vars: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = Geometry::for_input(in_h, in_w, n_vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = config.channel_capacities;
        let encoder = [
            ConvLstmCellParams::init(&mut rng, n_vars, caps[0]),
            ConvLstmCellParams::init(&mut rng, caps[0], caps[1]),
            ConvLstmCellParams::init(&mut rng, caps[1], caps[2]),
            ConvLstmCellParams::init(&mut rng, caps[2], caps[3]),
        ];
        let attention =
            GraphAttentionParams::init(&mut rng, caps[3], config.attention_dim, config.attention_heads);
        let bilstm = BiLstmParams::init(&mut rng, caps[3], config.bilstm_hidden / 2);
        let latent_proj = DenseParams::init(&mut rng, config.bilstm_hidden, config.latent_dim);
        let seed_dim = geometry.n_nodes() * caps[3];
        let seed_proj = DenseParams::init(&mut rng, 2 * config.latent_dim, seed_dim);
        let decoder = [
            ConvLstmCellParams::init(&mut rng, 2 * caps[3], caps[3]),
            ConvLstmCellParams::init(&mut rng, caps[3] + caps[2], caps[2]),
            ConvLstmCellParams::init(&mut rng, caps[2] + caps[1], caps[1]),
            ConvLstmCellParams::init(&mut rng, caps[1] + caps[0], caps[0]),
        ];
        let head = ConvLstmCellParams::init(&mut rng, caps[0], n_vars);
        let centroids = Tensor::zeros(&[config.n_clusters, config.latent_dim]);
        Ok(ModelState {
            config,
            geometry,
            encoder,
            attention,
            bilstm,
            latent_proj,
            seed_proj,
            decoder,
            head,
            centroids,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: std::array::from_fn(|i| self.encoder[i].bind(tape)),
            attention: self.attention.bind(tape),
            bilstm: self.bilstm.bind(tape),
            latent_proj: self.latent_proj.bind(tape),
            seed_proj: self.seed_proj.bind(tape),
            decoder: std::array::from_fn(|i| self.decoder[i].bind(tape)),
            head: self.head.bind(tape),
            centroids: tape.param(&self.centroids),
        }
    }

    pub fn centroids_matrix(&self) -> Array2<f64> {
        let k = self.config.n_clusters;
        let d = self.config.latent_dim;
        Array2::from_shape_vec((k, d), self.centroids.data().to_vec()).expect("centroid layout")
    }

    pub fn set_centroids(&mut self, centroids: &Array2<f64>) {
        let (k, d) = centroids.dim();
        assert_eq!(k, self.config.n_clusters);
        assert_eq!(d, self.config.latent_dim);
        self.centroids =
            Tensor::new(vec![k, d], centroids.iter().copied().collect()).expect("centroid layout");
    }

    fn check_window(&self, window: &Tensor) -> Result<()> {
        let s = window.shape();
        let g = self.geometry;
        if s.len() != 4 || s[1] != g.in_h || s[2] != g.in_w || s[3] != g.n_vars {
            return Err(ModelError::GeometryMismatch {
                h: s.get(1).copied().unwrap_or(0),
                w: s.get(2).copied().unwrap_or(0),
                c: s.get(3).copied().unwrap_or(0),
                mh: g.in_h,
                mw: g.in_w,
                mc: g.n_vars,
            });
        }
        Ok(())
    }

    /// Split a [T, H, W, C] window into per-frame vars, affinely mapped into
    /// the tanh band and zero-padded to the pooled-friendly extents.
    fn prepare_frames(&self, tape: &mut Tape, window: &Tensor) -> Result<Vec<Var>> {
        self.check_window(window)?;
        let g = self.geometry;
        let t_len = window.shape()[0];
        let whole = tape.constant(window.clone());
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let frame = tape.slice(
                whole,
                &[t, 0, 0, 0],
                &[t + 1, g.in_h, g.in_w, g.n_vars],
            )?;
            let frame = tape.reshape(frame, &[g.in_h, g.in_w, g.n_vars])?;
            let frame = tape.scale_add(frame, MODEL_RANGE_SCALE, MODEL_RANGE_OFFSET)?;
            frames.push(self.pad_frame(tape, frame)?);
        }
        Ok(frames)
    }

    fn pad_frame(&self, tape: &mut Tape, frame: Var) -> Result<Var> {
        let g = self.geometry;
        let mut out = frame;
        if g.pad_h > g.in_h {
            let fill = tape.constant(Tensor::zeros(&[g.pad_h - g.in_h, g.in_w, g.n_vars]));
            out = tape.concat(&[out, fill], 0)?;
        }
        if g.pad_w > g.in_w {
            let fill = tape.constant(Tensor::zeros(&[g.pad_h, g.pad_w - g.in_w, g.n_vars]));
            out = tape.concat(&[out, fill], 1)?;
        }
        Ok(out)
    }

    /// Encoder pyramid plus bottleneck. Returns per-frame latents [T, d],
    /// the window latent [1, d] and the four skip stacks (shallow to deep).
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        window: &Tensor,
        mask: &[bool],
    ) -> Result<(Var, Var, [Vec<Var>; 4])> {
        let caps = self.config.channel_capacities;
        let g = self.geometry;
        let mut frames = self.prepare_frames(tape, window)?;
        let mut skips: [Vec<Var>; 4] = Default::default();
        for level in 0..4 {
            let outs = convlstm_sequence(tape, &vars.encoder[level], &frames, mask, caps[level])?;
            skips[level] = outs.clone();
            if level < 3 {
                frames = outs
                    .into_iter()
                    .map(|f| tape.max_pool2d(f))
                    .collect::<crate::tensor::Result<Vec<_>>>()?;
            } else {
                frames = outs;
            }
        }

        // per-slice graph attention over the deepest nodes, pooled to one row
        let n = g.n_nodes();
        let f_dim = caps[3];
        let mut pooled_rows = Vec::with_capacity(frames.len());
        for (t, &frame) in frames.iter().enumerate() {
            if mask[t] {
                let nodes = tape.reshape(frame, &[n, f_dim])?;
                let graph = build_knn_graph(tape.value(nodes), self.config.knn_k);
                let refined = graph_attention(tape, &vars.attention, &graph, nodes)?;
                let row = tape.mean(refined, &[0])?;
                pooled_rows.push(tape.reshape(row, &[1, f_dim])?);
            } else {
                pooled_rows.push(tape.constant(Tensor::zeros(&[1, f_dim])));
            }
        }

        let (steps, summary) = bilstm_encode(tape, &vars.bilstm, &pooled_rows, mask)?;
        let mut latent_rows = Vec::with_capacity(steps.len());
        for &s in &steps {
            latent_rows.push(dense(tape, &vars.latent_proj, s)?);
        }
        let latents = tape.concat(&latent_rows, 0)?; // [T, d]
        let window_latent = dense(tape, &vars.latent_proj, summary)?; // [1, d]
        Ok((latents, window_latent, skips))
    }

    /// Mirror pass: each frame's seed at the deepest level is projected
    /// from that frame's latent joined with the window summary, each level
    /// concatenates the matching skip stack, and the head maps to n
    /// channels through tanh. Output frames are cropped back to the raw
    /// extents.
    pub fn decode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        latents: Var,
        window_latent: Var,
        skips: &[Vec<Var>; 4],
        mask: &[bool],
    ) -> Result<Vec<Var>> {
        let caps = self.config.channel_capacities;
        let g = self.geometry;
        let t_len = mask.len();
        let d = self.config.latent_dim;

        let mut seed_frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let frame_latent = tape.slice(latents, &[t, 0], &[t + 1, d])?;
            let joined = tape.concat(&[frame_latent, window_latent], 1)?;
            let seed_row = dense(tape, &vars.seed_proj, joined)?; // [1, n_nodes * c4]
            seed_frames.push(tape.reshape(seed_row, &[g.h4, g.w4, caps[3]])?);
        }

        let mut frames = seed_frames;
        for (stage, level) in (0..4).rev().enumerate() {
            // stage 0 runs at the seed resolution; later stages upsample first
            if stage > 0 {
                frames = frames
                    .into_iter()
                    .map(|f| tape.upsample2d(f))
                    .collect::<crate::tensor::Result<Vec<_>>>()?;
            }
            let mut fused = Vec::with_capacity(t_len);
            for t in 0..t_len {
                fused.push(tape.concat(&[frames[t], skips[level][t]], 2)?);
            }
            frames = convlstm_sequence(tape, &vars.decoder[stage], &fused, mask, caps[level])?;
        }

        let raw = convlstm_sequence(tape, &vars.head, &frames, mask, g.n_vars)?;
        let mut out = Vec::with_capacity(t_len);
        for frame in raw {
            let squashed = tape.tanh(frame)?;
            let cropped = if g.pad_h > g.in_h || g.pad_w > g.in_w {
                tape.slice(squashed, &[0, 0, 0], &[g.in_h, g.in_w, g.n_vars])?
            } else {
                squashed
            };
            out.push(cropped);
        }
        Ok(out)
    }

    /// Full pass over one window: reconstruction plus soft assignments of
    /// every valid frame.
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        window: &Tensor,
        mask: &[bool],
    ) -> Result<WindowForward> {
        let (latents, window_latent, skips) = self.encode(tape, vars, window, mask)?;
        let recon_frames = self.decode(tape, vars, latents, window_latent, &skips, mask)?;
        let valid_positions: Vec<usize> =
            (0..mask.len()).filter(|&t| mask[t]).collect();
        let valid_latents = if valid_positions.len() == mask.len() {
            latents
        } else {
            tape.gather_rows(latents, &valid_positions)?
        };
        let q = soft_assign(tape, valid_latents, vars.centroids, self.config.alpha)?;
        Ok(WindowForward {
            recon_frames,
            latents: valid_latents,
            window_latent,
            q,
            valid_positions,
        })
    }

    /// Latent embeddings of a window's valid frames, without recording
    /// gradients. Rows follow the window's valid-frame order.
    pub fn embed_window(&self, window: &Tensor, mask: &[bool]) -> Result<Array2<f64>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let (latents, _, _) = self.encode(&mut tape, &vars, window, mask)?;
        let valid: Vec<usize> = (0..mask.len()).filter(|&t| mask[t]).collect();
        let gathered = tape.gather_rows(latents, &valid)?;
        let v = tape.value(gathered);
        Ok(Array2::from_shape_vec(
            (valid.len(), self.config.latent_dim),
            v.data().to_vec(),
        )
        .expect("latent layout"))
    }

    /// Reconstruction of a window without gradient recording, mapped back
    /// from the tanh band to data units. Returns frames [H, W, n].
    pub fn reconstruct_window(&self, window: &Tensor, mask: &[bool]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape);
        let fwd = self.forward_window(&mut tape, &vars, window, mask)?;
        Ok(fwd
            .recon_frames
            .iter()
            .map(|&f| tape.value(f).map(from_model_range))
            .collect())
    }
}

impl ParamGroup for ModelState {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, cell) in self.encoder.iter().enumerate() {
            cell.visit(&format!("{prefix}encoder{i}"), f);
        }
        self.attention.visit(&format!("{prefix}attention"), f);
        self.bilstm.visit(&format!("{prefix}bilstm"), f);
        self.latent_proj.visit(&format!("{prefix}latent_proj"), f);
        self.seed_proj.visit(&format!("{prefix}seed_proj"), f);
        for (i, cell) in self.decoder.iter().enumerate() {
            cell.visit(&format!("{prefix}decoder{i}"), f);
        }
        self.head.visit(&format!("{prefix}head"), f);
        f(format!("{prefix}centroids"), &self.centroids);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, cell) in self.encoder.iter_mut().enumerate() {
            cell.visit_mut(&format!("{prefix}encoder{i}"), f);
        }
        self.attention.visit_mut(&format!("{prefix}attention"), f);
        self.bilstm.visit_mut(&format!("{prefix}bilstm"), f);
        self.latent_proj.visit_mut(&format!("{prefix}latent_proj"), f);
        self.seed_proj.visit_mut(&format!("{prefix}seed_proj"), f);
        for (i, cell) in self.decoder.iter_mut().enumerate() {
            cell.visit_mut(&format!("{prefix}decoder{i}"), f);
        }
        self.head.visit_mut(&format!("{prefix}head"), f);
        f(format!("{prefix}centroids"), &mut self.centroids);
    }
}

/// Var-level bindings of the model parameters keyed by the same names the
/// visitor produces; used to collect gradients after backward.
impl ModelVars {
    pub fn named_vars(&self, state: &ModelState) -> Vec<(String, Var)> {
        // Rebind order must match ParamGroup::visit; both are generated from
        // the same field order.
        let mut names = Vec::new();
        state.visit("", &mut |name, _| names.push(name));
        let mut vars = Vec::new();
        collect_vars(self, &mut vars);
        debug_assert_eq!(names.len(), vars.len());
        names.into_iter().zip(vars).collect()
    }
}

fn collect_cell(vars: &ConvLstmCellVars, out: &mut Vec<Var>) {
    for g in 0..4 {
        out.push(vars.w_x[g]);
        out.push(vars.w_h[g]);
        out.push(vars.bias[g]);
    }
    out.push(vars.ln_gamma);
    out.push(vars.ln_beta);
    out.push(vars.res_kernel);
}

fn collect_vars(vars: &ModelVars, out: &mut Vec<Var>) {
    for cell in &vars.encoder {
        collect_cell(cell, out);
    }
    vars.attention.collect(out);
    out.push(vars.bilstm.forward.w_x);
    out.push(vars.bilstm.forward.w_h);
    out.push(vars.bilstm.forward.bias);
    out.push(vars.bilstm.backward.w_x);
    out.push(vars.bilstm.backward.w_h);
    out.push(vars.bilstm.backward.bias);
    out.push(vars.latent_proj.weight);
    out.push(vars.latent_proj.bias);
    out.push(vars.seed_proj.weight);
    out.push(vars.seed_proj.bias);
    for cell in &vars.decoder {
        collect_cell(cell, out);
    }
    collect_cell(&vars.head, out);
    out.push(vars.centroids);
}

/// Student's-t kernel assignment of each embedding row to each centroid:
/// q_tj proportional to (1 + ||e_t - c_j||^2 / alpha)^(-(alpha+1)/2),
/// normalized over centroids.
pub fn soft_assign(tape: &mut Tape, embeddings: Var, centroids: Var, alpha: f64) -> Result<Var> {
    let m = tape.value(embeddings).shape()[0];
    let d = tape.value(embeddings).shape()[1];
    let k = tape.value(centroids).shape()[0];

    let e3 = tape.reshape(embeddings, &[m, 1, d])?;
    let e3 = tape.broadcast(e3, &[m, k, d])?;
    let c3 = tape.reshape(centroids, &[1, k, d])?;
    let c3 = tape.broadcast(c3, &[m, k, d])?;
    let diff = tape.sub(e3, c3)?;
    let sq = tape.square(diff)?;
    let dist2 = tape.sum(sq, &[2])?; // [m, k]

    let base = tape.scale_add(dist2, 1.0 / alpha, 1.0)?;
    let kernel = tape.pow_scalar(base, -(alpha + 1.0) / 2.0)?;
    let total = tape.sum(kernel, &[1])?; // [m]
    let total = tape.reshape(total, &[m, 1])?;
    let total = tape.broadcast(total, &[m, k])?;
    let inv = tape.pow_scalar(total, -1.0)?;
    Ok(tape.mul(kernel, inv)?)
}

/// Plain-value soft assignment for target refreshes and labeling.
pub fn soft_assign_matrix(
    embeddings: &Array2<f64>,
    centroids: &Array2<f64>,
    alpha: f64,
) -> Array2<f64> {
    let (m, d) = embeddings.dim();
    let (k, dc) = centroids.dim();
    assert_eq!(d, dc, "latent dims differ");
    let mut q = Array2::zeros((m, k));
    for i in 0..m {
        let mut total = 0.0;
        for j in 0..k {
            let mut dist2 = 0.0;
            for c in 0..d {
                let diff = embeddings[[i, c]] - centroids[[j, c]];
                dist2 += diff * diff;
            }
            let kern = (1.0 + dist2 / alpha).powf(-(alpha + 1.0) / 2.0);
            q[[i, j]] = kern;
            total += kern;
        }
        for j in 0..k {
            q[[i, j]] /= total;
        }
    }
    q
}

/// Row argmax with the lowest index winning ties.
pub fn hard_labels(q: &Array2<f64>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl GraphAttentionVars {
    fn collect(&self, out: &mut Vec<Var>) {
        for &(phi, a_self, a_neigh) in self.heads() {
            out.push(phi);
            out.push(a_self);
            out.push(a_neigh);
        }
    }
}
