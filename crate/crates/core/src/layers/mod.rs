//! Building blocks of the architecture: dense projections, convolutional
//! recurrent cells, feature-space kNN graphs with attention, and a
//! bidirectional recurrent encoder. Each block is a pure function of
//! (parameters, inputs) recorded on a [`Tape`].

mod graph;
mod lstm;

pub use graph::{build_knn_graph, graph_attention, GraphAttentionParams, GraphAttentionVars, GraphSnapshot};
pub use lstm::{bilstm_encode, BiLstmParams, BiLstmVars, LstmCellParams, LstmCellVars};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visitation over named parameter tensors, in a fixed declaration order.
/// Drives the optimizer, checkpointing and gradient plumbing.
pub trait ParamGroup {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

pub(crate) fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

// ---- dense ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DenseParams {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseParams {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        DenseParams {
            weight: glorot(rng, &[in_dim, out_dim], in_dim, out_dim),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> DenseVars {
        DenseVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl ParamGroup for DenseParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Affine map rows(x) . W + b for x of shape [m, in].
pub fn dense(tape: &mut Tape, vars: &DenseVars, x: Var) -> Result<Var> {
    let m = tape.value(x).shape()[0];
    let out = tape.value(vars.weight).shape()[1];
    let prod = tape.matmul(x, vars.weight)?;
    let bias = tape.reshape(vars.bias, &[1, out])?;
    let bias = tape.broadcast(bias, &[m, out])?;
    tape.add(prod, bias)
}

// ---- convolutional recurrent cell ------------------------------------------

pub const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

/// Gate order: input, forget, cell, output. All gate convolutions are 3x3;
/// the residual path is a 1x1 projection from the cell input.
#[derive(Clone, Debug)]
pub struct ConvLstmCellParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub w_x: [Tensor; 4],   // [3, 3, C_in, C_out]
    pub w_h: [Tensor; 4],   // [3, 3, C_out, C_out]
    pub bias: [Tensor; 4],  // [C_out]
    pub ln_gamma: Tensor,   // [C_out]
    pub ln_beta: Tensor,    // [C_out]
    pub res_kernel: Tensor, // [1, 1, C_in, C_out]
}

#[derive(Clone, Debug)]
pub struct ConvLstmCellVars {
    pub w_x: [Var; 4],
    pub w_h: [Var; 4],
    pub bias: [Var; 4],
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub res_kernel: Var,
}

impl ConvLstmCellParams {
    pub fn init(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize) -> Self {
        let conv = |rng: &mut ChaCha8Rng, cin: usize| {
            glorot(
                rng,
                &[3, 3, cin, out_channels],
                9 * cin,
                9 * out_channels,
            )
        };
        let w_x = std::array::from_fn(|_| conv(rng, in_channels));
        let w_h = std::array::from_fn(|_| conv(rng, out_channels));
        // forget gate starts open so early training can carry memory
        let bias = std::array::from_fn(|g| {
            if g == 1 {
                Tensor::full(&[out_channels], 1.0)
            } else {
                Tensor::zeros(&[out_channels])
            }
        });
        ConvLstmCellParams {
            in_channels,
            out_channels,
            w_x,
            w_h,
            bias,
            ln_gamma: Tensor::full(&[out_channels], 1.0),
            ln_beta: Tensor::zeros(&[out_channels]),
            res_kernel: glorot(rng, &[1, 1, in_channels, out_channels], in_channels, out_channels),
        }
    }

    /// All-zero parameters; used by tests exercising the gate identities.
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        ConvLstmCellParams {
            in_channels,
            out_channels,
            w_x: std::array::from_fn(|_| Tensor::zeros(&[3, 3, in_channels, out_channels])),
            w_h: std::array::from_fn(|_| Tensor::zeros(&[3, 3, out_channels, out_channels])),
            bias: std::array::from_fn(|_| Tensor::zeros(&[out_channels])),
            ln_gamma: Tensor::zeros(&[out_channels]),
            ln_beta: Tensor::zeros(&[out_channels]),
            res_kernel: Tensor::zeros(&[1, 1, in_channels, out_channels]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ConvLstmCellVars {
        ConvLstmCellVars {
            w_x: std::array::from_fn(|g| tape.param(&self.w_x[g])),
            w_h: std::array::from_fn(|g| tape.param(&self.w_h[g])),
            bias: std::array::from_fn(|g| tape.param(&self.bias[g])),
            ln_gamma: tape.param(&self.ln_gamma),
            ln_beta: tape.param(&self.ln_beta),
            res_kernel: tape.param(&self.res_kernel),
        }
    }
}

impl ParamGroup for ConvLstmCellParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for g in 0..4 {
            f(format!("{prefix}.wx_{}", GATE_NAMES[g]), &self.w_x[g]);
            f(format!("{prefix}.wh_{}", GATE_NAMES[g]), &self.w_h[g]);
            f(format!("{prefix}.b_{}", GATE_NAMES[g]), &self.bias[g]);
        }
        f(format!("{prefix}.ln_gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &self.ln_beta);
        f(format!("{prefix}.res_kernel"), &self.res_kernel);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for g in 0..4 {
            f(format!("{prefix}.wx_{}", GATE_NAMES[g]), &mut self.w_x[g]);
            f(format!("{prefix}.wh_{}", GATE_NAMES[g]), &mut self.w_h[g]);
            f(format!("{prefix}.b_{}", GATE_NAMES[g]), &mut self.bias[g]);
        }
        f(format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &mut self.ln_beta);
        f(format!("{prefix}.res_kernel"), &mut self.res_kernel);
    }
}

/// One recurrent step on an [H, W, C_in] frame with state tensors of shape
/// [H, W, C_out]. Gate activations follow the standard formulation with
/// convolutions in place of matrix products; the emitted (and carried)
/// hidden state is layer-normalized over channels with a learned affine,
/// plus a 1x1 residual projection of the frame.
pub fn convlstm_step(
    tape: &mut Tape,
    vars: &ConvLstmCellVars,
    x: Var,
    state: (Var, Var),
) -> Result<(Var, (Var, Var))> {
    let (h_prev, c_prev) = state;
    let shape = tape.value(h_prev).shape().to_vec();
    let c_out = shape[2];

    let mut pre = [None, None, None, None];
    for g in 0..4 {
        let from_x = tape.conv2d(x, vars.w_x[g])?;
        let from_h = tape.conv2d(h_prev, vars.w_h[g])?;
        let sum = tape.add(from_x, from_h)?;
        let bias = tape.reshape(vars.bias[g], &[1, 1, c_out])?;
        let bias = tape.broadcast(bias, &shape)?;
        pre[g] = Some(tape.add(sum, bias)?);
    }
    let gate_i = tape.sigmoid(pre[0].unwrap())?;
    let gate_f = tape.sigmoid(pre[1].unwrap())?;
    let gate_g = tape.tanh(pre[2].unwrap())?;
    let gate_o = tape.sigmoid(pre[3].unwrap())?;

    let keep = tape.mul(gate_f, c_prev)?;
    let write = tape.mul(gate_i, gate_g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new)?;
    let h_raw = tape.mul(gate_o, c_act)?;

    let normed = tape.layer_norm(h_raw, LAYER_NORM_EPS)?;
    let gamma = tape.reshape(vars.ln_gamma, &[1, 1, c_out])?;
    let gamma = tape.broadcast(gamma, &shape)?;
    let beta = tape.reshape(vars.ln_beta, &[1, 1, c_out])?;
    let beta = tape.broadcast(beta, &shape)?;
    let scaled = tape.mul(normed, gamma)?;
    let shifted = tape.add(scaled, beta)?;
    let residual = tape.conv2d(x, vars.res_kernel)?;
    let h_new = tape.add(shifted, residual)?;

    Ok((h_new, (h_new, c_new)))
}

/// Apply the cell across a window of frames, carrying state. Frames where
/// `mask[t]` is false leave the state untouched and emit zeros.
pub fn convlstm_sequence(
    tape: &mut Tape,
    vars: &ConvLstmCellVars,
    frames: &[Var],
    mask: &[bool],
    out_channels: usize,
) -> Result<Vec<Var>> {
    debug_assert_eq!(frames.len(), mask.len());
    let spatial = tape.value(frames[0]).shape().to_vec();
    let state_shape = [spatial[0], spatial[1], out_channels];
    let mut h = tape.constant(Tensor::zeros(&state_shape));
    let mut c = tape.constant(Tensor::zeros(&state_shape));
    let mut outputs = Vec::with_capacity(frames.len());
    for (t, &x) in frames.iter().enumerate() {
        if mask[t] {
            let (out, (h_new, c_new)) = convlstm_step(tape, vars, x, (h, c))?;
            h = h_new;
            c = c_new;
            outputs.push(out);
        } else {
            outputs.push(tape.constant(Tensor::zeros(&state_shape)));
        }
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dense_identity_weight_passes_input_through() {
        let mut tape = Tape::new();
        let params = DenseParams {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let vars = params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, -1.5]).unwrap());
        let y = dense(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.5]);
    }

    #[test]
    fn dense_zero_input_yields_bias() {
        let mut tape = Tape::new();
        let params = DenseParams {
            weight: Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap(),
            bias: Tensor::new(vec![3], vec![0.1, -0.2, 0.7]).unwrap(),
        };
        let vars = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let y = dense(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, -0.2, 0.7]);
    }

    #[test]
    fn dense_matches_hand_product() {
        // [1 2; 3 4] applied to x = [5, 6] plus bias [0.5, -0.5]
        let mut tape = Tape::new();
        let params = DenseParams {
            weight: Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        };
        let vars = params.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap());
        let y = dense(&mut tape, &vars, x).unwrap();
        // y = [5*1 + 6*2 + 0.5, 5*3 + 6*4 - 0.5] = [17.5, 38.5]
        assert_eq!(tape.value(y).data(), &[17.5, 38.5]);
    }

    #[test]
    fn convlstm_zero_parameters_zero_state_emit_zero() {
        let mut tape = Tape::new();
        let params = ConvLstmCellParams::zeros(2, 3);
        let vars = params.bind(&mut tape);
        let x = tape.constant(random_tensor(&mut rng(1), &[4, 4, 2], -1.0, 1.0));
        let h = tape.constant(Tensor::zeros(&[4, 4, 3]));
        let c = tape.constant(Tensor::zeros(&[4, 4, 3]));
        let (out, (h2, c2)) = convlstm_step(&mut tape, &vars, x, (h, c)).unwrap();
        assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_carries_memory() {
        let mut params = ConvLstmCellParams::zeros(1, 2);
        params.bias[1] = Tensor::full(&[2], 50.0); // forget gate ~ 1
        params.bias[0] = Tensor::full(&[2], -50.0); // input gate ~ 0
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(random_tensor(&mut rng(2), &[2, 2, 1], -1.0, 1.0));
        let c0 = random_tensor(&mut rng(3), &[2, 2, 2], -0.5, 0.5);
        let h = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let c = tape.constant(c0.clone());
        let (_, (_, c2)) = convlstm_step(&mut tape, &vars, x, (h, c)).unwrap();
        for (a, b) in tape.value(c2).data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-12, "memory carry violated: {a} vs {b}");
        }
    }

    #[test]
    fn one_by_one_grid_matches_scalar_reference() {
        let mut r = rng(4);
        let cin = 2;
        let cout = 3;
        let params = ConvLstmCellParams::init(&mut r, cin, cout);
        let x_t = random_tensor(&mut r, &[1, 1, cin], -1.0, 1.0);
        let h_t = random_tensor(&mut r, &[1, 1, cout], -0.5, 0.5);
        let c_t = random_tensor(&mut r, &[1, 1, cout], -0.5, 0.5);

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(x_t.clone());
        let h = tape.constant(h_t.clone());
        let c = tape.constant(c_t.clone());
        let (out, (_, c2)) = convlstm_step(&mut tape, &vars, x, (h, c)).unwrap();

        // at 1x1 the center tap of each 3x3 kernel is the whole convolution
        let center = |k: &Tensor, cin: usize| -> Array2<f64> {
            let mut m = Array2::zeros((cin, cout));
            for ci in 0..cin {
                for co in 0..cout {
                    m[[ci, co]] = k.get(&[1, 1, ci, co]);
                }
            }
            m
        };
        let wx: Vec<Array2<f64>> = params.w_x.iter().map(|k| center(k, cin)).collect();
        let wh: Vec<Array2<f64>> = params.w_h.iter().map(|k| center(k, cout)).collect();
        let mut res = Array2::zeros((cin, cout));
        for ci in 0..cin {
            for co in 0..cout {
                res[[ci, co]] = params.res_kernel.get(&[0, 0, ci, co]);
            }
        }
        let reference = stclust_naive::ScalarLstmStep {
            w_x: [&wx[0], &wx[1], &wx[2], &wx[3]],
            w_h: [&wh[0], &wh[1], &wh[2], &wh[3]],
            bias: [
                params.bias[0].data(),
                params.bias[1].data(),
                params.bias[2].data(),
                params.bias[3].data(),
            ],
            ln_gamma: params.ln_gamma.data(),
            ln_beta: params.ln_beta.data(),
            ln_eps: LAYER_NORM_EPS,
            res_w: &res,
        };
        let (h_ref, c_ref) = reference.step(x_t.data(), h_t.data(), c_t.data());
        for (a, b) in tape.value(out).data().iter().zip(&h_ref) {
            assert!((a - b).abs() < 1e-12, "hidden mismatch {a} vs {b}");
        }
        for (a, b) in tape.value(c2).data().iter().zip(&c_ref) {
            assert!((a - b).abs() < 1e-12, "cell mismatch {a} vs {b}");
        }
    }

    #[test]
    fn sequence_of_one_equals_single_step() {
        let mut r = rng(5);
        let params = ConvLstmCellParams::init(&mut r, 2, 2);
        let x_t = random_tensor(&mut r, &[4, 4, 2], -1.0, 1.0);

        let mut tape_a = Tape::new();
        let vars = params.bind(&mut tape_a);
        let x = tape_a.constant(x_t.clone());
        let outs = convlstm_sequence(&mut tape_a, &vars, &[x], &[true], 2).unwrap();

        let mut tape_b = Tape::new();
        let vars_b = params.bind(&mut tape_b);
        let xb = tape_b.constant(x_t);
        let h = tape_b.constant(Tensor::zeros(&[4, 4, 2]));
        let c = tape_b.constant(Tensor::zeros(&[4, 4, 2]));
        let (out, _) = convlstm_step(&mut tape_b, &vars_b, xb, (h, c)).unwrap();
        assert_eq!(tape_a.value(outs[0]), tape_b.value(out));
    }

    #[test]
    fn masked_trailing_frame_freezes_state_and_emits_zeros() {
        let mut r = rng(6);
        let params = ConvLstmCellParams::init(&mut r, 1, 2);
        let frames_t: Vec<Tensor> =
            (0..3).map(|_| random_tensor(&mut r, &[2, 2, 1], -1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let frames: Vec<Var> = frames_t.iter().map(|t| tape.constant(t.clone())).collect();
        let with_mask =
            convlstm_sequence(&mut tape, &vars, &frames, &[true, true, false], 2).unwrap();
        assert!(tape.value(with_mask[2]).data().iter().all(|&v| v == 0.0));

        let mut tape_b = Tape::new();
        let vars_b = params.bind(&mut tape_b);
        let frames_b: Vec<Var> = frames_t[..2].iter().map(|t| tape_b.constant(t.clone())).collect();
        let truncated = convlstm_sequence(&mut tape_b, &vars_b, &frames_b, &[true, true], 2).unwrap();
        assert_eq!(tape.value(with_mask[1]), tape_b.value(truncated[1]));
    }

    #[test]
    fn two_step_sequence_matches_manual_unroll() {
        let mut r = rng(7);
        let params = ConvLstmCellParams::init(&mut r, 2, 3);
        let xs: Vec<Tensor> =
            (0..2).map(|_| random_tensor(&mut r, &[2, 2, 2], -1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let frames: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let outs = convlstm_sequence(&mut tape, &vars, &frames, &[true, true], 3).unwrap();

        let mut tape_b = Tape::new();
        let vars_b = params.bind(&mut tape_b);
        let x0 = tape_b.constant(xs[0].clone());
        let x1 = tape_b.constant(xs[1].clone());
        let h = tape_b.constant(Tensor::zeros(&[2, 2, 3]));
        let c = tape_b.constant(Tensor::zeros(&[2, 2, 3]));
        let (o0, state) = convlstm_step(&mut tape_b, &vars_b, x0, (h, c)).unwrap();
        let (o1, _) = convlstm_step(&mut tape_b, &vars_b, x1, state).unwrap();
        assert_eq!(tape.value(outs[0]), tape_b.value(o0));
        assert_eq!(tape.value(outs[1]), tape_b.value(o1));
    }

    #[test]
    fn convlstm_step_loss_passes_gradient_check() {
        use crate::tensor::grad_check;
        let mut r = rng(8);
        let params = ConvLstmCellParams::init(&mut r, 2, 2);
        let h0 = random_tensor(&mut r, &[4, 4, 2], -0.5, 0.5);
        let c0 = random_tensor(&mut r, &[4, 4, 2], -0.5, 0.5);
        let x0 = random_tensor(&mut r, &[4, 4, 2], -1.0, 1.0);
        // weighted readout: a plain sum cancels the normalized component
        // lane-wise and starves the check of signal
        let w_out = random_tensor(&mut r, &[4, 4, 2], 0.5, 1.5);
        let w_cell = random_tensor(&mut r, &[4, 4, 2], 0.5, 1.5);

        // gradient w.r.t. the input frame through the full step
        let p = params.clone();
        let (h0c, c0c) = (h0.clone(), c0.clone());
        let (w1, w2) = (w_out.clone(), w_cell.clone());
        let report = grad_check(
            move |t, x| {
                let vars = p.bind(t);
                let h = t.constant(h0c.clone());
                let c = t.constant(c0c.clone());
                let (out, (_, c2)) = convlstm_step(t, &vars, x, (h, c))?;
                let wo = t.constant(w1.clone());
                let wc = t.constant(w2.clone());
                let out = t.mul(out, wo)?;
                let c2 = t.mul(c2, wc)?;
                let a = t.sum_all(out)?;
                let b = t.sum_all(c2)?;
                t.add(a, b)
            },
            &x0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "input grad: {}", report.max_rel_error);

        // gradient w.r.t. one gate kernel
        let p = params.clone();
        let report = grad_check(
            move |t, w| {
                let mut vars = p.bind(t);
                vars.w_x[0] = w;
                let x = t.constant(x0.clone());
                let h = t.constant(h0.clone());
                let c = t.constant(c0.clone());
                let (out, _) = convlstm_step(t, &vars, x, (h, c))?;
                let wo = t.constant(w_out.clone());
                let out = t.mul(out, wo)?;
                t.sum_all(out)
            },
            &params.w_x[0],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "kernel grad: {}", report.max_rel_error);
    }
}
