//! Plain (non-convolutional) LSTM cell and the bidirectional sequence
//! encoder used at the bottleneck.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

use super::{glorot, ParamGroup};

/// Gate order inside the stacked weight matrices: i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub hidden: usize,
    pub w_x: Tensor, // [in, 4H]
    pub w_h: Tensor, // [H, 4H]
    pub bias: Tensor, // [4H]
}

#[derive(Clone, Copy, Debug)]
pub struct LstmCellVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
    hidden: usize,
}

impl LstmCellParams {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // open forget gate
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        LstmCellParams {
            hidden,
            w_x: glorot(rng, &[in_dim, 4 * hidden], in_dim, hidden),
            w_h: glorot(rng, &[hidden, 4 * hidden], hidden, hidden),
            bias,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmCellVars {
        LstmCellVars {
            w_x: tape.param(&self.w_x),
            w_h: tape.param(&self.w_h),
            bias: tape.param(&self.bias),
            hidden: self.hidden,
        }
    }
}

impl ParamGroup for LstmCellParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w_x"), &self.w_x);
        f(format!("{prefix}.w_h"), &self.w_h);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_x"), &mut self.w_x);
        f(format!("{prefix}.w_h"), &mut self.w_h);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// One step on a [1, in] row; state tensors are [1, H].
pub fn lstm_step(
    tape: &mut Tape,
    vars: &LstmCellVars,
    x: Var,
    state: (Var, Var),
) -> Result<(Var, Var)> {
    let (h_prev, c_prev) = state;
    let hid = vars.hidden;
    let from_x = tape.matmul(x, vars.w_x)?;
    let from_h = tape.matmul(h_prev, vars.w_h)?;
    let sum = tape.add(from_x, from_h)?;
    let bias = tape.reshape(vars.bias, &[1, 4 * hid])?;
    let pre = tape.add(sum, bias)?;

    let part = |tape: &mut Tape, g: usize| tape.slice(pre, &[0, g * hid], &[1, (g + 1) * hid]);
    let i_pre = part(tape, 0)?;
    let f_pre = part(tape, 1)?;
    let g_pre = part(tape, 2)?;
    let o_pre = part(tape, 3)?;
    let gate_i = tape.sigmoid(i_pre)?;
    let gate_f = tape.sigmoid(f_pre)?;
    let gate_g = tape.tanh(g_pre)?;
    let gate_o = tape.sigmoid(o_pre)?;

    let keep = tape.mul(gate_f, c_prev)?;
    let write = tape.mul(gate_i, gate_g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new)?;
    let h_new = tape.mul(gate_o, c_act)?;
    Ok((h_new, c_new))
}

/// Forward and backward cells; the encoder output dimension is twice the
/// per-direction hidden size.
#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmVars {
    pub forward: LstmCellVars,
    pub backward: LstmCellVars,
}

impl BiLstmParams {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, hidden_per_direction: usize) -> Self {
        BiLstmParams {
            forward: LstmCellParams::init(rng, in_dim, hidden_per_direction),
            backward: LstmCellParams::init(rng, in_dim, hidden_per_direction),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn bind(&self, tape: &mut Tape) -> BiLstmVars {
        BiLstmVars {
            forward: self.forward.bind(tape),
            backward: self.backward.bind(tape),
        }
    }
}

impl ParamGroup for BiLstmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.forward.visit(&format!("{prefix}.fwd"), f);
        self.backward.visit(&format!("{prefix}.bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.forward.visit_mut(&format!("{prefix}.fwd"), f);
        self.backward.visit_mut(&format!("{prefix}.bwd"), f);
    }
}

fn directional_pass(
    tape: &mut Tape,
    vars: &LstmCellVars,
    frames: &[Var],
    mask: &[bool],
    reversed: bool,
) -> Result<(Vec<Var>, Var)> {
    let hid = vars.hidden;
    let mut h = tape.constant(Tensor::zeros(&[1, hid]));
    let mut c = tape.constant(Tensor::zeros(&[1, hid]));
    let mut outputs = vec![h; frames.len()];
    let order: Vec<usize> = if reversed {
        (0..frames.len()).rev().collect()
    } else {
        (0..frames.len()).collect()
    };
    for t in order {
        if mask[t] {
            let (h_new, c_new) = lstm_step(tape, vars, frames[t], (h, c))?;
            h = h_new;
            c = c_new;
            outputs[t] = h;
        } else {
            outputs[t] = tape.constant(Tensor::zeros(&[1, hid]));
        }
    }
    Ok((outputs, h))
}

/// Run both directions over a sequence of [1, F] rows. Returns the per-step
/// outputs [1, 2H] (forward state || backward state at each position) and
/// the window summary [1, 2H] (final forward state || final backward state).
/// Masked frames freeze both directions' states and emit zeros.
pub fn bilstm_encode(
    tape: &mut Tape,
    vars: &BiLstmVars,
    frames: &[Var],
    mask: &[bool],
) -> Result<(Vec<Var>, Var)> {
    debug_assert_eq!(frames.len(), mask.len());
    let (fwd_out, fwd_final) = directional_pass(tape, &vars.forward, frames, mask, false)?;
    let (bwd_out, bwd_final) = directional_pass(tape, &vars.backward, frames, mask, true)?;
    let mut per_step = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        per_step.push(tape.concat(&[fwd_out[t], bwd_out[t]], 1)?);
    }
    let summary = tape.concat(&[fwd_final, bwd_final], 1)?;
    Ok((per_step, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn row(tape: &mut Tape, values: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![1, values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn single_frame_uses_same_input_for_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = BiLstmParams::init(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = row(&mut tape, &[0.5, -0.2, 1.0]);
        let (steps, summary) = bilstm_encode(&mut tape, &vars, &[x], &[true]).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(tape.value(summary).shape(), &[1, 4]);
        assert_eq!(tape.value(steps[0]), tape.value(summary));
    }

    #[test]
    fn palindrome_with_shared_parameters_gives_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cell = LstmCellParams::init(&mut rng, 2, 3);
        let params = BiLstmParams {
            forward: cell.clone(),
            backward: cell,
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let a = row(&mut tape, &[0.3, -0.4]);
        let b = row(&mut tape, &[1.0, 0.1]);
        let frames = [a, b, a];
        let (_, summary) = bilstm_encode(&mut tape, &vars, &frames, &[true; 3]).unwrap();
        let v = tape.value(summary);
        for j in 0..3 {
            assert!(
                (v.get(&[0, j]) - v.get(&[0, j + 3])).abs() < 1e-15,
                "forward and backward halves differ at {j}"
            );
        }
    }

    #[test]
    fn two_step_scalar_case_matches_hand_unrolled_gates() {
        // hidden = 1, input = 1: all weights scalar
        let params = LstmCellParams {
            hidden: 1,
            w_x: Tensor::new(vec![1, 4], vec![0.5, -0.3, 0.8, 0.2]).unwrap(),
            w_h: Tensor::new(vec![1, 4], vec![0.1, 0.4, -0.6, 0.9]).unwrap(),
            bias: Tensor::new(vec![4], vec![0.05, -0.1, 0.2, 0.0]).unwrap(),
        };
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let xs = [0.7, -1.2];
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let i = sigma(0.5 * x + 0.1 * h + 0.05);
            let f = sigma(-0.3 * x + 0.4 * h - 0.1);
            let g = (0.8 * x - 0.6 * h + 0.2).tanh();
            let o = sigma(0.2 * x + 0.9 * h);
            c = f * c + i * g;
            h = o * c.tanh();
        }

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut state = (
            tape.constant(Tensor::zeros(&[1, 1])),
            tape.constant(Tensor::zeros(&[1, 1])),
        );
        for x in xs {
            let xv = row(&mut tape, &[x]);
            state = lstm_step(&mut tape, &vars, xv, state).unwrap();
        }
        assert!((tape.value(state.0).item() - h).abs() < 1e-15);
        assert!((tape.value(state.1).item() - c).abs() < 1e-15);
    }

    #[test]
    fn masked_frames_freeze_state_and_emit_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = BiLstmParams::init(&mut rng, 2, 2);
        let frames_data: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let frames: Vec<Var> = frames_data.iter().map(|v| row(&mut tape, v)).collect();
        let (steps, summary) =
            bilstm_encode(&mut tape, &vars, &frames, &[true, true, false]).unwrap();
        assert!(tape.value(steps[2]).data().iter().all(|&v| v == 0.0));

        let mut tape_b = Tape::new();
        let vars_b = params.bind(&mut tape_b);
        let frames_b: Vec<Var> = frames_data[..2].iter().map(|v| row(&mut tape_b, v)).collect();
        let (_, summary_b) = bilstm_encode(&mut tape_b, &vars_b, &frames_b, &[true, true]).unwrap();
        assert_eq!(tape.value(summary), tape_b.value(summary_b));
    }

    #[test]
    fn bilstm_gradients_pass_finite_differences() {
        use crate::tensor::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = BiLstmParams::init(&mut rng, 2, 2);
        let point = Tensor::new(
            vec![3, 2],
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = grad_check(
            move |t, x| {
                let vars = params.bind(t);
                let mut frames = Vec::new();
                for i in 0..3 {
                    frames.push(t.slice(x, &[i, 0], &[i + 1, 2])?);
                }
                let (steps, summary) = bilstm_encode(t, &vars, &frames, &[true; 3])?;
                let all = t.concat(&[steps[0], steps[1], steps[2], summary], 0)?;
                let sq = t.square(all)?;
                t.sum_all(sq)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }
}
