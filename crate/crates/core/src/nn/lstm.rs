use rand::Rng;

use super::dense::{axpy, dot};

/// Single-layer LSTM. Gate pre-activations are stacked as
/// `[input, forget, candidate, output]`, each block `hidden` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub inputs: usize,
    pub hidden: usize,
    /// `4 * hidden x inputs`, row-major.
    pub w_input: Vec<f64>,
    /// `4 * hidden x hidden`, row-major.
    pub w_hidden: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Activations of one unrolled step.
#[derive(Clone, Debug)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-nonlinearity gates, `[i, f, g, o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmTrace {
    steps: Vec<StepCache>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            inputs,
            hidden,
            w_input: vec![0.0; 4 * hidden * inputs],
            w_hidden: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform weights scaled by the combined fan-in, zero biases except the
    /// forget gate which starts at 1.
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((inputs + hidden).max(1) as f64).sqrt();
        let mut draw = |n| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            inputs,
            hidden,
            w_input: draw(4 * hidden * inputs),
            w_hidden: draw(4 * hidden * hidden),
            bias,
        }
    }

    /// Runs the sequence (one row of `inputs` values per step, oldest
    /// first) from a zero state and returns the last hidden state.
    pub fn forward(&self, sequence: &[f64]) -> (Vec<f64>, LstmTrace) {
        let (ni, nh) = (self.inputs, self.hidden);
        debug_assert_eq!(sequence.len() % ni.max(1), 0);
        let mut h = vec![0.0; nh];
        let mut c = vec![0.0; nh];
        let mut steps = Vec::with_capacity(sequence.len() / ni.max(1));
        for x in sequence.chunks_exact(ni) {
            let mut z = self.bias.clone();
            for (r, zr) in z.iter_mut().enumerate() {
                let wx = &self.w_input[r * ni..(r + 1) * ni];
                let wh = &self.w_hidden[r * nh..(r + 1) * nh];
                *zr += dot(wx, x) + dot(wh, &h);
            }
            let mut gates = z;
            for (k, g) in gates.iter_mut().enumerate() {
                *g = if (2 * nh..3 * nh).contains(&k) { g.tanh() } else { sigmoid(*g) };
            }
            let c_new: Vec<f64> = (0..nh)
                .map(|j| gates[nh + j] * c[j] + gates[j] * gates[2 * nh + j])
                .collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..nh).map(|j| gates[3 * nh + j] * tanh_c[j]).collect();
            steps.push(StepCache {
                x: x.to_vec(),
                h_prev: std::mem::replace(&mut h, h_new),
                c_prev: std::mem::replace(&mut c, c_new),
                gates,
                tanh_c,
            });
        }
        (h, LstmTrace { steps })
    }

    /// Backpropagation through time from the gradient of the final hidden
    /// state. Parameter gradients are accumulated into `grad`.
    pub fn backward(&self, trace: &LstmTrace, d_last: &[f64], grad: &mut Lstm) {
        let (ni, nh) = (self.inputs, self.hidden);
        let mut dh = d_last.to_vec();
        let mut dc = vec![0.0; nh];
        let mut dz = vec![0.0; 4 * nh];
        for step in trace.steps.iter().rev() {
            let g = &step.gates;
            for j in 0..nh {
                let (i, f, cand, o) = (g[j], g[nh + j], g[2 * nh + j], g[3 * nh + j]);
                let tc = step.tanh_c[j];
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dcj * cand * i * (1.0 - i);
                dz[nh + j] = dcj * step.c_prev[j] * f * (1.0 - f);
                dz[2 * nh + j] = dcj * i * (1.0 - cand * cand);
                dz[3 * nh + j] = dh[j] * tc * o * (1.0 - o);
                dc[j] = dcj * f;
            }
            let mut dh_prev = vec![0.0; nh];
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad.bias[r] += d;
                axpy(&mut grad.w_input[r * ni..(r + 1) * ni], d, &step.x);
                let rows = r * nh..(r + 1) * nh;
                axpy(&mut grad.w_hidden[rows.clone()], d, &step.h_prev);
                axpy(&mut dh_prev, d, &self.w_hidden[rows]);
            }
            dh = dh_prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_zero_bias_gives_zero_state() {
        let mut lstm = Lstm::zeros(2, 3);
        lstm.w_input.iter_mut().for_each(|w| *w = 0.3);
        lstm.w_hidden.iter_mut().for_each(|w| *w = -0.2);
        let (h, _) = lstm.forward(&[0.0; 8]);
        assert_eq!(h, vec![0.0; 3]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut lstm = Lstm::zeros(1, 1);
        lstm.w_input = vec![0.5, -0.5, 1.0, 2.0];
        let (h, _) = lstm.forward(&[1.0]);
        let (i, cand, o) = (sigmoid(0.5), 1.0f64.tanh(), sigmoid(2.0));
        let expected = o * (i * cand).tanh();
        assert!((h[0] - expected).abs() < 1e-15);
    }
}
