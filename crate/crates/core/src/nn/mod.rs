//! Dueling Q-network with an LSTM front end, written out by hand.
//!
//! ```text
//! load history (steps x edges) --LSTM--> h_last --+
//!                                                 +--> FC1 (ReLU) --> FC2 (ReLU) --+--> A head --> A(a)
//! scalar features ---------------------------------+                                +--> V head --> V
//!
//! Q(a) = V + A(a) - mean_a' A(a')
//! ```
//!
//! Each head is a ReLU hidden layer followed by a linear output. The
//! forward pass returns a [`ForwardTrace`] that [`QNetwork::backward`]
//! consumes to produce exact gradients, including backpropagation through
//! time across the LSTM steps.

mod dense;
mod lstm;
mod optim;

pub use dense::Dense;
pub use lstm::{Lstm, LstmTrace};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};

use rand::Rng;
use thiserror::Error;

use dense::{relu_backward, relu_in_place};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{what}: expected {expected} values, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient in `{group}`[{index}]: {value}")]
    NonFiniteGradient {
        group: &'static str,
        index: usize,
        value: f64,
    },
    #[error("cannot decode parameters: {0}")]
    Decode(String),
}

/// Layer sizes of a Q-network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    /// LSTM steps (rows of the load history).
    pub history: usize,
    /// Values per LSTM step (one per edge node).
    pub seq_features: usize,
    /// Features that bypass the LSTM.
    pub scalar_features: usize,
    pub lstm_hidden: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub head_hidden: usize,
    pub actions: usize,
}

impl NetShape {
    /// Shape for a system with `num_edges` edge nodes: the scalar features
    /// are task size, two queue waits and one queue length per edge.
    pub fn for_system(num_edges: usize, history: usize, hidden: HiddenSizes) -> Self {
        Self {
            history,
            seq_features: num_edges,
            scalar_features: 3 + num_edges,
            lstm_hidden: hidden.lstm,
            fc1: hidden.fc1,
            fc2: hidden.fc2,
            head_hidden: hidden.head,
            actions: num_edges + 1,
        }
    }

    fn fields(&self) -> [usize; 8] {
        [
            self.history,
            self.seq_features,
            self.scalar_features,
            self.lstm_hidden,
            self.fc1,
            self.fc2,
            self.head_hidden,
            self.actions,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenSizes {
    pub lstm: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub head: usize,
}

impl Default for HiddenSizes {
    fn default() -> Self {
        Self {
            lstm: 32,
            fc1: 128,
            fc2: 64,
            head: 32,
        }
    }
}

/// Network input: scalar features plus the flattened history matrix
/// (oldest row first).
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub scalars: Vec<f64>,
    pub sequence: Vec<f64>,
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    shape: NetShape,
    pub lstm: Lstm,
    pub fc1: Dense,
    pub fc2: Dense,
    pub adv_hidden: Dense,
    pub adv_out: Dense,
    pub val_hidden: Dense,
    pub val_out: Dense,
}

/// Gradients share the parameter layout.
pub type Gradients = QNetwork;

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    lstm: LstmTrace,
    joined: Vec<f64>,
    fc1: Vec<f64>,
    fc2: Vec<f64>,
    adv_hidden: Vec<f64>,
    val_hidden: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub q: Vec<f64>,
    pub value: f64,
    pub advantages: Vec<f64>,
    pub trace: ForwardTrace,
}

/// Combines the two heads into Q-values.
pub fn dueling_q(value: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| value + a - mean).collect()
}

const GROUP_NAMES: [&str; 15] = [
    "lstm.w_input",
    "lstm.w_hidden",
    "lstm.bias",
    "fc1.weights",
    "fc1.bias",
    "fc2.weights",
    "fc2.bias",
    "adv_hidden.weights",
    "adv_hidden.bias",
    "adv_out.weights",
    "adv_out.bias",
    "val_hidden.weights",
    "val_hidden.bias",
    "val_out.weights",
    "val_out.bias",
];

const MAGIC: &[u8; 4] = b"MQNP";
const FORMAT_VERSION: u16 = 1;

impl QNetwork {
    pub fn zeros(shape: NetShape) -> Self {
        let joined = shape.scalar_features + shape.lstm_hidden;
        Self {
            shape,
            lstm: Lstm::zeros(shape.seq_features, shape.lstm_hidden),
            fc1: Dense::zeros(joined, shape.fc1),
            fc2: Dense::zeros(shape.fc1, shape.fc2),
            adv_hidden: Dense::zeros(shape.fc2, shape.head_hidden),
            adv_out: Dense::zeros(shape.head_hidden, shape.actions),
            val_hidden: Dense::zeros(shape.fc2, shape.head_hidden),
            val_out: Dense::zeros(shape.head_hidden, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let joined = shape.scalar_features + shape.lstm_hidden;
        Self {
            shape,
            lstm: Lstm::init(shape.seq_features, shape.lstm_hidden, rng),
            fc1: Dense::init(joined, shape.fc1, rng),
            fc2: Dense::init(shape.fc1, shape.fc2, rng),
            adv_hidden: Dense::init(shape.fc2, shape.head_hidden, rng),
            adv_out: Dense::init(shape.head_hidden, shape.actions, rng),
            val_hidden: Dense::init(shape.fc2, shape.head_hidden, rng),
            val_out: Dense::init(shape.head_hidden, 1, rng),
        }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Overwrites `self` with `src`. Both must share a shape.
    pub fn copy_from(&mut self, src: &QNetwork) {
        debug_assert_eq!(self.shape, src.shape);
        self.clone_from(src);
    }

    /// Parameter groups in serialization order.
    pub fn groups(&self) -> [(&'static str, &[f64]); 15] {
        let g: [&[f64]; 15] = [
            &self.lstm.w_input,
            &self.lstm.w_hidden,
            &self.lstm.bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
            &self.adv_hidden.weights,
            &self.adv_hidden.bias,
            &self.adv_out.weights,
            &self.adv_out.bias,
            &self.val_hidden.weights,
            &self.val_hidden.bias,
            &self.val_out.weights,
            &self.val_out.bias,
        ];
        std::array::from_fn(|i| (GROUP_NAMES[i], g[i]))
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut [f64]); 15] {
        let g: [&mut [f64]; 15] = [
            &mut self.lstm.w_input,
            &mut self.lstm.w_hidden,
            &mut self.lstm.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
            &mut self.adv_hidden.weights,
            &mut self.adv_hidden.bias,
            &mut self.adv_out.weights,
            &mut self.adv_out.bias,
            &mut self.val_hidden.weights,
            &mut self.val_hidden.bias,
            &mut self.val_out.weights,
            &mut self.val_out.bias,
        ];
        let mut it = g.into_iter();
        std::array::from_fn(|i| (GROUP_NAMES[i], it.next().expect("15 groups")))
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// Multiplies every entry by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn check_input(&self, input: &NetInput) -> Result<(), NnError> {
        let s = self.shape;
        if input.scalars.len() != s.scalar_features {
            return Err(NnError::ShapeMismatch {
                what: "scalar features",
                expected: s.scalar_features,
                got: input.scalars.len(),
            });
        }
        if input.sequence.len() != s.history * s.seq_features {
            return Err(NnError::ShapeMismatch {
                what: "history matrix",
                expected: s.history * s.seq_features,
                got: input.sequence.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &NetInput) -> Result<Forward, NnError> {
        self.check_input(input)?;
        let (h_last, lstm) = self.lstm.forward(&input.sequence);
        let mut joined = input.scalars.clone();
        joined.extend_from_slice(&h_last);
        let mut fc1 = self.fc1.forward(&joined);
        relu_in_place(&mut fc1);
        let mut fc2 = self.fc2.forward(&fc1);
        relu_in_place(&mut fc2);
        let mut adv_hidden = self.adv_hidden.forward(&fc2);
        relu_in_place(&mut adv_hidden);
        let advantages = self.adv_out.forward(&adv_hidden);
        let mut val_hidden = self.val_hidden.forward(&fc2);
        relu_in_place(&mut val_hidden);
        let value = self.val_out.forward(&val_hidden)[0];
        Ok(Forward {
            q: dueling_q(value, &advantages),
            value,
            advantages,
            trace: ForwardTrace {
                lstm,
                joined,
                fc1,
                fc2,
                adv_hidden,
                val_hidden,
            },
        })
    }

    /// Q-values only.
    pub fn q_values(&self, input: &NetInput) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(input)?.q)
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to the Q-values of `trace` is `dq`.
    pub fn backward_into(&self, trace: &ForwardTrace, dq: &[f64], grad: &mut Gradients) {
        debug_assert_eq!(dq.len(), self.shape.actions);
        let mean = dq.iter().sum::<f64>() / dq.len() as f64;
        let d_adv: Vec<f64> = dq.iter().map(|g| g - mean).collect();
        let d_value = dq.iter().sum::<f64>();

        let mut d_ah = self.adv_out.backward(&trace.adv_hidden, &d_adv, &mut grad.adv_out);
        relu_backward(&trace.adv_hidden, &mut d_ah);
        let mut d_fc2 = self.adv_hidden.backward(&trace.fc2, &d_ah, &mut grad.adv_hidden);

        let mut d_vh = self.val_out.backward(&trace.val_hidden, &[d_value], &mut grad.val_out);
        relu_backward(&trace.val_hidden, &mut d_vh);
        let from_value = self.val_hidden.backward(&trace.fc2, &d_vh, &mut grad.val_hidden);
        d_fc2.iter_mut().zip(from_value).for_each(|(a, b)| *a += b);

        relu_backward(&trace.fc2, &mut d_fc2);
        let mut d_fc1 = self.fc2.backward(&trace.fc1, &d_fc2, &mut grad.fc2);
        relu_backward(&trace.fc1, &mut d_fc1);
        let d_joined = self.fc1.backward(&trace.joined, &d_fc1, &mut grad.fc1);

        let d_h = &d_joined[self.shape.scalar_features..];
        self.lstm.backward(&trace.lstm, d_h, &mut grad.lstm);
    }

    pub fn backward(&self, trace: &ForwardTrace, dq: &[f64]) -> Gradients {
        let mut grad = self.zeros_like();
        self.backward_into(trace, dq, &mut grad);
        grad
    }

    /// Versioned little-endian dump: magic, format version, the eight shape
    /// fields, then every parameter group as a length-prefixed `f64` array.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for f in self.shape.fields() {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        for (_, g) in self.groups() {
            out.extend_from_slice(&(g.len() as u32).to_le_bytes());
            for v in g {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Decode("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(NnError::Decode(format!("unsupported format version {version}")));
        }
        let mut f = [0usize; 8];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let shape = NetShape {
            history: f[0],
            seq_features: f[1],
            scalar_features: f[2],
            lstm_hidden: f[3],
            fc1: f[4],
            fc2: f[5],
            head_hidden: f[6],
            actions: f[7],
        };
        let mut net = QNetwork::zeros(shape);
        for (name, g) in net.groups_mut() {
            let len = r.u32()? as usize;
            if len != g.len() {
                return Err(NnError::Decode(format!("group `{name}` has {len} values, expected {}", g.len())));
            }
            for v in g.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(NnError::Decode("trailing bytes".into()));
        }
        Ok(net)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos + n;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| NnError::Decode("truncated input".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetShape {
        NetShape::for_system(
            2,
            3,
            HiddenSizes {
                lstm: 4,
                fc1: 8,
                fc2: 8,
                head: 4,
            },
        )
    }

    fn input(rng: &mut ChaCha8Rng, shape: NetShape) -> NetInput {
        NetInput {
            scalars: (0..shape.scalar_features).map(|_| rng.gen_range(0.0..1.0)).collect(),
            sequence: (0..shape.history * shape.seq_features).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    #[test]
    fn dueling_combination() {
        assert_eq!(dueling_q(0.0, &[1.0, 3.0]), vec![-1.0, 1.0]);
        assert_eq!(dueling_q(2.5, &[4.0, 4.0, 4.0]), vec![2.5; 3]);
    }

    #[test]
    fn mean_q_equals_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = QNetwork::init(tiny(), &mut rng);
        for _ in 0..20 {
            let out = net.forward(&input(&mut rng, tiny())).unwrap();
            let mean = out.q.iter().sum::<f64>() / out.q.len() as f64;
            assert!((mean - out.value).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = QNetwork::zeros(tiny());
        let bad = NetInput {
            scalars: vec![0.0; 4],
            sequence: vec![0.0; 6],
        };
        assert!(matches!(net.forward(&bad), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = QNetwork::init(tiny(), &mut rng);
        let out = net.forward(&input(&mut rng, tiny())).unwrap();
        let grad = net.backward(&out.trace, &[0.0; 3]);
        assert!(grad.groups().iter().all(|(_, g)| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = QNetwork::init(tiny(), &mut rng);
        // Shift biases so no ReLU sits exactly at its kink.
        for (_, g) in net.groups_mut() {
            g.iter_mut().for_each(|v| *v += 0.01);
        }
        let x = input(&mut rng, tiny());
        let weights = [0.3, -1.2, 0.7];
        let loss = |n: &QNetwork| -> f64 { n.q_values(&x).unwrap().iter().zip(&weights).map(|(q, w)| q * w).sum() };
        let grad = net.backward(&net.forward(&x).unwrap().trace, &weights);
        let h = 1e-5;
        for gi in 0..15 {
            for k in 0..grad.groups()[gi].1.len() {
                let mut plus = net.clone();
                plus.groups_mut()[gi].1[k] += h;
                let mut minus = net.clone();
                minus.groups_mut()[gi].1[k] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grad.groups()[gi].1[k];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 + 1e-4 * numeric.abs().max(analytic.abs()),
                    "{}[{k}]: numeric {numeric} analytic {analytic}",
                    GROUP_NAMES[gi]
                );
            }
        }
    }

    #[test]
    fn copies_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut src = QNetwork::init(tiny(), &mut rng);
        let mut dst = QNetwork::zeros(tiny());
        dst.copy_from(&src);
        let x = input(&mut rng, tiny());
        assert_eq!(src.q_values(&x).unwrap(), dst.q_values(&x).unwrap());
        src.fc1.weights[0] += 1.0;
        assert_ne!(src, dst);
        let again = dst.clone();
        dst.copy_from(&again);
        assert_eq!(dst, again);
    }

    #[test]
    fn bytes_round_trip_and_reject_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = QNetwork::init(tiny(), &mut rng);
        let bytes = net.to_bytes();
        assert_eq!(QNetwork::from_bytes(&bytes).unwrap(), net);
        assert!(QNetwork::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(QNetwork::from_bytes(&bad).is_err());
    }
}
