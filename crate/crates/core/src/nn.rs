//! Dense feed-forward Q-network with manual backpropagation and Adam.
//!
//! Hidden layers are rectified-linear, the output layer is linear. All
//! arithmetic is `f64`. Weight matrices are stored `in x out` so a batch
//! forward pass is `X · W + b`.
//!
//! Checkpoint format (text, version 1):
//!
//! ```text
//! lanepilot-mlp 1
//! layers 528 256 128 7
//! weights <in> <out>
//! <in lines of out values>            (row-major, row = input unit)
//! bias <out>
//! <one line of out values>
//! ...                                  (repeated per layer)
//! ```
//!
//! Values are written in shortest round-trip exponent form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const LAYER_SIZES: [usize; 4] = [528, 256, 128, 7];

const CHECKPOINT_MAGIC: &str = "lanepilot-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn param_len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    fn slices(&self) -> [&[f64]; 2] {
        [
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Gradient of the loss with the same shapes as [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

struct Activations {
    /// Pre-activations per layer.
    pre: Vec<Array2<f64>>,
    /// Inputs to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform fan-in initialization: weights and biases drawn from
    /// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.weights.nrows() as f64).sqrt();
            for s in layer.slices_mut() {
                s.iter_mut().for_each(|p| *p = rng.gen_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer sizes {sizes:?}"
            )));
        }
        Ok(Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(Error::Shape {
                    expected: l.weights.ncols(),
                    got: l.bias.len(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weights.nrows() != l.weights.ncols() {
                    return Err(Error::Shape {
                        expected: l.weights.ncols(),
                        got: next.weights.nrows(),
                    });
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.ncols()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.ncols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous input");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass over a `batch x input_dim` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weights) + &layer.bias;
            if i != last {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    fn check_batch(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Activations {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weights) + &layer.bias;
            inputs.push(h);
            h = if i != last { z.mapv(relu) } else { z.clone() };
            pre.push(z);
        }
        Activations { pre, inputs }
    }

    /// Squared TD loss `(Q(x)[action] - target)^2`.
    pub fn td_loss(&self, x: &[f64], action: usize, target: f64) -> Result<f64> {
        let q = self.forward(x)?;
        let qa = q
            .get(action)
            .ok_or_else(|| invalid_action(action, q.len()))?;
        Ok((qa - target).powi(2))
    }

    /// Exact gradient of `(Q(x)[action] - target)^2`.
    pub fn backward(&self, x: &[f64], action: usize, target: f64) -> Result<Gradients> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous input");
        // batch of one: mean loss equals the single-sample loss
        Ok(self.backward_batch(batch, &[action], &[target])?.0)
    }

    /// Gradient of the mean squared TD loss over a batch, plus that loss.
    pub fn backward_batch(
        &self,
        x: ArrayView2<f64>,
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(Gradients, f64)> {
        self.check_batch(x)?;
        let n = x.nrows();
        if actions.len() != n || targets.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: actions.len().min(targets.len()),
            });
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.output_dim()) {
            return Err(invalid_action(a, self.output_dim()));
        }
        let acts = self.forward_cached(x);
        let out = acts.pre.last().expect("at least one layer");

        let mut delta = Array2::<f64>::zeros(out.raw_dim());
        let mut loss = 0.0;
        for (row, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let err = out[[row, a]] - y;
            loss += err * err;
            delta[[row, a]] = 2.0 * err / n as f64;
        }
        loss /= n as f64;

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let weights = acts.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut upstream = delta.dot(&self.layers[i].weights.t());
                upstream.zip_mut_with(&acts.pre[i - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = upstream;
            }
            grads.push(Dense { weights, bias });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, loss))
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(Dense::param_len).sum()
    }

    /// Flat parameter view: layer by layer, weights row-major then bias.
    pub fn param(&self, index: usize) -> f64 {
        flat_get(&self.layers, index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *flat_get_mut(&mut self.layers, index) = value;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .all(|s| s.iter().all(|p| p.is_finite()))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "layers {}", sizes.join(" "));
        for layer in &self.layers {
            let (rows, cols) = layer.weights.dim();
            let _ = writeln!(out, "weights {rows} {cols}");
            for row in layer.weights.rows() {
                write_values(&mut out, row.iter());
            }
            let _ = writeln!(out, "bias {cols}");
            write_values(&mut out, layer.bias.iter());
        }
        out
    }

    pub fn from_checkpoint<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let mut next_line = |what: &str| -> Result<String> {
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(Error::Io(e)),
                None => Err(Error::Checkpoint(format!(
                    "unexpected end of file, expected {what}"
                ))),
            }
        };
        let header = next_line("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint("not a lanepilot checkpoint".into()));
        }
        let version: u32 = parse_token(parts.next(), "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let sizes_line = next_line("layer sizes")?;
        let mut parts = sizes_line.split_whitespace();
        if parts.next() != Some("layers") {
            return Err(Error::Checkpoint("missing `layers` line".into()));
        }
        let sizes = parts
            .map(|t| parse_token::<usize>(Some(t), "layer size"))
            .collect::<Result<Vec<_>>>()?;
        let mut mlp = Mlp::zeros(&sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for layer in &mut mlp.layers {
            let (rows, cols) = layer.weights.dim();
            expect_line(
                &next_line("weights header")?,
                &format!("weights {rows} {cols}"),
            )?;
            for r in 0..rows {
                let values = parse_values(&next_line("weight row")?, cols)?;
                layer.weights.row_mut(r).assign(&Array1::from(values));
            }
            expect_line(&next_line("bias header")?, &format!("bias {cols}"))?;
            layer.bias = Array1::from(parse_values(&next_line("bias row")?, cols)?);
        }
        if !mlp.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(mlp)
    }
}

impl Gradients {
    pub fn get(&self, index: usize) -> f64 {
        flat_get(&self.layers, index)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .all(|s| s.iter().all(|p| p.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .flat_map(|s| s.iter())
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

fn invalid_action(action: usize, outputs: usize) -> Error {
    Error::InvalidArgument(format!(
        "action index {action} out of range for {outputs} outputs"
    ))
}

fn flat_get(layers: &[Dense], mut index: usize) -> f64 {
    for l in layers {
        for s in l.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
    }
    panic!("parameter index out of range");
}

fn flat_get_mut(layers: &mut [Dense], mut index: usize) -> &mut f64 {
    for l in layers {
        for s in l.slices_mut() {
            if index < s.len() {
                return &mut s[index];
            }
            index -= s.len();
        }
    }
    panic!("parameter index out of range");
}

fn write_values<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

fn parse_token<T: std::str::FromStr>(token: Option<&str>, what: &str) -> Result<T> {
    token
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("invalid {what}")))
}

fn parse_values(line: &str, expected: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|t| parse_token::<f64>(Some(t), "parameter value"))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

fn expect_line(line: &str, expected: &str) -> Result<()> {
    if line.trim() != expected {
        return Err(Error::Checkpoint(format!(
            "expected `{expected}`, found `{}`",
            line.trim()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state for one [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl Adam {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Dense> = mlp
            .layers
            .iter()
            .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam step with bias-corrected moments. Non-finite gradients are
    /// rejected before anything is modified.
    pub fn update(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        if grads.layers.len() != mlp.layers.len() {
            return Err(Error::Shape {
                expected: mlp.layers.len(),
                got: grads.layers.len(),
            });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in mlp
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, g), m), v) in p
                .slices_mut()
                .into_iter()
                .zip(g.slices())
                .zip(m.slices_mut())
                .zip(v.slices_mut())
            {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 2 -> 2 -> 1 network with hand-picked weights.
    fn tiny() -> Mlp {
        Mlp::from_layers(vec![
            Dense {
                weights: array![[0.5, -1.0], [0.25, 2.0]],
                bias: array![0.1, -0.2],
            },
            Dense {
                weights: array![[1.5], [-0.5]],
                bias: array![0.3],
            },
        ])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zeros() {
        let mlp = Mlp::zeros(&LAYER_SIZES).unwrap();
        let x: Vec<f64> = (0..528).map(|i| i as f64 * 0.01 - 2.0).collect();
        assert_eq!(mlp.forward(&x).unwrap(), vec![0.0; 7]);
    }

    #[test]
    fn hand_computed_forward_pass() {
        // x = [1, 2]
        // z1 = [0.5 + 0.5 + 0.1, -1 + 4 - 0.2] = [1.1, 2.8] (both active)
        // y  = 1.5 * 1.1 - 0.5 * 2.8 + 0.3 = 0.55
        let y = tiny().forward(&[1.0, 2.0]).unwrap();
        assert!((y[0] - 0.55).abs() < 1e-12);
        // x = [1, -1]: z1 = [0.35, -3.2] -> h = [0.35, 0]; y = 0.525 + 0.3
        let y = tiny().forward(&[1.0, -1.0]).unwrap();
        assert!((y[0] - 0.825).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_gradient() {
        // x = [1, 2], target 0: err = 0.55, dL/dy = 1.1
        let g = tiny().backward(&[1.0, 2.0], 0, 0.0).unwrap();
        let out = &g.layers()[1];
        assert!((out.weights[[0, 0]] - 1.1 * 1.1).abs() < 1e-12);
        assert!((out.weights[[1, 0]] - 1.1 * 2.8).abs() < 1e-12);
        assert!((out.bias[0] - 1.1).abs() < 1e-12);
        let hidden = &g.layers()[0];
        // dL/dz1 = 1.1 * [1.5, -0.5] = [1.65, -0.55]
        let expect_w = [[1.65, -0.55], [3.3, -1.1]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((hidden.weights[[r, c]] - expect_w[r][c]).abs() < 1e-12);
            }
        }
        assert!((hidden.bias[0] - 1.65).abs() < 1e-12);
        assert!((hidden.bias[1] + 0.55).abs() < 1e-12);
    }

    #[test]
    fn inactive_units_get_no_gradient() {
        let g = tiny().backward(&[1.0, -1.0], 0, 0.0).unwrap();
        assert_eq!(g.layers()[0].weights[[0, 1]], 0.0);
        assert_eq!(g.layers()[0].bias[1], 0.0);
    }

    #[test]
    fn gradient_vanishes_at_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&[6, 5, 4, 3], &mut rng).unwrap();
        let x = [0.3, -0.2, 1.0, 0.0, 0.7, -1.0];
        let q = mlp.forward(&x).unwrap();
        let g = mlp.backward(&x, 2, q[2]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn unselected_outputs_have_zero_direct_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::new(&[6, 5, 4, 3], &mut rng).unwrap();
        let g = mlp.backward(&[1.0; 6], 1, 10.0).unwrap();
        let out = &g.layers()[2];
        for c in [0, 2] {
            assert!(out.weights.column(c).iter().all(|&v| v == 0.0));
            assert_eq!(out.bias[c], 0.0);
        }
    }

    #[test]
    fn finite_difference_agreement_on_small_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(&[5, 8, 6, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = mlp.backward(&x, 1, 0.7).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..mlp.param_len() {
            let mut plus = mlp.clone();
            plus.set_param(i, mlp.param(i) + h);
            let mut minus = mlp.clone();
            minus.set_param(i, mlp.param(i) - h);
            let fd = (plus.td_loss(&x, 1, 0.7).unwrap() - minus.td_loss(&x, 1, 0.7).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(g.get(i).abs()).max(1e-8);
            worst = worst.max((fd - g.get(i)).abs() / denom);
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mlp = tiny();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(mlp.backward(&[1.0, 2.0], 1, 0.0).is_err());
        assert!(Mlp::zeros(&[3]).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_positively_homogeneous() {
        // all-positive weights and zero biases keep every unit active
        let mut mlp = Mlp::zeros(&[3, 4, 2]).unwrap();
        for i in 0..mlp.param_len() {
            mlp.set_param(i, 0.1 + 0.01 * i as f64);
        }
        for l in &mut mlp.layers {
            l.bias.fill(0.0);
        }
        let x = [0.5, 1.0, 2.0];
        let y1 = mlp.forward(&x).unwrap();
        assert_eq!(y1, mlp.forward(&x).unwrap());
        let scaled: Vec<f64> = x.iter().map(|v| v * 3.0).collect();
        let y3 = mlp.forward(&scaled).unwrap();
        for (a, b) in y1.iter().zip(&y3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut mlp = tiny();
        let before = mlp.clone();
        let zero = Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        };
        let mut opt = Adam::new(&mlp, AdamConfig::default());
        opt.update(&mut mlp, &zero).unwrap();
        assert_eq!(mlp, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_single_step_closed_form() {
        // one-input one-output linear layer: parameters [w, b]
        let mut mlp = Mlp::zeros(&[1, 1]).unwrap();
        mlp.set_param(0, 1.0);
        mlp.set_param(1, -2.0);
        let grads = Gradients {
            layers: vec![Dense {
                weights: array![[0.5]],
                bias: array![-3.0],
            }],
        };
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut opt = Adam::new(&mlp, cfg);
        opt.update(&mut mlp, &grads).unwrap();
        // first step: m_hat = g, v_hat = g^2
        assert!((mlp.param(0) - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((mlp.param(1) - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        // second step with the same gradient: m = g(1 - b1^2), v = g^2(1 - b2^2)
        opt.update(&mut mlp, &grads).unwrap();
        let expected = 1.0 - 2.0 * 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((mlp.param(0) - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = Mlp::new(&[4, 3, 2], &mut rng).unwrap();
        let g = base.backward(&[1.0, 0.5, -0.5, 2.0], 0, 1.0).unwrap();
        let (mut a, mut b) = (base.clone(), base.clone());
        let (mut oa, mut ob) = (
            Adam::new(&a, AdamConfig::default()),
            Adam::new(&b, AdamConfig::default()),
        );
        oa.update(&mut a, &g).unwrap();
        ob.update(&mut b, &g).unwrap();
        assert_eq!(a, b);

        let mut bad = g.clone();
        bad.layers[0].bias[0] = f64::NAN;
        let before = a.clone();
        assert!(matches!(
            oa.update(&mut a, &bad),
            Err(Error::NonFiniteGradient)
        ));
        assert_eq!(a, before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mlp = Mlp::new(&[7, 5, 3], &mut rng).unwrap();
        let text = mlp.to_checkpoint();
        let back = Mlp::from_checkpoint(text.as_bytes()).unwrap();
        assert_eq!(back, mlp);
        let x = [0.1, 0.2, -0.3, 0.4, 5.0, -6.0, 0.0];
        assert_eq!(back.forward(&x).unwrap(), mlp.forward(&x).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let mlp = tiny();
        let text = mlp.to_checkpoint();
        assert!(Mlp::from_checkpoint("garbage\n".as_bytes()).is_err());
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Mlp::from_checkpoint(truncated.as_bytes()),
            Err(Error::Checkpoint(_))
        ));
        let nan = text.replacen("5e-1", "NaN", 1);
        assert!(Mlp::from_checkpoint(nan.as_bytes()).is_err());
        let wrong_version = text.replacen("lanepilot-mlp 1", "lanepilot-mlp 9", 1);
        assert!(Mlp::from_checkpoint(wrong_version.as_bytes()).is_err());
    }
}
