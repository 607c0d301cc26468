//! Small fully connected network with ReLU hidden activations.
//!
//! Besides the usual forward/backward pair the network exposes a tangent
//! pass: for an input perturbation `u` it propagates `J u` through the
//! linearization fixed by the primal ReLU masks. Because ReLU is piecewise
//! linear, the tangent output depends on the weights but not on the biases,
//! and its reverse pass gives the parameter gradient of directional
//! derivatives (used for normal-smoothness gradients).

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// Layer weights shaped `(fan_in, fan_out)`; `y = x W + b`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations retained by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input to every layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    hidden_pre: Vec<Array2<f64>>,
}

/// Tangent activations retained by [`Mlp::jvp`].
#[derive(Debug, Clone)]
pub struct TangentTape {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization for every layer.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)));
        }
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, MlpTape) {
        let n = self.num_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut hidden_pre = Vec::with_capacity(n - 1);
        let mut h = x;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut pre = h.dot(w);
            pre += b;
            inputs.push(h);
            if k + 1 < n {
                h = pre.mapv(|v| v.max(0.0));
                hidden_pre.push(pre);
            } else {
                h = pre;
            }
        }
        (h, MlpTape { inputs, hidden_pre })
    }

    /// Accumulates parameter gradients and returns `d loss / d input`.
    pub fn backward(&self, tape: &MlpTape, d_out: &Array2<f64>, grad: &mut MlpGrad) -> Array2<f64> {
        let mut d = d_out.clone();
        for k in (0..self.num_layers()).rev() {
            grad.weights[k] += &tape.inputs[k].t().dot(&d);
            grad.biases[k] += &d.sum_axis(Axis(0));
            let mut d_in = d.dot(&self.weights[k].t());
            if k > 0 {
                relu_mask(&mut d_in, &tape.hidden_pre[k - 1]);
            }
            d = d_in;
        }
        d
    }

    /// `d loss / d input` only, without touching parameter gradients.
    pub fn input_gradient(&self, tape: &MlpTape, d_out: &Array2<f64>) -> Array2<f64> {
        let mut d = d_out.clone();
        for k in (0..self.num_layers()).rev() {
            let mut d_in = d.dot(&self.weights[k].t());
            if k > 0 {
                relu_mask(&mut d_in, &tape.hidden_pre[k - 1]);
            }
            d = d_in;
        }
        d
    }

    /// Tangent pass: propagates input perturbation `u` through the network.
    pub fn jvp(&self, tape: &MlpTape, u: Array2<f64>) -> (Array2<f64>, TangentTape) {
        let n = self.num_layers();
        let mut inputs = Vec::with_capacity(n);
        let mut h = u;
        for k in 0..n {
            let mut next = h.dot(&self.weights[k]);
            if k + 1 < n {
                relu_mask(&mut next, &tape.hidden_pre[k]);
            }
            inputs.push(h);
            h = next;
        }
        (h, TangentTape { inputs })
    }

    /// Reverse of [`jvp`](Self::jvp): accumulates weight gradients of
    /// `<d_tangent_out, tangent_out>` and returns its cotangent w.r.t. `u`.
    pub fn jvp_backward(
        &self,
        tape: &MlpTape,
        tangent: &TangentTape,
        d_tangent_out: &Array2<f64>,
        grad: &mut MlpGrad,
    ) -> Array2<f64> {
        let mut d = d_tangent_out.clone();
        for k in (0..self.num_layers()).rev() {
            grad.weights[k] += &tangent.inputs[k].t().dot(&d);
            let mut d_in = d.dot(&self.weights[k].t());
            if k > 0 {
                relu_mask(&mut d_in, &tape.hidden_pre[k - 1]);
            }
            d = d_in;
        }
        d
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

fn relu_mask(values: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(values).and(pre).for_each(|v, &p| {
        if p <= 0.0 {
            *v = 0.0;
        }
    });
}

impl MlpGrad {
    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Mlp {
        Mlp::new(&[5, 8, 8, 3], &mut ChaCha8Rng::seed_from_u64(11))
    }

    fn input(seed: u64, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar objective `sum(out * weights)` for finite differences.
    fn objective(mlp: &Mlp, x: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        let (y, _) = mlp.forward(x.clone());
        (&y * probe).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = net();
        let x = input(1, 6);
        let probe = Array2::from_shape_fn((6, 3), |(i, j)| 0.3 + 0.1 * i as f64 - 0.2 * j as f64);
        let (_, tape) = mlp.forward(x.clone());
        let mut grad = mlp.zero_grad();
        let d_x = mlp.backward(&tape, &probe, &mut grad);

        let h = 1e-6;
        for (k, (i, j)) in [(0, (1, 2)), (1, (4, 0)), (2, (7, 1))] {
            let mut plus = mlp.clone();
            plus.weights[k][[i, j]] += h;
            let mut minus = mlp.clone();
            minus.weights[k][[i, j]] -= h;
            let fd = (objective(&plus, &x, &probe) - objective(&minus, &x, &probe)) / (2.0 * h);
            assert!((fd - grad.weights[k][[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let mut plus = mlp.clone();
        plus.biases[1][3] += h;
        let mut minus = mlp.clone();
        minus.biases[1][3] -= h;
        let fd = (objective(&plus, &x, &probe) - objective(&minus, &x, &probe)) / (2.0 * h);
        assert!((fd - grad.biases[1][3]).abs() < 1e-6 * fd.abs().max(1.0));

        let mut xp = x.clone();
        xp[[2, 4]] += h;
        let mut xm = x.clone();
        xm[[2, 4]] -= h;
        let fd = (objective(&mlp, &xp, &probe) - objective(&mlp, &xm, &probe)) / (2.0 * h);
        assert!((fd - d_x[[2, 4]]).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn tangent_is_directional_derivative() {
        let mlp = net();
        let x = input(2, 4);
        let u = input(3, 4);
        let (_, tape) = mlp.forward(x.clone());
        let (tangent, _) = mlp.jvp(&tape, u.clone());
        let h = 1e-6;
        let (yp, _) = mlp.forward(&x + &(&u * h));
        let (ym, _) = mlp.forward(&x - &(&u * h));
        let fd = (yp - ym) / (2.0 * h);
        for (a, b) in fd.iter().zip(tangent.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tangent_backward_matches_finite_differences() {
        let mlp = net();
        let x = input(4, 5);
        let u = input(5, 5);
        let probe = Array2::from_shape_fn((5, 3), |(i, j)| 1.0 - 0.2 * i as f64 + 0.5 * j as f64);
        let g = |m: &Mlp, u: &Array2<f64>| {
            let (_, tape) = m.forward(x.clone());
            let (t, _) = m.jvp(&tape, u.clone());
            (&t * &probe).sum()
        };
        let (_, tape) = mlp.forward(x.clone());
        let (_, ttape) = mlp.jvp(&tape, u.clone());
        let mut grad = mlp.zero_grad();
        let d_u = mlp.jvp_backward(&tape, &ttape, &probe, &mut grad);

        let h = 1e-6;
        for (k, (i, j)) in [(0, (2, 5)), (1, (6, 6)), (2, (3, 2))] {
            let mut plus = mlp.clone();
            plus.weights[k][[i, j]] += h;
            let mut minus = mlp.clone();
            minus.weights[k][[i, j]] -= h;
            let fd = (g(&plus, &u) - g(&minus, &u)) / (2.0 * h);
            assert!((fd - grad.weights[k][[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        assert!(grad.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        let mut up = u.clone();
        up[[1, 3]] += h;
        let mut um = u.clone();
        um[[1, 3]] -= h;
        let fd = (g(&mlp, &up) - g(&mlp, &um)) / (2.0 * h);
        assert!((fd - d_u[[1, 3]]).abs() < 1e-6 * fd.abs().max(1.0));
    }
}
