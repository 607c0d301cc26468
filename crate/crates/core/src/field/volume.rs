//! Hash-grid encoded neural density and color field.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hash_grid::{HashGrid, HashGridConfig};
use super::mlp::{Mlp, MlpGrad, MlpTape};
use super::{FieldSamples, RadianceField};
use crate::math::{sigmoid, softplus};
use crate::{Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden_dim: usize,
    /// Number of linear layers, including the output layer.
    pub layers: usize,
    /// Initial bias of the raw density output.
    pub density_bias: f64,
    /// Peak of the Gaussian raw-density prior at the origin.
    pub blob_density: f64,
    /// Standard deviation of the prior, in world units.
    pub blob_radius: f64,
    /// Iterations over which the prior decays linearly to zero.
    pub blob_decay_iters: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden_dim: 64,
            layers: 3,
            density_bias: -2.0,
            blob_density: 5.0,
            blob_radius: 0.2,
            blob_decay_iters: 500,
        }
    }
}

impl FieldConfig {
    pub fn mlp_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.grid.output_dim()];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.layers.saturating_sub(1)));
        dims.push(4);
        dims
    }
}

/// Learnable field: hash encoding followed by an MLP emitting raw density
/// and raw rgb. Density goes through softplus, color through sigmoid.
#[derive(Debug, Clone)]
pub struct VolumeField {
    config: FieldConfig,
    grid: HashGrid,
    mlp: Mlp,
    iteration: u64,
}

/// Activations kept for [`VolumeField::backward`].
#[derive(Debug, Clone)]
pub struct FieldTape {
    positions: Vec<Vec3>,
    mlp: MlpTape,
    density_act: Vec<f64>,
    color: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct FieldGrad {
    pub table: Vec<f64>,
    pub mlp: MlpGrad,
}

impl FieldGrad {
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.table];
        for (w, b) in self.mlp.weights.iter().zip(&self.mlp.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        for (a, b) in self.table.iter_mut().zip(&other.table) {
            *a += b;
        }
        self.mlp.add_assign(&other.mlp);
    }
}

impl VolumeField {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = HashGrid::new(config.grid.clone(), &mut rng)?;
        if config.layers == 0 || config.hidden_dim == 0 {
            return Err(crate::Error::invalid("field MLP needs at least one layer"));
        }
        let mut mlp = Mlp::new(&config.mlp_dims(), &mut rng);
        mlp.biases.last_mut().unwrap()[0] = config.density_bias;
        Ok(Self {
            config,
            grid,
            mlp,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Sets the training iteration, which controls the density prior decay.
    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    fn prior_scale(&self) -> f64 {
        if self.config.blob_decay_iters == 0 {
            return 0.0;
        }
        (1.0 - self.iteration as f64 / self.config.blob_decay_iters as f64).max(0.0)
    }

    /// Raw-density prior and its spatial gradient.
    fn prior(&self, p: &Vec3) -> (f64, Vec3) {
        let scale = self.prior_scale() * self.config.blob_density;
        if scale == 0.0 {
            return (0.0, Vec3::zeros());
        }
        let r2 = self.config.blob_radius * self.config.blob_radius;
        let v = scale * (-p.norm_squared() / (2.0 * r2)).exp();
        (v, p * (-v / r2))
    }

    fn encode(&self, positions: &[Vec3]) -> Result<Array2<f64>> {
        let dim = self.grid.output_dim();
        let mut x = Array2::zeros((positions.len(), dim));
        for (p, mut row) in positions.iter().zip(x.rows_mut()) {
            self.grid
                .encode_into(p, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }

    /// Forward pass retaining what [`backward`](Self::backward) needs.
    pub fn query_with_tape(&self, positions: &[Vec3]) -> Result<(FieldSamples, FieldTape)> {
        let x = self.encode(positions)?;
        let (raw, tape) = self.mlp.forward(x);
        let mut density = Vec::with_capacity(positions.len());
        let mut density_act = Vec::with_capacity(positions.len());
        let mut color = Vec::with_capacity(positions.len());
        for (p, row) in positions.iter().zip(raw.rows()) {
            let r = row[0] + self.prior(p).0;
            density.push(softplus(r));
            density_act.push(sigmoid(r));
            color.push([sigmoid(row[1]), sigmoid(row[2]), sigmoid(row[3])]);
        }
        let tape = FieldTape {
            positions: positions.to_vec(),
            mlp: tape,
            density_act,
            color: color.clone(),
        };
        Ok((FieldSamples { density, color }, tape))
    }

    pub fn zero_grad(&self) -> FieldGrad {
        FieldGrad {
            table: vec![0.0; self.grid.table().len()],
            mlp: self.mlp.zero_grad(),
        }
    }

    /// Accumulates parameter gradients for cotangents on density and color.
    /// Position cotangents are added to `d_positions` when given.
    pub fn backward(
        &self,
        tape: &FieldTape,
        d_density: &[f64],
        d_color: &[[f64; 3]],
        grad: &mut FieldGrad,
        mut d_positions: Option<&mut [Vec3]>,
    ) {
        let n = tape.positions.len();
        let mut d_raw = Array2::zeros((n, 4));
        for i in 0..n {
            d_raw[[i, 0]] = d_density[i] * tape.density_act[i];
            for c in 0..3 {
                let v = tape.color[i][c];
                d_raw[[i, c + 1]] = d_color[i][c] * v * (1.0 - v);
            }
        }
        let d_x = self.mlp.backward(&tape.mlp, &d_raw, &mut grad.mlp);
        for (i, p) in tape.positions.iter().enumerate() {
            let row = d_x.row(i);
            let dp = d_positions.as_deref_mut().map(|d| &mut d[i]);
            self.grid.backward(
                p,
                row.as_slice().expect("standard layout"),
                Some(&mut grad.table),
                dp,
            );
            if let Some(d) = d_positions.as_deref_mut() {
                d[i] += self.prior(p).1 * (d_density[i] * tape.density_act[i]);
            }
        }
    }

    /// Accumulates the parameter gradient of `sum_i <cot_i, grad sigma(p_i)>`.
    pub fn density_gradient_backward(&self, positions: &[Vec3], cotangents: &[Vec3], grad: &mut FieldGrad) -> Result<()> {
        let n = positions.len();
        if n == 0 {
            return Ok(());
        }
        let dim = self.grid.output_dim();
        let x = self.encode(positions)?;
        let (raw, tape) = self.mlp.forward(x);
        let mut u = Array2::zeros((n, dim));
        for (i, (p, v)) in positions.iter().zip(cotangents).enumerate() {
            let mut row = u.row_mut(i);
            self.grid
                .directional_into(p, v, row.as_slice_mut().expect("standard layout"));
        }
        let (tangent, ttape) = self.mlp.jvp(&tape, u);
        let mut d_primal = Array2::zeros((n, 4));
        let mut d_tangent = Array2::zeros((n, 4));
        for (i, (p, v)) in positions.iter().zip(cotangents).enumerate() {
            let (prior, prior_grad) = self.prior(p);
            let s = sigmoid(raw[[i, 0]] + prior);
            let directional = tangent[[i, 0]] + v.dot(&prior_grad);
            d_primal[[i, 0]] = s * (1.0 - s) * directional;
            d_tangent[[i, 0]] = s;
        }
        let d_x = self.mlp.backward(&tape, &d_primal, &mut grad.mlp);
        let d_u = self.mlp.jvp_backward(&tape, &ttape, &d_tangent, &mut grad.mlp);
        for (i, (p, v)) in positions.iter().zip(cotangents).enumerate() {
            let dx = d_x.row(i);
            self.grid
                .backward(p, dx.as_slice().expect("standard layout"), Some(&mut grad.table), None);
            let du = d_u.row(i);
            self.grid
                .directional_backward(p, v, du.as_slice().expect("standard layout"), &mut grad.table);
        }
        Ok(())
    }

    /// Mutable parameter slices, ordered like [`FieldGrad::groups`].
    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.grid.table_mut()];
        for (w, b) in self.mlp.weights.iter_mut().zip(self.mlp.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.grid.table()];
        for (w, b) in self.mlp.weights.iter().zip(&self.mlp.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.grid.table().len() + self.mlp.param_count()
    }
}

impl RadianceField for VolumeField {
    fn bound(&self) -> f64 {
        self.config.grid.bound
    }

    fn query(&self, positions: &[Vec3]) -> Result<FieldSamples> {
        let x = self.encode(positions)?;
        let (raw, _) = self.mlp.forward(x);
        let mut out = FieldSamples {
            density: Vec::with_capacity(positions.len()),
            color: Vec::with_capacity(positions.len()),
        };
        for (p, row) in positions.iter().zip(raw.rows()) {
            out.density.push(softplus(row[0] + self.prior(p).0));
            out.color
                .push([sigmoid(row[1]), sigmoid(row[2]), sigmoid(row[3])]);
        }
        Ok(out)
    }

    fn density_gradients(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        let n = positions.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let x = self.encode(positions)?;
        let (raw, tape) = self.mlp.forward(x);
        let mut seed = Array2::zeros((n, 4));
        seed.column_mut(0).fill(1.0);
        let d_x = self.mlp.input_gradient(&tape, &seed);
        let mut out = Vec::with_capacity(n);
        for (i, p) in positions.iter().enumerate() {
            let mut g = Vec3::zeros();
            let row = d_x.row(i);
            self.grid
                .backward(p, row.as_slice().expect("standard layout"), None, Some(&mut g));
            let (prior, prior_grad) = self.prior(p);
            out.push((g + prior_grad) * sigmoid(raw[[i, 0]] + prior));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::normals_at;
    use rand::Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            grid: HashGridConfig {
                levels: 4,
                features_per_level: 2,
                coarsest_resolution: 4,
                finest_resolution: 32,
                table_size_log2: 10,
                bound: 1.0,
            },
            hidden_dim: 16,
            ..Default::default()
        }
    }

    /// A field whose table entries are large enough to matter.
    fn textured_field(seed: u64) -> VolumeField {
        let mut field = VolumeField::new(small_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in field.grid.table_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        field.set_iteration(100);
        field
    }

    fn random_positions(seed: u64, n: usize, extent: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                )
            })
            .collect()
    }

    #[test]
    fn activations_stay_in_range() {
        let field = VolumeField::new(small_config(), 3).unwrap();
        let pts = random_positions(1, 10_000, 1.0);
        let s = field.query(&pts).unwrap();
        assert!(s.density.iter().all(|d| d.is_finite() && *d >= 0.0));
        assert!(s.color.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn query_is_deterministic_and_matches_tape() {
        let field = textured_field(4);
        let pts = random_positions(2, 64, 0.9);
        let a = field.query(&pts).unwrap();
        let b = field.query(&pts).unwrap();
        let (c, _) = field.query_with_tape(&pts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn initial_prior_makes_a_centered_blob() {
        let field = VolumeField::new(FieldConfig::default(), 0).unwrap();
        let s = field
            .query(&[Vec3::zeros(), Vec3::new(0.9, 0.9, 0.9)])
            .unwrap();
        assert!(s.density[0] > 10.0 * s.density[1]);
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let field = textured_field(5);
        let pts = random_positions(3, 12, 0.9);
        let d_density: Vec<f64> = (0..12).map(|i| 0.3 - 0.05 * i as f64).collect();
        let d_color: Vec<[f64; 3]> = (0..12).map(|i| [0.1 * i as f64, -0.2, 0.05]).collect();
        let objective = |f: &VolumeField| {
            let s = f.query(&pts).unwrap();
            (0..12)
                .map(|i| {
                    d_density[i] * s.density[i]
                        + (0..3).map(|c| d_color[i][c] * s.color[i][c]).sum::<f64>()
                })
                .sum::<f64>()
        };
        let (_, tape) = field.query_with_tape(&pts).unwrap();
        let mut grad = field.zero_grad();
        field.backward(&tape, &d_density, &d_color, &mut grad, None);

        let h = 1e-3;
        let checks: Vec<(usize, usize)> = vec![(0, 40), (0, 700), (1, 5), (2, 3), (3, 17), (5, 2), (6, 0)];
        for (group, idx) in checks {
            let mut plus = field.clone();
            plus.param_groups_mut()[group][idx] += h;
            let mut minus = field.clone();
            minus.param_groups_mut()[group][idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad.groups()[group][idx];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(1e-3),
                "group {group}[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let field = textured_field(6);
        let p = Vec3::new(0.31, -0.27, 0.52);
        let g = field.density_gradients(&[p]).unwrap()[0];
        let (_, tape) = field.query_with_tape(&[p]).unwrap();
        let mut grad = field.zero_grad();
        let mut dp = [Vec3::zeros()];
        field.backward(&tape, &[1.0], &[[0.2, -0.4, 0.7]], &mut grad, Some(&mut dp));
        let h = 1e-7;
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let s = field.query(&[p + e, p - e]).unwrap();
            let fd_density = (s.density[0] - s.density[1]) / (2.0 * h);
            assert!((fd_density - g[a]).abs() < 1e-5 * fd_density.abs().max(1.0));
            let fd_total = fd_density
                + (0..3)
                    .map(|c| [0.2, -0.4, 0.7][c] * (s.color[0][c] - s.color[1][c]) / (2.0 * h))
                    .sum::<f64>();
            assert!((fd_total - dp[0][a]).abs() < 1e-5 * fd_total.abs().max(1.0));
        }
    }

    #[test]
    fn normal_parameter_gradient_matches_finite_differences() {
        let field = textured_field(7);
        let pts = random_positions(4, 6, 0.8);
        let cots: Vec<Vec3> = random_positions(5, 6, 1.0);
        let objective = |f: &VolumeField| {
            f.density_gradients(&pts)
                .unwrap()
                .iter()
                .zip(&cots)
                .map(|(g, v)| g.dot(v))
                .sum::<f64>()
        };
        let mut grad = field.zero_grad();
        field.density_gradient_backward(&pts, &cots, &mut grad).unwrap();
        let h = 1e-4;
        for (group, idx) in [(0usize, 11usize), (0, 1500), (1, 9), (2, 1), (3, 30), (5, 3), (6, 0)] {
            let mut plus = field.clone();
            plus.param_groups_mut()[group][idx] += h;
            let mut minus = field.clone();
            minus.param_groups_mut()[group][idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad.groups()[group][idx];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(1e-3),
                "group {group}[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn normals_are_unit_length() {
        let field = textured_field(8);
        let pts = random_positions(6, 500, 0.95);
        let n = normals_at(&field, &pts).unwrap();
        for v in &n.normals {
            assert!((v.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_positions_error() {
        let field = textured_field(9);
        assert!(field.query(&[Vec3::new(0.0, f64::INFINITY, 0.0)]).is_err());
    }
}
