//! Multi-resolution hash encoding with analytic position derivatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub coarsest_resolution: u32,
    pub finest_resolution: u32,
    pub table_size_log2: u32,
    /// Half-extent of the axis-aligned scene cube.
    pub bound: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            coarsest_resolution: 16,
            finest_resolution: 2048,
            table_size_log2: 19,
            bound: 1.0,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::invalid("hash grid needs at least one level and one feature"));
        }
        if self.coarsest_resolution == 0 || self.finest_resolution < self.coarsest_resolution {
            return Err(Error::invalid(
                "hash grid resolutions must satisfy 1 <= coarsest <= finest",
            ));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 30 {
            return Err(Error::invalid("table_size_log2 must be in 1..=30"));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::invalid("scene bound must be positive"));
        }
        Ok(())
    }

    /// Per-level grid resolution, geometric between coarsest and finest.
    pub fn resolutions(&self) -> Vec<u32> {
        if self.levels == 1 {
            return vec![self.coarsest_resolution];
        }
        let coarse = self.coarsest_resolution as f64;
        let growth = ((self.finest_resolution as f64).ln() - coarse.ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| {
                let r = (coarse * (growth * l as f64).exp()).floor() as u32;
                r.clamp(self.coarsest_resolution, self.finest_resolution)
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// The eight grid vertices enclosing a point at one level.
struct Cell {
    entries: [usize; 8],
    weights: [f64; 8],
    /// d weight / d position (world units).
    weight_grads: [[f64; 3]; 8],
}

#[derive(Debug, Clone)]
pub struct HashGrid {
    config: HashGridConfig,
    resolutions: Vec<u32>,
    table_size: usize,
    /// Layout: `[level][entry][feature]`.
    table: Vec<f64>,
}

impl HashGrid {
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let table_size = 1usize << config.table_size_log2;
        let len = config.levels * table_size * config.features_per_level;
        let table = (0..len).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        Ok(Self {
            resolutions: config.resolutions(),
            table_size,
            config,
            table,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    /// Table offset of feature 0 for grid vertex `(x, y, z)` at `level`.
    pub fn entry_index(&self, level: usize, vertex: [u64; 3]) -> usize {
        let side = self.resolutions[level] as u64 + 1;
        self.slot(level, vertex, side, side * side * side <= self.table_size as u64)
    }

    #[inline]
    fn slot(&self, level: usize, vertex: [u64; 3], side: u64, dense: bool) -> usize {
        let res = side;
        let slot = if dense {
            (vertex[0] + vertex[1] * res + vertex[2] * res * res) as usize
        } else {
            let h = (vertex[0].wrapping_mul(PRIMES[0]) as u32)
                ^ (vertex[1].wrapping_mul(PRIMES[1]) as u32)
                ^ (vertex[2].wrapping_mul(PRIMES[2]) as u32);
            h as usize & (self.table_size - 1)
        };
        (level * self.table_size + slot) * self.config.features_per_level
    }

    pub fn check_domain(&self, p: &Vec3) -> Result<()> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("encoder input {:?}", [p.x, p.y, p.z]),
            });
        }
        let b = self.config.bound * (1.0 + 1e-9);
        if p.iter().any(|v| v.abs() > b) {
            return Err(Error::OutOfDomain {
                position: [p.x, p.y, p.z],
                bound: self.config.bound,
            });
        }
        Ok(())
    }

    /// Corner entries and weights; weight gradients only when `with_grads`.
    fn cell(&self, level: usize, p: &Vec3, with_grads: bool) -> Cell {
        let res = self.resolutions[level];
        let side = res as u64 + 1;
        let dense = side * side * side <= self.table_size as u64;
        let scale = res as f64 / (2.0 * self.config.bound);
        let mut base = [0u64; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let s = ((p[a] + self.config.bound) * scale).clamp(0.0, res as f64);
            let i = (s.floor() as u32).min(res - 1);
            base[a] = i as u64;
            frac[a] = s - i as f64;
        }
        let mut cell = Cell {
            entries: [0; 8],
            weights: [0.0; 8],
            weight_grads: [[0.0; 3]; 8],
        };
        for corner in 0..8 {
            let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut factors = [0.0; 3];
            let mut dfactors = [0.0; 3];
            for a in 0..3 {
                if bits[a] == 1 {
                    factors[a] = frac[a];
                    dfactors[a] = scale;
                } else {
                    factors[a] = 1.0 - frac[a];
                    dfactors[a] = -scale;
                }
            }
            cell.weights[corner] = factors[0] * factors[1] * factors[2];
            if with_grads {
                cell.weight_grads[corner] = [
                    dfactors[0] * factors[1] * factors[2],
                    factors[0] * dfactors[1] * factors[2],
                    factors[0] * factors[1] * dfactors[2],
                ];
            }
            let vertex = [
                base[0] + bits[0] as u64,
                base[1] + bits[1] as u64,
                base[2] + bits[2] as u64,
            ];
            cell.entries[corner] = self.slot(level, vertex, side, dense);
        }
        cell
    }

    /// Encodes one position into `out` (length `output_dim`), levels coarse to fine.
    pub fn encode_into(&self, p: &Vec3, out: &mut [f64]) -> Result<()> {
        self.check_domain(p)?;
        let f = self.config.features_per_level;
        let bound = self.config.bound;
        for level in 0..self.config.levels {
            let res = self.resolutions[level];
            let side = res as u64 + 1;
            let dense = side * side * side <= self.table_size as u64;
            let scale = res as f64 / (2.0 * bound);
            let mut base = [0u64; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let s = ((p[a] + bound) * scale).clamp(0.0, res as f64);
                let i = (s.floor() as u32).min(res - 1);
                base[a] = i as u64;
                frac[a] = s - i as f64;
            }
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for corner in 0..8u64 {
                let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let mut w = 1.0;
                for a in 0..3 {
                    w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                let e = self.slot(level, [base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]], side, dense);
                let src = &self.table[e..e + f];
                for k in 0..f {
                    dst[k] += w * src[k];
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, p: &Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(p, &mut out)?;
        Ok(out)
    }

    /// Feature Jacobian `d features / d position`, one row per feature.
    pub fn jacobian(&self, p: &Vec3) -> Result<Vec<[f64; 3]>> {
        self.check_domain(p)?;
        let f = self.config.features_per_level;
        let mut jac = vec![[0.0; 3]; self.output_dim()];
        for level in 0..self.config.levels {
            let cell = self.cell(level, p, true);
            for c in 0..8 {
                let src = &self.table[cell.entries[c]..cell.entries[c] + f];
                for k in 0..f {
                    for a in 0..3 {
                        jac[level * f + k][a] += cell.weight_grads[c][a] * src[k];
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Directional derivative of the features along `dir`, written into `out`.
    pub fn directional_into(&self, p: &Vec3, dir: &Vec3, out: &mut [f64]) {
        let f = self.config.features_per_level;
        for level in 0..self.config.levels {
            let cell = self.cell(level, p, true);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for c in 0..8 {
                let g = cell.weight_grads[c];
                let dw = g[0] * dir.x + g[1] * dir.y + g[2] * dir.z;
                let src = &self.table[cell.entries[c]..cell.entries[c] + f];
                for k in 0..f {
                    dst[k] += dw * src[k];
                }
            }
        }
    }

    /// Backward of [`encode_into`](Self::encode_into): accumulates the table
    /// gradient and/or the position cotangent for `d loss / d features`.
    pub fn backward(
        &self,
        p: &Vec3,
        d_features: &[f64],
        mut grad_table: Option<&mut [f64]>,
        d_position: Option<&mut Vec3>,
    ) {
        let f = self.config.features_per_level;
        let want_position = d_position.is_some();
        let mut dp = Vec3::zeros();
        for level in 0..self.config.levels {
            let cell = self.cell(level, p, want_position);
            let df = &d_features[level * f..(level + 1) * f];
            for c in 0..8 {
                let e = cell.entries[c];
                if let Some(gt) = grad_table.as_deref_mut() {
                    for k in 0..f {
                        gt[e + k] += cell.weights[c] * df[k];
                    }
                }
                if want_position {
                    let dot: f64 = (0..f).map(|k| self.table[e + k] * df[k]).sum();
                    let g = cell.weight_grads[c];
                    dp += Vec3::new(g[0], g[1], g[2]) * dot;
                }
            }
        }
        if let Some(out) = d_position {
            *out += dp;
        }
    }

    /// Accumulates `d loss / d table` given the cotangent of
    /// [`directional_into`](Self::directional_into) output along `dir`.
    pub fn directional_backward(&self, p: &Vec3, dir: &Vec3, d_tangent: &[f64], grad_table: &mut [f64]) {
        let f = self.config.features_per_level;
        for level in 0..self.config.levels {
            let cell = self.cell(level, p, true);
            let dt = &d_tangent[level * f..(level + 1) * f];
            for c in 0..8 {
                let g = cell.weight_grads[c];
                let dw = g[0] * dir.x + g[1] * dir.y + g[2] * dir.z;
                let e = cell.entries[c];
                for k in 0..f {
                    grad_table[e + k] += dw * dt[k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_grid(seed: u64) -> HashGrid {
        let config = HashGridConfig {
            levels: 4,
            features_per_level: 2,
            coarsest_resolution: 4,
            finest_resolution: 32,
            table_size_log2: 12,
            bound: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = HashGrid::new(config, &mut rng).unwrap();
        // Widen the table so interpolation differences are well above rounding.
        for v in grid.table_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        grid
    }

    #[test]
    fn resolutions_grow_geometrically() {
        let config = HashGridConfig::default();
        let res = config.resolutions();
        assert_eq!(res.len(), 16);
        assert_eq!(res[0], 16);
        assert_eq!(*res.last().unwrap(), 2048);
        assert!(res.windows(2).all(|w| w[1] > w[0]));
        let ratio = (2048.0f64 / 16.0).powf(1.0 / 15.0);
        for (l, r) in res.iter().enumerate() {
            let expected = 16.0 * ratio.powi(l as i32);
            assert!((*r as f64 - expected).abs() <= 1.0 + 1e-9 * expected);
        }
    }

    #[test]
    fn grid_vertex_returns_table_entry() {
        let grid = small_grid(1);
        let level = 2;
        let res = grid.resolutions()[level];
        let vertex = [3u64, 1, 5];
        let p = Vec3::new(
            vertex[0] as f64 / res as f64 * 2.0 - 1.0,
            vertex[1] as f64 / res as f64 * 2.0 - 1.0,
            vertex[2] as f64 / res as f64 * 2.0 - 1.0,
        );
        let features = grid.encode(&p).unwrap();
        let e = grid.entry_index(level, vertex);
        for k in 0..2 {
            assert!((features[level * 2 + k] - grid.table()[e + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let grid = small_grid(2);
        let level = 0;
        let res = grid.resolutions()[level] as f64;
        let base = [1u64, 2, 0];
        let p = Vec3::new(
            (base[0] as f64 + 0.5) / res * 2.0 - 1.0,
            (base[1] as f64 + 0.5) / res * 2.0 - 1.0,
            (base[2] as f64 + 0.5) / res * 2.0 - 1.0,
        );
        let features = grid.encode(&p).unwrap();
        for k in 0..2 {
            let mut mean = 0.0;
            for c in 0..8u64 {
                let v = [base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1)];
                mean += grid.table()[grid.entry_index(level, v) + k] / 8.0;
            }
            assert!((features[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let grid = small_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = Vec3::new(
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
            );
            let jac = grid.jacobian(&p).unwrap();
            let h = 1e-7;
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let plus = grid.encode(&(p + e)).unwrap();
                let minus = grid.encode(&(p - e)).unwrap();
                for (k, row) in jac.iter().enumerate() {
                    let fd = (plus[k] - minus[k]) / (2.0 * h);
                    // A cell boundary inside the stencil breaks the comparison.
                    if (fd - row[a]).abs() > 1e-4 * row[a].abs().max(1.0) {
                        let cell_crossed = grid.resolutions().iter().any(|&r| {
                            let s = |v: f64| ((v + 1.0) * r as f64 / 2.0).floor();
                            s(p[a] + h) != s(p[a] - h)
                        });
                        assert!(cell_crossed, "fd {fd} vs analytic {}", row[a]);
                    }
                }
            }
        }
    }

    #[test]
    fn features_are_linear_along_an_axis_within_a_cell() {
        let grid = small_grid(4);
        // [-0.87, -0.83] sits inside a single cell at resolutions 4, 8, 16 and 32.
        let x0 = -0.87;
        let pts: Vec<Vec3> = [0.0, 0.25, 1.0]
            .iter()
            .map(|s| Vec3::new(x0 + s * 0.04, 0.13, -0.41))
            .collect();
        let f: Vec<Vec<f64>> = pts.iter().map(|p| grid.encode(p).unwrap()).collect();
        for k in 0..grid.output_dim() {
            let expected = f[0][k] + 0.25 * (f[2][k] - f[0][k]);
            assert!((f[1][k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bound_position_is_rejected() {
        let grid = small_grid(5);
        let err = grid.encode(&Vec3::new(1.2, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { .. }));
        assert!(matches!(
            grid.encode(&Vec3::new(f64::NAN, 0.0, 0.0)).unwrap_err(),
            Error::NonFinite { .. }
        ));
    }
}
