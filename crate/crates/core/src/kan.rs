//! Kolmogorov–Arnold layer with Gaussian RBF bases.
//!
//! Each edge of the layer carries a learnable univariate warp: a linear
//! combination of fixed-center Gaussian bumps plus a silu residual branch.
//! Per output unit, warped inputs are summed — so a layer computes
//! `basis(X) * W_spline + silu(X) * W_base + b`, node-wise. The RBF grid is
//! fixed: `G` uniformly spaced centers with one shared bandwidth equal to the
//! center spacing.

use rand::Rng;

use crate::diff::{Layer, ParamTensor};
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Default number of basis functions per input feature.
pub const DEFAULT_GRID_SIZE: usize = 8;
/// Default grid span. Inputs are normalized to [-1, 1]; the wider span covers
/// drift during autoregressive rollout.
pub const DEFAULT_GRID_RANGE: (f64, f64) = (-2.0, 2.0);

/// `u / (1 + e^-u)`.
pub fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

fn silu_deriv(u: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-u).exp());
    sig * (1.0 + u * (1.0 - sig))
}

/// Fixed uniform grid of Gaussian centers with a shared bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfGrid {
    centers: Vec<f64>,
    bandwidth: f64,
}

impl RbfGrid {
    /// `size` centers spanning `[min, max]` inclusive; bandwidth equals the
    /// center spacing `(max - min) / (size - 1)`.
    pub fn uniform(size: usize, min: f64, max: f64) -> Result<RbfGrid> {
        if size < 2 {
            return Err(Error::Config(format!(
                "RBF grid needs at least 2 centers, got {size}"
            )));
        }
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Config(format!("bad RBF grid range [{min}, {max}]")));
        }
        let bandwidth = (max - min) / (size - 1) as f64;
        let centers = (0..size)
            .map(|g| {
                if g == size - 1 {
                    max
                } else {
                    min + g as f64 * bandwidth
                }
            })
            .collect();
        Ok(RbfGrid { centers, bandwidth })
    }

    pub fn size(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn min(&self) -> f64 {
        self.centers[0]
    }

    pub fn max(&self) -> f64 {
        *self.centers.last().unwrap()
    }

    #[inline]
    fn basis_at(&self, g: usize, u: f64) -> f64 {
        let z = u - self.centers[g];
        (-z * z / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    #[inline]
    fn basis_deriv_at(&self, g: usize, u: f64, basis: f64) -> f64 {
        -(u - self.centers[g]) / (self.bandwidth * self.bandwidth) * basis
    }
}

/// Evaluates all `G` bumps at `u`; values in (0, 1].
pub fn rbf_basis(u: f64, grid: &RbfGrid) -> Vec<f64> {
    (0..grid.size()).map(|g| grid.basis_at(g, u)).collect()
}

/// Fast KAN layer. The spline coefficients and their output mix are fused
/// into one trainable matrix per (input, output) pair, which is the only
/// identifiable combination.
pub struct KanLayer {
    label: String,
    n_in: usize,
    n_out: usize,
    grid: RbfGrid,
    /// (n_in * G, n_out); block `i*G..(i+1)*G` mixes the bumps of input i.
    spline_weights: ParamTensor,
    /// (n_in, n_out) mix of the silu residual branch.
    base_weights: ParamTensor,
    bias: ParamTensor,
    cache: Option<KanCache>,
}

struct KanCache {
    input: Matrix,
    basis: Matrix,
    residual: Matrix,
}

impl KanLayer {
    pub fn new(
        label: impl Into<String>,
        n_in: usize,
        n_out: usize,
        grid: RbfGrid,
        rng: &mut impl Rng,
    ) -> Self {
        let label = label.into();
        let g = grid.size();
        let mut spline_weights =
            ParamTensor::matrix(format!("{label}.spline_weights"), n_in * g, n_out);
        crate::layers::init_uniform(&mut spline_weights, n_in * g, rng);
        let mut base_weights = ParamTensor::matrix(format!("{label}.base_weights"), n_in, n_out);
        crate::layers::init_uniform(&mut base_weights, n_in, rng);
        let bias = ParamTensor::vector(format!("{label}.bias"), n_out);
        KanLayer {
            label,
            n_in,
            n_out,
            grid,
            spline_weights,
            base_weights,
            bias,
            cache: None,
        }
    }

    pub fn grid(&self) -> &RbfGrid {
        &self.grid
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn expand(&self, input: &Matrix) -> Result<(Matrix, Matrix)> {
        if input.cols() != self.n_in {
            return Err(Error::Shape(format!(
                "{}: input has {} features, expected {}",
                self.label,
                input.cols(),
                self.n_in
            )));
        }
        let g = self.grid.size();
        let mut basis = Matrix::zeros(input.rows(), self.n_in * g);
        for r in 0..input.rows() {
            let row = basis.row_mut(r);
            for i in 0..self.n_in {
                let u = input.get(r, i);
                for gg in 0..g {
                    row[i * g + gg] = self.grid.basis_at(gg, u);
                }
            }
        }
        let residual = input.map(silu);
        Ok((basis, residual))
    }

    fn combine(&self, basis: &Matrix, residual: &Matrix) -> Result<Matrix> {
        let mut out = basis.matmul(self.spline_weights.values())?;
        out.add_assign(&residual.matmul(self.base_weights.values())?)?;
        out.add_row_broadcast(self.bias.values().row(0))?;
        Ok(out)
    }
}

impl Layer for KanLayer {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let (basis, residual) = self.expand(input)?;
        let out = self.combine(&basis, &residual)?;
        self.cache = Some(KanCache {
            input: input.clone(),
            basis,
            residual,
        });
        Ok(out)
    }

    fn forward_inference(&self, input: &Matrix) -> Result<Matrix> {
        let (basis, residual) = self.expand(input)?;
        self.combine(&basis, &residual)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let KanCache {
            input,
            basis,
            residual,
        } = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward", self.label)))?;
        if upstream.rows() != input.rows() || upstream.cols() != self.n_out {
            return Err(Error::Shape(format!(
                "{}: upstream is {}x{}, expected {}x{}",
                self.label,
                upstream.rows(),
                upstream.cols(),
                input.rows(),
                self.n_out
            )));
        }

        self.spline_weights.accumulate_grad(&basis.matmul_tn(upstream)?)?;
        self.base_weights.accumulate_grad(&residual.matmul_tn(upstream)?)?;
        self.bias.accumulate_grad(&upstream.column_sums())?;

        // dL/dX via the chain through both branches.
        let d_basis = upstream.matmul_nt(self.spline_weights.values())?;
        let d_residual = upstream.matmul_nt(self.base_weights.values())?;
        let g = self.grid.size();
        let mut dx = Matrix::zeros(input.rows(), self.n_in);
        for r in 0..input.rows() {
            for i in 0..self.n_in {
                let u = input.get(r, i);
                let mut acc = d_residual.get(r, i) * silu_deriv(u);
                for gg in 0..g {
                    let b = basis.get(r, i * g + gg);
                    acc += d_basis.get(r, i * g + gg) * self.grid.basis_deriv_at(gg, u, b);
                }
                dx.set(r, i, acc);
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.spline_weights, &self.base_weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.spline_weights,
            &mut self.base_weights,
            &mut self.bias,
        ]
    }
}

/// Trains a small two-layer KAN (2 -> 8 -> 1, G = 8) on a 20x20 grid sample of
/// `target` over the unit square and returns the RMSE on a held-out shifted
/// 20x20 grid. A convergence sanity check of the stacked representation.
pub fn kart_sanity_fit(target: impl Fn(f64, f64) -> f64, budget: usize) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x4b41);

    let grid = RbfGrid::uniform(8, DEFAULT_GRID_RANGE.0, DEFAULT_GRID_RANGE.1)?;
    let mut l1 = KanLayer::new("fit_l1", 2, 8, grid.clone(), &mut rng);
    let mut l2 = KanLayer::new("fit_l2", 8, 1, grid, &mut rng);

    let side = 20usize;
    let coords = |k: usize, offset: f64| {
        let i = k / side;
        let j = k % side;
        (
            (i as f64 + offset) / (side - 1) as f64,
            (j as f64 + offset) / (side - 1) as f64,
        )
    };
    let n = side * side;
    let train_x = Matrix::from_fn(n, 2, |r, c| {
        let (x, y) = coords(r, 0.0);
        if c == 0 {
            x
        } else {
            y
        }
    });
    let train_y = Matrix::from_fn(n, 1, |r, _| {
        let (x, y) = coords(r, 0.0);
        target(x, y)
    });

    let mut params: Vec<&ParamTensor> = l1.params();
    params.extend(l2.params());
    let mut adam = crate::train::AdamState::new(&params);

    for step in 0..budget {
        // cosine-decayed learning rate over the budget
        let progress = step as f64 / budget.max(1) as f64;
        let lr = 0.02 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());

        crate::diff::zero_grads(l1.params_mut().into_iter().chain(l2.params_mut()));
        let h = l1.forward(&train_x)?;
        let out = l2.forward(&h)?;
        let diff = out.sub(&train_y)?;
        let upstream = diff.scale(2.0 / n as f64);
        let dh = l2.backward(&upstream)?;
        l1.backward(&dh)?;

        let mut params: Vec<&mut ParamTensor> = l1.params_mut();
        params.extend(l2.params_mut());
        adam.step(&mut params, lr)?;
    }

    // held-out grid at cell-shifted points
    let eval_x = Matrix::from_fn(n, 2, |r, c| {
        let (x, y) = coords(r, 0.37);
        if c == 0 {
            x
        } else {
            y
        }
    });
    let pred = l2.forward_inference(&l1.forward_inference(&eval_x)?)?;
    let truth: Vec<f64> = (0..n)
        .map(|r| {
            let (x, y) = coords(r, 0.37);
            target(x, y)
        })
        .collect();
    crate::eval::rmse(pred.data(), &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_is_increasing_and_hits_endpoints() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        assert_eq!(grid.size(), 8);
        assert_eq!(grid.min(), -2.0);
        assert_eq!(grid.max(), 2.0);
        assert!(grid.bandwidth() > 0.0);
        assert!((grid.bandwidth() - 4.0 / 7.0).abs() < 1e-15);
        for w in grid.centers().windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(RbfGrid::uniform(1, -1.0, 1.0).is_err());
        assert!(RbfGrid::uniform(4, 1.0, 1.0).is_err());
    }

    #[test]
    fn basis_is_one_at_center_and_known_at_one_sigma() {
        let grid = RbfGrid::uniform(5, -1.0, 1.0).unwrap();
        for g in 0..grid.size() {
            let b = rbf_basis(grid.centers()[g], &grid);
            assert_eq!(b[g], 1.0);
        }
        // one bandwidth away from a center the bump is exactly exp(-1/2)
        let b = rbf_basis(grid.centers()[2] + grid.bandwidth(), &grid);
        assert!((b[2] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((b[2] - 0.6065306597126334).abs() < 1e-12);
    }

    #[test]
    fn basis_is_symmetric_at_grid_center() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let b = rbf_basis(0.0, &grid);
        for g in 0..8 {
            assert!((b[g] - b[7 - g]).abs() < 1e-15);
        }
        for &v in &b {
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        // asymptote: relative deviation from identity under 1e-8 at u = 20
        assert!((silu(20.0) - 20.0).abs() / 20.0 < 1e-8);
        // arbitrary-precision oracle: 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0) - expected).abs() < 1e-16);
        assert!((silu(1.0) - 0.7310585786300049).abs() < 1e-12);
        // stays finite far into the negative tail
        assert!(silu(-800.0).is_finite());
    }

    fn zero_params(layer: &mut KanLayer) {
        for p in layer.params_mut() {
            for v in p.values_mut().data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = KanLayer::new("kan", 3, 4, grid, &mut rng);
        zero_params(&mut layer);
        let x = Matrix::from_fn(5, 3, |r, c| (r as f64 - c as f64) * 0.21);
        let out = layer.forward_inference(&x).unwrap();
        assert_eq!(out, Matrix::zeros(5, 4));
    }

    #[test]
    fn base_identity_reduces_to_silu() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = KanLayer::new("kan", 3, 3, grid, &mut rng);
        zero_params(&mut layer);
        *layer.base_weights.values_mut() = Matrix::eye(3);
        let x = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.17 - 0.8);
        let out = layer.forward_inference(&x).unwrap();
        assert!(out.max_abs_diff(&x.map(silu)) < 1e-15);
    }

    #[test]
    fn scalar_two_bump_example() {
        // u = 0.3 on a two-center grid over [-1, 1] (bandwidth 2), spline
        // weights all one: out = exp(-(1.3)^2/8) + exp(-(0.7)^2/8).
        let grid = RbfGrid::uniform(2, -1.0, 1.0).unwrap();
        assert_eq!(grid.bandwidth(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = KanLayer::new("kan", 1, 1, grid, &mut rng);
        zero_params(&mut layer);
        for v in layer.spline_weights.values_mut().data_mut() {
            *v = 1.0;
        }
        let x = Matrix::from_rows(&[vec![0.3]]).unwrap();
        let out = layer.forward_inference(&x).unwrap();
        let oracle = (-(1.3f64 * 1.3) / 8.0).exp() + (-(0.7f64 * 0.7) / 8.0).exp();
        assert!((out.get(0, 0) - oracle).abs() < 1e-15);
        assert!((out.get(0, 0) - 1.75026).abs() < 1e-4);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = KanLayer::new("kan", 2, 3, grid, &mut rng);
        let x = Matrix::from_fn(4, 2, |r, c| (r + c) as f64 * 0.11 - 0.3);
        layer.forward(&x).unwrap();
        let dx = layer.backward(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(dx, Matrix::zeros(4, 2));
        for p in layer.params() {
            assert!(p.grad().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn bias_gradient_is_upstream_column_sums() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = KanLayer::new("kan", 2, 2, grid, &mut rng);
        let x = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64 * 0.07);
        layer.forward(&x).unwrap();
        let up = Matrix::from_fn(3, 2, |r, c| (r + 1) as f64 * 0.5 - c as f64);
        layer.backward(&up).unwrap();
        assert!(layer.bias.grad().max_abs_diff(&up.column_sums()) < 1e-15);
    }

    #[test]
    fn kan_passes_gradcheck() {
        for seed in [21u64, 22, 23] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
            let mut layer = KanLayer::new("kan", 4, 6, grid, &mut rng);
            let x = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let r = gradcheck(&mut layer, &x, 1e-5, 1e-4).unwrap();
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn forward_is_node_local_and_deterministic() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = KanLayer::new("kan", 3, 5, grid, &mut rng);
        let x = Matrix::from_fn(6, 3, |r, c| ((r * 3 + c) as f64 * 0.77).sin());
        let out = layer.forward_inference(&x).unwrap();
        // bit-identical repeat
        assert_eq!(out, layer.forward_inference(&x).unwrap());
        // permuting rows permutes outputs identically
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Matrix::from_fn(6, 3, |r, c| x.get(perm[r], c));
        let outp = layer.forward_inference(&xp).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(outp.row(r), out.row(p));
        }
    }

    #[test]
    fn parameter_count_formula() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = KanLayer::new("kan", 6, 128, grid, &mut rng);
        assert_eq!(layer.param_count(), 6 * 8 * 128 + 6 * 128 + 128);
        assert_eq!(layer.param_count(), 7040);
    }

    #[test]
    fn width_mismatch_rejected() {
        let grid = RbfGrid::uniform(8, -2.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = KanLayer::new("kan", 3, 2, grid, &mut rng);
        assert!(layer.forward_inference(&Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn kart_fit_sum_of_coordinates() {
        let err = kart_sanity_fit(|x, y| x + y, 2000).unwrap();
        assert!(err < 1e-3, "rmse {err}");
    }

    #[test]
    fn kart_fit_product() {
        let err = kart_sanity_fit(|x, y| x * y, 2000).unwrap();
        assert!(err < 1e-2, "rmse {err}");
    }

    #[test]
    fn kart_fit_constant() {
        let err = kart_sanity_fit(|_, _| 0.75, 2000).unwrap();
        assert!(err < 1e-6, "rmse {err}");
    }
}
