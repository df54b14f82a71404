//! Data, PDE-residual and total losses with their parameter gradients.
//!
//! The residual is evaluated in expanded form
//! `û_t − D'(û)(û_x1² + û_x2²) − D(û)(û_x1x1 + û_x2x2) − G(û)·û`,
//! all in scaled units. Input derivatives of û come from second-order duals;
//! parameter gradients come from a reverse sweep over those duals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual2, Tape};
use crate::error::{Error, Result};
use crate::grid::{DensityField, Scaling};
use crate::mlp::{JetCache, NetworkParams, Role};
use crate::rng::rng_stream;

/// The three jointly trained surrogates.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnNets {
    pub u: NetworkParams,
    pub d: NetworkParams,
    pub g: NetworkParams,
}

impl BinnNets {
    pub fn new(u: NetworkParams, d: NetworkParams, g: NetworkParams) -> Result<Self> {
        if u.role() != Role::U || d.role() != Role::D || g.role() != Role::G {
            return Err(Error::InvalidInput("networks passed in the wrong roles".into()));
        }
        Ok(BinnNets { u, d, g })
    }

    pub fn zero_grads(&self) -> BinnGrads {
        BinnGrads {
            u: vec![0.0; self.u.n_params()],
            d: vec![0.0; self.d.n_params()],
            g: vec![0.0; self.g.n_params()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnGrads {
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
}

impl BinnGrads {
    pub fn scale(&mut self, c: f64) {
        for v in self.u.iter_mut().chain(&mut self.d).chain(&mut self.g) {
            *v *= c;
        }
    }

    pub fn add_scaled(&mut self, other: &BinnGrads, c: f64) {
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            *a += c * b;
        }
        for (a, b) in self.d.iter_mut().zip(&other.d) {
            *a += c * b;
        }
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += c * b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.u.iter().chain(&self.d).chain(&self.g)
    }
}

/// Density entries mapped to scaled network inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub inputs: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
}

impl DataSet {
    /// One entry per flat field index, at bin centres and frame times.
    pub fn from_field(field: &DensityField, scaling: &Scaling) -> Self {
        let mut inputs = Vec::with_capacity(field.len());
        let mut targets = Vec::with_capacity(field.len());
        for k in 0..field.len() {
            let (i, j, s) = field.unravel(k);
            inputs.push([
                scaling.scale_x1(field.center_x1(i)),
                scaling.scale_x2(field.center_x2(j)),
                scaling.scale_t(field.times()[s]),
            ]);
            targets.push(scaling.scale_density(field.values()[k]));
        }
        DataSet { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Mean squared error of an arbitrary predictor over `idx`.
pub fn data_loss_with<F: Fn(&[f64; 3]) -> f64>(predict: F, data: &DataSet, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("data loss over an empty index set".into()));
    }
    let sum: f64 = idx
        .iter()
        .map(|&k| {
            let r = data.targets[k] - predict(&data.inputs[k]);
            r * r
        })
        .sum();
    Ok(sum / idx.len() as f64)
}

/// Ordinary least squares data loss, normalised by the subset size.
pub fn data_loss(u: &NetworkParams, data: &DataSet, idx: &[usize]) -> Result<f64> {
    data_loss_with(|x| u.forward(x), data, idx)
}

/// Data loss and its gradient with respect to the density network, accumulated into `grad`.
pub fn data_loss_grad(u: &NetworkParams, data: &DataSet, idx: &[usize], grad: &mut [f64]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::InvalidInput("data loss over an empty index set".into()));
    }
    let n = idx.len() as f64;
    let mut cache = JetCache::<0>::default();
    let mut sum = 0.0;
    for &k in idx {
        let x = data.inputs[k].map(Dual2::<0>::constant);
        let y = u.mlp().forward_dual_cached(&x, &mut cache);
        let r = y.value - data.targets[k];
        sum += r * r;
        u.mlp()
            .backward_dual(&cache, Dual2::constant(2.0 * r / n), grad, false);
    }
    Ok(sum / n)
}

/// `n_c` i.i.d. uniform points over the scaled domain `[0, box[0]] × [0, box[1]] × [0, box[2]]`.
pub fn sample_collocation(scaled_box: [f64; 3], n_c: usize, seed: u64, stream: u64) -> Result<Vec<[f64; 3]>> {
    if n_c == 0 {
        return Err(Error::InvalidInput("need at least one collocation point".into()));
    }
    let mut rng = rng_stream(seed, stream);
    Ok((0..n_c)
        .map(|_| {
            [
                rng.random::<f64>() * scaled_box[0],
                rng.random::<f64>() * scaled_box[1],
                rng.random::<f64>() * scaled_box[2],
            ]
        })
        .collect())
}

/// A point on a side face of the scaled domain; `axis` is the face normal (0 or 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub x: [f64; 3],
    pub axis: usize,
}

/// `n_b` i.i.d. points on the four side faces, uniform over their area-time.
pub fn sample_boundary(scaled_box: [f64; 3], n_b: usize, seed: u64, stream: u64) -> Result<Vec<BoundaryPoint>> {
    if n_b == 0 {
        return Err(Error::InvalidInput("need at least one boundary point".into()));
    }
    let mut rng = rng_stream(seed, stream);
    let [a, b, t] = scaled_box;
    Ok((0..n_b)
        .map(|_| {
            let axis = usize::from(rng.random::<f64>() * (a + b) < a);
            let side = if rng.random::<bool>() { scaled_box[axis] } else { 0.0 };
            let along = rng.random::<f64>() * scaled_box[1 - axis];
            let mut x = [0.0, 0.0, rng.random::<f64>() * t];
            x[axis] = side;
            x[1 - axis] = along;
            BoundaryPoint { x, axis }
        })
        .collect())
}

fn normal_jet(u: &NetworkParams, p: &BoundaryPoint, cache: &mut JetCache<1>) -> Dual2<1> {
    let x: [Dual2<1>; 3] = std::array::from_fn(|k| if k == p.axis { Dual2::variable(p.x[k], 0) } else { Dual2::constant(p.x[k]) });
    u.mlp().forward_dual_cached(&x, cache)
}

/// Mean squared normal derivative of the density network on the side faces.
pub fn flux_loss(u: &NetworkParams, points: &[BoundaryPoint]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let mut cache = JetCache::default();
    let sum: f64 = points.iter().map(|p| normal_jet(u, p, &mut cache).d1[0].powi(2)).sum();
    Ok(sum / points.len() as f64)
}

/// Flux loss with its density-network gradient accumulated into `grad`.
pub fn flux_loss_grad(u: &NetworkParams, points: &[BoundaryPoint], grad: &mut [f64]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let n = points.len() as f64;
    let mut cache = JetCache::default();
    let mut sum = 0.0;
    for p in points {
        let un = normal_jet(u, p, &mut cache).d1[0];
        sum += un * un;
        let adj = Dual2 {
            value: 0.0,
            d1: [2.0 * un / n],
            d2: [0.0],
        };
        u.mlp().backward_dual(&cache, adj, grad, false);
    }
    Ok(sum / n)
}

fn density_jet(u: &NetworkParams, p: &[f64; 3], cache: &mut JetCache<3>) -> Dual2<3> {
    let x = [
        Dual2::variable(p[0], 0),
        Dual2::variable(p[1], 1),
        Dual2::variable(p[2], 2),
    ];
    u.mlp().forward_dual_cached(&x, cache)
}

/// Components entering the residual at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualParts {
    pub u: f64,
    pub u_t: f64,
    pub grad_sq: f64,
    pub laplacian: f64,
    pub d: f64,
    pub d_prime: f64,
    pub g: f64,
}

impl ResidualParts {
    pub fn residual(&self) -> f64 {
        self.u_t - self.d_prime * self.grad_sq - self.d * self.laplacian - self.g * self.u
    }
}

pub fn residual_parts(nets: &BinnNets, point: &[f64; 3]) -> ResidualParts {
    let mut cache = JetCache::default();
    let uj = density_jet(&nets.u, point, &mut cache);
    let dj = nets.d.mlp().forward_dual(&[Dual2::<1>::variable(uj.value, 0)]);
    let g = nets.g.forward(&[uj.value]);
    ResidualParts {
        u: uj.value,
        u_t: uj.d1[2],
        grad_sq: uj.d1[0] * uj.d1[0] + uj.d1[1] * uj.d1[1],
        laplacian: uj.d2[0] + uj.d2[1],
        d: dj.value,
        d_prime: dj.d1[0],
        g,
    }
}

/// PDE residual `∂û/∂t − ∇·(D̂∇û) − Ĝû` at a scaled point.
pub fn pde_residual(nets: &BinnNets, point: &[f64; 3]) -> f64 {
    residual_parts(nets, point).residual()
}

/// Mean squared residual over `points`.
pub fn pde_loss(nets: &BinnNets, points: &[[f64; 3]]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("PDE loss over an empty point set".into()));
    }
    let sum: f64 = points.iter().map(|p| pde_residual(nets, p).powi(2)).sum();
    Ok(sum / points.len() as f64)
}

/// Reusable buffers for [`pde_loss_grad`].
#[derive(Debug, Default)]
pub struct PdeWorkspace {
    tape: Tape,
    u_cache: JetCache<3>,
    d_cache: JetCache<1>,
    g_cache: JetCache<0>,
}

/// PDE loss with gradients for all three networks, accumulated into `grads`.
pub fn pde_loss_grad(
    nets: &BinnNets,
    points: &[[f64; 3]],
    grads: &mut BinnGrads,
    ws: &mut PdeWorkspace,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidInput("PDE loss over an empty point set".into()));
    }
    let n = points.len() as f64;
    let mut sum = 0.0;
    for p in points {
        let uj = density_jet(&nets.u, p, &mut ws.u_cache);
        let dj = nets
            .d
            .mlp()
            .forward_dual_cached(&[Dual2::<1>::variable(uj.value, 0)], &mut ws.d_cache);
        let gj = nets
            .g
            .mlp()
            .forward_dual_cached(&[Dual2::<0>::constant(uj.value)], &mut ws.g_cache);

        let t = &mut ws.tape;
        t.clear();
        let u = t.var(uj.value);
        let ux = t.var(uj.d1[0]);
        let uy = t.var(uj.d1[1]);
        let ut = t.var(uj.d1[2]);
        let uxx = t.var(uj.d2[0]);
        let uyy = t.var(uj.d2[1]);
        let d = t.var(dj.value);
        let dp = t.var(dj.d1[0]);
        let g = t.var(gj.value);
        let ux2 = t.square(ux);
        let uy2 = t.square(uy);
        let grad_sq = t.add(ux2, uy2);
        let lap = t.add(uxx, uyy);
        let nonlinear = t.mul(dp, grad_sq);
        let linear = t.mul(d, lap);
        let growth = t.mul(g, u);
        let div = t.add(nonlinear, linear);
        let rhs = t.add(div, growth);
        let r = t.sub(ut, rhs);
        let r2 = t.square(r);
        let loss = t.scale(r2, 1.0 / n);
        sum += r2.value();
        let adj = t.backward(loss);

        let mut u_bar = adj.get(u);
        let d_in = nets.d.mlp().backward_dual(
            &ws.d_cache,
            Dual2 {
                value: adj.get(d),
                d1: [adj.get(dp)],
                d2: [0.0],
            },
            &mut grads.d,
            true,
        );
        u_bar += d_in[0].value;
        let g_in = nets
            .g
            .mlp()
            .backward_dual(&ws.g_cache, Dual2::constant(adj.get(g)), &mut grads.g, true);
        u_bar += g_in[0].value;
        nets.u.mlp().backward_dual(
            &ws.u_cache,
            Dual2 {
                value: u_bar,
                d1: [adj.get(ux), adj.get(uy), adj.get(ut)],
                d2: [adj.get(uxx), adj.get(uyy), 0.0],
            },
            &mut grads.u,
            false,
        );
    }
    Ok(sum / n)
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub pde: f64,
    pub bio: f64,
    /// Penalty on the normal derivative of the density at the side faces.
    pub flux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            data: 1.0,
            pde: 1.0,
            bio: 0.0,
            flux: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub data: f64,
    pub pde: f64,
    pub bio: f64,
    pub flux: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn combine(w: &LossWeights, data: f64, pde: f64, bio: f64, flux: f64) -> Self {
        LossComponents {
            data,
            pde,
            bio,
            flux,
            total: w.data * data + w.pde * pde + w.bio * bio + w.flux * flux,
        }
    }
}

/// Biological-constraint loss. No constraint is imposed, so this hook is identically zero.
pub fn bio_loss(_nets: &BinnNets) -> f64 {
    0.0
}

/// Weighted total loss and its components (no gradients).
pub fn total_loss(
    nets: &BinnNets,
    data: &DataSet,
    idx: &[usize],
    points: &[[f64; 3]],
    boundary: &[BoundaryPoint],
    weights: &LossWeights,
) -> Result<LossComponents> {
    let ld = data_loss(&nets.u, data, idx)?;
    let lp = pde_loss(nets, points)?;
    let lf = flux_loss(&nets.u, boundary)?;
    Ok(LossComponents::combine(weights, ld, lp, bio_loss(nets), lf))
}

/// Weighted total loss with gradients for every parameter.
pub fn total_loss_grad(
    nets: &BinnNets,
    data: &DataSet,
    idx: &[usize],
    points: &[[f64; 3]],
    boundary: &[BoundaryPoint],
    weights: &LossWeights,
    ws: &mut PdeWorkspace,
) -> Result<(LossComponents, BinnGrads)> {
    let mut grads = nets.zero_grads();
    let mut data_grad = vec![0.0; nets.u.n_params()];
    let ld = data_loss_grad(&nets.u, data, idx, &mut data_grad)?;
    let mut flux_grad = vec![0.0; nets.u.n_params()];
    let lf = flux_loss_grad(&nets.u, boundary, &mut flux_grad)?;
    let mut pde_grads = nets.zero_grads();
    let lp = pde_loss_grad(nets, points, &mut pde_grads, ws)?;
    for ((g, dg), fg) in grads.u.iter_mut().zip(&data_grad).zip(&flux_grad) {
        *g += weights.data * dg + weights.flux * fg;
    }
    grads.add_scaled(&pde_grads, weights.pde);
    Ok((LossComponents::combine(weights, ld, lp, bio_loss(nets), lf), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, LayerSpec, Mlp};

    fn small_nets(seed: u64) -> BinnNets {
        BinnNets::new(
            NetworkParams::with_hidden(Role::U, &[5, 4, 3], seed).unwrap(),
            NetworkParams::with_hidden(Role::D, &[3, 3, 3], seed + 100).unwrap(),
            NetworkParams::with_hidden(Role::G, &[3, 3, 3], seed + 200).unwrap(),
        )
        .unwrap()
    }

    fn toy_data(n: usize) -> DataSet {
        let inputs: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                let a = k as f64 / n as f64;
                [a, (3.0 * a).sin().abs(), 1.0 - a]
            })
            .collect();
        let targets = inputs.iter().map(|x| 0.3 + 0.5 * x[0] * x[1]).collect();
        DataSet { inputs, targets }
    }

    #[test]
    fn data_loss_zero_when_exact() {
        let data = toy_data(7);
        let idx: Vec<usize> = (0..7).collect();
        let exact = |x: &[f64; 3]| 0.3 + 0.5 * x[0] * x[1];
        assert_eq!(data_loss_with(exact, &data, &idx).unwrap(), 0.0);
    }

    #[test]
    fn data_loss_constant_offset() {
        let mut data = toy_data(5);
        data.targets = vec![1.7; 5];
        let idx: Vec<usize> = (0..5).collect();
        let l = data_loss_with(|_| 0.0, &data, &idx).unwrap();
        assert!((l - 1.7 * 1.7).abs() < 1e-15);
        assert!(data_loss_with(|_| 0.0, &data, &[]).is_err());
    }

    #[test]
    fn data_loss_matches_resummation() {
        let data = toy_data(23);
        let u = NetworkParams::with_hidden(Role::U, &[6, 6, 6], 3).unwrap();
        let idx = vec![0, 4, 5, 9, 17, 22];
        let mut acc = 0.0;
        for &k in &idx {
            let r = data.targets[k] - u.forward(&data.inputs[k]);
            acc += r * r;
        }
        let oracle = acc / idx.len() as f64;
        assert!((data_loss(&u, &data, &idx).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn linear_net_gradient_matches_normal_equations() {
        // û = w·x + b on 5 points; ∇_w L = (2/n) Σ (ŷ - y) x, ∇_b L = (2/n) Σ (ŷ - y)
        let layer = LayerSpec {
            in_width: 3,
            out_width: 1,
            activation: Activation::Linear,
        };
        let mut net = Mlp::zeros(vec![layer]).unwrap();
        net.params_mut().copy_from_slice(&[0.4, -1.2, 0.7, 0.05]);
        let inputs = vec![
            [0.1, 0.2, 0.3],
            [0.5, -0.1, 0.0],
            [0.9, 0.4, 0.2],
            [0.3, 0.3, 0.8],
            [0.0, 1.0, 0.5],
        ];
        let targets = vec![0.2, -0.4, 0.1, 0.9, 0.3];
        let n = 5.0;
        let mut oracle = [0.0; 4];
        for (x, y) in inputs.iter().zip(&targets) {
            let r = 0.4 * x[0] - 1.2 * x[1] + 0.7 * x[2] + 0.05 - y;
            for c in 0..3 {
                oracle[c] += 2.0 * r * x[c] / n;
            }
            oracle[3] += 2.0 * r / n;
        }
        let mut grad = vec![0.0; 4];
        let mut cache = JetCache::<0>::default();
        for (x, y) in inputs.iter().zip(&targets) {
            let out = net.forward_dual_cached(&x.map(Dual2::constant), &mut cache);
            net.backward_dual(&cache, Dual2::constant(2.0 * (out.value - y) / n), &mut grad, false);
        }
        for c in 0..4 {
            assert!((grad[c] - oracle[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn collocation_points_are_uniform_in_box() {
        let pts = sample_collocation([1.0, 1.0, 1.0], 1000, 42, 0).unwrap();
        for axis in 0..3 {
            let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / 1000.0;
            assert!((0.45..=0.55).contains(&mean), "axis {axis} mean {mean}");
        }
        let one = sample_collocation([1.5, 1.1, 1.0], 1, 1, 0).unwrap();
        assert!(one[0][0] < 1.5 && one[0][1] < 1.1 && one[0][2] < 1.0);
        assert_eq!(pts, sample_collocation([1.0, 1.0, 1.0], 1000, 42, 0).unwrap());
        assert!(sample_collocation([1.0; 3], 0, 1, 0).is_err());
    }

    #[test]
    fn constant_density_residual_is_minus_growth() {
        let mut nets = small_nets(1);
        // zero all density weights: û is the constant softplus(bias)
        let u = nets.u.mlp_mut();
        for v in u.params_mut() {
            *v = 0.0;
        }
        let last = u.params_mut().len() - 1;
        u.params_mut()[last] = 0.8;
        let p = [0.3, 0.2, 0.6];
        let parts = residual_parts(&nets, &p);
        let uhat = crate::mlp::softplus(0.8);
        assert!((parts.u - uhat).abs() < 1e-15);
        let expected = -nets.g.forward(&[uhat]) * uhat;
        assert!((pde_residual(&nets, &p) - expected).abs() < 1e-14);
    }

    #[test]
    fn vanishing_diffusion_limit() {
        let mut nets = small_nets(2);
        let d = nets.d.mlp_mut();
        let last = d.params_mut().len() - 1;
        d.params_mut()[last] = -40.0;
        let p = [0.4, 0.5, 0.3];
        let parts = residual_parts(&nets, &p);
        let limit = parts.u_t - parts.g * parts.u;
        assert!((pde_residual(&nets, &p) - limit).abs() < 1e-6);
    }

    #[test]
    fn residual_matches_finite_differences() {
        let nets = small_nets(5);
        let p = [0.37, 0.61, 0.44];
        let h = 1e-4;
        let u = |q: [f64; 3]| nets.u.forward(&q);
        let shift = |axis: usize, s: f64| {
            let mut q = p;
            q[axis] += s;
            q
        };
        let u0 = u(p);
        let d1: Vec<f64> = (0..3).map(|a| (u(shift(a, h)) - u(shift(a, -h))) / (2.0 * h)).collect();
        let d2: Vec<f64> = (0..2)
            .map(|a| (u(shift(a, h)) - 2.0 * u0 + u(shift(a, -h))) / (h * h))
            .collect();
        let dd = |x: f64| nets.d.forward(&[x]);
        let dprime = (dd(u0 + h) - dd(u0 - h)) / (2.0 * h);
        let fd = d1[2] - dprime * (d1[0] * d1[0] + d1[1] * d1[1]) - dd(u0) * (d2[0] + d2[1])
            - nets.g.forward(&[u0]) * u0;
        let r = pde_residual(&nets, &p);
        assert!((r - fd).abs() <= 1e-3 * r.abs().max(1e-3), "{r} vs {fd}");
    }

    #[test]
    fn pde_loss_guards_and_sums() {
        let nets = small_nets(8);
        assert!(pde_loss(&nets, &[]).is_err());
        let p = [[0.1, 0.2, 0.3]];
        let r = pde_residual(&nets, &p[0]);
        assert_eq!(pde_loss(&nets, &p).unwrap(), r * r);
        let pts = sample_collocation([1.0, 0.7, 1.0], 25, 3, 0).unwrap();
        let direct: f64 = pts.iter().map(|q| pde_residual(&nets, q).powi(2)).sum::<f64>() / 25.0;
        assert!((pde_loss(&nets, &pts).unwrap() - direct).abs() < 1e-12);
    }

    fn param_mut(n: &mut BinnNets, net: usize, k: usize) -> &mut f64 {
        let m = match net {
            0 => n.u.mlp_mut(),
            1 => n.d.mlp_mut(),
            _ => n.g.mlp_mut(),
        };
        &mut m.params_mut()[k]
    }

    fn fd_check(nets: &BinnNets, f: impl Fn(&BinnNets) -> f64, grads: &BinnGrads) {
        let sizes = [nets.u.n_params(), nets.d.n_params(), nets.g.n_params()];
        for net in 0..3 {
            for k in 0..sizes[net] {
                let mut probe = nets.clone();
                let theta = *param_mut(&mut probe, net, k);
                let h = 1e-6 * theta.abs().max(1.0);
                *param_mut(&mut probe, net, k) = theta + h;
                let fp = f(&probe);
                *param_mut(&mut probe, net, k) = theta - h;
                let fm = f(&probe);
                let fd = (fp - fm) / (2.0 * h);
                let an = [&grads.u, &grads.d, &grads.g][net][k];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-4, "net {net} param {k}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn pde_gradient_matches_finite_differences() {
        let nets = small_nets(13);
        let pts = sample_collocation([1.0, 0.8, 1.0], 10, 5, 0).unwrap();
        let mut grads = nets.zero_grads();
        let mut ws = PdeWorkspace::default();
        let l = pde_loss_grad(&nets, &pts, &mut grads, &mut ws).unwrap();
        assert!((l - pde_loss(&nets, &pts).unwrap()).abs() < 1e-14);
        fd_check(&nets, |n| pde_loss(n, &pts).unwrap(), &grads);
    }

    #[test]
    fn total_loss_decomposes() {
        let nets = small_nets(21);
        let data = toy_data(30);
        let idx: Vec<usize> = (0..30).step_by(2).collect();
        let pts = sample_collocation([1.0, 1.0, 1.0], 12, 9, 1).unwrap();
        let bnd = sample_boundary([1.0, 1.0, 1.0], 8, 9, 2).unwrap();
        let w = LossWeights::default();
        let c = total_loss(&nets, &data, &idx, &pts, &bnd, &w).unwrap();
        assert_eq!(c.bio, 0.0);
        assert!(c.flux > 0.0);
        assert!((c.data + c.pde - c.total).abs() <= 1e-15 * c.total);
        let w0 = LossWeights { pde: 0.0, ..w };
        let c0 = total_loss(&nets, &data, &idx, &pts, &bnd, &w0).unwrap();
        assert_eq!(c0.total, c0.data);

        let wf = LossWeights { flux: 0.5, ..w };
        let mut ws = PdeWorkspace::default();
        let (cg, grads) = total_loss_grad(&nets, &data, &idx, &pts, &bnd, &wf, &mut ws).unwrap();
        assert!((cg.total - (c.total + 0.5 * c.flux)).abs() <= 1e-12 * cg.total);
        fd_check(&nets, |n| total_loss(n, &data, &idx, &pts, &bnd, &wf).unwrap().total, &grads);
    }

    #[test]
    fn boundary_points_lie_on_side_faces() {
        let b = [1.5, 0.5, 1.0];
        let pts = sample_boundary(b, 4000, 3, 0).unwrap();
        for p in &pts {
            assert!(p.x[p.axis] == 0.0 || p.x[p.axis] == b[p.axis]);
            assert!((0.0..=b[1 - p.axis]).contains(&p.x[1 - p.axis]) && (0.0..1.0).contains(&p.x[2]));
        }
        // faces normal to x1 have length 0.5 of the 2.0 total perimeter half
        let share = pts.iter().filter(|p| p.axis == 0).count() as f64 / 4000.0;
        assert!((share - 0.25).abs() < 0.03, "{share}");
        assert!(sample_boundary(b, 0, 3, 0).is_err());
    }

    #[test]
    fn flux_loss_is_the_squared_normal_derivative() {
        let nets = small_nets(4);
        let p = BoundaryPoint { x: [0.0, 0.45, 0.3], axis: 0 };
        let h = 1e-5;
        let fd = (nets.u.forward(&[h, 0.45, 0.3]) - nets.u.forward(&[-h, 0.45, 0.3])) / (2.0 * h);
        let l = flux_loss(&nets.u, &[p]).unwrap();
        assert!((l - fd * fd).abs() <= 1e-8 * l.max(1e-8));
        assert_eq!(flux_loss(&nets.u, &[]).unwrap(), 0.0);
    }
}
