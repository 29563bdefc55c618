//! Reverse-mode gradients against central finite differences.
//!
//! The finite-difference reference is always taken in 64-bit arithmetic; the
//! analytic gradient is computed at both 32 and 64 bits and compared with the
//! relative error `‖analytic − numeric‖ / ‖numeric‖` per input tensor.

use deeplk::autodiff::{Graph, Var};
use deeplk::loss::{sample_loss, LossConfig};
use deeplk::trainer::pair_loss;
use deeplk::{Architecture, HomographyParams, NetworkParams, Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL_F32: f64 = 1e-3;
const TOL_F64: f64 = 1e-6;

trait Case {
    fn inputs(&self) -> Vec<Tensor<f64>>;
    /// Output node; reduced to a scalar by a fixed random weighting.
    fn build<T: Real>(&self, g: &mut Graph<T>, leaves: &[Var]) -> Result<Var>;
    /// Step for coordinate `k` of input `i`.
    fn step(&self, _input: usize, _k: usize) -> f64 {
        1e-6
    }
}

fn projection(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
}

fn scalar<T: Real, C: Case>(case: &C, inputs: &[Tensor<f64>], backward: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<T>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.cast()).unwrap()).collect();
    let out = case.build(&mut g, &leaves).unwrap();
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let n = g.value(out).len();
        let zero = g.constant(Tensor::zeros(g.value(out).shape())).unwrap();
        let w = projection(n).into_iter().map(T::c).collect();
        g.weighted_sse(out, zero, w).unwrap()
    };
    let value = g.value(loss).data()[0].to_f64().unwrap();
    if !backward {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let grads = leaves
        .iter()
        .map(|&v| g.grad(v).unwrap().data().iter().map(|x| x.to_f64().unwrap()).collect())
        .collect();
    (value, grads)
}

fn numeric<C: Case>(case: &C, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].len());
        for k in 0..inputs[i].len() {
            let h = case.step(i, k);
            let x = inputs[i].data()[k];
            work[i].data_mut()[k] = x + h;
            let up = scalar::<f64, C>(case, &work, false).0;
            work[i].data_mut()[k] = x - h;
            let down = scalar::<f64, C>(case, &work, false).0;
            work[i].data_mut()[k] = x;
            grad.push((up - down) / (2.0 * h));
        }
        out.push(grad);
    }
    out
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    assert!(norm > 1e-9, "degenerate check: numeric gradient is zero");
    diff / norm
}

fn check<C: Case>(name: &str, case: &C) {
    let inputs = case.inputs();
    let reference = numeric(case, &inputs);
    let (_, g32) = scalar::<f32, C>(case, &inputs, true);
    let (_, g64) = scalar::<f64, C>(case, &inputs, true);
    for (i, num) in reference.iter().enumerate() {
        let e32 = rel_error(&g32[i], num);
        let e64 = rel_error(&g64[i], num);
        assert!(e32 < TOL_F32, "{name} input {i}: 32-bit relative error {e32:e}");
        assert!(e64 < TOL_F64, "{name} input {i}: 64-bit relative error {e64:e}");
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so no ReLU kink lies within a step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Smooth texture, so the bilinear surface has small kinks at cell edges.
fn smooth_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let (a, b, c) = (rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(0.2..0.4));
    Tensor::image(h, w, |y, x| {
        let (y, x) = (y as f64, x as f64);
        0.5 + 0.3 * (c * x + a).sin() * (0.23 * y + b).cos() + 0.1 * (0.17 * (x + y)).sin()
    })
}

struct Conv {
    seed: u64,
    stride: usize,
    c_in: usize,
    c_out: usize,
}

impl Case for Conv {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        vec![
            random(&mut rng, &[6, 7, self.c_in], -1.0, 1.0),
            random(&mut rng, &[3, 3, self.c_in, self.c_out], -1.0, 1.0),
            random(&mut rng, &[self.c_out], -1.0, 1.0),
        ]
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.conv2d(v[0], v[1], v[2], self.stride)
    }
}

pub fn conv2d() {
    for (seed, stride, c_in, c_out) in [(1, 1, 1, 3), (2, 2, 2, 2), (3, 1, 3, 1), (4, 2, 1, 4)] {
        check(
            &format!("conv2d s{stride} {c_in}->{c_out}"),
            &Conv {
                seed,
                stride,
                c_in,
                c_out,
            },
        );
    }
}

struct Relu(u64);

impl Case for Relu {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![away_from_zero(&mut ChaCha8Rng::seed_from_u64(self.0), &[5, 4, 3])]
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.relu(v[0])
    }
}

pub fn relu() {
    for seed in 0..4 {
        check("relu", &Relu(seed));
    }
}

struct Add(u64);

impl Case for Add {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        vec![random(&mut rng, &[4, 5, 2], -1.0, 1.0), random(&mut rng, &[4, 5, 2], -1.0, 1.0)]
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        // Shared operand exercises gradient accumulation.
        let s = g.add(v[0], v[1])?;
        g.add(s, v[0])
    }
}

pub fn add() {
    for seed in 0..4 {
        check("add", &Add(seed));
    }
}

/// Warp of a 24x24 source onto a 10x10 grid; the homography stays well
/// inside the source.
struct Warp(u64);

impl Warp {
    fn homography(&self) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 + 100);
        let p = [
            1.0 + rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(5.0..8.0),
            rng.random_range(-0.1..0.1),
            1.0 + rng.random_range(-0.1..0.1),
            rng.random_range(5.0..8.0),
            rng.random_range(-1e-3..1e-3),
            rng.random_range(-1e-3..1e-3),
        ];
        Tensor::new(vec![8], p.to_vec()).unwrap()
    }
}

impl Case for Warp {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        vec![smooth_image(&mut rng, 24, 24).reshape(vec![24, 24, 1]).unwrap(), self.homography()]
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.bilinear_warp(v[0], v[1], 10, 10)
    }

    fn step(&self, input: usize, k: usize) -> f64 {
        // Coordinate shifts of ~1e-6 px keep pixel-edge crossings rare.
        match (input, k) {
            (0, _) => 1e-6,
            (_, 2 | 5) => 1e-6,
            (_, 6 | 7) => 1e-9,
            _ => 1e-7,
        }
    }
}

pub fn bilinear_warp_image_and_homography() {
    for seed in 0..4 {
        check("bilinear_warp", &Warp(seed));
    }
}

struct Dlkfm {
    seed: u64,
    channels: usize,
}

impl Case for Dlkfm {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        vec![random(&mut rng, &[6, 5, self.channels], 0.0, 1.0)]
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        g.dlkfm(v[0])
    }
}

pub fn dlkfm() {
    for (seed, channels) in [(0, 2), (1, 4), (2, 8), (3, 3)] {
        check(&format!("dlkfm c{channels}"), &Dlkfm { seed, channels });
    }
}

/// Which loss output to differentiate.
#[derive(Clone, Copy, Debug)]
enum Term {
    Bc,
    Con1,
    Con2,
    Total,
}

/// Loss terms on free single-channel feature maps at three scales.
struct LossCase {
    seed: u64,
    term: Term,
}

impl LossCase {
    fn setup(&self) -> (HomographyParams, Vec<[f64; 8]>, LossConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed + 7);
        let gt = HomographyParams::translation(rng.random_range(6.0..10.0), rng.random_range(6.0..10.0));
        let offsets = (0..3)
            .map(|_| {
                let mut d = [0.0; 8];
                for (i, v) in d.iter_mut().enumerate() {
                    *v = match i {
                        2 | 5 => rng.random_range(-2.0..2.0),
                        6 | 7 => rng.random_range(-1e-4..1e-4),
                        _ => rng.random_range(-0.03..0.03),
                    };
                }
                d
            })
            .collect();
        (gt, offsets, LossConfig::default())
    }
}

impl Case for LossCase {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        for side in [16, 32] {
            for div in [1, 2, 4] {
                let n = side / div;
                out.push(smooth_image(&mut rng, n, n).reshape(vec![n, n, 1]).unwrap());
            }
        }
        out
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let (gt, offsets, cfg) = self.setup();
        let vars = sample_loss(g, &[v[0], v[1], v[2]], &[v[3], v[4], v[5]], &gt, &offsets, &cfg)?;
        Ok(match self.term {
            Term::Bc => vars.l_bc,
            Term::Con1 => vars.l_con1,
            Term::Con2 => vars.l_con2,
            Term::Total => vars.total,
        })
    }

    fn step(&self, _input: usize, _k: usize) -> f64 {
        // Each term is quadratic in the feature values while the margins
        // dominate its magnitude, so a large step avoids cancellation.
        1e-3
    }
}

pub fn loss_terms() {
    for term in [Term::Bc, Term::Con1, Term::Con2, Term::Total] {
        for seed in 0..2 {
            check(&format!("loss {term:?}"), &LossCase { seed, term });
        }
    }
}

/// Total loss with respect to every parameter of a tiny two-branch network.
struct Network {
    params: NetworkParams,
    template: Tensor<f32>,
    input: Tensor<f32>,
}

impl Network {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = smooth_image(&mut rng, 32, 32).cast();
        let template = Tensor::image(16, 16, |y, x| 1.0 - input.data()[(y + 8) * 32 + x + 8]);
        Self {
            params: NetworkParams::init(&Architecture::small(2, 4), 3).unwrap(),
            template,
            input,
        }
    }
}

impl Case for Network {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.params.tensors().into_iter().map(|(_, t)| t.cast()).collect()
    }

    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        // Only used for forward values; `pair_loss` registers its own leaves.
        let values = v.iter().map(|&x| g.value(x).clone()).collect();
        let gt = HomographyParams::translation(8.3, 7.6);
        let offsets = [[0.01, -0.02, 1.5, 0.02, 0.01, -1.0, 2e-5, -1e-5], [-0.02, 0.0, -0.7, 0.01, 0.03, 1.2, 0.0, 3e-5]];
        let (vars, _) = pair_loss(g, &self.params, values, &self.template, &self.input, &gt, &offsets, &LossConfig::default())?;
        Ok(vars.total)
    }

    fn step(&self, _input: usize, _k: usize) -> f64 {
        1e-7
    }
}

pub fn total_loss_parameter_gradient() {
    let case = Network::new();
    let inputs = case.inputs();
    let reference = numeric(&case, &inputs);
    for bits in [32, 64] {
        let analytic = network_grad(&case, &inputs, bits);
        let num: Vec<f64> = reference.concat();
        let e = rel_error(&analytic, &num);
        let tol = if bits == 32 { TOL_F32 } else { TOL_F64 };
        assert!(e < tol, "network {bits}-bit relative error {e:e}");
    }
}

/// `pair_loss` registers its own parameter leaves, so the analytic gradient
/// is read from the handles it returns.
fn network_grad(case: &Network, inputs: &[Tensor<f64>], bits: u32) -> Vec<f64> {
    fn run<T: Real>(case: &Network, inputs: &[Tensor<f64>]) -> Vec<f64> {
        let mut g = Graph::<T>::new();
        let values = inputs.iter().map(|t| t.cast()).collect();
        let gt = HomographyParams::translation(8.3, 7.6);
        let offsets = [[0.01, -0.02, 1.5, 0.02, 0.01, -1.0, 2e-5, -1e-5], [-0.02, 0.0, -0.7, 0.01, 0.03, 1.2, 0.0, 3e-5]];
        let (vars, handles) =
            pair_loss(&mut g, &case.params, values, &case.template, &case.input, &gt, &offsets, &LossConfig::default()).unwrap();
        g.backward(vars.total).unwrap();
        handles
            .iter()
            .flat_map(|&h| g.grad(h).unwrap().data().iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>())
            .collect()
    }
    if bits == 32 {
        run::<f32>(case, inputs)
    } else {
        run::<f64>(case, inputs)
    }
}

/// Every check above.
pub fn all() {
    conv2d();
    relu();
    add();
    bilinear_warp_image_and_homography();
    dlkfm();
    loss_terms();
    total_loss_parameter_gradient();
}
