use deeplk::autodiff::Graph;
use deeplk::datagen::{corners_in_boxes, synthesize_pair, CornerSampling, ImageSource, ModalityKind, ModalitySpec};
use deeplk::eval::{align, EvalReport, Features, Initial, SampleRecord};
use deeplk::feature::{eigen_ratio_bound, eigen_ratio_exact, LocalCovariance};
use deeplk::loss::{condition1_value, condition2_value, sample_perturbations, LossConfig};
use deeplk::network::forward_blocks;
use deeplk::solver::{lk_step, solve_pyramid, Residual, SolverConfig, StopReason, TemplateSystem};
use deeplk::warp::warp_image;
use deeplk::{
    corner_error, Architecture, BlockSpec, CornerSet, FeatureMap, FeaturePyramid, HomographyParams, NetworkParams, Scale,
    Tensor,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn texture(x: f64, y: f64, phase: f64) -> f32 {
    (0.5 + 0.25 * (0.21 * x + phase).sin() * (0.17 * y - phase).cos() + 0.2 * (0.05 * (x + 2.0 * y)).sin()) as f32
}

fn small_homography() -> impl Strategy<Value = HomographyParams> {
    prop::array::uniform8(-1.0f64..1.0).prop_map(|u| {
        let d = [
            0.05 * u[0],
            0.05 * u[1],
            8.0 * u[2],
            0.05 * u[3],
            0.05 * u[4],
            8.0 * u[5],
            1e-4 * u[6],
            1e-4 * u[7],
        ];
        HomographyParams::from_delta(&d)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_kernel_conv_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in values(6 * 6 * 3)) {
        let x = tensor(&[h, w, c], seed[..h * w * c].to_vec());
        let mut k = vec![0.0; 9 * c * c];
        for ch in 0..c {
            k[(4 * c + ch) * c + ch] = 1.0;
        }
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone()).unwrap();
        let kv = g.constant(tensor(&[3, 3, c, c], k)).unwrap();
        let bv = g.constant(Tensor::zeros(&[c])).unwrap();
        let y = g.conv2d(xv, kv, bv, 1).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn identity_warp_is_identity(h in 1usize..9, w in 1usize..9, seed in values(64)) {
        let x = tensor(&[h, w, 1], seed[..h * w].to_vec());
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone()).unwrap();
        let hv = g.constant(tensor(&[8], HomographyParams::identity().p.to_vec())).unwrap();
        let y = g.bilinear_warp(xv, hv, h, w).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(x in values(5 * 6 * 2), k in values(3 * 3 * 2 * 3)) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(tensor(&[5, 6, 2], x.clone()).cast()).unwrap();
            let kv = g.leaf(tensor(&[3, 3, 2, 3], k.clone()).cast()).unwrap();
            let bv = g.leaf(Tensor::zeros(&[3])).unwrap();
            let y = g.conv2d(xv, kv, bv, 1).unwrap();
            let y = g.relu(y).unwrap();
            let f = g.dlkfm(y).unwrap();
            let zero = g.constant(Tensor::zeros(&[5, 6, 1])).unwrap();
            let l = g.reduce_sse(f, zero).unwrap();
            g.backward(l).unwrap();
            [xv, kv, bv].map(|v| g.grad(v).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn eigen_ratio_lies_in_unit_range(c in 2usize..9, b in values(8 * 10)) {
        let m = DMatrix::from_fn(c, c + 2, |i, j| b[i * 10 + j]);
        let cov = LocalCovariance::new(&m * m.transpose()).unwrap();
        prop_assume!(cov.trace() > 1e-6);
        let r = eigen_ratio_exact(&cov);
        prop_assert!(r >= 1.0 / c as f64 - 1e-12 && r <= 1.0 + 1e-12);
    }

    #[test]
    fn row_sum_bound_brackets_nonnegative_covariances(c in 2usize..9, b in prop::collection::vec(0.0f64..1.0, 8 * 10)) {
        let m = DMatrix::from_fn(c, c + 2, |i, j| b[i * 10 + j]);
        let cov = LocalCovariance::new(&m * m.transpose()).unwrap();
        prop_assume!(cov.trace() > 1e-6);
        let sums = cov.row_sums();
        let max = sums.iter().copied().fold(f64::MIN, f64::max);
        let min = sums.iter().copied().fold(f64::MAX, f64::min);
        let t = cov.trace();
        let exact = eigen_ratio_exact(&cov);
        prop_assert!(exact >= min / t - 1e-12 && exact <= max / t + 1e-12);
        prop_assert!((eigen_ratio_bound(&cov) - exact).abs() <= (max - min) / (2.0 * t) + 1e-12);
    }

    #[test]
    fn dlkfm_ignores_constant_offsets(x in values(5 * 5 * 3), shift in -3.0f64..3.0) {
        let map = |data: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let v = g.constant(tensor(&[5, 5, 3], data)).unwrap();
            let f = g.dlkfm(v).unwrap();
            g.value(f).clone()
        };
        let base = map(x.clone());
        // Interior pixels only: border patches see zero padding, which does
        // not move with the offset.
        let moved = map(x.iter().map(|v| v + shift).collect());
        for i in 1..4 {
            for j in 1..4 {
                let k = i * 5 + j;
                prop_assert!((base.data()[k] - moved.data()[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn convergence_terms_are_nonnegative_and_zero_iff_margins_hold(
        e_bar in 0.0f64..1.0,
        e in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, 0.0f64..2.0), 1..6),
    ) {
        let e_p: Vec<f64> = e.iter().map(|t| t.0).collect();
        let e_l: Vec<f64> = e.iter().map(|t| t.1).collect();
        let n: Vec<f64> = e.iter().map(|t| t.2).collect();
        let c1 = condition1_value(e_bar, &e_p, &n);
        let c2 = condition2_value(&e_p, &e_l, &n, 0.8);
        prop_assert!(c1 >= 0.0 && c2 >= 0.0);
        let holds1 = e_p.iter().zip(&n).all(|(p, n)| p - e_bar >= *n);
        let holds2 = e_p.iter().zip(&e_l).zip(&n).all(|((p, l), n)| p - l >= 0.36 * n);
        prop_assert_eq!(c1 == 0.0, holds1);
        prop_assert_eq!(c2 == 0.0, holds2);
    }

    #[test]
    fn perturbation_sampling_is_deterministic(seed in any::<u64>(), m in 1usize..8) {
        let p = HomographyParams::translation(31.0, 31.0);
        let cfg = LossConfig::default();
        let a = sample_perturbations(&p, m, &cfg, seed).unwrap();
        let b = sample_perturbations(&p, m, &cfg, seed).unwrap();
        prop_assert_eq!(a.len(), m);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn corner_error_is_symmetric_and_zero_only_on_agreement(a in small_homography(), b in small_homography()) {
        let rect = CornerSet::rectangle(128, 128);
        let ab = corner_error(&a, &b, &rect).unwrap();
        let ba = corner_error(&b, &a, &rect).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(corner_error(&a, &a, &rect).unwrap(), 0.0);
        let agree = rect.map(&a).unwrap().points().iter().zip(rect.map(&b).unwrap().points()).all(|(p, q)| p == q);
        prop_assert_eq!(ab == 0.0, agree);
    }

    #[test]
    fn group_identities(a in small_homography()) {
        let id = HomographyParams::identity();
        for h in [a.compose(&id).unwrap(), id.compose(&a).unwrap()] {
            for i in 0..8 {
                prop_assert!((h.p[i] - a.p[i]).abs() < 1e-12);
            }
        }
        let inv = a.invert().unwrap();
        for h in [a.compose(&inv).unwrap(), inv.compose(&a).unwrap()] {
            for i in 0..8 {
                prop_assert!((h.p[i] - id.p[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lk_step_recovers_synthetic_increments(v in prop::array::uniform8(-1.0f64..1.0), phase in 0.0f64..6.0) {
        let map = FeatureMap::new(Tensor::image(24, 24, |y, x| texture(x as f64, y as f64, phase)), Scale::Full).unwrap();
        let sys = TemplateSystem::precompute(&map).unwrap();
        let v = [0.01 * v[0], 0.01 * v[1], v[2], 0.01 * v[3], 0.01 * v[4], v[5], 1e-4 * v[6], 1e-4 * v[7]];
        let values = (0..24 * 24)
            .map(|i| Some(sys.row(i % 24, i / 24).iter().zip(&v).map(|(a, b)| a * b).sum()))
            .collect();
        let delta = lk_step(&sys, &Residual { values }, 0.0).unwrap();
        for (a, b) in delta.iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_shapes_follow_strides(
        specs in prop::collection::vec((1usize..3, 1usize..4, 1usize..3), 1..4),
        hq in 1usize..4,
        wq in 1usize..4,
    ) {
        let arch = Architecture {
            in_channels: 1,
            blocks: specs
                .iter()
                .map(|&(pairs, filters, first_stride)| BlockSpec { num_layers: 2 * pairs, filters, first_stride })
                .collect(),
        };
        let total: usize = arch.blocks.iter().map(|b| b.first_stride).product();
        let (h, w) = (hq * total, wq * total);
        let params = NetworkParams::init(&arch, 1).unwrap();
        let mut g = Graph::<f32>::new();
        let vars = params.template.register(&mut g, false).unwrap();
        let x = g.constant(Tensor::image(h, w, |y, x| texture(x as f64, y as f64, 0.3))).unwrap();
        let outs = forward_blocks(&mut g, &vars, x).unwrap();
        let (mut sh, mut sw) = (h, w);
        for (out, spec) in outs.iter().zip(&arch.blocks) {
            sh /= spec.first_stride;
            sw /= spec.first_stride;
            prop_assert_eq!(g.value(*out).shape(), &[sh, sw, spec.filters][..]);
        }
        if h > 1 {
            let odd = g.constant(Tensor::image(h + 1, w, |_, _| 0.5)).unwrap();
            prop_assert_eq!(total > 1, forward_blocks(&mut g, &vars, odd).is_err());
        }
    }

    #[test]
    fn branches_do_not_share_storage(seed in any::<u64>()) {
        let mut params = NetworkParams::init(&Architecture::small(2, 2), seed).unwrap();
        let input_before = params.input.clone();
        for t in params.template.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        prop_assert_eq!(&params.input, &input_before);
        prop_assert_ne!(&params.template, &NetworkParams::init(&Architecture::small(2, 2), seed).unwrap().template);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let params = NetworkParams::init(&Architecture::small(2, 3), seed).unwrap();
        let img = Tensor::image(16, 16, |y, x| texture(x as f64, y as f64, 1.0));
        let a = params.input.feature_pyramid(&img).unwrap();
        let b = params.input.feature_pyramid(&img).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generated_pairs_are_consistent(seed in any::<u64>(), id in 0usize..1000) {
        let modality = ModalitySpec::new(ModalityKind::Identity);
        let s = synthesize_pair(&ImageSource::Procedural, seed, id, &modality, CornerSampling::Boxes).unwrap();
        prop_assert!(corners_in_boxes(&s.corners));
        let rewarped = warp_image(&s.input, &s.gt, 128, 128).unwrap();
        let mae = rewarped.data().iter().zip(s.template.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / s.template.len() as f64;
        prop_assert!(mae < 2.0 / 255.0, "mae {}", mae);
        let again = synthesize_pair(&ImageSource::Procedural, seed, id, &modality, CornerSampling::Boxes).unwrap();
        prop_assert_eq!(s, again);
    }

    #[test]
    fn solver_traces_respect_thresholds_and_caps(p in small_homography(), cap in 1usize..6, phase in 0.0f64..6.0) {
        let img = Tensor::image(64, 64, |y, x| texture(x as f64, y as f64, phase));
        let pyr = FeaturePyramid::from_intensity(&img).unwrap();
        let cfg = SolverConfig { max_iterations: cap, ..SolverConfig::default() };
        let p0 = HomographyParams::from_delta(&{
            let mut d = p.delta();
            d[2] *= 0.3;
            d[5] *= 0.3;
            d
        });
        let out = solve_pyramid(&pyr, &pyr, &p0, &cfg, None).unwrap();
        for (scale, stop) in &out.stops {
            let recs: Vec<_> = out.solve_trace_level(*scale);
            prop_assert!(recs.len() <= cap);
            prop_assert!(recs.iter().all(|r| r.e_c_step.is_finite() && r.residual_norm.is_finite()));
            prop_assert!(recs.iter().all(|r| r.threshold == cfg.threshold(*scale) && r.max_iterations == cap));
            match stop {
                StopReason::Converged => prop_assert!(recs.last().unwrap().e_c_step < cfg.threshold(*scale)),
                StopReason::IterationCap => prop_assert_eq!(recs.len(), cap),
                StopReason::Failed => {}
            }
        }
    }

    #[test]
    fn curve_is_monotone_and_complete(errors in prop::collection::vec((0.0f64..80.0, 0.0f64..80.0), 1..40)) {
        let records = errors
            .iter()
            .enumerate()
            .map(|(id, &(initial_error, final_error))| SampleRecord {
                id,
                initial_error,
                final_error,
                iterations: 1,
                diverged: final_error > initial_error,
            })
            .collect();
        let report = EvalReport::from_records(records).unwrap();
        prop_assert!(report.curve.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(report.curve.last().unwrap().1, 1.0);
    }
}

trait LevelTrace {
    fn solve_trace_level(&self, scale: Scale) -> Vec<&deeplk::solver::IterationRecord>;
}

impl LevelTrace for deeplk::solver::SolveResult {
    fn solve_trace_level(&self, scale: Scale) -> Vec<&deeplk::solver::IterationRecord> {
        self.trace.iter().filter(|r| r.level == scale).collect()
    }
}

/// Identical feature maps, start within 10 px of the truth: the solver must
/// reduce the corner error in at least 90% of trials.
#[test]
fn identical_maps_reduce_corner_error() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let rect = CornerSet::rectangle(128, 128);
    let mut improved = 0;
    let trials = 40;
    for t in 0..trials {
        let phase = t as f64 * 0.37;
        let input = Tensor::image(192, 192, |y, x| texture(x as f64, y as f64, phase));
        let gt = HomographyParams::translation(32.0, 32.0);
        let template = warp_image(&input, &gt, 128, 128).unwrap();
        let shifted = CornerSet(std::array::from_fn(|i| {
            let p = rect.map(&gt).unwrap().points()[i];
            deeplk::Point::new(p.x + rng.random_range(-7.0..7.0), p.y + rng.random_range(-7.0..7.0))
        }));
        let p0 = deeplk::dlt_from_corners(&rect, &shifted).unwrap();
        let out = align(&template, &input, Features::Intensity, &Initial::External(p0), &SolverConfig::default(), Some(&gt))
            .unwrap();
        let (e0, e1) = out.errors.unwrap();
        if e1 < e0 {
            improved += 1;
        }
        assert!(e1 <= e0 || out.diverged, "worse result without the diverged flag");
    }
    assert!(improved * 10 >= trials * 9, "{improved}/{trials}");
}
