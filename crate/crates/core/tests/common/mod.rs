//! Independent oracles shared by the integration suites and the acceptance gate.
#![allow(dead_code)]

use nalgebra::{Matrix4, UnitQuaternion, Vector3, Vector4};
use p2preg::config::{Profile, RunConfig};
use p2preg::data::ply::format_ply;
use p2preg::data::{DatasetManifest, RegistrationPair, Split};
use p2preg::geometry::{random_transform, residual_transform, PointCloud, Quaternion, RigidTransform};
use p2preg::icp::{icp, IcpConfig};
use p2preg::losses::{dropout_mask, param_loss, total_loss, tsl, LossConfig, LossTerms, SensitivityFeatures};
use p2preg::metrics::isotropic_errors;
use p2preg::model::{contribution_map, Branch, ModelConfig, RegistrationNet};
use p2preg::nn::{PoolMask, Tensor};
use p2preg::train::{evaluate, pair_objective, AuxPasses, LossWeights, PairTrace, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud<f64> {
    PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
}

pub fn random_rigid(rng: &mut impl Rng) -> RigidTransform<f64> {
    random_transform(rng, 180.0, 2.0).unwrap()
}

/// 4x4 homogeneous matrix built with nalgebra's own quaternion conversion.
pub fn homogeneous(t: &RigidTransform<f64>) -> Matrix4<f64> {
    let q = t.rotation;
    let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q.w, q.x, q.y, q.z)).to_rotation_matrix();
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    m[(0, 3)] = t.translation[0];
    m[(1, 3)] = t.translation[1];
    m[(2, 3)] = t.translation[2];
    m
}

fn max_abs_diff(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    (a - b).abs().max()
}

fn apply_h(m: &Matrix4<f64>, p: [f64; 3]) -> Vector3<f64> {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    Vector3::new(v[0], v[1], v[2])
}

/// Largest disagreement between the library and homogeneous-matrix brute
/// force over `cases` random compose/apply/inverse/residual checks.
pub fn geometry_oracle(cases: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let a = random_rigid(&mut rng);
        let b = random_rigid(&mut rng);
        let (ma, mb) = (homogeneous(&a), homogeneous(&b));

        worst = worst.max(max_abs_diff(&homogeneous(&a.compose(&b)), &(ma * mb)));
        worst = worst.max(max_abs_diff(&homogeneous(&a.inverse()), &ma.try_inverse().unwrap()));
        let res = residual_transform(&a, &b);
        worst = worst.max(max_abs_diff(&homogeneous(&res), &(ma * mb.try_inverse().unwrap())));

        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let got = a.apply_point(p);
        let want = apply_h(&ma, p);
        for i in 0..3 {
            worst = worst.max((got[i] - want[i]).abs());
        }
    }
    worst
}

/// Rows of `t` reordered by `perm`.
pub fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_vec(t.rows(), t.cols(), data).unwrap()
}

pub fn permute_cloud(c: &PointCloud<f64>, perm: &[usize]) -> PointCloud<f64> {
    c.select(perm).unwrap()
}

pub fn shuffled(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
    p
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn transform_diff(a: &RigidTransform<f64>, b: &RigidTransform<f64>) -> f64 {
    let qa = a.rotation.canonical().to_array();
    let qb = b.rotation.canonical().to_array();
    max_diff(&qa, &qb).max(max_diff(&a.translation, &b.translation))
}

#[derive(Debug, Default)]
pub struct InvarianceReport {
    pub global_permutation: f64,
    pub global_duplication: f64,
    pub pair_permutation: f64,
    pub pfi_other_permutation: f64,
    pub pfi_self_equivariance: f64,
    pub register_permutation: f64,
}

impl InvarianceReport {
    pub fn worst(&self) -> f64 {
        [
            self.global_permutation,
            self.global_duplication,
            self.pair_permutation,
            self.pfi_other_permutation,
            self.pfi_self_equivariance,
            self.register_permutation,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Permutation, duplication and equivariance deviations over `cases` random
/// inputs at test widths.
pub fn invariance_suite(cases: usize, seed: u64) -> InvarianceReport {
    let mut rng = rng(seed);
    let mut r = InvarianceReport::default();
    let config = ModelConfig::test();
    let pfi_block = config.pfi_positions[0];
    let prev_width = config.block_channels[pfi_block - 2];
    for case in 0..cases {
        let net = RegistrationNet::<f64>::new(config.clone(), seed + case as u64).unwrap();
        let nx = rng.random_range(16..48);
        let ny = rng.random_range(16..48);
        let x = random_cloud(&mut rng, nx);
        let y = random_cloud(&mut rng, ny);
        let px = shuffled(&mut rng, nx);
        let py = shuffled(&mut rng, ny);
        let xp = permute_cloud(&x, &px);
        let yp = permute_cloud(&y, &py);

        // duplicate a random subset of points at the end
        let mut dup: Vec<usize> = (0..nx).collect();
        dup.extend((0..nx / 3).map(|_| rng.random_range(0..nx)));
        let xd = x.select(&dup).unwrap();

        for b in Branch::BOTH {
            let g = net.encoder_forward(&x, None, b).unwrap().global;
            let gp = net.encoder_forward(&xp, None, b).unwrap().global;
            let gd = net.encoder_forward(&xd, None, b).unwrap().global;
            r.global_permutation = r.global_permutation.max(max_diff(&g, &gp));
            r.global_duplication = r.global_duplication.max(max_diff(&g, &gd));

            let (a, c) = net.encode_pair(&x, &y, b);
            let (ap, cp) = net.encode_pair(&xp, &yp, b);
            r.pair_permutation = r.pair_permutation.max(max_diff(&a.global, &ap.global)).max(max_diff(&c.global, &cp.global));

            let own = random_tensor(&mut rng, nx, prev_width);
            let other = random_tensor(&mut rng, ny, prev_width);
            let base = net.pfi(b, pfi_block, &own, &other).unwrap();
            let other_perm = net.pfi(b, pfi_block, &own, &permute_rows(&other, &py)).unwrap();
            r.pfi_other_permutation = r.pfi_other_permutation.max(max_diff(base.data(), other_perm.data()));
            let own_perm = net.pfi(b, pfi_block, &permute_rows(&own, &px), &other).unwrap();
            r.pfi_self_equivariance = r
                .pfi_self_equivariance
                .max(max_diff(permute_rows(&base, &px).data(), own_perm.data()));
        }

        let t = net.register(&x, &y).unwrap().final_transform;
        let tp = net.register(&xp, &yp).unwrap().final_transform;
        r.register_permutation = r.register_permutation.max(transform_diff(&t, &tp));
    }
    r
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A small pair with a moderate misalignment and partial overlap.
pub fn gradient_pair(rng: &mut impl Rng, n: usize) -> RegistrationPair<f64> {
    let base = random_cloud(rng, n + n / 4);
    let gt = random_transform::<f64, _>(rng, 45.0, 0.5).unwrap();
    let x = base.select(&(0..n).collect::<Vec<_>>()).unwrap();
    let y = gt.apply(&base.select(&(n / 4..n + n / 4).collect::<Vec<_>>()).unwrap());
    RegistrationPair {
        source: x,
        reference: y,
        gt,
        sampling_mode: p2preg::data::SamplingMode::Os,
        crop_manner: p2preg::data::CropManner::None,
        noise_sigma: 0.0,
        seed: 0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Checks whose 1e-4 difference straddled a kink and used a smaller step.
    pub refined: usize,
}

/// Relative error with a floor on the denominator so that derivatives that
/// are zero up to rounding are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-4;

fn central(f: &impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Central difference at `FD_STEP`, unless it disagrees with the estimate at a
/// ten times smaller step. ReLU, max-pool and absolute-value kinks inside
/// `[-h, h]` cause such disagreement; the step is then reduced down to 1e-6.
/// The choice depends only on the numeric estimates. Returns the estimate
/// and the step it used.
pub fn stable_central_difference(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut h = FD_STEP;
    let mut est = central(&f, h);
    while h > 1.5e-6 {
        let finer = central(&f, h / 10.0);
        if (est - finer).abs() <= 1e-5 * est.abs().max(finer.abs()).max(GRADIENT_FLOOR) {
            return (est, h);
        }
        h /= 10.0;
        est = finer;
    }
    (est, h)
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADIENT_FLOOR)
}

fn objective(
    net: &RegistrationNet<f64>,
    pair: &RegistrationPair<f64>,
    loss: &LossConfig,
    weights: LossWeights,
    trace: &PairTrace<f64>,
) -> f64 {
    let aux = AuxPasses {
        sensitivity: false,
        dropout: false,
    };
    pair_objective(net, pair, loss, weights, aux, Some(trace), false, &mut rng(0))
        .unwrap()
        .loss
}

/// Central differences against the analytic gradient of one weighted
/// objective, with perturbations and masks frozen from a recorded pass.
/// Checks `coords` random single parameters and `directions` random
/// directions through all parameters.
pub fn gradient_check(seed: u64, weights: LossWeights, coords: usize, directions: usize) -> GradientCheck {
    let mut rng = rng(seed);
    let net = RegistrationNet::<f64>::new(ModelConfig::test(), seed).unwrap();
    let loss = LossConfig::default();
    let pair = gradient_pair(&mut rng, 24);
    let aux = AuxPasses {
        sensitivity: weights.sensitivity > 0.0,
        dropout: weights.dropout > 0.0,
    };
    let first = pair_objective(&net, &pair, &loss, weights, aux, None, true, &mut rng).unwrap();
    let grads = first.grads.unwrap();
    let trace = first.trace;
    let replayed = objective(&net, &pair, &loss, weights, &trace);
    assert!((replayed - first.loss).abs() <= 1e-12 * first.loss.abs().max(1.0), "replay drifted");

    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut k: usize| {
        for (i, s) in sizes.iter().enumerate() {
            if k < *s {
                return (i, k);
            }
            k -= s;
        }
        unreachable!()
    };

    let mut worst = 0.0f64;
    let mut refined = 0;
    let mut checks = 0;
    let mut record = |analytic: f64, (numeric, step): (f64, f64)| {
        worst = worst.max(relative_error(analytic, numeric));
        refined += usize::from(step < FD_STEP);
        checks += 1;
    };

    for _ in 0..coords {
        let (pi, k) = locate(rng.random_range(0..total));
        let f = |h: f64| {
            let mut n = net.clone();
            n.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[k] += h;
            objective(&n, &pair, &loss, weights, &trace)
        };
        record(grads[pi].data()[k], stable_central_difference(f));
    }
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> = sizes
            .iter()
            .map(|s| (0..*s).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let analytic: f64 = dir
            .iter()
            .zip(&grads)
            .flat_map(|(d, g)| d.iter().zip(g.data()).map(|(a, b)| a * b))
            .sum::<f64>()
            / norm;
        let f = |h: f64| {
            let mut n = net.clone();
            for (p, d) in n.params_mut().iter_mut().zip(&dir) {
                for (v, dv) in p.value.data_mut().iter_mut().zip(d) {
                    *v += h * dv / norm;
                }
            }
            objective(&n, &pair, &loss, weights, &trace)
        };
        record(analytic, stable_central_difference(f));
    }
    GradientCheck {
        max_relative_error: worst,
        checked: checks,
        refined,
    }
}

/// Quaternion with its sign flipped; represents the same rotation.
pub fn flipped(q: Quaternion<f64>) -> Quaternion<f64> {
    q.neg()
}

/// The eight training pairs of the test profile.
pub fn overfit_pairs(seed: u64) -> (RunConfig, Vec<RegistrationPair<f32>>) {
    let mut config = RunConfig::profile(Profile::Test);
    config.train.seed = seed;
    let manifest = DatasetManifest::plan::<f32>(&config.data, seed, &[Split::Train]).unwrap();
    let pairs = manifest.generate::<f32>(None).unwrap().into_iter().map(|(_, p)| p).collect();
    (config, pairs)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Largest deviation of Error_R from 30 degrees for identity predictions
/// against 30-degree ground truths about random axes.
pub fn thirty_degree_deviation(cases: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    (0..cases)
        .map(|_| {
            let axis: [f64; 3] = std::array::from_fn(|_| g.random_range(-1.0..1.0));
            let gt = RigidTransform::from_rotation(Quaternion::from_axis_angle(axis, 30f64.to_radians()).unwrap());
            let (e, _) = isotropic_errors(&RigidTransform::identity(), &gt);
            (e - 30.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Number of random error sets (of varying size and spread) whose RMSE falls
/// below their MAE, and the number of sets tried.
pub fn rmse_below_mae(sets: usize, seed: u64) -> (usize, usize) {
    let mut g = rng(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let n = g.random_range(1..200);
        let scale = 10f64.powf(g.random_range(-3.0..3.0));
        let v: Vec<f64> = (0..n).map(|_| scale * g.random_range(-1.0..1.0)).collect();
        let (r, m) = (p2preg::metrics::rmse(&v).unwrap(), p2preg::metrics::mae(&v).unwrap());
        if r < m * (1.0 - 1e-12) {
            bad += 1;
        }
    }
    (bad, sets)
}

/// Largest change in Error_R when the sign of either or both quaternions is
/// flipped, over `cases` random pairs.
pub fn sign_flip_deviation(cases: usize, seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let a = random_rigid(&mut g);
        let b = random_rigid(&mut g);
        let base = isotropic_errors(&a, &b).0;
        let fa = RigidTransform { rotation: flipped(a.rotation), ..a };
        let fb = RigidTransform { rotation: flipped(b.rotation), ..b };
        for (p, q) in [(&fa, &b), (&a, &fb), (&fa, &fb)] {
            worst = worst.max((isotropic_errors(p, q).0 - base).abs());
        }
    }
    worst
}

/// Dropout loss of a one-iteration network on `pair`, with the source pool
/// rows in `drop` excluded and the reference untouched.
pub fn dropout_loss_with_rows(net: &RegistrationNet<f64>, pair: &RegistrationPair<f64>, drop: Vec<bool>) -> f64 {
    assert_eq!(net.config().iterations, 1);
    let trace = PairTrace {
        iterations: vec![p2preg::train::IterationTrace {
            accumulated: RigidTransform::identity(),
            target: pair.gt,
            perturbation: None,
            masks: Some([PoolMask::Rows(drop), PoolMask::Rows(vec![false; pair.reference.len()])]),
        }],
    };
    let aux = AuxPasses {
        sensitivity: false,
        dropout: true,
    };
    let obj = pair_objective(
        net,
        pair,
        &LossConfig::default(),
        LossWeights::DROPOUT,
        aux,
        Some(&trace),
        false,
        &mut rng(0),
    )
    .unwrap();
    obj.terms[0].dropout
}

/// Source rows that supply no channel maximum in either branch.
pub fn idle_source_rows(net: &RegistrationNet<f64>, pair: &RegistrationPair<f64>) -> Vec<bool> {
    let (fx, _) = net.features(&pair.source, &pair.reference);
    let r = contribution_map(&pair.source, &fx.rotation).unwrap();
    let t = contribution_map(&pair.source, &fx.translation).unwrap();
    r.iter().zip(&t).map(|(a, b)| a + b == 0).collect()
}

/// Hand-computed loss values: `(label, computed, expected)`. Every expected
/// value is exactly representable, so the comparison is exact.
pub fn loss_point_values() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();

    let same = SensitivityFeatures {
        anchor: vec![0.25; 8],
        rotated: vec![0.25; 8],
        translated: vec![0.25; 8],
    };
    out.push(("L_s with identical features", tsl(&same, &same, 0.01, false).unwrap(), 0.02));

    let terms = [LossTerms {
        param: 1.0,
        sensitivity: 2.0,
        dropout: 3.0,
    }];
    out.push(("total of (1, 2, 3)", total_loss(&terms, 1e-3, 1e-3).unwrap(), 1.005));

    let id = RigidTransform::<f64>::identity();
    let half_turn = RigidTransform::from_rotation(Quaternion::new(0.0, 1.0, 0.0, 0.0));
    out.push(("L_p identity vs half turn", param_loss(&id, &half_turn, 4.0), 2.0));
    let shifted = RigidTransform::new(Quaternion::identity(), [0.3, 0.0, 0.4]).unwrap();
    out.push(("L_p translation 0.5", param_loss(&id, &shifted, 4.0), 2.0));
    out.push(("L_p exact", param_loss(&shifted, &shifted, 4.0), 0.0));

    let net = RegistrationNet::<f64>::new(
        ModelConfig {
            iterations: 1,
            ..ModelConfig::test()
        },
        3,
    )
    .unwrap();
    let pair = gradient_pair(&mut rng(12), 32);
    let mask = match dropout_mask(pair.source.len(), 1, 0.0, false, &mut rng(1)).unwrap() {
        PoolMask::Rows(m) => m,
        PoolMask::Elements(_) => unreachable!(),
    };
    out.push(("L_d at dropout ratio 0", dropout_loss_with_rows(&net, &pair, mask), 0.0));
    let idle = idle_source_rows(&net, &pair);
    assert!(idle.iter().any(|d| *d), "every row supplies a maximum");
    out.push(("L_d dropping idle rows", dropout_loss_with_rows(&net, &pair, idle), 0.0));
    out
}

/// Outcome of rerunning each seeded stage twice.
#[derive(Debug, Clone, Copy)]
pub struct DeterminismReport {
    pub manifests: bool,
    pub clouds: bool,
    pub loss_traces: bool,
    pub eval_reports: bool,
}

impl DeterminismReport {
    pub fn all(&self) -> bool {
        self.manifests && self.clouds && self.loss_traces && self.eval_reports
    }
}

/// Plans and generates the test-profile dataset twice, trains two fresh
/// single-threaded trainers for `steps` steps, and evaluates both twice.
pub fn determinism_report(seed: u64, steps: u64) -> DeterminismReport {
    let config = RunConfig::profile(Profile::Test);
    let plan = || DatasetManifest::plan::<f32>(&config.data, seed, &Split::ALL).unwrap();
    let (a, b) = (plan(), plan());
    let manifests = a.to_json() == b.to_json();
    let (ga, gb) = (a.generate::<f32>(None).unwrap(), b.generate::<f32>(None).unwrap());
    let clouds = ga.len() == gb.len()
        && ga.iter().zip(&gb).all(|((ra, pa), (rb, pb))| {
            ra == rb
                && format_ply(&pa.source) == format_ply(&pb.source)
                && format_ply(&pa.reference) == format_ply(&pb.reference)
        });

    let split = |s: Split| -> Vec<RegistrationPair<f32>> {
        ga.iter().filter(|(r, _)| r.split == s).map(|(_, p)| p.clone()).collect()
    };
    let (train_pairs, test_pairs) = (split(Split::Train), split(Split::Test));
    let train = TrainConfig {
        steps,
        seed,
        threads: 1,
        ..config.train.clone()
    };
    let run = || {
        let mut t = Trainer::<f32>::new(config.model.clone(), config.loss.clone(), train.clone()).unwrap();
        let trace: Vec<_> = t.run(&train_pairs, |_, _| Ok(())).unwrap().into_iter().map(|r| r.losses).collect();
        (trace, t.into_net())
    };
    let ((ta, na), (tb, nb)) = (run(), run());
    let bits = |t: &[p2preg::train::LossBreakdown]| -> Vec<[u64; 4]> {
        t.iter()
            .map(|l| [l.total.to_bits(), l.param.to_bits(), l.sensitivity.to_bits(), l.dropout.to_bits()])
            .collect()
    };
    let loss_traces = bits(&ta) == bits(&tb);

    let report = |net: &RegistrationNet<f32>| serde_json::to_string(&evaluate(net, &test_pairs).unwrap()).unwrap();
    let eval_reports = report(&na) == report(&nb) && report(&na) == report(&na);
    DeterminismReport {
        manifests,
        clouds,
        loss_traces,
        eval_reports,
    }
}

/// Full-overlap pair: a random cloud and its copy under a 10-degree rotation
/// and a small translation.
pub fn ten_degree_case(seed: u64) -> (PointCloud<f64>, PointCloud<f64>, RigidTransform<f64>) {
    let mut g = rng(seed);
    let x = random_cloud(&mut g, 300);
    let axis: [f64; 3] = std::array::from_fn(|_| g.random_range(-1.0..1.0));
    let gt = RigidTransform::new(
        Quaternion::from_axis_angle(axis, 10f64.to_radians()).unwrap(),
        std::array::from_fn(|_| g.random_range(-0.05..0.05)),
    )
    .unwrap();
    let y = gt.apply(&x);
    (x, y, gt)
}

/// Worst rotation error, worst translation error, and whether every run
/// converged with a non-increasing residual, over `cases` 10-degree pairs.
pub fn icp_closure(cases: u64) -> (f64, f64, bool) {
    let (mut wa, mut wt, mut ok) = (0.0f64, 0.0f64, true);
    for seed in 0..cases {
        let (x, y, gt) = ten_degree_case(seed);
        let r = icp(&x, &y, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
        let (da, dt) = isotropic_errors(&r.transform, &gt);
        wa = wa.max(da);
        wt = wt.max(dt);
        ok &= r.converged && !r.degenerate && r.residual_history.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    }
    (wa, wt, ok)
}
