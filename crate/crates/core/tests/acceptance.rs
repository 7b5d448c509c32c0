//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use depthdeblur::blur::BlurOperator;
use depthdeblur::energy::total_energy;
use depthdeblur::geometry::{induced_flow, small_rotation};
use depthdeblur::io::{write_png, write_pose};
use depthdeblur::metrics::{flow_error, mean_endpoint_error, psnr, ssim};
use depthdeblur::pipeline::{deblur, render_frames, DeblurResult};
use depthdeblur::pose::{solve_pose, PoseProblem};
use depthdeblur::synth::{procedural_instance, sample_motion, synthesize, SynthInstance};
use depthdeblur::{DepthMap, EnergyParams, FlowField, Image, Intrinsics, Pose6};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 96;
const SIGMA: f64 = 0.05;
const NOISE: f64 = 0.01;
const INSTANCES: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    Image::new(h, w, c, data).unwrap()
}

fn random_depth(h: usize, w: usize, rng: &mut ChaCha8Rng) -> DepthMap {
    let (base, gx, gy): (f64, f64, f64) = (rng.random_range(1.5..3.0), rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
    let data = (0..h * w)
        .map(|i| base + gx * (i % w) as f64 + gy * (i / w) as f64 + rng.random_range(0.0..0.05))
        .collect();
    DepthMap::new(h, w, data).unwrap()
}

fn instances() -> Vec<SynthInstance> {
    (0..INSTANCES)
        .map(|seed| procedural_instance(SIZE, SIGMA, SIGMA, 10, NOISE, seed).unwrap())
        .collect()
}

/// Direct per-frame warp and average, sampling each exposure pose by
/// back-projection, rigid motion and bilinear interpolation.
fn oracle_blur(latent: &Image, depth: &DepthMap, k: &Intrinsics, p: &Pose6, n: usize) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = latent.dims();
    let c = latent.channels();
    let mut acc = vec![0.0; h * w * c];
    let mut valid = vec![true; h * w];
    let frames = 2 * n + 1;
    for i in 0..frames {
        let s = (i as f64 - n as f64) / (2.0 * n as f64);
        let theta = p.theta() * s;
        let v = p.translation() * s;
        let skew = nalgebra::Matrix3::new(0.0, -theta.z, theta.y, theta.z, 0.0, -theta.x, -theta.y, theta.x, 0.0);
        let rt = (nalgebra::Matrix3::identity() + skew).transpose();
        for row in 0..h {
            for col in 0..w {
                let idx = row * w + col;
                let z = depth.data()[idx];
                let x = Vector3::new((col as f64 - k.cx) / k.fx * z, (row as f64 - k.cy) / k.fy * z, z);
                let q = rt * (x - v);
                let (u, vv) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
                let inside = u > -1.0 && u < w as f64 && vv > -1.0 && vv < h as f64 && q.z > 0.0;
                if !inside {
                    valid[idx] = false;
                    continue;
                }
                let u = u.clamp(0.0, (w - 1) as f64);
                let vv = vv.clamp(0.0, (h - 1) as f64);
                let x0 = (u.floor() as usize).min(w - 2);
                let y0 = (vv.floor() as usize).min(h - 2);
                let (ax, ay) = (u - x0 as f64, vv - y0 as f64);
                for ch in 0..c {
                    let at = |r: usize, cc: usize| latent.get(r, cc, ch);
                    let value = (1.0 - ax) * (1.0 - ay) * at(y0, x0)
                        + ax * (1.0 - ay) * at(y0, x0 + 1)
                        + (1.0 - ax) * ay * at(y0 + 1, x0)
                        + ax * ay * at(y0 + 1, x0 + 1);
                    acc[idx * c + ch] += value / frames as f64;
                }
            }
        }
    }
    (acc, valid)
}

fn criterion_1() -> Outcome {
    let mut elapsed = Duration::ZERO;
    let mut worst = 0.0f64;
    let mut mask_ok = true;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let latent = random_image(64, 64, 3, &mut rng);
        let depth = random_depth(64, 64, &mut rng);
        let k = Intrinsics::centered(64, 64);
        let p = sample_motion(SIGMA, SIGMA, trial).unwrap();
        let started = Instant::now();
        let op = BlurOperator::build(&p, &depth, &k, 10).unwrap();
        let (out, mask) = op.apply(&latent).unwrap();
        elapsed += started.elapsed();
        let (expected, valid) = oracle_blur(&latent, &depth, &k, &p, 10);
        for i in 0..64 * 64 {
            mask_ok &= mask.is_valid(i) == valid[i];
            if valid[i] {
                for ch in 0..3 {
                    worst = worst.max((out.data()[i * 3 + ch] - expected[i * 3 + ch]).abs());
                }
            }
        }
    }
    outcome(
        worst <= 1e-6 && mask_ok && elapsed < Duration::from_secs(10),
        format!("max abs error {worst:.2e}, masks agree {mask_ok}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let (h, w) = (rng.random_range(16..40), rng.random_range(16..40));
        let latent = random_image(h, w, 1, &mut rng);
        let y = random_image(h, w, 1, &mut rng);
        let depth = random_depth(h, w, &mut rng);
        let k = Intrinsics::centered(h, w);
        let p = sample_motion(SIGMA, SIGMA, 1000 + trial).unwrap();
        let op = BlurOperator::build(&p, &depth, &k, 10).unwrap();
        let (al, _) = op.apply(&latent).unwrap();
        let aty = op.apply_adjoint(&y).unwrap();
        let dot = |a: &Image, b: &Image| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let (lhs, rhs) = (dot(&al, &y), dot(&latent, &aty));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    outcome(worst <= 1e-6, format!("max relative gap {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut worst_ratio = 0.0f64;
    for _ in 0..1000 {
        let dir = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let theta = dir.normalize() * rng.random_range(1e-4..0.3);
        let exact = Rotation3::new(theta).into_inner();
        let gap = (small_rotation(&theta).unwrap() - exact).norm();
        let bound = theta.norm_squared();
        worst_ratio = worst_ratio.max(gap / bound);
        if gap > bound {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations, max gap/‖θ‖² {worst_ratio:.3}"))
}

fn criterion_4() -> Outcome {
    let params = EnergyParams::default();
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let inst = procedural_instance(48, SIGMA, SIGMA, 10, NOISE, 400 + trial).unwrap();
        let clean = inst.clean.to_gray();
        let blurry = synthesize(&clean, &inst.depth, &inst.intrinsics, &inst.true_pose, 10, NOISE, trial)
            .unwrap()
            .blurry;
        let mut rng = ChaCha8Rng::seed_from_u64(40 + trial);
        let theta: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
        let p = Pose6::new(theta, v).unwrap();
        let problem = PoseProblem::new(&clean, &blurry, &inst.depth, &inst.intrinsics, &params).unwrap();
        let analytic = problem.gradient(&p).unwrap();
        let mut numeric = nalgebra::Vector6::zeros();
        for j in 0..6 {
            let h = if j < 3 { 1e-5 } else { 1e-4 };
            let mut plus = p.to_vector();
            plus[j] += h;
            let mut minus = p.to_vector();
            minus[j] -= h;
            let e = |q: &nalgebra::Vector6<f64>| {
                total_energy(&clean, &blurry, &Pose6::from_vector(q).unwrap(), &inst.depth, &inst.intrinsics, &params)
                    .unwrap()
            };
            numeric[j] = (e(&plus) - e(&minus)) / (2.0 * h);
        }
        worst = worst.max((analytic - numeric).norm() / numeric.norm());
    }
    outcome(worst <= 1e-3, format!("max relative gradient error {worst:.2e}"))
}

fn perturbed_start(p: &Pose6, seed: u64) -> Pose6 {
    let signs = [1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
    let mut q = p.to_array();
    for (i, v) in q.iter_mut().enumerate() {
        *v *= 1.0 + 0.2 * signs[(i + seed as usize) % 6];
    }
    Pose6::new([q[0], q[1], q[2]], [q[3], q[4], q[5]]).unwrap()
}

fn criterion_5(set: &[SynthInstance]) -> Outcome {
    let params = EnergyParams::default();
    let mut epes = Vec::new();
    let mut slowest = Duration::ZERO;
    for inst in set {
        let started = Instant::now();
        let p0 = perturbed_start(&inst.true_pose, inst.seed);
        let (p, _) = solve_pose(&inst.clean, &inst.blurry, &inst.depth, &inst.intrinsics, &p0, &params).unwrap();
        slowest = slowest.max(started.elapsed());
        let flow = induced_flow(&p, &inst.depth, &inst.intrinsics).unwrap();
        epes.push(mean_endpoint_error(&flow, &inst.true_flow).unwrap());
    }
    let worst = epes.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < 0.5 && slowest < Duration::from_secs(30),
        format!("mean EPE per instance max {worst:.3} px, slowest solve {:.1} s", slowest.as_secs_f64()),
    )
}

/// Flow error and mean EPE of the better of `p` and `-p`; both blur the
/// image identically.
fn sign_free_flow_scores(p: &Pose6, inst: &SynthInstance) -> (f64, f64) {
    let score = |q: &Pose6| {
        let f: FlowField = induced_flow(q, &inst.depth, &inst.intrinsics).unwrap();
        (
            flow_error(&f, &inst.true_flow).unwrap(),
            mean_endpoint_error(&f, &inst.true_flow).unwrap(),
        )
    };
    let (a, b) = (score(p), score(&p.scaled(-1.0).unwrap()));
    if a.1 <= b.1 {
        a
    } else {
        b
    }
}

fn criterion_6(set: &[SynthInstance], results: &[DeblurResult], elapsed: Duration) -> Outcome {
    let mut gains = Vec::new();
    let mut errors = Vec::new();
    for (inst, r) in set.iter().zip(results) {
        gains.push(psnr(&r.latent, &inst.clean).unwrap() - psnr(&inst.blurry, &inst.clean).unwrap());
        errors.push(sign_free_flow_scores(&r.pose, inst).0);
    }
    let wins = gains.iter().filter(|&&g| g >= 2.0).count();
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let gains_text: Vec<String> = gains.iter().map(|g| format!("{g:.2}")).collect();
    outcome(
        wins >= 8 && mean_error < 40.0 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{wins}/10 with gain >= 2 dB [{}], mean flow error {mean_error:.1}%, {:.0} s",
            gains_text.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(results: &[DeblurResult]) -> Outcome {
    let mut worst = 0.0f64;
    let mut steps = 0;
    for r in results {
        for level in &r.levels {
            for w in level.energy_trace.windows(2) {
                steps += 1;
                worst = worst.max((w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    outcome(worst <= 1e-6, format!("{steps} accepted steps, largest relative rise {worst:.2e}"))
}

fn criterion_8(set: &[SynthInstance]) -> Outcome {
    let mut worst = 0.0f64;
    for inst in set {
        let op = BlurOperator::build(&inst.true_pose, &inst.depth, &inst.intrinsics, 10).unwrap();
        let (blurred, mask) = op.apply(&inst.clean).unwrap();
        let frames = render_frames(&inst.clean, &inst.true_pose, &inst.depth, &inst.intrinsics, 21).unwrap();
        for i in 0..blurred.data().len() {
            if !mask.is_valid(i / blurred.channels()) {
                continue;
            }
            let mean = frames.iter().map(|f| f.data()[i]).sum::<f64>() / frames.len() as f64;
            worst = worst.max((mean - blurred.data()[i]).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max abs gap {worst:.2e}"))
}

fn criterion_9() -> Outcome {
    let a = Image::constant(16, 16, 3, 0.5).unwrap();
    let b = Image::constant(16, 16, 3, 0.6).unwrap();
    let db = psnr(&a, &b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_image(32, 32, 3, &mut rng);
    let s = ssim(&x, &x).unwrap();
    let truth = FlowField::uniform(8, 8, [10.0, 0.0]).unwrap();
    let same = flow_error(&truth, &truth).unwrap();
    let all = flow_error(&FlowField::uniform(8, 8, [14.0, 0.0]).unwrap(), &truth).unwrap();
    let far = FlowField::uniform(8, 8, [100.0, 0.0]).unwrap();
    let saved = flow_error(&FlowField::uniform(8, 8, [103.5, 0.0]).unwrap(), &far).unwrap();
    outcome(
        (db - 20.0).abs() < 1e-9 && s == 1.0 && same == 0.0 && all == 100.0 && saved == 0.0,
        format!("psnr {db:.6} dB, ssim {s}, flow error {same}% / {all}% / {saved}%"),
    )
}

fn criterion_10() -> Outcome {
    let run = |dir: &std::path::Path| {
        let inst = procedural_instance(48, SIGMA, SIGMA, 10, NOISE, 10).unwrap();
        let r = deblur(&inst.blurry, &inst.depth, &inst.intrinsics, &EnergyParams::default()).unwrap();
        write_pose(&dir.join("pose.txt"), &r.pose).unwrap();
        write_png(&dir.join("latent.png"), &r.latent).unwrap();
        (
            std::fs::read(dir.join("pose.txt")).unwrap(),
            std::fs::read(dir.join("latent.png")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (run(a.path()), run(b.path()));
    outcome(
        first.0 == second.0 && first.1 == second.1,
        format!("pose files equal {}, latent images equal {}", first.0 == second.0, first.1 == second.1),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, o: Outcome| {
        all &= o.pass;
        println!("criterion {n:>2}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    let set = instances();
    report(5, criterion_5(&set));
    let started = Instant::now();
    let results: Vec<DeblurResult> = set
        .iter()
        .map(|inst| deblur(&inst.blurry, &inst.depth, &inst.intrinsics, &EnergyParams::default()).unwrap())
        .collect();
    let elapsed = started.elapsed();
    report(6, criterion_6(&set, &results, elapsed));
    report(7, criterion_7(&results));
    report(8, criterion_8(&set));
    report(9, criterion_9());
    report(10, criterion_10());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
