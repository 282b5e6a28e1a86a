//! Fast invariant suite: diffusion math and the geometry oracles.

use nalgebra::Vector3;
use streetscape_core::diffusion::{cfg_combine, ddim_step, forward_diffuse, NoiseSchedule};
use streetscape_core::{ImageTensor, NoiseRng, Result, ScheduleKind, StyleToken};
use streetscape_sampler::impute_latent;
use streetscape_scene::photo::render_photo;
use streetscape_scene::warp::masked_psnr;
use streetscape_scene::world::{generate_world, sample_trajectory, WorldModel, WorldSpec};
use streetscape_scene::{raymarch_reference, render_gbuffer, warp_frame, CameraPose, CellClass, Intrinsics};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_owned(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).fold(0.0, f64::max)
}

/// Forward-process moments, DDIM inversion, guidance endpoints, imputation at
/// level 0 and the terminal noise level. `samples` scalar draws per level.
pub fn diffusion_checks(samples: usize, seed: u64) -> Result<Vec<Check>> {
    let sched = NoiseSchedule::build(1000, ScheduleKind::Cosine)?;
    let mut rng = NoiseRng::derived(seed, &[1]);
    let mut out = Vec::new();

    let x0 = 0.3;
    let mut worst = 0.0f64;
    for t in [1, 100, 500, 900, 1000] {
        let eps = rng.normal_tensor(1, 1, samples);
        let z = forward_diffuse(&ImageTensor::filled(1, 1, samples, x0 as f32), t, &eps, &sched)?;
        let n = samples as f64;
        let ab = sched.alpha_bar(t);
        let (mu, var) = (ab.sqrt() * x0, 1.0 - ab);
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let s2 = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let z_mean = (mean - mu).abs() / (var / n).sqrt();
        let z_var = (s2 - var).abs() / (var * (2.0 / (n - 1.0)).sqrt());
        worst = worst.max(z_mean).max(z_var);
    }
    out.push(Check::new(
        "forward moments",
        worst <= 3.0,
        format!("{samples} draws per level, worst deviation {worst:.2} standard errors (limit 3)"),
    ));

    let mut err = 0.0f64;
    for t in [20, 300, 700, 1000] {
        let x = rng.normal_tensor(3, 8, 8).map(|v| (v * 0.5).clamp(-1.0, 1.0));
        let eps = rng.normal_tensor(3, 8, 8);
        let z = forward_diffuse(&x, t, &eps, &sched)?;
        err = err.max(max_abs_diff(&ddim_step(&z, &eps, t, 0, &sched)?, &x));
        let mid = t / 2;
        err = err.max(max_abs_diff(&ddim_step(&z, &eps, t, mid, &sched)?, &forward_diffuse(&x, mid, &eps, &sched)?));
    }
    out.push(Check::new("ddim round trip", err <= 1e-5, format!("max error {err:.2e} (limit 1e-5)")));

    let (u, c) = (rng.normal_tensor(3, 4, 4), rng.normal_tensor(3, 4, 4));
    let ok = cfg_combine(&u, &c, 0.0)?.bit_eq(&u) && cfg_combine(&u, &c, 1.0)?.bit_eq(&c);
    out.push(Check::new("guidance endpoints", ok, "scale 0 gives the null branch, 1 the conditional".into()));

    let frame = rng.normal_tensor(3, 8, 8).map(|v| v.clamp(-1.0, 1.0));
    let ok = impute_latent(&frame, 0, &sched, &mut rng)?.bit_eq(&frame);
    out.push(Check::new("imputation at t = 0", ok, "known frame reproduced bit for bit".into()));

    let ab_t = sched.alpha_bar(sched.steps());
    let monotone = sched.alpha_bars().windows(2).all(|w| w[1] < w[0]);
    out.push(Check::new(
        "schedule",
        monotone && ab_t <= 1e-3,
        format!("alpha_bar strictly decreasing, alpha_bar[T] = {ab_t:.2e}"),
    ));
    Ok(out)
}

/// Random camera over a non-building cell, at street or rooftop height.
pub fn random_camera(world: &WorldModel, rng: &mut NoiseRng, intrinsics: Intrinsics) -> CameraPose {
    let l = &world.layout;
    loop {
        let x = rng.uniform_range(0.5, l.extent().0 - 0.5);
        let y = rng.uniform_range(0.5, l.extent().1 - 0.5);
        let Some((c, r)) = l.cell_of(x, y) else { continue };
        if l.class_at(c, r) == CellClass::Building {
            continue;
        }
        let z = if rng.bernoulli(0.7) { 2.0 } else { rng.uniform_range(2.0, 40.0) };
        let yaw = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
        let pitch = rng.uniform_range(-0.6, 0.3);
        return CameraPose::new(Vector3::new(x, y, z), yaw, pitch, intrinsics);
    }
}

fn oracle_world(seed: u64) -> Result<WorldModel> {
    let spec =
        WorldSpec { width: 64, height: 64, road_fraction: 0.3 + 0.03 * (seed % 8) as f64, ..WorldSpec::default() };
    generate_world(seed, &spec)
}

/// Exact traversal against ray marching over `worlds × cameras` views, and
/// forward warping against ground-truth renders over `pairs` trajectory steps.
pub fn geometry_checks(worlds: u64, cameras: usize, pairs: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = NoiseRng::derived(seed, &[2]);
    let (mut agree, mut mae, mut n) = (0.0, 0.0, 0);
    for w in 0..worlds {
        let world = oracle_world(w)?;
        for _ in 0..cameras {
            let cam = random_camera(&world, &mut rng, Intrinsics::new(60.0, 32, 32));
            let exact = render_gbuffer(&world.layout, &cam)?;
            let marched = raymarch_reference(&world.layout, &cam, 0.05)?;
            agree += exact.semantic_agreement(&marched);
            mae += exact.disparity_mae(&marched);
            n += 1;
        }
    }
    let (agree, mae) = (agree / n as f64, mae / n as f64);
    let mut out = vec![
        Check::new(
            "raymarch semantics",
            agree >= 0.99,
            format!("{n} views, agreement {:.4}% (limit 99%)", 100.0 * agree),
        ),
        Check::new("raymarch disparity", mae <= 1e-2, format!("{n} views, MAE {mae:.2e} (limit 1e-2)")),
    ];

    let world = generate_world(derive(seed, 3), &WorldSpec::default())?;
    let style = StyleToken::new(0, 4)?;
    let (mut good, mut total, mut traj) = (0, 0, 0);
    let mut worst = f64::INFINITY;
    while total < pairs {
        let poses = sample_trajectory(&world, derive(seed, 100 + traj), 11, Intrinsics::default())?.poses;
        traj += 1;
        // Each pose is rendered once; a pair's target is the next pair's source.
        let mut src = render_photo(&world, &poses[0], style)?;
        for pair in poses.windows(2).take(pairs - total) {
            let (a, b) = (&pair[0], &pair[1]);
            let dst = render_photo(&world, b, style)?;
            let warped = warp_frame(&src, &render_gbuffer(&world.layout, a)?, a, b)?;
            total += 1;
            // A pair with no valid pixel cannot be scored and counts as a miss.
            if let Some(p) = masked_psnr(&warped.image, &dst, &warped.valid) {
                worst = worst.min(p);
                good += (p >= 25.0) as usize;
            }
            src = dst;
        }
    }
    let frac = good as f64 / total as f64;
    out.push(Check::new(
        "warp vs render",
        frac >= 0.9,
        format!("{good}/{total} pairs at >= 25 dB (limit 90%), worst {worst:.1} dB"),
    ));
    Ok(out)
}

fn derive(seed: u64, tag: u64) -> u64 {
    streetscape_core::derive_seed(seed, &[tag])
}

/// The suite run by the `selftest` command.
pub fn run_selftest() -> Result<Vec<Check>> {
    let mut checks = diffusion_checks(10_000, 0)?;
    checks.extend(geometry_checks(2, 5, 10, 0)?);
    Ok(checks)
}
