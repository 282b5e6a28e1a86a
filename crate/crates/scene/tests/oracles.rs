use nalgebra::Vector3;
use streetscape_core::{NoiseRng, StyleToken};
use streetscape_scene::photo::render_photo;
use streetscape_scene::warp::masked_psnr;
use streetscape_scene::world::{generate_world, sample_trajectory, WorldModel, WorldSpec};
use streetscape_scene::{raymarch_reference, render_gbuffer, warp_frame, CameraPose, CellClass, Intrinsics};

fn random_world(seed: u64) -> WorldModel {
    let spec = WorldSpec { width: 64, height: 64, road_fraction: 0.3 + 0.03 * seed as f64, ..WorldSpec::default() };
    generate_world(seed, &spec).unwrap()
}

/// Random camera over a non-building cell, at street or rooftop height.
fn random_camera(world: &WorldModel, rng: &mut NoiseRng) -> CameraPose {
    let l = &world.layout;
    loop {
        let x = rng.uniform_range(0.5, l.extent().0 - 0.5);
        let y = rng.uniform_range(0.5, l.extent().1 - 0.5);
        let (c, r) = l.cell_of(x, y).unwrap();
        if l.class_at(c, r) == CellClass::Building {
            continue;
        }
        let z = if rng.bernoulli(0.7) { 2.0 } else { rng.uniform_range(2.0, 40.0) };
        let yaw = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
        let pitch = rng.uniform_range(-0.6, 0.3);
        return CameraPose::new(Vector3::new(x, y, z), yaw, pitch, Intrinsics::new(60.0, 32, 32));
    }
}

#[test]
fn dda_agrees_with_ray_marching() {
    let mut rng = NoiseRng::new(77);
    let (mut agree, mut mae, mut n) = (0.0, 0.0, 0);
    for seed in 0..5 {
        let world = random_world(seed);
        for _ in 0..20 {
            let cam = random_camera(&world, &mut rng);
            let exact = render_gbuffer(&world.layout, &cam).unwrap();
            let marched = raymarch_reference(&world.layout, &cam, 0.05).unwrap();
            agree += exact.semantic_agreement(&marched);
            mae += exact.disparity_mae(&marched);
            n += 1;
        }
    }
    let (agree, mae) = (agree / n as f64, mae / n as f64);
    assert!(agree >= 0.99, "semantic agreement {agree}");
    assert!(mae <= 1e-2, "disparity MAE {mae}");
}

#[test]
fn halving_the_march_step_does_not_hurt() {
    let mut rng = NoiseRng::new(5);
    let world = random_world(2);
    let (mut coarse, mut fine) = (0.0, 0.0);
    for _ in 0..10 {
        let cam = random_camera(&world, &mut rng);
        let exact = render_gbuffer(&world.layout, &cam).unwrap();
        coarse += exact.semantic_agreement(&raymarch_reference(&world.layout, &cam, 0.05).unwrap());
        fine += exact.semantic_agreement(&raymarch_reference(&world.layout, &cam, 0.025).unwrap());
    }
    assert!(fine >= coarse, "{fine} < {coarse}");
}

#[test]
fn warped_photo_matches_render_at_nearby_pose() {
    let world = generate_world(3, &WorldSpec::default()).unwrap();
    let style = StyleToken::new(0, 4).unwrap();
    let mut worst = f64::INFINITY;
    for seed in 0..6 {
        let traj = sample_trajectory(&world, seed, 6, Intrinsics::default()).unwrap();
        for pair in traj.poses.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert!((a.position - b.position).norm() <= 2.0 + 1e-9);
            let src = render_photo(&world, a, style).unwrap();
            let dst = render_photo(&world, b, style).unwrap();
            let g = render_gbuffer(&world.layout, a).unwrap();
            let warped = warp_frame(&src, &g, a, b).unwrap();
            if let Some(psnr) = masked_psnr(&warped.image, &dst, &warped.valid) {
                worst = worst.min(psnr);
            }
        }
    }
    assert!(worst >= 25.0, "worst PSNR {worst} dB");
}
