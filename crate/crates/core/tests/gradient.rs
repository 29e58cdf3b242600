mod common;

use common::{finite_difference_grads, grad_close, random_image, random_splat};
use pgsvc::raster::{Rasterizer, Target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(seed: u64, target: Target, count: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splats: Vec<_> = (0..count).map(|_| random_splat(&mut rng)).collect();
    let up = random_image(target.width, target.height, &mut rng);
    let analytic = Rasterizer::exact().backward(&splats, target, &up).unwrap();
    let numeric = finite_difference_grads(&splats, target, &up);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (k, (&av, &nv)) in a.to_array().iter().zip(n).enumerate() {
            assert!(
                grad_close(av as f64, nv, 1e-4, 1e-6),
                "seed {seed} splat {i} param {k}: {av} vs {nv}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_at_native_scale() {
    for seed in 0..5 {
        check(seed, Target::new(16, 16), 6);
    }
}

#[test]
fn gradients_match_finite_differences_on_downscaled_levels() {
    for seed in 10..14 {
        check(seed, Target::scaled(12, 9, 16), 5);
    }
}

#[test]
fn gradients_match_on_non_square_canvas() {
    check(20, Target::new(23, 14), 8);
}
