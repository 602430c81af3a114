//! Deterministic fixtures shared by the benchmarks.

use circuitforge::{Activation, GeomMlp, ImageSample, LayerSpec, SplitMix64};

/// Randomly initialised model with MNIST input/output and the given hidden
/// widths.
pub fn model(hidden: &[usize], seed: u64) -> GeomMlp {
    let mut widths = vec![784];
    widths.extend_from_slice(hidden);
    widths.push(10);
    let spec = LayerSpec::new(widths, 1.0).expect("valid widths");
    GeomMlp::init_uniform(spec, Activation::Silu, &mut SplitMix64::new(seed)).expect("valid spec")
}

/// Uniform-noise images in `[0, 1]` with cycling labels.
pub fn noise_images(n: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let pixels = (0..784).map(|_| rng.next_f64()).collect();
            ImageSample::new(pixels, (i % 10) as u8).expect("valid sample")
        })
        .collect()
}

/// `(clean, corrupted)` views over consecutive image pairs.
pub fn pairs(images: &[ImageSample]) -> Vec<(&[f64], &[f64])> {
    images
        .chunks_exact(2)
        .map(|c| (c[0].pixels.as_slice(), c[1].pixels.as_slice()))
        .collect()
}
