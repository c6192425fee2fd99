//! Input generators shared by the benchmarks.

use rand::Rng;
use soundloc::Raster;

pub fn random_frame(rng: &mut impl Rng, height: usize, width: usize) -> Raster {
    let data = (0..height * width * 3).map(|_| rng.gen::<f64>()).collect();
    Raster::new(height, width, 3, data).expect("consistent raster size")
}

pub fn random_wave(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
