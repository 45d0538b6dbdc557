//! Shared fixtures for the pipeline benchmarks.

use unmix3d_core::hsi_data::{
    generate_gaussian_field_abundances, generate_synthetic_endmembers, synthesize_scene,
};
use unmix3d_core::{NoiseLevel, SyntheticScene};

/// A mid-sized noisy scene reused across benchmarks.
pub fn bench_scene(bands: usize, side: usize, materials: usize) -> SyntheticScene {
    let endmembers = generate_synthetic_endmembers(bands, materials, 11).expect("valid dims");
    let abundances =
        generate_gaussian_field_abundances(materials, side, side, 8.0, 12).expect("valid dims");
    synthesize_scene(&endmembers, &abundances, NoiseLevel::SnrDb(20.0), 13).expect("shapes agree")
}
