//! Cube/matrix data types, reshaping, 3D Gaussian filtering, synthetic-scene
//! generation, and file I/O.
//!
//! A hyperspectral cube is stored band-major as an `L x H x W` array of `f64`.
//! The pixel-matrix view flattens the two spatial axes in row-major order, so
//! column `j = row * W + col` holds the spectrum of pixel `(row, col)`. All
//! floating data in this module is computed in 64-bit; the on-disk cube format
//! stores 32-bit floats and the narrowing is explicit in [`io::store_cube`].

mod gaussian;
mod io;
mod synth;

pub use gaussian::gaussian_filter_3d;
pub use io::{
    load_abundance_pgm, load_cube, load_endmember_csv, store_abundance_pgm, store_cube,
    store_endmember_csv,
};
pub use synth::{
    add_noise_at_snr, generate_gaussian_field_abundances, generate_synthetic_endmembers,
    mix, synthesize_scene,
};

use crate::error::{Result, UnmixError};
use ndarray::{Array2, Array3};

/// Tolerance on the abundance sum-to-one constraint.
pub const ASC_TOLERANCE: f64 = 1e-6;

/// A 3D radiance/reflectance cube: `L` spectral bands by `H x W` spatial pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    values: Array3<f64>,
}

impl HsiCube {
    /// Wraps an `L x H x W` array. All values must be finite and every axis
    /// must be nonempty.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (l, h, w) = values.dim();
        if l == 0 || h == 0 || w == 0 {
            return Err(UnmixError::InvalidInput(format!(
                "cube axes must be positive, got {l}x{h}x{w}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(UnmixError::InvalidInput(
                "cube contains non-finite values".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn bands(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// The `L x N` matrix view of a cube, `N = H * W`, one pixel spectrum per column.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    values: Array2<f64>,
}

impl PixelMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (l, n) = values.dim();
        if l == 0 || n == 0 {
            return Err(UnmixError::InvalidInput(format!(
                "pixel matrix must be nonempty, got {l}x{n}"
            )));
        }
        Ok(Self { values })
    }

    pub fn bands(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_pixels(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Per-material abundance maps: `P x H x W`, nonnegative, summing to one per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMaps {
    values: Array3<f64>,
}

impl AbundanceMaps {
    /// Validates the abundance non-negativity constraint exactly and the
    /// sum-to-one constraint within [`ASC_TOLERANCE`].
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (p, h, w) = values.dim();
        if p == 0 || h == 0 || w == 0 {
            return Err(UnmixError::InvalidInput(format!(
                "abundance axes must be positive, got {p}x{h}x{w}"
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(UnmixError::InvalidInput(
                "abundances must be finite and nonnegative".into(),
            ));
        }
        for i in 0..h {
            for j in 0..w {
                let sum: f64 = (0..p).map(|m| values[[m, i, j]]).sum();
                if (sum - 1.0).abs() > ASC_TOLERANCE {
                    return Err(UnmixError::InvalidInput(format!(
                        "abundances at pixel ({i},{j}) sum to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn materials(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }
}

/// An `L x P` matrix of endmember spectra, one material per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix {
    values: Array2<f64>,
}

impl EndmemberMatrix {
    /// Wraps an `L x P` matrix. Values must be finite and no column may be all zero.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (l, p) = values.dim();
        if l == 0 || p == 0 {
            return Err(UnmixError::InvalidInput(format!(
                "endmember matrix must be nonempty, got {l}x{p}"
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(UnmixError::InvalidInput(
                "endmember matrix contains non-finite values".into(),
            ));
        }
        for c in 0..p {
            if values.column(c).iter().all(|v| *v == 0.0) {
                return Err(UnmixError::InvalidInput(format!(
                    "endmember column {c} is all zero"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn bands(&self) -> usize {
        self.values.dim().0
    }

    pub fn materials(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Noise level of a synthetic scene: either noiseless or a target SNR in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    Noiseless,
    SnrDb(f64),
}

impl NoiseLevel {
    /// Parses `"noiseless"` or a decibel value.
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("noiseless") {
            return Ok(NoiseLevel::Noiseless);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(NoiseLevel::SnrDb(v)),
            _ => Err(UnmixError::InvalidInput(format!(
                "noise level must be a finite dB value or \"noiseless\", got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for NoiseLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseLevel::Noiseless => write!(f, "noiseless"),
            NoiseLevel::SnrDb(v) => write!(f, "{v}"),
        }
    }
}

/// A generated scene together with the ground truth it was mixed from.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cube: HsiCube,
    pub gt_endmembers: EndmemberMatrix,
    pub gt_abundances: AbundanceMaps,
    pub snr_db: NoiseLevel,
    pub seed: u64,
}

/// Flattens a cube to its `L x N` pixel-matrix view; column `j = row * W + col`.
pub fn reshape_to_matrix(cube: &HsiCube) -> PixelMatrix {
    let (l, h, w) = cube.values.dim();
    // The cube is stored in standard (row-major) layout, so collapsing the two
    // spatial axes is exactly the documented column ordering.
    let values = cube
        .values
        .to_owned()
        .into_shape_with_order((l, h * w))
        .expect("L*H*W elements reshape to L*(H*W)");
    PixelMatrix { values }
}

/// Inverse of [`reshape_to_matrix`]; fails if `N != H * W`.
pub fn reshape_to_cube(matrix: &PixelMatrix, height: usize, width: usize) -> Result<HsiCube> {
    let (l, n) = matrix.values.dim();
    if n != height * width {
        return Err(UnmixError::DimensionMismatch(format!(
            "pixel count {n} does not factor as {height}x{width}"
        )));
    }
    let values = matrix
        .values
        .to_owned()
        .into_shape_with_order((l, height, width))
        .expect("checked N = H*W");
    HsiCube::new(values)
}
