//! Two-dimensional FFT on power-of-two grids, row-major with rows of
//! length `nx`. Forward transform is unnormalized; the inverse divides by
//! `nx·ny`.

use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

fn check_dims(nx: usize, ny: usize, len: usize) -> Result<()> {
    if !nx.is_power_of_two() || !ny.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "FFT grid must be a power of two in each axis, got {nx}x{ny}"
        )));
    }
    if len != nx * ny {
        return Err(Error::Shape(format!("{len} samples for a {nx}x{ny} grid")));
    }
    Ok(())
}

fn transform(nx: usize, ny: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
    };
    row_fft.process(data);
    let mut column = vec![Complex64::new(0.0, 0.0); ny];
    for i in 0..nx {
        for j in 0..ny {
            column[j] = data[j * nx + i];
        }
        col_fft.process(&mut column);
        for j in 0..ny {
            data[j * nx + i] = column[j];
        }
    }
}

pub fn fft2(nx: usize, ny: usize, values: &[f64]) -> Result<Vec<Complex64>> {
    check_dims(nx, ny, values.len())?;
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(nx, ny, &mut data, false);
    Ok(data)
}

pub fn fft2_complex(nx: usize, ny: usize, values: &[Complex64]) -> Result<Vec<Complex64>> {
    check_dims(nx, ny, values.len())?;
    let mut data = values.to_vec();
    transform(nx, ny, &mut data, false);
    Ok(data)
}

/// Inverse transform, returning the full complex result.
pub fn ifft2_complex(nx: usize, ny: usize, spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    check_dims(nx, ny, spectrum.len())?;
    let mut data = spectrum.to_vec();
    transform(nx, ny, &mut data, true);
    let scale = 1.0 / (nx * ny) as f64;
    data.iter_mut().for_each(|c| *c *= scale);
    Ok(data)
}

/// Inverse transform keeping the real part.
pub fn ifft2(nx: usize, ny: usize, spectrum: &[Complex64]) -> Result<Vec<f64>> {
    Ok(ifft2_complex(nx, ny, spectrum)?
        .into_iter()
        .map(|c| c.re)
        .collect())
}

/// Signed integer wavenumber for FFT index `i` on an axis of length `n`
/// (`0, 1, …, n/2, -n/2+1, …, -1`). The Nyquist index maps to `+n/2`.
#[inline]
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
