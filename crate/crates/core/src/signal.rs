//! Complex-vector and spectral primitives: ULA steering vectors, the unitary
//! DFT pair, maximum-ratio transmission and beamforming gain.

use std::f64::consts::PI;
use std::ops::{Deref, Index};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Fixed-length vector of complex entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector(Vec<Complex64>);

impl ComplexVector {
    pub fn new(entries: Vec<Complex64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::dim("complex vector must have positive length"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); len])
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::dim("real and imaginary parts differ in length"));
        }
        Self::new(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self(self.0.iter().map(|z| z * s).collect())
    }

    /// `self + other`, lengths must agree.
    pub fn add(&self, other: &ComplexVector) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "cannot add vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    /// Hermitian inner product `self^H other`.
    pub fn inner(&self, other: &ComplexVector) -> Result<Complex64> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "inner product of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a.conj() * b).sum())
    }
}

impl Index<usize> for ComplexVector {
    type Output = Complex64;

    fn index(&self, i: usize) -> &Complex64 {
        &self.0[i]
    }
}

/// Unit-norm constant-modulus transmit beam: every entry has magnitude `1/sqrt(N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamVector(ComplexVector);

impl BeamVector {
    /// Builds `w[n] = exp(j * phases[n]) / sqrt(N)`.
    pub fn from_phases(phases: &[f64]) -> Result<Self> {
        let amp = 1.0 / (phases.len() as f64).sqrt();
        let entries = phases.iter().map(|&p| Complex64::from_polar(amp, p)).collect();
        Ok(Self(ComplexVector::new(entries)?))
    }

    /// Keeps only the phase of every entry of `v`; zero entries take phase 0.
    pub fn phase_only(v: &ComplexVector) -> Self {
        let phases: Vec<f64> = v.as_slice().iter().map(|&z| phase(z)).collect();
        // `v` is non-empty by construction
        Self::from_phases(&phases).expect("non-empty vector")
    }

    pub fn as_vector(&self) -> &ComplexVector {
        &self.0
    }

    pub fn phases(&self) -> Vec<f64> {
        self.0.as_slice().iter().map(|&z| phase(z)).collect()
    }
}

impl Deref for BeamVector {
    type Target = ComplexVector;

    fn deref(&self) -> &ComplexVector {
        &self.0
    }
}

/// Uniform linear array description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    pub n_antennas: usize,
    /// Element spacing over carrier wavelength, `d / lambda`.
    pub spacing_ratio: f64,
}

impl ArrayGeometry {
    pub fn new(n_antennas: usize, spacing_ratio: f64) -> Result<Self> {
        if n_antennas < 2 {
            return Err(Error::config(format!("array needs at least 2 antennas, got {n_antennas}")));
        }
        if !(spacing_ratio.is_finite() && spacing_ratio > 0.0) {
            return Err(Error::config(format!("spacing ratio must be positive, got {spacing_ratio}")));
        }
        Ok(Self { n_antennas, spacing_ratio })
    }

    /// Half-wavelength ULA.
    pub fn half_wavelength(n_antennas: usize) -> Result<Self> {
        Self::new(n_antennas, 0.5)
    }
}

/// Phase in `(-pi, pi]`, with the phase of zero defined as 0.
pub fn phase(z: Complex64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let p = z.im.atan2(z.re);
    // atan2 returns -pi for (negative, -0.0); fold onto the closed end
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Array response toward azimuth `phi` (radians from broadside).
pub fn steering_vector(phi: f64, geom: &ArrayGeometry) -> Result<ComplexVector> {
    if !phi.is_finite() {
        return Err(Error::InvalidAngle(phi));
    }
    let n = geom.n_antennas;
    let amp = 1.0 / (n as f64).sqrt();
    let step = 2.0 * PI * geom.spacing_ratio * phi.sin();
    ComplexVector::new((0..n).map(|i| Complex64::from_polar(amp, i as f64 * step)).collect())
}

fn dft_impl(x: &ComplexVector, sign: f64) -> ComplexVector {
    let n = x.len();
    let scale = 1.0 / (n as f64).sqrt();
    let twiddle: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64))
        .collect();
    let out = (0..n)
        .map(|k| {
            let acc: Complex64 = x
                .as_slice()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * twiddle[(k * i) % n])
                .sum();
            acc * scale
        })
        .collect();
    ComplexVector(out)
}

/// Unitary DFT: `X[k] = (1/sqrt(N)) sum_n x[n] exp(-j 2 pi k n / N)`.
pub fn dft(x: &ComplexVector) -> ComplexVector {
    dft_impl(x, -1.0)
}

/// Inverse of [`dft`].
pub fn idft(x: &ComplexVector) -> ComplexVector {
    dft_impl(x, 1.0)
}

/// Maximum-ratio transmission beam: phase-aligned with `h`.
pub fn mrt_beamformer(h: &ComplexVector) -> BeamVector {
    BeamVector::phase_only(h)
}

/// `|h^H w|^2`.
pub fn beam_gain(h: &ComplexVector, w: &ComplexVector) -> Result<f64> {
    Ok(h.inner(w)?.norm_sqr())
}

/// Gain of `w` relative to the MRT beam of `h`, in dB.
pub fn normalized_gain_db(h: &ComplexVector, w: &ComplexVector) -> Result<f64> {
    let reference = beam_gain(h, &mrt_beamformer(h))?;
    if reference <= 0.0 {
        return Err(Error::DegenerateChannel);
    }
    let g = beam_gain(h, w)?;
    Ok(10.0 * (g / reference).log10())
}
