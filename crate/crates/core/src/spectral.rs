//! Two-dimensional Fourier transforms and the amplitude/phase features fed to
//! the frequency branch of the hybrid classifier.
//!
//! Forward transforms are unnormalized (the DC bin is the pixel sum); the
//! inverse divides by `H·W`. Spectra come out in natural layout with DC at
//! `(0, 0)`; feature maps are centered so DC sits at `(H/2, W/2)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::data::ImageTensor;
use crate::error::{Error, Result};

/// Row-major real grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{height}x{width} = {} values", height * width),
                received: format!("{} values", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    /// Circular shift by `(dr, dc)`: `out[r, c] = self[r - dr, c - dc]`.
    pub fn roll(&self, dr: usize, dc: usize) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(h, w, |r, c| self.at((r + h - dr % h) % h, (c + w - dc % w) % w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumLayout {
    /// DC at `(0, 0)`.
    Natural,
    /// DC at `(H/2, W/2)` (integer division).
    Centered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub height: usize,
    pub width: usize,
    pub values: Vec<Complex64>,
    pub layout: SpectrumLayout,
}

impl ComplexSpectrum {
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.values[u * self.width + v]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn centered(&self) -> Self {
        match self.layout {
            SpectrumLayout::Centered => self.clone(),
            SpectrumLayout::Natural => Self {
                values: shift(&self.values, self.height, self.width, true),
                layout: SpectrumLayout::Centered,
                ..*self
            },
        }
    }

    pub fn uncentered(&self) -> Self {
        match self.layout {
            SpectrumLayout::Natural => self.clone(),
            SpectrumLayout::Centered => Self {
                values: shift(&self.values, self.height, self.width, false),
                layout: SpectrumLayout::Natural,
                ..*self
            },
        }
    }
}

/// Moves DC between `(0, 0)` and `(H/2, W/2)`; `forward` centers, otherwise
/// undoes the centering. The two differ for odd sizes.
fn shift<T: Copy>(values: &[T], h: usize, w: usize, forward: bool) -> Vec<T> {
    let (sr, sc) = (h / 2, w / 2);
    let mut out = values.to_vec();
    for r in 0..h {
        for c in 0..w {
            let (dst_r, dst_c) = if forward {
                ((r + sr) % h, (c + sc) % w)
            } else {
                ((r + h - sr) % h, (c + w - sc) % w)
            };
            out[dst_r * w + dst_c] = values[r * w + c];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    /// `ln(1 + |X|)`, centered.
    pub log_amplitude: RealGrid,
    /// `atan2(Im X, Re X)` in `[-π, π]`, centered.
    pub phase: RealGrid,
    pub source_size: (usize, usize),
}

/// Two-channel frequency-branch input: standardized log-amplitude and phase/π.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyInput {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl FrequencyInput {
    pub const CHANNELS: usize = 2;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; 2 * height * width],
            height,
            width,
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

fn transform_2d(values: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(w, direction);
    for row in values.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = values[r * w + c];
        }
        col_fft.process(&mut column);
        for r in 0..h {
            values[r * w + c] = column[r];
        }
    }
}

/// Unnormalized forward 2-D DFT in natural layout.
pub fn fft2(image: &RealGrid) -> Result<ComplexSpectrum> {
    let (h, w) = (image.height, image.width);
    if h < 2 || w < 2 {
        return Err(Error::Shape {
            expected: "at least 2x2".into(),
            received: format!("{h}x{w}"),
        });
    }
    if let Some(i) = image.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("pixel ({}, {})", i / w, i % w)));
    }
    let mut values: Vec<Complex64> = image.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut values, h, w, FftDirection::Forward);
    Ok(ComplexSpectrum {
        height: h,
        width: w,
        values,
        layout: SpectrumLayout::Natural,
    })
}

/// Inverse of [`fft2`]. The imaginary residue is discarded.
pub fn inverse_fft2(spectrum: &ComplexSpectrum) -> Result<RealGrid> {
    if spectrum.layout != SpectrumLayout::Natural {
        return Err(Error::Wiring(
            "inverse_fft2 needs a natural-layout spectrum; uncenter it first".into(),
        ));
    }
    let (h, w) = (spectrum.height, spectrum.width);
    let mut values = spectrum.values.clone();
    transform_2d(&mut values, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    Ok(RealGrid {
        height: h,
        width: w,
        data: values.iter().map(|z| z.re * scale).collect(),
    })
}

pub fn amplitude_phase(spectrum: &ComplexSpectrum) -> Result<SpectralFeatures> {
    if spectrum.layout != SpectrumLayout::Natural {
        return Err(Error::Wiring("amplitude_phase expects a natural-layout spectrum".into()));
    }
    let centered = spectrum.centered();
    let (h, w) = (spectrum.height, spectrum.width);
    let log_amplitude = centered.values.iter().map(|z| z.norm().ln_1p()).collect();
    let phase = centered.values.iter().map(|z| z.im.atan2(z.re)).collect();
    Ok(SpectralFeatures {
        log_amplitude: RealGrid {
            height: h,
            width: w,
            data: log_amplitude,
        },
        phase: RealGrid {
            height: h,
            width: w,
            data: phase,
        },
        source_size: (h, w),
    })
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(image: &ImageTensor) -> RealGrid {
    let n = image.size;
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    RealGrid {
        height: n,
        width: n,
        data: (0..n * n)
            .map(|i| {
                LUMA_WEIGHTS[0] * r[i] as f64
                    + LUMA_WEIGHTS[1] * g[i] as f64
                    + LUMA_WEIGHTS[2] * b[i] as f64
            })
            .collect(),
    }
}

/// Builds the frequency-branch input for a preprocessed image.
pub fn spectral_stack(image: &ImageTensor) -> Result<FrequencyInput> {
    let gray = luminance(image);
    let spectrum = fft2(&gray).map_err(|e| match e {
        Error::NonFinite(at) => Error::NonFinite(format!("sample '{}' at {at}", image.provenance.sample_id)),
        other => other,
    })?;
    let feats = amplitude_phase(&spectrum)?;
    Ok(stack_features(&feats))
}

pub fn stack_features(feats: &SpectralFeatures) -> FrequencyInput {
    let amp = &feats.log_amplitude.data;
    let n = amp.len() as f64;
    let mean = amp.iter().sum::<f64>() / n;
    let var = amp.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut data = Vec::with_capacity(2 * amp.len());
    if std > 0.0 && std.is_finite() {
        data.extend(amp.iter().map(|a| ((a - mean) / std) as f32));
    } else {
        data.extend(std::iter::repeat_n(0.0f32, amp.len()));
    }
    data.extend(feats.phase.data.iter().map(|p| (p / PI).clamp(-1.0, 1.0) as f32));
    FrequencyInput {
        data,
        height: feats.log_amplitude.height,
        width: feats.log_amplitude.width,
    }
}

/// Min-max scales a grid to 8-bit grayscale. A flat grid maps to zeros.
pub fn to_gray8(grid: &RealGrid) -> image::GrayImage {
    let lo = grid.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    image::GrayImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        let v = grid.at(y as usize, x as usize);
        let scaled = if range > 0.0 { (v - lo) / range * 255.0 } else { 0.0 };
        image::Luma([scaled.round().clamp(0.0, 255.0) as u8])
    })
}
