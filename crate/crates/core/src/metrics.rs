//! Structural similarity metrics: CW-SSIM on à trous and DWT subbands,
//! single-scale SSIM and PSNR.
//!
//! Complex coefficients come from filtering each full-resolution subband with
//! a quadrature pair of oriented Gabor taps (5×5, σ = 1, carrier π/2 across
//! the orientation), dilated by `2^(s-1)` at scale `s`. The even tap is made
//! zero-mean. Orientation θ names the direction of the structure the pair
//! responds to: 90° picks up vertical lines.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::wavelet::{dwt2_forward, mirror_index, starlet_decompose};

const GABOR_RADIUS: isize = 2;
const GABOR_SIGMA: f64 = 1.0;
const GABOR_FREQ: f64 = PI / 2.0;
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexCoeffMap {
    pub re: Image,
    pub im: Image,
    /// 1-based scale.
    pub scale: usize,
    pub orientation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwSsimParams {
    pub scales: usize,
    /// Evenly spaced over `[0°, 180°)`.
    pub orientations: usize,
    /// Odd side length of the sliding window.
    pub window: usize,
    /// Stabilizer, relative to the mean coefficient energy of each subband.
    pub k: f64,
}

impl Default for CwSsimParams {
    fn default() -> Self {
        Self {
            scales: 3,
            orientations: 4,
            window: 7,
            k: 1e-8,
        }
    }
}

impl CwSsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Parameter(format!(
                "window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.k > 0.0) {
            return Err(Error::Parameter("K must be positive".into()));
        }
        if self.orientations == 0 || self.scales == 0 {
            return Err(Error::Parameter("scales and orientations must be positive".into()));
        }
        Ok(())
    }

    pub fn orientation_degrees(&self, o: usize) -> f64 {
        180.0 * o as f64 / self.orientations as f64
    }
}

/// Even/odd taps for orientation `theta` (radians), row-major `5×5`.
pub fn quadrature_taps(theta: f64) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = (theta.sin(), -theta.cos());
    let mut even = Vec::new();
    let mut odd = Vec::new();
    let mut gauss = Vec::new();
    for dy in -GABOR_RADIUS..=GABOR_RADIUS {
        for dx in -GABOR_RADIUS..=GABOR_RADIUS {
            let (fx, fy) = (dx as f64, dy as f64);
            let g = (-(fx * fx + fy * fy) / (2.0 * GABOR_SIGMA * GABOR_SIGMA)).exp();
            let u = nx * fx + ny * fy;
            gauss.push(g);
            even.push(g * (GABOR_FREQ * u).cos());
            odd.push(g * (GABOR_FREQ * u).sin());
        }
    }
    let dc = even.iter().sum::<f64>() / gauss.iter().sum::<f64>();
    for (e, g) in even.iter_mut().zip(&gauss) {
        *e -= dc * g;
    }
    (even, odd)
}

/// Dilated 2D correlation with mirrored borders.
fn filter2d(img: &Image, taps: &[f64], dilation: usize) -> Image {
    let (w, h) = img.dims();
    let side = (2 * GABOR_RADIUS + 1) as usize;
    let d = dilation as isize;
    let mut out = vec![0.0; w * h];
    par::for_each_row(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (ty, tap_row) in taps.chunks_exact(side).enumerate() {
                let sy = mirror_index(y as isize + (ty as isize - GABOR_RADIUS) * d, h);
                let src = img.row(sy);
                for (tx, &tap) in tap_row.iter().enumerate() {
                    let sx = mirror_index(x as isize + (tx as isize - GABOR_RADIUS) * d, w);
                    acc += tap * src[sx];
                }
            }
            *o = acc;
        }
    });
    Image::from_parts(w, h, out)
}

fn oriented_maps(subbands: &[Image], p: &CwSsimParams) -> Vec<ComplexCoeffMap> {
    let taps: Vec<_> = (0..p.orientations)
        .map(|o| quadrature_taps(p.orientation_degrees(o).to_radians()))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..subbands.len())
        .flat_map(|s| (0..p.orientations).map(move |o| (s, o)))
        .collect();
    par::map(&jobs, |&(s, o)| {
        let dilation = 1 << s;
        ComplexCoeffMap {
            re: filter2d(&subbands[s], &taps[o].0, dilation),
            im: filter2d(&subbands[s], &taps[o].1, dilation),
            scale: s + 1,
            orientation: o,
        }
    })
}

/// Complex coefficients of the first `p.scales` à trous planes.
pub fn complex_analysis(img: &Image, p: &CwSsimParams) -> Result<Vec<ComplexCoeffMap>> {
    p.validate()?;
    let pyr = starlet_decompose(img, p.scales)?;
    Ok(oriented_maps(pyr.planes(), p))
}

/// Complex coefficients of Haar detail bands: at level `s` the sum
/// `LH + HL + HH` is upsampled by zero-order hold to full resolution, then
/// filtered exactly like the à trous planes.
pub fn dwt_complex_analysis(img: &Image, p: &CwSsimParams) -> Result<Vec<ComplexCoeffMap>> {
    p.validate()?;
    let coeffs = dwt2_forward(img, p.scales)?;
    let (w, h) = img.dims();
    let bands: Vec<Image> = coeffs
        .levels
        .iter()
        .enumerate()
        .map(|(s, lvl)| {
            let detail = lvl.lh.add(&lvl.hl).add(&lvl.hh);
            let f = 1 << (s + 1);
            Image::from_parts(w, h, (0..w * h).map(|i| detail.get(i % w / f, i / w / f)).collect())
        })
        .collect();
    Ok(oriented_maps(&bands, p))
}

/// Box sums over valid `win×win` windows, computed directly per row then column.
fn window_sums(field: &[f64], w: usize, h: usize, win: usize) -> Vec<f64> {
    let (ow, oh) = (w + 1 - win, h + 1 - win);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &field[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = src[x..x + win].iter().sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (y..y + win).map(|r| rows[r * ow + x]).sum();
        }
    }
    out
}

fn effective_window(window: usize, w: usize, h: usize) -> usize {
    window.min(w).min(h)
}

fn cw_ssim_maps(a: &[ComplexCoeffMap], b: &[ComplexCoeffMap], p: &CwSsimParams) -> f64 {
    let (w, h) = a[0].re.dims();
    let win = effective_window(p.window, w, h);
    let per_band: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(ca, cb)| {
            let (ar, ai, br, bi) = (ca.re.pixels(), ca.im.pixels(), cb.re.pixels(), cb.im.pixels());
            let n = ar.len();
            let mut cross_re = vec![0.0; n];
            let mut cross_im = vec![0.0; n];
            let mut ea = vec![0.0; n];
            let mut eb = vec![0.0; n];
            for i in 0..n {
                cross_re[i] = ar[i] * br[i] + ai[i] * bi[i];
                cross_im[i] = ai[i] * br[i] - ar[i] * bi[i];
                ea[i] = ar[i] * ar[i] + ai[i] * ai[i];
                eb[i] = br[i] * br[i] + bi[i] * bi[i];
            }
            let energy = (ea.iter().sum::<f64>() + eb.iter().sum::<f64>()) / (2 * n) as f64;
            if energy == 0.0 {
                return 1.0;
            }
            let k = p.k * energy;
            let (sr, si) = (window_sums(&cross_re, w, h, win), window_sums(&cross_im, w, h, win));
            let (sa, sb) = (window_sums(&ea, w, h, win), window_sums(&eb, w, h, win));
            let total: f64 = (0..sr.len())
                .map(|i| (2.0 * sr[i].hypot(si[i]) + k) / (sa[i] + sb[i] + k))
                .sum();
            total / sr.len() as f64
        })
        .collect();
    per_band.iter().sum::<f64>() / per_band.len() as f64
}

/// CW-SSIM over à trous subbands, in `[0, 1]`.
pub fn cw_ssim(x: &Image, y: &Image, p: &CwSsimParams) -> Result<f64> {
    x.check_same_dims(y, "cw_ssim operands")?;
    Ok(cw_ssim_maps(&complex_analysis(x, p)?, &complex_analysis(y, p)?, p))
}

/// CW-SSIM over upsampled DWT detail bands.
pub fn cw_ssim_dwt(x: &Image, y: &Image, p: &CwSsimParams) -> Result<f64> {
    x.check_same_dims(y, "cw_ssim operands")?;
    Ok(cw_ssim_maps(&dwt_complex_analysis(x, p)?, &dwt_complex_analysis(y, p)?, p))
}

/// Single-scale SSIM with a uniform `7×7` window (shrunk to fit small
/// images), `C1 = 0.01²`, `C2 = 0.03²`, averaged over valid windows.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.check_same_dims(y, "ssim operands")?;
    let (w, h) = x.dims();
    let win = effective_window(7, w, h);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (xs, ys) = (x.pixels(), y.pixels());
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..xs.len()).map(f).collect() };
    let sx = window_sums(xs, w, h, win);
    let sy = window_sums(ys, w, h, win);
    let sxx = window_sums(&prod(&|i| xs[i] * xs[i]), w, h, win);
    let syy = window_sums(&prod(&|i| ys[i] * ys[i]), w, h, win);
    let sxy = window_sums(&prod(&|i| xs[i] * ys[i]), w, h, win);
    let n = (win * win) as f64;
    let total: f64 = (0..sx.len())
        .map(|i| {
            let (mx, my) = (sx[i] / n, sy[i] / n);
            let vx = sxx[i] / n - mx * mx;
            let vy = syy[i] / n - my * my;
            let cov = sxy[i] / n - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / sx.len() as f64)
}

/// Peak signal-to-noise ratio in dB for a `[0, 1]` range; infinite for identical images.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    x.check_same_dims(y, "psnr operands")?;
    let mse = x.rms_diff(y).powi(2);
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub pair_id: usize,
    pub cwssim_atrous: f64,
    pub cwssim_dwt: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub rows: Vec<ReportRow>,
}

impl StructureReport {
    /// Mean per-pair win of the à trous score over the DWT score; ties count 0.5.
    pub fn win_rate(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let wins: f64 = self
            .rows
            .iter()
            .map(|r| {
                let d = r.cwssim_atrous - r.cwssim_dwt;
                if d.abs() <= TIE_TOL {
                    0.5
                } else if d > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .sum();
        Some(wins / self.rows.len() as f64)
    }

    /// Fraction of pairs where the à trous score is at least the DWT score.
    pub fn at_least_fraction(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self
            .rows
            .iter()
            .filter(|r| r.cwssim_atrous >= r.cwssim_dwt - TIE_TOL)
            .count();
        Some(n as f64 / self.rows.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,cwssim_atrous,cwssim_dwt,ssim,psnr\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.pair_id, r.cwssim_atrous, r.cwssim_dwt, r.ssim, r.psnr)
                .expect("string write");
        }
        out
    }

    /// Histogram of both CW-SSIM columns over `bins` equal bins of `[0, 1]`.
    pub fn histogram_text(&self, bins: usize) -> String {
        let bins = bins.max(1);
        let count = |f: fn(&ReportRow) -> f64| {
            let mut c = vec![0usize; bins];
            for r in &self.rows {
                let v = f(r).clamp(0.0, 1.0);
                c[((v * bins as f64) as usize).min(bins - 1)] += 1;
            }
            c
        };
        let a = count(|r| r.cwssim_atrous);
        let d = count(|r| r.cwssim_dwt);
        let mut out = String::from("bin_lo,bin_hi,atrous,dwt\n");
        for i in 0..bins {
            let lo = i as f64 / bins as f64;
            let hi = (i + 1) as f64 / bins as f64;
            writeln!(out, "{lo},{hi},{},{}", a[i], d[i]).expect("string write");
        }
        out
    }
}

/// Scores each `(original, generated)` pair on both CW-SSIM paths, SSIM and PSNR.
pub fn structure_preservation_report(
    originals: &[Image],
    generated: &[Image],
    p: &CwSsimParams,
) -> Result<StructureReport> {
    if originals.len() != generated.len() {
        return Err(Error::Parameter(format!(
            "{} originals but {} generated images",
            originals.len(),
            generated.len()
        )));
    }
    p.validate()?;
    let pairs: Vec<(usize, (&Image, &Image))> = originals.iter().zip(generated).enumerate().collect();
    let rows = par::map(&pairs, |&(i, (x, y))| {
        Ok(ReportRow {
            pair_id: i,
            cwssim_atrous: cw_ssim(x, y, p)?,
            cwssim_dwt: cw_ssim_dwt(x, y, p)?,
            ssim: ssim(x, y)?,
            psnr: psnr(x, y)?,
        })
    });
    Ok(StructureReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}
