use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::tensor_io::RawTensor;

pub const MAX_SCALES: usize = 8;

/// A symmetric, normalized smoothing filter with an odd number of taps.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    taps: Vec<f64>,
}

impl Kernel1D {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.len() % 2 == 0 {
            return Err(Error::Parameter(format!(
                "kernel length must be odd, got {}",
                taps.len()
            )));
        }
        let sum: f64 = taps.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("kernel taps sum to {sum}, not 1")));
        }
        let n = taps.len();
        if (0..n / 2).any(|i| (taps[i] - taps[n - 1 - i]).abs() > 1e-15) {
            return Err(Error::Parameter("kernel must be symmetric".into()));
        }
        Ok(Self { taps })
    }

    /// The cubic B-spline scaling filter `[1, 4, 6, 4, 1] / 16`.
    pub fn b3() -> Self {
        Self {
            taps: vec![1.0 / 16.0, 0.25, 0.375, 0.25, 1.0 / 16.0],
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn half_width(&self) -> usize {
        self.taps.len() / 2
    }
}

/// Whole-sample symmetric reflection of `i` into `0..n` (`x[-1] = x[1]`),
/// repeated as often as needed.
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r >= n as isize {
        (period - r) as usize
    } else {
        r as usize
    }
}

/// Separable dilated convolution (rows, then columns) with mirrored borders.
pub fn atrous_convolve(img: &Image, kernel: &Kernel1D, dilation: usize) -> Image {
    assert!(dilation >= 1, "dilation must be at least 1");
    let (w, h) = img.dims();
    let taps = kernel.taps();
    let c = kernel.half_width() as isize;
    let d = dilation as isize;
    let src = img.pixels();

    let mut tmp = vec![0.0; w * h];
    par::for_each_row(&mut tmp, w, |y, out| {
        let row = &src[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &k) in taps.iter().enumerate() {
                acc += k * row[mirror_index(x as isize + d * (m as isize - c), w)];
            }
            *o = acc;
        }
    });

    let mut out = vec![0.0; w * h];
    par::for_each_row(&mut out, w, |y, out_row| {
        for (m, &k) in taps.iter().enumerate() {
            let sy = mirror_index(y as isize + d * (m as isize - c), h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            for (o, &s) in out_row.iter_mut().zip(src_row) {
                *o += k * s;
            }
        }
    });
    Image::from_parts(w, h, out)
}

/// Wavelet planes `WP(1..=S)` plus the final smooth residual `S(S)`, all at
/// the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    planes: Vec<Image>,
    residual: Image,
}

impl WaveletPyramid {
    pub fn new(planes: Vec<Image>, residual: Image) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Invariant("pyramid needs at least one plane".into()));
        }
        for (s, p) in planes.iter().enumerate() {
            p.check_same_dims(&residual, &format!("plane {} vs residual", s + 1))?;
        }
        Ok(Self { planes, residual })
    }

    pub fn planes(&self) -> &[Image] {
        &self.planes
    }

    pub fn residual(&self) -> &Image {
        &self.residual
    }

    pub fn scales(&self) -> usize {
        self.planes.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.residual.dims()
    }

    /// Rank-3 tensor `(S + 1, H, W)` with the residual as the last slice.
    pub fn to_tensor(&self) -> RawTensor {
        let (w, h) = self.dims();
        let mut data = Vec::with_capacity((self.scales() + 1) * w * h);
        for p in self.planes.iter().chain(std::iter::once(&self.residual)) {
            data.extend_from_slice(p.pixels());
        }
        RawTensor {
            dims: vec![self.scales() + 1, h, w],
            data,
        }
    }

    pub fn from_tensor(t: &RawTensor) -> Result<Self> {
        if t.rank() != 3 || t.dims[0] < 2 {
            return Err(Error::Format(format!(
                "pyramid tensor must be rank 3 with at least 2 slices, got dims {:?}",
                t.dims
            )));
        }
        let (n, h, w) = (t.dims[0], t.dims[1], t.dims[2]);
        let mut slices = t
            .data
            .chunks_exact(w * h)
            .map(|c| Image::new(w, h, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(slices.len(), n);
        let residual = slices.pop().expect("at least two slices");
        Self::new(slices, residual)
    }
}

/// Starlet analysis: `S(0) = x`, `S(s) = h_s * S(s-1)` with the B3 filter
/// dilated by `2^(s-1)`, `WP(s) = S(s-1) - S(s)`.
pub fn starlet_decompose(img: &Image, scales: usize) -> Result<WaveletPyramid> {
    if !(1..=MAX_SCALES).contains(&scales) {
        return Err(Error::Parameter(format!(
            "scales must be in 1..={MAX_SCALES}, got {scales}"
        )));
    }
    let kernel = Kernel1D::b3();
    let mut planes = Vec::with_capacity(scales);
    let mut smooth = img.clone();
    for s in 0..scales {
        let next = atrous_convolve(&smooth, &kernel, 1 << s);
        planes.push(smooth.sub(&next));
        smooth = next;
    }
    Ok(WaveletPyramid {
        planes,
        residual: smooth,
    })
}

/// The structural encoder: wavelet planes of the clean image. The transform
/// is fixed (no learned weights).
pub fn encoder_features(img: &Image, scales: usize) -> Result<WaveletPyramid> {
    starlet_decompose(img, scales)
}

/// Inverse starlet transform: residual plus every plane.
pub fn starlet_reconstruct(pyr: &WaveletPyramid) -> Image {
    pyr.planes
        .iter()
        .fold(pyr.residual.clone(), |acc, p| acc.add(p))
}
