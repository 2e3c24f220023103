use crate::error::{Error, Result};
use crate::image::Image;

/// Detail subbands of one decomposition level.
///
/// For a 2×2 block `[a b; c d]` the orthonormal Haar analysis is
/// `LL = (a+b+c+d)/2`, `HL = (a-b+c-d)/2`, `LH = (a+b-c-d)/2`,
/// `HH = (a-b-c+d)/2`; `HL` responds to vertical edges and `LH` to horizontal ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DwtLevel {
    pub lh: Image,
    pub hl: Image,
    pub hh: Image,
}

/// Multi-level Haar coefficients; `levels[0]` is the finest.
#[derive(Debug, Clone, PartialEq)]
pub struct DwtCoefficients {
    pub levels: Vec<DwtLevel>,
    pub approx: Image,
}

impl DwtCoefficients {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn energy(&self) -> f64 {
        let sq = |img: &Image| img.pixels().iter().map(|p| p * p).sum::<f64>();
        sq(&self.approx)
            + self
                .levels
                .iter()
                .map(|l| sq(&l.lh) + sq(&l.hl) + sq(&l.hh))
                .sum::<f64>()
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Invariant("DWT needs at least one level".into()));
        }
        let (aw, ah) = self.approx.dims();
        let n = self.levels.len();
        for (i, lvl) in self.levels.iter().enumerate() {
            let f = 1usize << (n - 1 - i);
            let expect = (aw * f, ah * f);
            for (name, band) in [("LH", &lvl.lh), ("HL", &lvl.hl), ("HH", &lvl.hh)] {
                if band.dims() != expect {
                    return Err(Error::Invariant(format!(
                        "level {} {name} is {:?}, expected {:?}",
                        i + 1,
                        band.dims(),
                        expect
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Orthonormal Haar analysis applied `levels` times to the LL band.
pub fn dwt2_forward(img: &Image, levels: usize) -> Result<DwtCoefficients> {
    let (w, h) = img.dims();
    if levels == 0 {
        return Err(Error::Parameter("DWT levels must be at least 1".into()));
    }
    1usize
        .checked_shl(levels as u32)
        .filter(|b| w % b == 0 && h % b == 0)
        .ok_or_else(|| {
            Error::Parameter(format!(
                "{w}x{h} is not divisible by 2^{levels} for a {levels}-level DWT"
            ))
        })?;

    let mut approx = img.clone();
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (ll, lvl) = haar_analyze(&approx);
        out.push(lvl);
        approx = ll;
    }
    Ok(DwtCoefficients {
        levels: out,
        approx,
    })
}

pub fn dwt2_inverse(coeffs: &DwtCoefficients) -> Result<Image> {
    coeffs.validate()?;
    Ok(coeffs
        .levels
        .iter()
        .rev()
        .fold(coeffs.approx.clone(), |ll, lvl| haar_synthesize(&ll, lvl)))
}

fn haar_analyze(img: &Image) -> (Image, DwtLevel) {
    let (w, h) = (img.width() / 2, img.height() / 2);
    let n = w * h;
    let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        for x in 0..w {
            let a = img.get(2 * x, 2 * y);
            let b = img.get(2 * x + 1, 2 * y);
            let c = img.get(2 * x, 2 * y + 1);
            let d = img.get(2 * x + 1, 2 * y + 1);
            let i = y * w + x;
            ll[i] = 0.5 * (a + b + c + d);
            hl[i] = 0.5 * (a - b + c - d);
            lh[i] = 0.5 * (a + b - c - d);
            hh[i] = 0.5 * (a - b - c + d);
        }
    }
    (
        Image::from_parts(w, h, ll),
        DwtLevel {
            lh: Image::from_parts(w, h, lh),
            hl: Image::from_parts(w, h, hl),
            hh: Image::from_parts(w, h, hh),
        },
    )
}

fn haar_synthesize(ll: &Image, lvl: &DwtLevel) -> Image {
    let (w, h) = ll.dims();
    let mut out = vec![0.0; 4 * w * h];
    let ow = 2 * w;
    for y in 0..h {
        for x in 0..w {
            let (s, v, u, t) = (ll.get(x, y), lvl.hl.get(x, y), lvl.lh.get(x, y), lvl.hh.get(x, y));
            out[2 * y * ow + 2 * x] = 0.5 * (s + v + u + t);
            out[2 * y * ow + 2 * x + 1] = 0.5 * (s - v + u - t);
            out[(2 * y + 1) * ow + 2 * x] = 0.5 * (s + v - u - t);
            out[(2 * y + 1) * ow + 2 * x + 1] = 0.5 * (s - v - u + t);
        }
    }
    Image::from_parts(ow, 2 * h, out)
}
