//! Synthetic lung-ultrasound phantoms.
//!
//! A dark background, a bright horizontal pleural band, vertical B-line
//! streaks below the band at seeded columns, and multiplicative speckle
//! `1 + σ η` (clipped at zero). Layers are composited with `max`, so a
//! feature dimmer than the background disappears.

use crate::conditioning::LabelPrompt;
use crate::error::{Error, Result};
use crate::image::{Image, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    /// Pleural line centre as a fraction of the height.
    pub pleural_line_row: f64,
    pub pleural_brightness: f64,
    pub pleural_thickness_px: usize,
    /// Jitters the pleural line up/down by one pixel in short segments.
    pub irregular_pleura: bool,
    pub n_blines: usize,
    pub bline_width_px: usize,
    pub bline_brightness: f64,
    pub speckle_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            background: 0.1,
            pleural_line_row: 0.25,
            pleural_brightness: 0.8,
            pleural_thickness_px: 2,
            irregular_pleura: false,
            n_blines: 2,
            bline_width_px: 1,
            bline_brightness: 0.6,
            speckle_sigma: 0.2,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.width == 0 || self.height == 0 {
            return Err(Error::Parameter("phantom dims must be positive".into()));
        }
        if !unit(self.background) || !unit(self.pleural_brightness) || !unit(self.bline_brightness) {
            return Err(Error::Parameter("brightness values must lie in [0, 1]".into()));
        }
        if !unit(self.pleural_line_row) {
            return Err(Error::Parameter("pleural_line_row must lie in [0, 1]".into()));
        }
        if !(self.speckle_sigma >= 0.0) {
            return Err(Error::Parameter("speckle_sigma must be non-negative".into()));
        }
        if self.bline_width_px == 0 {
            return Err(Error::Parameter("bline_width_px must be positive".into()));
        }
        let slots = self.width.saturating_sub(4) / (self.bline_width_px + 2);
        if self.n_blines > slots {
            return Err(Error::Parameter(format!(
                "{} B-lines do not fit in a {}-pixel-wide phantom",
                self.n_blines, self.width
            )));
        }
        Ok(())
    }

    pub fn pleural_row(&self) -> usize {
        ((self.pleural_line_row * self.height as f64) as usize).min(self.height - 1)
    }
}

/// Label text: `"<n> B-lines"`, plus `", irregular pleura"` when set.
pub fn phantom_label(n_blines: usize, irregular_pleura: bool) -> String {
    if irregular_pleura {
        format!("{n_blines} B-lines, irregular pleura")
    } else {
        format!("{n_blines} B-lines")
    }
}

/// Chooses non-overlapping B-line start columns with a one-pixel gap on each
/// side and a two-pixel margin from the borders.
fn bline_columns(p: &PhantomParams, rng: &mut SeededRng) -> Vec<usize> {
    let lo = 2;
    let hi = p.width - 2 - p.bline_width_px; // inclusive
    let mut cols: Vec<usize> = Vec::with_capacity(p.n_blines);
    while cols.len() < p.n_blines {
        let c = lo + rng.index(hi - lo + 1);
        let clear = cols
            .iter()
            .all(|&o| c + p.bline_width_px + 1 <= o || o + p.bline_width_px + 1 <= c);
        if clear {
            cols.push(c);
        }
    }
    cols.sort_unstable();
    cols
}

/// Returns the phantom, its label and the chosen B-line start columns.
pub fn generate_phantom_detailed(p: &PhantomParams) -> Result<(Image, LabelPrompt, Vec<usize>)> {
    p.validate()?;
    let mut rng = SeededRng::new(p.seed);
    let (w, h) = (p.width, p.height);
    let mut px = vec![p.background; w * h];

    let base_row = p.pleural_row();
    let mut line_rows = vec![base_row as isize; w];
    if p.irregular_pleura {
        let mut x = 0;
        while x < w {
            let offset = rng.index(3) as isize - 1;
            let run = 2 + rng.index(4);
            for r in line_rows.iter_mut().skip(x).take(run) {
                *r += offset;
            }
            x += run;
        }
    }
    let band_bottom = base_row + p.pleural_thickness_px + 1;
    for (x, &top) in line_rows.iter().enumerate() {
        for dy in 0..p.pleural_thickness_px as isize {
            let y = top + dy;
            if (0..h as isize).contains(&y) {
                let v = &mut px[y as usize * w + x];
                *v = v.max(p.pleural_brightness);
            }
        }
    }

    let cols = bline_columns(p, &mut rng);
    let span = h.saturating_sub(band_bottom).max(1) as f64;
    for &c in &cols {
        for y in band_bottom.min(h)..h {
            let fade = 1.0 - 0.5 * (y - band_bottom) as f64 / span;
            for x in c..c + p.bline_width_px {
                let v = &mut px[y * w + x];
                *v = v.max(p.bline_brightness * fade);
            }
        }
    }

    if p.speckle_sigma > 0.0 {
        for v in &mut px {
            *v = (*v * (1.0 + p.speckle_sigma * rng.normal()).max(0.0)).min(1.0);
        }
    }

    let label = LabelPrompt::new(&phantom_label(p.n_blines, p.irregular_pleura))?;
    Ok((Image::new(w, h, px)?, label, cols))
}

pub fn generate_phantom(p: &PhantomParams) -> Result<(Image, LabelPrompt)> {
    generate_phantom_detailed(p).map(|(img, label, _)| (img, label))
}

/// Parameters for item `index` of a seeded phantom suite: B-line counts
/// cycle through `0..=max_blines`, every third item has an irregular pleura.
pub fn suite_params(base: &PhantomParams, seed: u64, index: usize, max_blines: usize) -> PhantomParams {
    PhantomParams {
        n_blines: index % (max_blines + 1),
        irregular_pleura: index % 3 == 2,
        seed: SeededRng::derive_seed(seed, &[index as u64]),
        ..base.clone()
    }
}
