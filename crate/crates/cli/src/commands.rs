use std::fs;
use std::path::{Path, PathBuf};

use awdiff::conditioning::{load_external_embedding, toy_text_embed, LabelPrompt};
use awdiff::config::KeyValues;
use awdiff::denoiser::DenoiserParams;
use awdiff::diffusion::{self, linear_beta_schedule, SamplerConfig, VarianceMode};
use awdiff::image::{load_image, save_image, save_pgm, PgmDepth};
use awdiff::metrics::{structure_preservation_report, CwSsimParams};
use awdiff::phantom::{generate_phantom, suite_params, PhantomParams};
use awdiff::training::{latest_checkpoint, loss_curve_csv, write_dataset_dir, Dataset, Trainer, TrainingConfig};
use awdiff::wavelet::{starlet_decompose, starlet_reconstruct};
use awdiff::{par, Error, Image, Result, SeededRng};

use crate::{ensure_dir, EvalArgs, PhantomArgs, SampleArgs, ScheduleArgs, TrainArgs};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let base = PhantomParams {
        width: a.width,
        height: a.height,
        speckle_sigma: a.speckle_sigma,
        ..PhantomParams::default()
    };
    let items = par::map_range(a.count, |i| generate_phantom(&suite_params(&base, a.seed, i, a.max_blines)));
    let items = items.into_iter().collect::<Result<Vec<_>>>()?;
    write_dataset_dir(&a.out, &items)?;
    println!("wrote {} phantoms to {}", items.len(), a.out.display());
    Ok(())
}

/// Rescales a detail plane to `[0, 1]` for viewing.
fn normalized(img: &Image) -> Image {
    let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        img.map(|v| (v - lo) / (hi - lo))
    } else {
        img.map(|_| 0.5)
    }
}

pub fn decompose(input: &Path, out: &Path, scales: usize) -> Result<()> {
    let img = load_image(input)?;
    let pyr = starlet_decompose(&img, scales)?;
    ensure_dir(out)?;
    pyr.to_tensor().write(&out.join("pyramid.awt"))?;
    for (s, plane) in pyr.planes().iter().enumerate() {
        save_pgm(&normalized(plane), &out.join(format!("wp{}.pgm", s + 1)), PgmDepth::Sixteen)?;
    }
    save_pgm(pyr.residual(), &out.join("residual.pgm"), PgmDepth::Sixteen)?;
    let err = starlet_reconstruct(&pyr).max_abs_diff(&img);
    println!("reconstruction max abs error: {err:e}");
    Ok(())
}

pub fn schedule(a: &ScheduleArgs) -> Result<()> {
    let table = linear_beta_schedule(a.steps, a.beta_start, a.beta_end)?.table();
    match &a.out {
        Some(path) => write_text(path, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn training_config(a: &TrainArgs) -> Result<TrainingConfig> {
    let mut kv = match &a.config {
        Some(path) => KeyValues::parse(&fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?)?,
        None => KeyValues::default(),
    };
    let overrides: [(&str, Option<String>); 9] = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("scales", a.scales.map(|v| v.to_string())),
        ("T", a.steps_t.map(|v| v.to_string())),
        ("beta_start", a.beta_start.map(|v| v.to_string())),
        ("beta_end", a.beta_end.map(|v| v.to_string())),
        ("steps", a.steps.map(|v| v.to_string())),
        ("batch_size", a.batch.map(|v| v.to_string())),
        ("lambda1", a.lambda1.map(|v| v.to_string())),
        ("ema_decay", a.ema_decay.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            kv.set(key, v);
        }
    }
    TrainingConfig::from_kv(&kv)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = training_config(a)?;
    let data = Dataset::load(&a.data, cfg.arch.scales, cfg.arch.embed_dim)?;
    ensure_dir(&a.out)?;
    let checkpoint = if a.resume { latest_checkpoint(&a.out)? } else { None };
    let mut trainer = match &checkpoint {
        Some(dir) => {
            let mut t = Trainer::resume(&data, dir)?;
            t.set_total_steps(cfg.steps);
            println!("resuming from step {}", t.step());
            t
        }
        None => Trainer::new(&data, cfg)?,
    };
    let result = trainer.run(Some(&a.out));
    write_text(&a.out.join("loss.csv"), &loss_curve_csv(trainer.curve()))?;
    result?;
    trainer.save_checkpoint(&a.out.join("final"))?;
    if let Some(last) = trainer.curve().last() {
        println!(
            "step {}: total {:.6} mse {:.6} align {:.6}",
            last.step, last.total, last.mse, last.align
        );
    }
    Ok(())
}

pub fn sample_paths(out: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        out.join(format!("sample_{i:03}.pgm")),
        out.join(format!("sample_{i:03}.awt")),
    )
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let stem = if a.no_ema { "params" } else { "ema" };
    let params = DenoiserParams::load(&a.checkpoint, stem)?;
    let cfg_path = a.checkpoint.join("config.txt");
    let cfg = TrainingConfig::parse(&fs::read_to_string(&cfg_path).map_err(|e| Error::Io {
        path: cfg_path.clone(),
        source: e,
    })?)?;
    let sched = cfg.schedule()?;
    let arch = params.arch();
    let z_y = match (&a.label, &a.embedding) {
        (Some(label), None) => toy_text_embed(&LabelPrompt::new(label)?, arch.embed_dim)?,
        (None, Some(path)) => load_external_embedding(path, arch.embed_dim)?,
        _ => return Err(Error::Parameter("give exactly one of --label or --embedding".into())),
    };
    let reference = load_image(&a.reference)?;
    let f = starlet_decompose(&reference, arch.scales)?;
    let variance_mode: VarianceMode = a.variance.parse()?;
    ensure_dir(&a.out)?;
    let results = par::map_range(a.count, |i| {
        let sc = SamplerConfig {
            seed: SeededRng::derive_seed(a.seed, &[i as u64]),
            variance_mode,
        };
        let img = diffusion::sample(&params, &sched, &z_y, &f, &sc)?;
        let (pgm, raw) = sample_paths(&a.out, i);
        save_image(&img, &raw)?;
        save_pgm(&img, &pgm, PgmDepth::Sixteen)
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let load_all = |dir: &Path| -> Result<Vec<Image>> {
        pgm_files(dir)?.iter().map(|p| load_image(p)).collect()
    };
    let originals = load_all(&a.originals)?;
    let generated = load_all(&a.generated)?;
    let p = CwSsimParams {
        scales: a.scales,
        ..CwSsimParams::default()
    };
    let report = structure_preservation_report(&originals, &generated, &p)?;
    ensure_dir(&a.out)?;
    write_text(&a.out.join("metrics.csv"), &report.to_csv())?;
    write_text(&a.out.join("histogram.txt"), &report.histogram_text(a.bins))?;
    match report.win_rate() {
        Some(w) => println!("{} pairs, à trous win rate over DWT: {w:.3}", report.rows.len()),
        None => println!("no pairs"),
    }
    Ok(())
}
