use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::arch::{ArchitectureConfig, TIME_EMBED_DIM};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::image::SeededRng;
use crate::tensor_io::RawTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// All trainable weights, as named blocks in [`ArchitectureConfig::layout`] order.
///
/// The same type carries gradients, Adam moments and the EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: ArchitectureConfig,
    blocks: Vec<ParamBlock>,
}

impl DenoiserParams {
    pub fn zeros(arch: ArchitectureConfig) -> Self {
        let blocks = arch
            .layout()
            .into_iter()
            .map(|(name, dims)| {
                let n = dims.iter().product();
                ParamBlock {
                    name,
                    dims,
                    values: vec![0.0; n],
                }
            })
            .collect();
        Self { arch, blocks }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(|b| b.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(|b| b.values.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        let same = self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.dims == b.dims);
        if same {
            Ok(())
        } else {
            Err(Error::Invariant("parameter sets have different shapes".into()))
        }
    }

    /// `self += other`, blockwise in storage order.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.check_same_shape(other).is_ok());
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values()
            .zip(other.values())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.count() == other.count()
            && self
                .values()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Writes `<dir>/<stem>.manifest` and one `AWT1` file per block under
    /// `<dir>/<stem>/`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let block_dir = dir.join(stem);
        fs::create_dir_all(&block_dir).map_err(|e| Error::io(&block_dir, e))?;
        let mut manifest = String::from("# awdiff parameter manifest\n");
        let mut kv = KeyValues::default();
        self.arch.write_kv(&mut kv);
        for line in kv.to_text().lines() {
            writeln!(manifest, "arch {line}").expect("string write");
        }
        for b in &self.blocks {
            let dims: Vec<String> = b.dims.iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "block {} {} {}", b.name, b.dims.len(), dims.join(" "))
                .expect("string write");
            RawTensor::new(b.dims.clone(), b.values.clone())?
                .write(&block_dir.join(format!("{}.awt", b.name)))?;
        }
        let path = dir.join(format!("{stem}.manifest"));
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.manifest"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut arch_text = String::new();
        let mut listed = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("arch ") {
                arch_text.push_str(rest);
                arch_text.push('\n');
            } else if let Some(rest) = line.strip_prefix("block ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().unwrap_or_default().to_string();
                let dims = parts
                    .skip(1)
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                listed.push((name, dims));
            } else {
                return Err(Error::Format(format!(
                    "{}: unexpected line {line:?}",
                    path.display()
                )));
            }
        }
        let arch = ArchitectureConfig::from_kv(&KeyValues::parse(&arch_text)?)?;
        let layout = arch.layout();
        if listed != layout {
            return Err(Error::Format(format!(
                "{}: block list does not match the architecture",
                path.display()
            )));
        }
        let block_dir = dir.join(stem);
        let blocks = layout
            .into_iter()
            .map(|(name, dims)| {
                let t = RawTensor::read(&block_dir.join(format!("{name}.awt")))?;
                if t.dims != dims {
                    return Err(Error::Corruption(format!(
                        "block {name} has dims {:?}, manifest says {dims:?}",
                        t.dims
                    )));
                }
                if t.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Corruption(format!("block {name} is not finite")));
                }
                Ok(ParamBlock {
                    name,
                    dims,
                    values: t.data,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { arch, blocks })
    }
}

/// He-normal conv kernels, `N(0, 1/fan_in)` projections, zero biases.
pub fn init_params(arch: &ArchitectureConfig, rng: &mut SeededRng) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut params = DenoiserParams::zeros(*arch);
    for b in &mut params.blocks {
        let std = if b.name.ends_with(".bias") {
            continue;
        } else if b.name.starts_with("fusion.") {
            (1.0 / arch.embed_dim as f64).sqrt()
        } else if b.name == "time.weight" {
            (1.0 / TIME_EMBED_DIM as f64).sqrt()
        } else {
            let fan_in: usize = b.dims[1..].iter().product();
            (2.0 / fan_in as f64).sqrt()
        };
        b.values.iter_mut().for_each(|v| *v = std * rng.normal());
    }
    Ok(params)
}
