use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Width of the sinusoidal time embedding.
pub const TIME_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub res_blocks: usize,
    /// Number of wavelet planes fed as extra input channels.
    pub scales: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            kernel_size: 3,
            res_blocks: 2,
            scales: 4,
            embed_dim: 16,
            attn_dim: 16,
            heads: 1,
        }
    }
}

impl ArchitectureConfig {
    /// Two channels, two planes, four-dim embeddings: small enough for
    /// exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            channels: 2,
            kernel_size: 3,
            res_blocks: 2,
            scales: 2,
            embed_dim: 4,
            attn_dim: 4,
            heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.channels == 0 || self.embed_dim == 0 || self.attn_dim == 0 {
            return bad("channels, embed_dim and attn_dim must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(1..=crate::wavelet::MAX_SCALES).contains(&self.scales) {
            return bad(format!("scales must be in 1..=8, got {}", self.scales));
        }
        if self.heads != 1 {
            return bad(format!("only single-head fusion is supported, got {}", self.heads));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.scales + 1
    }

    /// Context token width: the embedding plus two plane statistics.
    pub fn token_dim(&self) -> usize {
        self.embed_dim + 2
    }

    pub fn num_tokens(&self) -> usize {
        self.scales + 1
    }

    /// Named block shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k) = (self.channels, self.kernel_size);
        let mut out = vec![
            ("stem.weight".to_string(), vec![c, self.in_channels(), k, k]),
            ("stem.bias".to_string(), vec![c]),
            ("time.weight".to_string(), vec![c, TIME_EMBED_DIM]),
            ("time.bias".to_string(), vec![c]),
            ("fusion.w_q".to_string(), vec![self.attn_dim, c]),
            ("fusion.w_k".to_string(), vec![self.attn_dim, self.token_dim()]),
            ("fusion.w_v".to_string(), vec![c, self.token_dim()]),
        ];
        for r in 0..self.res_blocks {
            out.push((format!("res{r}.weight"), vec![c, c, k, k]));
            out.push((format!("res{r}.bias"), vec![c]));
        }
        out.push(("head.weight".to_string(), vec![1, c, k, k]));
        out.push(("head.bias".to_string(), vec![1]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("channels", self.channels);
        kv.set("kernel_size", self.kernel_size);
        kv.set("res_blocks", self.res_blocks);
        kv.set("scales", self.scales);
        kv.set("embed_dim", self.embed_dim);
        kv.set("attn_dim", self.attn_dim);
        kv.set("heads", self.heads);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let embed_dim = kv.get_or("embed_dim", d.embed_dim)?;
        let arch = Self {
            channels: kv.get_or("channels", d.channels)?,
            kernel_size: kv.get_or("kernel_size", d.kernel_size)?,
            res_blocks: kv.get_or("res_blocks", d.res_blocks)?,
            scales: kv.get_or("scales", d.scales)?,
            embed_dim,
            attn_dim: kv.get_or("attn_dim", embed_dim)?,
            heads: kv.get_or("heads", d.heads)?,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub const KEYS: &'static [&'static str] = &[
        "channels",
        "kernel_size",
        "res_blocks",
        "scales",
        "embed_dim",
        "attn_dim",
        "heads",
    ];
}
