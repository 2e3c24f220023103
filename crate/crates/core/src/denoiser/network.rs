use super::arch::TIME_EMBED_DIM;
use super::params::DenoiserParams;
use crate::autodiff::{Tape, Var};
use crate::conditioning::ConditioningEmbedding;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::wavelet::WaveletPyramid;

/// Sinusoidal embedding: `sin(t ω_i)` then `cos(t ω_i)`, `ω_i = 10000^(-i/16)`.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Context matrix `(token_dim, num_tokens)`; column `j` is token `j`.
pub fn context_tokens(z_y: &ConditioningEmbedding, f: &WaveletPyramid) -> Vec<f64> {
    let d = z_y.dim();
    let rows = d + 2;
    let cols = f.scales() + 1;
    let mut m = vec![0.0; rows * cols];
    for (r, &z) in z_y.values().iter().enumerate() {
        m[r * cols] = z;
    }
    for (s, plane) in f.planes().iter().enumerate() {
        let n = plane.len() as f64;
        let mean_abs = plane.pixels().iter().map(|p| p.abs()).sum::<f64>() / n;
        let rms = (plane.pixels().iter().map(|p| p * p).sum::<f64>() / n).sqrt();
        m[d * cols + s + 1] = mean_abs;
        m[(d + 1) * cols + s + 1] = rms;
    }
    m
}

fn check_inputs(
    params: &DenoiserParams,
    x_t: &Image,
    t: usize,
    z_y: &ConditioningEmbedding,
    f: &WaveletPyramid,
) -> Result<()> {
    let arch = params.arch();
    if t == 0 {
        return Err(Error::Parameter("diffusion step t starts at 1".into()));
    }
    if z_y.dim() != arch.embed_dim {
        return Err(Error::Invariant(format!(
            "embedding dim {} does not match architecture dim {}",
            z_y.dim(),
            arch.embed_dim
        )));
    }
    if f.scales() != arch.scales {
        return Err(Error::Invariant(format!(
            "pyramid has {} planes, architecture expects {}",
            f.scales(),
            arch.scales
        )));
    }
    if f.dims() != x_t.dims() {
        return Err(Error::Invariant(format!(
            "features are {:?}, x_t is {:?}",
            f.dims(),
            x_t.dims()
        )));
    }
    Ok(())
}

/// Records the network on `tape`. Returns the parameter leaves (in layout
/// order) and the `(1, H, W)` output node.
pub fn build_on_tape(
    tape: &mut Tape,
    params: &DenoiserParams,
    x_t: &Image,
    t: usize,
    z_y: &ConditioningEmbedding,
    f: &WaveletPyramid,
) -> Result<(Vec<Var>, Var)> {
    check_inputs(params, x_t, t, z_y, f)?;
    let arch = params.arch();
    let (w, h) = x_t.dims();
    let c = arch.channels;

    let vars: Vec<Var> = params
        .blocks()
        .iter()
        .map(|b| tape.param(b.values.clone(), b.dims.clone()))
        .collect();
    let [stem_w, stem_b, time_w, time_b, w_q, w_k, w_v] = vars[..7] else {
        unreachable!("layout starts with seven fixed blocks")
    };

    let mut input = Vec::with_capacity(arch.in_channels() * w * h);
    input.extend_from_slice(x_t.pixels());
    for p in f.planes() {
        input.extend_from_slice(p.pixels());
    }
    let input = tape.constant(input, vec![arch.in_channels(), h, w]);
    let hidden = tape.conv2d(input, stem_w, stem_b);

    let temb = tape.constant(time_embedding(t).to_vec(), vec![TIME_EMBED_DIM, 1]);
    let tproj = tape.matmul(time_w, temb);
    let tproj = tape.reshape(tproj, vec![c]);
    let tproj = tape.add(tproj, time_b);
    let hidden = tape.add_channel(hidden, tproj);
    let hidden = tape.silu(hidden);

    // cross-attention: one query per pixel, keys/values from context tokens
    let ctx = tape.constant(context_tokens(z_y, f), vec![arch.token_dim(), arch.num_tokens()]);
    let flat = tape.reshape(hidden, vec![c, h * w]);
    let q = tape.matmul(w_q, flat);
    let q = tape.transpose(q);
    let k = tape.matmul(w_k, ctx);
    let scores = tape.matmul(q, k);
    let scores = tape.scale(scores, 1.0 / (arch.attn_dim as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let v = tape.matmul(w_v, ctx);
    let attn_t = tape.transpose(attn);
    let mixed = tape.matmul(v, attn_t);
    let mixed = tape.reshape(mixed, vec![c, h, w]);
    let mut hidden = tape.add(hidden, mixed);

    for r in 0..arch.res_blocks {
        let (rw, rb) = (vars[7 + 2 * r], vars[8 + 2 * r]);
        let act = tape.silu(hidden);
        let delta = tape.conv2d(act, rw, rb);
        hidden = tape.add(hidden, delta);
    }

    let n = vars.len();
    let act = tape.silu(hidden);
    let out = tape.conv2d(act, vars[n - 2], vars[n - 1]);
    Ok((vars, out))
}

/// Predicted noise `ε̂`, same dims as `x_t`.
pub fn forward(
    params: &DenoiserParams,
    x_t: &Image,
    t: usize,
    z_y: &ConditioningEmbedding,
    f: &WaveletPyramid,
) -> Result<Image> {
    let mut tape = Tape::new();
    let (_, out) = build_on_tape(&mut tape, params, x_t, t, z_y, f)?;
    let values = tape.value(out);
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: t,
            detail: format!("denoiser produced {bad}"),
        });
    }
    Ok(Image::from_parts(x_t.width(), x_t.height(), values.to_vec()))
}

/// Gradients of `<forward(...), upstream>` for every parameter block.
pub fn backward(
    params: &DenoiserParams,
    x_t: &Image,
    t: usize,
    z_y: &ConditioningEmbedding,
    f: &WaveletPyramid,
    upstream: &Image,
) -> Result<DenoiserParams> {
    x_t.check_same_dims(upstream, "upstream gradient vs x_t")?;
    let mut tape = Tape::new();
    let (vars, out) = build_on_tape(&mut tape, params, x_t, t, z_y, f)?;
    let mut grads = tape.backward(out, upstream.pixels());
    let mut result = params.zeros_like();
    for (block, var) in result.blocks_mut().iter_mut().zip(vars) {
        if let Some(g) = grads.take(var) {
            block.values = g;
        }
    }
    Ok(result)
}
