//! Minimal reverse-mode autodiff over a fixed operator set.
//!
//! Values are flat `f64` buffers with a row-major shape. Images and feature
//! maps use `(channels, height, width)`; matrices use `(rows, cols)`. Every
//! node records which parents it came from; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients only along paths that reach a
//! node created with [`Tape::param`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        k: usize,
    },
    AddChannel {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Silu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Scale(Var, f64),
    Reshape(Var),
    AvgPool {
        x: Var,
        cells: PoolCells,
    },
    L2Normalize(Var),
    MseTo {
        x: Var,
        target: Vec<f64>,
    },
    CosineDistanceTo {
        x: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Row and column ranges of each pooling cell.
#[derive(Debug, Clone)]
pub struct PoolCells {
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
    pub in_width: usize,
}

impl PoolCells {
    /// Splits `height x width` into an `out_h x out_w` grid of near-equal cells.
    /// Every cell covers at least one pixel, even when the input is smaller
    /// than the grid.
    pub fn grid(height: usize, width: usize, out_h: usize, out_w: usize) -> Self {
        let split = |n: usize, parts: usize| -> Vec<(usize, usize)> {
            (0..parts)
                .map(|i| {
                    let start = (i * n / parts).min(n - 1);
                    let end = ((i + 1) * n / parts).max(start + 1);
                    (start, end)
                })
                .collect()
        };
        Self {
            rows: split(height, out_h),
            cols: split(width, out_w),
            in_width: width,
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no parameter path exists.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.0[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push(value, shape, Op::Leaf, true)
    }

    /// A leaf whose gradient is never needed.
    pub fn constant(&mut self, value: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Same-size 2D convolution with zero padding: `input (ci, h, w)`,
    /// `weight (co, ci, k, k)`, `bias (co)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (ci, h, w) = dims3(self.shape(input));
        let ws = self.shape(weight).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (co, k) = (ws[0], ws[2]);
        assert!(ws[1] == ci && ws[3] == k && k % 2 == 1, "conv weight shape {ws:?}");
        assert_eq!(self.shape(bias), [co]);
        let mut out = vec![0.0; co * h * w];
        for (o, b) in out.chunks_exact_mut(h * w).zip(self.value(bias)) {
            o.fill(*b);
        }
        conv_forward(self.value(input), self.value(weight), &mut out, ci, h, w, k);
        let needs = self.needs(&[input, weight, bias]);
        self.push(
            out,
            vec![co, h, w],
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
            },
            needs,
        )
    }

    /// Adds `bias[c]` to every pixel of channel `c` of `x (c, h, w)`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        assert_eq!(self.shape(bias).iter().product::<usize>(), c);
        let mut out = self.value(x).to_vec();
        for (plane, b) in out.chunks_exact_mut(h * w).zip(self.value(bias)) {
            plane.iter_mut().for_each(|p| *p += b);
        }
        let needs = self.needs(&[x, bias]);
        self.push(out, vec![c, h, w], Op::AddChannel { x, bias }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Add(a, b), needs)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Silu(x), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        self.push(out, vec![m, n], Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.shape(x));
        let out = transposed(self.value(x), m, n);
        let needs = self.needs(&[x]);
        self.push(out, vec![n, m], Op::Transpose(x), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let needs = self.needs(&[x]);
        self.push(out, vec![m, n], Op::SoftmaxRows(x), needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, None)
    }

    /// `s * x + offset`, with `offset` a constant of the same size.
    pub fn affine(&mut self, x: Var, s: f64, offset: Option<&[f64]>) -> Var {
        let mut out: Vec<f64> = self.value(x).iter().map(|v| v * s).collect();
        if let Some(off) = offset {
            assert_eq!(off.len(), out.len(), "affine offset size");
            out.iter_mut().zip(off).for_each(|(o, b)| *o += b);
        }
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Op::Scale(x, s), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape size"
        );
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(out, shape, Op::Reshape(x), needs)
    }

    /// Cell means of a flat `(h, w)` buffer, producing `(out_h * out_w)`.
    pub fn avg_pool(&mut self, x: Var, cells: PoolCells) -> Var {
        let src = self.value(x);
        let mut out = Vec::with_capacity(cells.rows.len() * cells.cols.len());
        for &(r0, r1) in &cells.rows {
            for &(c0, c1) in &cells.cols {
                let mut acc = 0.0;
                for r in r0..r1 {
                    acc += src[r * cells.in_width + c0..r * cells.in_width + c1]
                        .iter()
                        .sum::<f64>();
                }
                out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
        let n = out.len();
        let needs = self.needs(&[x]);
        self.push(out, vec![n], Op::AvgPool { x, cells }, needs)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let norm = l2(self.value(x));
        if norm == 0.0 {
            return Err(Error::UndefinedCosine);
        }
        let out = self.value(x).iter().map(|v| v / norm).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::L2Normalize(x), needs))
    }

    /// Mean of `(x - target)^2` as a scalar.
    pub fn mse_to(&mut self, x: Var, target: &[f64]) -> Var {
        assert_eq!(self.value(x).len(), target.len(), "mse size");
        let n = target.len() as f64;
        let loss = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[x]);
        self.push(
            vec![loss],
            vec![1],
            Op::MseTo {
                x,
                target: target.to_vec(),
            },
            needs,
        )
    }

    /// `1 - cos(x, target)` as a scalar.
    pub fn cosine_distance_to(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let loss = cosine_distance(self.value(x), target)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CosineDistanceTo {
                x,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from `output`, seeded with `seed` (same size as `output`).
    pub fn backward(&self, output: Var, seed: &[f64]) -> Gradients {
        assert_eq!(seed.len(), self.value(output).len(), "seed size");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                k,
            } => {
                let (ci, h, w) = dims3(self.shape(*input));
                let co = node.shape[0];
                if want(*bias) {
                    let gb: Vec<f64> = g.chunks_exact(h * w).map(|c| c.iter().sum()).collect();
                    accumulate(grads, *bias, &gb);
                }
                if want(*weight) {
                    let mut gw = vec![0.0; co * ci * k * k];
                    conv_backward_weight(self.value(*input), g, &mut gw, ci, co, h, w, *k);
                    accumulate(grads, *weight, &gw);
                }
                if want(*input) {
                    let mut gi = vec![0.0; ci * h * w];
                    conv_backward_input(self.value(*weight), g, &mut gi, ci, co, h, w, *k);
                    accumulate(grads, *input, &gi);
                }
            }
            Op::AddChannel { x, bias } => {
                if want(*bias) {
                    let (_, h, w) = dims3(&node.shape);
                    let gb: Vec<f64> = g.chunks_exact(h * w).map(|c| c.iter().sum()).collect();
                    accumulate(grads, *bias, &gb);
                }
                if want(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g);
                }
                if want(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Silu(x) => {
                let gx: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = node.shape[1];
                if want(*a) {
                    // dA = G · Bᵀ
                    let bt = transposed(self.value(*b), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_acc(g, &bt, &mut ga, m, n, k);
                    accumulate(grads, *a, &ga);
                }
                if want(*b) {
                    // dB = Aᵀ · G
                    let at = transposed(self.value(*a), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_acc(&at, g, &mut gb, k, m, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = dims2(&node.shape);
                accumulate(grads, *x, &transposed(g, m, n));
            }
            Op::SoftmaxRows(x) => {
                let n = node.shape[1];
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g
                    .chunks_exact(n)
                    .zip(node.value.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::AvgPool { x, cells } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                let mut gi = g.iter();
                for &(r0, r1) in &cells.rows {
                    for &(c0, c1) in &cells.cols {
                        let share = gi.next().expect("pool cell") / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            gx[r * cells.in_width + c0..r * cells.in_width + c1]
                                .iter_mut()
                                .for_each(|v| *v += share);
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::L2Normalize(x) => {
                let norm = l2(self.value(*x));
                let y = &node.value;
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| (gv - yv * dot) / norm)
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::MseTo { x, target } => {
                let n = target.len() as f64;
                let gx: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::CosineDistanceTo { x, target } => {
                let gx = cosine_distance_grad(self.value(*x), target)
                    .expect("norms checked on the forward pass");
                let gx: Vec<f64> = gx.iter().map(|v| v * g[0]).collect();
                accumulate(grads, *x, &gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected (c, h, w), got shape {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - a·b / (|a| |b|)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine operands differ in length");
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Gradient of [`cosine_distance`] with respect to `a`.
pub fn cosine_distance_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect())
}

fn transposed(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// `out += a (m×k) · b (k×n)`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Copies `c` planes of `h x w` into zero-padded planes of `rows x (w + 2p)`
/// with the data starting at `(p, p)`.
fn pad_planes(src: &[f64], c: usize, h: usize, w: usize, p: usize, rows: usize) -> Vec<f64> {
    let wp = w + 2 * p;
    let mut out = vec![0.0; c * rows * wp];
    for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(rows * wp)) {
        for (y, row) in plane.chunks_exact(w).enumerate() {
            dst[(y + p) * wp + p..(y + p) * wp + p + w].copy_from_slice(row);
        }
    }
    out
}

/// Padded-plane height: `2p` halo rows plus one spare row so that flat
/// reads `ky * wp + kx .. + h * wp` stay in bounds.
fn padded_rows(h: usize, p: usize) -> usize {
    h + 2 * p + 1
}

/// `dst[y * wp + x] += Σ taps[ky][kx] * src[(y + ky) * wp + x + kx]` over the
/// flat range `0..dst.len()`; columns `x >= w` receive junk and are ignored.
fn correlate_flat(src: &[f64], taps: impl Fn(usize, usize) -> f64, k: usize, wp: usize, dst: &mut [f64]) {
    let n = dst.len();
    for ky in 0..k {
        for kx in 0..k {
            let wv = taps(ky, kx);
            if wv == 0.0 {
                continue;
            }
            let off = ky * wp + kx;
            for (d, s) in dst.iter_mut().zip(&src[off..off + n]) {
                *d += wv * s;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    weight: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    let (wp, rows) = (w + 2 * p, padded_rows(h, p));
    let padded = pad_planes(input, ci, h, w, p, rows);
    let mut acc = vec![0.0; h * wp];
    for (o, dst) in out.chunks_exact_mut(h * w).enumerate() {
        acc.fill(0.0);
        for (i, src) in padded.chunks_exact(rows * wp).enumerate() {
            let base = (o * ci + i) * k * k;
            correlate_flat(src, |ky, kx| weight[base + ky * k + kx], k, wp, &mut acc);
        }
        for (d, a) in dst.chunks_exact_mut(w).zip(acc.chunks_exact(wp)) {
            d.iter_mut().zip(a).for_each(|(d, a)| *d += a);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    weight: &[f64],
    gout: &[f64],
    gin: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    let (wp, rows) = (w + 2 * p, padded_rows(h, p));
    let padded = pad_planes(gout, co, h, w, p, rows);
    let mut acc = vec![0.0; h * wp];
    for (i, dst) in gin.chunks_exact_mut(h * w).enumerate() {
        acc.fill(0.0);
        for (o, src) in padded.chunks_exact(rows * wp).enumerate() {
            let base = (o * ci + i) * k * k;
            // full correlation with the flipped kernel
            correlate_flat(src, |ky, kx| weight[base + (k - 1 - ky) * k + (k - 1 - kx)], k, wp, &mut acc);
        }
        for (d, a) in dst.chunks_exact_mut(w).zip(acc.chunks_exact(wp)) {
            d.iter_mut().zip(a).for_each(|(d, a)| *d += a);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_weight(
    input: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let p = k / 2;
    let (wp, rows) = (w + 2 * p, padded_rows(h, p));
    let padded = pad_planes(input, ci, h, w, p, rows);
    // gradient planes widened to `wp` columns, zero beyond `w`
    let mut g_wide = vec![0.0; co * h * wp];
    for (src, dst) in gout.chunks_exact(w).zip(g_wide.chunks_exact_mut(wp)) {
        dst[..w].copy_from_slice(src);
    }
    let n = h * wp;
    for (o, g) in g_wide.chunks_exact(n).enumerate() {
        for (i, src) in padded.chunks_exact(rows * wp).enumerate() {
            for ky in 0..k {
                for kx in 0..k {
                    let off = ky * wp + kx;
                    gw[((o * ci + i) * k + ky) * k + kx] += dot(g, &src[off..off + n]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SeededRng;

    fn randn(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        rng.normals(n)
    }

    /// Checks every entry of every param leaf against central differences of
    /// `build`, contracted with a fixed random upstream vector.
    fn check(
        shapes: &[Vec<usize>],
        seed: u64,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut values: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| randn(&mut rng, s.iter().product()))
            .collect();
        let eval = |values: &[Vec<f64>]| -> (Tape, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values
                .iter()
                .zip(shapes)
                .map(|(v, s)| tape.param(v.clone(), s.clone()))
                .collect();
            let out = build(&mut tape, &vars);
            (tape, out)
        };
        let (tape, out) = eval(&values);
        let upstream = randn(&mut rng, tape.value(out).len());
        let contract = |values: &[Vec<f64>]| -> f64 {
            let (t, o) = eval(values);
            t.value(o).iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let grads = tape.backward(out, &upstream);
        let h = 1e-6;
        for b in 0..values.len() {
            let analytic = grads.get(Var(b)).expect("param grad").to_vec();
            for i in 0..values[b].len() {
                let orig = values[b][i];
                values[b][i] = orig + h;
                let fp = contract(&values);
                values[b][i] = orig - h;
                let fm = contract(&values);
                values[b][i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
                assert!(err < 1e-5, "block {b} entry {i}: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        check(
            &[vec![3, 5, 4], vec![2, 3, 3, 3], vec![2]],
            1,
            |t, v| t.conv2d(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn matmul_transpose_softmax_gradients() {
        check(&[vec![3, 4], vec![4, 2]], 2, |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.softmax_rows(m);
            let tr = t.transpose(s);
            t.scale(tr, 0.7)
        });
    }

    #[test]
    fn pointwise_and_broadcast_gradients() {
        check(&[vec![2, 3, 3], vec![2], vec![2, 3, 3]], 3, |t, v| {
            let a = t.add_channel(v[0], v[1]);
            let s = t.silu(a);
            let r = t.add(s, v[2]);
            t.reshape(r, vec![18])
        });
    }

    #[test]
    fn pool_normalize_losses_gradients() {
        let target = vec![0.3, -0.2, 0.9, 0.1];
        let mse_target: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
        check(&[vec![5, 7]], 4, |t, v| {
            let p = t.avg_pool(v[0], PoolCells::grid(5, 7, 2, 2));
            let n = t.l2_normalize(p).unwrap();
            let c = t.cosine_distance_to(n, &target).unwrap();
            let m = t.mse_to(p, &mse_target);
            let sum = t.add(c, m);
            t.affine(sum, 1.5, Some(&[0.25]))
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = SeededRng::new(5);
        let (ci, co, h, w, k) = (2, 3, 4, 5, 3);
        let input = randn(&mut rng, ci * h * w);
        let weight = randn(&mut rng, co * ci * k * k);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone(), vec![ci, h, w]);
        let wv = tape.constant(weight.clone(), vec![co, ci, k, k]);
        let b = tape.constant(vec![0.5, -1.0, 0.0], vec![co]);
        let out = tape.conv2d(x, wv, b);
        let got = tape.value(out);
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = [0.5, -1.0, 0.0][o];
                    for i in 0..ci {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * ci + i) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    let idx = (o * h + y as usize) * w + xx as usize;
                    assert!((got[idx] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(vec![1.0, 2.0], vec![1, 2]);
        let p = tape.param(vec![3.0, 4.0], vec![2, 1]);
        let m = tape.matmul(c, p);
        let g = tape.backward(m, &[1.0]);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn pool_cells_cover_small_inputs() {
        let cells = PoolCells::grid(3, 3, 8, 8);
        assert!(cells.rows.iter().all(|&(a, b)| b > a && b <= 3));
        let cells = PoolCells::grid(32, 32, 8, 8);
        assert_eq!(cells.rows[7], (28, 32));
    }

    #[test]
    fn zero_norm_is_rejected() {
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedCosine)));
        let mut tape = Tape::new();
        let z = tape.param(vec![0.0; 3], vec![3]);
        assert!(tape.l2_normalize(z).is_err());
    }
}
