//! Exact masked attention and the efficient alternatives it is compared
//! against, all taking the same [`AttentionInputs`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::TokenGrid;
use crate::mask::{AttentionMask, MaskPattern};
use crate::tensor::{elu, sigmoid, softmax_in_place, softmax_rows, Matrix};

/// Queries, keys and values over a joint token grid.
///
/// Rows of `q`, `k`, `v` follow the grid's token order (text first). `scale`
/// multiplies raw `q·k` scores, `1/√c` by default.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub grid: TokenGrid,
    pub scale: f64,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, grid: TokenGrid) -> Result<Self> {
        let c = q.cols();
        if k.cols() != c || v.cols() != c {
            return Err(LabError::Shape(format!(
                "q/k/v widths {} / {} / {} must agree",
                c,
                k.cols(),
                v.cols()
            )));
        }
        if k.rows() != v.rows() {
            return Err(LabError::Shape("k and v row counts differ".into()));
        }
        Ok(AttentionInputs {
            q,
            k,
            v,
            grid,
            scale: 1.0 / (c.max(1) as f64).sqrt(),
        })
    }

    /// Gaussian self-attention inputs over `grid`.
    pub fn random(grid: TokenGrid, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.n_tokens();
        let q = Matrix::randn(n, c, 1.0, &mut rng);
        let k = Matrix::randn(n, c, 1.0, &mut rng);
        let v = Matrix::randn(n, c, 1.0, &mut rng);
        Self::new(q, k, v, grid).expect("consistent shapes")
    }

    fn expect_self_attention(&self) -> Result<()> {
        let n = self.grid.n_tokens();
        if self.q.rows() != n || self.k.rows() != n {
            return Err(LabError::Shape(format!(
                "grid of {n} tokens, q has {} rows, k has {}",
                self.q.rows(),
                self.k.rows()
            )));
        }
        Ok(())
    }
}

/// Softmax attention of `q` rows against `k`/`v`, with `allowed(i, j)`
/// selecting visible keys. Shared by the single-worker and patch-parallel
/// paths so both see identical arithmetic on identical operands.
pub(crate) fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    allowed: impl FnMut(usize, usize) -> bool,
) -> Result<Matrix> {
    attend_with_lse(q, k, v, scale, allowed).map(|(out, _)| out)
}

/// Same as [`attend`], also returning each row's log partition mass
/// `ln Σ_j exp(s_ij)` over the visible keys.
pub(crate) fn attend_with_lse(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    mut allowed: impl FnMut(usize, usize) -> bool,
) -> Result<(Matrix, Vec<f64>)> {
    let mut scores = q.matmul_nt(k)?;
    let mut lse = Vec::with_capacity(scores.rows());
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let mut any = false;
        for (j, s) in row.iter_mut().enumerate() {
            if allowed(i, j) {
                *s *= scale;
                any = true;
            } else {
                *s = f64::NEG_INFINITY;
            }
        }
        if !any {
            return Err(LabError::Geometry(format!("query row {i} has no visible key")));
        }
        let (max, ln_sum) = softmax_in_place(row).expect("row has a visible key");
        lse.push(max + ln_sum);
    }
    Ok((scores.matmul(v)?, lse))
}

/// Row-stochastic attention weights under `mask`.
pub fn attention_weights(inputs: &AttentionInputs, mask: &AttentionMask) -> Result<Matrix> {
    inputs.expect_self_attention()?;
    check_mask(inputs, mask)?;
    let mut scores = inputs.q.matmul_nt(&inputs.k)?.scale(inputs.scale);
    for i in 0..scores.rows() {
        for j in 0..scores.cols() {
            if !mask.get(i, j) {
                scores[(i, j)] = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows(&scores, None)
}

fn check_mask(inputs: &AttentionInputs, mask: &AttentionMask) -> Result<()> {
    if mask.n() != inputs.q.rows() {
        return Err(LabError::Shape(format!(
            "mask of size {} for {} queries",
            mask.n(),
            inputs.q.rows()
        )));
    }
    Ok(())
}

/// `softmax(QKᵀ·scale + M)·V` with blocked entries at `-inf`.
pub fn masked_attention(inputs: &AttentionInputs, mask: &AttentionMask) -> Result<Matrix> {
    inputs.expect_self_attention()?;
    check_mask(inputs, mask)?;
    attend(&inputs.q, &inputs.k, &inputs.v, inputs.scale, |i, j| mask.get(i, j))
}

fn elu_plus_one(m: &Matrix) -> Matrix {
    m.map(|x| elu(x) + 1.0)
}

/// Kernelized linear attention with `φ = elu + 1`, evaluated through the
/// `c × c` product `φ(K)ᵀV` so no `n × m` matrix is formed.
pub fn linear_attention(inputs: &AttentionInputs) -> Result<Matrix> {
    let fq = elu_plus_one(&inputs.q);
    let fk = elu_plus_one(&inputs.k);
    let kv = fk.matmul_tn(&inputs.v)?;
    let ksum = Matrix::filled(1, fk.rows(), 1.0).matmul(&fk)?;
    let mut out = fq.matmul(&kv)?;
    let denom = fq.matmul_nt(&ksum)?;
    for i in 0..out.rows() {
        let d = denom[(i, 0)];
        out.row_mut(i).iter_mut().for_each(|x| *x /= d);
    }
    Ok(out)
}

/// Default sigmoid bias, `−ln m` for `m` keys.
pub fn default_sigmoid_bias(m: usize) -> f64 {
    -(m.max(1) as f64).ln()
}

/// `sigmoid(QKᵀ·scale + b)·V` without row normalisation.
pub fn sigmoid_attention(inputs: &AttentionInputs, bias: Option<f64>) -> Result<Matrix> {
    let b = bias.unwrap_or_else(|| default_sigmoid_bias(inputs.k.rows()));
    let w = inputs
        .q
        .matmul_nt(&inputs.k)?
        .map(|s| sigmoid(s * inputs.scale + b));
    w.matmul(&inputs.v)
}

/// Group-wise 4×4 stride-4 convolutions that shorten the image key/value
/// maps. One kernel per channel, row-major over the 4×4 patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCompressor {
    pub k_kernels: Vec<[f64; 16]>,
    pub v_kernels: Vec<[f64; 16]>,
}

pub const KV_STRIDE: usize = 4;

impl KvCompressor {
    /// Kernels initialised to `1/16`, i.e. 4×4 average pooling.
    pub fn average_pooling(channels: usize) -> Self {
        KvCompressor {
            k_kernels: vec![[1.0 / 16.0; 16]; channels],
            v_kernels: vec![[1.0 / 16.0; 16]; channels],
        }
    }

    /// Compressed map size for a grid, zero-padding up to multiples of 4.
    pub fn compressed_dims(grid: &TokenGrid) -> (usize, usize) {
        (grid.height.div_ceil(KV_STRIDE), grid.width.div_ceil(KV_STRIDE))
    }

    /// Convolves the image rows of `x` (text rows pass through).
    pub fn compress(x: &Matrix, grid: &TokenGrid, kernels: &[[f64; 16]]) -> Result<Matrix> {
        if x.rows() != grid.n_tokens() || kernels.len() != x.cols() {
            return Err(LabError::Shape(format!(
                "compress {:?} over {} tokens with {} kernels",
                x.shape(),
                grid.n_tokens(),
                kernels.len()
            )));
        }
        let (ch, cw) = Self::compressed_dims(grid);
        let mut out = Matrix::zeros(grid.n_text + ch * cw, x.cols());
        for t in 0..grid.n_text {
            out.row_mut(t).copy_from_slice(x.row(t));
        }
        for cy in 0..ch {
            for cx in 0..cw {
                let dst = grid.n_text + cy * cw + cx;
                for a in 0..KV_STRIDE {
                    for b in 0..KV_STRIDE {
                        let (y, xx) = (cy * KV_STRIDE + a, cx * KV_STRIDE + b);
                        if y >= grid.height || xx >= grid.width {
                            continue;
                        }
                        let src = x.row(grid.token_at(xx, y));
                        for (c, kern) in kernels.iter().enumerate() {
                            out[(dst, c)] += kern[a * KV_STRIDE + b] * src[c];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Dense attention against convolution-compressed keys and values.
pub fn kv_compressed_attention(inputs: &AttentionInputs, params: &KvCompressor) -> Result<Matrix> {
    inputs.expect_self_attention()?;
    let k = KvCompressor::compress(&inputs.k, &inputs.grid, &params.k_kernels)?;
    let v = KvCompressor::compress(&inputs.v, &inputs.grid, &params.v_kernels)?;
    attend(&inputs.q, &k, &v, inputs.scale, |_, _| true)
}

/// Text rows followed by `factor × factor` average pooling of image rows.
pub fn downsample_tokens(x: &Matrix, grid: &TokenGrid, factor: usize) -> Result<Matrix> {
    if factor == 0 || !grid.height.is_multiple_of(factor) || !grid.width.is_multiple_of(factor) {
        return Err(LabError::Geometry(format!(
            "down factor {factor} must divide {}x{}",
            grid.height, grid.width
        )));
    }
    let (h, w) = (grid.height / factor, grid.width / factor);
    let mut out = Matrix::zeros(grid.n_text + h * w, x.cols());
    for t in 0..grid.n_text {
        out.row_mut(t).copy_from_slice(x.row(t));
    }
    let inv = 1.0 / (factor * factor) as f64;
    for y in 0..grid.height {
        for xx in 0..grid.width {
            let dst = grid.n_text + (y / factor) * w + xx / factor;
            let src = x.row(grid.token_at(xx, y));
            for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                *o += s * inv;
            }
        }
    }
    Ok(out)
}

/// Two-stage agent attention. Agents are the pooled queries (text queries
/// stay as their own agents): `A = softmax(agents·Kᵀ)·V`, then
/// `O = softmax(Q·agentsᵀ)·A`.
pub fn agent_attention(inputs: &AttentionInputs, down_factor: usize) -> Result<Matrix> {
    inputs.expect_self_attention()?;
    let agents = downsample_tokens(&inputs.q, &inputs.grid, down_factor)?;
    let a = attend(&agents, &inputs.k, &inputs.v, inputs.scale, |_, _| true)?;
    attend(&inputs.q, &agents, &a, inputs.scale, |_, _| true)
}

/// Slot attention: `s` memory slots written with weights `softmax(P·Kᵀ)`,
/// then read by every query.
pub fn slot_attention(inputs: &AttentionInputs, slots: &Matrix) -> Result<Matrix> {
    if slots.rows() == 0 || slots.cols() != inputs.k.cols() {
        return Err(LabError::Shape(format!(
            "slot matrix {:?} for width {}",
            slots.shape(),
            inputs.k.cols()
        )));
    }
    let write = softmax_rows(&slots.matmul_nt(&inputs.k)?.scale(inputs.scale), None)?;
    let ks = write.matmul(&inputs.k)?;
    let vs = write.matmul(&inputs.v)?;
    attend(&inputs.q, &ks, &vs, inputs.scale, |_, _| true)
}

/// Every method of the taxonomy behind one call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AttentionMethod {
    /// Sparse softmax attention under a mask pattern.
    Masked { pattern: MaskPattern },
    Linear,
    Sigmoid { bias: Option<f64> },
    KvCompressed,
    Agent { down_factor: usize },
    /// Slots drawn from `N(0, 1)` with the given seed.
    Slot { slots: usize, seed: u64 },
}

impl AttentionMethod {
    pub fn name(&self) -> String {
        match self {
            AttentionMethod::Masked { pattern } => pattern.name().to_string(),
            AttentionMethod::Linear => "linear".into(),
            AttentionMethod::Sigmoid { .. } => "sigmoid".into(),
            AttentionMethod::KvCompressed => "kv_compressed".into(),
            AttentionMethod::Agent { .. } => "agent".into(),
            AttentionMethod::Slot { .. } => "slot".into(),
        }
    }

    pub fn apply(&self, inputs: &AttentionInputs) -> Result<Matrix> {
        match *self {
            AttentionMethod::Masked { pattern } => {
                let mask = AttentionMask::build(inputs.grid, pattern)?;
                masked_attention(inputs, &mask)
            }
            AttentionMethod::Linear => linear_attention(inputs),
            AttentionMethod::Sigmoid { bias } => sigmoid_attention(inputs, bias),
            AttentionMethod::KvCompressed => {
                kv_compressed_attention(inputs, &KvCompressor::average_pooling(inputs.k.cols()))
            }
            AttentionMethod::Agent { down_factor } => agent_attention(inputs, down_factor),
            AttentionMethod::Slot { slots, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = Matrix::randn(slots, inputs.k.cols(), 1.0, &mut rng);
                slot_attention(inputs, &p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{build_clear, build_full};

    /// Independent dense attention: explicit loops, own softmax.
    fn dense_oracle(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64, keep: impl Fn(usize, usize) -> bool) -> Matrix {
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let s: Vec<f64> = (0..k.rows())
                .map(|j| {
                    if keep(i, j) {
                        scale * (0..q.cols()).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out[(i, c)] += e[j] / z * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_value() {
        let g = TokenGrid::new(1, 0, 0);
        let inp = AttentionInputs::random(g, 3, 1);
        let out = masked_attention(&inp, &build_full(g)).unwrap();
        assert!(out.max_abs_diff(&inp.v) < 1e-15);
    }

    #[test]
    fn identity_mask_returns_values() {
        let g = TokenGrid::image(3, 4);
        let inp = AttentionInputs::random(g, 4, 2);
        let eye = AttentionMask::from_fn(g, |i, j| i == j);
        let out = masked_attention(&inp, &eye).unwrap();
        assert!(out.max_abs_diff(&inp.v) < 1e-15);
    }

    #[test]
    fn full_mask_matches_dense_oracle() {
        let g = TokenGrid::new(4, 4, 5);
        let inp = AttentionInputs::random(g, 8, 3);
        let out = masked_attention(&inp, &build_full(g)).unwrap();
        let oracle = dense_oracle(&inp.q, &inp.k, &inp.v, inp.scale, |_, _| true);
        assert!(out.rel_err(&oracle) < 1e-10);
    }

    #[test]
    fn sparse_mask_matches_dense_oracle() {
        let g = TokenGrid::new(2, 5, 5);
        let inp = AttentionInputs::random(g, 6, 4);
        let mask = build_clear(g, 2.0).unwrap();
        let out = masked_attention(&inp, &mask).unwrap();
        let oracle = dense_oracle(&inp.q, &inp.k, &inp.v, inp.scale, |i, j| mask.get(i, j));
        assert!(out.rel_err(&oracle) < 1e-10);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let g = TokenGrid::image(2, 2);
        let inp = AttentionInputs::random(g, 2, 5);
        let holey = AttentionMask::from_fn(g, |i, _| i != 1);
        assert!(masked_attention(&inp, &holey).is_err());
        let wrong = build_full(TokenGrid::image(3, 3));
        assert!(masked_attention(&inp, &wrong).is_err());
    }

    #[test]
    fn weights_are_row_stochastic() {
        let g = TokenGrid::new(3, 6, 6);
        let inp = AttentionInputs::random(g, 4, 6);
        let w = attention_weights(&inp, &build_clear(g, 2.5).unwrap()).unwrap();
        for i in 0..w.rows() {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// `n × m` normalized-similarity form of linear attention.
    fn linear_oracle(inp: &AttentionInputs) -> (Matrix, Matrix) {
        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        let sim = Matrix::from_fn(inp.q.rows(), inp.k.rows(), |i, j| {
            (0..inp.q.cols()).map(|c| phi(inp.q[(i, c)]) * phi(inp.k[(j, c)])).sum()
        });
        let mut w = sim.clone();
        for i in 0..w.rows() {
            let z: f64 = w.row(i).iter().sum();
            w.row_mut(i).iter_mut().for_each(|x| *x /= z);
        }
        (w.matmul(&inp.v).unwrap(), w)
    }

    #[test]
    fn linear_matches_quadratic_form() {
        let inp = AttentionInputs::random(TokenGrid::new(3, 4, 4), 5, 7);
        let (oracle, weights) = linear_oracle(&inp);
        assert!(linear_attention(&inp).unwrap().rel_err(&oracle) < 1e-10);
        for i in 0..weights.rows() {
            assert!(weights.row(i).iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn linear_degenerate_keys() {
        let g = TokenGrid::new(1, 0, 0);
        let inp = AttentionInputs::random(g, 3, 8);
        let q = Matrix::randn(5, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let single = AttentionInputs { q, ..inp };
        let out = linear_attention(&single).unwrap();
        for i in 0..5 {
            assert!((0..3).all(|c| (out[(i, c)] - single.v[(0, c)]).abs() < 1e-14));
        }

        let mut inp = AttentionInputs::random(TokenGrid::image(3, 3), 4, 9);
        let first = inp.k.row(0).to_vec();
        for r in 0..9 {
            inp.k.row_mut(r).copy_from_slice(&first);
        }
        let mean = inp.v.column_mean();
        let out = linear_attention(&inp).unwrap();
        for i in 0..9 {
            assert!(out.row(i).iter().zip(mean.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn sigmoid_examples() {
        let g = TokenGrid::image(2, 3);
        let mut inp = AttentionInputs::random(g, 4, 10);
        inp.q = Matrix::zeros(6, 4);
        let out = sigmoid_attention(&inp, Some(0.0)).unwrap();
        let colsum = inp.v.column_mean().scale(6.0 * 0.5);
        for i in 0..6 {
            assert!(out.row(i).iter().zip(colsum.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let vanishing = sigmoid_attention(&inp, Some(-800.0)).unwrap();
        assert!(vanishing.max_abs() < 1e-300);

        let inp = AttentionInputs::random(g, 4, 11);
        let b = default_sigmoid_bias(6);
        let direct = Matrix::from_fn(6, 4, |i, c| {
            (0..6)
                .map(|j| {
                    let s: f64 = (0..4).map(|d| inp.q[(i, d)] * inp.k[(j, d)]).sum();
                    (1.0 / (1.0 + (-(s * inp.scale + b)).exp())) * inp.v[(j, c)]
                })
                .sum()
        });
        assert!(sigmoid_attention(&inp, None).unwrap().rel_err(&direct) < 1e-12);
    }

    #[test]
    fn kv_compression_examples() {
        let g = TokenGrid::image(4, 4);
        let v = Matrix::from_fn(16, 1, |r, _| (r + 1) as f64);
        let c = KvCompressor::compress(&v, &g, &[[1.0 / 16.0; 16]]).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert!((c[(0, 0)] - 8.5).abs() < 1e-14);

        let g = TokenGrid::new(3, 8, 12);
        let constant = Matrix::filled(g.n_tokens(), 2, 0.75);
        let c = KvCompressor::compress(&constant, &g, &[[1.0 / 16.0; 16]; 2]).unwrap();
        assert_eq!(c.rows(), 3 + 2 * 3);
        assert!(c.as_slice().iter().all(|&x| (x - 0.75).abs() < 1e-15));

        // padding a 5×6 grid up to 8×8 gives 2×2 compressed keys
        let g = TokenGrid::new(1, 5, 6);
        let inp = AttentionInputs::random(g, 3, 12);
        assert_eq!(KvCompressor::compressed_dims(&g), (2, 2));
        assert!(kv_compressed_attention(&inp, &KvCompressor::average_pooling(3)).is_ok());
    }

    #[test]
    fn agent_examples() {
        // one agent: every output row is that agent's aggregate
        let g = TokenGrid::image(2, 2);
        let inp = AttentionInputs::random(g, 4, 13);
        let out = agent_attention(&inp, 2).unwrap();
        let agent = downsample_tokens(&inp.q, &g, 2).unwrap();
        let a = dense_oracle(&agent, &inp.k, &inp.v, inp.scale, |_, _| true);
        for i in 0..4 {
            assert!(out.row(i).iter().zip(a.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        // factor 1, no text: agents are the queries themselves
        let g = TokenGrid::image(3, 3);
        let inp = AttentionInputs::random(g, 4, 14);
        let stage1 = dense_oracle(&inp.q, &inp.k, &inp.v, inp.scale, |_, _| true);
        let staged = dense_oracle(&inp.q, &inp.q, &stage1, inp.scale, |_, _| true);
        assert!(agent_attention(&inp, 1).unwrap().rel_err(&staged) < 1e-10);
        assert!(agent_attention(&inp, 2).is_err());
    }

    #[test]
    fn agent_matches_staged_oracle_with_text() {
        let g = TokenGrid::new(2, 4, 6);
        let inp = AttentionInputs::random(g, 6, 15);
        let agents = downsample_tokens(&inp.q, &g, 2).unwrap();
        assert_eq!(agents.rows(), 2 + 6);
        let a = dense_oracle(&agents, &inp.k, &inp.v, inp.scale, |_, _| true);
        let o = dense_oracle(&inp.q, &agents, &a, inp.scale, |_, _| true);
        assert!(agent_attention(&inp, 2).unwrap().rel_err(&o) < 1e-10);
    }

    #[test]
    fn slot_examples() {
        let g = TokenGrid::new(1, 3, 3);
        let inp = AttentionInputs::random(g, 4, 16);
        let p = Matrix::randn(1, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let out = slot_attention(&inp, &p).unwrap();
        for i in 1..out.rows() {
            assert!(out.row(i).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        let zero_slot = Matrix::zeros(1, 4);
        let out = slot_attention(&inp, &zero_slot).unwrap();
        let mean = inp.v.column_mean();
        assert!(out.row(3).iter().zip(mean.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));

        let p = Matrix::randn(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let write = dense_oracle(&p, &inp.k, &Matrix::identity(inp.k.rows()), inp.scale, |_, _| true);
        let ks = write.matmul(&inp.k).unwrap();
        let vs = write.matmul(&inp.v).unwrap();
        let o = dense_oracle(&inp.q, &ks, &vs, inp.scale, |_, _| true);
        assert!(slot_attention(&inp, &p).unwrap().rel_err(&o) < 1e-10);
        assert!(slot_attention(&inp, &Matrix::zeros(0, 4)).is_err());
    }

    #[test]
    fn method_enum_dispatches() {
        let g = TokenGrid::new(2, 4, 4);
        let inp = AttentionInputs::random(g, 4, 17);
        let methods = [
            AttentionMethod::Masked { pattern: MaskPattern::Clear { radius: 2.0 } },
            AttentionMethod::Masked { pattern: MaskPattern::Swin { window: 2, shift: 1, layer: 1 } },
            AttentionMethod::Linear,
            AttentionMethod::Sigmoid { bias: None },
            AttentionMethod::KvCompressed,
            AttentionMethod::Agent { down_factor: 2 },
            AttentionMethod::Slot { slots: 3, seed: 1 },
        ];
        for m in methods {
            let out = m.apply(&inp).unwrap();
            assert_eq!(out.shape(), (18, 4), "{}", m.name());
            assert!(out.is_finite());
        }
    }
}
