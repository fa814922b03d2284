//! Toy joint text-image diffusion transformer.
//!
//! Every block runs one attention call over `[text; image]` tokens (RoPE on
//! image positions, text at the origin), then a per-token SiLU MLP. A
//! timestep embedding is added to every token at each block input. The model
//! predicts the flow-matching velocity `ε − z0` for the image tokens.
//!
//! The teacher uses full attention in every layer; a student is the same
//! network with a local mask per layer. Distillation only updates the
//! attention projections (`block*.attn.*`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{rms_norm, Tape, Var};
use crate::error::{LabError, Result};
use crate::geometry::TokenGrid;
use crate::mask::{AttentionMask, MaskPattern};
use crate::report::{Cell, Table};
use crate::rope::{RopeConfig, RopeTable};
use crate::tensor::{silu, Matrix};
use crate::zoo::{attend, attend_with_lse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub n_text: usize,
    pub height: usize,
    pub width: usize,
    /// Latent channels per image token.
    pub in_dim: usize,
    /// Model width.
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub ntk_factor: f64,
    pub norm_eps: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            n_text: 4,
            height: 8,
            width: 8,
            in_dim: 4,
            dim: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 2,
            rope_base: 100.0,
            ntk_factor: 1.0,
            norm_eps: 1e-6,
        }
    }
}

impl DitConfig {
    pub fn grid(&self) -> TokenGrid {
        TokenGrid::new(self.n_text, self.height, self.width)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn rope_config(&self) -> RopeConfig {
        let mut r = RopeConfig::new(self.head_dim()).with_ntk(self.ntk_factor);
        r.base = self.rope_base;
        r
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(LabError::Config(format!(
                "dim {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.in_dim == 0 || self.mlp_ratio == 0 {
            return Err(LabError::Config("blocks, in_dim and mlp_ratio must be positive".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(LabError::Config("empty image grid".into()));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(LabError::Config(format!("dim {} must be even", self.dim)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(LabError::Config("norm_eps must be positive".into()));
        }
        self.rope_config().validate()
    }
}

/// Named weight tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    tensors: BTreeMap<String, Matrix>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| LabError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| LabError::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Attention projections: the only weights distillation may change.
    pub fn is_attention(name: &str) -> bool {
        name.contains(".attn.")
    }

    pub fn attention_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|n| Self::is_attention(n)).cloned().collect()
    }

    /// True when every tensor selected by `filter` has identical bits.
    pub fn bits_equal(&self, other: &Params, filter: impl Fn(&str) -> bool) -> bool {
        let mine: Vec<_> = self.tensors.iter().filter(|(n, _)| filter(n)).collect();
        let theirs: Vec<_> = other.tensors.iter().filter(|(n, _)| filter(n)).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.as_slice()
                        .iter()
                        .zip(b.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|m| m.rows() * m.cols()).sum()
    }
}

fn param_shapes(cfg: &DitConfig) -> Vec<(String, (usize, usize), f64)> {
    let c = cfg.dim;
    let hidden = c * cfg.mlp_ratio;
    let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
    let mut v = vec![
        ("embed.img.w".to_string(), (cfg.in_dim, c), inv(cfg.in_dim)),
        ("embed.img.b".to_string(), (1, c), 0.0),
        ("embed.txt.w".to_string(), (c, c), inv(c)),
        ("time.w1".to_string(), (c, c), inv(c)),
        ("time.b1".to_string(), (1, c), 0.0),
        ("time.w2".to_string(), (c, c), inv(c)),
        ("time.b2".to_string(), (1, c), 0.0),
    ];
    for b in 0..cfg.blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            v.push((format!("block{b}.attn.{w}"), (c, c), inv(c)));
        }
        v.push((format!("block{b}.mlp.w1"), (c, hidden), inv(c)));
        v.push((format!("block{b}.mlp.b1"), (1, hidden), 0.0));
        v.push((format!("block{b}.mlp.w2"), (hidden, c), inv(hidden)));
        v.push((format!("block{b}.mlp.b2"), (1, c), 0.0));
    }
    v.push(("out.w".to_string(), (c, cfg.in_dim), 0.1 * inv(c)));
    v.push(("out.b".to_string(), (1, cfg.in_dim), 0.0));
    v
}

/// Sinusoidal timestep features, `1 × dim`.
pub fn time_features(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    Matrix::from_fn(1, dim, |_, k| {
        let f = (-(10_000f64.ln()) * (k % half) as f64 / half as f64).exp();
        let a = 1000.0 * t * f;
        if k < half {
            a.cos()
        } else {
            a.sin()
        }
    })
}

/// Per-layer attention mask, compiled for both forward paths.
#[derive(Debug, Clone)]
struct LayerMask {
    pattern: MaskPattern,
    bits: Option<Arc<AttentionMask>>,
    additive: Option<Arc<Matrix>>,
}

impl LayerMask {
    fn compile(grid: TokenGrid, pattern: MaskPattern) -> Result<Self> {
        if pattern == MaskPattern::Full {
            return Ok(LayerMask {
                pattern,
                bits: None,
                additive: None,
            });
        }
        let bits = AttentionMask::build(grid, pattern)?;
        let n = bits.n();
        let additive = Matrix::from_fn(n, n, |i, j| if bits.get(i, j) { 0.0 } else { f64::NEG_INFINITY });
        Ok(LayerMask {
            pattern,
            bits: Some(Arc::new(bits)),
            additive: Some(Arc::new(additive)),
        })
    }

    fn allows(&self, i: usize, j: usize) -> bool {
        self.bits.as_ref().is_none_or(|b| b.get(i, j))
    }
}

/// Output of one plain forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DitOutput {
    /// Velocity prediction for the image tokens, `n_image × in_dim`.
    pub pred: Matrix,
    /// Per-layer attention outputs (after the output projection), `n × dim`.
    pub attn: Vec<Matrix>,
}

/// Residual stream and projections of one block before attention.
#[derive(Debug, Clone)]
pub struct BlockQkv {
    pub u: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyDit {
    cfg: DitConfig,
    params: Params,
    masks: Vec<LayerMask>,
    rope: Arc<RopeTable>,
}

impl ToyDit {
    /// Randomly initialised model with full attention in every layer.
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (r, c), std) in param_shapes(&cfg) {
            let m = if std == 0.0 {
                Matrix::zeros(r, c)
            } else {
                Matrix::randn(r, c, std, &mut rng)
            };
            tensors.insert(name, m);
        }
        Self::assemble(cfg.clone(), Params { tensors }, vec![MaskPattern::Full; cfg.blocks])
    }

    fn assemble(cfg: DitConfig, params: Params, masks: Vec<MaskPattern>) -> Result<Self> {
        cfg.validate()?;
        let expected = param_shapes(&cfg);
        if expected.len() != params.tensors.len() {
            return Err(LabError::Config(format!(
                "{} parameters for a model needing {}",
                params.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            let got = params.get(name)?.shape();
            if got != *shape {
                return Err(LabError::Shape(format!("{name}: expected {shape:?}, got {got:?}")));
            }
        }
        if masks.len() != cfg.blocks {
            return Err(LabError::Config(format!(
                "{} layer masks for {} blocks",
                masks.len(),
                cfg.blocks
            )));
        }
        let grid = cfg.grid();
        let masks = masks
            .into_iter()
            .map(|p| LayerMask::compile(grid, p))
            .collect::<Result<Vec<_>>>()?;
        let rope = Arc::new(RopeTable::for_grid(&grid, &cfg.rope_config())?);
        Ok(ToyDit {
            cfg,
            params,
            masks,
            rope,
        })
    }

    /// Same weights, different per-layer masks.
    pub fn with_masks(&self, masks: Vec<MaskPattern>) -> Result<Self> {
        Self::assemble(self.cfg.clone(), self.params.clone(), masks)
    }

    /// Student initialised from this model with one mask in every layer.
    pub fn student(&self, pattern: MaskPattern) -> Result<Self> {
        self.with_masks(vec![pattern; self.cfg.blocks])
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn grid(&self) -> TokenGrid {
        self.cfg.grid()
    }

    pub fn rope_table(&self) -> &Arc<RopeTable> {
        &self.rope
    }

    pub fn mask_patterns(&self) -> Vec<MaskPattern> {
        self.masks.iter().map(|m| m.pattern).collect()
    }

    /// Whether layer `b` lets token `i` attend to token `j`.
    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        self.masks[b].allows(i, j)
    }

    fn w(&self, name: &str) -> &Matrix {
        &self.params.tensors[name]
    }

    fn check_inputs(&self, z_t: &Matrix, y: &Matrix) -> Result<()> {
        let g = self.grid();
        if z_t.shape() != (g.n_image(), self.cfg.in_dim) {
            return Err(LabError::Shape(format!(
                "latent {:?}, expected {:?}",
                z_t.shape(),
                (g.n_image(), self.cfg.in_dim)
            )));
        }
        if y.shape() != (g.n_text, self.cfg.dim) {
            return Err(LabError::Shape(format!(
                "condition {:?}, expected {:?}",
                y.shape(),
                (g.n_text, self.cfg.dim)
            )));
        }
        Ok(())
    }

    pub fn time_embedding(&self, t: f64) -> Result<Matrix> {
        let f = time_features(t, self.cfg.dim);
        let h = f
            .matmul(self.w("time.w1"))?
            .add_row_broadcast(self.w("time.b1"))?
            .map(silu);
        h.matmul(self.w("time.w2"))?.add_row_broadcast(self.w("time.b2"))
    }

    /// Input tokens `[y · W_txt; z_t · W_img + b]`.
    pub fn embed(&self, z_t: &Matrix, y: &Matrix) -> Result<Matrix> {
        self.check_inputs(z_t, y)?;
        self.embed_rows(z_t, y)
    }

    /// [`embed`](Self::embed) for any subset of image rows.
    pub fn embed_rows(&self, z_rows: &Matrix, y: &Matrix) -> Result<Matrix> {
        let z_t = z_rows;
        let text = y.matmul(self.w("embed.txt.w"))?;
        let img = z_t
            .matmul(self.w("embed.img.w"))?
            .add_row_broadcast(self.w("embed.img.b"))?;
        Matrix::vstack(&[&text, &img])
    }

    /// Row-local part of block `b` before attention. `rope` must hold one
    /// row per row of `x`.
    pub fn block_qkv(&self, b: usize, x: &Matrix, temb: &Matrix, rope: &RopeTable) -> Result<BlockQkv> {
        let u = x.add_row_broadcast(temb)?;
        let a = rms_norm(&u, self.cfg.norm_eps);
        let q = rope.apply(&a.matmul(self.w(&format!("block{b}.attn.wq")))?)?;
        let k = rope.apply(&a.matmul(self.w(&format!("block{b}.attn.wk")))?)?;
        let v = a.matmul(self.w(&format!("block{b}.attn.wv")))?;
        Ok(BlockQkv { u, q, k, v })
    }

    /// Row-local part of block `b` after attention: returns the next
    /// residual stream and the projected attention output.
    pub fn block_finish(&self, b: usize, u: &Matrix, o: &Matrix) -> Result<(Matrix, Matrix)> {
        let attn = o.matmul(self.w(&format!("block{b}.attn.wo")))?;
        let x = u.add(&attn)?;
        let m = rms_norm(&x, self.cfg.norm_eps);
        let h = m
            .matmul(self.w(&format!("block{b}.mlp.w1")))?
            .add_row_broadcast(self.w(&format!("block{b}.mlp.b1")))?
            .map(silu);
        let mlp = h
            .matmul(self.w(&format!("block{b}.mlp.w2")))?
            .add_row_broadcast(self.w(&format!("block{b}.mlp.b2")))?;
        Ok((x.add(&mlp)?, attn))
    }

    /// Final norm and projection of image rows.
    pub fn project_out(&self, x_img: &Matrix) -> Result<Matrix> {
        rms_norm(x_img, self.cfg.norm_eps)
            .matmul(self.w("out.w"))?
            .add_row_broadcast(self.w("out.b"))
    }

    /// Attention scale `1/√head_dim`.
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.cfg.head_dim() as f64).sqrt()
    }

    /// Deterministic forward pass on one sample.
    pub fn forward(&self, z_t: &Matrix, t: f64, y: &Matrix) -> Result<DitOutput> {
        let mut x = self.embed(z_t, y)?;
        let temb = self.time_embedding(t)?;
        let mut attn = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let qkv = self.block_qkv(b, &x, &temb, &self.rope)?;
            let o = multihead(&qkv.q, &qkv.k, &qkv.v, self.cfg.heads, self.attn_scale(), |i, j| {
                self.masks[b].allows(i, j)
            })?;
            let (next, a) = self.block_finish(b, &qkv.u, &o)?;
            x = next;
            attn.push(a);
        }
        let n_text = self.cfg.n_text;
        let pred = self.project_out(&x.slice_rows(n_text, x.rows()))?;
        Ok(DitOutput { pred, attn })
    }

    /// Records every parameter as a tape leaf.
    pub fn params_on_tape(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .tensors
            .iter()
            .map(|(n, m)| (n.clone(), tape.leaf(m.clone())))
            .collect()
    }

    /// Differentiable forward pass. Returns the prediction and the per-layer
    /// attention outputs as tape variables.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        z_t: &Matrix,
        t: f64,
        y: &Matrix,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_inputs(z_t, y)?;
        let p = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| LabError::Tape(format!("parameter {name} not on tape")))
        };
        let eps = self.cfg.norm_eps;
        let d = self.cfg.head_dim();

        let feat = tape.leaf(time_features(t, self.cfg.dim));
        let h = tape.matmul(feat, p("time.w1")?)?;
        let h = tape.add_row(h, p("time.b1")?)?;
        let h = tape.silu(h)?;
        let temb = tape.matmul(h, p("time.w2")?)?;
        let temb = tape.add_row(temb, p("time.b2")?)?;

        let yv = tape.leaf(y.clone());
        let text = tape.matmul(yv, p("embed.txt.w")?)?;
        let zv = tape.leaf(z_t.clone());
        let img = tape.matmul(zv, p("embed.img.w")?)?;
        let img = tape.add_row(img, p("embed.img.b")?)?;
        let mut x = tape.vstack(&[text, img])?;

        let mut attn = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let bp = |w: &str| p(&format!("block{b}.{w}"));
            let u = tape.add_row(x, temb)?;
            let a = tape.rms_norm(u, eps)?;
            let q = tape.matmul(a, bp("attn.wq")?)?;
            let q = tape.rope(q, &self.rope)?;
            let k = tape.matmul(a, bp("attn.wk")?)?;
            let k = tape.rope(k, &self.rope)?;
            let v = tape.matmul(a, bp("attn.wv")?)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for hd in 0..self.cfg.heads {
                let (s, e) = (hd * d, (hd + 1) * d);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let sc = tape.matmul_nt(qh, kh)?;
                let sc = tape.scale(sc, self.attn_scale())?;
                let pr = tape.softmax(sc, self.masks[b].additive.as_deref())?;
                heads.push(tape.matmul(pr, vh)?);
            }
            let o = tape.hstack(&heads)?;
            let ao = tape.matmul(o, bp("attn.wo")?)?;
            let xa = tape.add(u, ao)?;
            let m = tape.rms_norm(xa, eps)?;
            let h1 = tape.matmul(m, bp("mlp.w1")?)?;
            let h1 = tape.add_row(h1, bp("mlp.b1")?)?;
            let h1 = tape.silu(h1)?;
            let h2 = tape.matmul(h1, bp("mlp.w2")?)?;
            let h2 = tape.add_row(h2, bp("mlp.b2")?)?;
            x = tape.add(xa, h2)?;
            attn.push(ao);
        }
        let n = self.grid().n_tokens();
        let img = tape.slice_rows(x, self.cfg.n_text, n)?;
        let f = tape.rms_norm(img, eps)?;
        let pred = tape.matmul(f, p("out.w")?)?;
        let pred = tape.add_row(pred, p("out.b")?)?;
        Ok((pred, attn))
    }

    /// Writes a versioned checkpoint: magic, version, JSON header, then named
    /// row-major `f64` tensors.
    pub fn save(&self, mut w: impl Write) -> Result<()> {
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            masks: self.mask_patterns(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| LabError::Format(e.to_string()))?;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&[CKPT_VERSION])?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.params.tensors.len() as u32).to_le_bytes())?;
        for (name, m) in &self.params.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(LabError::Format("not a toy-dit checkpoint".into()));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != CKPT_VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {}", ver[0])));
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| LabError::Format(e.to_string()))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| LabError::Format(e.to_string()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = vec![0.0; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        Self::assemble(header.config, Params { tensors }, header.masks)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"CLRDIT\0\0";
const CKPT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DitConfig,
    masks: Vec<MaskPattern>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Multi-head masked attention over column blocks of `q`, `k`, `v`.
pub(crate) fn multihead(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    scale: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<Matrix> {
    let d = q.cols() / heads;
    let outs = (0..heads)
        .map(|h| {
            let (s, e) = (h * d, (h + 1) * d);
            attend(&q.slice_cols(s, e), &k.slice_cols(s, e), &v.slice_cols(s, e), scale, &allowed)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::hstack(&outs.iter().collect::<Vec<_>>())
}

/// Like [`multihead`], also returning per-head log partition masses as an
/// `rows × heads` matrix.
pub(crate) fn multihead_with_lse(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    scale: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<(Matrix, Matrix)> {
    let d = q.cols() / heads;
    let mut lse = Matrix::zeros(q.rows(), heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * d, (h + 1) * d);
        let (o, l) = attend_with_lse(&q.slice_cols(s, e), &k.slice_cols(s, e), &v.slice_cols(s, e), scale, &allowed)?;
        for (r, val) in l.into_iter().enumerate() {
            lse[(r, h)] = val;
        }
        outs.push(o);
    }
    Ok((Matrix::hstack(&outs.iter().collect::<Vec<_>>())?, lse))
}

fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok(d.frobenius_sq() / (d.rows() * d.cols()).max(1) as f64)
}

/// One flow-matching training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub z0: Matrix,
    pub eps: Matrix,
    pub t: f64,
    pub y: Matrix,
}

impl FlowSample {
    /// `z_t = (1 − t)·z0 + t·ε`
    pub fn z_t(&self) -> Matrix {
        self.z0
            .zip_map(&self.eps, |a, e| (1.0 - self.t) * a + self.t * e)
            .expect("z0 and eps share a shape")
    }

    /// Velocity target `ε − z0`.
    pub fn target(&self) -> Matrix {
        self.eps.sub(&self.z0).expect("z0 and eps share a shape")
    }

    pub fn draw(pair: &DataPair, rng: &mut impl Rng) -> Self {
        let t: f64 = rng.gen();
        let eps = Matrix::randn(pair.z0.rows(), pair.z0.cols(), 1.0, rng);
        FlowSample {
            z0: pair.z0.clone(),
            eps,
            t,
            y: pair.y.clone(),
        }
    }
}

/// Mean squared error between the velocity target and the prediction.
pub fn flow_matching_loss(model: &ToyDit, sample: &FlowSample) -> Result<f64> {
    let out = model.forward(&sample.z_t(), sample.t, &sample.y)?;
    mse(&out.pred, &sample.target())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Blocks whose attention outputs enter `L_attn`. Empty gives `L_attn = 0`.
    pub attn_loss_layers: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig::for_blocks(DitConfig::default().blocks)
    }
}

impl DistillConfig {
    /// Defaults with the attention loss on the second half of the blocks.
    pub fn for_blocks(blocks: usize) -> Self {
        DistillConfig {
            alpha: 0.5,
            beta: 0.5,
            attn_loss_layers: (blocks / 2..blocks).collect(),
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(LabError::Config("alpha and beta must be non-negative".into()));
        }
        if let Some(&l) = self.attn_loss_layers.iter().find(|&&l| l >= blocks) {
            return Err(LabError::Config(format!("attention-loss layer {l} >= {blocks} blocks")));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(LabError::Config("batch and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistillLosses {
    pub l_fm: f64,
    pub l_pred: f64,
    pub l_attn: f64,
    pub total: f64,
}

impl DistillLosses {
    fn combine(l_fm: f64, l_pred: f64, l_attn: f64, cfg: &DistillConfig) -> Self {
        DistillLosses {
            l_fm,
            l_pred,
            l_attn,
            total: l_fm + cfg.alpha * l_pred + cfg.beta * l_attn,
        }
    }
}

/// Flow-matching, prediction and attention-output losses for one sample.
pub fn distill_losses(
    student: &ToyDit,
    teacher: &ToyDit,
    sample: &FlowSample,
    cfg: &DistillConfig,
) -> Result<DistillLosses> {
    cfg.validate(student.cfg.blocks)?;
    if teacher.cfg != student.cfg {
        return Err(LabError::Config("teacher and student architectures differ".into()));
    }
    let z_t = sample.z_t();
    let s = student.forward(&z_t, sample.t, &sample.y)?;
    let t = teacher.forward(&z_t, sample.t, &sample.y)?;
    let l_fm = mse(&s.pred, &sample.target())?;
    let l_pred = mse(&s.pred, &t.pred)?;
    let mut l_attn = 0.0;
    for &l in &cfg.attn_loss_layers {
        l_attn += mse(&s.attn[l], &t.attn[l])?;
    }
    if !cfg.attn_loss_layers.is_empty() {
        l_attn /= cfg.attn_loss_layers.len() as f64;
    }
    Ok(DistillLosses::combine(l_fm, l_pred, l_attn, cfg))
}

/// Mean losses over a fixed evaluation set.
pub fn mean_distill_losses(
    student: &ToyDit,
    teacher: &ToyDit,
    samples: &[FlowSample],
    cfg: &DistillConfig,
) -> Result<DistillLosses> {
    let mut acc = DistillLosses::default();
    for s in samples {
        let l = distill_losses(student, teacher, s, cfg)?;
        acc.l_fm += l.l_fm;
        acc.l_pred += l.l_pred;
        acc.l_attn += l.l_attn;
    }
    let n = samples.len().max(1) as f64;
    Ok(DistillLosses::combine(acc.l_fm / n, acc.l_pred / n, acc.l_attn / n, cfg))
}

/// Losses and gradients of one sample on a private tape.
///
/// `teacher` is `None` for plain flow-matching training.
pub fn sample_gradients(
    model: &ToyDit,
    teacher: Option<&DitOutput>,
    sample: &FlowSample,
    cfg: &DistillConfig,
    trainable: &[String],
) -> Result<(DistillLosses, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = model.params_on_tape(&mut tape);
    let (pred, attn) = model.forward_tape(&mut tape, &vars, &sample.z_t(), sample.t, &sample.y)?;
    let target = tape.leaf(sample.target());
    let l_fm = tape.mse(pred, target)?;
    let mut total = l_fm;
    let (mut v_pred, mut v_attn) = (0.0, 0.0);
    if let Some(t) = teacher {
        let tp = tape.leaf(t.pred.clone());
        let l_pred = tape.mse(pred, tp)?;
        v_pred = tape.scalar(l_pred)?;
        let w = tape.scale(l_pred, cfg.alpha)?;
        total = tape.add(total, w)?;
        if !cfg.attn_loss_layers.is_empty() {
            let mut acc: Option<Var> = None;
            for &l in &cfg.attn_loss_layers {
                let ta = tape.leaf(t.attn[l].clone());
                let term = tape.mse(attn[l], ta)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let l_attn = tape.scale(acc.expect("non-empty"), 1.0 / cfg.attn_loss_layers.len() as f64)?;
            v_attn = tape.scalar(l_attn)?;
            let w = tape.scale(l_attn, cfg.beta)?;
            total = tape.add(total, w)?;
        }
    }
    let wrt = trainable
        .iter()
        .map(|n| {
            vars.get(n)
                .copied()
                .ok_or_else(|| LabError::Config(format!("unknown trainable {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = tape.grad_of(total, &wrt)?;
    let losses = DistillLosses {
        l_fm: tape.scalar(l_fm)?,
        l_pred: v_pred,
        l_attn: v_attn,
        total: tape.scalar(total)?,
    };
    Ok((losses, grads))
}

/// Adam with fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params, names: &[String], grads: &[Matrix]) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, name) in names.iter().enumerate() {
            let p = params.get_mut(name)?;
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-step batch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub losses: DistillLosses,
}

/// Loss curve as a `step,L_fm,L_pred,L_attn,total` table.
pub fn loss_table(records: &[LossRecord]) -> Table {
    let mut t = Table::new(&["step", "L_fm", "L_pred", "L_attn", "total"], 1);
    for r in records {
        t.push(vec![
            r.step.into(),
            r.losses.l_fm.into(),
            r.losses.l_pred.into(),
            r.losses.l_attn.into(),
            Cell::Float(r.losses.total),
        ])
        .expect("fixed width");
    }
    t
}

/// One optimisation step over a batch. Sample gradients are computed in
/// parallel and reduced in batch order, so results do not depend on
/// scheduling.
fn batch_step(
    model: &mut ToyDit,
    teacher: Option<&ToyDit>,
    batch: &[FlowSample],
    cfg: &DistillConfig,
    trainable: &[String],
    opt: &mut Adam,
    step: usize,
) -> Result<DistillLosses> {
    let results: Vec<Result<(DistillLosses, Vec<Matrix>)>> = std::thread::scope(|s| {
        let m: &ToyDit = model;
        let handles: Vec<_> = batch
            .iter()
            .map(|sample| {
                s.spawn(move || {
                    let t_out = match teacher {
                        Some(t) => Some(t.forward(&sample.z_t(), sample.t, &sample.y)?),
                        None => None,
                    };
                    sample_gradients(m, t_out.as_ref(), sample, cfg, trainable)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker")).collect()
    });
    let inv = 1.0 / batch.len() as f64;
    let mut mean = DistillLosses::default();
    let mut grads: Option<Vec<Matrix>> = None;
    for r in results {
        let (l, g) = r?;
        mean.l_fm += l.l_fm * inv;
        mean.l_pred += l.l_pred * inv;
        mean.l_attn += l.l_attn * inv;
        mean.total += l.total * inv;
        match grads.as_mut() {
            None => grads = Some(g.into_iter().map(|m| m.scale(inv)).collect()),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    a.add_assign(&gi.scale(inv))?;
                }
            }
        }
    }
    let grads = grads.unwrap_or_default();
    if !mean.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(LabError::Diverged {
            step,
            detail: format!(
                "L_fm={} L_pred={} L_attn={}",
                mean.l_fm, mean.l_pred, mean.l_attn
            ),
        });
    }
    opt.update(&mut model.params, trainable, &grads)?;
    Ok(mean)
}

/// Distills `teacher` into `student` by Adam on
/// `L_fm + α·L_pred + β·L_attn`, updating attention projections only.
pub fn train_distill(
    student: &mut ToyDit,
    teacher: &ToyDit,
    dataset: &[DataPair],
    cfg: &DistillConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate(student.cfg.blocks)?;
    if teacher.cfg != student.cfg {
        return Err(LabError::Config("teacher and student architectures differ".into()));
    }
    if dataset.is_empty() && cfg.steps > 0 {
        return Err(LabError::Config("empty distillation dataset".into()));
    }
    let trainable = student.params.attention_names();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<FlowSample> = (0..cfg.batch)
            .map(|_| {
                let i = rng.gen_range(0..dataset.len());
                FlowSample::draw(&dataset[i], &mut rng)
            })
            .collect();
        let losses = batch_step(student, Some(teacher), &batch, cfg, &trainable, &mut opt, step)?;
        curve.push(LossRecord { step, losses });
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch: 8,
            lr: 2e-3,
            seed: 1,
        }
    }
}

/// Trains every weight of `model` on the task's ground-truth distribution
/// with plain flow matching. Returns the per-step loss.
pub fn pretrain_teacher(model: &mut ToyDit, task: &SyntheticTask, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(LabError::Config("batch and lr must be positive".into()));
    }
    let trainable = model.params.names();
    let fm_only = DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        attn_loss_layers: Vec::new(),
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    };
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<FlowSample> = (0..cfg.batch)
            .map(|_| {
                let pair = task.sample(&mut rng);
                FlowSample::draw(&pair, &mut rng)
            })
            .collect();
        let l = batch_step(model, None, &batch, &fm_only, &trainable, &mut opt, step)?;
        losses.push(l.l_fm);
    }
    Ok(losses)
}

/// A clean latent and its condition tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPair {
    pub z0: Matrix,
    pub y: Matrix,
    pub class: usize,
}

/// Class-conditioned Gaussian-mixture token fields.
///
/// Each class has a fixed `n_text × dim` condition and a few smooth
/// sinusoidal mean fields; a sample picks one field and adds small noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub classes: usize,
    pub components: usize,
    pub noise_std: f64,
    conditions: Vec<Matrix>,
    means: Vec<Matrix>,
}

impl SyntheticTask {
    pub fn new(cfg: &DitConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(LabError::Config("need at least one class".into()));
        }
        let components = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conditions = (0..classes)
            .map(|_| Matrix::randn(cfg.n_text, cfg.dim, 1.0, &mut rng))
            .collect();
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let mut means = Vec::with_capacity(classes * components);
        for _ in 0..classes * components {
            let waves: Vec<(f64, f64, f64, f64)> = (0..cfg.in_dim)
                .map(|_| {
                    (
                        rng.gen_range(0.5..1.5),
                        rng.gen_range(0..3) as f64,
                        rng.gen_range(0..3) as f64,
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            means.push(Matrix::from_fn(cfg.height * cfg.width, cfg.in_dim, |tok, ch| {
                let (x, y) = ((tok % cfg.width) as f64, (tok / cfg.width) as f64);
                let (a, fx, fy, ph) = waves[ch];
                a * (std::f64::consts::TAU * (fx * x / w + fy * y / h) + ph).sin()
            }));
        }
        Ok(SyntheticTask {
            classes,
            components,
            noise_std: 0.1,
            conditions,
            means,
        })
    }

    pub fn condition(&self, class: usize) -> &Matrix {
        &self.conditions[class % self.classes]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DataPair {
        let class = rng.gen_range(0..self.classes);
        let comp = rng.gen_range(0..self.components);
        let mean = &self.means[class * self.components + comp];
        let noise = Matrix::randn(mean.rows(), mean.cols(), self.noise_std, rng);
        DataPair {
            z0: mean.add(&noise).expect("same shape"),
            y: self.conditions[class].clone(),
            class,
        }
    }

    /// Ground-truth samples, seeded.
    pub fn dataset(&self, count: usize, seed: u64) -> Vec<DataPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }
}

/// Euler integration of `dz/dt = v(z, t)` from `t = 1` down to `t = 0`.
pub fn euler_integrate(
    z1: Matrix,
    steps: usize,
    mut velocity: impl FnMut(&Matrix, f64) -> Result<Matrix>,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(LabError::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1;
    for s in 0..steps {
        let t = 1.0 - s as f64 * dt;
        let v = velocity(&z, t)?;
        z = z.zip_map(&v, |a, b| a - dt * b)?;
    }
    Ok(z)
}

/// Samples `count` latents from the teacher, cycling through the classes.
pub fn generate_teacher_dataset(
    teacher: &ToyDit,
    task: &SyntheticTask,
    count: usize,
    sampler_steps: usize,
    seed: u64,
) -> Result<Vec<DataPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = teacher.grid();
    (0..count)
        .map(|i| {
            let class = i % task.classes;
            let y = task.condition(class).clone();
            let eps = Matrix::randn(g.n_image(), teacher.cfg.in_dim, 1.0, &mut rng);
            let z0 = euler_integrate(eps, sampler_steps, |z, t| Ok(teacher.forward(z, t, &y)?.pred))?;
            Ok(DataPair { z0, y, class })
        })
        .collect()
}

/// Fixed evaluation samples drawn from `data`.
pub fn eval_samples(data: &[DataPair], count: usize, seed: u64) -> Vec<FlowSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| FlowSample::draw(&data[i % data.len()], &mut rng))
        .collect()
}
