use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{gemm, View};
use crate::archspace::ArchConfig;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Whether a tensor is drawn from the init normal or set to a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok: usize,
    pos: usize,
    emb_g: usize,
    emb_b: usize,
    layers: Vec<LayerOffsets>,
    pool_w: usize,
    pool_b: usize,
    cls_w: usize,
    cls_b: usize,
}

/// Names, shapes and positions of every tensor in the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    offsets: Offsets,
    total: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: &[usize], kind: TensorKind) -> usize {
        let offset = self.total;
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset,
            kind,
        };
        self.total += spec.len();
        self.tensors.push(spec);
        offset
    }
}

impl ParamLayout {
    pub fn new(config: &ArchConfig) -> Self {
        use TensorKind::*;
        let (v, h, d, s, c) = (
            config.vocab,
            config.hidden,
            config.ffn,
            config.max_seq_len,
            config.num_classes,
        );
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok = b.push("embeddings.token".into(), &[v, h], Weight);
        let pos = b.push("embeddings.position".into(), &[s, h], Weight);
        let emb_g = b.push("embeddings.norm.scale".into(), &[h], NormScale);
        let emb_b = b.push("embeddings.norm.shift".into(), &[h], NormShift);
        let layers = (0..config.layers)
            .map(|i| {
                let mut p = |name: &str, shape: &[usize], kind| {
                    b.push(format!("layers.{i}.{name}"), shape, kind)
                };
                LayerOffsets {
                    wq: p("attention.query.weight", &[h, h], Weight),
                    bq: p("attention.query.bias", &[h], Bias),
                    wk: p("attention.key.weight", &[h, h], Weight),
                    bk: p("attention.key.bias", &[h], Bias),
                    wv: p("attention.value.weight", &[h, h], Weight),
                    bv: p("attention.value.bias", &[h], Bias),
                    wo: p("attention.output.weight", &[h, h], Weight),
                    bo: p("attention.output.bias", &[h], Bias),
                    ln1_g: p("attention.norm.scale", &[h], NormScale),
                    ln1_b: p("attention.norm.shift", &[h], NormShift),
                    w1: p("ffn.up.weight", &[h, d], Weight),
                    b1: p("ffn.up.bias", &[d], Bias),
                    w2: p("ffn.down.weight", &[d, h], Weight),
                    b2: p("ffn.down.bias", &[h], Bias),
                    ln2_g: p("ffn.norm.scale", &[h], NormScale),
                    ln2_b: p("ffn.norm.shift", &[h], NormShift),
                }
            })
            .collect();
        let pool_w = b.push("pooler.weight".into(), &[h, h], Weight);
        let pool_b = b.push("pooler.bias".into(), &[h], Bias);
        let cls_w = b.push("classifier.weight".into(), &[h, c], Weight);
        let cls_b = b.push("classifier.bias".into(), &[c], Bias);
        ParamLayout {
            tensors: b.tensors,
            offsets: Offsets {
                tok,
                pos,
                emb_g,
                emb_b,
                layers,
                pool_w,
                pool_b,
                cls_w,
                cls_b,
            },
            total: b.total,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Gradient buffer laid out like [`EncoderModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients(vec![0.0; len])
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Dense BERT-style encoder classifier over a flat f64 parameter buffer.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ArchConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<u32>,
    /// Row offset of each sequence in the stacked activations, plus the total.
    starts: Vec<usize>,
    emb_norm: NormCache,
    layers: Vec<LayerCache>,
    final_hidden: Vec<f64>,
    pooled: Vec<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.starts.len() - 1
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, per sequence then per head, each `len x len`.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    norm1: NormCache,
    h1: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    norm2: NormCache,
}

impl EncoderModel {
    /// Fresh model: weights ~ N(0, 0.02²), norm scales 1, biases and shifts 0.
    pub fn init<R: Rng + ?Sized>(config: &ArchConfig, rng: &mut R) -> Result<Self> {
        config.check_shape()?;
        let layout = ParamLayout::new(config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = vec![0.0; layout.len()];
        for spec in layout.tensors() {
            let slot = &mut params[spec.range()];
            match spec.kind {
                TensorKind::Weight => slot.iter_mut().for_each(|w| *w = normal.sample(rng)),
                TensorKind::NormScale => slot.fill(1.0),
                TensorKind::Bias | TensorKind::NormShift => {}
            }
        }
        Ok(Self {
            config: *config,
            layout,
            params,
        })
    }

    /// Wraps an existing buffer; its length must match the layout.
    pub fn from_params(config: &ArchConfig, params: Vec<f64>) -> Result<Self> {
        config.check_shape()?;
        let layout = ParamLayout::new(config);
        if params.len() != layout.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters for {config}, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(Self {
            config: *config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.tensor(name)?.range();
        Some(&mut self.params[range])
    }

    /// Checks token ids and length against the config.
    pub fn check_input(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((position, &id)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab)
        {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Class logits for one sequence.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_cached(&[ids])?;
        Ok(logits)
    }

    /// Logits for each sequence, row-major `batch x num_classes`, plus the
    /// activations needed by [`EncoderModel::backward`].
    pub fn forward_cached<S: AsRef<[u32]>>(&self, batch: &[S]) -> Result<(Vec<f64>, ForwardCache)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let h = self.config.hidden;
        let mut starts = Vec::with_capacity(batch.len() + 1);
        let mut ids = Vec::new();
        starts.push(0);
        for seq in batch {
            let seq = seq.as_ref();
            self.check_input(seq)?;
            ids.extend_from_slice(seq);
            starts.push(ids.len());
        }
        let rows = ids.len();
        let o = &self.layout.offsets;
        let p = &self.params;

        let mut x = vec![0.0; rows * h];
        for s in 0..batch.len() {
            for (t, row) in (starts[s]..starts[s + 1]).enumerate() {
                let tok = &p[o.tok + ids[row] as usize * h..][..h];
                let pos = &p[o.pos + t * h..][..h];
                for (j, out) in x[row * h..(row + 1) * h].iter_mut().enumerate() {
                    *out = tok[j] + pos[j];
                }
            }
        }
        let emb_norm = layer_norm(&mut x, h, &p[o.emb_g..o.emb_g + h], &p[o.emb_b..o.emb_b + h]);

        let mut layers = Vec::with_capacity(self.config.layers);
        for lo in &o.layers {
            let (next, cache) = self.layer_forward(lo, x, &starts);
            layers.push(cache);
            x = next;
        }

        let b = batch.len();
        let c = self.config.num_classes;
        let mut pooled = vec![0.0; b * h];
        let first_rows = View {
            data: &x,
            offset: 0,
            rs: 0,
            cs: 1,
        };
        for (s, &start) in starts[..b].iter().enumerate() {
            gemm(
                1,
                h,
                h,
                1.0,
                View { offset: start * h, ..first_rows },
                View::rows(p, o.pool_w, h),
                0.0,
                &mut pooled,
                s * h,
                h,
            );
        }
        add_bias(&mut pooled, &p[o.pool_b..o.pool_b + h]);
        pooled.iter_mut().for_each(|v| *v = v.tanh());

        let mut logits = vec![0.0; b * c];
        for s in 0..b {
            gemm(
                1,
                h,
                c,
                1.0,
                View::rows(&pooled, s * h, h),
                View::rows(p, o.cls_w, c),
                0.0,
                &mut logits,
                s * c,
                c,
            );
        }
        add_bias(&mut logits, &p[o.cls_b..o.cls_b + c]);

        Ok((
            logits,
            ForwardCache {
                ids,
                starts,
                emb_norm,
                layers,
                final_hidden: x,
                pooled,
            },
        ))
    }

    fn layer_forward(&self, lo: &LayerOffsets, input: Vec<f64>, starts: &[usize]) -> (Vec<f64>, LayerCache) {
        let p = &self.params;
        let (h, d) = (self.config.hidden, self.config.ffn);
        let heads = self.config.heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = input.len() / h;

        let project = |w: usize, bias: usize, x: &[f64], out_dim: usize, in_dim: usize| {
            let mut y = vec![0.0; rows * out_dim];
            gemm(rows, in_dim, out_dim, 1.0, View::rows(x, 0, in_dim), View::rows(p, w, out_dim), 0.0, &mut y, 0, out_dim);
            add_bias(&mut y, &p[bias..bias + out_dim]);
            y
        };
        let q = project(lo.wq, lo.bq, &input, h, h);
        let k = project(lo.wk, lo.bk, &input, h, h);
        let v = project(lo.wv, lo.bv, &input, h, h);

        let prob_len: usize = starts.windows(2).map(|w| (w[1] - w[0]).pow(2) * heads).sum();
        let mut probs = vec![0.0; prob_len];
        let mut ctx = vec![0.0; rows * h];
        let mut pofs = 0;
        for w in starts.windows(2) {
            let (start, n) = (w[0], w[1] - w[0]);
            for a in 0..heads {
                let col = a * dh;
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    View::rows(&q, start * h + col, h),
                    View::rows(&k, start * h + col, h).t(),
                    0.0,
                    &mut probs,
                    pofs,
                    n,
                );
                for r in 0..n {
                    softmax_in_place(&mut probs[pofs + r * n..pofs + (r + 1) * n]);
                }
                gemm(
                    n,
                    n,
                    dh,
                    1.0,
                    View::rows(&probs, pofs, n),
                    View::rows(&v, start * h + col, h),
                    0.0,
                    &mut ctx,
                    start * h + col,
                    h,
                );
                pofs += n * n;
            }
        }

        let mut h1 = project(lo.wo, lo.bo, &ctx, h, h);
        for (y, x) in h1.iter_mut().zip(&input) {
            *y += x;
        }
        let norm1 = layer_norm(&mut h1, h, &p[lo.ln1_g..lo.ln1_g + h], &p[lo.ln1_b..lo.ln1_b + h]);

        let pre_act = project(lo.w1, lo.b1, &h1, d, h);
        let act: Vec<f64> = pre_act.iter().map(|&u| gelu(u)).collect();
        let mut out = project(lo.w2, lo.b2, &act, h, d);
        for (y, x) in out.iter_mut().zip(&h1) {
            *y += x;
        }
        let norm2 = layer_norm(&mut out, h, &p[lo.ln2_g..lo.ln2_g + h], &p[lo.ln2_b..lo.ln2_b + h]);

        (
            out,
            LayerCache {
                input,
                q,
                k,
                v,
                probs,
                ctx,
                norm1,
                h1,
                pre_act,
                act,
                norm2,
            },
        )
    }

    /// Accumulates `d(loss)/d(params)` into `grads`, given `d(loss)/d(logits)`
    /// laid out like the logits of the forward pass that produced `cache`.
    pub fn backward_into(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut Gradients) {
        let (h, c) = (self.config.hidden, self.config.num_classes);
        let b = cache.batch_size();
        assert_eq!(dlogits.len(), b * c, "dlogits shape");
        assert_eq!(grads.0.len(), self.params.len(), "gradient buffer shape");
        let o = &self.layout.offsets;
        let p = &self.params;
        let g = &mut grads.0;

        // classifier
        gemm(h, b, c, 1.0, View::rows(&cache.pooled, 0, h).t(), View::rows(dlogits, 0, c), 1.0, g, o.cls_w, c);
        add_column_sums(&mut g[o.cls_b..o.cls_b + c], dlogits, c);
        let mut dpooled = vec![0.0; b * h];
        gemm(b, c, h, 1.0, View::rows(dlogits, 0, c), View::rows(p, o.cls_w, c).t(), 0.0, &mut dpooled, 0, h);

        // pooler (tanh)
        for (dz, y) in dpooled.iter_mut().zip(&cache.pooled) {
            *dz *= 1.0 - y * y;
        }
        let first = View {
            data: &cache.final_hidden,
            offset: 0,
            rs: 0,
            cs: 1,
        };
        for s in 0..b {
            let start = cache.starts[s];
            gemm(
                h,
                1,
                h,
                1.0,
                View { offset: start * h, ..first }.t(),
                View::rows(&dpooled, s * h, h),
                1.0,
                g,
                o.pool_w,
                h,
            );
        }
        add_column_sums(&mut g[o.pool_b..o.pool_b + h], &dpooled, h);
        let rows = cache.ids.len();
        let mut dx = vec![0.0; rows * h];
        for s in 0..b {
            let start = cache.starts[s];
            gemm(1, h, h, 1.0, View::rows(&dpooled, s * h, h), View::rows(p, o.pool_w, h).t(), 0.0, &mut dx, start * h, h);
        }

        for (lo, lc) in o.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(lo, lc, &cache.starts, dx, g);
        }

        let dx = layer_norm_backward(
            &cache.emb_norm,
            &dx,
            h,
            &p[o.emb_g..o.emb_g + h],
            g,
            o.emb_g,
            o.emb_b,
        );
        for s in 0..b {
            for (t, row) in (cache.starts[s]..cache.starts[s + 1]).enumerate() {
                let src = &dx[row * h..(row + 1) * h];
                let tok = o.tok + cache.ids[row] as usize * h;
                for (gv, d) in g[tok..tok + h].iter_mut().zip(src) {
                    *gv += d;
                }
                let pos = o.pos + t * h;
                for (gv, d) in g[pos..pos + h].iter_mut().zip(src) {
                    *gv += d;
                }
            }
        }
    }

    /// Convenience wrapper returning a fresh gradient buffer.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Gradients {
        let mut grads = Gradients::zeros(self.params.len());
        self.backward_into(cache, dlogits, &mut grads);
        grads
    }

    fn layer_backward(
        &self,
        lo: &LayerOffsets,
        lc: &LayerCache,
        starts: &[usize],
        dout: Vec<f64>,
        g: &mut [f64],
    ) -> Vec<f64> {
        let p = &self.params;
        let (h, d) = (self.config.hidden, self.config.ffn);
        let heads = self.config.heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = lc.input.len() / h;

        // y = x·W + b; returns dx and accumulates dW, db
        let linear_back = |g: &mut [f64], x: &[f64], dy: &[f64], w: usize, bias: usize, in_dim: usize, out_dim: usize| {
            gemm(in_dim, rows, out_dim, 1.0, View::rows(x, 0, in_dim).t(), View::rows(dy, 0, out_dim), 1.0, g, w, out_dim);
            add_column_sums(&mut g[bias..bias + out_dim], dy, out_dim);
            let mut dx = vec![0.0; rows * in_dim];
            gemm(rows, out_dim, in_dim, 1.0, View::rows(dy, 0, out_dim), View::rows(p, w, out_dim).t(), 0.0, &mut dx, 0, in_dim);
            dx
        };

        // ffn block: out = LN2(h1 + W2·gelu(W1·h1))
        let dsum2 = layer_norm_backward(&lc.norm2, &dout, h, &p[lo.ln2_g..lo.ln2_g + h], g, lo.ln2_g, lo.ln2_b);
        let mut dact = linear_back(g, &lc.act, &dsum2, lo.w2, lo.b2, d, h);
        for (da, &u) in dact.iter_mut().zip(&lc.pre_act) {
            *da *= gelu_grad(u);
        }
        let mut dh1 = linear_back(g, &lc.h1, &dact, lo.w1, lo.b1, h, d);
        for (a, b) in dh1.iter_mut().zip(&dsum2) {
            *a += b;
        }

        // attention block: h1 = LN1(input + Wo·attn(input))
        let dsum1 = layer_norm_backward(&lc.norm1, &dh1, h, &p[lo.ln1_g..lo.ln1_g + h], g, lo.ln1_g, lo.ln1_b);
        let dctx = linear_back(g, &lc.ctx, &dsum1, lo.wo, lo.bo, h, h);

        let mut dq = vec![0.0; rows * h];
        let mut dk = vec![0.0; rows * h];
        let mut dv = vec![0.0; rows * h];
        let max_n = starts.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
        let mut dscores = vec![0.0; max_n * max_n];
        let mut pofs = 0;
        for w in starts.windows(2) {
            let (start, n) = (w[0], w[1] - w[0]);
            for a in 0..heads {
                let col = start * h + a * dh;
                let probs = View::rows(&lc.probs, pofs, n);
                // dV_a = P^T · dctx_a
                gemm(n, n, dh, 1.0, probs.t(), View::rows(&dctx, col, h), 1.0, &mut dv, col, h);
                // dP = dctx_a · V_a^T
                gemm(n, dh, n, 1.0, View::rows(&dctx, col, h), View::rows(&lc.v, col, h).t(), 0.0, &mut dscores, 0, n);
                for r in 0..n {
                    let prow = &lc.probs[pofs + r * n..pofs + (r + 1) * n];
                    let drow = &mut dscores[r * n..(r + 1) * n];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, d)| p * d).sum();
                    for (dv_, p_) in drow.iter_mut().zip(prow) {
                        *dv_ = p_ * (*dv_ - dot);
                    }
                }
                // scores = scale · Q_a·K_a^T
                gemm(n, n, dh, scale, View::rows(&dscores, 0, n), View::rows(&lc.k, col, h), 1.0, &mut dq, col, h);
                gemm(n, n, dh, scale, View::rows(&dscores, 0, n).t(), View::rows(&lc.q, col, h), 1.0, &mut dk, col, h);
                pofs += n * n;
            }
        }

        let mut dinput = dsum1;
        for (w, bias, dy) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
            let dx = linear_back(g, &lc.input, dy, w, bias, h, h);
            for (a, b) in dinput.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        dinput
    }
}

fn add_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_column_sums(dst: &mut [f64], m: &[f64], cols: usize) {
    for row in m.chunks_exact(cols) {
        for (d, v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Row-wise normalization in place; returns the cache for the backward pass.
fn layer_norm(x: &mut [f64], width: usize, scale: &[f64], shift: &[f64]) -> NormCache {
    let rows = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for (r, row) in x.chunks_exact_mut(width).enumerate() {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for (j, v) in row.iter_mut().enumerate() {
            let n = (*v - mean) * inv;
            xhat[r * width + j] = n;
            *v = n * scale[j] + shift[j];
        }
    }
    NormCache { xhat, inv_std }
}

fn layer_norm_backward(
    cache: &NormCache,
    dy: &[f64],
    width: usize,
    scale: &[f64],
    g: &mut [f64],
    scale_off: usize,
    shift_off: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let w = width as f64;
    for (r, (dyr, xr)) in dy.chunks_exact(width).zip(cache.xhat.chunks_exact(width)).enumerate() {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..width {
            g[scale_off + j] += dyr[j] * xr[j];
            g[shift_off + j] += dyr[j];
            let dn = dyr[j] * scale[j];
            mean_d += dn;
            mean_dx += dn * xr[j];
        }
        mean_d /= w;
        mean_dx /= w;
        let inv = cache.inv_std[r];
        for j in 0..width {
            let dn = dyr[j] * scale[j];
            dx[r * width + j] = inv * (dn - mean_d - xr[j] * mean_dx);
        }
    }
    dx
}

/// Numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}
