//! Decoder-only transformer with relative-position attention over
//! `[compressed memory; memory; segment]`.
//!
//! Forward and backward passes are written out by hand. Each segment row is
//! processed independently (it carries its own attention context) and
//! parameter gradients are summed across rows.

mod ops;

pub mod metrics;
pub mod optim;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DctError, Result};
use crate::memory::{AttentionContext, CompressionParams};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Matrix, View, ViewMut};

use ops::{accumulate_col_sums, add_row_bias, gelu, gelu_grad, sinusoid_table, LnCache};
pub(crate) use ops::{layer_norm, layer_norm_backward, softmax_in_place};
use params::{Layout, Slot};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Compression ratio of the per-layer compression convolution.
    pub ratio: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0
            || self.d_model == 0
            || self.layers == 0
            || self.heads == 0
            || self.d_ff == 0
        {
            return Err(DctError::Config(
                "vocab, d_model, heads, d_ff and layers must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(DctError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(DctError::Config(
                "d_model must be even for sinusoidal encodings".into(),
            ));
        }
        if self.ratio == 0 {
            return Err(DctError::Config("compression ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Slots of one transformer block plus its compression convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wr: Slot,
    pub u_bias: Slot,
    pub v_bias: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub comp_w: Slot,
    pub comp_b: Slot,
}

/// Parameter layout; its entry order is the checkpoint payload order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub embed: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub layout: Layout,
}

impl ModelLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut lay = Layout::default();
        let embed = lay.push("embed", cfg.vocab, d);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                LayerSlots {
                    ln1_g: lay.push(p("ln1.gain"), 1, d),
                    ln1_b: lay.push(p("ln1.bias"), 1, d),
                    wq: lay.push(p("attn.wq"), d, d),
                    wk: lay.push(p("attn.wk"), d, d),
                    wv: lay.push(p("attn.wv"), d, d),
                    wr: lay.push(p("attn.wr"), d, d),
                    u_bias: lay.push(p("attn.content_bias"), 1, d),
                    v_bias: lay.push(p("attn.position_bias"), 1, d),
                    wo: lay.push(p("attn.wo"), d, d),
                    bo: lay.push(p("attn.bo"), 1, d),
                    ln2_g: lay.push(p("ln2.gain"), 1, d),
                    ln2_b: lay.push(p("ln2.bias"), 1, d),
                    w1: lay.push(p("ff.w1"), d, cfg.d_ff),
                    b1: lay.push(p("ff.b1"), 1, cfg.d_ff),
                    w2: lay.push(p("ff.w2"), cfg.d_ff, d),
                    b2: lay.push(p("ff.b2"), 1, d),
                    comp_w: lay.push(p("compress.weight"), cfg.ratio * d, d),
                    comp_b: lay.push(p("compress.bias"), 1, d),
                }
            })
            .collect();
        let lnf_g = lay.push("lnf.gain", 1, d);
        let lnf_b = lay.push("lnf.bias", 1, d);
        let out_w = lay.push("out.weight", d, cfg.vocab);
        let out_b = lay.push("out.bias", 1, cfg.vocab);
        Self {
            embed,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
            layout: lay,
        }
    }
}

/// One stream's segment with its per-layer attention contexts.
#[derive(Clone, Copy, Debug)]
pub struct SegmentInput<'a, T> {
    pub tokens: &'a [u32],
    pub targets: &'a [u32],
    /// One context per layer, or empty for no memory.
    pub contexts: &'a [AttentionContext<T>],
}

/// Result of a forward pass over a mini-batch of segments.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// Per row: `[n_s, V]` logits.
    pub logits: Vec<Matrix<T>>,
    /// Per row, per layer: the layer's input `[n_s, d]` (what memories store).
    pub hidden: Vec<Vec<Matrix<T>>>,
    /// Per row: natural-log probability of each target.
    pub token_log_probs: Vec<Vec<T>>,
    /// Mean cross-entropy (nats) over every token of every row.
    pub loss: T,
}

impl<T: Scalar> StepOutput<T> {
    pub fn perplexity(&self) -> T {
        self.loss.exp()
    }

    pub fn token_count(&self) -> usize {
        self.token_log_probs.iter().map(|r| r.len()).sum()
    }

    /// Last-layer hidden states of each row.
    pub fn last_hidden(&self) -> Vec<&Matrix<T>> {
        self.hidden
            .iter()
            .map(|h| h.last().expect("at least one layer"))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    ages: Vec<usize>,
    ctx_rows: usize,
    ln1: LnCache<T>,
    ln1_out: Matrix<T>,
    q_content: Matrix<T>,
    q_position: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    // heads x n x (m + n)
    probs: Vec<T>,
    att: Matrix<T>,
    ln2: LnCache<T>,
    ln2_out: Matrix<T>,
    ff_pre: Matrix<T>,
    ff_act: Matrix<T>,
}

#[derive(Clone, Debug)]
struct RowCache<T> {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    lnf_out: Matrix<T>,
    out_probs: Matrix<T>,
}

/// Activations saved by [`Model::forward`] for [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    rows: Vec<RowCache<T>>,
    sinusoid: Matrix<T>,
    rel: Vec<Matrix<T>>,
    total_tokens: usize,
}

impl<T: Scalar> ForwardCache<T> {
    /// Attention probabilities of one head: `[n_s, context + n_s]`.
    pub fn attention_probs(&self, row: usize, layer: usize, head: usize) -> Matrix<T> {
        let lc = &self.rows[row].layers[layer];
        let n = lc.att.rows();
        let cols = lc.ctx_rows + n;
        let start = head * n * cols;
        Matrix::from_vec(n, cols, lc.probs[start..start + n * cols].to_vec())
    }

    /// Output distribution of one row: `[n_s, V]`.
    pub fn output_probs(&self, row: usize) -> &Matrix<T> {
        &self.rows[row].out_probs
    }
}

/// Relative distance from query `i` to key `j`, or `None` when masked.
#[inline]
fn rel_distance(i: usize, j: usize, ages: &[usize]) -> Option<usize> {
    let m = ages.len();
    if j < m {
        Some(i + ages[j])
    } else if j - m <= i {
        Some(i - (j - m))
    } else {
        None
    }
}

/// Transformer parameters and the forward/backward passes over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: ModelLayout,
    params: Vec<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialisation: N(0, 0.02) weights, residual projections scaled
    /// by `1/sqrt(2L)`, unit layer-norm gains, compression as window averaging.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ModelLayout::new(&config);
        let mut params = vec![T::zero(); layout.layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut fill = |slot: Slot, scale: f64, params: &mut [T]| {
            for p in slot.of_mut(params) {
                *p = T::from_f64_lossy(normal.sample(&mut rng) * scale);
            }
        };
        fill(layout.embed, 1.0, &mut params);
        let d = config.d_model;
        for ls in &layout.layers {
            for slot in [ls.wq, ls.wk, ls.wv, ls.wr, ls.w1] {
                fill(slot, 1.0, &mut params);
            }
            fill(ls.wo, resid, &mut params);
            fill(ls.w2, resid, &mut params);
            for slot in [ls.ln1_g, ls.ln2_g] {
                slot.of_mut(&mut params)
                    .iter_mut()
                    .for_each(|p| *p = T::one());
            }
            let w = ls.comp_w.of_mut(&mut params);
            let avg = T::one() / T::from_usize_lossy(config.ratio);
            for k in 0..config.ratio {
                for i in 0..d {
                    w[(k * d + i) * d + i] = avg;
                }
            }
        }
        layout
            .lnf_g
            .of_mut(&mut params)
            .iter_mut()
            .for_each(|p| *p = T::one());
        fill(layout.out_w, 1.0, &mut params);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = ModelLayout::new(&config);
        if params.len() != layout.layout.total() {
            return Err(DctError::Shape(format!(
                "expected {} parameters, got {}",
                layout.layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }

    pub fn compression(&self, layer: usize) -> CompressionParams<'_, T> {
        let ls = &self.layout.layers[layer];
        CompressionParams {
            weight: ls.comp_w.of(&self.params),
            bias: ls.comp_b.of(&self.params),
            ratio: self.config.ratio,
            d_model: self.config.d_model,
        }
    }

    /// Gradient slots of the compression convolution of `layer`.
    pub fn compression_grad_slots(&self, layer: usize) -> (Slot, Slot) {
        let ls = &self.layout.layers[layer];
        (ls.comp_w, ls.comp_b)
    }

    fn validate_input(&self, row: &SegmentInput<'_, T>) -> Result<()> {
        let v = self.config.vocab as u32;
        if let Some(&t) = row.tokens.iter().chain(row.targets).find(|&&t| t >= v) {
            return Err(DctError::Input(format!(
                "token id {t} exceeds vocabulary size {v}"
            )));
        }
        if row.tokens.len() != row.targets.len() {
            return Err(DctError::Shape(
                "tokens and targets differ in length".into(),
            ));
        }
        if row.tokens.is_empty() {
            return Err(DctError::Shape("empty segment".into()));
        }
        if !row.contexts.is_empty() && row.contexts.len() != self.config.layers {
            return Err(DctError::Shape(format!(
                "{} contexts for {} layers",
                row.contexts.len(),
                self.config.layers
            )));
        }
        for ctx in row.contexts {
            if ctx.rows.cols() != self.config.d_model {
                return Err(DctError::Shape(format!(
                    "context width {} does not match d_model {}",
                    ctx.rows.cols(),
                    self.config.d_model
                )));
            }
            if ctx.ages.len() != ctx.rows.rows() {
                return Err(DctError::Shape(
                    "context ages and rows differ in length".into(),
                ));
            }
        }
        Ok(())
    }

    /// Forward pass over a mini-batch of segments.
    pub fn forward(
        &self,
        batch: &[SegmentInput<'_, T>],
    ) -> Result<(StepOutput<T>, ForwardCache<T>)> {
        for row in batch {
            self.validate_input(row)?;
        }
        let d = self.config.d_model;
        // Largest relative distance any query can see.
        let max_dist = batch
            .iter()
            .map(|r| {
                let max_age = r
                    .contexts
                    .iter()
                    .flat_map(|c| c.ages.iter().copied())
                    .max()
                    .unwrap_or(0);
                r.tokens.len() - 1 + max_age
            })
            .max()
            .unwrap_or(0);
        let sinusoid = sinusoid_table::<T>(max_dist + 1, d);
        let rel: Vec<Matrix<T>> = self
            .layout
            .layers
            .iter()
            .map(|ls| sinusoid.matmul(&Matrix::from_vec(d, d, ls.wr.of(&self.params).to_vec())))
            .collect();

        let mut out = StepOutput {
            logits: Vec::new(),
            hidden: Vec::new(),
            token_log_probs: Vec::new(),
            loss: T::zero(),
        };
        let mut rows = Vec::with_capacity(batch.len());
        let mut loss_sum = T::zero();
        let mut total_tokens = 0;
        for input in batch {
            let (logits, hidden, lps, cache) = self.forward_row(input, &rel);
            loss_sum -= lps.iter().fold(T::zero(), |a, &v| a + v);
            total_tokens += lps.len();
            out.logits.push(logits);
            out.hidden.push(hidden);
            out.token_log_probs.push(lps);
            rows.push(cache);
        }
        out.loss = loss_sum / T::from_usize_lossy(total_tokens.max(1));
        Ok((
            out,
            ForwardCache {
                rows,
                sinusoid,
                rel,
                total_tokens,
            },
        ))
    }

    #[allow(clippy::type_complexity)]
    fn forward_row(
        &self,
        input: &SegmentInput<'_, T>,
        rel: &[Matrix<T>],
    ) -> (Matrix<T>, Vec<Matrix<T>>, Vec<T>, RowCache<T>) {
        let cfg = &self.config;
        let (d, n, heads, dh) = (cfg.d_model, input.tokens.len(), cfg.heads, cfg.head_dim());
        let p = &self.params;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let emb = self.layout.embed.of(p);
        let mut x = Matrix::from_fn(n, d, |r, c| emb[input.tokens[r] as usize * d + c]);
        let mut hidden = Vec::with_capacity(cfg.layers);
        let mut layer_caches = Vec::with_capacity(cfg.layers);

        for (l, ls) in self.layout.layers.iter().enumerate() {
            hidden.push(x.clone());
            let empty;
            let ctx = match input.contexts.get(l) {
                Some(c) => c,
                None => {
                    empty = AttentionContext::empty(d);
                    &empty
                }
            };
            let m = ctx.len();
            let keys = m + n;
            let mut full = ctx.rows.clone();
            full.push_rows(&x);
            let (ln1_out, ln1) = layer_norm(&full, ls.ln1_g.of(p), ls.ln1_b.of(p));
            let wq = View::new(ls.wq.of(p), d, d);
            let mut q = Matrix::zeros(n, d);
            gemm(
                T::one(),
                ln1_out.view().rows_range(m, keys),
                wq,
                T::zero(),
                &mut q.view_mut(),
            );
            let k = ln1_out.matmul(&Matrix::from_vec(d, d, ls.wk.of(p).to_vec()));
            let v = ln1_out.matmul(&Matrix::from_vec(d, d, ls.wv.of(p).to_vec()));
            let mut q_content = q.clone();
            add_row_bias(&mut q_content, ls.u_bias.of(p));
            let mut q_position = q;
            add_row_bias(&mut q_position, ls.v_bias.of(p));

            let r_l = &rel[l];
            let dist_count = n - 1 + ctx.ages.iter().copied().max().unwrap_or(0) + 1;
            let mut probs = vec![T::zero(); heads * n * keys];
            let mut att = Matrix::zeros(n, d);
            let mut content = Matrix::zeros(n, keys);
            let mut position = Matrix::zeros(n, dist_count);
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                gemm(
                    T::one(),
                    q_content.view().cols_range(c0, c1),
                    k.view().cols_range(c0, c1).t(),
                    T::zero(),
                    &mut content.view_mut(),
                );
                gemm(
                    T::one(),
                    q_position.view().cols_range(c0, c1),
                    r_l.view().rows_range(0, dist_count).cols_range(c0, c1).t(),
                    T::zero(),
                    &mut position.view_mut(),
                );
                let hp = &mut probs[h * n * keys..(h + 1) * n * keys];
                for i in 0..n {
                    let visible = m + i + 1;
                    let row = &mut hp[i * keys..i * keys + visible];
                    let crow = content.row(i);
                    let prow = position.row(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        let dist = rel_distance(i, j, &ctx.ages).expect("visible key");
                        *s = (crow[j] + prow[dist]) * scale;
                    }
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    View::new(hp, n, keys),
                    v.view().cols_range(c0, c1),
                    T::zero(),
                    &mut att.view_mut().cols_range(c0, c1),
                );
            }
            let mut x_mid = att.matmul(&Matrix::from_vec(d, d, ls.wo.of(p).to_vec()));
            add_row_bias(&mut x_mid, ls.bo.of(p));
            crate::tensor::add_assign(x_mid.as_mut_slice(), x.as_slice());

            let (ln2_out, ln2) = layer_norm(&x_mid, ls.ln2_g.of(p), ls.ln2_b.of(p));
            let mut ff_pre = ln2_out.matmul(&Matrix::from_vec(d, cfg.d_ff, ls.w1.of(p).to_vec()));
            add_row_bias(&mut ff_pre, ls.b1.of(p));
            let ff_act = Matrix::from_vec(
                n,
                cfg.d_ff,
                ff_pre.as_slice().iter().map(|&v| gelu(v)).collect(),
            );
            let mut x_out = ff_act.matmul(&Matrix::from_vec(cfg.d_ff, d, ls.w2.of(p).to_vec()));
            add_row_bias(&mut x_out, ls.b2.of(p));
            crate::tensor::add_assign(x_out.as_mut_slice(), x_mid.as_slice());

            layer_caches.push(LayerCache {
                ages: ctx.ages.clone(),
                ctx_rows: m,
                ln1,
                ln1_out,
                q_content,
                q_position,
                k,
                v,
                probs,
                att,
                ln2,
                ln2_out,
                ff_pre,
                ff_act,
            });
            x = x_out;
        }

        let (lnf_out, lnf) = layer_norm(&x, self.layout.lnf_g.of(p), self.layout.lnf_b.of(p));
        let vocab = cfg.vocab;
        let mut logits = lnf_out.matmul(&Matrix::from_vec(
            d,
            vocab,
            self.layout.out_w.of(p).to_vec(),
        ));
        add_row_bias(&mut logits, self.layout.out_b.of(p));
        let mut out_probs = logits.clone();
        let mut lps = Vec::with_capacity(n);
        for i in 0..n {
            let row = out_probs.row_mut(i);
            softmax_in_place(row);
            // log-softmax from logits for accuracy
            let lrow = logits.row(i);
            let max = lrow
                .iter()
                .fold(T::neg_infinity(), |a, &v| if v > a { v } else { a });
            let lse = lrow
                .iter()
                .fold(T::zero(), |a, &v| a + (v - max).exp())
                .ln()
                + max;
            lps.push(lrow[input.targets[i] as usize] - lse);
        }
        let cache = RowCache {
            tokens: input.tokens.to_vec(),
            targets: input.targets.to_vec(),
            layers: layer_caches,
            lnf,
            lnf_out,
            out_probs,
        };
        (logits, hidden, lps, cache)
    }

    /// Backpropagates the mean cross-entropy of the cached forward pass.
    ///
    /// Parameter gradients are added into `grads`. When `context_grads` is set
    /// the gradient with respect to every context row is returned as
    /// `[row][layer] -> [context_rows, d]`; otherwise the result is empty.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grads: &mut [T],
        context_grads: bool,
    ) -> Vec<Vec<Matrix<T>>> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let d = self.config.d_model;
        let mut drel: Vec<Matrix<T>> = cache
            .rel
            .iter()
            .map(|r| Matrix::zeros(r.rows(), r.cols()))
            .collect();
        let inv_tokens = T::one() / T::from_usize_lossy(cache.total_tokens.max(1));
        let mut ctx_grads = Vec::new();
        for row in &cache.rows {
            let g = self.backward_row(row, cache, &mut drel, grads, inv_tokens, context_grads);
            if context_grads {
                ctx_grads.push(g);
            }
        }
        for (l, ls) in self.layout.layers.iter().enumerate() {
            gemm(
                T::one(),
                cache.sinusoid.view().t(),
                drel[l].view(),
                T::one(),
                &mut ViewMut::new(ls.wr.of_mut(grads), d, d),
            );
        }
        ctx_grads
    }

    fn backward_row(
        &self,
        row: &RowCache<T>,
        cache: &ForwardCache<T>,
        drel: &mut [Matrix<T>],
        grads: &mut [T],
        inv_tokens: T,
        context_grads: bool,
    ) -> Vec<Matrix<T>> {
        let cfg = &self.config;
        let (d, heads, dh, vocab) = (cfg.d_model, cfg.heads, cfg.head_dim(), cfg.vocab);
        let n = row.tokens.len();
        let p = &self.params;
        let lay = &self.layout;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();

        let mut dlogits = row.out_probs.clone();
        for i in 0..n {
            let r = dlogits.row_mut(i);
            r[row.targets[i] as usize] -= T::one();
            r.iter_mut().for_each(|v| *v *= inv_tokens);
        }
        gemm(
            T::one(),
            row.lnf_out.view().t(),
            dlogits.view(),
            T::one(),
            &mut ViewMut::new(lay.out_w.of_mut(grads), d, vocab),
        );
        accumulate_col_sums(&dlogits, lay.out_b.of_mut(grads));
        let mut dlnf = Matrix::zeros(n, d);
        gemm(
            T::one(),
            dlogits.view(),
            View::new(lay.out_w.of(p), d, vocab).t(),
            T::zero(),
            &mut dlnf.view_mut(),
        );
        let (dg, db) = split_two(grads, lay.lnf_g, lay.lnf_b);
        let mut dx = layer_norm_backward(&row.lnf, lay.lnf_g.of(p), &dlnf, dg, db);

        let mut ctx_out = vec![Matrix::empty(d); cfg.layers];
        for (l, ls) in lay.layers.iter().enumerate().rev() {
            let lc = &row.layers[l];
            let m = lc.ctx_rows;
            let keys = m + n;
            // feed-forward
            gemm(
                T::one(),
                lc.ff_act.view().t(),
                dx.view(),
                T::one(),
                &mut ViewMut::new(ls.w2.of_mut(grads), cfg.d_ff, d),
            );
            accumulate_col_sums(&dx, ls.b2.of_mut(grads));
            let mut dpre = Matrix::zeros(n, cfg.d_ff);
            gemm(
                T::one(),
                dx.view(),
                View::new(ls.w2.of(p), cfg.d_ff, d).t(),
                T::zero(),
                &mut dpre.view_mut(),
            );
            for (g, &x) in dpre.as_mut_slice().iter_mut().zip(lc.ff_pre.as_slice()) {
                *g *= gelu_grad(x);
            }
            gemm(
                T::one(),
                lc.ln2_out.view().t(),
                dpre.view(),
                T::one(),
                &mut ViewMut::new(ls.w1.of_mut(grads), d, cfg.d_ff),
            );
            accumulate_col_sums(&dpre, ls.b1.of_mut(grads));
            let mut dln2 = Matrix::zeros(n, d);
            gemm(
                T::one(),
                dpre.view(),
                View::new(ls.w1.of(p), d, cfg.d_ff).t(),
                T::zero(),
                &mut dln2.view_mut(),
            );
            let (dg, db) = split_two(grads, ls.ln2_g, ls.ln2_b);
            let dmid_ln = layer_norm_backward(&lc.ln2, ls.ln2_g.of(p), &dln2, dg, db);
            let mut dmid = dx;
            crate::tensor::add_assign(dmid.as_mut_slice(), dmid_ln.as_slice());

            // attention output projection
            gemm(
                T::one(),
                lc.att.view().t(),
                dmid.view(),
                T::one(),
                &mut ViewMut::new(ls.wo.of_mut(grads), d, d),
            );
            accumulate_col_sums(&dmid, ls.bo.of_mut(grads));
            let mut datt = Matrix::zeros(n, d);
            gemm(
                T::one(),
                dmid.view(),
                View::new(ls.wo.of(p), d, d).t(),
                T::zero(),
                &mut datt.view_mut(),
            );

            let dist_count = n - 1 + lc.ages.iter().copied().max().unwrap_or(0) + 1;
            let r_l = cache.rel[l].view().rows_range(0, dist_count);
            let mut dq = Matrix::zeros(n, d);
            let mut dk = Matrix::zeros(keys, d);
            let mut dv = Matrix::zeros(keys, d);
            let mut dscore = Matrix::zeros(n, keys);
            let mut dpos = Matrix::zeros(n, dist_count);
            let mut du = vec![T::zero(); d];
            let mut dvb = vec![T::zero(); d];
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let hp = &lc.probs[h * n * keys..(h + 1) * n * keys];
                let probs = View::new(hp, n, keys);
                // dA = dOut_h * V_h^T
                gemm(
                    T::one(),
                    datt.view().cols_range(c0, c1),
                    lc.v.view().cols_range(c0, c1).t(),
                    T::zero(),
                    &mut dscore.view_mut(),
                );
                gemm(
                    T::one(),
                    probs.t(),
                    datt.view().cols_range(c0, c1),
                    T::one(),
                    &mut dv.view_mut().cols_range(c0, c1),
                );
                dpos.fill(T::zero());
                for i in 0..n {
                    let visible = m + i + 1;
                    let a = &hp[i * keys..i * keys + visible];
                    let ds = dscore.row_mut(i);
                    let dot = a
                        .iter()
                        .zip(ds.iter())
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    for j in 0..visible {
                        ds[j] = a[j] * (ds[j] - dot) * scale;
                    }
                    for v in ds[visible..].iter_mut() {
                        *v = T::zero();
                    }
                    let dp = dpos.row_mut(i);
                    for j in 0..visible {
                        let dist = rel_distance(i, j, &lc.ages).expect("visible key");
                        dp[dist] += ds[j];
                    }
                }
                // content term
                gemm(
                    T::one(),
                    dscore.view(),
                    lc.k.view().cols_range(c0, c1),
                    T::one(),
                    &mut dq.view_mut().cols_range(c0, c1),
                );
                gemm(
                    T::one(),
                    dscore.view().t(),
                    lc.q_content.view().cols_range(c0, c1),
                    T::one(),
                    &mut dk.view_mut().cols_range(c0, c1),
                );
                // position term
                gemm(
                    T::one(),
                    dpos.view(),
                    r_l.cols_range(c0, c1),
                    T::one(),
                    &mut dq.view_mut().cols_range(c0, c1),
                );
                gemm(
                    T::one(),
                    dpos.view().t(),
                    lc.q_position.view().cols_range(c0, c1),
                    T::one(),
                    &mut drel[l]
                        .view_mut()
                        .rows_range(0, dist_count)
                        .cols_range(c0, c1),
                );
                // bias gradients: column sums of the per-term query gradients
                let mut key_sums = vec![T::zero(); keys];
                accumulate_col_sums(&dscore, &mut key_sums);
                let mut dist_sums = vec![T::zero(); dist_count];
                accumulate_col_sums(&dpos, &mut dist_sums);
                for c in 0..dh {
                    let mut su = T::zero();
                    for (j, &w) in key_sums.iter().enumerate() {
                        su += w * lc.k.get(j, c0 + c);
                    }
                    du[c0 + c] = su;
                    let mut sv = T::zero();
                    for (t, &w) in dist_sums.iter().enumerate() {
                        sv += w * cache.rel[l].get(t, c0 + c);
                    }
                    dvb[c0 + c] = sv;
                }
            }
            crate::tensor::add_assign(ls.u_bias.of_mut(grads), &du);
            crate::tensor::add_assign(ls.v_bias.of_mut(grads), &dvb);

            gemm(
                T::one(),
                lc.ln1_out.view().rows_range(m, keys).t(),
                dq.view(),
                T::one(),
                &mut ViewMut::new(ls.wq.of_mut(grads), d, d),
            );
            gemm(
                T::one(),
                lc.ln1_out.view().t(),
                dk.view(),
                T::one(),
                &mut ViewMut::new(ls.wk.of_mut(grads), d, d),
            );
            gemm(
                T::one(),
                lc.ln1_out.view().t(),
                dv.view(),
                T::one(),
                &mut ViewMut::new(ls.wv.of_mut(grads), d, d),
            );
            let mut dln1 = Matrix::zeros(keys, d);
            gemm(
                T::one(),
                dk.view(),
                View::new(ls.wk.of(p), d, d).t(),
                T::zero(),
                &mut dln1.view_mut(),
            );
            gemm(
                T::one(),
                dv.view(),
                View::new(ls.wv.of(p), d, d).t(),
                T::one(),
                &mut dln1.view_mut(),
            );
            gemm(
                T::one(),
                dq.view(),
                View::new(ls.wq.of(p), d, d).t(),
                T::one(),
                &mut dln1.view_mut().rows_range(m, keys),
            );
            let (dg, db) = split_two(grads, ls.ln1_g, ls.ln1_b);
            let mut dfull = layer_norm_backward(&lc.ln1, ls.ln1_g.of(p), &dln1, dg, db);
            let dctx = dfull.split_off_front(m);
            if context_grads {
                ctx_out[l] = dctx;
            }
            dx = dmid;
            crate::tensor::add_assign(dx.as_mut_slice(), dfull.as_slice());
        }
        let demb = lay.embed.of_mut(grads);
        for (i, &t) in row.tokens.iter().enumerate() {
            crate::tensor::add_assign(&mut demb[t as usize * d..(t as usize + 1) * d], dx.row(i));
        }
        if context_grads {
            ctx_out
        } else {
            Vec::new()
        }
    }

    /// Descent step on the task loss: `params <- params - lr * update(grads)`.
    pub fn apply_gradients(
        &mut self,
        optimizer: &mut optim::Optimizer<T>,
        grads: &[T],
        lr: f64,
    ) -> Result<()> {
        optimizer.step(&mut self.params, grads, lr)
    }

    /// Per-token log-probabilities of `targets` with no memory context.
    pub fn score(&self, tokens: &[u32], targets: &[u32]) -> Result<Vec<T>> {
        let (out, _) = self.forward(&[SegmentInput {
            tokens,
            targets,
            contexts: &[],
        }])?;
        Ok(out.token_log_probs.into_iter().next().unwrap_or_default())
    }
}

/// Two disjoint mutable slots of the same buffer (`a` must precede `b`).
fn split_two<T>(buf: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert!(a.offset + a.len() <= b.offset, "slots out of order");
    let (head, tail) = buf.split_at_mut(b.offset);
    (&mut head[a.range()], &mut tail[..b.len()])
}
