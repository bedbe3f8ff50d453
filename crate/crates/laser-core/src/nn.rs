//! Shared neural-network building blocks on top of the autodiff tape:
//! seeded initialization, multi-head attention, pre-LN transformer blocks,
//! and a plain Adam optimizer with sparse (per-name) stepping.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, NodeId, Tape};

/// Weight matrix (in_dim, out_dim), entries U(-1/sqrt(in_dim), 1/sqrt(in_dim)).
pub fn init_weight(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    Array2::from_shape_fn((in_dim, out_dim), |_| rng.random_range(-bound..bound))
}

/// Token/embedding matrix (rows, cols), scaled by the feature width.
pub fn init_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Records which tape leaves correspond to trainable named parameters.
#[derive(Default)]
pub struct Binder {
    entries: Vec<(String, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert `value` as a tape leaf. Trainable parameters become `var` leaves
    /// and are recorded under `name`; frozen ones become constants.
    pub fn bind(
        &mut self,
        t: &mut Tape,
        name: String,
        value: &Array2<f64>,
        trainable: bool,
    ) -> NodeId {
        if trainable {
            let id = t.var(value.clone());
            self.entries.push((name, id));
            id
        } else {
            t.constant(value.clone())
        }
    }

    /// Gradients for every bound parameter that the loss actually reached.
    pub fn grads(&self, grads: &Grads) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.entries {
            if let Some(g) = grads.wrt(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        b: &mut Binder,
        scope: &str,
        x: NodeId,
        trainable: bool,
    ) -> NodeId {
        let gamma = b.bind(t, format!("{scope}/gamma"), &self.gamma, trainable);
        let beta = b.bind(t, format!("{scope}/beta"), &self.beta, trainable);
        t.layer_norm(x, gamma, beta)
    }

    fn params<'a>(&'a self, scope: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{scope}/gamma"), &self.gamma));
        out.push((format!("{scope}/beta"), &self.beta));
    }

    fn params_mut<'a>(&'a mut self, scope: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((format!("{scope}/gamma"), &mut self.gamma));
        out.push((format!("{scope}/beta"), &mut self.beta));
    }
}

/// Multi-head scaled dot-product attention. Query and key/value streams may
/// have different input widths (cross-attention over collaborative rows).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn new(
        q_in: usize,
        kv_in: usize,
        d_model: usize,
        num_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d_model % num_heads == 0, "d_model must divide into heads");
        Self {
            wq: init_weight(q_in, d_model, rng),
            wk: init_weight(kv_in, d_model, rng),
            wv: init_weight(kv_in, d_model, rng),
            wo: init_weight(d_model, d_model, rng),
            num_heads,
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        b: &mut Binder,
        scope: &str,
        q_in: NodeId,
        kv_in: NodeId,
        causal: bool,
        trainable: bool,
    ) -> NodeId {
        let wq = b.bind(t, format!("{scope}/wq"), &self.wq, trainable);
        let wk = b.bind(t, format!("{scope}/wk"), &self.wk, trainable);
        let wv = b.bind(t, format!("{scope}/wv"), &self.wv, trainable);
        let wo = b.bind(t, format!("{scope}/wo"), &self.wo, trainable);
        let q = t.matmul(q_in, wq);
        let k = t.matmul(kv_in, wk);
        let v = t.matmul(kv_in, wv);
        let d_model = self.wq.ncols();
        let head_dim = d_model / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (qh, kh, vh) = if self.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * head_dim, head_dim),
                    t.slice_cols(k, h * head_dim, head_dim),
                    t.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = t.matmul_nt(qh, kh);
            let scaled = t.scale(scores, scale);
            let probs = if causal {
                t.causal_softmax_rows(scaled)
            } else {
                t.softmax_rows(scaled)
            };
            heads.push(t.matmul(probs, vh));
        }
        let merged = if self.num_heads == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)
        };
        t.matmul(merged, wo)
    }

    fn params<'a>(&'a self, scope: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{scope}/wq"), &self.wq));
        out.push((format!("{scope}/wk"), &self.wk));
        out.push((format!("{scope}/wv"), &self.wv));
        out.push((format!("{scope}/wo"), &self.wo));
    }

    fn params_mut<'a>(&'a mut self, scope: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((format!("{scope}/wq"), &mut self.wq));
        out.push((format!("{scope}/wk"), &mut self.wk));
        out.push((format!("{scope}/wv"), &mut self.wv));
        out.push((format!("{scope}/wo"), &mut self.wo));
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl FeedForwardParams {
    pub fn new(dim: usize, expansion: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * expansion;
        Self {
            w1: init_weight(dim, hidden, rng),
            b1: Array2::zeros((1, hidden)),
            w2: init_weight(hidden, dim, rng),
            b2: Array2::zeros((1, dim)),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        b: &mut Binder,
        scope: &str,
        x: NodeId,
        trainable: bool,
    ) -> NodeId {
        let w1 = b.bind(t, format!("{scope}/w1"), &self.w1, trainable);
        let b1 = b.bind(t, format!("{scope}/b1"), &self.b1, trainable);
        let w2 = b.bind(t, format!("{scope}/w2"), &self.w2, trainable);
        let b2 = b.bind(t, format!("{scope}/b2"), &self.b2, trainable);
        let h = t.matmul(x, w1);
        let h = t.add_row(h, b1);
        let h = t.gelu(h);
        let out = t.matmul(h, w2);
        t.add_row(out, b2)
    }

    fn params<'a>(&'a self, scope: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{scope}/w1"), &self.w1));
        out.push((format!("{scope}/b1"), &self.b1));
        out.push((format!("{scope}/w2"), &self.w2));
        out.push((format!("{scope}/b2"), &self.b2));
    }

    fn params_mut<'a>(&'a mut self, scope: &str, out: &mut Vec<(String, &'a mut Array2<f64>)>) {
        out.push((format!("{scope}/w1"), &mut self.w1));
        out.push((format!("{scope}/b1"), &mut self.b1));
        out.push((format!("{scope}/w2"), &mut self.w2));
        out.push((format!("{scope}/b2"), &mut self.b2));
    }
}

/// Cross-attention sublayer: queries from the token stream, keys/values from
/// an external context matrix.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub ln: LayerNormParams,
    pub attn: AttentionParams,
}

/// Pre-LN transformer block: self-attention, optional cross-attention, and a
/// feed-forward sublayer, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub cross: Option<CrossAttention>,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

impl TransformerBlock {
    /// `cross_kv_dim` adds a cross-attention sublayer reading an external
    /// matrix of that width.
    pub fn new(
        d_model: usize,
        num_heads: usize,
        cross_kv_dim: Option<usize>,
        ffn_expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln1: LayerNormParams::new(d_model),
            attn: AttentionParams::new(d_model, d_model, d_model, num_heads, rng),
            cross: cross_kv_dim.map(|kv| CrossAttention {
                ln: LayerNormParams::new(d_model),
                attn: AttentionParams::new(d_model, kv, d_model, num_heads, rng),
            }),
            ln2: LayerNormParams::new(d_model),
            ffn: FeedForwardParams::new(d_model, ffn_expansion, rng),
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        b: &mut Binder,
        scope: &str,
        x: NodeId,
        cross_kv: Option<NodeId>,
        causal: bool,
        trainable: bool,
    ) -> NodeId {
        let normed = self.ln1.forward(t, b, &format!("{scope}/ln1"), x, trainable);
        let attn_out =
            self.attn
                .forward(t, b, &format!("{scope}/attn"), normed, normed, causal, trainable);
        let mut x = t.add(x, attn_out);
        if let Some(cross) = &self.cross {
            let kv = cross_kv.expect("block has cross-attention but no context was given");
            let normed = cross.ln.forward(t, b, &format!("{scope}/cross_ln"), x, trainable);
            let cross_out = cross.attn.forward(
                t,
                b,
                &format!("{scope}/cross"),
                normed,
                kv,
                false,
                trainable,
            );
            x = t.add(x, cross_out);
        }
        let normed = self.ln2.forward(t, b, &format!("{scope}/ln2"), x, trainable);
        let ffn_out = self.ffn.forward(t, b, &format!("{scope}/ffn"), normed, trainable);
        t.add(x, ffn_out)
    }

    pub fn params<'a>(&'a self, scope: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        self.ln1.params(&format!("{scope}/ln1"), out);
        self.attn.params(&format!("{scope}/attn"), out);
        if let Some(cross) = &self.cross {
            cross.ln.params(&format!("{scope}/cross_ln"), out);
            cross.attn.params(&format!("{scope}/cross"), out);
        }
        self.ln2.params(&format!("{scope}/ln2"), out);
        self.ffn.params(&format!("{scope}/ffn"), out);
    }

    pub fn params_mut<'a>(
        &'a mut self,
        scope: &str,
        out: &mut Vec<(String, &'a mut Array2<f64>)>,
    ) {
        self.ln1.params_mut(&format!("{scope}/ln1"), out);
        self.attn.params_mut(&format!("{scope}/attn"), out);
        if let Some(cross) = &mut self.cross {
            cross.ln.params_mut(&format!("{scope}/cross_ln"), out);
            cross.attn.params_mut(&format!("{scope}/cross"), out);
        }
        self.ln2.params_mut(&format!("{scope}/ln2"), out);
        self.ffn.params_mut(&format!("{scope}/ffn"), out);
    }
}

struct AdamSlot {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

/// Adam with sparse stepping: only parameters that received a gradient this
/// step are touched, so hard-routed experts that were not selected stay
/// bitwise unchanged.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [(String, &mut Array2<f64>)],
        grads: &BTreeMap<String, Array2<f64>>,
    ) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Array2::zeros(p.raw_dim()),
                v: Array2::zeros(p.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            slot.m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            slot.v
                .zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let bias1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bias2 = 1.0 - self.beta2.powi(slot.t as i32);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut **p)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bias1;
                    let vhat = v / bias2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Merge per-sample gradient maps into their mean (names may differ per
/// sample under hard routing).
pub fn mean_grads(batch: &[BTreeMap<String, Array2<f64>>]) -> BTreeMap<String, Array2<f64>> {
    let mut sum: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for sample in batch {
        for (name, g) in sample {
            match sum.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    sum.insert(name.clone(), g.clone());
                }
            }
        }
    }
    let n = batch.len() as f64;
    for g in sum.values_mut() {
        g.mapv_inplace(|x| x / n);
    }
    sum
}
