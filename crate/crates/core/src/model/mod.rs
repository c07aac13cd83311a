//! The full corrector: word vectors → projection → positional embeddings →
//! post-LN Transformer encoders → per-word softmax, plus the auxiliary
//! softmax head that reads the word vectors directly.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION, MAGIC};

use rand::Rng;

use crate::config::BSpellConfig;
use crate::error::{Error, Result};
use crate::numcore::attention::AttentionCache;
use crate::numcore::layers::{truncated_normal, LayerNormCache, Mode};
use crate::numcore::ops::{dropout_mask, gelu, gelu_grad, softmax_cross_entropy, softmax_inplace};
use crate::numcore::{Dense, LayerNorm, MultiHeadAttention, Param, Scalar, Tensor};
use crate::semanticnet::{SemanticNet, WordBatch};
use crate::textpipe::{CharInventory, EncodedSentence, Limits, Vocab};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub attn: MultiHeadAttention<T>,
    pub attn_norm: LayerNorm<T>,
    pub ff_in: Dense<T>,
    pub ff_out: Dense<T>,
    pub ff_norm: LayerNorm<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn new<R: Rng + ?Sized>(i: usize, cfg: &BSpellConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: MultiHeadAttention::new(&format!("enc{i}.attn"), d, cfg.n_heads, INIT_STD, rng)?,
            attn_norm: LayerNorm::new(&format!("enc{i}.attn_norm"), d),
            ff_in: Dense::new(&format!("enc{i}.ff_in"), d, cfg.ffn_dim, INIT_STD, rng),
            ff_out: Dense::new(&format!("enc{i}.ff_out"), cfg.ffn_dim, d, INIT_STD, rng),
            ff_norm: LayerNorm::new(&format!("enc{i}.ff_norm"), d),
        })
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.attn.params();
        v.extend(self.attn_norm.params());
        v.extend(self.ff_in.params());
        v.extend(self.ff_out.params());
        v.extend(self.ff_norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.attn.params_mut();
        v.extend(self.attn_norm.params_mut());
        v.extend(self.ff_in.params_mut());
        v.extend(self.ff_out.params_mut());
        v.extend(self.ff_norm.params_mut());
        v
    }
}

struct LayerCache<T> {
    attn: AttentionCache<T>,
    drop_mask: Option<Vec<T>>,
    attn_norm: LayerNormCache<T>,
    h1: Tensor<T>,
    pre_act: Tensor<T>,
    act: Tensor<T>,
    ff_norm: LayerNormCache<T>,
}

struct ForwardCache<T> {
    word_vecs: Tensor<T>,
    positions: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    top: Tensor<T>,
}

/// Per-position outputs of both heads for a batch of sentences, flattened
/// sentence after sentence.
#[derive(Debug, Clone)]
pub struct PredictionBatch<T> {
    pub final_logits: Tensor<T>,
    pub aux_logits: Tensor<T>,
    pub final_probs: Tensor<T>,
    pub aux_probs: Tensor<T>,
    pub argmax: Vec<u32>,
    /// `(start, len)` of each sentence in the rows above.
    pub sentences: Vec<(usize, usize)>,
    /// Output words, filled by [`PredictionBatch::emit`].
    pub emitted: Vec<String>,
}

impl<T: Scalar> PredictionBatch<T> {
    pub fn positions(&self) -> usize {
        self.argmax.len()
    }

    /// Final-head probabilities of sentence `s` (`n×len_P`).
    pub fn sentence_probs(&self, s: usize) -> &[T] {
        let (start, len) = self.sentences[s];
        let p = self.final_probs.cols();
        &self.final_probs.data()[start * p..(start + len) * p]
    }

    pub fn sentence_aux_probs(&self, s: usize) -> &[T] {
        let (start, len) = self.sentences[s];
        let p = self.aux_probs.cols();
        &self.aux_probs.data()[start * p..(start + len) * p]
    }

    /// Top word for every position, or the input surface when `UNK` wins.
    pub fn emit(&mut self, vocab: &Vocab, surfaces: &[String]) -> Result<()> {
        if surfaces.len() != self.argmax.len() {
            return Err(Error::shape("one surface word per predicted position"));
        }
        self.emitted = self
            .argmax
            .iter()
            .zip(surfaces)
            .map(|(&id, s)| vocab.word(id).map_or_else(|| s.clone(), str::to_string))
            .collect();
        Ok(())
    }
}

/// Mean cross-entropy of each head and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_final: f64,
    pub l_aux: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn combine(l_final: f64, l_aux: f64, aux_weight: f64) -> Self {
        Self {
            l_final,
            l_aux,
            l_total: l_final + aux_weight * l_aux,
        }
    }
}

/// Loss plus gradients w.r.t. both heads' logits.
pub struct LossGrads<T> {
    pub loss: LossBreakdown,
    pub d_final: Tensor<T>,
    pub d_aux: Tensor<T>,
}

/// `L_total = L_final + λ·L_aux` with both terms averaged over word positions.
pub fn total_loss<T: Scalar>(pred: &PredictionBatch<T>, targets: &[u32], aux_weight: f64) -> Result<LossBreakdown> {
    Ok(loss_and_grads(pred, targets, aux_weight)?.loss)
}

pub fn loss_and_grads<T: Scalar>(
    pred: &PredictionBatch<T>,
    targets: &[u32],
    aux_weight: f64,
) -> Result<LossGrads<T>> {
    let n = pred.positions();
    if n == 0 {
        return Err(Error::Empty("no word positions to score".into()));
    }
    if targets.len() != n {
        return Err(Error::shape(format!("{} targets for {n} positions", targets.len())));
    }
    let classes = pred.final_logits.cols();
    let mut d_final = Tensor::zeros(&[n, classes]);
    let mut d_aux = Tensor::zeros(&[n, classes]);
    let inv_n = T::of(1.0 / n as f64);
    let lam = T::of(aux_weight);
    let (mut lf, mut la) = (0.0f64, 0.0f64);
    for (i, &t) in targets.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(pred.final_logits.row(i), t as usize)?;
        lf += l.f64();
        for (d, v) in d_final.row_mut(i).iter_mut().zip(g) {
            *d = v * inv_n;
        }
        let (l, g) = softmax_cross_entropy(pred.aux_logits.row(i), t as usize)?;
        la += l.f64();
        for (d, v) in d_aux.row_mut(i).iter_mut().zip(g) {
            *d = v * inv_n * lam;
        }
    }
    Ok(LossGrads {
        loss: LossBreakdown::combine(lf / n as f64, la / n as f64, aux_weight),
        d_final,
        d_aux,
    })
}

pub struct BSpell<T> {
    pub config: BSpellConfig,
    pub semnet: SemanticNet<T>,
    pub proj: Dense<T>,
    pub positions: Param<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub head: Dense<T>,
    pub aux_head: Dense<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Clone for BSpell<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            semnet: self.semnet.clone(),
            proj: self.proj.clone(),
            positions: self.positions.clone(),
            layers: self.layers.clone(),
            head: self.head.clone(),
            aux_head: self.aux_head.clone(),
            cache: None,
        }
    }
}

impl<T> std::fmt::Debug for BSpell<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BSpell").field("config", &self.config).finish()
    }
}

pub fn flatten_targets(batch: &[EncodedSentence]) -> Vec<u32> {
    batch.iter().flat_map(|s| s.targets.iter().copied()).collect()
}

impl<T: Scalar> BSpell<T> {
    pub fn new<R: Rng + ?Sized>(config: BSpellConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let semnet = SemanticNet::new(config.semanticnet.clone(), rng)?;
        let len_f = semnet.output_dim();
        let d = config.d_model;
        let proj = Dense::new("proj", len_f, d, INIT_STD, rng);
        let pos: Vec<T> = (0..config.max_sent_len * d).map(|_| truncated_normal(rng, INIT_STD)).collect();
        let positions = Param::new("positions", Tensor::from_vec(&[config.max_sent_len, d], pos)?);
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(i, &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Dense::new("head", d, config.num_classes, INIT_STD, rng);
        let aux_head = Dense::new("aux_head", len_f, config.num_classes, INIT_STD, rng);
        Ok(Self {
            config,
            semnet,
            proj,
            positions,
            layers,
            head,
            aux_head,
            cache: None,
        })
    }

    pub fn limits(&self) -> Limits {
        Limits {
            max_word_len: self.config.semanticnet.max_word_len,
            max_sent_len: self.config.max_sent_len,
        }
    }

    /// Runs both heads. In train mode, batch norm uses batch statistics and
    /// dropout draws from `rng`; activations are kept for [`Self::backward`].
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &[EncodedSentence],
        mode: Mode,
        rng: &mut R,
    ) -> Result<PredictionBatch<T>> {
        if batch.is_empty() {
            return Err(Error::Empty("empty sentence batch".into()));
        }
        let mut words = WordBatch::default();
        let mut sentences = Vec::with_capacity(batch.len());
        let mut positions = Vec::new();
        for s in batch {
            if s.is_empty() {
                return Err(Error::Empty("sentence without words".into()));
            }
            if s.len() > self.config.max_sent_len {
                return Err(Error::invalid(format!(
                    "sentence of {} words exceeds max_sent_len {}",
                    s.len(),
                    self.config.max_sent_len
                )));
            }
            if s.targets.len() != s.len() {
                return Err(Error::shape("targets must align with words"));
            }
            sentences.push((words.len(), s.len()));
            for (i, w) in s.words.iter().enumerate() {
                words.push(w.real())?;
                positions.push(i);
            }
        }
        let word_vecs = self.semnet.forward(&words, mode)?;
        let aux_logits = self.aux_head.forward(&word_vecs)?;
        let mut h = self.proj.forward(&word_vecs)?;
        let d = self.config.d_model;
        for (r, &p) in positions.iter().enumerate() {
            let pe = &self.positions.value.data()[p * d..(p + 1) * d];
            for (a, &b) in h.row_mut(r).iter_mut().zip(pe) {
                *a = *a + b;
            }
        }
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut a, attn) = layer.attn.forward(&h, &sentences)?;
            let drop_mask = if mode == Mode::Train && self.config.dropout > 0.0 {
                let m: Vec<T> = dropout_mask(a.len(), self.config.dropout, rng)?;
                for (v, &k) in a.data_mut().iter_mut().zip(&m) {
                    *v = *v * k;
                }
                Some(m)
            } else {
                None
            };
            a.add_assign(&h)?;
            let (h1, attn_norm) = layer.attn_norm.forward(&a)?;
            let pre_act = layer.ff_in.forward(&h1)?;
            let mut act = pre_act.clone();
            act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let mut f = layer.ff_out.forward(&act)?;
            f.add_assign(&h1)?;
            let (h2, ff_norm) = layer.ff_norm.forward(&f)?;
            layer_caches.push(LayerCache {
                attn,
                drop_mask,
                attn_norm,
                h1,
                pre_act,
                act,
                ff_norm,
            });
            h = h2;
        }
        let final_logits = self.head.forward(&h)?;
        final_logits.ensure_finite("final logits")?;
        aux_logits.ensure_finite("auxiliary logits")?;
        let mut final_probs = final_logits.clone();
        let mut aux_probs = aux_logits.clone();
        let p = self.config.num_classes;
        let mut argmax = Vec::with_capacity(final_probs.rows());
        for r in 0..final_probs.rows() {
            let row = final_probs.row_mut(r);
            softmax_inplace(row);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().take(p) {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best as u32);
            softmax_inplace(aux_probs.row_mut(r));
        }
        self.cache = Some(ForwardCache {
            word_vecs,
            positions,
            layers: layer_caches,
            top: h,
        });
        Ok(PredictionBatch {
            final_logits,
            aux_logits,
            final_probs,
            aux_probs,
            argmax,
            sentences,
            emitted: Vec::new(),
        })
    }

    /// Back-propagates logit gradients from the last forward pass into every parameter.
    pub fn backward(&mut self, d_final: &Tensor<T>, d_aux: &Tensor<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached forward".into()))?;
        let mut dh = self.head.backward(&cache.top, d_final);
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let d_f = layer.ff_norm.backward(&lc.ff_norm, &dh);
            let mut d_act = layer.ff_out.backward(&lc.act, &d_f);
            for (g, &x) in d_act.data_mut().iter_mut().zip(lc.pre_act.data()) {
                *g = *g * gelu_grad(x);
            }
            let mut dh1 = layer.ff_in.backward(&lc.h1, &d_act);
            dh1.add_assign(&d_f)?;
            let d_a = layer.attn_norm.backward(&lc.attn_norm, &dh1);
            let mut d_attn = d_a.clone();
            if let Some(m) = &lc.drop_mask {
                for (g, &k) in d_attn.data_mut().iter_mut().zip(m) {
                    *g = *g * k;
                }
            }
            let mut d_in = layer.attn.backward(&lc.attn, &d_attn);
            d_in.add_assign(&d_a)?;
            dh = d_in;
        }
        let d = self.config.d_model;
        {
            let gp = self.positions.grad.data_mut();
            for (r, &p) in cache.positions.iter().enumerate() {
                for (a, &b) in gp[p * d..(p + 1) * d].iter_mut().zip(dh.row(r)) {
                    *a = *a + b;
                }
            }
        }
        let mut d_vec = self.proj.backward(&cache.word_vecs, &dh);
        d_vec.add_assign(&self.aux_head.backward(&cache.word_vecs, d_aux))?;
        self.semnet.backward(&d_vec)?;
        Ok(())
    }

    /// Forward, loss and backward for one batch; gradients accumulate into the params.
    pub fn train_step_grads<R: Rng + ?Sized>(
        &mut self,
        batch: &[EncodedSentence],
        aux_weight: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(LossBreakdown, PredictionBatch<T>)> {
        let pred = self.forward(batch, mode, rng)?;
        let lg = loss_and_grads(&pred, &flatten_targets(batch), aux_weight)?;
        if !lg.loss.l_total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        self.backward(&lg.d_final, &lg.d_aux)?;
        Ok((lg.loss, pred))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.semnet.params();
        v.extend(self.proj.params());
        v.push(&self.positions);
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend(self.head.params());
        v.extend(self.aux_head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.semnet.params_mut();
        v.extend(self.proj.params_mut());
        v.push(&mut self.positions);
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.extend(self.head.params_mut());
        v.extend(self.aux_head.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Copy of the model in another precision.
    pub fn cast<U: Scalar>(&self) -> BSpell<U> {
        let dense = |d: &Dense<T>| Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        let norm = |n: &LayerNorm<T>| LayerNorm {
            scale: n.scale.cast(),
            shift: n.shift.cast(),
        };
        BSpell {
            config: self.config.clone(),
            semnet: self.semnet.cast(),
            proj: dense(&self.proj),
            positions: self.positions.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    attn: MultiHeadAttention {
                        heads: l.attn.heads,
                        query: dense(&l.attn.query),
                        key: dense(&l.attn.key),
                        value: dense(&l.attn.value),
                        output: dense(&l.attn.output),
                    },
                    attn_norm: norm(&l.attn_norm),
                    ff_in: dense(&l.ff_in),
                    ff_out: dense(&l.ff_out),
                    ff_norm: norm(&l.ff_norm),
                })
                .collect(),
            head: dense(&self.head),
            aux_head: dense(&self.aux_head),
            cache: None,
        }
    }

    /// Eval-mode prediction that keeps no activations.
    pub fn predict(&mut self, batch: &[EncodedSentence]) -> Result<PredictionBatch<T>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(batch, Mode::Eval, &mut unused);
        self.cache = None;
        out
    }

    /// Corrects whitespace-tokenised lines word for word. Rare-word predictions
    /// (`UNK`) leave the input word untouched.
    pub fn predict_corrections<S: AsRef<str>>(
        &mut self,
        lines: &[S],
        vocab: &Vocab,
        inv: &CharInventory,
    ) -> Result<Vec<String>> {
        if lines.is_empty() {
            return Err(Error::Empty("nothing to correct".into()));
        }
        let limits = self.limits();
        let mut out = Vec::with_capacity(lines.len());
        for line in lines {
            let toks = crate::textpipe::tokenize(line.as_ref());
            if toks.is_empty() {
                out.push(String::new());
                continue;
            }
            let chunks = crate::textpipe::encode_tokens(&toks, &toks, vocab, inv, limits)?;
            let mut pred = self.predict(&chunks)?;
            pred.emit(vocab, &toks)?;
            out.push(pred.emitted.join(" "));
        }
        Ok(out)
    }

    /// Word vectors of `words` in eval mode (`words×len_F`).
    pub fn word_vectors(&mut self, words: &[String], inv: &CharInventory) -> Result<Tensor<T>> {
        let enc = words
            .iter()
            .map(|w| crate::textpipe::encode_word(w, inv, self.config.semanticnet.max_word_len))
            .collect::<Result<Vec<_>>>()?;
        self.semnet.embed_words(&enc)
    }
}

/// Full-model gradient check harness: 64-bit, dropout off, batch norm in eval
/// mode, loss = `L_total` on a fixed batch.
pub struct FullModelCheck {
    pub model: BSpell<f64>,
    pub batch: Vec<EncodedSentence>,
    pub aux_weight: f64,
}

impl FullModelCheck {
    pub fn new(model: &BSpell<f32>, batch: Vec<EncodedSentence>) -> Self {
        let mut model: BSpell<f64> = model.cast();
        model.config.dropout = 0.0;
        let aux_weight = model.config.aux_weight;
        Self { model, batch, aux_weight }
    }
}

impl crate::numcore::GradCheckable for FullModelCheck {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        self.model.params_mut()
    }

    fn loss(&mut self) -> Result<f64> {
        let pred = self.model.predict(&self.batch)?;
        Ok(total_loss(&pred, &flatten_targets(&self.batch), self.aux_weight)?.l_total)
    }

    fn loss_and_grads(&mut self) -> Result<f64> {
        self.model.zero_grad();
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let (loss, _) = self.model.train_step_grads(&self.batch, self.aux_weight, Mode::Eval, &mut unused)?;
        Ok(loss.l_total)
    }
}
