//! Character CNN mapping each word to a fixed-length vector.
//!
//! Words are processed ragged: only their real characters are stored and
//! every "same"-padded convolution sees zeros past the word end. Batch norm
//! statistics cover real positions only and max pooling runs over the real
//! positions, so a word's vector does not depend on how much tail padding
//! its encoding carries.

use rand::Rng;

use crate::config::SemanticNetConfig;
use crate::error::{Error, Result};
use crate::numcore::layers::{BatchNormCache, Mode};
use crate::numcore::ops::{conv1d_backward_raw, conv1d_raw, max_pool_raw, transpose_filters, ConvGeom, Padding};
use crate::numcore::{BatchNorm, Embedding, Param, Scalar, Tensor};
use crate::textpipe::{EncodedWord, PAD};

/// Real characters of many words, concatenated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordBatch {
    pub chars: Vec<u32>,
    /// `(start, len)` of each word in `chars`.
    pub spans: Vec<(usize, usize)>,
}

impl WordBatch {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a EncodedWord>) -> Result<Self> {
        let mut b = WordBatch::default();
        for w in words {
            b.push(w.real())?;
        }
        Ok(b)
    }

    pub fn push(&mut self, real: &[u32]) -> Result<()> {
        if real.is_empty() {
            return Err(Error::Empty("word without characters".into()));
        }
        if real.contains(&PAD) {
            return Err(Error::invalid("padding inside a word"));
        }
        self.spans.push((self.chars.len(), real.len()));
        self.chars.extend_from_slice(real);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub filters: Param<T>,
    pub norm: BatchNorm<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn in_ch(&self) -> usize {
        self.filters.shape()[2]
    }

    fn out_ch(&self) -> usize {
        self.filters.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.filters.shape()[1]
    }
}

struct BlockCache<T> {
    input: Tensor<T>,
    norm: BatchNormCache<T>,
    output: Tensor<T>,
}

struct Cache<T> {
    batch: WordBatch,
    blocks: Vec<BlockCache<T>>,
    /// Per word, per channel: absolute row of the pooled maximum.
    argmax: Vec<usize>,
}

pub struct SemanticNet<T> {
    pub config: SemanticNetConfig,
    pub embed: Embedding<T>,
    pub blocks: Vec<ConvBlock<T>>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Clone for SemanticNet<T> {
    /// Clones parameters and statistics; cached activations are dropped.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: self.embed.clone(),
            blocks: self.blocks.clone(),
            cache: None,
        }
    }
}

impl<T> std::fmt::Debug for SemanticNet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemanticNet").field("config", &self.config).finish()
    }
}

impl<T: Scalar> SemanticNet<T> {
    pub fn new<R: Rng + ?Sized>(config: SemanticNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = Embedding::new("semnet.char_embed", config.num_chars, config.char_embed_dim, 1.0, Some(PAD as usize), rng);
        let mut blocks = Vec::with_capacity(config.convs.len());
        let mut in_ch = config.char_embed_dim;
        for (i, spec) in config.convs.iter().enumerate() {
            let fan_in = (spec.kernel * in_ch) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = (0..spec.filters * spec.kernel * in_ch)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            blocks.push(ConvBlock {
                filters: Param::new(
                    format!("semnet.conv{i}.filters"),
                    Tensor::from_vec(&[spec.filters, spec.kernel, in_ch], w)?,
                ),
                norm: BatchNorm::new(&format!("semnet.conv{i}.bn"), spec.filters),
            });
            in_ch = spec.filters;
        }
        Ok(Self {
            config,
            embed,
            blocks,
            cache: None,
        })
    }

    /// `len_F`.
    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Word vectors (`words×len_F`). Keeps activations for [`Self::backward`].
    pub fn forward(&mut self, batch: &WordBatch, mode: Mode) -> Result<Tensor<T>> {
        if batch.is_empty() {
            return Err(Error::Empty("no words to encode".into()));
        }
        if let Some(&c) = batch.chars.iter().find(|&&c| c as usize >= self.config.num_chars) {
            return Err(Error::OutOfRange(format!(
                "character index {c} >= inventory size {}",
                self.config.num_chars
            )));
        }
        let mut x = self.embed.forward(&batch.chars)?;
        let rows = batch.chars.len();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (cin, cout, k) = (block.in_ch(), block.out_ch(), block.kernel());
            let mut z = Tensor::zeros(&[rows, cout]);
            let ft = {
                let g = ConvGeom::new(1, cin, cout, k, 1, Padding::Same)?;
                transpose_filters(block.filters.value.data(), &g)
            };
            for &(s, l) in &batch.spans {
                let g = ConvGeom::new(l, cin, cout, k, 1, Padding::Same)?;
                conv1d_raw(
                    &x.data()[s * cin..(s + l) * cin],
                    &ft,
                    &g,
                    &mut z.data_mut()[s * cout..(s + l) * cout],
                );
            }
            let (mut y, norm) = block.norm.forward(&z, mode)?;
            for v in y.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            caches.push(BlockCache {
                input: x,
                norm,
                output: y.clone(),
            });
            x = y;
        }
        let ch = self.output_dim();
        let mut out = Tensor::zeros(&[batch.len(), ch]);
        let mut argmax = vec![0usize; batch.len() * ch];
        for (w, &(s, l)) in batch.spans.iter().enumerate() {
            let arg = &mut argmax[w * ch..(w + 1) * ch];
            max_pool_raw(&x.data()[s * ch..(s + l) * ch], l, ch, out.row_mut(w), arg);
            arg.iter_mut().for_each(|a| *a += s);
        }
        out.ensure_finite("semantic net output")?;
        let cache = Cache {
            batch: batch.clone(),
            blocks: caches,
            argmax,
        };
        self.cache = Some(cache);
        Ok(out)
    }

    /// Accumulates parameter gradients from `grad_out` (`words×len_F`) and returns the
    /// gradient w.r.t. the embedded characters (`chars×char_embed_dim`).
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("semantic net backward called without a cached forward".into()))?;
        let ch = self.output_dim();
        if grad_out.shape() != [cache.batch.len(), ch] {
            return Err(Error::shape(format!(
                "semantic net grad {:?} for {} words × {ch}",
                grad_out.shape(),
                cache.batch.len()
            )));
        }
        let rows = cache.batch.chars.len();
        let mut g = Tensor::zeros(&[rows, ch]);
        for w in 0..cache.batch.len() {
            for c in 0..ch {
                let r = cache.argmax[w * ch + c];
                g.data_mut()[r * ch + c] = g.data()[r * ch + c] + grad_out.data()[w * ch + c];
            }
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            for (gv, &o) in g.data_mut().iter_mut().zip(bc.output.data()) {
                if o <= T::zero() {
                    *gv = T::zero();
                }
            }
            let gz = block.norm.backward(&bc.norm, &g);
            let (cin, cout, k) = (block.in_ch(), block.out_ch(), block.kernel());
            let mut gx = Tensor::zeros(&[rows, cin]);
            for &(s, l) in &cache.batch.spans {
                let geom = ConvGeom::new(l, cin, cout, k, 1, Padding::Same)?;
                conv1d_backward_raw(
                    &bc.input.data()[s * cin..(s + l) * cin],
                    block.filters.value.data(),
                    &geom,
                    &gz.data()[s * cout..(s + l) * cout],
                    Some(&mut gx.data_mut()[s * cin..(s + l) * cin]),
                    block.filters.grad.data_mut(),
                );
            }
            g = gx;
        }
        self.embed.backward(&cache.batch.chars, &g);
        Ok(g)
    }

    /// Encodes words without keeping activations for backward.
    pub fn embed_words(&mut self, words: &[EncodedWord]) -> Result<Tensor<T>> {
        let batch = WordBatch::from_words(words)?;
        let out = self.forward(&batch, Mode::Eval)?;
        self.cache = None;
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.embed.table];
        for b in &self.blocks {
            v.push(&b.filters);
            v.extend(b.norm.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.embed.table];
        for b in &mut self.blocks {
            v.push(&mut b.filters);
            v.extend(b.norm.params_mut());
        }
        v
    }

    /// Non-trainable state: batch norm running statistics, by name.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("semnet.conv{i}.bn.running_mean"), &b.norm.running_mean),
                    (format!("semnet.conv{i}.bn.running_var"), &b.norm.running_var),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| {
                [
                    (format!("semnet.conv{i}.bn.running_mean"), &mut b.norm.running_mean),
                    (format!("semnet.conv{i}.bn.running_var"), &mut b.norm.running_var),
                ]
            })
            .collect()
    }

    /// Keeps the padding row of the character table at zero after an update.
    pub fn enforce_frozen(&mut self) {
        if let Some(r) = self.embed.frozen_row {
            let d = self.embed.dim();
            self.embed.table.value.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> SemanticNet<U> {
        SemanticNet {
            config: self.config.clone(),
            embed: Embedding {
                table: self.embed.table.cast(),
                frozen_row: self.embed.frozen_row,
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    filters: b.filters.cast(),
                    norm: BatchNorm {
                        scale: b.norm.scale.cast(),
                        shift: b.norm.shift.cast(),
                        running_mean: b.norm.running_mean.cast(),
                        running_var: b.norm.running_var.cast(),
                    },
                })
                .collect(),
            cache: None,
        }
    }
}
