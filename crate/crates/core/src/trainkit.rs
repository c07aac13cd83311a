//! Constant-rate SGD with gradient clipping, the pretraining and fine-tuning
//! loops, and deterministic data splits.
//!
//! Randomness is split into independent streams derived from the run seed:
//! batch order, dropout, and one mask stream per (epoch, sentence), so two
//! runs with different masking schemes differ only in their mask plans.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClipMode, OptimConfig};
use crate::errgen::line_rng;
use crate::error::{Error, Result};
use crate::masking::{apply_plan, plan, MaskConfig};
use crate::model::{BSpell, RngState};
use crate::numcore::{Mode, Param, Scalar};
use crate::textpipe::{encode_tokens, tokenize, CharInventory, EncodedSentence, Limits, Vocab};

const STREAM_SHUFFLE: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const MASK_SALT: u64 = 0x6D61_736B;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub step: u64,
}

impl OptimState {
    pub fn new(cfg: &OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lr: cfg.lr,
            clip: cfg.clip,
            clip_mode: cfg.clip_mode,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global L2 norm of the gradients before clipping.
    pub grad_norm: f64,
    /// Factor applied in norm mode (1 when unclipped).
    pub scale: f64,
}

/// Clips, applies `w ← w − lr·g` and zeroes the gradients. Non-finite
/// gradients abort the step with the parameters untouched.
pub fn sgd_step_clipped<T: Scalar>(params: Vec<&mut Param<T>>, opt: &mut OptimState) -> Result<StepInfo> {
    if !(opt.lr > 0.0) || !(opt.clip > 0.0) {
        return Err(Error::invalid("lr and clip must be positive"));
    }
    let mut sq = 0.0f64;
    for p in &params {
        for &g in p.grad.data() {
            let g = g.f64();
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    let scale = match opt.clip_mode {
        ClipMode::Norm if norm > opt.clip => opt.clip / norm,
        _ => 1.0,
    };
    let lr = T::of(opt.lr);
    let (s, c) = (T::of(scale), T::of(opt.clip));
    for p in params {
        let Param { value, grad, .. } = p;
        for (w, &g) in value.data_mut().iter_mut().zip(grad.data()) {
            let g = match opt.clip_mode {
                ClipMode::Norm => g * s,
                ClipMode::Value => g.max(-c).min(c),
            };
            *w = *w - lr * g;
        }
        grad.fill(T::zero());
    }
    opt.step += 1;
    Ok(StepInfo { grad_norm: norm, scale })
}

/// Shuffles `0..n` with `seed` and deals it into `k` folds whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!("k={k} must be in 2..={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + (f < extra) as usize;
        folds.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(folds)
}

/// Seeded shuffle into `(train, held_out)` with `held_out` getting `frac` of the items.
pub fn train_val_split(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::invalid(format!("held-out fraction {frac} outside [0,1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (n as f64 * frac).round() as usize;
    let val = idx.split_off(n - held);
    Ok((idx, val))
}

/// FNV-1a over the bytes of `s`.
pub fn fnv1a(s: &[u8]) -> u64 {
    s.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_final: f64,
    pub l_aux: f64,
    /// Token accuracy of the training-mode predictions seen during the epoch.
    pub accuracy: f64,
    pub wall_secs: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Batches dropped because they held fewer than two words (batch norm needs two).
    pub skipped_batches: usize,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain data serialises") + "\n")
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

pub struct TrainOptions<'a> {
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl<'a> TrainOptions<'a> {
    pub fn new(epochs: usize, seed: u64, optim: OptimConfig) -> Self {
        Self {
            epochs,
            seed,
            optim,
            on_epoch: None,
        }
    }
}

/// Outcome of a run: report plus the position of the batch-order stream.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub rng: RngState,
    pub steps: u64,
}

fn config_hash<T>(model: &BSpell<T>, opts: &TrainOptions, extra: &str) -> String {
    let json = serde_json::json!({
        "model": model.config,
        "optim": opts.optim,
        "epochs": opts.epochs,
        "extra": extra,
    });
    format!("{:016x}", fnv1a(json.to_string().as_bytes()))
}

fn run<F>(
    model: &mut BSpell<f32>,
    data: &[EncodedSentence],
    aux_weight: f64,
    opts: &mut TrainOptions,
    hash: String,
    mut prepare: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, usize, &EncodedSentence) -> Result<EncodedSentence>,
{
    if data.is_empty() {
        return Err(Error::Empty("training corpus has no sentences".into()));
    }
    let mut opt = OptimState::new(&opts.optim)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order_rng.set_stream(STREAM_SHUFFLE);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    drop_rng.set_stream(STREAM_DROPOUT);
    let mut report = TrainReport {
        seed: opts.seed,
        config_hash: hash.clone(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut lt, mut lf, mut la, mut words, mut hits) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(opts.optim.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| prepare(epoch, i, &data[i]))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = batch.iter().map(EncodedSentence::len).sum();
            if n < 2 {
                report.skipped_batches += 1;
                continue;
            }
            model.zero_grad();
            let (loss, pred) = model.train_step_grads(&batch, aux_weight, Mode::Train, &mut drop_rng)?;
            sgd_step_clipped(model.params_mut(), &mut opt)?;
            let targets = crate::model::flatten_targets(&batch);
            hits += pred.argmax.iter().zip(&targets).filter(|(a, b)| a == b).count();
            lt += loss.l_total * n as f64;
            lf += loss.l_final * n as f64;
            la += loss.l_aux * n as f64;
            words += n;
        }
        let w = words.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            l_total: lt / w,
            l_final: lf / w,
            l_aux: la / w,
            accuracy: hits as f64 / w,
            wall_secs: started.elapsed().as_secs_f64(),
            seed: opts.seed,
            config_hash: hash.clone(),
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&rec);
        }
        report.epochs.push(rec);
    }
    Ok(TrainOutcome {
        report,
        rng: RngState::capture(opts.seed, &order_rng),
        steps: opt.step,
    })
}

/// Masked-input pretraining on clean sentences: targets are the original words.
pub fn pretrain(
    model: &mut BSpell<f32>,
    corpus: &[EncodedSentence],
    mask: &MaskConfig,
    opts: &mut TrainOptions,
) -> Result<TrainOutcome> {
    mask.validate()?;
    let aux = if model.config.aux_in_pretraining {
        model.config.aux_weight
    } else {
        0.0
    };
    let hash = config_hash(model, opts, &serde_json::to_string(mask)?);
    let seed = opts.seed;
    run(model, corpus, aux, opts, hash, |epoch, i, s| {
        let mut rng = line_rng(seed ^ MASK_SALT ^ (epoch as u64).wrapping_mul(0x9E37_79B9), i as u64);
        let lengths: Vec<usize> = s.words.iter().map(|w| w.len()).collect();
        apply_plan(s, &plan(&lengths, mask, &mut rng)?)
    })
}

/// Supervised training on encoded (noisy input, correct target) sentences.
pub fn finetune(model: &mut BSpell<f32>, pairs: &[EncodedSentence], opts: &mut TrainOptions) -> Result<TrainOutcome> {
    let aux = model.config.aux_weight;
    let hash = config_hash(model, opts, "finetune");
    run(model, pairs, aux, opts, hash, |_, _, s| Ok(s.clone()))
}

/// Word-aligned `noisy<TAB>correct` pairs; misaligned or malformed lines are
/// counted and dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub rejected: usize,
}

pub fn parse_pairs(text: &str) -> PairCorpus {
    let mut out = PairCorpus::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((noisy, correct)) = line.split_once('\t') else {
            out.rejected += 1;
            continue;
        };
        let (n, c) = (tokenize(noisy), tokenize(correct));
        if n.is_empty() || n.len() != c.len() {
            out.rejected += 1;
            continue;
        }
        out.pairs.push((n, c));
    }
    out
}

pub fn encode_pairs(
    pairs: &[(Vec<String>, Vec<String>)],
    vocab: &Vocab,
    inv: &CharInventory,
    limits: Limits,
) -> Result<Vec<EncodedSentence>> {
    let mut out = Vec::new();
    for (n, c) in pairs {
        out.extend(encode_tokens(n, c, vocab, inv, limits)?);
    }
    Ok(out)
}

/// Eval-mode token accuracy against the encoded targets.
pub fn token_accuracy(model: &mut BSpell<f32>, data: &[EncodedSentence], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("nothing to score".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let pred = model.predict(chunk)?;
        let targets = crate::model::flatten_targets(chunk);
        hits += pred.argmax.iter().zip(&targets).filter(|(a, b)| a == b).count();
        total += targets.len();
    }
    Ok(hits as f64 / total as f64)
}

/// Word-for-word corrections of `inputs` in eval mode, batched.
pub fn correct_tokens(
    model: &mut BSpell<f32>,
    inputs: &[Vec<String>],
    vocab: &Vocab,
    inv: &CharInventory,
    batch_size: usize,
) -> Result<Vec<Vec<String>>> {
    let limits = model.limits();
    let mut out = Vec::with_capacity(inputs.len());
    for group in inputs.chunks(batch_size.max(1)) {
        let mut encoded = Vec::new();
        for toks in group {
            let e = encode_tokens(toks, toks, vocab, inv, limits)?;
            encoded.extend(e);
        }
        let mut pred = model.predict(&encoded)?;
        let surfaces: Vec<String> = group.iter().flatten().cloned().collect();
        pred.emit(vocab, &surfaces)?;
        let mut words = pred.emitted.into_iter();
        for toks in group {
            out.push(words.by_ref().take(toks.len()).collect());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn param(vals: &[f64], grads: &[f64]) -> Param<f64> {
        let mut p = Param::new("p", Tensor::from_f64(&[vals.len()], vals).unwrap());
        p.grad = Tensor::from_f64(&[grads.len()], grads).unwrap();
        p
    }

    fn opt(lr: f64, mode: ClipMode) -> OptimState {
        OptimState {
            lr,
            clip: 5.0,
            clip_mode: mode,
            step: 0,
        }
    }

    #[test]
    fn norm_clipping_halves_large_gradients() {
        let mut p = param(&[1.0, 1.0], &[6.0, 8.0]);
        let info = sgd_step_clipped(vec![&mut p], &mut opt(0.1, ClipMode::Norm)).unwrap();
        assert_eq!(info.grad_norm, 10.0);
        assert_eq!(info.scale, 0.5);
        assert!((p.value.data()[0] - 0.7).abs() < 1e-12);
        assert!((p.value.data()[1] - 0.6).abs() < 1e-12);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn small_gradients_unscaled() {
        let mut p = param(&[1.0, 2.0], &[1.8, 2.4]);
        sgd_step_clipped(vec![&mut p], &mut opt(0.001, ClipMode::Norm)).unwrap();
        assert!((p.value.data()[0] - (1.0 - 0.001 * 1.8)).abs() < 1e-15);
        assert!((p.value.data()[1] - (2.0 - 0.001 * 2.4)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        sgd_step_clipped(vec![&mut p], &mut opt(0.5, ClipMode::Norm)).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn value_clipping_clamps_entries() {
        let mut p = param(&[0.0, 0.0], &[9.0, -1.0]);
        sgd_step_clipped(vec![&mut p], &mut opt(1.0, ClipMode::Value)).unwrap();
        assert_eq!(p.value.data(), &[-5.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = param(&[1.0, 1.0], &[f64::NAN, 1.0]);
        let mut o = opt(0.1, ClipMode::Norm);
        assert!(matches!(sgd_step_clipped(vec![&mut p], &mut o), Err(Error::NonFinite(_))));
        assert_eq!(p.value.data(), &[1.0, 1.0]);
        assert_eq!(o.step, 0);
    }

    #[test]
    fn kfold_examples() {
        let f = kfold_split(10, 5, 3).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        let mut all: Vec<usize> = f.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(f, kfold_split(10, 5, 3).unwrap());
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(3, 1, 0).is_err());
    }

    #[test]
    fn split_is_reproducible() {
        let (a, b) = train_val_split(100, 0.2, 5).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(train_val_split(100, 0.2, 5).unwrap(), (a, b));
    }

    #[test]
    fn misaligned_pairs_rejected() {
        let c = parse_pairs("a b\ta b\nx\tx y\nno tab here\n\nc\tc\n");
        assert_eq!(c.pairs.len(), 2);
        assert_eq!(c.rejected, 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn folds_partition(n in 2usize..60, k in 2usize..10, seed in 0u64..100) {
                prop_assume!(k <= n);
                let f = kfold_split(n, k, seed).unwrap();
                let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                let mut all = f.concat();
                all.sort();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn step_change_bounded(g in prop::collection::vec(-100.0f64..100.0, 1..20), lr in 0.0001f64..1.0) {
                let w = vec![0.0; g.len()];
                let mut p = param(&w, &g);
                sgd_step_clipped(vec![&mut p], &mut opt(lr, ClipMode::Norm)).unwrap();
                let change = p.value.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!(change <= lr * 5.0 * (1.0 + 1e-12));
            }
        }
    }
}
