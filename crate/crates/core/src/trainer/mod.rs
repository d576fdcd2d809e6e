//! Parameter initialization and deterministic mini-batch training.
//!
//! Each pair is evaluated on its own tape: the image grid runs through as many
//! attention steps as the pair has queries, every step's pooled feature and
//! every query are embedded, and the per-object cosine-embedding losses are
//! summed. Per-pair gradients are reduced in batch order, so the result does
//! not depend on the worker count.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::attention::{AttentionDims, AttentionParams, LSTM_PREFIX};
use crate::datasetio::FeatureSource;
use crate::embedheads::{record_multi_loss, ImageHead, LossConfig, QueryHead};
use crate::error::{Error, Result};
use crate::numkernel::{Bound, LstmParams, ParamStore, Tape, Tensor, Var};
use crate::pairgen::TrainingPair;
use crate::rng::{seeded, Rng, Stream};

/// Widths of every layer of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Grid channels `M`.
    pub channels: usize,
    /// Raw query feature width.
    pub query_dim: usize,
    /// Attention LSTM hidden width.
    pub hidden: usize,
    /// Attention scorer width.
    pub attn: usize,
    /// First query-head layer width.
    pub query_hidden: usize,
    /// Joint embedding width.
    pub embed: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { channels: 512, query_dim: 1000, hidden: 512, attn: 256, query_hidden: 1024, embed: 512 }
    }
}

impl ModelDims {
    pub fn attention(&self) -> AttentionDims {
        AttentionDims { channels: self.channels, hidden: self.hidden, attn: self.attn }
    }
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

pub fn init_attention(dims: AttentionDims, rng: &mut Rng) -> ParamStore {
    let (m, hd, da) = (dims.channels, dims.hidden, dims.attn);
    let mut p = ParamStore::new();
    // per-gate fan sizes: each gate block is an hd × m (resp. hd × hd) layer
    p.insert(format!("{LSTM_PREFIX}{}", LstmParams::W_IH), xavier(rng, 4 * hd, m, m, hd));
    p.insert(format!("{LSTM_PREFIX}{}", LstmParams::W_HH), xavier(rng, 4 * hd, hd, hd, hd));
    let mut bias = vec![0.0; 4 * hd];
    bias[hd..2 * hd].fill(1.0);
    p.insert(format!("{LSTM_PREFIX}{}", LstmParams::BIAS), Tensor::vector(bias));
    p.insert(AttentionParams::W_H, xavier(rng, da, hd, hd, da));
    p.insert(AttentionParams::W_P, xavier(rng, da, m, m, da));
    let w = xavier(rng, 1, da, da, 1).reshape(vec![da]).expect("sized");
    p.insert(AttentionParams::W, w);
    p.insert(AttentionParams::B, Tensor::zeros(&[da]));
    p
}

pub fn init_query_head(input: usize, hidden: usize, embed: usize, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(QueryHead::W1, xavier(rng, hidden, input, input, hidden));
    p.insert(QueryHead::B1, Tensor::zeros(&[hidden]));
    p.insert(QueryHead::W2, xavier(rng, embed, hidden, hidden, embed));
    p.insert(QueryHead::B2, Tensor::zeros(&[embed]));
    p
}

pub fn init_image_head(input: usize, embed: usize, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(ImageHead::W, xavier(rng, embed, input, input, embed));
    p.insert(ImageHead::B, Tensor::zeros(&[embed]));
    p
}

/// Xavier-uniform weights, zero biases except the LSTM forget gate (1.0).
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ParamStore> {
    let all = [dims.channels, dims.query_dim, dims.hidden, dims.attn, dims.query_hidden, dims.embed];
    if all.contains(&0) {
        return Err(Error::arg(format!("model dimensions must be positive: {dims:?}")));
    }
    let mut rng = seeded(seed, Stream::Init);
    let mut p = init_attention(dims.attention(), &mut rng);
    p.extend(init_query_head(dims.query_dim, dims.query_hidden, dims.embed, &mut rng));
    p.extend(init_image_head(dims.channels, dims.embed, &mut rng));
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Attention steps computed per image at index time; bounds query arity.
    pub n_max: usize,
    /// Worker threads for per-batch gradients. Does not affect results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            margin: 0.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            n_max: 2,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::arg(format!("learning rate must be finite and nonnegative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.n_max == 0 {
            return Err(Error::arg("epochs, batch_size and n_max must be at least 1"));
        }
        LossConfig::new(self.margin)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::arg(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg("eps must be positive"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { margin: self.margin }
    }
}

/// Records the summed multi-object loss of one pair on `tape`.
pub fn record_pair_loss<'t>(
    tape: &mut Tape<'t>,
    bound: &Bound,
    pair: &TrainingPair,
    source: &'t dyn FeatureSource,
    loss: &LossConfig,
) -> Result<Var> {
    let attn = AttentionParams::from_bound(tape, bound)?;
    let image_head = ImageHead::from_bound(tape, bound)?;
    let query_head = QueryHead::from_bound(tape, bound)?;
    let grid = tape.constant_ref(source.grid(&pair.item.id)?.values());
    let steps = attn.attend(tape, grid, pair.query_refs.len())?;
    let mut terms = Vec::with_capacity(steps.len());
    for (step, q) in steps.iter().zip(&pair.query_refs) {
        let raw = tape.constant_ref(source.query(q.modality, &q.key)?);
        let qe = query_head.embed(tape, raw)?;
        let fe = image_head.embed(tape, step.pooled)?;
        terms.push((qe, fe));
    }
    record_multi_loss(tape, &terms, pair.label, loss)
}

/// Loss and parameter gradient of one pair.
pub fn pair_gradient(
    params: &ParamStore,
    pair: &TrainingPair,
    source: &dyn FeatureSource,
    loss: &LossConfig,
) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = record_pair_loss(&mut tape, &bound, pair, source, loss)
        .map_err(|e| Error::Item { id: pair.item.id.clone(), source: Box::new(e) })?;
    let value = tape.scalar(out);
    let grads = tape.backward(out)?.to_store(&tape, &bound);
    Ok((value, grads))
}

fn batch_gradients(
    params: &ParamStore,
    batch: &[&TrainingPair],
    source: &dyn FeatureSource,
    loss: &LossConfig,
    threads: usize,
) -> Result<Vec<(f64, ParamStore)>> {
    let threads = threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return batch.iter().map(|p| pair_gradient(params, p, source, loss)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|p| pair_gradient(params, p, source, loss))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("gradient worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Mean pair loss per epoch, evaluated before each batch's update.
    pub loss_curve: Vec<f64>,
}

/// Minimizes the mean pair loss with Adam over shuffled mini-batches.
pub fn train(
    pairs: &[TrainingPair],
    mut params: ParamStore,
    cfg: &TrainConfig,
    source: &dyn FeatureSource,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::arg("no training pairs"));
    }
    if let Some(p) = pairs.iter().find(|p| p.query_refs.len() > cfg.n_max) {
        return Err(Error::arg(format!(
            "pair for {} has {} queries, more than n_max = {}",
            p.item.id,
            p.query_refs.len(),
            cfg.n_max
        )));
    }
    let loss = cfg.loss();
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = seeded(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut pair_loss = vec![0.0; pairs.len()];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingPair> = idx.iter().map(|&i| &pairs[i]).collect();
            let results = batch_gradients(&params, &batch, source, &loss, cfg.threads)?;
            let mut sum: Option<ParamStore> = None;
            let mut batch_loss = 0.0;
            for (&i, (l, g)) in idx.iter().zip(results) {
                pair_loss[i] = l;
                batch_loss += l;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            t.add_assign(g.get(name)?);
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let scale = 1.0 / idx.len() as f64;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: batch_loss * scale });
            }
            adam.step(&mut params, &grads, cfg.lr);
        }
        let mean = pair_loss.iter().sum::<f64>() / pairs.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        curve.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs, batch: 0, loss: f64::NAN });
    }
    Ok(TrainOutcome { params, loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FeatureGrid;
    use crate::embedheads::Label;
    use crate::numkernel::{grad_check, DEFAULT_STEP};
    use crate::pairgen::{DatasetItem, Modality, QueryRef};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    struct Fixture {
        grids: BTreeMap<String, FeatureGrid>,
        queries: BTreeMap<String, Tensor>,
    }

    impl FeatureSource for Fixture {
        fn grid(&self, id: &str) -> Result<&FeatureGrid> {
            self.grids.get(id).ok_or_else(|| Error::arg(id.to_owned()))
        }
        fn query(&self, _: Modality, key: &str) -> Result<&Tensor> {
            self.queries.get(key).ok_or_else(|| Error::arg(key.to_owned()))
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_dims() -> ModelDims {
        ModelDims { channels: 3, query_dim: 5, hidden: 3, attn: 3, query_hidden: 8, embed: 4 }
    }

    fn fixture(rng: &mut ChaCha8Rng, dims: &ModelDims, images: usize) -> Fixture {
        let grids = (0..images)
            .map(|i| (format!("im{i}"), FeatureGrid::new(2, 2, rand_t(rng, &[4, dims.channels])).unwrap()))
            .collect();
        let queries = (0..4).map(|i| (format!("q{i}"), rand_t(rng, &[dims.query_dim]))).collect();
        Fixture { grids, queries }
    }

    fn pair(image: usize, queries: &[usize], label: Label) -> TrainingPair {
        TrainingPair {
            query_refs: queries
                .iter()
                .map(|q| QueryRef { modality: Modality::Text, key: format!("q{q}"), class: format!("c{q}") })
                .collect(),
            item: DatasetItem {
                id: format!("im{image}"),
                class_labels: vec!["c0".into()],
                grid_ref: String::new(),
                fine_grained_sketch_refs: vec![],
                text_label_refs: vec![],
            },
            label,
        }
    }

    #[test]
    fn init_rules() {
        let dims = ModelDims { channels: 4, query_dim: 4, hidden: 4, attn: 4, query_hidden: 4, embed: 4 };
        let a = init_params(&dims, 7).unwrap();
        assert!(a.bit_eq(&init_params(&dims, 7).unwrap()));
        assert!(!a.bit_eq(&init_params(&dims, 8).unwrap()));
        let bound = (6.0f64 / 8.0).sqrt();
        assert!((bound - 0.8660).abs() < 1e-4);
        for (name, t) in a.iter() {
            if name.ends_with('b') || name.contains(".b") || name.ends_with("bias") {
                let expected: Vec<f64> = if name == "attn.lstm.bias" {
                    (0..16).map(|i| if (4..8).contains(&i) { 1.0 } else { 0.0 }).collect()
                } else {
                    vec![0.0; t.numel()]
                };
                assert_eq!(t.data(), expected.as_slice(), "{name}");
            } else if t.shape() == [4, 4] {
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
        let bad = ModelDims { hidden: 0, ..dims };
        assert!(matches!(init_params(&bad, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn whole_model_gradient() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fx = fixture(&mut rng, &dims, 3);
        for (k, seed) in (0..6).enumerate() {
            let mut params = init_params(&dims, seed).unwrap();
            // keep relus off their kinks
            for name in [QueryHead::B1, QueryHead::B2, ImageHead::B] {
                let n = params.get(name).unwrap().numel();
                params.insert(name, Tensor::vector((0..n).map(|_| rng.random_range(0.3..0.6)).collect()));
            }
            let p = if k % 2 == 0 { pair(k % 3, &[0, 1], Label::Positive) } else { pair(k % 3, &[2], Label::Negative) };
            let loss = LossConfig::default();
            let err = grad_check(
                |tape, b| record_pair_loss(tape, b, &p, &fx, &loss),
                &params,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn zero_lr_leaves_params_and_curve_flat() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fx = fixture(&mut rng, &dims, 3);
        let pairs = vec![pair(0, &[0], Label::Positive), pair(1, &[1], Label::Negative), pair(2, &[2, 3], Label::Positive)];
        let params = init_params(&dims, 3).unwrap();
        let cfg = TrainConfig { lr: 0.0, epochs: 4, batch_size: 2, ..Default::default() };
        let out = train(&pairs, params.clone(), &cfg, &fx).unwrap();
        assert!(out.params.bit_eq(&params));
        assert!(out.loss_curve.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
    }

    #[test]
    fn overfits_a_single_positive_pair() {
        let dims = ModelDims { channels: 6, query_dim: 8, hidden: 6, attn: 6, query_hidden: 8, embed: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fx = fixture(&mut rng, &dims, 1);
        let pairs = vec![pair(0, &[0], Label::Positive)];
        let cfg = TrainConfig { lr: 1e-3, epochs: 500, batch_size: 1, ..Default::default() };
        let out = train(&pairs, init_params(&dims, 5).unwrap(), &cfg, &fx).unwrap();
        let last = *out.loss_curve.last().unwrap();
        let (final_loss, _) = pair_gradient(&out.params, &pairs[0], &fx, &cfg.loss()).unwrap();
        assert!(final_loss < 1e-2, "final loss {final_loss}, last epoch {last}");
    }

    #[test]
    fn one_small_step_decreases_positive_loss() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = fixture(&mut rng, &dims, 2);
        let p = pair(1, &[2], Label::Positive);
        let loss = LossConfig::default();
        for seed in 0..5 {
            let params = init_params(&dims, seed).unwrap();
            let (before, grads) = pair_gradient(&params, &p, &fx, &loss).unwrap();
            assert!(before > 0.0);
            let stepped: ParamStore = params
                .iter()
                .map(|(k, t)| {
                    let g = grads.get(k).unwrap();
                    let data = t.data().iter().zip(g.data()).map(|(x, gx)| x - 1e-3 * gx).collect();
                    (k.clone(), Tensor::new(t.shape().to_vec(), data).unwrap())
                })
                .collect();
            let (after, _) = pair_gradient(&stepped, &p, &fx, &loss).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fx = fixture(&mut rng, &dims, 3);
        let pairs: Vec<_> = (0..7)
            .map(|i| pair(i % 3, &[i % 4], if i % 2 == 0 { Label::Positive } else { Label::Negative }))
            .collect();
        let params = init_params(&dims, 9).unwrap();
        let cfg = TrainConfig { lr: 1e-2, epochs: 3, batch_size: 3, ..Default::default() };
        let a = train(&pairs, params.clone(), &cfg, &fx).unwrap();
        let b = train(&pairs, params.clone(), &cfg, &fx).unwrap();
        let c = train(&pairs, params, &TrainConfig { threads: 3, ..cfg.clone() }, &fx).unwrap();
        for other in [&b, &c] {
            assert!(a.params.bit_eq(&other.params));
            assert_eq!(
                a.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                other.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn divergence_is_reported() {
        let dims = tiny_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fx = fixture(&mut rng, &dims, 1);
        fx.queries.insert("q0".into(), Tensor::vector(vec![f64::NAN; dims.query_dim]));
        let pairs = vec![pair(0, &[0], Label::Positive)];
        let err = train(&pairs, init_params(&dims, 0).unwrap(), &TrainConfig::default(), &fx).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, batch: 0, .. }) || !err.is_usage(), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dims = tiny_dims();
        let cp = Checkpoint {
            params: init_params(&dims, 1).unwrap(),
            config: TrainConfig { lr: 0.1 + 0.2, ..Default::default() },
            epoch: 3,
            loss_history: vec![0.7, 1.0 / 3.0, 0.123456789012345678],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cp.xmc");
        save_checkpoint(&cp, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.bit_eq(&cp));

        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut foreign = bytes.clone();
        foreign[..4].copy_from_slice(b"ABCD");
        assert!(matches!(Checkpoint::decode(&foreign), Err(Error::Format { offset: 0, .. })));
    }
}
