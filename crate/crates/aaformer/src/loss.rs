//! Training objective: per-token label-smoothed cross-entropy with unshared
//! classifiers, plus batch-hard triplet losses on the global (CLS) feature
//! and on the concatenated part features. The total loss is their sum.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{trunc_normal, ModelError, ModelOutput};
use crate::tensor::{ParameterStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Keeps squared distances strictly positive so the sqrt gradient stays
/// finite when a mined pair happens to coincide.
const DIST_EPS: f64 = 1e-16;

/// One independent linear classifier per token (CLS plus each part token);
/// weights are not shared across tokens.
pub struct ClassifierBank {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

fn classifier_names(i: usize) -> (String, String) {
    (format!("classifier{i:02}.weight"), format!("classifier{i:02}.bias"))
}

impl ClassifierBank {
    /// Register `num_tokens` classifiers of shape `[D×C]` (+bias) in the
    /// store and return the bank view.
    pub fn init(
        store: &mut ParameterStore,
        num_tokens: usize,
        embed_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        for i in 0..num_tokens {
            let (w, b) = classifier_names(i);
            store.insert(
                w,
                Tensor::parameter(
                    &[embed_dim, num_classes],
                    trunc_normal(rng, embed_dim * num_classes, 0.02),
                )?,
            )?;
            store.insert(b, Tensor::parameter(&[num_classes], vec![0.0; num_classes])?)?;
        }
        Self::from_store(store, num_tokens)
    }

    pub fn from_store(store: &ParameterStore, num_tokens: usize) -> Result<Self> {
        let mut weights = Vec::with_capacity(num_tokens);
        let mut biases = Vec::with_capacity(num_tokens);
        for i in 0..num_tokens {
            let (w, b) = classifier_names(i);
            weights.push(store.get(&w)?);
            biases.push(store.get(&b)?);
        }
        Ok(Self { weights, biases })
    }

    pub fn num_tokens(&self) -> usize {
        self.weights.len()
    }

    pub fn num_classes(&self) -> usize {
        self.weights[0].cols()
    }
}

/// Cross-entropy against the one-hot target mixed toward uniform:
/// the true class gets `1 - s + s/C`, every other class `s/C`.
pub fn cross_entropy_smoothed(logits: &Tensor, label: usize, smoothing: f64) -> Result<Tensor> {
    let classes = logits.numel();
    if label >= classes {
        return Err(ObjectiveError::LabelOutOfRange { label, classes });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ObjectiveError::InvalidBatch(format!(
            "smoothing must be in [0,1), got {smoothing}"
        )));
    }
    let log_probs = logits.reshape(&[1, classes])?.log_softmax_rows()?;
    let mut q = vec![smoothing / classes as f64; classes];
    q[label] += 1.0 - smoothing;
    let target = Tensor::new(&[1, classes], q)?;
    Ok(log_probs.mul(&target)?.sum()?.neg()?)
}

/// Mean over the P+1 tokens of smoothed cross-entropy under each token's own
/// classifier, averaged over the batch.
pub fn loss_cls(
    outputs: &[ModelOutput],
    labels: &[usize],
    bank: &ClassifierBank,
    smoothing: f64,
) -> Result<Tensor> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(ObjectiveError::InvalidBatch(format!(
            "{} outputs vs {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let num_tokens = bank.num_tokens();
    let mut batch_total: Option<Tensor> = None;
    for (out, &label) in outputs.iter().zip(labels) {
        if out.part_tokens.rows() + 1 != num_tokens {
            return Err(ObjectiveError::InvalidBatch(format!(
                "{} classifiers for {} tokens",
                num_tokens,
                out.part_tokens.rows() + 1
            )));
        }
        let d = out.cls.numel();
        let mut sample_total: Option<Tensor> = None;
        for i in 0..num_tokens {
            let feat = if i == 0 {
                out.cls.reshape(&[1, d])?
            } else {
                out.part_tokens.select_rows(&[i - 1])?
            };
            let logits = feat.matmul(&bank.weights[i])?.add_rowwise(&bank.biases[i])?;
            let ce = cross_entropy_smoothed(&logits, label, smoothing)?;
            sample_total = Some(match sample_total {
                Some(t) => t.add(&ce)?,
                None => ce,
            });
        }
        let sample = sample_total.unwrap().scale(1.0 / num_tokens as f64)?;
        batch_total = Some(match batch_total {
            Some(t) => t.add(&sample)?,
            None => sample,
        });
    }
    Ok(batch_total.unwrap().scale(1.0 / outputs.len() as f64)?)
}

/// Descriptors of a PK-sampled batch: per image the global (CLS) feature and
/// the concatenated part features, with identity labels.
pub struct TripletBatch {
    pub global: Vec<Tensor>,
    pub part: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl TripletBatch {
    pub fn new(outputs: &[ModelOutput], labels: &[usize]) -> Result<Self> {
        if outputs.len() != labels.len() {
            return Err(ObjectiveError::InvalidBatch(format!(
                "{} outputs vs {} labels",
                outputs.len(),
                labels.len()
            )));
        }
        let mut counts = std::collections::BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if counts.len() < 2 {
            return Err(ObjectiveError::InvalidBatch(
                "triplet mining needs at least two identities".into(),
            ));
        }
        if let Some((&id, _)) = counts.iter().find(|(_, &c)| c < 2) {
            return Err(ObjectiveError::InvalidBatch(format!(
                "identity {id} has fewer than two images in the batch"
            )));
        }
        let mut global = Vec::with_capacity(outputs.len());
        let mut part = Vec::with_capacity(outputs.len());
        for out in outputs {
            let p = out.part_tokens.rows();
            let d = out.part_tokens.cols();
            global.push(out.cls.clone());
            part.push(out.part_tokens.reshape(&[p * d])?);
        }
        Ok(Self { global, part, labels: labels.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Hardest positive and hardest negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinedPair {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining on a precomputed distance matrix: per anchor the
/// farthest same-label element (excluding itself) and the nearest
/// different-label element. Ties break toward the lowest index.
pub fn batch_hard_pairs(dist: &[Vec<f64>], labels: &[usize]) -> Result<Vec<MinedPair>> {
    let b = labels.len();
    let mut pairs = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j != a && labels[j] == labels[a] {
                if pos.map_or(true, |p| dist[a][j] > dist[a][p]) {
                    pos = Some(j);
                }
            } else if labels[j] != labels[a] {
                if neg.map_or(true, |n| dist[a][j] < dist[a][n]) {
                    neg = Some(j);
                }
            }
        }
        let (Some(positive), Some(negative)) = (pos, neg) else {
            return Err(ObjectiveError::InvalidBatch(format!(
                "anchor {a} has no valid positive or negative"
            )));
        };
        pairs.push(MinedPair { anchor: a, positive, negative });
    }
    Ok(pairs)
}

fn euclidean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = a.sub(b)?;
    Ok(diff.mul(&diff)?.sum()?.add_scalar(DIST_EPS)?.sqrt()?)
}

fn raw_distance_matrix(descs: &[Tensor]) -> Vec<Vec<f64>> {
    let b = descs.len();
    let data: Vec<Vec<f64>> = descs.iter().map(Tensor::to_vec).collect();
    let mut dist = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            let sq: f64 = data[i]
                .iter()
                .zip(&data[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dist[i][j] = (sq + DIST_EPS).sqrt();
        }
    }
    dist
}

fn branch_hinge_mean(descs: &[Tensor], labels: &[usize], margin: f64) -> Result<Tensor> {
    let pairs = batch_hard_pairs(&raw_distance_matrix(descs), labels)?;
    let mut total: Option<Tensor> = None;
    for pair in &pairs {
        let dp = euclidean(&descs[pair.anchor], &descs[pair.positive])?;
        let dn = euclidean(&descs[pair.anchor], &descs[pair.negative])?;
        let hinge = dp.sub(&dn)?.add_scalar(margin)?.relu()?;
        total = Some(match total {
            Some(t) => t.add(&hinge)?,
            None => hinge,
        });
    }
    Ok(total.unwrap().scale(1.0 / pairs.len() as f64)?)
}

/// Two-term batch-hard triplet loss over Euclidean distances:
/// half the sum of the global-branch hinge and the part-branch hinge, each
/// averaged over anchors.
pub fn loss_triplet(batch: &TripletBatch, margin: f64) -> Result<Tensor> {
    if margin < 0.0 {
        return Err(ObjectiveError::InvalidBatch(format!(
            "margin must be non-negative, got {margin}"
        )));
    }
    let global = branch_hinge_mean(&batch.global, &batch.labels, margin)?;
    let part = branch_hinge_mean(&batch.part, &batch.labels, margin)?;
    Ok(global.add(&part)?.scale(0.5)?)
}

/// The loss components of a batch plus their differentiable sum.
pub struct LossBreakdown {
    pub total: Tensor,
    pub cls: Tensor,
    pub triplet: Tensor,
}

/// Total objective: classification loss plus triplet loss.
pub fn loss_total(
    outputs: &[ModelOutput],
    labels: &[usize],
    bank: &ClassifierBank,
    smoothing: f64,
    margin: f64,
) -> Result<LossBreakdown> {
    let cls = loss_cls(outputs, labels, bank, smoothing)?;
    let batch = TripletBatch::new(outputs, labels)?;
    let triplet = loss_triplet(&batch, margin)?;
    let total = cls.add(&triplet)?;
    Ok(LossBreakdown { total, cls, triplet })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    #[test]
    fn peaked_logits_without_smoothing_have_near_zero_loss() {
        let logits = Tensor::new(&[3], vec![1000.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy_smoothed(&logits, 0, 0.0).unwrap().item().unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 4, 7] {
            let logits = Tensor::zeros(&[c]);
            let loss = cross_entropy_smoothed(&logits, 1 % c, 0.0).unwrap().item().unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_case_matches_high_precision_reference() {
        // C=4, logits [1,0,0,0], label 0, smoothing 0.1; reference computed
        // with 50-digit arithmetic.
        let logits = Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = cross_entropy_smoothed(&logits, 0, 0.1).unwrap().item().unwrap();
        assert!((loss - 0.81866838062867915615).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let logits = Tensor::zeros(&[3]);
        assert!(matches!(
            cross_entropy_smoothed(&logits, 3, 0.0),
            Err(ObjectiveError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_is_nonnegative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let logits =
                Tensor::new(&[5], (0..5).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
            let s = rng.gen_range(0.0..0.9);
            let label = rng.gen_range(0..5);
            let loss = cross_entropy_smoothed(&logits, label, s).unwrap().item().unwrap();
            assert!(loss >= 0.0);
        }
    }

    fn fake_output(cls: Vec<f64>, parts: Vec<Vec<f64>>) -> ModelOutput {
        ModelOutput {
            cls: Tensor::new(&[cls.len()], cls).unwrap(),
            part_tokens: Tensor::from_rows(&parts).unwrap(),
            traces: Vec::new(),
        }
    }

    fn identity_bank(store: &mut ParameterStore, tokens: usize, d: usize, c: usize) -> ClassifierBank {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        ClassifierBank::init(store, tokens, d, c, &mut rng).unwrap()
    }

    #[test]
    fn loss_cls_with_no_parts_is_plain_cross_entropy() {
        let mut store = ParameterStore::new();
        let bank = identity_bank(&mut store, 1, 4, 3);
        let out = ModelOutput {
            cls: Tensor::new(&[4], vec![0.3, -0.2, 0.9, 0.0]).unwrap(),
            part_tokens: Tensor::new(&[0, 4], vec![]).unwrap(),
            traces: Vec::new(),
        };
        let got = loss_cls(&[out], &[2], &bank, 0.1).unwrap().item().unwrap();

        let feat = Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.0]).unwrap();
        let logits = feat.matmul(&bank.weights[0]).unwrap().add_rowwise(&bank.biases[0]).unwrap();
        let expect = cross_entropy_smoothed(&logits, 2, 0.1).unwrap().item().unwrap();
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn identical_token_logits_reduce_to_single_token_loss() {
        // All classifiers identical and all token features identical, so the
        // mean over P+1 tokens equals any single term.
        let mut store = ParameterStore::new();
        let d = 4;
        let c = 3;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..d * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for i in 0..3 {
            store
                .insert(format!("classifier{i:02}.weight"), Tensor::parameter(&[d, c], w.clone()).unwrap())
                .unwrap();
            store
                .insert(format!("classifier{i:02}.bias"), Tensor::parameter(&[c], vec![0.0; c]).unwrap())
                .unwrap();
        }
        let bank = ClassifierBank::from_store(&store, 3).unwrap();
        let feat = vec![0.3, -0.2, 0.9, 0.0];
        let out = fake_output(feat.clone(), vec![feat.clone(), feat.clone()]);
        let got = loss_cls(&[out], &[1], &bank, 0.0).unwrap().item().unwrap();

        let logits = Tensor::new(&[1, d], feat).unwrap().matmul(&bank.weights[0]).unwrap();
        let single = cross_entropy_smoothed(&logits, 1, 0.0).unwrap().item().unwrap();
        assert!((got - single).abs() < 1e-12);
    }

    #[test]
    fn loss_cls_averages_token_terms() {
        let mut store = ParameterStore::new();
        let bank = identity_bank(&mut store, 3, 4, 3);
        let cls = vec![0.1, 0.5, -0.3, 0.8];
        let parts = vec![vec![1.0, 0.0, 0.0, -1.0], vec![-0.4, 0.2, 0.6, 0.3]];
        let out = fake_output(cls.clone(), parts.clone());
        let got = loss_cls(&[out], &[0], &bank, 0.1).unwrap().item().unwrap();

        let mut expect = 0.0;
        let feats = [cls, parts[0].clone(), parts[1].clone()];
        for (i, feat) in feats.iter().enumerate() {
            let logits = Tensor::new(&[1, 4], feat.clone())
                .unwrap()
                .matmul(&bank.weights[i])
                .unwrap()
                .add_rowwise(&bank.biases[i])
                .unwrap();
            expect += cross_entropy_smoothed(&logits, 0, 0.1).unwrap().item().unwrap();
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    /// Batch where every anchor mines distances (dp, dn) in both branches.
    fn two_id_batch(dp: f64, dn: f64) -> (Vec<ModelOutput>, Vec<usize>) {
        // Two images per identity at (0, 0) and (dp, 0); the second identity
        // sits dn away on the orthogonal axis, so dp and dn are exact.
        let mk = |x: f64, y: f64| fake_output(vec![x, y], vec![vec![x, y]]);
        (
            vec![mk(0.0, 0.0), mk(dp, 0.0), mk(0.0, dn), mk(dp, dn)],
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        let (outputs, labels) = two_id_batch(0.5, 1.0);
        let batch = TripletBatch::new(&outputs, &labels).unwrap();
        let loss = loss_triplet(&batch, 0.3).unwrap().item().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn violated_margin_matches_hand_arithmetic() {
        let (outputs, labels) = two_id_batch(1.0, 0.5);
        let batch = TripletBatch::new(&outputs, &labels).unwrap();
        let loss = loss_triplet(&batch, 0.3).unwrap().item().unwrap();
        // Every anchor: [1.0 - 0.5 + 0.3]+ = 0.8 in both branches; total
        // 0.5·(0.8 + 0.8) = 0.8.
        assert!((loss - 0.8).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn mining_matches_exhaustive_recomputation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let descs: Vec<Vec<f64>> =
                (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels = vec![0, 0, 1, 1];
            let dist: Vec<Vec<f64>> = (0..4)
                .map(|i| {
                    (0..4)
                        .map(|j| {
                            let sq: f64 = descs[i]
                                .iter()
                                .zip(&descs[j])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            sq.sqrt()
                        })
                        .collect()
                })
                .collect();
            let pairs = batch_hard_pairs(&dist, &labels).unwrap();
            for (a, pair) in pairs.iter().enumerate() {
                // Exhaustive check: no same-label element farther, no
                // different-label element closer.
                for j in 0..4 {
                    if j != a && labels[j] == labels[a] {
                        assert!(dist[a][j] <= dist[a][pair.positive]);
                    }
                    if labels[j] != labels[a] {
                        assert!(dist[a][j] >= dist[a][pair.negative]);
                    }
                }
            }
        }
    }

    #[test]
    fn triplet_loss_matches_brute_force_on_random_batches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let outputs: Vec<ModelOutput> = (0..4)
                .map(|_| {
                    let cls: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let part: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    fake_output(cls, vec![part])
                })
                .collect();
            let labels = vec![0, 0, 1, 1];
            let batch = TripletBatch::new(&outputs, &labels).unwrap();
            let got = loss_triplet(&batch, 0.3).unwrap().item().unwrap();

            // Independent recomputation with plain loops.
            let mut branch_means = Vec::new();
            for branch in [&batch.global, &batch.part] {
                let descs: Vec<Vec<f64>> = branch.iter().map(Tensor::to_vec).collect();
                let d = |i: usize, j: usize| -> f64 {
                    let sq: f64 = descs[i]
                        .iter()
                        .zip(&descs[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (sq + 1e-16).sqrt()
                };
                let mut total = 0.0;
                for a in 0..4 {
                    let mut dp: f64 = 0.0;
                    let mut dn = f64::INFINITY;
                    for j in 0..4 {
                        if j != a && labels[j] == labels[a] {
                            dp = dp.max(d(a, j));
                        }
                        if labels[j] != labels[a] {
                            dn = dn.min(d(a, j));
                        }
                    }
                    total += (dp - dn + 0.3).max(0.0);
                }
                branch_means.push(total / 4.0);
            }
            let expect = 0.5 * (branch_means[0] + branch_means[1]);
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn single_identity_batch_is_rejected() {
        let mk = |x: f64| fake_output(vec![x], vec![vec![x]]);
        let outputs = vec![mk(0.0), mk(1.0)];
        assert!(matches!(
            TripletBatch::new(&outputs, &[0, 0]),
            Err(ObjectiveError::InvalidBatch(_))
        ));
        // An identity with a single image is also invalid PK structure.
        let outputs = vec![mk(0.0), mk(1.0), mk(2.0)];
        assert!(TripletBatch::new(&outputs, &[0, 0, 1]).is_err());
    }

    #[test]
    fn total_is_componentwise_sum() {
        let mut store = ParameterStore::new();
        let bank = identity_bank(&mut store, 2, 2, 2);
        let (outputs, labels) = two_id_batch(1.0, 0.5);
        let breakdown = loss_total(&outputs, &labels, &bank, 0.1, 0.3).unwrap();
        let total = breakdown.total.item().unwrap();
        let sum = breakdown.cls.item().unwrap() + breakdown.triplet.item().unwrap();
        assert!((total - sum).abs() < 1e-12);

        // With the margin satisfied the triplet term vanishes entirely.
        let (outputs, labels) = two_id_batch(0.5, 1.0);
        let breakdown = loss_total(&outputs, &labels, &bank, 0.1, 0.3).unwrap();
        assert_eq!(breakdown.triplet.item().unwrap(), 0.0);
        assert!(
            (breakdown.total.item().unwrap() - breakdown.cls.item().unwrap()).abs() < 1e-15
        );
    }

    #[test]
    fn scaling_descriptors_scales_margins_consistently() {
        // Activation pattern under margin m with descriptors X equals the
        // pattern under margin c·m with descriptors c·X.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let c = 3.7;
        for _ in 0..20 {
            let descs: Vec<Vec<f64>> =
                (0..6).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels = vec![0, 0, 1, 1, 2, 2];
            let margin = rng.gen_range(0.05..0.5);

            let tensors: Vec<Tensor> =
                descs.iter().map(|d| Tensor::new(&[4], d.clone()).unwrap()).collect();
            let scaled: Vec<Tensor> = tensors.iter().map(|t| t.scale(c).unwrap()).collect();

            let base = raw_distance_matrix(&tensors);
            let big = raw_distance_matrix(&scaled);
            let p1 = batch_hard_pairs(&base, &labels).unwrap();
            let p2 = batch_hard_pairs(&big, &labels).unwrap();
            assert_eq!(p1, p2, "mining is scale-invariant");
            for (a, pair) in p1.iter().enumerate() {
                let active = base[a][pair.positive] - base[a][pair.negative] + margin > 0.0;
                let active_scaled =
                    big[a][pair.positive] - big[a][pair.negative] + c * margin > 0.0;
                assert_eq!(active, active_scaled);
            }
        }
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        use crate::tensor::{backward_graph, gradcheck};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let cls: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::parameter(&[3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let labels = vec![0, 0, 1, 1];
        let eval = |cls: &[Tensor]| -> Result<Tensor> {
            let outputs: Vec<ModelOutput> = cls
                .iter()
                .map(|c| ModelOutput {
                    cls: c.reshape(&[3]).unwrap(),
                    part_tokens: c.reshape(&[1, 3]).unwrap(),
                    traces: Vec::new(),
                })
                .collect();
            let batch = TripletBatch::new(&outputs, &labels)?;
            loss_triplet(&batch, 0.3)
        };
        let loss = eval(&cls).unwrap();
        backward_graph(&loss).unwrap();
        for t in &cls {
            let g = t.grad().unwrap_or(vec![0.0; 3]);
            for i in 0..3 {
                let fd = gradcheck::central_difference(t, i, 1e-5, &mut || {
                    eval(&cls)
                        .map_err(|e| TensorError::Store(e.to_string()))?
                        .item()
                })
                .unwrap();
                assert!(gradcheck::relative_error(g[i], fd) < 1e-4, "{} vs {fd}", g[i]);
            }
        }
    }
}
