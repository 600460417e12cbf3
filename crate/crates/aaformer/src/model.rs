//! Full model assembly: configuration, token layout, patch embedding,
//! the layer stack, and feature extraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    transformer_layer, AttentionProjections, LayerMode, LayerParams, LayerTrace,
};
use crate::sinkhorn::{AssignmentMode, Rounding, TransportError};
use crate::tensor::{concat_rows, ParameterStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Every architectural hyperparameter. Geometry must tile exactly:
/// `(image_h - patch_size)` and `(image_w - patch_size)` divisible by
/// `stride`. A stride of `patch_size - 4` gives four pixels of overlap
/// between adjacent patches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Part-token group sizes; each group independently partitions the
    /// patches. Total part tokens P = sum of the entries.
    pub granularity: Vec<usize>,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub mlp_ratio: usize,
    pub label_smoothing: f64,
    pub triplet_margin: f64,
    pub ln_eps: f64,
    pub rounding: Rounding,
    /// Give part tokens their own position embeddings (off by default: they
    /// are spatial-agnostic prototypes).
    pub part_token_pos_embed: bool,
}

impl ModelConfig {
    /// The full-scale configuration: 384x256 inputs, 16x16 patches, 12 layers
    /// of width 768 with 12 heads, granularity {2,3}, epsilon 0.05 with 3
    /// scaling rounds, margin 0.3, smoothing 0.1.
    pub fn paper_defaults() -> Self {
        Self {
            image_h: 384,
            image_w: 256,
            channels: 3,
            patch_size: 16,
            stride: 16,
            embed_dim: 768,
            heads: 12,
            layers: 12,
            granularity: vec![2, 3],
            epsilon: 0.05,
            sinkhorn_iters: 3,
            mlp_ratio: 4,
            label_smoothing: 0.1,
            triplet_margin: 0.3,
            ln_eps: 1e-6,
            rounding: Rounding::Argmax,
            part_token_pos_embed: false,
        }
    }

    pub fn grid_h(&self) -> usize {
        (self.image_h - self.patch_size) / self.stride + 1
    }

    pub fn grid_w(&self) -> usize {
        (self.image_w - self.patch_size) / self.stride + 1
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn num_parts(&self) -> usize {
        self.granularity.iter().sum()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            granularity: self.granularity.clone(),
            num_patches: self.num_patches(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.patch_size == 0 || self.stride == 0 {
            return fail("patch_size and stride must be positive".into());
        }
        if self.stride > self.patch_size {
            return fail(format!(
                "stride {} exceeds patch size {} (gaps between patches)",
                self.stride, self.patch_size
            ));
        }
        if self.image_h < self.patch_size || self.image_w < self.patch_size {
            return fail(format!(
                "image {}x{} smaller than patch size {}",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if (self.image_h - self.patch_size) % self.stride != 0
            || (self.image_w - self.patch_size) % self.stride != 0
        {
            return fail(format!(
                "geometry {}x{} does not tile with patch {} stride {}",
                self.image_h, self.image_w, self.patch_size, self.stride
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.granularity.is_empty() || self.granularity.iter().any(|&g| g == 0) {
            return fail("granularity sets must be non-empty positive sizes".into());
        }
        if self.num_parts() == 0 {
            return fail("need at least one part token".into());
        }
        let n = self.num_patches();
        if let Some(&g) = self.granularity.iter().find(|&&g| g > n) {
            return fail(format!("granularity set of size {g} exceeds {n} patches"));
        }
        if self.epsilon <= 0.0 {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.sinkhorn_iters == 0 {
            return fail("sinkhorn_iters must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            ));
        }
        if self.triplet_margin < 0.0 {
            return fail(format!(
                "triplet_margin must be non-negative, got {}",
                self.triplet_margin
            ));
        }
        if self.layers == 0 {
            return fail("need at least one layer".into());
        }
        Ok(())
    }
}

/// Index map for the token sequence: position 0 is CLS, positions
/// `1..=P` are the part tokens grouped by granularity set in declaration
/// order, and the final N positions are the patches in row-major spatial
/// order. Total length `1 + P + N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub granularity: Vec<usize>,
    pub num_patches: usize,
}

impl TokenLayout {
    pub fn num_parts(&self) -> usize {
        self.granularity.iter().sum()
    }

    pub fn len(&self) -> usize {
        1 + self.num_parts() + self.num_patches
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls_index(&self) -> usize {
        0
    }

    /// Sequence index of part token `k` within granularity set `s`.
    pub fn part_index(&self, set: usize, k: usize) -> usize {
        let offset: usize = self.granularity[..set].iter().sum();
        1 + offset + k
    }

    /// Sequence indices of all part tokens in set `s`.
    pub fn part_set_indices(&self, set: usize) -> Vec<usize> {
        (0..self.granularity[set]).map(|k| self.part_index(set, k)).collect()
    }

    /// Sequence indices of all part tokens, across sets.
    pub fn part_indices(&self) -> Vec<usize> {
        (1..=self.num_parts()).collect()
    }

    pub fn patch_start(&self) -> usize {
        1 + self.num_parts()
    }

    pub fn patch_index(&self, n: usize) -> usize {
        self.patch_start() + n
    }

    pub fn patch_indices(&self) -> Vec<usize> {
        (self.patch_start()..self.len()).collect()
    }
}

/// Cut an `[H×W×C]` image into flattened patches, row-major over the patch
/// grid; values inside a patch are ordered (row, column, channel). With
/// stride = patch size this is a plain non-overlapping tiling of
/// `(H·W)/patch_size²` patches; smaller strides give overlapping windows.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let expect = [cfg.image_h, cfg.image_w, cfg.channels];
    if image.shape() != expect {
        return Err(ModelError::Config(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            expect
        )));
    }
    let (h, w, c, ps, stride) = (cfg.image_h, cfg.image_w, cfg.channels, cfg.patch_size, cfg.stride);
    let src = image.data();
    let n = cfg.num_patches();
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(n * pd);
    for gr in 0..cfg.grid_h() {
        for gc in 0..cfg.grid_w() {
            let (r0, c0) = (gr * stride, gc * stride);
            for pr in 0..ps {
                for pc in 0..ps {
                    let base = ((r0 + pr) * w + (c0 + pc)) * c;
                    out.extend_from_slice(&src[base..base + c]);
                }
            }
        }
    }
    debug_assert_eq!(out.len(), n * pd);
    debug_assert_eq!(n * ps * ps, cfg.grid_h() * cfg.grid_w() * ps * ps);
    let _ = h;
    drop(src);
    Ok(Tensor::new(&[n, pd], out)?)
}

/// Structured view over the parameter store.
pub struct ModelParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub cls_token: Tensor,
    pub part_tokens: Tensor,
    pub pos_cls: Tensor,
    pub pos_patch: Tensor,
    pub pos_part: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

fn layer_prefix(i: usize) -> String {
    format!("layer{i:02}")
}

/// Truncated normal draw: resample anything beyond two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, count: usize, std: f64) -> Vec<f64> {
    (0..count)
        .map(|_| loop {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let x = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

/// Create and register all backbone parameters: trainable patch projection,
/// CLS and part tokens, position embeddings for CLS+patches (plus part
/// tokens when configured), per-layer attention/LN/MLP weights, and the
/// final LN. Tokens and projections draw from a truncated normal (std 0.02);
/// biases and LN betas start at zero, LN gammas at one.
pub fn init_parameters(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let d = cfg.embed_dim;
    let std = 0.02;
    let mut param = |store: &mut ParameterStore,
                     name: String,
                     shape: &[usize],
                     data: Vec<f64>|
     -> Result<()> {
        store.insert(name, Tensor::parameter(shape, data)?)?;
        Ok(())
    };

    let pd = cfg.patch_dim();
    param(&mut store, "embed.weight".into(), &[pd, d], trunc_normal(rng, pd * d, std))?;
    param(&mut store, "embed.bias".into(), &[d], vec![0.0; d])?;
    param(&mut store, "token.cls".into(), &[1, d], trunc_normal(rng, d, std))?;
    let p = cfg.num_parts();
    param(&mut store, "token.part".into(), &[p, d], trunc_normal(rng, p * d, std))?;
    param(&mut store, "pos.cls".into(), &[1, d], trunc_normal(rng, d, std))?;
    let n = cfg.num_patches();
    param(&mut store, "pos.patch".into(), &[n, d], trunc_normal(rng, n * d, std))?;
    if cfg.part_token_pos_embed {
        param(&mut store, "pos.part".into(), &[p, d], trunc_normal(rng, p * d, std))?;
    }
    for i in 0..cfg.layers {
        let pre = layer_prefix(i);
        param(&mut store, format!("{pre}.ln1.gamma"), &[d], vec![1.0; d])?;
        param(&mut store, format!("{pre}.ln1.beta"), &[d], vec![0.0; d])?;
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            param(&mut store, format!("{pre}.attn.{w}"), &[d, d], trunc_normal(rng, d * d, std))?;
        }
        param(&mut store, format!("{pre}.ln2.gamma"), &[d], vec![1.0; d])?;
        param(&mut store, format!("{pre}.ln2.beta"), &[d], vec![0.0; d])?;
        let hidden = cfg.mlp_ratio * d;
        param(&mut store, format!("{pre}.mlp.w1"), &[d, hidden], trunc_normal(rng, d * hidden, std))?;
        param(&mut store, format!("{pre}.mlp.b1"), &[hidden], vec![0.0; hidden])?;
        param(&mut store, format!("{pre}.mlp.w2"), &[hidden, d], trunc_normal(rng, hidden * d, std))?;
        param(&mut store, format!("{pre}.mlp.b2"), &[d], vec![0.0; d])?;
    }
    param(&mut store, "final_ln.gamma".into(), &[d], vec![1.0; d])?;
    param(&mut store, "final_ln.beta".into(), &[d], vec![0.0; d])?;
    Ok(store)
}

impl ModelParams {
    pub fn from_store(store: &ParameterStore, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| {
                let pre = layer_prefix(i);
                Ok(LayerParams {
                    ln1_gamma: store.get(&format!("{pre}.ln1.gamma"))?,
                    ln1_beta: store.get(&format!("{pre}.ln1.beta"))?,
                    attn: AttentionProjections {
                        w_q: store.get(&format!("{pre}.attn.w_q"))?,
                        w_k: store.get(&format!("{pre}.attn.w_k"))?,
                        w_v: store.get(&format!("{pre}.attn.w_v"))?,
                        w_o: store.get(&format!("{pre}.attn.w_o"))?,
                        heads: cfg.heads,
                    },
                    ln2_gamma: store.get(&format!("{pre}.ln2.gamma"))?,
                    ln2_beta: store.get(&format!("{pre}.ln2.beta"))?,
                    mlp_w1: store.get(&format!("{pre}.mlp.w1"))?,
                    mlp_b1: store.get(&format!("{pre}.mlp.b1"))?,
                    mlp_w2: store.get(&format!("{pre}.mlp.w2"))?,
                    mlp_b2: store.get(&format!("{pre}.mlp.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed_w: store.get("embed.weight")?,
            embed_b: store.get("embed.bias")?,
            cls_token: store.get("token.cls")?,
            part_tokens: store.get("token.part")?,
            pos_cls: store.get("pos.cls")?,
            pos_patch: store.get("pos.patch")?,
            pos_part: if cfg.part_token_pos_embed {
                Some(store.get("pos.part")?)
            } else {
                None
            },
            layers,
            final_gamma: store.get("final_ln.gamma")?,
            final_beta: store.get("final_ln.beta")?,
        })
    }
}

/// Per-image model output: the CLS feature `[D]`, the part-token features
/// `[P×D]` in layout order, and the per-layer alignment traces.
pub struct ModelOutput {
    pub cls: Tensor,
    pub part_tokens: Tensor,
    pub traces: Vec<LayerTrace>,
}

/// Run the full stack on one image: patch embedding, CLS + part tokens,
/// position embeddings on CLS and patches, the auto-aligned layers, final
/// LN, then read the CLS and part rows.
pub fn forward_one(
    image: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AssignmentMode,
) -> Result<ModelOutput> {
    let layout = cfg.layout();
    let patches = patchify(image, cfg)?;
    let embedded = patches.matmul(&params.embed_w)?.add_rowwise(&params.embed_b)?;
    let z = concat_rows(&[params.cls_token.clone(), params.part_tokens.clone(), embedded])?;
    let pos_part = match &params.pos_part {
        Some(p) => p.clone(),
        None => Tensor::zeros(&[layout.num_parts(), cfg.embed_dim]),
    };
    let pos = concat_rows(&[params.pos_cls.clone(), pos_part, params.pos_patch.clone()])?;
    let mut z = z.add(&pos)?;
    let mut traces = Vec::with_capacity(cfg.layers);
    for layer in &params.layers {
        let (next, trace) = transformer_layer(&z, layer, &layout, cfg, LayerMode::Maa(mode))?;
        z = next;
        traces.push(trace.expect("MAA layers always trace"));
    }
    let z = z.layer_norm(&params.final_gamma, &params.final_beta, cfg.ln_eps)?;
    let cls = z.select_rows(&[0])?.reshape(&[cfg.embed_dim])?;
    let part_tokens = z.select_rows(&layout.part_indices())?;
    Ok(ModelOutput { cls, part_tokens, traces })
}

/// Forward a batch of images; each image gets its own output and traces.
pub fn forward(
    images: &[Tensor],
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AssignmentMode,
) -> Result<Vec<ModelOutput>> {
    images.iter().map(|im| forward_one(im, params, cfg, mode)).collect()
}

/// Concatenate CLS and all part tokens into one `[(P+1)·D]` descriptor.
pub fn extract_descriptor(out: &ModelOutput) -> Result<Tensor> {
    let d = out.cls.numel();
    let p = out.part_tokens.rows();
    let cls_row = out.cls.reshape(&[1, d])?;
    let stacked = concat_rows(&[cls_row, out.part_tokens.clone()])?;
    Ok(stacked.reshape(&[(p + 1) * d])?)
}
