//! Multi-head self-attention, the auto-aligned variant for part tokens, and
//! the pre-norm residual transformer layer.
//!
//! In an auto-aligned layer the CLS token and the patches attend over the
//! full sequence as usual. Each part token instead attends only to the patch
//! subset assigned to it: per head and per granularity set, the raw
//! part-query x patch-key similarities feed the transport solver (or one of
//! the ablation assignment rules), the soft plan is rounded to a hard
//! partition, and the part token's output row becomes a softmax combination
//! of the owned patches' values. Assignments are constants in the autodiff
//! graph; gradients flow through the attention weights and values only.

use crate::model::{ModelConfig, ModelError, TokenLayout};
use crate::sinkhorn::{
    entropic_transport, nearest_neighbor_assignment, round_with, AssignmentMask, AssignmentMode,
    TransportPlan,
};
use crate::tensor::{concat_cols, concat_rows, Tensor};

type Result<T> = std::result::Result<T, ModelError>;

/// Query/key/value/output projection weights for one attention block.
/// All are `[D×D]`; heads are column slices of width `D/heads`.
#[derive(Clone)]
pub struct AttentionProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionProjections {
    pub fn embed_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.heads
    }

    fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.shape() != [d, d] {
                return Err(ModelError::Config(format!(
                    "attention projection {name} must be [{d}x{d}], got {:?}",
                    w.shape()
                )));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "embed dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Parameters of one transformer layer: pre-norm LNs, attention projections,
/// and the two-linear GELU MLP.
#[derive(Clone)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionProjections,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Whether a layer runs plain self-attention or auto-alignment for the part
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    Msa,
    Maa(AssignmentMode),
}

/// A part token ended up with no patches after rounding; it stole the listed
/// patch from the donor part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    pub part: usize,
    pub patch: usize,
    pub donor: usize,
}

/// What one (head, granularity set) alignment did: raw similarities, the
/// transport plan (when the mode produces one), the effective mask after
/// empty-part repair, and each part token's attention weights over patches
/// (zero outside its subset).
pub struct HeadSetTrace {
    pub head: usize,
    pub set_index: usize,
    pub sim: Tensor,
    pub plan: Option<TransportPlan>,
    pub mask: AssignmentMask,
    pub part_attention: Vec<Vec<f64>>,
    pub repairs: Vec<Repair>,
}

/// Traces for every (head, set) pair of one layer, ordered by head then set.
pub struct LayerTrace {
    pub entries: Vec<HeadSetTrace>,
}

impl LayerTrace {
    /// Entries belonging to one head, ordered by set index.
    pub fn head_entries(&self, head: usize) -> Vec<&HeadSetTrace> {
        self.entries.iter().filter(|e| e.head == head).collect()
    }

    pub fn repair_count(&self) -> usize {
        self.entries.iter().map(|e| e.repairs.len()).sum()
    }
}

/// Standard multi-head self-attention over the full sequence:
/// per head `softmax(Q·Kᵀ/√d)·V`, heads concatenated, then output-projected.
pub fn multi_head_self_attention(z: &Tensor, proj: &AttentionProjections) -> Result<Tensor> {
    proj.validate()?;
    let q = z.matmul(&proj.w_q)?;
    let k = z.matmul(&proj.w_k)?;
    let v = z.matmul(&proj.w_v)?;
    let hd = proj.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(proj.heads);
    for h in 0..proj.heads {
        let qh = q.slice_cols(h * hd, hd)?;
        let kh = k.slice_cols(h * hd, hd)?;
        let vh = v.slice_cols(h * hd, hd)?;
        let att = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax_rows()?;
        heads.push(att.matmul(&vh)?);
    }
    Ok(concat_cols(&heads)?.matmul(&proj.w_o)?)
}

/// Attention of part-token queries restricted to per-part patch subsets.
/// `phi[p]` lists the patch rows (into `k_patch`/`v_patch`) that part `p`
/// attends to; every subset must be non-empty. Returns the pre-projection
/// output rows `[P×d]` plus, for each part, its attention weights scattered
/// over the full patch axis (zeros outside the subset).
pub fn masked_part_attention(
    q_parts: &Tensor,
    k_patch: &Tensor,
    v_patch: &Tensor,
    phi: &[Vec<usize>],
    scale: f64,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let num_patches = k_patch.rows();
    if phi.len() != q_parts.rows() {
        return Err(ModelError::Config(format!(
            "{} subsets for {} part queries",
            phi.len(),
            q_parts.rows()
        )));
    }
    let mut rows = Vec::with_capacity(phi.len());
    let mut weights_full = Vec::with_capacity(phi.len());
    for (p, subset) in phi.iter().enumerate() {
        if subset.is_empty() {
            return Err(ModelError::Config(format!("part {p} has an empty patch subset")));
        }
        let qp = q_parts.select_rows(&[p])?;
        let k_sel = k_patch.select_rows(subset)?;
        let v_sel = v_patch.select_rows(subset)?;
        let att = qp.matmul(&k_sel.transpose()?)?.scale(scale)?.softmax_rows()?;
        rows.push(att.matmul(&v_sel)?);
        let mut full = vec![0.0; num_patches];
        for (w, &n) in att.data().iter().zip(subset) {
            full[n] = *w;
        }
        weights_full.push(full);
    }
    Ok((concat_rows(&rows)?, weights_full))
}

/// Give every empty part one patch: the highest-mass patch (per `mass`,
/// row-major P×N) among those whose current owner keeps at least one other
/// patch. Mutates the mask in place and reports what moved.
fn repair_empty_parts(mask: &mut AssignmentMask, mass: &[f64]) -> Result<Vec<Repair>> {
    let n = mask.num_patches();
    let g = mask.num_parts;
    let mut sizes = vec![0usize; g];
    for &p in &mask.part_of {
        sizes[p] += 1;
    }
    let mut repairs = Vec::new();
    for p in 0..g {
        if sizes[p] > 0 {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if sizes[mask.part_of[j]] < 2 {
                continue;
            }
            match best {
                Some(b) if mass[p * n + j] <= mass[p * n + b] => {}
                _ => best = Some(j),
            }
        }
        let Some(j) = best else {
            return Err(ModelError::Config(format!(
                "cannot repair empty part {p}: no donor patch available"
            )));
        };
        let donor = mask.part_of[j];
        mask.part_of[j] = p;
        sizes[donor] -= 1;
        sizes[p] += 1;
        repairs.push(Repair { part: p, patch: j, donor });
    }
    Ok(repairs)
}

fn compute_assignment(
    mode: AssignmentMode,
    sim: &Tensor,
    cfg: &ModelConfig,
    set_size: usize,
) -> Result<(AssignmentMask, Option<TransportPlan>)> {
    match mode {
        AssignmentMode::OptimalTransport => {
            let plan = entropic_transport(sim, cfg.epsilon, cfg.sinkhorn_iters)?;
            let mask = round_with(&plan, cfg.rounding);
            Ok((mask, Some(plan)))
        }
        AssignmentMode::NearestNeighbor => Ok((nearest_neighbor_assignment(sim)?, None)),
        AssignmentMode::FixedStripes => Ok((
            AssignmentMask::stripes(cfg.grid_h(), cfg.grid_w(), set_size)?,
            None,
        )),
    }
}

/// One auto-aligned attention block. CLS and patch rows run full-sequence
/// attention; each granularity set's part tokens are aligned to patch subsets
/// and attend only there. Output is `[L×D]` after the output projection.
pub fn auto_aligned_attention(
    z: &Tensor,
    proj: &AttentionProjections,
    layout: &TokenLayout,
    cfg: &ModelConfig,
    mode: AssignmentMode,
) -> Result<(Tensor, LayerTrace)> {
    proj.validate()?;
    if z.rows() != layout.len() {
        return Err(ModelError::Config(format!(
            "sequence length {} does not match layout length {}",
            z.rows(),
            layout.len()
        )));
    }
    let q = z.matmul(&proj.w_q)?;
    let k = z.matmul(&proj.w_k)?;
    let v = z.matmul(&proj.w_v)?;
    let hd = proj.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let patch_idx = layout.patch_indices();
    // Sequence rows handled by plain attention: CLS first, then all patches.
    let mut plain_idx = vec![layout.cls_index()];
    plain_idx.extend_from_slice(&patch_idx);

    let mut head_outputs = Vec::with_capacity(proj.heads);
    let mut entries = Vec::new();
    for h in 0..proj.heads {
        let qh = q.slice_cols(h * hd, hd)?;
        let kh = k.slice_cols(h * hd, hd)?;
        let vh = v.slice_cols(h * hd, hd)?;

        let q_plain = qh.select_rows(&plain_idx)?;
        let att = q_plain
            .matmul(&kh.transpose()?)?
            .scale(scale)?
            .softmax_rows()?;
        let plain_rows = att.matmul(&vh)?; // row 0 = CLS, rows 1.. = patches

        let k_patch = kh.select_rows(&patch_idx)?;
        let v_patch = vh.select_rows(&patch_idx)?;

        let mut part_blocks = Vec::with_capacity(layout.granularity.len());
        for (s, &g) in layout.granularity.iter().enumerate() {
            let q_set = qh.select_rows(&layout.part_set_indices(s))?;
            // Raw inner products; epsilon absorbs the scale inside the solver.
            let sim = q_set.matmul(&k_patch.transpose()?)?.detach();
            let (mut mask, plan) = compute_assignment(mode, &sim, cfg, g)?;
            let mass = match &plan {
                Some(plan) => plan.values.to_vec(),
                None => sim.to_vec(),
            };
            let repairs = repair_empty_parts(&mut mask, &mass)?;
            let (rows, part_attention) =
                masked_part_attention(&q_set, &k_patch, &v_patch, &mask.subsets(), scale)?;
            part_blocks.push(rows);
            entries.push(HeadSetTrace {
                head: h,
                set_index: s,
                sim,
                plan,
                mask,
                part_attention,
                repairs,
            });
        }

        let cls_row = plain_rows.select_rows(&[0])?;
        let patch_rows = plain_rows.select_rows(&(1..=layout.num_patches).collect::<Vec<_>>())?;
        let mut seq = vec![cls_row];
        seq.extend(part_blocks);
        seq.push(patch_rows);
        head_outputs.push(concat_rows(&seq)?);
    }
    let out = concat_cols(&head_outputs)?.matmul(&proj.w_o)?;
    Ok((out, LayerTrace { entries }))
}

/// Pre-norm residual layer: `z + Attn(LN(z))`, then `+ MLP(LN(·))` where the
/// MLP expands D to `mlp_ratio·D` with a GELU in between.
pub fn transformer_layer(
    z: &Tensor,
    params: &LayerParams,
    layout: &TokenLayout,
    cfg: &ModelConfig,
    mode: LayerMode,
) -> Result<(Tensor, Option<LayerTrace>)> {
    let normed = z.layer_norm(&params.ln1_gamma, &params.ln1_beta, cfg.ln_eps)?;
    let (att, trace) = match mode {
        LayerMode::Msa => (multi_head_self_attention(&normed, &params.attn)?, None),
        LayerMode::Maa(assign) => {
            let (att, trace) = auto_aligned_attention(&normed, &params.attn, layout, cfg, assign)?;
            (att, Some(trace))
        }
    };
    let z = z.add(&att)?;
    let normed = z.layer_norm(&params.ln2_gamma, &params.ln2_beta, cfg.ln_eps)?;
    let hidden = normed.matmul(&params.mlp_w1)?.add_rowwise(&params.mlp_b1)?.gelu()?;
    let mlp = hidden.matmul(&params.mlp_w2)?.add_rowwise(&params.mlp_b2)?;
    Ok((z.add(&mlp)?, trace))
}
