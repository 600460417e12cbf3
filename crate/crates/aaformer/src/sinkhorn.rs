//! Entropic optimal-transport patch assignment.
//!
//! Given a P×N similarity matrix between part-token queries and patch keys,
//! solve for the transport plan that maximizes total similarity plus an
//! entropy term, subject to uniform marginals (row sums 1/P, column sums
//! 1/N). The solution has the form `Diag(u)·exp(sim/ε)·Diag(v)` and is found
//! by alternating Sinkhorn row/column scaling. The soft plan is then rounded
//! to a hard patch→part assignment. The unconstrained nearest-neighbor and
//! fixed-stripe assignments used by the ablation modes live here too.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("similarity matrix contains a non-finite value")]
    NonFiniteInput,
    #[error("scaling vector underflowed; similarities are too spread out for this epsilon")]
    DegenerateSimilarity,
    #[error("transport: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// How a soft plan becomes a hard assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rounding {
    /// Per-patch argmax over part tokens; ties break toward the lowest index.
    Argmax,
    /// Greedy by descending plan mass with a per-part capacity of ceil(N/P),
    /// so no part token can absorb more than its balanced share.
    Balanced,
}

impl std::str::FromStr for Rounding {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "argmax" => Ok(Rounding::Argmax),
            "balanced" => Ok(Rounding::Balanced),
            other => Err(format!("unknown rounding '{other}' (argmax|balanced)")),
        }
    }
}

/// Which assignment rule the attention layers run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignmentMode {
    /// Sinkhorn-scaled entropic optimal transport, then rounding.
    OptimalTransport,
    /// Each patch goes to its most similar part token; no balance constraint.
    NearestNeighbor,
    /// Fixed horizontal bands of the patch grid, one band per part token.
    FixedStripes,
}

impl std::str::FromStr for AssignmentMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ot" => Ok(AssignmentMode::OptimalTransport),
            "nn" => Ok(AssignmentMode::NearestNeighbor),
            "stripes" => Ok(AssignmentMode::FixedStripes),
            other => Err(format!("unknown assignment mode '{other}' (ot|nn|stripes)")),
        }
    }
}

impl std::fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AssignmentMode::OptimalTransport => "ot",
            AssignmentMode::NearestNeighbor => "nn",
            AssignmentMode::FixedStripes => "stripes",
        };
        f.write_str(s)
    }
}

/// A nonnegative P×N matrix with target row sums 1/P and column sums 1/N.
/// `residual` records how far the marginals still are from their targets
/// (truncated iteration does not reach them exactly).
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub values: Tensor,
    pub row_target: f64,
    pub col_target: f64,
    pub residual: f64,
}

impl TransportPlan {
    pub fn num_parts(&self) -> usize {
        self.values.rows()
    }

    pub fn num_patches(&self) -> usize {
        self.values.cols()
    }

    /// Max deviation of the given plan values from the uniform marginals.
    fn marginal_residual(values: &[f64], p: usize, n: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..p {
            let row: f64 = values[i * n..(i + 1) * n].iter().sum();
            worst = worst.max((row - 1.0 / p as f64).abs());
        }
        for j in 0..n {
            let col: f64 = (0..p).map(|i| values[i * n + j]).sum();
            worst = worst.max((col - 1.0 / n as f64).abs());
        }
        worst
    }
}

/// A hard patch→part mapping inside one granularity set: `part_of[n]` is the
/// part-token index (in `0..num_parts`) owning patch `n`. Every patch has
/// exactly one owner; a part token may own no patches (the nearest-neighbor
/// baseline is allowed to collapse).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMask {
    pub part_of: Vec<usize>,
    pub num_parts: usize,
}

impl AssignmentMask {
    pub fn new(part_of: Vec<usize>, num_parts: usize) -> Result<Self> {
        if let Some(&bad) = part_of.iter().find(|&&p| p >= num_parts) {
            return Err(TransportError::InvalidArgument(format!(
                "part index {bad} out of range for {num_parts} parts"
            )));
        }
        Ok(Self { part_of, num_parts })
    }

    pub fn num_patches(&self) -> usize {
        self.part_of.len()
    }

    /// Patch indices owned by each part token, ascending within each subset.
    pub fn subsets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.num_parts];
        for (n, &p) in self.part_of.iter().enumerate() {
            sets[p].push(n);
        }
        sets
    }

    /// Largest subset size divided by the patch count.
    pub fn max_cluster_fraction(&self) -> f64 {
        let sizes = self.subsets();
        let max = sizes.iter().map(Vec::len).max().unwrap_or(0);
        max as f64 / self.part_of.len().max(1) as f64
    }

    /// Horizontal-band assignment over a `grid_h × grid_w` patch grid: part p
    /// owns the grid rows r with floor(r·P/grid_h) == p, matching stripe-style
    /// fixed partitions.
    pub fn stripes(grid_h: usize, grid_w: usize, num_parts: usize) -> Result<Self> {
        if num_parts == 0 || grid_h == 0 || grid_w == 0 {
            return Err(TransportError::InvalidArgument(
                "stripes need a non-empty grid and at least one part".into(),
            ));
        }
        let mut part_of = Vec::with_capacity(grid_h * grid_w);
        for r in 0..grid_h {
            let band = (r * num_parts / grid_h).min(num_parts - 1);
            part_of.extend(std::iter::repeat(band).take(grid_w));
        }
        Ok(Self { part_of, num_parts })
    }
}

fn sim_matrix(sim: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    if sim.rank() != 2 {
        return Err(TransportError::InvalidArgument(format!(
            "similarity must be rank-2, got shape {:?}",
            sim.shape()
        )));
    }
    let data = sim.to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TransportError::NonFiniteInput);
    }
    Ok((data, sim.rows(), sim.cols()))
}

struct Scaling {
    kernel: Vec<f64>, // exp((sim - max)/epsilon)
    u: Vec<f64>,
    v: Vec<f64>,
    p: usize,
    n: usize,
}

impl Scaling {
    fn new(sim: &Tensor, epsilon: f64) -> Result<Self> {
        let (data, p, n) = sim_matrix(sim)?;
        if epsilon <= 0.0 {
            return Err(TransportError::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if p > n {
            return Err(TransportError::InvalidArgument(format!(
                "need at least as many patches as part tokens, got P={p} > N={n}"
            )));
        }
        // Global max subtraction keeps exp() in range; the constant factor is
        // absorbed by the row scaling, so the plan is shift-invariant.
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let kernel: Vec<f64> = data.iter().map(|&s| ((s - max) / epsilon).exp()).collect();
        Ok(Self {
            kernel,
            u: vec![1.0; p],
            v: vec![1.0; n],
            p,
            n,
        })
    }

    /// One Sinkhorn round: rescale rows to 1/P, then columns to 1/N.
    fn round(&mut self) -> Result<()> {
        let (p, n) = (self.p, self.n);
        for i in 0..p {
            let kv: f64 = self.kernel[i * n..(i + 1) * n]
                .iter()
                .zip(&self.v)
                .map(|(k, v)| k * v)
                .sum();
            self.u[i] = (1.0 / p as f64) / kv;
        }
        check_scaling(&self.u)?;
        for j in 0..n {
            let ktu: f64 = (0..p).map(|i| self.kernel[i * n + j] * self.u[i]).sum();
            self.v[j] = (1.0 / n as f64) / ktu;
        }
        check_scaling(&self.v)?;
        Ok(())
    }

    fn plan_values(&self) -> Vec<f64> {
        let (p, n) = (self.p, self.n);
        let mut values = vec![0.0; p * n];
        for i in 0..p {
            for j in 0..n {
                values[i * n + j] = self.u[i] * self.kernel[i * n + j] * self.v[j];
            }
        }
        values
    }

    fn into_plan(self) -> TransportPlan {
        let values = self.plan_values();
        let residual = TransportPlan::marginal_residual(&values, self.p, self.n);
        TransportPlan {
            values: Tensor::new(&[self.p, self.n], values).expect("plan shape"),
            row_target: 1.0 / self.p as f64,
            col_target: 1.0 / self.n as f64,
            residual,
        }
    }
}

fn check_scaling(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x == 0.0) {
        return Err(TransportError::DegenerateSimilarity);
    }
    Ok(())
}

/// Run a fixed number of Sinkhorn rounds (row scaling first) and return the
/// resulting plan. Three rounds already give a usable assignment; marginals
/// are only met approximately and the gap is recorded in `residual`.
pub fn entropic_transport(sim: &Tensor, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    if iters == 0 {
        return Err(TransportError::InvalidArgument(
            "need at least one scaling round".into(),
        ));
    }
    let mut scaling = Scaling::new(sim, epsilon)?;
    for _ in 0..iters {
        scaling.round()?;
    }
    Ok(scaling.into_plan())
}

/// Iterate until the worst marginal violation drops below `tol` (or the round
/// budget runs out). Serves as the convergence oracle for the truncated form.
pub fn entropic_transport_converged(
    sim: &Tensor,
    epsilon: f64,
    tol: f64,
    max_iters: usize,
) -> Result<TransportPlan> {
    let mut scaling = Scaling::new(sim, epsilon)?;
    for _ in 0..max_iters {
        scaling.round()?;
        let values = scaling.plan_values();
        if TransportPlan::marginal_residual(&values, scaling.p, scaling.n) < tol {
            break;
        }
    }
    Ok(scaling.into_plan())
}

/// Round a soft plan to a hard assignment: each patch goes to the part token
/// with the largest plan entry in its column; ties break toward the lowest
/// part index.
pub fn round_assignment(plan: &TransportPlan) -> AssignmentMask {
    let values = plan.values.data();
    let (p, n) = (plan.num_parts(), plan.num_patches());
    let mut part_of = vec![0usize; n];
    for j in 0..n {
        let mut best = 0;
        let mut best_val = values[j];
        for i in 1..p {
            let v = values[i * n + j];
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        part_of[j] = best;
    }
    AssignmentMask { part_of, num_parts: p }
}

/// Capacity-limited rounding: walk (part, patch) cells by descending plan
/// mass and assign each still-free patch to that part unless the part already
/// holds ceil(N/P) patches. Every patch ends up assigned and no part can
/// exceed its balanced share.
pub fn round_assignment_balanced(plan: &TransportPlan) -> AssignmentMask {
    let values = plan.values.data();
    let (p, n) = (plan.num_parts(), plan.num_patches());
    let cap = n.div_ceil(p);
    let mut cells: Vec<(usize, usize)> = (0..p * n).map(|k| (k / n, k % n)).collect();
    cells.sort_by(|&(pa, na), &(pb, nb)| {
        values[pb * n + nb]
            .total_cmp(&values[pa * n + na])
            .then(pa.cmp(&pb))
            .then(na.cmp(&nb))
    });
    let mut part_of = vec![usize::MAX; n];
    let mut load = vec![0usize; p];
    let mut assigned = 0;
    for (i, j) in cells {
        if assigned == n {
            break;
        }
        if part_of[j] != usize::MAX || load[i] == cap {
            continue;
        }
        part_of[j] = i;
        load[i] += 1;
        assigned += 1;
    }
    debug_assert!(part_of.iter().all(|&p| p != usize::MAX));
    AssignmentMask { part_of, num_parts: p }
}

pub fn round_with(plan: &TransportPlan, rounding: Rounding) -> AssignmentMask {
    match rounding {
        Rounding::Argmax => round_assignment(plan),
        Rounding::Balanced => round_assignment_balanced(plan),
    }
}

/// Unconstrained baseline: each patch goes to its most similar part token.
/// Nothing stops every patch from landing on the same part, which is exactly
/// the collapse the transport constraints exist to prevent.
pub fn nearest_neighbor_assignment(sim: &Tensor) -> Result<AssignmentMask> {
    let (data, p, n) = sim_matrix(sim)?;
    let mut part_of = vec![0usize; n];
    for j in 0..n {
        let mut best = 0;
        let mut best_val = data[j];
        for i in 1..p {
            let v = data[i * n + j];
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        part_of[j] = best;
    }
    Ok(AssignmentMask { part_of, num_parts: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_sim(rng: &mut ChaCha8Rng, p: usize, n: usize) -> Tensor {
        let data: Vec<f64> = (0..p * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(&[p, n], data).unwrap()
    }

    #[test]
    fn uniform_similarity_gives_exact_uniform_plan() {
        let sim = Tensor::zeros(&[2, 4]);
        let plan = entropic_transport(&sim, 0.05, 3).unwrap();
        for &v in plan.values.data().iter() {
            assert_eq!(v, 0.125);
        }
        let d = plan.values.data();
        for i in 0..2 {
            let row: f64 = d[i * 4..(i + 1) * 4].iter().sum();
            assert_eq!(row, 0.5);
        }
        for j in 0..4 {
            let col: f64 = (0..2).map(|i| d[i * 4 + j]).sum();
            assert_eq!(col, 0.25);
        }
    }

    #[test]
    fn strong_diagonal_converges_to_half_identity() {
        let sim = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let plan = entropic_transport_converged(&sim, 0.05, 1e-12, 5000).unwrap();
        assert!(plan.residual < 1e-12);
        let d = plan.values.data();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!(d[1] < 1e-12);
        assert!(d[2] < 1e-12);
        assert!((d[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn long_iteration_meets_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = random_sim(&mut rng, 3, 8);
        let plan = entropic_transport(&sim, 0.05, 1000).unwrap();
        assert!(plan.residual < 1e-9, "residual {}", plan.residual);
    }

    #[test]
    fn truncated_iteration_records_nonzero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sim = random_sim(&mut rng, 3, 8);
        let plan = entropic_transport(&sim, 0.05, 3).unwrap();
        assert!(plan.residual > 0.0);
        let converged = entropic_transport_converged(&sim, 0.05, 1e-12, 5000).unwrap();
        assert!(converged.residual < 1e-12);
    }

    #[test]
    fn plan_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sim = random_sim(&mut rng, 3, 8);
        let shifted =
            Tensor::new(&[3, 8], sim.data().iter().map(|v| v + 123.456).collect()).unwrap();
        let a = entropic_transport(&sim, 0.05, 3).unwrap();
        let b = entropic_transport(&shifted, 0.05, 3).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_epsilon_approaches_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sim = random_sim(&mut rng, 3, 8);
        let plan = entropic_transport_converged(&sim, 1e6, 1e-13, 5000).unwrap();
        let uniform = 1.0 / 24.0;
        for &v in plan.values.data().iter() {
            assert!((v - uniform).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let sim = Tensor::new(&[2, 4], vec![f64::NAN; 8]).unwrap();
        assert!(matches!(
            entropic_transport(&sim, 0.05, 3),
            Err(TransportError::NonFiniteInput)
        ));
        let sim = Tensor::zeros(&[2, 4]);
        assert!(entropic_transport(&sim, 0.0, 3).is_err());
        assert!(entropic_transport(&sim, 0.05, 0).is_err());
        let tall = Tensor::zeros(&[4, 2]);
        assert!(entropic_transport(&tall, 0.05, 3).is_err());
    }

    #[test]
    fn extreme_spread_is_a_degenerate_error() {
        // One row sits 1e7 below the rest; its kernel row underflows to zero
        // and the row scaling blows up.
        let sim = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![-1e7, -1e7, -1e7]]).unwrap();
        assert!(matches!(
            entropic_transport(&sim, 0.05, 3),
            Err(TransportError::DegenerateSimilarity)
        ));
    }

    #[test]
    fn rounding_takes_column_argmax_with_low_tie() {
        let plan = TransportPlan {
            values: Tensor::from_rows(&[vec![0.3, 0.1, 0.2], vec![0.1, 0.3, 0.2]]).unwrap(),
            row_target: 0.5,
            col_target: 1.0 / 3.0,
            residual: 0.0,
        };
        let mask = round_assignment(&plan);
        assert_eq!(mask.part_of, vec![0, 1, 0]);
    }

    #[test]
    fn rounding_diagonal_example() {
        let sim = Tensor::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let plan = entropic_transport_converged(&sim, 0.05, 1e-12, 5000).unwrap();
        assert_eq!(round_assignment(&plan).part_of, vec![0, 1]);
    }

    #[test]
    fn nearest_neighbor_may_collapse() {
        let sim = Tensor::from_rows(&[vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let mask = nearest_neighbor_assignment(&sim).unwrap();
        assert_eq!(mask.part_of, vec![0, 0, 0]);
        assert_eq!(mask.max_cluster_fraction(), 1.0);

        let sim = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mask = nearest_neighbor_assignment(&sim).unwrap();
        assert_eq!(mask.part_of, vec![0, 1]);
    }

    #[test]
    fn ot_rounding_is_balanced_where_nn_need_not_be() {
        let mut covered_every_part = true;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = random_sim(&mut rng, 3, 12);
            let plan = entropic_transport_converged(&sim, 0.05, 1e-10, 5000).unwrap();
            let ot = round_assignment(&plan);
            let _nn = nearest_neighbor_assignment(&sim).unwrap();
            let balanced = round_assignment_balanced(&plan);
            // Balanced rounding respects the ceil(N/P) capacity.
            let sizes: Vec<usize> = balanced.subsets().iter().map(Vec::len).collect();
            assert!(sizes.iter().all(|&s| s <= 4), "sizes {sizes:?}");
            assert_eq!(sizes.iter().sum::<usize>(), 12);
            if ot.subsets().iter().any(Vec::is_empty) {
                covered_every_part = false;
            }
        }
        assert!(
            covered_every_part,
            "argmax rounding of a converged balanced plan left a part empty"
        );
    }

    #[test]
    fn stripes_partition_the_grid_by_bands() {
        let mask = AssignmentMask::stripes(4, 3, 2).unwrap();
        assert_eq!(mask.part_of, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let mask = AssignmentMask::stripes(4, 2, 3).unwrap();
        assert_eq!(mask.part_of, vec![0, 0, 0, 0, 1, 1, 2, 2]);
    }

    proptest::proptest! {
        #[test]
        fn converged_marginals_hold_for_random_sims(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = random_sim(&mut rng, 3, 8);
            let plan = entropic_transport_converged(&sim, 0.05, 1e-10, 5000).unwrap();
            proptest::prop_assert!(plan.residual < 1e-9);
        }

        #[test]
        fn rounding_always_partitions(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = random_sim(&mut rng, 5, 24);
            let plan = entropic_transport(&sim, 0.05, 3).unwrap();
            for mask in [round_assignment(&plan), round_assignment_balanced(&plan)] {
                proptest::prop_assert_eq!(mask.num_patches(), 24);
                let total: usize = mask.subsets().iter().map(Vec::len).sum();
                proptest::prop_assert_eq!(total, 24);
            }
        }
    }
}
