//! Consistency objectives between original and style-hallucinated RoIs.
//!
//! * Gated InfoNCE over paired embeddings (the same kernel serves the
//!   horizontal-RoI and rotated-RoI terms).
//! * Jensen–Shannon style consistency between category distributions, plus
//!   the L2 and KL variants used for the distance-metric ablation.
//! * Projection heads f1–f4 and category heads g1/g2, tagged by the branch and
//!   RoI stage they are allowed to consume.
//!
//! Embeddings are stored row-wise: a batch of `2n` embeddings is a `(2n, d)`
//! matrix whose rows `j` and `j + n` form a positive pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::detector::backbone::Branch;
use crate::detector::layers::{init_mlp2, mlp2};
use crate::detector::pooling::{PooledRois, RoiStage};
use crate::error::{Error, Result};

/// Floor applied inside every logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Distance between category distributions used by the style-consistency
/// term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecMetric {
    L2,
    Kl,
    #[default]
    Jsd,
}

impl FromStr for SecMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(SecMetric::L2),
            "kl" => Ok(SecMetric::Kl),
            "jsd" => Ok(SecMetric::Jsd),
            other => Err(Error::invalid(format!("unknown distance metric {other:?} (expected l2, kl or jsd)"))),
        }
    }
}

impl fmt::Display for SecMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecMetric::L2 => "l2",
            SecMetric::Kl => "kl",
            SecMetric::Jsd => "jsd",
        })
    }
}

/// Value-level batch of paired embeddings with their gates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    /// `(2n, d)`, unit-norm rows.
    pub z: Tensor,
    /// Length `2n`; `gates[j] == gates[j + n]`.
    pub gates: Vec<bool>,
}

impl EmbeddingBatch {
    pub fn new(z: Tensor, gates: Vec<bool>) -> Result<Self> {
        let s = z.shape();
        if s.len() != 2 || s[0] % 2 != 0 || s[0] < 2 || s[0] != gates.len() {
            return Err(Error::invalid(format!(
                "embedding batch needs (2n, d) rows matching {} gates, got {s:?}",
                gates.len()
            )));
        }
        let n = s[0] / 2;
        if (0..n).any(|j| gates[j] != gates[j + n]) {
            return Err(Error::invalid("gates of paired columns differ"));
        }
        for row in z.data().chunks(s[1]) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("embedding row has norm {norm}, expected 1")));
            }
        }
        Ok(EmbeddingBatch { z, gates })
    }

    /// Builds a batch from raw rows, normalizing each row first.
    pub fn from_raw(raw: &Tensor, gates_first_half: &[bool]) -> Result<Self> {
        let mut g = Graph::new();
        let x = g.constant(raw.clone())?;
        let z = g.l2_normalize_rows(x)?;
        let gates = paired_gates(gates_first_half);
        Self::new(g.value(z).clone(), gates)
    }

    pub fn pairs(&self) -> usize {
        self.gates.len() / 2
    }

    /// Value of the gated InfoNCE loss.
    pub fn info_nce(&self, tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let z = g.constant(self.z.clone())?;
        let l = info_nce_gated(&mut g, z, &self.gates, tau)?;
        Ok(g.item(l))
    }
}

/// Duplicates first-branch gates onto the paired second-branch rows.
pub fn paired_gates(first_half: &[bool]) -> Vec<bool> {
    first_half.iter().chain(first_half).copied().collect()
}

/// Gated InfoNCE over the rows of `z` (`(2n, d)`):
///
/// `L = -Σ_j gate_j · log( exp(z_j·z_{j+}/τ) / Σ_{k≠j} exp(z_j·z_k/τ) )`
///
/// where `j+` is `j ± n`. The denominator runs over every other row,
/// including the positive.
pub fn info_nce_gated(g: &mut Graph, z: Var, gates: &[bool], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] != gates.len() || s[0] % 2 != 0 || s[0] < 2 {
        return Err(Error::invalid(format!(
            "info_nce_gated: need (2n, d) embeddings matching {} gates, got {s:?}",
            gates.len()
        )));
    }
    let m = s[0];
    let n = m / 2;
    let picked: Vec<usize> = (0..m)
        .filter(|&j| gates[j])
        .map(|j| j * m + (j + n) % m)
        .collect();
    if picked.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    // exp(-1e30) underflows to exactly 0, which removes the self term
    let mut mask = Tensor::zeros(&[m, m]);
    for j in 0..m {
        mask.data_mut()[j * m + j] = -1e30;
    }
    let mask = g.constant(mask)?;
    let masked = g.add(logits, mask)?;
    let logp = g.log_softmax(masked)?;
    let pos = g.gather(logp, &picked)?;
    let total = g.sum(pos)?;
    g.scale(total, -1.0)
}

fn check_same(g: &Graph, p: Var, q: Var) -> Result<usize> {
    let (sp, sq) = (g.shape(p), g.shape(q));
    if sp != sq || sp.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "category distributions",
            left: sp.to_vec(),
            right: sq.to_vec(),
        });
    }
    Ok(sp[0])
}

/// Row-summed `KL[p || q]` with floored logs, as an `(n,)` vector.
fn kl_rows(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let lp = g.log_floor(p, PROB_FLOOR)?;
    let lq = g.log_floor(q, PROB_FLOOR)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    g.sum_axis(terms, 1)
}

/// Jensen–Shannon divergence between row distributions `p` and `q`
/// (`(n, K+1)` each), averaged over rows.
pub fn jsd_consistency(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let rows = check_same(g, p, q)?;
    let sum = g.add(p, q)?;
    let mid = g.scale(sum, 0.5)?;
    let a = kl_rows(g, p, mid)?;
    let b = kl_rows(g, q, mid)?;
    let both = g.add(a, b)?;
    let total = g.sum(both)?;
    g.scale(total, 0.5 / rows as f64)
}

/// Style-consistency distance under the chosen metric, averaged over rows.
///
/// * `L2`: squared Euclidean distance of each row pair, summed over classes.
/// * `Kl`: `KL[p || q]`.
/// * `Jsd`: [`jsd_consistency`].
pub fn consistency_variant(g: &mut Graph, p: Var, q: Var, metric: SecMetric) -> Result<Var> {
    let rows = check_same(g, p, q)?;
    match metric {
        SecMetric::Jsd => jsd_consistency(g, p, q),
        SecMetric::Kl => {
            let kl = kl_rows(g, p, q)?;
            let total = g.sum(kl)?;
            g.scale(total, 1.0 / rows as f64)
        }
        SecMetric::L2 => {
            let d = g.sub(p, q)?;
            let sq = g.mul(d, d)?;
            let total = g.sum(sq)?;
            g.scale(total, 1.0 / rows as f64)
        }
    }
}

/// Value-level [`consistency_variant`] on probability matrices.
pub fn consistency_value(p: &Tensor, q: &Tensor, metric: SecMetric) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone())?;
    let qv = g.constant(q.clone())?;
    let l = consistency_variant(&mut g, pv, qv, metric)?;
    Ok(g.item(l))
}

/// The four projection MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProjectionHead {
    /// Original horizontal RoIs.
    F1,
    /// Hallucinated horizontal RoIs.
    F2,
    /// Original rotated RoIs.
    F3,
    /// Hallucinated rotated RoIs.
    F4,
}

impl ProjectionHead {
    pub const ALL: [ProjectionHead; 4] = [Self::F1, Self::F2, Self::F3, Self::F4];

    pub fn accepts(self) -> (RoiStage, Branch) {
        match self {
            Self::F1 => (RoiStage::Horizontal, Branch::Original),
            Self::F2 => (RoiStage::Horizontal, Branch::Hallucinated),
            Self::F3 => (RoiStage::Rotated, Branch::Original),
            Self::F4 => (RoiStage::Rotated, Branch::Hallucinated),
        }
    }

    pub fn for_input(stage: RoiStage, branch: Branch) -> Self {
        match (stage, branch) {
            (RoiStage::Horizontal, Branch::Original) => Self::F1,
            (RoiStage::Horizontal, Branch::Hallucinated) => Self::F2,
            (RoiStage::Rotated, Branch::Original) => Self::F3,
            (RoiStage::Rotated, Branch::Hallucinated) => Self::F4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::F1 => "proj.f1",
            Self::F2 => "proj.f2",
            Self::F3 => "proj.f3",
            Self::F4 => "proj.f4",
        }
    }
}

/// The two category heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CategoryHead {
    /// Original rotated RoIs.
    G1,
    /// Hallucinated rotated RoIs.
    G2,
}

impl CategoryHead {
    pub fn for_branch(branch: Branch) -> Self {
        match branch {
            Branch::Original => Self::G1,
            Branch::Hallucinated => Self::G2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::G1 => "cat.g1",
            Self::G2 => "cat.g2",
        }
    }
}

pub fn init_consistency_heads(
    store: &mut ParamStore,
    pooled_len: usize,
    hidden: usize,
    embed_dim: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for head in ProjectionHead::ALL {
        init_mlp2(store, head.name(), pooled_len, hidden, embed_dim, rng)?;
    }
    for head in [CategoryHead::G1, CategoryHead::G2] {
        init_mlp2(store, head.name(), pooled_len, hidden, num_classes + 1, rng)?;
    }
    Ok(())
}

/// Flatten → two-layer MLP → unit-norm rows.
pub fn project_embeddings(g: &mut Graph, store: &ParamStore, head: ProjectionHead, pooled: &PooledRois) -> Result<Var> {
    if head.accepts() != (pooled.stage, pooled.branch) {
        return Err(Error::invalid(format!(
            "projection head {head:?} cannot consume {:?} {:?} RoIs",
            pooled.branch, pooled.stage
        )));
    }
    let e = mlp2(g, store, head.name(), pooled.features)?;
    g.l2_normalize_rows(e)
}

/// Category distribution `(n, K+1)` of rotated RoIs.
pub fn category_distribution(g: &mut Graph, store: &ParamStore, head: CategoryHead, pooled: &PooledRois) -> Result<Var> {
    if pooled.stage != RoiStage::Rotated || CategoryHead::for_branch(pooled.branch) != head {
        return Err(Error::invalid(format!(
            "category head {head:?} cannot consume {:?} {:?} RoIs",
            pooled.branch, pooled.stage
        )));
    }
    let logits = mlp2(g, store, head.name(), pooled.features)?;
    g.softmax(logits)
}

/// Per-step loss terms. Disabled terms are `None` and contribute exactly 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cls: Option<Var>,
    pub reg: Option<Var>,
    pub hcl: Option<Var>,
    pub rac: Option<Var>,
    pub sec: Option<Var>,
}

/// Scalar values of each term; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub hcl: f64,
    pub rac: f64,
    pub sec: f64,
    pub total: f64,
}

/// Weighted sum of the enabled terms.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &crate::detector::LossWeights) -> Result<(Var, LossBreakdown)> {
    let parts = [
        (terms.cls, weights.cls),
        (terms.reg, weights.reg),
        (terms.hcl, weights.hcl),
        (terms.rac, weights.rac),
        (terms.sec, weights.sec),
    ];
    let mut acc: Option<Var> = None;
    let mut values = [0.0; 5];
    for (k, (term, w)) in parts.iter().enumerate() {
        let Some(v) = term else { continue };
        values[k] = g.item(*v);
        let scaled = if *w == 1.0 { *v } else { g.scale(*v, *w)? };
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    let total = match acc {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    let breakdown = LossBreakdown {
        cls: values[0],
        reg: values[1],
        hcl: values[2],
        rac: values[3],
        sec: values[4],
        total: g.item(total),
    };
    Ok((total, breakdown))
}
