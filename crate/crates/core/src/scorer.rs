//! Inference-time anomaly scoring.
//!
//! Fitting walks the training normals once: per-machine-ID embedding
//! statistics (mean + covariance with a scaled-trace ridge), per-ID
//! standardization of the three raw scores, and the score-combination
//! choice. Scoring a clip then produces
//!
//! * `out`  — negative log-probability that the type head accepts the clip,
//! * `arc`  — negative log-softmax of the claimed ID under the scaled-cosine
//!   (margin-free) identity logits,
//! * `maha` — Mahalanobis distance to the claimed ID's normal population,
//!
//! each oriented so that higher means more anomalous, plus their
//! standardized sum over the selected subset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::autodiff::{log_sum_exp, softplus};
use crate::error::{Error, Result};
use crate::eval::compute_auc;
use crate::heads::{ArcFaceHead, TypeHead};
use crate::linalg::{cholesky, solve_lower};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviations below this are treated as degenerate and floored.
pub const STD_FLOOR: f64 = 1e-12;

/// Fitted Gaussian summary of one machine ID's normal embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GroupStats<F: Scalar> {
    /// Sample mean, `[dim]`.
    pub mean: Tensor<F>,
    /// Unregularized sample covariance (n−1 denominator), `[dim, dim]`.
    pub covariance: Tensor<F>,
    /// Ridge added to the diagonal before factorization.
    pub epsilon: f64,
    /// Lower Cholesky factor of `covariance + epsilon·I`.
    pub chol: Tensor<F>,
    /// Number of embeddings the fit saw.
    pub count: usize,
}

/// Per-machine-ID normal statistics for one machine type.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NormalStatistics<F: Scalar> {
    pub by_id: BTreeMap<u32, GroupStats<F>>,
    pub dim: usize,
}

/// Fits per-ID mean/covariance over `(machine_id, embedding)` pairs.
///
/// The ridge is `1e-3 · trace(Σ)/dim`, floored at `1e-6`, so groups with
/// fewer samples than dimensions still factorize.
pub fn fit_normal_statistics<F: Scalar>(
    items: &[(u32, Vec<F>)],
) -> Result<NormalStatistics<F>> {
    let dim = match items.first() {
        Some((_, e)) => e.len(),
        None => return Err(Error::Score("no embeddings to fit".into())),
    };
    let mut groups: BTreeMap<u32, Vec<&[F]>> = BTreeMap::new();
    for (id, emb) in items {
        if emb.len() != dim {
            return Err(Error::Score(format!(
                "embedding length {} != {dim} for machine id {id}",
                emb.len()
            )));
        }
        groups.entry(*id).or_default().push(emb);
    }

    let mut by_id = BTreeMap::new();
    for (id, embs) in groups {
        let n = embs.len();
        if n < 2 {
            return Err(Error::Score(format!(
                "machine id {id} has {n} normal embedding(s); need at least 2"
            )));
        }
        let mut mean = vec![F::zero(); dim];
        for e in &embs {
            for (m, &x) in mean.iter_mut().zip(e.iter()) {
                *m += x;
            }
        }
        let inv_n = F::of(1.0 / n as f64);
        for m in &mut mean {
            *m *= inv_n;
        }
        let mut cov = Tensor::<F>::zeros([dim, dim]);
        let denom = F::of(1.0 / (n as f64 - 1.0));
        for e in &embs {
            let d: Vec<F> = e.iter().zip(&mean).map(|(&x, &m)| x - m).collect();
            for i in 0..dim {
                for j in i..dim {
                    let v = cov.at2(i, j) + d[i] * d[j] * denom;
                    cov.set2(i, j, v);
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                cov.set2(i, j, cov.at2(j, i));
            }
        }
        let trace: f64 = (0..dim).map(|i| cov.at2(i, i).as_f64()).sum();
        let epsilon = (1e-3 * trace / dim as f64).max(1e-6);
        let mut ridged = cov.clone();
        for i in 0..dim {
            ridged.set2(i, i, ridged.at2(i, i) + F::of(epsilon));
        }
        let chol = cholesky(&ridged).map_err(|e| {
            Error::Score(format!("machine id {id}: covariance not factorizable: {e}"))
        })?;
        by_id.insert(
            id,
            GroupStats { mean: Tensor::new([dim], mean), covariance: cov, epsilon, chol, count: n },
        );
    }
    Ok(NormalStatistics { by_id, dim })
}

/// Distance of `x` from the claimed ID's normal population, in whitened
/// units: `sqrt((x−μ)ᵀ (Σ+εI)⁻¹ (x−μ))` via the cached factorization.
pub fn mahalanobis_score<F: Scalar>(
    stats: &NormalStatistics<F>,
    machine_id: u32,
    x: &[F],
) -> Result<F> {
    let group = stats
        .by_id
        .get(&machine_id)
        .ok_or_else(|| Error::Score(format!("no normal statistics for machine id {machine_id}")))?;
    if x.len() != stats.dim {
        return Err(Error::Score(format!(
            "embedding length {} != fitted dimension {}",
            x.len(),
            stats.dim
        )));
    }
    let resid: Vec<F> = x.iter().zip(group.mean.data()).map(|(&a, &b)| a - b).collect();
    let y = solve_lower(&group.chol, &resid);
    Ok(y.iter().map(|&v| v * v).sum::<F>().sqrt())
}

/// Negative log-probability that the type head accepts the embedding as the
/// target machine type. Computed as `softplus(−logit)` so extreme logits
/// stay finite.
pub fn score_out<F: Scalar>(head: &TypeHead, store: &ParamStore<F>, x: &[F]) -> F {
    softplus(-head.logit(store, x))
}

/// Negative log-softmax of the claimed ID class under margin-free scaled
/// cosine logits.
pub fn score_arc<F: Scalar>(
    head: &ArcFaceHead,
    store: &ParamStore<F>,
    class: usize,
    x: &[F],
) -> Result<F> {
    if class >= head.num_classes {
        return Err(Error::Score(format!(
            "ID class {class} out of range (model has {})",
            head.num_classes
        )));
    }
    let logits = head.logits(store, x, None).map_err(|e| Error::Score(e.to_string()))?;
    Ok(log_sum_exp(&logits) - logits[class])
}

/// One clip's three raw scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple<F> {
    pub out: F,
    pub arc: F,
    pub maha: F,
}

impl<F: Copy> ScoreTriple<F> {
    pub fn get(&self, kind: ScoreKind) -> F {
        match kind {
            ScoreKind::Arc => self.arc,
            ScoreKind::Maha => self.maha,
            ScoreKind::Out => self.out,
        }
    }
}

/// The three raw score kinds. Variant order is the tie-breaking
/// (alphabetical) order used by combination selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreKind {
    Arc,
    Maha,
    Out,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Arc, ScoreKind::Maha, ScoreKind::Out];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Arc => "arc",
            ScoreKind::Maha => "maha",
            ScoreKind::Out => "out",
        }
    }
}

/// All three raw scores for one machine-ID claim.
pub fn raw_scores<F: Scalar>(
    model: &Model<F>,
    stats: &NormalStatistics<F>,
    machine_id: u32,
    embedding: &[F],
) -> Result<ScoreTriple<F>> {
    let class = model
        .id_class(machine_id)
        .ok_or_else(|| Error::Score(format!("machine id {machine_id} not in the trained set")))?;
    Ok(ScoreTriple {
        out: score_out(&model.type_head, &model.store, embedding),
        arc: score_arc(&model.arcface, &model.store, class, embedding)?,
        maha: mahalanobis_score(stats, machine_id, embedding)?,
    })
}

/// Mean/floored-std of one score kind over one ID's training normals.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KindParams<F> {
    pub mean: F,
    pub std: F,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IdParams<F> {
    pub out: KindParams<F>,
    pub arc: KindParams<F>,
    pub maha: KindParams<F>,
}

impl<F: Copy> IdParams<F> {
    fn get(&self, kind: ScoreKind) -> KindParams<F> {
        match kind {
            ScoreKind::Arc => self.arc,
            ScoreKind::Maha => self.maha,
            ScoreKind::Out => self.out,
        }
    }
}

/// Per-(machine ID, score kind) standardization fitted on training normals.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StandardizationParams<F: Scalar> {
    pub by_id: BTreeMap<u32, IdParams<F>>,
}

/// Fits mean/std (n−1 denominator, std floored at [`STD_FLOOR`]) per ID and
/// kind over training-normal raw scores.
pub fn fit_standardization<F: Scalar>(
    scores: &[(u32, ScoreTriple<F>)],
) -> Result<StandardizationParams<F>> {
    let mut groups: BTreeMap<u32, Vec<&ScoreTriple<F>>> = BTreeMap::new();
    for (id, t) in scores {
        groups.entry(*id).or_default().push(t);
    }
    let mut by_id = BTreeMap::new();
    for (id, ts) in groups {
        let n = ts.len();
        if n < 2 {
            return Err(Error::Score(format!(
                "machine id {id} has {n} training score(s); need at least 2 to standardize"
            )));
        }
        let fit_kind = |kind: ScoreKind| {
            let vals: Vec<F> = ts.iter().map(|t| t.get(kind)).collect();
            let mean = vals.iter().copied().sum::<F>() / F::of(n as f64);
            let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>()
                / F::of(n as f64 - 1.0);
            KindParams { mean, std: var.sqrt().max(F::of(STD_FLOOR)) }
        };
        by_id.insert(
            id,
            IdParams {
                out: fit_kind(ScoreKind::Out),
                arc: fit_kind(ScoreKind::Arc),
                maha: fit_kind(ScoreKind::Maha),
            },
        );
    }
    Ok(StandardizationParams { by_id })
}

/// `(score − mean)/std` under the claimed ID's fitted parameters.
pub fn standardize<F: Scalar>(
    params: &StandardizationParams<F>,
    machine_id: u32,
    kind: ScoreKind,
    score: F,
) -> Result<F> {
    let id_params = params.by_id.get(&machine_id).ok_or_else(|| {
        Error::Score(format!("no standardization parameters for machine id {machine_id}"))
    })?;
    let p = id_params.get(kind);
    Ok((score - p.mean) / p.std)
}

/// Standardizes all three scores of one triple.
pub fn standardize_triple<F: Scalar>(
    params: &StandardizationParams<F>,
    machine_id: u32,
    raw: &ScoreTriple<F>,
) -> Result<ScoreTriple<F>> {
    Ok(ScoreTriple {
        out: standardize(params, machine_id, ScoreKind::Out, raw.out)?,
        arc: standardize(params, machine_id, ScoreKind::Arc, raw.arc)?,
        maha: standardize(params, machine_id, ScoreKind::Maha, raw.maha)?,
    })
}

/// The nonempty subset of standardized scores summed into the final score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationSpec {
    /// Members in ascending [`ScoreKind`] order.
    pub members: Vec<ScoreKind>,
}

impl CombinationSpec {
    pub fn full() -> Self {
        Self { members: ScoreKind::ALL.to_vec() }
    }

    /// Sum of the member standardized scores.
    pub fn combined<F: Scalar>(&self, z: &ScoreTriple<F>) -> F {
        self.members.iter().map(|&k| z.get(k)).sum()
    }
}

/// All 7 nonempty subsets, largest first, ties in ascending member order —
/// the order in which a tied AUC is resolved.
fn candidate_subsets() -> Vec<Vec<ScoreKind>> {
    let mut subsets: Vec<Vec<ScoreKind>> = (1u8..8)
        .map(|bits| {
            ScoreKind::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, &k)| k)
                .collect()
        })
        .collect();
    subsets.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    subsets
}

/// Picks the score subset. With labeled validation triples the subset with
/// the highest validation AUC wins (ties resolved toward the larger subset,
/// then alphabetically); without validation the full set is used.
pub fn select_combination<F: Scalar>(
    validation: Option<(&[ScoreTriple<F>], &[bool])>,
) -> Result<CombinationSpec> {
    let Some((triples, labels)) = validation else {
        return Ok(CombinationSpec::full());
    };
    if triples.len() != labels.len() {
        return Err(Error::Score(format!(
            "{} validation triples but {} labels",
            triples.len(),
            labels.len()
        )));
    }
    let mut best: Option<(Vec<ScoreKind>, f64)> = None;
    for members in candidate_subsets() {
        let spec = CombinationSpec { members: members.clone() };
        let scores: Vec<f64> = triples.iter().map(|t| spec.combined(t).as_f64()).collect();
        let auc = compute_auc(&scores, labels)?;
        if best.as_ref().is_none_or(|(_, b)| auc > *b) {
            best = Some((members, auc));
        }
    }
    Ok(CombinationSpec { members: best.unwrap().0 })
}

/// Everything scoring needs beyond the model weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ScorerState<F: Scalar> {
    pub stats: NormalStatistics<F>,
    pub standardization: StandardizationParams<F>,
    pub combination: CombinationSpec,
}

/// Fits the full scorer from training-normal clips (and, optionally,
/// labeled validation clips for combination selection).
pub fn fit_scorer<F: Scalar>(
    model: &Model<F>,
    normals: &[(u32, AudioClip<F>)],
    validation: &[(u32, AudioClip<F>, bool)],
) -> Result<ScorerState<F>> {
    let mut embeddings = Vec::with_capacity(normals.len());
    for (id, clip) in normals {
        embeddings.push((*id, model.embed_clip(clip)?));
    }
    let stats = fit_normal_statistics(&embeddings)?;
    let mut raw = Vec::with_capacity(embeddings.len());
    for (id, emb) in &embeddings {
        raw.push((*id, raw_scores(model, &stats, *id, emb)?));
    }
    let standardization = fit_standardization(&raw)?;

    let combination = if validation.is_empty() {
        select_combination::<F>(None)?
    } else {
        let mut triples = Vec::with_capacity(validation.len());
        let mut labels = Vec::with_capacity(validation.len());
        for (id, clip, anomalous) in validation {
            let emb = model.embed_clip(clip)?;
            let r = raw_scores(model, &stats, *id, &emb)?;
            triples.push(standardize_triple(&standardization, *id, &r)?);
            labels.push(*anomalous);
        }
        select_combination(Some((&triples, &labels)))?
    };
    Ok(ScorerState { stats, standardization, combination })
}

/// Scores one clip under a claimed machine ID: raw triple + combined score.
pub fn score_clip<F: Scalar>(
    model: &Model<F>,
    state: &ScorerState<F>,
    clip: &AudioClip<F>,
    machine_id: u32,
) -> Result<(ScoreTriple<F>, F)> {
    let emb = model.embed_clip(clip)?;
    let raw = raw_scores(model, &state.stats, machine_id, &emb)?;
    let z = standardize_triple(&state.standardization, machine_id, &raw)?;
    Ok((raw, state.combination.combined(&z)))
}

/// One line of the score CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub path: String,
    pub machine_type: String,
    pub machine_id: u32,
    pub a_out: f64,
    pub a_arc: f64,
    pub a_maha: f64,
    pub combined: f64,
}

/// Writes `path,machine_type,machine_id,a_out,a_arc,a_maha,combined`.
pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Score(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let err = |e: csv::Error| Error::Score(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(err)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_vectors_give_ridge_only_covariance() {
        let v = vec![1.0f64, -2.0, 0.5];
        let items: Vec<(u32, Vec<f64>)> = (0..4).map(|_| (3u32, v.clone())).collect();
        let stats = fit_normal_statistics(&items).unwrap();
        let g = &stats.by_id[&3];
        assert_eq!(g.mean.data(), v.as_slice());
        assert!(g.covariance.data().iter().all(|&c| c.abs() < 1e-15));
        assert_eq!(g.epsilon, 1e-6);
        // Distance grows as residual / sqrt(epsilon).
        let d = mahalanobis_score(&stats, 3, &[2.0, -2.0, 0.5]).unwrap();
        assert!((d - 1.0 / 1e-3).abs() < 1e-6, "{d}");
        assert_eq!(mahalanobis_score(&stats, 3, &v).unwrap(), 0.0);
    }

    #[test]
    fn two_point_covariance_matches_hand_arithmetic() {
        let items = vec![(0u32, vec![0.0f64, 0.0]), (0, vec![2.0, 0.0])];
        let stats = fit_normal_statistics(&items).unwrap();
        let g = &stats.by_id[&0];
        assert_eq!(g.mean.data(), &[1.0, 0.0]);
        // Σ₁₁ = ((0−1)² + (2−1)²)/(2−1) = 2; ridge = 1e-3·2/2 = 1e-3.
        assert_eq!(g.covariance.at2(0, 0), 2.0);
        assert_eq!(g.covariance.at2(1, 1), 0.0);
        assert!((g.epsilon - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn fit_matches_two_pass_oracle() {
        let mut rng = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let dim = 64;
        let n = 100;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| next() * 3.0).collect()).collect();
        let items: Vec<(u32, Vec<f64>)> = rows.iter().map(|r| (7u32, r.clone())).collect();
        let stats = fit_normal_statistics(&items).unwrap();
        let g = &stats.by_id[&7];

        let mut mean = vec![0.0f64; dim];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        for (a, b) in g.mean.data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-10);
        }
        for i in 0..dim {
            for j in 0..dim {
                let cij: f64 = rows
                    .iter()
                    .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                    .sum::<f64>()
                    / (n as f64 - 1.0);
                assert!((g.covariance.at2(i, j) - cij).abs() < 1e-10);
                assert_eq!(g.covariance.at2(i, j), g.covariance.at2(j, i));
            }
        }
    }

    #[test]
    fn small_groups_are_rejected_by_name() {
        let items = vec![(0u32, vec![0.0f64, 0.0]), (0, vec![2.0, 0.0]), (9, vec![1.0, 1.0])];
        let err = fit_normal_statistics(&items).unwrap_err();
        assert!(err.to_string().contains("machine id 9"), "{err}");
    }

    #[test]
    fn diagonal_mahalanobis_closed_form() {
        // Hand-built stats: Σ+εI factorized as diag(2, 1) ⇒ Σ_eff = diag(4, 1).
        let mut by_id = BTreeMap::new();
        by_id.insert(
            0u32,
            GroupStats {
                mean: Tensor::new([2], vec![0.0f64, 0.0]),
                covariance: Tensor::new([2, 2], vec![4.0, 0.0, 0.0, 1.0]),
                epsilon: 0.0,
                chol: Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 1.0]),
                count: 5,
            },
        );
        let stats = NormalStatistics { by_id, dim: 2 };
        let d = mahalanobis_score(&stats, 0, &[2.0, 1.0]).unwrap();
        assert!((d - 2.0f64.sqrt()).abs() < 1e-15);
        let e1 = mahalanobis_score(&stats, 0, &[2.0, 0.0]).unwrap();
        assert!((e1 - 1.0).abs() < 1e-15);
        assert!(mahalanobis_score(&stats, 1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn mahalanobis_is_affine_invariant() {
        // y = A x + b with nonsingular A leaves distances unchanged when the
        // statistics are refit in the new basis (ridge scaled out by fitting
        // well-conditioned data).
        let mut rng = 123456789u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let dim = 4;
        let a: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.3 * next() }).collect())
            .collect();
        let b: Vec<f64> = (0..dim).map(|_| next()).collect();
        let apply = |x: &[f64]| -> Vec<f64> {
            (0..dim).map(|i| (0..dim).map(|j| a[i][j] * x[j]).sum::<f64>() + b[i]).collect()
        };
        let xs: Vec<Vec<f64>> = (0..40).map(|_| (0..dim).map(|_| next() * 2.0).collect()).collect();
        let items: Vec<(u32, Vec<f64>)> = xs.iter().map(|x| (0u32, x.clone())).collect();
        let mapped: Vec<(u32, Vec<f64>)> = xs.iter().map(|x| (0u32, apply(x))).collect();
        let s1 = fit_normal_statistics(&items).unwrap();
        let s2 = fit_normal_statistics(&mapped).unwrap();
        let probe: Vec<f64> = (0..dim).map(|_| next()).collect();
        let d1 = mahalanobis_score(&s1, 0, &probe).unwrap();
        let d2 = mahalanobis_score(&s2, 0, &apply(&probe)).unwrap();
        // The ridge differs slightly between bases; tolerance reflects that.
        assert!((d1 - d2).abs() / d1 < 1e-2, "{d1} vs {d2}");
    }

    fn arc_fixture() -> (ParamStore<f64>, ArcFaceHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ArcFaceHead::init(&mut store, &mut rng, 2, 3, 16.0, 1.28);
        let anchors = store.find("arcface.anchors").unwrap();
        *store.get_mut(anchors) =
            Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        (store, head)
    }

    #[test]
    fn arc_score_at_matching_anchor_is_tiny() {
        let (store, head) = arc_fixture();
        let a = score_arc(&head, &store, 0, &[1.0, 0.0, 0.0]).unwrap();
        // −log(e¹⁶/(e¹⁶+1)) = ln(1 + e⁻¹⁶)
        assert!((a - (-16.0f64).exp().ln_1p()).abs() < 1e-12, "{a}");
        assert!(a < 2e-7);
    }

    #[test]
    fn arc_score_at_wrong_anchor_is_near_scale() {
        let (store, head) = arc_fixture();
        let a = score_arc(&head, &store, 0, &[0.0, 1.0, 0.0]).unwrap();
        assert!((a - 16.0).abs() < 1e-3, "{a}");
        assert!(score_arc(&head, &store, 2, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_arc_logits_give_log_k() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ArcFaceHead::init(&mut store, &mut rng, 4, 4, 16.0, 1.28);
        let anchors = store.find("arcface.anchors").unwrap();
        *store.get_mut(anchors) =
            Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        // Equidistant from all four anchors → uniform softmax.
        let x = [0.5f64, 0.5, 0.5, 0.5];
        let a = score_arc(&head, &store, 1, &x).unwrap();
        assert!((a - 4.0f64.ln()).abs() < 1e-12, "{a}");
    }

    #[test]
    fn out_score_matches_negative_log_probability() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = TypeHead::init(&mut store, &mut rng, 2);
        let w = store.find("type_head.w").unwrap();
        let b = store.find("type_head.b").unwrap();
        *store.get_mut(w) = Tensor::new([2, 1], vec![1.0, 0.0]);
        *store.get_mut(b) = Tensor::new([1], vec![0.0]);
        // logit 0 → p = 1/2 → ln 2.
        let half = score_out(&head, &store, &[0.0, 5.0]);
        assert!((half - 2.0f64.ln()).abs() < 1e-15);
        // p = 0.1 ⇔ logit = −ln 9 → score ln 10.
        let tenth = score_out(&head, &store, &[-(9.0f64.ln()), 0.0]);
        assert!((tenth - 10.0f64.ln()).abs() < 1e-12);
        // Extreme logits stay finite.
        let extreme = score_out(&head, &store, &[-1e4, 0.0]);
        assert!(extreme.is_finite() && extreme > 100.0);
    }

    fn triples(vals: &[(f64, f64, f64)]) -> Vec<(u32, ScoreTriple<f64>)> {
        vals.iter().map(|&(out, arc, maha)| (0u32, ScoreTriple { out, arc, maha })).collect()
    }

    #[test]
    fn standardization_matches_hand_values() {
        let params =
            fit_standardization(&triples(&[(1.0, 5.0, 0.0), (2.0, 5.0, 0.0), (3.0, 5.0, 0.0)]))
                .unwrap();
        // out scores {1,2,3}: mean 2, std 1 (n−1 denominator).
        assert_eq!(standardize(&params, 0, ScoreKind::Out, 2.0).unwrap(), 0.0);
        assert_eq!(standardize(&params, 0, ScoreKind::Out, 3.0).unwrap(), 1.0);
        // Constant arc scores → floored std keeps z finite.
        let z = standardize(&params, 0, ScoreKind::Arc, 5.5).unwrap();
        assert!(z.is_finite());
        assert!(standardize(&params, 1, ScoreKind::Out, 0.0).is_err());
    }

    #[test]
    fn standardized_training_scores_have_zero_mean_unit_variance() {
        let raw = triples(&[(1.0, 0.3, 9.0), (4.0, 0.1, 7.0), (2.5, 0.9, 8.0), (0.5, 0.4, 12.0)]);
        let params = fit_standardization(&raw).unwrap();
        for kind in ScoreKind::ALL {
            let zs: Vec<f64> = raw
                .iter()
                .map(|(id, t)| standardize(&params, *id, kind, t.get(kind)).unwrap())
                .collect();
            let mean: f64 = zs.iter().sum::<f64>() / zs.len() as f64;
            let var: f64 =
                zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (zs.len() as f64 - 1.0);
            assert!(mean.abs() < 1e-12, "{kind:?} mean {mean}");
            assert!((var - 1.0).abs() < 1e-12, "{kind:?} var {var}");
        }
    }

    #[test]
    fn candidate_order_prefers_large_then_alphabetical() {
        use ScoreKind::*;
        assert_eq!(
            candidate_subsets(),
            vec![
                vec![Arc, Maha, Out],
                vec![Arc, Maha],
                vec![Arc, Out],
                vec![Maha, Out],
                vec![Arc],
                vec![Maha],
                vec![Out],
            ]
        );
    }

    #[test]
    fn selection_finds_the_separating_kind() {
        // Only maha orders anomalies above normals (AUC 1); arc and out are
        // AUC-½ noise loud enough to disrupt any subset containing them.
        let maha = [0.0, 10.0, 20.0, 30.0];
        let arc = [50.0, 0.0, 0.0, 50.0];
        let out = [0.0, 60.0, 30.0, 31.0];
        let labels = [false, false, true, true];
        let triples: Vec<ScoreTriple<f64>> = (0..4)
            .map(|i| ScoreTriple { out: out[i], arc: arc[i], maha: maha[i] })
            .collect();
        let spec = select_combination(Some((&triples, &labels))).unwrap();
        assert_eq!(spec.members, vec![ScoreKind::Maha]);
    }

    #[test]
    fn tied_auc_resolves_to_the_larger_subset() {
        // arc and maha order clips identically (AUC ¾ each, same failing
        // pair, so their sum also scores ¾); out wrecks any set containing
        // it. Best tie: {arc}, {maha}, {arc,maha} → largest wins.
        let arc = [0.0, 5.0, 1.0, 6.0];
        let maha = [0.0, 50.0, 10.0, 60.0];
        let out = [100.0, 0.0, 0.0, 100.0];
        let labels = [false, false, true, true];
        let triples: Vec<ScoreTriple<f64>> = (0..4)
            .map(|i| ScoreTriple { out: out[i], arc: arc[i], maha: maha[i] })
            .collect();
        let spec = select_combination(Some((&triples, &labels))).unwrap();
        assert_eq!(spec.members, vec![ScoreKind::Arc, ScoreKind::Maha]);
    }

    #[test]
    fn no_validation_selects_everything() {
        let spec = select_combination::<f64>(None).unwrap();
        assert_eq!(spec.members, ScoreKind::ALL.to_vec());
        let z = ScoreTriple { out: 1.0, arc: -0.5, maha: 2.0 };
        assert_eq!(spec.combined(&z), 2.5);
        let single = CombinationSpec { members: vec![ScoreKind::Maha] };
        assert_eq!(single.combined(&z), 2.0);
    }

    #[test]
    fn score_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rows = vec![
            ScoreRow {
                path: "fan/id_00/t.wav".into(),
                machine_type: "fan".into(),
                machine_id: 0,
                a_out: 0.25,
                a_arc: 1.5,
                a_maha: 3.75,
                combined: 2.0,
            },
            ScoreRow {
                path: "fan/id_02/u.wav".into(),
                machine_type: "fan".into(),
                machine_id: 2,
                a_out: 0.5,
                a_arc: 0.125,
                a_maha: 1.0,
                combined: -0.5,
            },
        ];
        write_score_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,machine_type,machine_id,a_out,a_arc,a_maha,combined\n"));
        assert_eq!(read_score_csv(&path).unwrap(), rows);
    }
}
