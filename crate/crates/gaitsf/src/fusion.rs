//! Selective fusion: support-set selection over cloth-augmented centroids
//! (SCF) and front/back-view cluster detection, dissolution, and curriculum
//! re-assignment (SSF).

use crate::cluster::PseudoLabels;
use crate::error::{Error, Result};
use crate::math::dot;
use serde::Serialize;

/// Ordered support set per cluster: `sets[k] = [k, id_1, ..., id_{a-1}]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SupportSets {
    pub sets: Vec<Vec<usize>>,
    pub size: usize,
}

/// For each cluster k, rank all original centroids by cosine similarity to
/// the k-th cloth-augmented centroid (descending, ties toward the lower id),
/// force the first entry to k itself, and keep the top a−1 others.
pub fn select_support_sets(
    aug_centroids: &[Vec<f64>],
    bank_centroids: &[Vec<f64>],
    a: usize,
) -> Result<SupportSets> {
    let q = bank_centroids.len();
    if aug_centroids.len() != q {
        return Err(Error::Geometry(format!(
            "augmented centroid count {} != bank cluster count {q}",
            aug_centroids.len()
        )));
    }
    if a < 1 {
        return Err(Error::invalid("a", "support size must be >= 1"));
    }
    if a > q {
        return Err(Error::invalid("a", format!("support size {a} exceeds cluster count {q}")));
    }
    let mut sets = Vec::with_capacity(q);
    for (k, ca) in aug_centroids.iter().enumerate() {
        let mut ranked: Vec<(usize, f64)> = bank_centroids
            .iter()
            .enumerate()
            .filter(|&(id, _)| id != k)
            .map(|(id, c)| (id, dot(ca, c)))
            .collect();
        ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let mut set = Vec::with_capacity(a);
        set.push(k);
        set.extend(ranked.iter().take(a - 1).map(|&(id, _)| id));
        sets.push(set);
    }
    Ok(SupportSets { sets, size: a })
}

/// Linear probe over embeddings predicting front/back view (label 1 for
/// 0°/180°, label 0 otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ViewClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub holdout_accuracy: f64,
}

pub fn is_front_back_view(view_deg: u16) -> bool {
    view_deg == 0 || view_deg == 180
}

impl ViewClassifier {
    pub fn predict_prob(&self, embedding: &[f64]) -> f64 {
        let z = dot(&self.weights, embedding) + self.bias;
        1.0 / (1.0 + (-z).exp())
    }

    pub fn predict(&self, embedding: &[f64]) -> bool {
        self.predict_prob(embedding) > 0.5
    }
}

/// Fit a logistic regression probe on (embedding, view) pairs from the
/// labeled pre-train split. Every fifth sample is held out for the recorded
/// accuracy.
pub fn train_view_classifier(samples: &[(Vec<f64>, u16)]) -> Result<ViewClassifier> {
    let labels: Vec<bool> = samples.iter().map(|(_, v)| is_front_back_view(*v)).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::invalid("pretrain_split", "view classifier needs both classes"));
    }
    let dim = samples[0].0.len();
    let holdout: Vec<usize> = (0..samples.len()).filter(|i| i % 5 == 4).collect();
    let train: Vec<usize> = (0..samples.len()).filter(|i| i % 5 != 4).collect();

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    // unit-norm inputs make the logits tiny at init; a hot rate and a long
    // schedule are needed to actually separate the classes
    let lr = 5.0;
    for _ in 0..3000 {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for &i in &train {
            let (x, _) = &samples[i];
            let z = dot(&w, x) + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if labels[i] { 1.0 } else { 0.0 };
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        let scale = lr / train.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= scale * gi;
        }
        b -= scale * gb;
    }

    let clf = ViewClassifier { weights: w, bias: b, holdout_accuracy: 0.0 };
    let eval_set = if holdout.is_empty() { &train } else { &holdout };
    let hits = eval_set.iter().filter(|&&i| clf.predict(&samples[i].0) == labels[i]).count();
    Ok(ViewClassifier { holdout_accuracy: hits as f64 / eval_set.len() as f64, ..clf })
}

/// One label change applied during FVC dissolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reassignment {
    pub seq_index: usize,
    pub old_label: usize,
    /// New cluster id (pre-densification) or `None` for outlier.
    pub new_label: Option<usize>,
    pub similarity: f64,
}

/// Front/back-view cluster report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FvcReport {
    pub fvc_ids: Vec<usize>,
    /// Per cluster, fraction of members flagged front/back.
    pub fractions: Vec<f64>,
    pub reassignments: Vec<Reassignment>,
}

/// A cluster is FVC iff its flagged-member fraction strictly exceeds `c_low`.
pub fn detect_fvc(labels: &PseudoLabels, view_flags: &[bool], c_low: f64) -> Result<FvcReport> {
    if view_flags.len() != labels.assignment.len() {
        return Err(Error::Geometry("view flags length mismatch".into()));
    }
    let members = labels.members();
    let mut fractions = Vec::with_capacity(labels.n_clusters);
    let mut fvc_ids = Vec::new();
    for (k, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::invalid("labels", format!("cluster {k} is empty")));
        }
        let flagged = m.iter().filter(|&&i| view_flags[i]).count();
        let fraction = flagged as f64 / m.len() as f64;
        if fraction > c_low {
            fvc_ids.push(k);
        }
        fractions.push(fraction);
    }
    Ok(FvcReport { fvc_ids, fractions, reassignments: Vec::new() })
}

/// Dissolve every FVC cluster: each member moves to the most similar non-FVC
/// centroid when that similarity strictly exceeds `s_c`, otherwise it becomes
/// an outlier. Non-FVC clusters are untouched; ids are re-densified.
pub fn reassign_fvc(
    labels: &PseudoLabels,
    embeddings: &[Vec<f64>],
    fvc_ids: &[usize],
    centroids: &[Vec<f64>],
    s_c: f64,
) -> Result<(PseudoLabels, FvcReport)> {
    if embeddings.len() != labels.assignment.len() {
        return Err(Error::Geometry("embeddings length mismatch".into()));
    }
    if centroids.len() != labels.n_clusters {
        return Err(Error::Geometry("centroid count != cluster count".into()));
    }
    let is_fvc = |k: usize| fvc_ids.contains(&k);
    if fvc_ids.is_empty() {
        return Ok((
            labels.clone(),
            FvcReport { fvc_ids: Vec::new(), fractions: Vec::new(), reassignments: Vec::new() },
        ));
    }
    let non_fvc: Vec<usize> = (0..labels.n_clusters).filter(|&k| !is_fvc(k)).collect();
    let mut raw: Vec<Option<usize>> = labels.assignment.clone();
    let mut reassignments = Vec::new();
    for (i, a) in labels.assignment.iter().enumerate() {
        let Some(old) = *a else { continue };
        if !is_fvc(old) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &k in &non_fvc {
            let sim = dot(&embeddings[i], &centroids[k]);
            if best.map_or(true, |(_, bs)| sim > bs) {
                best = Some((k, sim));
            }
        }
        let (new_label, similarity) = match best {
            Some((k, sim)) if sim > s_c => (Some(k), sim),
            Some((_, sim)) => (None, sim),
            None => (None, f64::NEG_INFINITY), // no non-FVC cluster exists
        };
        raw[i] = new_label;
        reassignments.push(Reassignment { seq_index: i, old_label: old, new_label, similarity });
    }
    let densified = PseudoLabels::densify(&raw);
    Ok((
        densified,
        FvcReport { fvc_ids: fvc_ids.to_vec(), fractions: Vec::new(), reassignments },
    ))
}

/// Curriculum re-assignment threshold state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct CurriculumState {
    pub s_o: f64,
    pub s_c: f64,
    pub lambda: f64,
    pub lambda_base: f64,
    pub epoch: u32,
    /// s_c never drops below this.
    pub floor: f64,
}

impl CurriculumState {
    pub fn new(s_o: f64, lambda_base: f64, floor: f64) -> Self {
        CurriculumState { s_o, s_c: s_o, lambda: lambda_base, lambda_base, epoch: 0, floor }
    }

    /// λ = λ_base·|C_n/C_o|; s_c ← max(s_c − λ, floor). Cumulative form of
    /// the closed-form schedule; equal to it when λ is constant.
    pub fn step(&self, c_new: usize, c_old: usize) -> Result<CurriculumState> {
        if c_old == 0 {
            return Err(Error::invalid("C_o", "old cluster count must be >= 1"));
        }
        let lambda = self.lambda_base * (c_new as f64 / c_old as f64).abs();
        let s_c = (self.s_c - lambda).max(self.floor);
        Ok(CurriculumState { s_c, lambda, epoch: self.epoch + 1, ..*self })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normalize;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        normalize(&mut v);
        v
    }

    fn labels(raw: Vec<Option<usize>>) -> PseudoLabels {
        PseudoLabels::densify(&raw)
    }

    #[test]
    fn support_sets_a1_are_self_only() {
        let c = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let s = select_support_sets(&c, &c, 1).unwrap();
        assert_eq!(s.sets, vec![vec![0], vec![1]]);
    }

    #[test]
    fn support_sets_rank_by_similarity() {
        // brute-force ranking of a 3-cluster table: aug centroid 0 is most
        // similar to original 1, barely similar to 2
        let bank = vec![
            unit(vec![1.0, 0.0, 0.0]),
            unit(vec![0.9, 0.43589, 0.0]),
            unit(vec![0.2, 0.0, 0.9798]),
        ];
        let aug = vec![bank[1].clone(), bank[0].clone(), bank[2].clone()];
        let s = select_support_sets(&aug, &bank, 2).unwrap();
        assert_eq!(s.sets[0], vec![0, 1]);
        assert_eq!(s.sets[0].len(), 2);
        for (k, set) in s.sets.iter().enumerate() {
            assert_eq!(set[0], k);
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), set.len(), "distinct entries");
        }
    }

    #[test]
    fn support_sets_validation() {
        let c = vec![unit(vec![1.0, 0.0])];
        assert!(select_support_sets(&c, &c, 2).is_err());
        assert!(select_support_sets(&c, &c, 0).is_err());
        assert!(select_support_sets(&c[..0], &c, 1).is_err());
    }

    #[test]
    fn view_classifier_labels_and_accuracy() {
        // separable toy embeddings: first axis encodes "frontal-ness"
        let mut samples = Vec::new();
        for i in 0..40 {
            let frontal = i % 2 == 0;
            let view = if frontal { if i % 4 == 0 { 0 } else { 180 } } else { 45 + (i % 3) as u16 * 45 };
            let x = if frontal { unit(vec![1.0, 0.1 * i as f64 % 0.7]) } else { unit(vec![-1.0, 0.1 * i as f64 % 0.7]) };
            samples.push((x, view));
        }
        assert!(is_front_back_view(0));
        assert!(is_front_back_view(180));
        assert!(!is_front_back_view(90));
        let clf = train_view_classifier(&samples).unwrap();
        assert!(clf.holdout_accuracy > 0.95, "accuracy {}", clf.holdout_accuracy);

        let one_class: Vec<(Vec<f64>, u16)> =
            samples.iter().map(|(x, _)| (x.clone(), 90)).collect();
        assert!(train_view_classifier(&one_class).is_err());
    }

    #[test]
    fn fvc_fraction_threshold_is_strict() {
        let mut raw = vec![Some(0); 10];
        raw.extend(vec![Some(1); 10]);
        let l = labels(raw);
        // cluster 0: 9/10 flagged; cluster 1: 8/10 flagged
        let mut flags = vec![true; 9];
        flags.push(false);
        flags.extend(vec![true; 8]);
        flags.extend(vec![false; 2]);
        let report = detect_fvc(&l, &flags, 0.8).unwrap();
        assert_eq!(report.fvc_ids, vec![0]);
        assert!((report.fractions[0] - 0.9).abs() < 1e-12);
        assert!((report.fractions[1] - 0.8).abs() < 1e-12);

        let none = detect_fvc(&l, &vec![false; 20], 0.8).unwrap();
        assert!(none.fvc_ids.is_empty());
    }

    #[test]
    fn reassign_moves_or_outliers_members() {
        // clusters: 0 = FVC along +x, 1 = non-FVC along +y
        let l = labels(vec![Some(0), Some(0), Some(1), Some(1)]);
        let embeddings = vec![
            unit(vec![0.3, 0.95]), // close to cluster 1 centroid
            unit(vec![1.0, 0.05]), // far from cluster 1
            unit(vec![0.0, 1.0]),
            unit(vec![0.0, 1.0]),
        ];
        let centroids = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let (new, report) = reassign_fvc(&l, &embeddings, &[0], &centroids, 0.7).unwrap();
        // member 0: sim to cluster 1 = 0.95... > 0.7 -> joins it
        // member 1: sim 0.05 -> outlier
        assert_eq!(new.assignment[0], new.assignment[2]);
        assert_eq!(new.assignment[1], None);
        assert_eq!(new.n_clusters, 1);
        assert_eq!(report.reassignments.len(), 2);
        // non-FVC members keep their cluster (as a set)
        assert_eq!(new.assignment[2], new.assignment[3]);
    }

    #[test]
    fn reassign_no_fvc_is_identity() {
        let l = labels(vec![Some(0), Some(1)]);
        let embeddings = vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let centroids = embeddings.clone();
        let (new, report) = reassign_fvc(&l, &embeddings, &[], &centroids, 0.7).unwrap();
        assert_eq!(new, l);
        assert!(report.reassignments.is_empty());
    }

    #[test]
    fn reassign_all_fvc_everything_outliers() {
        let l = labels(vec![Some(0), Some(0)]);
        let embeddings = vec![unit(vec![1.0, 0.0]), unit(vec![1.0, 0.0])];
        let centroids = vec![unit(vec![1.0, 0.0])];
        let (new, _) = reassign_fvc(&l, &embeddings, &[0], &centroids, 0.5).unwrap();
        assert_eq!(new.n_clusters, 0);
        assert_eq!(new.n_outliers(), 2);
    }

    #[test]
    fn dissolution_is_complete() {
        // after re-assignment no surviving cluster can exceed the FVC
        // criterion unless it was non-FVC on input
        let l = labels(vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)]);
        let flags = vec![true, true, true, false, false, true];
        let embeddings: Vec<Vec<f64>> = (0..6).map(|i| {
            if i < 3 { unit(vec![1.0, 0.1 * i as f64]) } else { unit(vec![0.1, 1.0]) }
        }).collect();
        let centroids = vec![unit(vec![1.0, 0.1]), unit(vec![0.1, 1.0])];
        let report = detect_fvc(&l, &flags, 0.8).unwrap();
        assert_eq!(report.fvc_ids, vec![0]);
        let (new, _) = reassign_fvc(&l, &embeddings, &report.fvc_ids, &centroids, 0.9).unwrap();
        // cluster 0 dissolved: its members outliered (sim to cluster 1 < 0.9)
        for i in 0..3 {
            assert_eq!(new.assignment[i], None);
        }
        let post = detect_fvc(&new, &flags, 0.8).unwrap();
        assert!(post.fvc_ids.is_empty());
    }

    #[test]
    fn curriculum_arithmetic() {
        let s0 = CurriculumState::new(0.7, 0.005, 0.0);
        assert_eq!(s0.s_c, 0.7);
        // C_n = C_o -> lambda = lambda_base
        let s1 = s0.step(30, 30).unwrap();
        assert!((s1.lambda - 0.005).abs() < 1e-15);
        // constant lambda for 10 epochs: s_c = 0.7 - 10*0.005 = 0.65
        let mut s = s0;
        for _ in 0..10 {
            s = s.step(30, 30).unwrap();
        }
        assert!((s.s_c - 0.65).abs() < 1e-12);
        assert_eq!(s.epoch, 10);
        assert!(s0.step(1, 0).is_err());
    }

    #[test]
    fn curriculum_monotone_and_floored() {
        let mut s = CurriculumState::new(0.7, 0.2, 0.1);
        let mut prev = s.s_c;
        for _ in 0..10 {
            s = s.step(10, 10).unwrap();
            assert!(s.s_c <= prev);
            assert!(s.s_c <= s.s_o);
            assert!(s.s_c >= s.floor);
            prev = s.s_c;
        }
        assert!((s.s_c - 0.1).abs() < 1e-12);

        // lambda_base = 0: constant
        let c = CurriculumState::new(0.7, 0.0, 0.0);
        let c1 = c.step(5, 9).unwrap();
        assert_eq!(c1.s_c, 0.7);
    }
}
