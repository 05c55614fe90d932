//! Cluster-level memory bank: contrastive loss against all centroids, with
//! single- and multi-cluster momentum updates and an optional cosine-annealed
//! momentum schedule.

use crate::error::{Error, Result};
use crate::math::{all_finite, dot, is_unit, normalize};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Momentum schedule over the iterations of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MomentumSchedule {
    Fixed { m: f64 },
    Cosine { m_max: f64, m_min: f64, steps_per_epoch: u64 },
}

impl MomentumSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MomentumSchedule::Fixed { m } => {
                if !(0.0..=1.0).contains(&m) {
                    return Err(Error::invalid("momentum", "m must be in [0, 1]"));
                }
            }
            MomentumSchedule::Cosine { m_max, m_min, steps_per_epoch } => {
                if !(0.0 <= m_min && m_min <= m_max && m_max <= 1.0) {
                    return Err(Error::invalid("momentum", "need 0 <= m_min <= m_max <= 1"));
                }
                if steps_per_epoch < 1 {
                    return Err(Error::invalid("momentum", "steps_per_epoch must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Momentum at step `t` of the epoch:
    /// m_t = m_min + (m_max − m_min)(1 + cos(tπ/T))/2 in cosine mode.
    /// Steps past T clamp to m_min.
    pub fn momentum_at(&self, t: u64) -> f64 {
        match *self {
            MomentumSchedule::Fixed { m } => m,
            MomentumSchedule::Cosine { m_max, m_min, steps_per_epoch } => {
                if t > steps_per_epoch {
                    log::warn!("momentum step {t} past epoch length {steps_per_epoch}; clamping to m_min");
                    return m_min;
                }
                let phase = t as f64 * std::f64::consts::PI / steps_per_epoch as f64;
                m_min + 0.5 * (m_max - m_min) * (1.0 + phase.cos())
            }
        }
    }
}

/// Per-query ClusterNCE loss output. `query_grads` are gradients of the
/// batch-mean loss.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub query_grads: Vec<Vec<f64>>,
    pub positive_logits: Vec<f64>,
}

/// Q unit-norm cluster centroids with a momentum update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    centroids: Vec<Vec<f64>>,
    tau: f64,
    schedule: MomentumSchedule,
    /// Re-normalize centroids after momentum updates (default on; a config
    /// flag for comparison runs).
    renormalize: bool,
    step: u64,
}

/// Copy the centroids into a fresh bank; validates unit norms.
pub fn init_bank(
    centroids: &[Vec<f64>],
    tau: f64,
    schedule: MomentumSchedule,
) -> Result<MemoryBank> {
    MemoryBank::new(centroids, tau, schedule, true)
}

impl MemoryBank {
    pub fn new(
        centroids: &[Vec<f64>],
        tau: f64,
        schedule: MomentumSchedule,
        renormalize: bool,
    ) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::invalid("centroids", "must be nonempty"));
        }
        if tau <= 0.0 {
            return Err(Error::invalid("tau", "temperature must be > 0"));
        }
        schedule.validate()?;
        let dim = centroids[0].len();
        for (k, c) in centroids.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::Geometry(format!("centroid {k} has mismatched length")));
            }
            if !is_unit(c, 1e-6) {
                return Err(Error::invalid("centroids", format!("centroid {k} is not unit-norm")));
            }
        }
        Ok(MemoryBank { centroids: centroids.to_vec(), tau, schedule, renormalize, step: 0 })
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn current_momentum(&self) -> f64 {
        self.schedule.momentum_at(self.step)
    }

    /// Advance the within-epoch step counter (once per iteration).
    pub fn advance_step(&mut self) {
        self.step += 1;
    }

    /// Batch-mean ClusterNCE loss with analytic query gradients:
    /// loss_q = −log softmax(q·C/τ)[positive], grad via (softmax − onehot).
    pub fn cluster_nce(&self, queries: &[Vec<f64>], labels: &[usize]) -> Result<LossReport> {
        if queries.len() != labels.len() {
            return Err(Error::Geometry("queries/labels length mismatch".into()));
        }
        if queries.is_empty() {
            return Err(Error::invalid("queries", "must be nonempty"));
        }
        let q_count = queries.len() as f64;
        let n_clusters = self.centroids.len();
        let dim = self.centroids[0].len();
        let mut total = 0.0;
        let mut query_grads = Vec::with_capacity(queries.len());
        let mut positive_logits = Vec::with_capacity(queries.len());
        for (q, &label) in queries.iter().zip(labels) {
            if label >= n_clusters {
                return Err(Error::invalid("labels", format!("label {label} out of range")));
            }
            if q.len() != dim {
                return Err(Error::Geometry("query length mismatch".into()));
            }
            let logits: Vec<f64> = self.centroids.iter().map(|c| dot(q, c) / self.tau).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[label];
            positive_logits.push(logits[label]);
            let mut g = vec![0.0; dim];
            for (k, c) in self.centroids.iter().enumerate() {
                let p = (logits[k] - lse).exp();
                let coeff = (p - if k == label { 1.0 } else { 0.0 }) / (self.tau * q_count);
                if coeff != 0.0 {
                    for (gi, ci) in g.iter_mut().zip(c) {
                        *gi += coeff * ci;
                    }
                }
            }
            query_grads.push(g);
        }
        let loss = total / q_count;
        if !loss.is_finite() || query_grads.iter().any(|g| !all_finite(g)) {
            return Err(Error::NonFinite("cluster_nce"));
        }
        Ok(LossReport { loss, query_grads, positive_logits })
    }

    /// C ← m·C + (1−m)·q for one cluster, then re-normalize (when enabled).
    pub fn momentum_update(&mut self, q: &[f64], cluster_id: usize) -> Result<()> {
        if cluster_id >= self.centroids.len() {
            return Err(Error::invalid("cluster_id", format!("{cluster_id} out of range")));
        }
        let m = self.current_momentum();
        if m == 1.0 {
            return Ok(()); // bitwise unchanged
        }
        let c = &mut self.centroids[cluster_id];
        if q.len() != c.len() {
            return Err(Error::Geometry("query length mismatch".into()));
        }
        for (ci, qi) in c.iter_mut().zip(q) {
            *ci = m * *ci + (1.0 - m) * qi;
        }
        if self.renormalize {
            normalize(c);
        }
        Ok(())
    }

    /// Apply the momentum update with the same query to every cluster in the
    /// support set; all other centroids are untouched.
    pub fn multi_cluster_update(&mut self, q: &[f64], support_set: &[usize]) -> Result<()> {
        if support_set.is_empty() {
            return Err(Error::invalid("support_set", "must be nonempty"));
        }
        for &id in support_set {
            self.momentum_update(q, id)?;
        }
        Ok(())
    }

    /// Checkpoint dump: same binary+JSON-header layout as encoder params.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct BankHeader<'a> {
            version: u32,
            n_clusters: usize,
            dim: usize,
            tau: f64,
            schedule: &'a MomentumSchedule,
            renormalize: bool,
            step: u64,
        }
        let header = BankHeader {
            version: 1,
            n_clusters: self.centroids.len(),
            dim: self.centroids[0].len(),
            tau: self.tau,
            schedule: &self.schedule,
            renormalize: self.renormalize,
            step: self.step,
        };
        let hbytes = serde_json::to_vec(&header)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&(hbytes.len() as u32).to_le_bytes())?;
        w.write_all(&hbytes)?;
        for c in &self.centroids {
            for v in c {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MemoryBank> {
        #[derive(Deserialize)]
        struct BankHeader {
            version: u32,
            n_clusters: usize,
            dim: usize,
            tau: f64,
            schedule: MomentumSchedule,
            renormalize: bool,
            step: u64,
        }
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let mut hbytes = vec![0u8; u32::from_le_bytes(len4) as usize];
        r.read_exact(&mut hbytes)?;
        let header: BankHeader = serde_json::from_slice(&hbytes)?;
        if header.version != 1 {
            return Err(Error::invalid("bank", format!("unsupported version {}", header.version)));
        }
        let mut centroids = Vec::with_capacity(header.n_clusters);
        let mut buf = vec![0u8; header.dim * 8];
        for _ in 0..header.n_clusters {
            r.read_exact(&mut buf)?;
            centroids.push(
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            );
        }
        Ok(MemoryBank {
            centroids,
            tau: header.tau,
            schedule: header.schedule,
            renormalize: header.renormalize,
            step: header.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn fixed(m: f64) -> MomentumSchedule {
        MomentumSchedule::Fixed { m }
    }

    fn rand_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(&mut v);
        v
    }

    #[test]
    fn init_validation() {
        assert!(init_bank(&[], 0.05, fixed(0.2)).is_err());
        assert!(init_bank(&[vec![0.5, 0.0]], 0.05, fixed(0.2)).is_err());
        assert!(init_bank(&[e(0, 2)], 0.0, fixed(0.2)).is_err());
        let bank = init_bank(&[e(0, 2)], 0.05, fixed(0.2)).unwrap();
        assert_eq!(bank.n_clusters(), 1);
        assert_eq!(bank.centroids(), &[e(0, 2)]);
    }

    #[test]
    fn bank_copies_do_not_alias() {
        let src = vec![e(0, 3)];
        let mut bank = init_bank(&src, 0.05, fixed(0.0)).unwrap();
        bank.momentum_update(&e(1, 3), 0).unwrap();
        assert_eq!(src[0], e(0, 3)); // untouched
    }

    #[test]
    fn single_cluster_loss_and_grad_exactly_zero() {
        let bank = init_bank(&[e(0, 4)], 0.05, fixed(0.2)).unwrap();
        let report = bank.cluster_nce(&[e(0, 4), e(1, 4)], &[0, 0]).unwrap();
        assert_eq!(report.loss, 0.0);
        assert!(report.query_grads.iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn two_orthogonal_centroids_closed_form() {
        // loss = log(1 + e^{-1}) with tau = 1, q = positive centroid
        let bank = init_bank(&[e(0, 2), e(1, 2)], 1.0, fixed(0.2)).unwrap();
        let report = bank.cluster_nce(&[e(0, 2)], &[0]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((report.loss - expect).abs() < 1e-12);
        assert!((expect - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn nce_label_out_of_range() {
        let bank = init_bank(&[e(0, 2)], 0.05, fixed(0.2)).unwrap();
        assert!(bank.cluster_nce(&[e(0, 2)], &[1]).is_err());
    }

    /// Independent softmax oracle + central finite differences on the query.
    #[test]
    fn nce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eps = 1e-5;
        for draw in 0..50 {
            let dim = 6;
            let n_clusters = 2 + draw % 5;
            let centroids: Vec<Vec<f64>> =
                (0..n_clusters).map(|_| rand_unit(dim, &mut rng)).collect();
            let tau = [1.0, 0.2, 0.05][draw % 3];
            let bank = init_bank(&centroids, tau, fixed(0.2)).unwrap();
            let queries: Vec<Vec<f64>> = (0..3).map(|_| rand_unit(dim, &mut rng)).collect();
            let labels: Vec<usize> = (0..3).map(|i| (draw + i) % n_clusters).collect();
            let report = bank.cluster_nce(&queries, &labels).unwrap();
            // relative to the gradient scale of the draw, so near-zero
            // coordinates do not amplify FD truncation noise
            let scale = report
                .query_grads
                .iter()
                .flatten()
                .fold(0.0f64, |m, g| m.max(g.abs()))
                .max(1e-8);
            let mut max_rel = 0.0f64;
            for qi in 0..queries.len() {
                for d in 0..dim {
                    let mut qp = queries.clone();
                    qp[qi][d] += eps;
                    let mut qm = queries.clone();
                    qm[qi][d] -= eps;
                    let fd = (bank.cluster_nce(&qp, &labels).unwrap().loss
                        - bank.cluster_nce(&qm, &labels).unwrap().loss)
                        / (2.0 * eps);
                    let a = report.query_grads[qi][d];
                    let denom = a.abs().max(fd.abs()).max(scale);
                    max_rel = max_rel.max((a - fd).abs() / denom);
                }
            }
            assert!(max_rel < 1e-4, "draw {draw}: max rel err {max_rel:.3e}");
        }
    }

    #[test]
    fn loss_invariant_under_negative_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 5;
        let centroids: Vec<Vec<f64>> = (0..6).map(|_| rand_unit(dim, &mut rng)).collect();
        let bank = init_bank(&centroids, 0.1, fixed(0.2)).unwrap();
        let q = rand_unit(dim, &mut rng);
        let base = bank.cluster_nce(&[q.clone()], &[2]).unwrap().loss;
        // permute the non-positive clusters
        let permuted = vec![
            centroids[4].clone(),
            centroids[0].clone(),
            centroids[2].clone(), // positive stays at index 2
            centroids[5].clone(),
            centroids[1].clone(),
            centroids[3].clone(),
        ];
        let bank2 = init_bank(&permuted, 0.1, fixed(0.2)).unwrap();
        let perm = bank2.cluster_nce(&[q], &[2]).unwrap().loss;
        assert!((base - perm).abs() < 1e-12);
    }

    #[test]
    fn duplicating_positive_increases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 5;
        let mut centroids: Vec<Vec<f64>> = (0..4).map(|_| rand_unit(dim, &mut rng)).collect();
        let bank = init_bank(&centroids, 0.1, fixed(0.2)).unwrap();
        let q = rand_unit(dim, &mut rng);
        let base = bank.cluster_nce(&[q.clone()], &[1]).unwrap().loss;
        centroids.push(centroids[1].clone());
        let bank2 = init_bank(&centroids, 0.1, fixed(0.2)).unwrap();
        let more = bank2.cluster_nce(&[q], &[1]).unwrap().loss;
        assert!(more > base);
    }

    #[test]
    fn stable_logsumexp_small_tau() {
        let bank = init_bank(&[e(0, 2), e(1, 2)], 1e-3, fixed(0.2)).unwrap();
        let report = bank.cluster_nce(&[e(0, 2)], &[0]).unwrap();
        assert!(report.loss.is_finite());
    }

    #[test]
    fn momentum_update_endpoints() {
        let mut bank = init_bank(&[e(0, 2)], 0.05, fixed(1.0)).unwrap();
        bank.momentum_update(&e(1, 2), 0).unwrap();
        assert_eq!(bank.centroids()[0], e(0, 2)); // m=1: bitwise unchanged

        let mut bank = init_bank(&[e(0, 2)], 0.05, fixed(0.0)).unwrap();
        bank.momentum_update(&e(1, 2), 0).unwrap();
        assert_eq!(bank.centroids()[0], e(1, 2)); // m=0: centroid = q

        let mut bank = init_bank(&[e(0, 2)], 0.05, fixed(0.5)).unwrap();
        bank.momentum_update(&e(1, 2), 0).unwrap();
        let r = (2.0f64).sqrt() / 2.0;
        assert!((bank.centroids()[0][0] - r).abs() < 1e-12);
        assert!((bank.centroids()[0][1] - r).abs() < 1e-12);
    }

    #[test]
    fn multi_cluster_update_semantics() {
        let centroids = vec![e(0, 3), e(1, 3), e(2, 3)];
        let q = {
            let mut v = vec![1.0, 1.0, 0.0];
            normalize(&mut v);
            v
        };
        // support = {k}: identical to a single update
        let mut a = init_bank(&centroids, 0.05, fixed(0.3)).unwrap();
        let mut b = a.clone();
        a.momentum_update(&q, 1).unwrap();
        b.multi_cluster_update(&q, &[1]).unwrap();
        assert_eq!(a, b);

        // non-members unchanged
        let mut c = init_bank(&centroids, 0.05, fixed(0.3)).unwrap();
        c.multi_cluster_update(&q, &[0, 1]).unwrap();
        assert_eq!(c.centroids()[2], e(2, 3));

        // m=1: repeated multi-updates leave the bank unchanged
        let mut d = init_bank(&centroids, 0.05, fixed(1.0)).unwrap();
        let before = d.clone();
        d.multi_cluster_update(&q, &[0, 1, 2]).unwrap();
        d.multi_cluster_update(&q, &[0, 2]).unwrap();
        assert_eq!(d.centroids(), before.centroids());

        assert!(d.multi_cluster_update(&q, &[]).is_err());
        assert!(d.multi_cluster_update(&q, &[9]).is_err());
    }

    #[test]
    fn centroids_stay_unit_norm_after_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centroids: Vec<Vec<f64>> = (0..4).map(|_| rand_unit(8, &mut rng)).collect();
        let mut bank = init_bank(&centroids, 0.05, fixed(0.2)).unwrap();
        for _ in 0..200 {
            let q = rand_unit(8, &mut rng);
            let k = rng.gen_range(0..4);
            bank.momentum_update(&q, k).unwrap();
        }
        for c in bank.centroids() {
            assert!((norm(c) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = MomentumSchedule::Cosine { m_max: 0.5, m_min: 0.1, steps_per_epoch: 100 };
        assert!((s.momentum_at(0) - 0.5).abs() < 1e-12);
        assert!((s.momentum_at(100) - 0.1).abs() < 1e-12);
        assert!((s.momentum_at(50) - 0.3).abs() < 1e-12);
        // past T: clamps to m_min
        assert!((s.momentum_at(150) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bank_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let centroids: Vec<Vec<f64>> = (0..3).map(|_| rand_unit(4, &mut rng)).collect();
        let bank = init_bank(
            &centroids,
            0.05,
            MomentumSchedule::Cosine { m_max: 0.5, m_min: 0.1, steps_per_epoch: 50 },
        )
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bank.bin");
        bank.save(&path).unwrap();
        assert_eq!(MemoryBank::load(&path).unwrap(), bank);
    }
}
