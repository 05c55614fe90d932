//! Part-based set-pooling encoder.
//!
//! A sequence is sliced into P equal horizontal strips per frame, each strip
//! max-pooled over frames, projected by a per-part matrix, concatenated, and
//! L2-normalized. Gradients are exact, including the normalization Jacobian.
//! A linear classifier head on top of the embedding drives the supervised
//! pre-training stage.

use crate::error::{Error, Result};
use crate::math;
use crate::rngstream::{stream, Purpose};
use crate::silhouette::{GaitSequence, HEIGHT, WIDTH};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Static shape of the encoder: P parts of (HEIGHT/P)×WIDTH pixels each,
/// projected to `dim` features per part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderGeometry {
    pub parts: usize,
    pub dim: usize,
}

impl EncoderGeometry {
    pub fn new(parts: usize, dim: usize) -> Result<Self> {
        if parts == 0 || HEIGHT % parts != 0 {
            return Err(Error::invalid("parts", format!("{parts} must divide {HEIGHT}")));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        Ok(EncoderGeometry { parts, dim })
    }

    pub fn strip_rows(&self) -> usize {
        HEIGHT / self.parts
    }

    /// Flattened strip length, the input width of each part projection.
    pub fn strip_len(&self) -> usize {
        self.strip_rows() * WIDTH
    }

    /// Embedding length P·D.
    pub fn embedding_len(&self) -> usize {
        self.parts * self.dim
    }
}

/// Optional classifier head used only during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub n_classes: usize,
    /// n_classes × embedding_len, row-major.
    pub weights: Vec<f64>,
}

/// Trainable parameters: one `dim × strip_len` projection per part.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub geom: EncoderGeometry,
    /// Per part, `dim × strip_len` row-major.
    pub weights: Vec<Vec<f64>>,
    pub head: Option<Head>,
}

impl EncoderParams {
    /// Gaussian init scaled by 1/sqrt(strip_len).
    pub fn init(geom: EncoderGeometry, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Pretrain, u64::MAX);
        let scale = 1.0 / (geom.strip_len() as f64).sqrt();
        let weights = (0..geom.parts)
            .map(|_| {
                (0..geom.dim * geom.strip_len())
                    .map(|_| gaussian(&mut rng) * scale)
                    .collect()
            })
            .collect();
        EncoderParams { geom, weights, head: None }
    }

    pub fn init_head(&mut self, n_classes: usize, seed: u64) {
        let mut rng = stream(seed, Purpose::Pretrain, u64::MAX - 1);
        let len = self.geom.embedding_len();
        let scale = 1.0 / (len as f64).sqrt();
        self.head = Some(Head {
            n_classes,
            weights: (0..n_classes * len).map(|_| gaussian(&mut rng) * scale).collect(),
        });
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| math::all_finite(w))
            && self.head.as_ref().map_or(true, |h| math::all_finite(&h.weights))
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Unit-norm embedding of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub seq_id: String,
    pub augmented: bool,
}

/// Max-pooled strip activations: P strips of `strip_len` values in {0,1}.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStrips {
    pub strips: Vec<Vec<f64>>,
}

/// Slice every frame into P strips and take the element-wise max over frames
/// (set pooling). Order- and duplication-invariant by construction.
pub fn pool_sequence(seq: &GaitSequence, geom: EncoderGeometry) -> Result<PooledStrips> {
    pool_frames(seq, geom, None)
}

/// Same as [`pool_sequence`] but restricted to the given frame indices.
pub fn pool_frames(
    seq: &GaitSequence,
    geom: EncoderGeometry,
    frame_indices: Option<&[usize]>,
) -> Result<PooledStrips> {
    seq.validate()?;
    let rows = geom.strip_rows();
    let mut strips = vec![vec![0.0f64; geom.strip_len()]; geom.parts];
    let mut pool_one = |fi: usize| -> Result<()> {
        let frame = seq.frames.get(fi).ok_or_else(|| {
            Error::Geometry(format!("frame index {fi} out of range for {}", seq.seq_id))
        })?;
        let bits = frame.bits();
        for p in 0..geom.parts {
            let strip = &mut strips[p];
            let base = p * rows * WIDTH;
            for (j, s) in strip.iter_mut().enumerate() {
                if bits[base + j] != 0 {
                    *s = 1.0;
                }
            }
        }
        Ok(())
    };
    match frame_indices {
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::invalid("frame_indices", "must be nonempty"));
            }
            for &fi in idx {
                pool_one(fi)?;
            }
        }
        None => {
            for fi in 0..seq.frames.len() {
                pool_one(fi)?;
            }
        }
    }
    Ok(PooledStrips { strips })
}

/// Project pooled strips through the part matrices and L2-normalize the
/// concatenation. Returns the unit vector and the pre-normalization norm.
pub fn project(params: &EncoderParams, pooled: &PooledStrips) -> Result<(Vec<f64>, f64)> {
    let geom = params.geom;
    if pooled.strips.len() != geom.parts
        || pooled.strips.iter().any(|s| s.len() != geom.strip_len())
    {
        return Err(Error::Geometry("pooled strips do not match encoder geometry".into()));
    }
    let mut z = vec![0.0; geom.embedding_len()];
    for p in 0..geom.parts {
        let w = &params.weights[p];
        let s = &pooled.strips[p];
        let out = &mut z[p * geom.dim..(p + 1) * geom.dim];
        for d in 0..geom.dim {
            let row = &w[d * geom.strip_len()..(d + 1) * geom.strip_len()];
            out[d] = math::dot(row, s);
        }
    }
    let n = math::normalize(&mut z);
    if n < 1e-12 {
        // all-background input with zero weights; keep the zero vector
        return Ok((z, n));
    }
    Ok((z, n))
}

/// Encode one sequence to a unit-norm embedding.
pub fn encode(seq: &GaitSequence, params: &EncoderParams) -> Result<Embedding> {
    let pooled = pool_sequence(seq, params.geom)?;
    let (vector, _) = project(params, &pooled)?;
    Ok(Embedding { vector, seq_id: seq.seq_id.clone(), augmented: false })
}

/// Gradients of a scalar loss w.r.t. the encoder parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(geom: EncoderGeometry) -> Self {
        ParamGrads { weights: vec![vec![0.0; geom.dim * geom.strip_len()]; geom.parts] }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| math::all_finite(w))
    }
}

/// Backpropagate `upstream` (dL/d embedding) through the normalization and
/// the part projections, accumulating into `grads`.
pub fn project_backward(
    params: &EncoderParams,
    pooled: &PooledStrips,
    upstream: &[f64],
    grads: &mut ParamGrads,
) -> Result<()> {
    let geom = params.geom;
    if upstream.len() != geom.embedding_len() {
        return Err(Error::Geometry(format!(
            "upstream grad length {} != embedding length {}",
            upstream.len(),
            geom.embedding_len()
        )));
    }
    let (e, n) = project(params, pooled)?;
    if n < 1e-12 {
        return Ok(()); // zero activation: no gradient flows
    }
    // d/dz of u·(z/|z|): (u - (u·e)e)/|z|
    let ue = math::dot(upstream, &e);
    for p in 0..geom.parts {
        let s = &pooled.strips[p];
        let gw = &mut grads.weights[p];
        for d in 0..geom.dim {
            let gz = (upstream[p * geom.dim + d] - ue * e[p * geom.dim + d]) / n;
            if gz == 0.0 {
                continue;
            }
            let row = &mut gw[d * geom.strip_len()..(d + 1) * geom.strip_len()];
            for (rj, sj) in row.iter_mut().zip(s) {
                *rj += gz * sj;
            }
        }
    }
    Ok(())
}

/// Exact gradients of `upstream · encode(seq)` w.r.t. every part matrix.
pub fn encode_backward(
    seq: &GaitSequence,
    params: &EncoderParams,
    upstream: &[f64],
) -> Result<ParamGrads> {
    let pooled = pool_sequence(seq, params.geom)?;
    let mut grads = ParamGrads::zeros(params.geom);
    project_backward(params, &pooled, upstream, &mut grads)?;
    Ok(grads)
}

/// One SGD step with decoupled weight decay folded into the gradient:
/// w ← w − lr·(g + wd·w). Rejects non-finite gradients without touching
/// the parameters.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("encoder gradients"));
    }
    for (w, g) in params.weights.iter_mut().zip(&grads.weights) {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * (gi + weight_decay * *wi);
        }
    }
    Ok(())
}

fn head_step(head: &mut Head, grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    if !math::all_finite(grads) {
        return Err(Error::NonFinite("head gradients"));
    }
    for (wi, gi) in head.weights.iter_mut().zip(grads) {
        *wi -= lr * (gi + weight_decay * *wi);
    }
    Ok(())
}

/// Choose `count` frame indices for one training pass: without replacement
/// when the sequence is long enough, with replacement otherwise.
pub fn subsample_frames<R: Rng>(n_frames: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if n_frames >= count {
        let mut idx: Vec<usize> = (0..n_frames).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        idx.sort_unstable();
        idx
    } else {
        (0..count).map(|_| rng.gen_range(0..n_frames)).collect()
    }
}

/// Data-driven projection init from a labeled split: per part, whiten the
/// within-subject scatter of the pooled strip vectors and keep the `dim`
/// whitened directions with the largest between-subject variance. The
/// within-subject scatter is dominated by view and clothing changes, so the
/// surviving directions are condition-insensitive identity readouts — a far
/// better starting metric than a random projection, which the cross-entropy
/// phase then polishes.
pub fn discriminative_init(split: &[GaitSequence], geom: EncoderGeometry) -> Result<EncoderParams> {
    use nalgebra::{DMatrix, SymmetricEigen};

    let mut subjects: Vec<u32> = split.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::invalid("labeled_split", "needs at least 2 subjects"));
    }
    let n = split.len();
    let l = geom.strip_len();
    // ridge keeps near-null scatter directions from blowing up
    let reg = 1e-2;

    let pooled: Vec<PooledStrips> =
        split.iter().map(|s| pool_sequence(s, geom)).collect::<Result<_>>()?;
    let class_of: Vec<usize> = split
        .iter()
        .map(|s| subjects.binary_search(&s.subject_id).unwrap())
        .collect();

    let mut weights = Vec::with_capacity(geom.parts);
    for p in 0..geom.parts {
        // per-subject and global means of this part's pooled strips
        let mut class_mean = vec![vec![0.0f64; l]; subjects.len()];
        let mut class_count = vec![0usize; subjects.len()];
        for (i, ps) in pooled.iter().enumerate() {
            class_count[class_of[i]] += 1;
            for (m, x) in class_mean[class_of[i]].iter_mut().zip(&ps.strips[p]) {
                *m += x;
            }
        }
        for (m, &c) in class_mean.iter_mut().zip(&class_count) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }

        // within-subject centered data, eigendecomposed in sample space
        let a = DMatrix::from_fn(n, l, |i, j| pooled[i].strips[p][j] - class_mean[class_of[i]][j]);
        let gram = &a * a.transpose() / n as f64;
        let eig = SymmetricEigen::new(gram);

        // whitened directions with their between-subject variance
        let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
        for j in 0..n {
            let lambda = eig.eigenvalues[j].max(0.0);
            if lambda < 1e-10 {
                continue;
            }
            // v = Aᵀ u / sqrt(n·λ)  (unit direction), scaled by the whitening factor
            let u = eig.eigenvectors.column(j);
            let mut v = vec![0.0f64; l];
            for i in 0..n {
                let ui = u[i];
                for (vk, xk) in v.iter_mut().zip(a.row(i).iter()) {
                    *vk += ui * xk;
                }
            }
            let norm = math::norm(&v);
            if norm < 1e-12 {
                continue;
            }
            let scale = 1.0 / (lambda + reg).sqrt();
            for vk in v.iter_mut() {
                *vk *= scale / norm;
            }
            let projections: Vec<f64> = class_mean.iter().map(|m| math::dot(m, &v)).collect();
            let mean = projections.iter().sum::<f64>() / projections.len() as f64;
            let var = projections.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / projections.len() as f64;
            scored.push((var, v));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        if scored.len() < geom.dim {
            return Err(Error::invalid(
                "labeled_split",
                format!("only {} usable directions for dim {}", scored.len(), geom.dim),
            ));
        }
        // Scale each direction by its between-subject deviation so that
        // identity-poor strips (few pixels, or masked by clothing) weigh
        // proportionally less in the concatenated embedding's cosine.
        let mut w = Vec::with_capacity(geom.dim * l);
        for (var, mut v) in scored.into_iter().take(geom.dim) {
            let sd = var.sqrt();
            for vk in v.iter_mut() {
                *vk *= sd;
            }
            w.extend(v);
        }
        weights.push(w);
    }
    Ok(EncoderParams { geom, weights, head: None })
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Mean cross-entropy per epoch.
    pub loss_history: Vec<f64>,
    /// Nearest-centroid rank-1 on the training split after the last epoch.
    pub final_rank1: f64,
}

/// Supervised pre-training with softmax cross-entropy over subject ids.
/// The classifier head is dropped from the returned parameters.
pub fn pretrain(
    split: &[GaitSequence],
    mut params: EncoderParams,
    epochs: usize,
    lr_schedule: &[f64],
    weight_decay: f64,
    frames_per_pass: usize,
    seed: u64,
) -> Result<(EncoderParams, PretrainReport)> {
    let mut subjects: Vec<u32> = split.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::invalid("labeled_split", "needs at least 2 subjects"));
    }
    if lr_schedule.len() < epochs {
        return Err(Error::invalid("lr_schedule", "shorter than epoch count"));
    }
    let class_of = |id: u32| subjects.binary_search(&id).unwrap();
    let geom = params.geom;
    if params.head.as_ref().map_or(true, |h| h.n_classes != subjects.len()) {
        params.init_head(subjects.len(), seed);
    }
    let elen = geom.embedding_len();

    let mut loss_history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = stream(seed, Purpose::Pretrain, epoch as u64);
        // re-pool with a fresh frame subsample each epoch
        let pooled: Vec<PooledStrips> = split
            .iter()
            .map(|s| {
                let idx = subsample_frames(s.frames.len(), frames_per_pass, &mut rng);
                pool_frames(s, geom, Some(&idx))
            })
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut rng);

        let lr = lr_schedule[epoch];
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (e, _) = project(&params, &pooled[i])?;
            let head = params.head.as_ref().expect("head initialized");
            let mut logits = vec![0.0; head.n_classes];
            for (c, l) in logits.iter_mut().enumerate() {
                *l = math::dot(&head.weights[c * elen..(c + 1) * elen], &e);
            }
            let target = class_of(split[i].subject_id);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            epoch_loss += lse - logits[target];

            if lr != 0.0 {
                // dlogits = softmax - onehot
                let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
                let mut head_grads = vec![0.0; head.n_classes * elen];
                let mut de = vec![0.0; elen];
                for c in 0..head.n_classes {
                    let dl = probs[c] - if c == target { 1.0 } else { 0.0 };
                    let row = &head.weights[c * elen..(c + 1) * elen];
                    for j in 0..elen {
                        head_grads[c * elen + j] = dl * e[j];
                        de[j] += dl * row[j];
                    }
                }
                let mut grads = ParamGrads::zeros(geom);
                project_backward(&params, &pooled[i], &de, &mut grads)?;
                sgd_step(&mut params, &grads, lr, weight_decay)?;
                head_step(params.head.as_mut().unwrap(), &head_grads, lr, weight_decay)?;
            }
        }
        loss_history.push(epoch_loss / split.len() as f64);
    }

    let final_rank1 = nearest_centroid_rank1(split, &params)?;
    params.head = None;
    Ok((params, PretrainReport { loss_history, final_rank1 }))
}

/// Rank-1 accuracy of nearest-subject-centroid assignment over the split,
/// using all frames.
pub fn nearest_centroid_rank1(split: &[GaitSequence], params: &EncoderParams) -> Result<f64> {
    let embs: Vec<Embedding> = split.iter().map(|s| encode(s, params)).collect::<Result<_>>()?;
    let mut subjects: Vec<u32> = split.iter().map(|s| s.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let elen = params.geom.embedding_len();
    let mut centroids = vec![vec![0.0f64; elen]; subjects.len()];
    let mut counts = vec![0usize; subjects.len()];
    for (s, e) in split.iter().zip(&embs) {
        let c = subjects.binary_search(&s.subject_id).unwrap();
        for (a, b) in centroids[c].iter_mut().zip(&e.vector) {
            *a += b;
        }
        counts[c] += 1;
    }
    for (c, cnt) in centroids.iter_mut().zip(&counts) {
        if *cnt > 0 {
            math::normalize(c);
        }
    }
    let mut hits = 0usize;
    for (s, e) in split.iter().zip(&embs) {
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let sim = math::dot(&e.vector, centroid);
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        if subjects[best] == s.subject_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / split.len() as f64)
}

// ---- serialization: JSON header + flat little-endian f64 payload ----

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    version: u32,
    parts: usize,
    dim: usize,
    strip_len: usize,
    n_classes: usize, // 0 when no head
}

/// Save parameters as a 4-byte LE header length, a JSON header, and the
/// concatenated weight tensors as little-endian f64.
pub fn save_params(params: &EncoderParams, path: &Path) -> Result<()> {
    let header = ParamsHeader {
        version: 1,
        parts: params.geom.parts,
        dim: params.geom.dim,
        strip_len: params.geom.strip_len(),
        n_classes: params.head.as_ref().map_or(0, |h| h.n_classes),
    };
    let hbytes = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(hbytes.len() as u32).to_le_bytes())?;
    w.write_all(&hbytes)?;
    for part in &params.weights {
        for v in part {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(h) = &params.head {
        for v in &h.weights {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<EncoderParams> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: ParamsHeader = serde_json::from_slice(&hbytes)?;
    if header.version != 1 {
        return Err(Error::invalid("params", format!("unsupported version {}", header.version)));
    }
    let geom = EncoderGeometry::new(header.parts, header.dim)?;
    if geom.strip_len() != header.strip_len {
        return Err(Error::Geometry("strip length in header does not match geometry".into()));
    }
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let weights = (0..geom.parts)
        .map(|_| read_f64s(geom.dim * geom.strip_len()))
        .collect::<Result<Vec<_>>>()?;
    let head = if header.n_classes > 0 {
        Some(Head {
            n_classes: header.n_classes,
            weights: read_f64s(header.n_classes * geom.embedding_len())?,
        })
    } else {
        None
    };
    Ok(EncoderParams { geom, weights, head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silhouette::{generate_dataset, Condition, Range, SynthSpec};
    use rand_chacha::rand_core::SeedableRng;

    fn spec(n_subjects: u32, frames: u32) -> SynthSpec {
        SynthSpec {
            n_subjects,
            subject_id_offset: 0,
            conditions: vec![Condition::Nm],
            views: vec![90],
            seqs_per_cell: 2,
            frames_per_seq: frames,
            torso_halfwidth: Range::new(4.5, 7.5),
            limb_halfwidth: Range::new(1.2, 2.6),
            head_radius: Range::new(3.2, 4.2),
            stride_amplitude: Range::new(6.0, 11.0),
            coat_delta: (1, 2),
            bag_size: Range::new(2.5, 4.0),
            seed: 5,
        }
    }

    fn geom() -> EncoderGeometry {
        EncoderGeometry::new(4, 16).unwrap()
    }

    #[test]
    fn embedding_is_unit_norm() {
        let (seqs, _) = generate_dataset(&spec(2, 10)).unwrap();
        let params = EncoderParams::init(geom(), 1);
        for s in &seqs {
            let e = encode(s, &params).unwrap();
            assert!((math::norm(&e.vector) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_order_and_duplication_invariance() {
        let (seqs, _) = generate_dataset(&spec(1, 10)).unwrap();
        let params = EncoderParams::init(geom(), 1);
        let base = encode(&seqs[0], &params).unwrap();

        let mut rev = seqs[0].clone();
        rev.frames.reverse();
        assert_eq!(encode(&rev, &params).unwrap().vector, base.vector);

        let mut dup = seqs[0].clone();
        let copy = dup.frames.clone();
        dup.frames.extend(copy);
        assert_eq!(encode(&dup, &params).unwrap().vector, base.vector);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let (seqs, _) = generate_dataset(&spec(1, 5)).unwrap();
        let params = EncoderParams::init(geom(), 1);
        let g = encode_backward(&seqs[0], &params, &vec![0.0; 64]).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn all_zero_strip_gets_zero_gradient() {
        // an empty strip contributes nothing to any weight in its part
        let (seqs, _) = generate_dataset(&spec(1, 5)).unwrap();
        let params = EncoderParams::init(geom(), 1);
        let pooled = pool_sequence(&seqs[0], geom()).unwrap();
        // find a part with some zero columns; those columns must get zero grad
        let mut grads = ParamGrads::zeros(geom());
        let upstream: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        project_backward(&params, &pooled, &upstream, &mut grads).unwrap();
        for p in 0..4 {
            for (j, &s) in pooled.strips[p].iter().enumerate() {
                if s == 0.0 {
                    for d in 0..16 {
                        assert_eq!(grads.weights[p][d * geom().strip_len() + j], 0.0);
                    }
                }
            }
        }
    }

    /// Central finite differences against the analytic gradient of
    /// upstream·encode(seq), over random (seq, params, upstream) draws.
    #[test]
    fn gradient_matches_finite_differences() {
        let (seqs, _) = generate_dataset(&spec(3, 6)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        use rand::Rng;
        let g = EncoderGeometry::new(2, 4).unwrap(); // small geometry keeps FD affordable
        let eps = 1e-5;
        for draw in 0..20 {
            let mut params = EncoderParams::init(g, draw);
            let seq = &seqs[draw as usize % seqs.len()];
            let upstream: Vec<f64> = (0..g.embedding_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = encode_backward(seq, &params, &upstream).unwrap();
            let mut max_rel = 0.0f64;
            for p in 0..g.parts {
                for k in 0..g.dim * g.strip_len() {
                    // probe a subset of entries per tensor to keep runtime sane,
                    // but cover every parameter tensor
                    if k % 37 != 0 {
                        continue;
                    }
                    let orig = params.weights[p][k];
                    params.weights[p][k] = orig + eps;
                    let ep = encode(seq, &params).unwrap();
                    params.weights[p][k] = orig - eps;
                    let em = encode(seq, &params).unwrap();
                    params.weights[p][k] = orig;
                    let fd = (math::dot(&upstream, &ep.vector) - math::dot(&upstream, &em.vector))
                        / (2.0 * eps);
                    let a = analytic.weights[p][k];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    max_rel = max_rel.max((a - fd).abs() / denom);
                }
            }
            assert!(max_rel < 1e-4, "draw {draw}: max rel error {max_rel:.3e}");
        }
    }

    /// The gradient through normalization is orthogonal to the embedding.
    #[test]
    fn normalization_jacobian_orthogonality() {
        let (seqs, _) = generate_dataset(&spec(2, 6)).unwrap();
        let params = EncoderParams::init(geom(), 3);
        let pooled = pool_sequence(&seqs[0], geom()).unwrap();
        let (e, n) = project(&params, &pooled).unwrap();
        let upstream: Vec<f64> = (0..64).map(|i| ((i * 7) as f64).cos()).collect();
        let ue = math::dot(&upstream, &e);
        let gz: Vec<f64> = (0..64).map(|i| (upstream[i] - ue * e[i]) / n).collect();
        assert!(math::dot(&e, &gz).abs() < 1e-8);
    }

    #[test]
    fn sgd_step_scalars() {
        let g = EncoderGeometry::new(64, 1).unwrap(); // 1-row strips, scalar-ish
        let mut params = EncoderParams::init(g, 0);
        let before = params.clone();
        let grads = ParamGrads::zeros(g);
        sgd_step(&mut params, &grads, 0.0, 0.0).unwrap();
        assert_eq!(params, before);

        // w=1, g=1, lr=0.1, wd=0 -> 0.9
        params.weights[0][0] = 1.0;
        let mut grads = ParamGrads::zeros(g);
        grads.weights[0][0] = 1.0;
        sgd_step(&mut params, &grads, 0.1, 0.0).unwrap();
        assert!((params.weights[0][0] - 0.9).abs() < 1e-15);

        // w=1, g=0, lr=0.1, wd=5e-4 -> 0.99995
        params.weights[0][0] = 1.0;
        grads.weights[0][0] = 0.0;
        sgd_step(&mut params, &grads, 0.1, 5e-4).unwrap();
        assert!((params.weights[0][0] - 0.99995).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let g = geom();
        let mut params = EncoderParams::init(g, 0);
        let before = params.clone();
        let mut grads = ParamGrads::zeros(g);
        grads.weights[0][0] = f64::NAN;
        assert!(sgd_step(&mut params, &grads, 0.1, 0.0).is_err());
        assert_eq!(params, before);
    }

    #[test]
    fn pretrain_zero_lr_is_identity() {
        let (seqs, _) = generate_dataset(&spec(3, 6)).unwrap();
        let params = EncoderParams::init(geom(), 1);
        let before = params.clone();
        let (after, report) =
            pretrain(&seqs, params, 3, &[0.0; 3], 0.0, 6, 42).unwrap();
        assert_eq!(after.weights, before.weights);
        assert_eq!(report.loss_history.len(), 3);
        assert!(report.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn pretrain_rejects_single_class() {
        let (seqs, _) = generate_dataset(&spec(1, 5)).unwrap();
        let params = EncoderParams::init(geom(), 1);
        assert!(pretrain(&seqs, params, 1, &[0.1], 0.0, 5, 1).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut params = EncoderParams::init(geom(), 7);
        params.init_head(5, 7);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("enc.params");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
