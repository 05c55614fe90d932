//! Gallery/probe identification metrics: rank-k accuracy per condition and
//! the per-view rank-1 matrix with identical-view gallery entries excluded.

use crate::error::{Error, Result};
use crate::math::dot;
use crate::silhouette::Condition;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Embedding plus the metadata the protocol needs.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub seq_id: String,
    pub subject_id: u32,
    pub condition: Condition,
    pub view_deg: u16,
    pub vector: Vec<f64>,
}

/// Gallery = NM sequences with per-(subject, view) index < 4 under a seq_id
/// sort; probes = everything else, grouped by condition.
pub fn split_gallery_probe(items: &[EvalItem]) -> (Vec<EvalItem>, Vec<EvalItem>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].seq_id.cmp(&items[b].seq_id));
    let mut cell_count = BTreeMap::<(u32, u16), usize>::new();
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for i in order {
        let it = &items[i];
        let in_gallery = if it.condition == Condition::Nm {
            let c = cell_count.entry((it.subject_id, it.view_deg)).or_insert(0);
            *c += 1;
            *c <= 4
        } else {
            false
        };
        if in_gallery {
            gallery.push(it.clone());
        } else {
            probe.push(it.clone());
        }
    }
    (gallery, probe)
}

/// Per-condition and per-(condition, view) accuracies, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Sorted rank levels the table was computed at (e.g. [1, 5]).
    pub ranks: Vec<usize>,
    /// condition -> rank level -> accuracy %.
    pub per_condition: BTreeMap<String, BTreeMap<usize, f64>>,
    /// condition -> view -> rank-1 accuracy %.
    pub per_view_rank1: BTreeMap<String, BTreeMap<u16, f64>>,
    /// Probes with no usable gallery entry after same-view exclusion.
    pub skipped: usize,
}

/// Rank the gallery per probe by cosine similarity; hit at level k iff any of
/// the top k entries shares the subject. Ties break toward the lower gallery
/// index after a canonical pre-sort on seq_id.
pub fn rank_k(
    gallery: &[EvalItem],
    probes: &[EvalItem],
    ranks: &[usize],
    exclude_same_view: bool,
) -> Result<ResultTable> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::Protocol("gallery and probe sets must be nonempty".into()));
    }
    let mut ranks: Vec<usize> = ranks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    if ranks.is_empty() || ranks[0] < 1 {
        return Err(Error::Protocol("rank levels must be >= 1".into()));
    }
    let mut gallery: Vec<&EvalItem> = gallery.iter().collect();
    gallery.sort_by(|a, b| a.seq_id.cmp(&b.seq_id));
    let gallery_subjects: std::collections::BTreeSet<u32> =
        gallery.iter().map(|g| g.subject_id).collect();
    let missing: Vec<u32> = probes
        .iter()
        .map(|p| p.subject_id)
        .filter(|s| !gallery_subjects.contains(s))
        .collect();
    if !missing.is_empty() {
        let mut m = missing;
        m.sort_unstable();
        m.dedup();
        return Err(Error::Protocol(format!("probe subjects missing from gallery: {m:?}")));
    }

    // (condition, view) -> per rank level (hits, total)
    let mut tallies = BTreeMap::<(String, u16), Vec<(usize, usize)>>::new();
    let mut skipped = 0usize;
    for p in probes {
        let candidates: Vec<usize> = (0..gallery.len())
            .filter(|&g| !(exclude_same_view && gallery[g].view_deg == p.view_deg))
            .collect();
        if candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let mut scored: Vec<(usize, f64)> =
            candidates.iter().map(|&g| (g, dot(&p.vector, &gallery[g].vector))).collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let tally = tallies
            .entry((p.condition.as_str().to_string(), p.view_deg))
            .or_insert_with(|| vec![(0, 0); ranks.len()]);
        for (ri, &k) in ranks.iter().enumerate() {
            let hit = scored.iter().take(k).any(|&(g, _)| gallery[g].subject_id == p.subject_id);
            tally[ri].0 += hit as usize;
            tally[ri].1 += 1;
        }
    }

    let mut per_condition = BTreeMap::<String, BTreeMap<usize, f64>>::new();
    let mut per_view_rank1 = BTreeMap::<String, BTreeMap<u16, f64>>::new();
    // per-condition accuracy pools all probes of the condition
    let mut cond_tallies = BTreeMap::<String, Vec<(usize, usize)>>::new();
    for ((cond, view), tally) in &tallies {
        let ct = cond_tallies.entry(cond.clone()).or_insert_with(|| vec![(0, 0); ranks.len()]);
        for (c, t) in ct.iter_mut().zip(tally) {
            c.0 += t.0;
            c.1 += t.1;
        }
        if let Some(r1) = ranks.iter().position(|&k| k == 1) {
            per_view_rank1
                .entry(cond.clone())
                .or_default()
                .insert(*view, 100.0 * tally[r1].0 as f64 / tally[r1].1 as f64);
        }
    }
    for (cond, tally) in cond_tallies {
        let row = ranks
            .iter()
            .zip(&tally)
            .map(|(&k, &(h, t))| (k, 100.0 * h as f64 / t as f64))
            .collect();
        per_condition.insert(cond, row);
    }
    Ok(ResultTable { ranks, per_condition, per_view_rank1, skipped })
}

/// Write `metrics.json` and `per_view.csv` (rows = conditions, columns =
/// probe views, cells = rank-1 % with one decimal).
pub fn write_reports(table: &ResultTable, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(table)?;
    std::fs::write(out_dir.join("metrics.json"), json + "\n")?;

    let mut views: Vec<u16> = table
        .per_view_rank1
        .values()
        .flat_map(|row| row.keys().copied())
        .collect();
    views.sort_unstable();
    views.dedup();
    let mut csv = String::from("condition");
    for v in &views {
        csv.push_str(&format!(",{v}"));
    }
    csv.push('\n');
    for (cond, row) in &table.per_view_rank1 {
        csv.push_str(cond);
        for v in &views {
            match row.get(v) {
                Some(acc) => csv.push_str(&format!(",{acc:.1}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    std::fs::write(out_dir.join("per_view.csv"), csv)?;
    Ok(())
}
