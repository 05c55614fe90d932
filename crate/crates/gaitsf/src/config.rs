//! Flat `key = value` run configuration with documented defaults, strict
//! unknown-key rejection, and `--set` style overrides.

use crate::error::{Error, Result};
use crate::memory::MomentumSchedule;
use crate::silhouette::Condition;

/// Every tunable of the workflow. Field defaults mirror the reference
/// hyperparameters; `entries()` documents them for `--help`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub n_subjects: u32,
    pub pretrain_subjects: u32,
    pub views: Vec<u16>,
    pub conditions: Vec<Condition>,
    pub seqs_per_cell: u32,
    pub frames_per_seq: u32,
    pub seed: u64,
    // encoder
    pub parts: usize,
    pub dim: usize,
    // pre-training
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    // shared training
    pub batch_clusters: usize,
    pub batch_members: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub knn: usize,
    pub tau: f64,
    pub momentum: f64,
    pub momentum_schedule: String,
    pub momentum_max: f64,
    pub momentum_min: f64,
    pub renormalize: bool,
    pub frames_per_pass: usize,
    pub checkpoint_every: usize,
    // baseline stage
    pub baseline_epochs: usize,
    pub baseline_iters: usize,
    pub s_up_baseline: f64,
    // selective-fusion stage
    pub sf_epochs: usize,
    pub sf_iters: usize,
    pub s_up_sf: f64,
    pub support_size: usize,
    pub c_low: f64,
    pub s_o: f64,
    pub lambda_base: f64,
    pub s_c_floor: f64,
    pub view_flags: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_subjects: 40,
            pretrain_subjects: 20,
            views: vec![0, 45, 90, 135, 180],
            conditions: vec![Condition::Nm, Condition::Cl],
            seqs_per_cell: 2,
            frames_per_seq: 30,
            seed: 1,
            parts: 8,
            dim: 16,
            pretrain_epochs: 20,
            pretrain_lr: 0.1,
            batch_clusters: 8,
            batch_members: 16,
            lr: 0.05,
            weight_decay: 5e-4,
            milestones: vec![],
            knn: 10,
            tau: 0.05,
            momentum: 0.2,
            momentum_schedule: "fixed".into(),
            momentum_max: 0.5,
            momentum_min: 0.1,
            renormalize: true,
            frames_per_pass: 30,
            checkpoint_every: 10,
            baseline_epochs: 50,
            baseline_iters: 50,
            s_up_baseline: 0.7,
            sf_epochs: 50,
            sf_iters: 100,
            s_up_sf: 0.3,
            support_size: 2,
            c_low: 0.8,
            s_o: 0.7,
            lambda_base: 0.005,
            s_c_floor: 0.0,
            view_flags: "classifier".into(),
        }
    }
}

/// One documented config key.
pub struct ConfigEntry {
    pub key: &'static str,
    pub default: String,
    pub doc: &'static str,
}

impl RunConfig {
    /// Keys, defaults, and documentation, in canonical order. The parser and
    /// this table are kept consistent by the `set` round-trip test.
    pub fn entries() -> Vec<ConfigEntry> {
        let d = RunConfig::default();
        let e = |key, default: String, doc| ConfigEntry { key, default, doc };
        vec![
            e("n_subjects", d.n_subjects.to_string(), "training-split subjects"),
            e("pretrain_subjects", d.pretrain_subjects.to_string(), "labeled pre-train subjects"),
            e("views", join(&d.views), "camera views in degrees, comma separated"),
            e(
                "conditions",
                d.conditions.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(","),
                "walking conditions (NM,BG,CL subset)",
            ),
            e("seqs_per_cell", d.seqs_per_cell.to_string(), "sequences per (subject, condition, view)"),
            e("frames_per_seq", d.frames_per_seq.to_string(), "frames rendered per sequence"),
            e("seed", d.seed.to_string(), "master rng seed"),
            e("parts", d.parts.to_string(), "horizontal body parts (must divide 64)"),
            e("dim", d.dim.to_string(), "features per part"),
            e("pretrain_epochs", d.pretrain_epochs.to_string(), "supervised pre-training epochs"),
            e("pretrain_lr", fmt(d.pretrain_lr), "pre-training learning rate"),
            e("batch_clusters", d.batch_clusters.to_string(), "clusters per batch (B_S)"),
            e("batch_members", d.batch_members.to_string(), "sequences per cluster (B_T)"),
            e("lr", fmt(d.lr), "unsupervised learning rate"),
            e("weight_decay", fmt(d.weight_decay), "SGD weight decay"),
            e("milestones", join(&d.milestones), "global iterations where lr drops x0.1"),
            e("knn", d.knn.to_string(), "neighbors per node in the KNN graph (n)"),
            e("tau", fmt(d.tau), "ClusterNCE temperature"),
            e("momentum", fmt(d.momentum), "memory momentum m (fixed schedule)"),
            e("momentum_schedule", d.momentum_schedule.clone(), "fixed | cosine"),
            e("momentum_max", fmt(d.momentum_max), "cosine schedule m_max"),
            e("momentum_min", fmt(d.momentum_min), "cosine schedule m_min"),
            e("renormalize", d.renormalize.to_string(), "re-normalize centroids after updates"),
            e("frames_per_pass", d.frames_per_pass.to_string(), "frames sampled per sequence per epoch"),
            e("checkpoint_every", d.checkpoint_every.to_string(), "epochs between mid-stage checkpoints (0 = off)"),
            e("baseline_epochs", d.baseline_epochs.to_string(), "baseline stage epochs"),
            e("baseline_iters", d.baseline_iters.to_string(), "baseline iterations per epoch"),
            e("s_up_baseline", fmt(d.s_up_baseline), "graph pruning threshold, baseline"),
            e("sf_epochs", d.sf_epochs.to_string(), "selective-fusion stage epochs"),
            e("sf_iters", d.sf_iters.to_string(), "selective-fusion iterations per epoch"),
            e("s_up_sf", fmt(d.s_up_sf), "graph pruning threshold, selective fusion"),
            e("support_size", d.support_size.to_string(), "support set size a"),
            e("c_low", fmt(d.c_low), "FVC member-fraction threshold"),
            e("s_o", fmt(d.s_o), "initial curriculum threshold"),
            e("lambda_base", fmt(d.lambda_base), "curriculum base rate"),
            e("s_c_floor", fmt(d.s_c_floor), "curriculum threshold floor"),
            e("view_flags", d.view_flags.clone(), "none | oracle | classifier"),
        ]
    }

    /// Parse a config file body; line numbers are 1-based in errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config { line: i + 1, reason: format!("expected `key = value`, got `{line}`") });
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config { line: i + 1, reason: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: String| Error::invalid("config", reason);
        macro_rules! num {
            ($field:ident) => {
                self.$field = value
                    .parse()
                    .map_err(|_| bad(format!("{key}: cannot parse `{value}`")))?
            };
        }
        match key {
            "n_subjects" => num!(n_subjects),
            "pretrain_subjects" => num!(pretrain_subjects),
            "views" => self.views = parse_list(value).map_err(bad)?,
            "conditions" => {
                self.conditions = value
                    .split(',')
                    .map(|c| Condition::parse(c.trim()))
                    .collect::<Result<_>>()?
            }
            "seqs_per_cell" => num!(seqs_per_cell),
            "frames_per_seq" => num!(frames_per_seq),
            "seed" => num!(seed),
            "parts" => num!(parts),
            "dim" => num!(dim),
            "pretrain_epochs" => num!(pretrain_epochs),
            "pretrain_lr" => num!(pretrain_lr),
            "batch_clusters" => num!(batch_clusters),
            "batch_members" => num!(batch_members),
            "lr" => num!(lr),
            "weight_decay" => num!(weight_decay),
            "milestones" => self.milestones = parse_list(value).map_err(bad)?,
            "knn" => num!(knn),
            "tau" => num!(tau),
            "momentum" => num!(momentum),
            "momentum_schedule" => self.momentum_schedule = value.to_string(),
            "momentum_max" => num!(momentum_max),
            "momentum_min" => num!(momentum_min),
            "renormalize" => num!(renormalize),
            "frames_per_pass" => num!(frames_per_pass),
            "checkpoint_every" => num!(checkpoint_every),
            "baseline_epochs" => num!(baseline_epochs),
            "baseline_iters" => num!(baseline_iters),
            "s_up_baseline" => num!(s_up_baseline),
            "sf_epochs" => num!(sf_epochs),
            "sf_iters" => num!(sf_iters),
            "s_up_sf" => num!(s_up_sf),
            "support_size" => num!(support_size),
            "c_low" => num!(c_low),
            "s_o" => num!(s_o),
            "lambda_base" => num!(lambda_base),
            "s_c_floor" => num!(s_c_floor),
            "view_flags" => self.view_flags = value.to_string(),
            _ => return Err(bad(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() || self.conditions.is_empty() {
            return Err(Error::invalid("config", "views and conditions must be nonempty"));
        }
        if !matches!(self.momentum_schedule.as_str(), "fixed" | "cosine") {
            return Err(Error::invalid("config", "momentum_schedule must be fixed or cosine"));
        }
        if !matches!(self.view_flags.as_str(), "none" | "oracle" | "classifier") {
            return Err(Error::invalid("config", "view_flags must be none, oracle, or classifier"));
        }
        self.momentum_for(1).validate()?;
        Ok(())
    }

    /// Momentum schedule for a stage with the given iterations per epoch.
    pub fn momentum_for(&self, iters_per_epoch: usize) -> MomentumSchedule {
        match self.momentum_schedule.as_str() {
            "cosine" => MomentumSchedule::Cosine {
                m_max: self.momentum_max,
                m_min: self.momentum_min,
                steps_per_epoch: iters_per_epoch.max(1) as u64,
            },
            _ => MomentumSchedule::Fixed { m: self.momentum },
        }
    }
}

fn fmt(v: f64) -> String {
    // keep defaults readable (0.0005 not 5e-4 notation mismatch on reparse)
    format!("{v}")
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("cannot parse list item `{x}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_as_empty_file() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::parse("# only a comment\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn parses_keys_comments_and_overrides() {
        let cfg = RunConfig::parse(
            "n_subjects = 8   # small run\nviews = 0,90\nlr=0.01\nconditions = NM , CL\nmilestones = 100, 200\n",
        )
        .unwrap();
        assert_eq!(cfg.n_subjects, 8);
        assert_eq!(cfg.views, vec![0, 90]);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.conditions, vec![Condition::Nm, Condition::Cl]);
        assert_eq!(cfg.milestones, vec![100, 200]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("lr = 0.1\nbogus_key = 3\n").unwrap_err();
        match err {
            Error::Config { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("bogus_key"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::parse("not a kv line\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = RunConfig::parse("lr = banana\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn entries_and_set_are_consistent() {
        // every documented default re-applies through set() and reproduces
        // the default config; guards entries() against drift
        let mut cfg = RunConfig::default();
        for entry in RunConfig::entries() {
            cfg.set(entry.key, &entry.default).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::entries().len(), 37);
    }

    #[test]
    fn validate_rejects_bad_enums() {
        let mut cfg = RunConfig::default();
        cfg.set("momentum_schedule", "linear").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("view_flags", "psychic").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn momentum_schedule_selection() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.momentum_for(100), MomentumSchedule::Fixed { m: 0.2 });
        cfg.set("momentum_schedule", "cosine").unwrap();
        assert_eq!(
            cfg.momentum_for(100),
            MomentumSchedule::Cosine { m_max: 0.5, m_min: 0.1, steps_per_epoch: 100 }
        );
    }
}
