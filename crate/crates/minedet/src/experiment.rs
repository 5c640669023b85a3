//! Config-driven experiment runner: the baseline / mining / hard-negative
//! matrix and the tau / policy / learning-rate ablations, emitting per-seed
//! and seed-averaged FROC CSVs plus a markdown report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::save_checkpoint;
use crate::eval::{evaluate_detector, froc_csv, EvalError, FrocCurve};
use crate::mining::{
    mine_hard_negatives, train, train_from, MiningConfig, MiningError, Policy, TrainOutcome,
};
use crate::phantom::{load_dataset, mix_seed, Dataset, PhantomError, PhantomSpec, SplitCounts};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config at {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which experiment the runner reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentTag {
    #[serde(rename = "baseline-R")]
    BaselineR,
    #[serde(rename = "mining-R+P+")]
    MiningRP,
    #[serde(rename = "hardneg-R+P+P-")]
    HardNegRPP,
    #[serde(rename = "ablate-tau")]
    AblateTau,
    #[serde(rename = "ablate-policy")]
    AblatePolicy,
    #[serde(rename = "ablate-lr")]
    AblateLr,
}

impl fmt::Display for ExperimentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExperimentTag::BaselineR => "baseline-R",
            ExperimentTag::MiningRP => "mining-R+P+",
            ExperimentTag::HardNegRPP => "hardneg-R+P+P-",
            ExperimentTag::AblateTau => "ablate-tau",
            ExperimentTag::AblatePolicy => "ablate-policy",
            ExperimentTag::AblateLr => "ablate-lr",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub counts: SplitCounts,
    /// Fraction of training lesions hidden from the training path.
    pub hide_rate: f64,
    pub mining: MiningConfig,
    pub tag: ExperimentTag,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Load the dataset from this directory instead of generating it.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Score threshold for hard-negative mining (the P- stage).
    pub hardneg_score_thresh: f64,
    /// Max IoU with ground truth for a prediction to count as a hard negative.
    pub hardneg_iou_thresh: f64,
    /// Confidence-filter values for the tau ablation.
    pub tau_values: Vec<f64>,
    /// Warm-start length for the learning-rate ablation.
    pub warmstart_iterations: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            counts: SplitCounts::default(),
            hide_rate: 0.5,
            mining: MiningConfig {
                iterations: 20000,
                ..MiningConfig::default()
            },
            tag: ExperimentTag::MiningRP,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            hardneg_score_thresh: 0.9,
            hardneg_iou_thresh: 0.3,
            tau_values: vec![0.95, 0.9, 0.85, 0.8],
            warmstart_iterations: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::InvalidConfig {
                field: "seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        if !(0.0..1.0).contains(&self.hide_rate) {
            return Err(ExperimentError::InvalidConfig {
                field: "hide_rate".into(),
                reason: format!("{} outside [0, 1)", self.hide_rate),
            });
        }
        if self.mining.tau <= 0.0 || self.mining.tau >= 1.0 {
            return Err(ExperimentError::InvalidConfig {
                field: "mining.tau".into(),
                reason: format!("{} outside (0, 1)", self.mining.tau),
            });
        }
        if self.mining.ema_momentum <= 0.0 || self.mining.ema_momentum >= 1.0 {
            return Err(ExperimentError::InvalidConfig {
                field: "mining.ema_momentum".into(),
                reason: format!("{} outside (0, 1)", self.mining.ema_momentum),
            });
        }
        if self.mining.resize_range.0 > self.mining.resize_range.1 {
            return Err(ExperimentError::InvalidConfig {
                field: "mining.resize_range".into(),
                reason: "low end exceeds high end".into(),
            });
        }
        self.phantom
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig {
                field: "phantom".into(),
                reason: e.to_string(),
            })?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Resolved-config dump with every default explicit.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of the resolved config.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn dataset_for_seed(&self, seed: u64) -> Result<Dataset, ExperimentError> {
        match &self.data_dir {
            Some(dir) => {
                let (dataset, _, _, _) = load_dataset(dir)?;
                Ok(dataset)
            }
            None => Ok(Dataset::generate(
                &self.phantom,
                &self.counts,
                self.hide_rate,
                seed,
            )?),
        }
    }
}

/// The small fixed configuration used as the standard phantom benchmark; the
/// qualitative-ordering checks run on this preset with 50% of the training
/// annotations hidden.
pub fn benchmark_config() -> ExperimentConfig {
    ExperimentConfig {
        phantom: PhantomSpec {
            width: 32,
            height: 32,
            depth: 8,
            lesion_count: (2, 3),
            sigma_xy: (2.4, 3.4),
            sigma_z: (0.7, 1.5),
            amplitude: (0.45, 0.95),
            background_level: 0.15,
            noise_sigma: 0.04,
            clutter_sigma: 0.08,
            distractor_count: (2, 3),
            distractor_amplitude: (0.5, 0.95),
            seed: 0xbe9c,
        },
        counts: SplitCounts {
            train: 384,
            train_full: 6,
            val: 16,
            test: 32,
        },
        hide_rate: 0.5,
        mining: MiningConfig {
            iterations: 3000,
            batch_size: 2,
            ..MiningConfig::default()
        },
        tag: ExperimentTag::MiningRP,
        seeds: vec![1, 2, 3],
        out_dir: PathBuf::from("runs/benchmark"),
        data_dir: None,
        hardneg_score_thresh: 0.9,
        hardneg_iou_thresh: 0.3,
        tau_values: vec![0.95, 0.9, 0.85, 0.8],
        warmstart_iterations: 1500,
    }
}

/// Train on the partial training split, return the best-validation teacher
/// and its test-set FROC curve.
pub fn train_and_eval(
    dataset: &Dataset,
    cfg: &MiningConfig,
) -> Result<(TrainOutcome, FrocCurve), ExperimentError> {
    let outcome = train(&dataset.train, &dataset.val, cfg)?;
    let curve = evaluate_detector(&outcome.teacher, &cfg.grid, &dataset.test, &cfg.eval)?;
    Ok((outcome, curve))
}

/// The P- stage: mine hard negatives on the fully annotated subset with the
/// stage-one teacher, then retrain from that teacher on the partial split
/// plus the fully annotated subset.
pub fn hardneg_stage(
    dataset: &Dataset,
    stage_one: &TrainOutcome,
    cfg: &MiningConfig,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<(TrainOutcome, FrocCurve), ExperimentError> {
    let full_pairs: Vec<_> = dataset
        .train_full
        .iter()
        .map(|tv| (tv.volume.clone(), tv.annotations.clone()))
        .collect();
    let negatives = mine_hard_negatives(
        &stage_one.teacher,
        &full_pairs,
        score_thresh,
        iou_thresh,
        cfg.eval.nms_iou,
        &cfg.grid,
    )?;
    let mut retrain_set = dataset.clone();
    for (tv, negs) in retrain_set.train_full.iter_mut().zip(negatives) {
        tv.hard_negatives = negs;
    }
    let volumes = retrain_set.retrain_volumes();
    let outcome = train_from(&volumes, &dataset.val, cfg, Some(&stage_one.teacher))?;
    let curve = evaluate_detector(&outcome.teacher, &cfg.grid, &dataset.test, &cfg.eval)?;
    Ok((outcome, curve))
}

/// Seed-averaged FROC summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFroc {
    pub sensitivity_at: Vec<(f64, f64)>,
    pub avg_sensitivity: f64,
    pub ap: f64,
}

pub fn mean_froc(curves: &[FrocCurve]) -> MeanFroc {
    assert!(!curves.is_empty());
    let n = curves.len() as f64;
    let rates: Vec<f64> = curves[0].sensitivity_at.iter().map(|&(r, _)| r).collect();
    let sensitivity_at = rates
        .iter()
        .enumerate()
        .map(|(k, &rate)| {
            let mean = curves.iter().map(|c| c.sensitivity_at[k].1).sum::<f64>() / n;
            (rate, mean)
        })
        .collect();
    MeanFroc {
        sensitivity_at,
        avg_sensitivity: curves.iter().map(|c| c.avg_sensitivity).sum::<f64>() / n,
        ap: curves.iter().map(|c| c.ap).sum::<f64>() / n,
    }
}

fn mean_froc_csv(mean: &MeanFroc) -> String {
    let mut header: Vec<String> = mean
        .sensitivity_at
        .iter()
        .map(|(rate, _)| format!("fp_{rate}"))
        .collect();
    header.push("avg_sensitivity".into());
    header.push("ap".into());
    let mut row: Vec<String> = mean
        .sensitivity_at
        .iter()
        .map(|(_, s)| format!("{s:.6}"))
        .collect();
    row.push(format!("{:.6}", mean.avg_sensitivity));
    row.push(format!("{:.6}", mean.ap));
    format!("{}\n{}\n", header.join(","), row.join(","))
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub tag: ExperimentTag,
    pub config_hash: String,
    pub per_seed: Vec<(u64, FrocCurve)>,
    pub mean: MeanFroc,
    pub out_dir: PathBuf,
}

fn froc_table_row(label: &str, sens: &[(f64, f64)], avg: f64, ap: f64) -> String {
    let cells: Vec<String> = sens
        .iter()
        .map(|(_, s)| format!("{:.2}", s * 100.0))
        .collect();
    format!(
        "| {label} | {} | {:.2} | {:.2} |\n",
        cells.join(" | "),
        avg * 100.0,
        ap * 100.0
    )
}

fn froc_table_header(rates: &[(f64, f64)]) -> String {
    let rate_cells: Vec<String> = rates.iter().map(|(r, _)| format!("{r}")).collect();
    let mut s = format!("| Run | {} | AVG | AP |\n", rate_cells.join(" | "));
    s.push_str(&format!("|---{}|---|---|\n", "|---".repeat(rates.len())));
    s
}

/// Run one tagged experiment over all seeds: per-seed FROC CSVs, checkpoints
/// and train logs, a seed-averaged CSV, and a markdown summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    match cfg.tag {
        ExperimentTag::AblateTau | ExperimentTag::AblatePolicy | ExperimentTag::AblateLr => {
            return Err(ExperimentError::InvalidConfig {
                field: "tag".into(),
                reason: format!("{} is an ablation tag; use run_ablation_suite", cfg.tag),
            });
        }
        _ => {}
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json())?;
    let hash = cfg.hash();

    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let dataset = cfg.dataset_for_seed(seed)?;
        let mining = MiningConfig {
            seed: mix_seed(cfg.mining.seed, seed),
            policy: match cfg.tag {
                ExperimentTag::BaselineR => Policy::None,
                _ => cfg.mining.policy,
            },
            ..cfg.mining.clone()
        };
        let (outcome, curve) = match cfg.tag {
            ExperimentTag::BaselineR | ExperimentTag::MiningRP => {
                train_and_eval(&dataset, &mining)?
            }
            ExperimentTag::HardNegRPP => {
                let (stage_one, _) = train_and_eval(&dataset, &mining)?;
                hardneg_stage(
                    &dataset,
                    &stage_one,
                    &mining,
                    cfg.hardneg_score_thresh,
                    cfg.hardneg_iou_thresh,
                )?
            }
            _ => unreachable!("ablation tags rejected above"),
        };
        fs::write(
            cfg.out_dir.join(format!("froc_seed{seed}.csv")),
            froc_csv(&curve),
        )?;
        outcome
            .log
            .write_csv(&cfg.out_dir.join(format!("trainlog_seed{seed}.csv")))?;
        save_checkpoint(
            &cfg.out_dir.join(format!("model_seed{seed}.ckpt")),
            &outcome.teacher,
            seed,
            outcome.best_iteration as u64,
        )?;
        per_seed.push((seed, curve));
    }

    let mean = mean_froc(&per_seed.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
    fs::write(cfg.out_dir.join("froc_mean.csv"), mean_froc_csv(&mean))?;

    let mut md = format!("# Experiment: {}\n\n", cfg.tag);
    md.push_str(&format!("- config hash: `{hash}`\n"));
    md.push_str(&format!(
        "- seeds: {}\n",
        cfg.seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    md.push_str("- resolved config with all defaults: `config.json`\n\n");
    md.push_str("Sensitivity (%) at FPs per volume:\n\n");
    md.push_str(&froc_table_header(&mean.sensitivity_at));
    md.push_str(&froc_table_row(
        &format!("{} (mean)", cfg.tag),
        &mean.sensitivity_at,
        mean.avg_sensitivity,
        mean.ap,
    ));
    for (seed, curve) in &per_seed {
        md.push_str(&froc_table_row(
            &format!("seed {seed}"),
            &curve.sensitivity_at,
            curve.avg_sensitivity,
            curve.ap,
        ));
    }
    fs::write(cfg.out_dir.join("report.md"), &md)?;

    Ok(ExperimentReport {
        tag: cfg.tag,
        config_hash: hash,
        per_seed,
        mean,
        out_dir: cfg.out_dir.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<(u64, FrocCurve)>,
    pub mean: MeanFroc,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub tag: ExperimentTag,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    /// Hashes of the shared warm-start checkpoints (lr ablation only).
    pub warmstart_hashes: Vec<String>,
    pub out_dir: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}

/// Run one ablation axis over all seeds, emitting one row per arm.
pub fn run_ablation_suite(cfg: &ExperimentConfig) -> Result<AblationReport, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json())?;
    let hash = cfg.hash();
    let mut warmstart_hashes = Vec::new();

    let mut rows: Vec<AblationRow> = match cfg.tag {
        ExperimentTag::AblateTau => {
            let mut rows = Vec::new();
            for &tau in &cfg.tau_values {
                let mut per_seed = Vec::new();
                for &seed in &cfg.seeds {
                    let dataset = cfg.dataset_for_seed(seed)?;
                    let mining = MiningConfig {
                        tau,
                        policy: Policy::Adding,
                        seed: mix_seed(cfg.mining.seed, seed),
                        ..cfg.mining.clone()
                    };
                    let (_, curve) = train_and_eval(&dataset, &mining)?;
                    per_seed.push((seed, curve));
                }
                rows.push(make_row(format!("tau={tau}"), per_seed));
            }
            rows
        }
        ExperimentTag::AblatePolicy => {
            let mut rows = Vec::new();
            for policy in [Policy::Adding, Policy::Ignoring, Policy::None] {
                let mut per_seed = Vec::new();
                for &seed in &cfg.seeds {
                    let dataset = cfg.dataset_for_seed(seed)?;
                    let mining = MiningConfig {
                        policy,
                        seed: mix_seed(cfg.mining.seed, seed),
                        ..cfg.mining.clone()
                    };
                    let (_, curve) = train_and_eval(&dataset, &mining)?;
                    per_seed.push((seed, curve));
                }
                let label = match policy {
                    Policy::Adding => "Adding",
                    Policy::Ignoring => "Ignoring",
                    Policy::None => "None",
                };
                rows.push(make_row(label.to_string(), per_seed));
            }
            rows
        }
        ExperimentTag::AblateLr => {
            let mut constant = Vec::new();
            let mut decay = Vec::new();
            for &seed in &cfg.seeds {
                let dataset = cfg.dataset_for_seed(seed)?;
                let warm_cfg = MiningConfig {
                    iterations: cfg.warmstart_iterations,
                    policy: Policy::Adding,
                    seed: mix_seed(cfg.mining.seed, seed),
                    ..cfg.mining.clone()
                };
                let warm = train(&dataset.train, &dataset.val, &warm_cfg)?;
                let warm_path = cfg.out_dir.join(format!("warmstart_seed{seed}.ckpt"));
                save_checkpoint(
                    &warm_path,
                    &warm.final_teacher,
                    seed,
                    warm_cfg.iterations as u64,
                )?;
                // Both arms resume from the identical checkpoint.
                warmstart_hashes.push(sha256_file(&warm_path)?);
                for lr_decay in [false, true] {
                    let arm_cfg = MiningConfig {
                        lr_decay,
                        policy: Policy::Adding,
                        seed: mix_seed(mix_seed(cfg.mining.seed, seed), 0xa6),
                        ..cfg.mining.clone()
                    };
                    let outcome = train_from(
                        &dataset.train,
                        &dataset.val,
                        &arm_cfg,
                        Some(&warm.final_teacher),
                    )?;
                    let curve = evaluate_detector(
                        &outcome.teacher,
                        &arm_cfg.grid,
                        &dataset.test,
                        &arm_cfg.eval,
                    )?;
                    if lr_decay {
                        decay.push((seed, curve));
                    } else {
                        constant.push((seed, curve));
                    }
                }
            }
            vec![
                make_row("constant-lr".to_string(), constant),
                make_row("step-decay".to_string(), decay),
            ]
        }
        _ => {
            return Err(ExperimentError::InvalidConfig {
                field: "tag".into(),
                reason: format!("{} is not an ablation tag", cfg.tag),
            });
        }
    };

    // Per-row artifacts and the combined table.
    let mut table = String::from("label,avg_sensitivity,ap\n");
    for row in &mut rows {
        let dir = cfg.out_dir.join(&row.label);
        fs::create_dir_all(&dir)?;
        for (seed, curve) in &row.per_seed {
            fs::write(dir.join(format!("froc_seed{seed}.csv")), froc_csv(curve))?;
        }
        fs::write(dir.join("froc_mean.csv"), mean_froc_csv(&row.mean))?;
        table.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.label, row.mean.avg_sensitivity, row.mean.ap
        ));
    }
    fs::write(cfg.out_dir.join("ablation.csv"), &table)?;

    let mut md = format!("# Ablation: {}\n\n", cfg.tag);
    md.push_str(&format!("- config hash: `{hash}`\n"));
    md.push_str(&format!(
        "- seeds: {}\n",
        cfg.seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    if !warmstart_hashes.is_empty() {
        md.push_str(&format!(
            "- shared warm-start checkpoint hashes: {}\n",
            warmstart_hashes
                .iter()
                .map(|h| format!("`{h}`"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    md.push('\n');
    md.push_str("| Arm | AS (%) | AP (%) |\n|---|---|---|\n");
    for row in &rows {
        md.push_str(&format!(
            "| {} | {:.2} | {:.2} |\n",
            row.label,
            row.mean.avg_sensitivity * 100.0,
            row.mean.ap * 100.0
        ));
    }
    fs::write(cfg.out_dir.join("report.md"), &md)?;

    Ok(AblationReport {
        tag: cfg.tag,
        config_hash: hash,
        rows,
        warmstart_hashes,
        out_dir: cfg.out_dir.clone(),
    })
}

fn make_row(label: String, per_seed: Vec<(u64, FrocCurve)>) -> AblationRow {
    let mean = mean_froc(&per_seed.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>());
    AblationRow {
        label,
        per_seed,
        mean,
    }
}

/// Assemble a combined markdown report from every experiment directory under
/// `dir` that contains a `froc_mean.csv`.
pub fn combined_report(dir: &Path) -> Result<String, ExperimentError> {
    let mut rows: Vec<(String, Vec<String>, Vec<String>)> = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for entry in entries {
        let mean_path = entry.join("froc_mean.csv");
        if !mean_path.exists() {
            continue;
        }
        let text = fs::read_to_string(&mean_path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .unwrap_or_default()
            .split(',')
            .map(str::to_string)
            .collect();
        let values: Vec<String> = lines
            .next()
            .unwrap_or_default()
            .split(',')
            .map(str::to_string)
            .collect();
        let label = entry
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push((label, header, values));
    }
    let mut md = String::from("# Combined results\n\n");
    if let Some((_, header, _)) = rows.first() {
        md.push_str(&format!("| Run | {} |\n", header.join(" | ")));
        md.push_str(&format!("|---{}|\n", "|---".repeat(header.len())));
        for (label, _, values) in &rows {
            md.push_str(&format!("| {label} | {} |\n", values.join(" | ")));
        }
    } else {
        md.push_str("No experiment results found.\n");
    }
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
        benchmark_config().validate().unwrap();
    }

    #[test]
    fn bad_config_is_rejected_with_field_path() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        match cfg.validate() {
            Err(ExperimentError::InvalidConfig { field, .. }) => assert_eq!(field, "seeds"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = ExperimentConfig {
            hide_rate: 1.5,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = benchmark_config();
        let json = cfg.to_json();
        let parsed = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn tag_names_round_trip() {
        for tag in [
            ExperimentTag::BaselineR,
            ExperimentTag::MiningRP,
            ExperimentTag::HardNegRPP,
            ExperimentTag::AblateTau,
            ExperimentTag::AblatePolicy,
            ExperimentTag::AblateLr,
        ] {
            let json = serde_json::to_string(&tag).unwrap();
            let back: ExperimentTag = serde_json::from_str(&json).unwrap();
            assert_eq!(back, tag);
            assert_eq!(json, format!("\"{tag}\""));
        }
    }

    #[test]
    fn mean_froc_is_arithmetic_mean() {
        let mk = |ap: f64, s: f64| FrocCurve {
            points: vec![],
            sensitivity_at: vec![(0.5, s), (1.0, s)],
            avg_sensitivity: s,
            ap,
        };
        let mean = mean_froc(&[mk(0.2, 0.1), mk(0.4, 0.3)]);
        assert!((mean.ap - 0.3).abs() < 1e-12);
        assert!((mean.avg_sensitivity - 0.2).abs() < 1e-12);
        assert!((mean.sensitivity_at[0].1 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ablation_tag_rejected_by_run_experiment() {
        let cfg = ExperimentConfig {
            tag: ExperimentTag::AblateTau,
            ..ExperimentConfig::default()
        };
        assert!(matches!(
            run_experiment(&cfg),
            Err(ExperimentError::InvalidConfig { .. })
        ));
    }
}
