// Scratch harness for benchmark tuning; prints per-arm APs for one seed.

use std::time::Instant;

use minedet::experiment::{benchmark_config, train_and_eval};
use minedet::mining::{MiningConfig, Policy};
use minedet::phantom::{mix_seed, Dataset};

fn main() {
    let cfg = benchmark_config();
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let iters: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(cfg.mining.iterations);
    let lr: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(cfg.mining.lr);
    let bg_sample: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(cfg.mining.bg_sample);

    let t0 = Instant::now();
    let dataset = Dataset::generate(&cfg.phantom, &cfg.counts, cfg.hide_rate, seed).unwrap();
    println!("dataset generated in {:?}", t0.elapsed());
    let n_train_lesions: usize = dataset
        .train
        .iter()
        .map(|tv| tv.annotations.n_lesions())
        .sum();
    let n_hidden: usize = dataset
        .train
        .iter()
        .map(|tv| tv.annotations.oracle_hidden().len())
        .sum();
    println!("train lesions: {n_train_lesions} ({n_hidden} hidden)");

    let full_dataset = {
        let mut d = dataset.clone();
        for tv in &mut d.train {
            tv.annotations = tv.annotations.with_all_visible();
        }
        d
    };

    for (name, policy) in [
        ("oracle-full", Policy::None),
        ("baseline", Policy::None),
        ("mining", Policy::Adding),
        ("ignoring", Policy::Ignoring),
    ] {
        let mining = MiningConfig {
            policy,
            iterations: iters,
            lr,
            bg_sample,
            seed: mix_seed(cfg.mining.seed, seed),
            ..cfg.mining.clone()
        };
        let data = if name == "oracle-full" {
            &full_dataset
        } else {
            &dataset
        };
        let t = Instant::now();
        let (outcome, curve) = train_and_eval(data, &mining).unwrap();
        let mined_total: usize = outcome.log.steps.iter().map(|s| s.mined_count).sum();
        let val_trace: Vec<String> = outcome
            .log
            .vals
            .iter()
            .map(|v| format!("{}:{:.3}", v.iteration, v.ap))
            .collect();
        println!(
            "{name}: test AP {:.4} AS {:.4} | best val AP {:.4} @ {} | mined {} | {:?}",
            curve.ap,
            curve.avg_sensitivity,
            outcome.best_val_ap,
            outcome.best_iteration,
            mined_total,
            t.elapsed()
        );
        let step = (val_trace.len() / 24).max(1);
        let sampled: Vec<String> = val_trace.iter().step_by(step).cloned().collect();
        println!("  val trace: {}", sampled.join(" "));
        let loss_trace: Vec<String> = outcome
            .log
            .steps
            .iter()
            .step_by((iters / 12).max(1))
            .map(|s| format!("{}:{:.4}/{:.4}", s.iteration, s.cls_loss, s.reg_loss))
            .collect();
        println!("  loss trace: {}", loss_trace.join(" "));
        let mined_trace: Vec<String> = outcome
            .log
            .steps
            .iter()
            .step_by((iters / 12).max(1))
            .map(|s| format!("{}", s.mined_count))
            .collect();
        println!("  mined trace: {}", mined_trace.join(" "));

        // Raw score distribution of the trained teacher on one test volume.
        let probe_cfg = minedet::eval::EvalConfig {
            score_thresh: 0.0,
            ..mining.eval.clone()
        };
        let dets = minedet::eval::detect_volume(
            &outcome.final_teacher,
            &mining.grid,
            &dataset.test[0].0,
            &probe_cfg,
        )
        .unwrap();
        let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top: Vec<String> = scores.iter().take(8).map(|s| format!("{s:.3}")).collect();
        println!(
            "  final teacher on test[0] ({} gt3d): top scores {}",
            dataset.test[0].1.oracle_gt3d().len(),
            top.join(" ")
        );
        let sens: Vec<String> = curve
            .sensitivity_at
            .iter()
            .map(|(r, s)| format!("{r}:{s:.3}"))
            .collect();
        println!("  froc: {}", sens.join(" "));
        if let Some(last) = curve.points.last() {
            println!("  max point: fp/vol {:.2} sens {:.3}", last.0, last.1);
        }

        // Score distributions: where do train visible/hidden lesions and test
        // lesions sit relative to background detections?
        {
            let probe = minedet::eval::EvalConfig {
                score_thresh: 0.0,
                ..mining.eval.clone()
            };
            let mut vis = Vec::new();
            let mut hid = Vec::new();
            let mut bg = Vec::new();
            for tv in dataset.train.iter().take(8) {
                let dets = minedet::eval::detect_volume(
                    &outcome.final_teacher,
                    &mining.grid,
                    &tv.volume,
                    &probe,
                )
                .unwrap();
                let vis3d: Vec<_> = tv.annotations.visible().iter().map(|l| l.box3d).collect();
                let hid3d: Vec<_> = tv
                    .annotations
                    .oracle_hidden()
                    .iter()
                    .map(|l| l.box3d)
                    .collect();
                for d in dets {
                    let hit_v = vis3d
                        .iter()
                        .any(|g| minedet::geometry::p3d_iou(&d.box3d, g) >= 0.3);
                    let hit_h = hid3d
                        .iter()
                        .any(|g| minedet::geometry::p3d_iou(&d.box3d, g) >= 0.3);
                    if hit_v {
                        vis.push(d.score);
                    } else if hit_h {
                        hid.push(d.score);
                    } else {
                        bg.push(d.score);
                    }
                }
            }
            let summary = |v: &[f64]| {
                if v.is_empty() {
                    "none".to_string()
                } else {
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let max = v.iter().cloned().fold(f64::MIN, f64::max);
                    format!("n={} mean={mean:.3} max={max:.3}", v.len())
                }
            };
            println!(
                "  train scores: visible[{}] hidden[{}] bg[{}]",
                summary(&vis),
                summary(&hid),
                summary(&bg)
            );
        }

        // Mining quality of the final teacher: bucket mined boxes into
        // hidden-lesion hits, visible-lesion duplicates, and background.
        if policy != Policy::None {
            let mut hidden_hits = 0usize;
            let mut visible_dups = 0usize;
            let mut background = 0usize;
            let mut iter =
                minedet::phantom::BatchIter::new(&dataset.train, 8, mining.arch.stack_depth, 1)
                    .unwrap();
            for _ in 0..iter.batches_per_epoch() {
                let batch = iter.next_batch();
                let mined = minedet::mining::mine_batch(&outcome.final_teacher, &batch, &mining)
                    .unwrap();
                for (sample, dets) in batch.iter().zip(mined.per_element.iter()) {
                    for d in dets {
                        let hit_hidden = sample
                            .oracle_hidden_boxes()
                            .iter()
                            .any(|g| minedet::geometry::iou2d(&d.box2d, g) >= 0.3);
                        let dup_visible = sample
                            .visible_boxes
                            .iter()
                            .any(|g| minedet::geometry::iou2d(&d.box2d, g) > 0.0);
                        if hit_hidden {
                            hidden_hits += 1;
                        } else if dup_visible {
                            visible_dups += 1;
                        } else {
                            background += 1;
                        }
                    }
                }
            }
            println!(
                "  steady-state mining: {hidden_hits} hidden hits, {visible_dups} visible dups, {background} background"
            );
        }
    }
}
