//! Runs the forgetting experiment and prints the headline comparisons.
//!
//! ```text
//! cargo run --release -p moe-lpr --example forgetting -- [scale] [out-dir]
//! ```
//!
//! `scale` multiplies every stage's step count (default 1.0).

use std::path::PathBuf;
use std::time::Instant;

use moe_lpr::data::Role;
use moe_lpr::pipeline::{forgetting_experiment, CellKind, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let scale: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let out = args.next().map(PathBuf::from);

    let mut cfg = ExperimentConfig::default();
    for stage in [
        &mut cfg.pretrain,
        &mut cfg.dense_finetune,
        &mut cfg.stage1,
        &mut cfg.stage2,
    ] {
        stage.steps = ((stage.steps as f64 * scale).round() as usize).max(1);
    }
    let start = Instant::now();
    let report = forgetting_experiment(&cfg)?;
    println!("finished in {:.1?}", start.elapsed());

    for kind in CellKind::ALL {
        let Some(cell) = report.cell(kind) else { continue };
        if let Some(f) = &cell.failure {
            println!("{kind:>20}: FAILED {f}");
            continue;
        }
        let loss = |r| report.loss(kind, r).unwrap_or(f64::NAN);
        let routing = cell.routing.as_ref();
        let g0 = |r| routing.and_then(|s| s.mean_g0(r)).unwrap_or(f64::NAN);
        let top1 = |r| routing.and_then(|s| s.top1_rate(r)).unwrap_or(f64::NAN);
        println!(
            "{kind:>20}: loss orig {:.4} expd {:.4} | G0 orig {:.3} expd {:.3} | top1 orig {:.3} expd {:.3}",
            loss(Role::Original),
            loss(Role::Expanded),
            g0(Role::Original),
            g0(Role::Expanded),
            top1(Role::Original),
            top1(Role::Expanded),
        );
    }
    if let Some(r) = report.replay {
        println!(
            "replay: {} original tokens against {} stage-1 tokens ({:.3}%)",
            r.review_original_tokens,
            r.stage1_tokens,
            100.0 * r.fraction
        );
    }
    if let Some(dir) = out {
        report.write_dir(&dir)?;
    }
    Ok(())
}
