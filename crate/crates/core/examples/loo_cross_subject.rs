//! Leave-one-subject-out evaluation over a dataset on disk.
//!
//! Writes a small synthetic dataset (manifest plus one CSV per subject),
//! reloads it and runs every fold for two rounds.

use msdcda::dataio::{self, SyntheticSpec};
use msdcda::evalkit::{self, EvalConfig};
use msdcda::trainer::TrainConfig;

fn main() -> msdcda::Result<()> {
    let dir = std::env::temp_dir().join("msdcda-loo-example");
    dataio::write_synthetic_dataset(
        &SyntheticSpec {
            n_sources: 4,
            n_classes: 3,
            feature_dim: 10,
            samples_per_class: 30,
            class_separation: 3.0,
            domain_shift_scale: 4.0,
            rng_seed: 1,
        },
        &dir,
    )?;
    let manifest = dataio::load_manifest(&dir)?;
    let cfg = EvalConfig {
        rounds: 2,
        ..EvalConfig::new(TrainConfig {
            epochs: 10,
            ..TrainConfig::for_classes(manifest.n_classes)
        })
    };
    let reports = evalkit::loo_cross_subject(&manifest, &manifest.sessions[0], &cfg)?;
    let summary = evalkit::summarize("cross-subject", &reports)?;
    for row in &summary.per_fold {
        println!("{:<4} best {:.3}  mean {:.3}", row.fold, row.accuracy, row.accuracy_mean);
    }
    println!(
        "acc {:.3} ± {:.3}   acc-best {:.3} ± {:.3} (round {})",
        summary.acc_mean, summary.acc_std, summary.acc_best_mean, summary.acc_best_std, summary.best_round
    );
    let out = dir.join("report");
    evalkit::write_reports(&out, &summary, &reports)?;
    println!("reports in {}", out.display());
    Ok(())
}
