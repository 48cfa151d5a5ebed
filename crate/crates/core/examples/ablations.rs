//! Loss-term and DISC:MMD ratio ablations on synthetic folds.

use msdcda::dataio::SyntheticSpec;
use msdcda::evalkit::{self, AblationReport, EvalConfig, Fold};
use msdcda::trainer::TrainConfig;

fn show(report: &AblationReport) {
    println!("{}", report.study);
    for row in &report.rows {
        println!("  {:<10} {:.3} ± {:.3}", row.label, row.summary.acc_mean, row.summary.acc_std);
    }
}

fn main() -> msdcda::Result<()> {
    let folds = (0..3)
        .map(|seed| {
            Fold::synthetic(&SyntheticSpec {
                n_sources: 4,
                n_classes: 3,
                feature_dim: 20,
                samples_per_class: 50,
                class_separation: 3.0,
                domain_shift_scale: 12.0,
                rng_seed: seed,
            })
        })
        .collect::<msdcda::Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        jobs: 3,
        ..EvalConfig::new(TrainConfig {
            epochs: 15,
            ..TrainConfig::for_classes(3)
        })
    };

    let losses = evalkit::ablate_losses(&folds, 3, &cfg)?;
    show(&losses);
    println!("  SCD ordering holds: {:?}", losses.scd_ordering_holds);

    let ratios = evalkit::parse_ratios("1:9,1:1,9:1,dynamic")?;
    show(&evalkit::ablate_ratio(&folds, 3, &cfg, &ratios)?);
    Ok(())
}
