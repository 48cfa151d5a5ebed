//! Cross-dataset transfer with label merging.
//!
//! One four-class synthetic population is split by subject into a training
//! dataset and a test dataset; every domain is folded onto three classes with
//! the default mapping before training.

use msdcda::dataio::{self, DatasetManifest, SyntheticSpec};
use msdcda::evalkit::{self, EvalConfig, SEED_IV_TO_SEED};
use msdcda::trainer::TrainConfig;

fn restrict(m: &DatasetManifest, keep: &[&str]) -> DatasetManifest {
    let mut out = m.clone();
    out.subjects.retain(|s| keep.contains(&s.as_str()));
    out
}

fn main() -> msdcda::Result<()> {
    let root = std::env::temp_dir().join("msdcda-transfer-example");
    dataio::write_synthetic_dataset(
        &SyntheticSpec {
            n_sources: 5,
            n_classes: 4,
            feature_dim: 10,
            samples_per_class: 20,
            class_separation: 3.0,
            domain_shift_scale: 3.0,
            rng_seed: 1,
        },
        &root,
    )?;
    let all = dataio::load_manifest(&root)?;
    let train_set = restrict(&all, &["S1", "S2", "S3", "S4"]);
    let test_set = restrict(&all, &["S5", "S6"]);

    let folds = evalkit::transfer_folds(&train_set, &test_set, Some("1"))?;
    let folds = evalkit::harmonise_classes(folds, &SEED_IV_TO_SEED, 3)?;
    let cfg = EvalConfig::new(TrainConfig {
        epochs: 10,
        ..TrainConfig::for_classes(3)
    });
    let reports = evalkit::run_folds(&folds, 3, &cfg)?;
    for r in &reports {
        println!("{:<4} acc {:.3}", r.fold_id, r.accuracy);
    }
    let s = evalkit::summarize("transfer", &reports)?;
    println!("mean {:.3} ± {:.3}", s.acc_mean, s.acc_std);
    Ok(())
}
