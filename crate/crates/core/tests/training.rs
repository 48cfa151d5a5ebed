use msdcda::dataio::{generate_synthetic, SyntheticSpec};
use msdcda::losses;
use msdcda::model::{ModelConfig, MsDcdaModel};
use msdcda::ndiff::{AdamState, Graph, Matrix};
use msdcda::trainer::{self, Batch, LossKind, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        n_sources: 2,
        n_classes: 3,
        feature_dim: 8,
        samples_per_class: 20,
        class_separation: 3.0,
        domain_shift_scale: 2.0,
        rng_seed: 5,
    }
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn cross_entropy_falls_during_training() {
    let (sources, target) = generate_synthetic(&spec()).unwrap();
    let model = MsDcdaModel::new(ModelConfig::new(8, 2, 3), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        ..TrainConfig::for_classes(3)
    };
    let report = trainer::train(model, &sources, &target.unlabeled(), &cfg).unwrap();
    let ce: Vec<f64> = report.loss_log.iter().map(|b| b.ce).collect();
    let w = ce.len() / 5;
    assert!(window_mean(&ce[ce.len() - w..]) < 0.5 * window_mean(&ce[..w]));
    assert!(report.loss_log.iter().all(|b| (0.0..=1.0).contains(&b.tau)));
    assert_eq!(report.loss_log.len() as u64, report.iterations);
}

#[test]
fn disabled_losses_report_zero() {
    let (sources, target) = generate_synthetic(&spec()).unwrap();
    let model = MsDcdaModel::new(ModelConfig::new(8, 2, 3), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        disabled_losses: [LossKind::Scd, LossKind::Disc].into_iter().collect(),
        ..TrainConfig::for_classes(3)
    };
    let report = trainer::train(model, &sources, &target.unlabeled(), &cfg).unwrap();
    assert!(report.loss_log.iter().all(|b| b.scd == 0.0 && b.disc == 0.0));
    assert!(report.loss_log.iter().any(|b| b.mmd > 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (sources, target) = generate_synthetic(&spec()).unwrap();
    let model = MsDcdaModel::new(ModelConfig::new(8, 2, 3), 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::for_classes(3)
    };
    let trained = trainer::train(model, &sources, &target.unlabeled(), &cfg).unwrap().final_model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    trained.save(&path).unwrap();
    let loaded = MsDcdaModel::load(&path).unwrap();
    assert_eq!(trained.predict(&target.values).unwrap(), loaded.predict(&target.values).unwrap());
}

/// Shuffle-per-epoch, reshuffle-on-exhaustion row order.
struct Rows {
    order: Vec<usize>,
    pos: usize,
}

impl Rows {
    fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[test]
fn ce_only_run_matches_a_plain_classifier_loop() {
    let (sources, target) = generate_synthetic(&spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        disabled_losses: LossKind::ALL.into_iter().collect(),
        ..TrainConfig::for_classes(3)
    };
    let init = MsDcdaModel::new(ModelConfig::new(8, 2, 3), 4).unwrap();
    let trained = trainer::train(init.clone(), &sources, &target.unlabeled(), &cfg).unwrap().final_model;

    let mut model = init;
    let domains: Vec<_> = sources.domains().collect();
    let largest = domains.iter().map(|d| d.rows()).chain([target.rows()]).max().unwrap();
    let per_epoch = largest.div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut streams: Vec<Rows> = domains
        .iter()
        .map(|d| d.rows())
        .chain([target.rows()])
        .map(|n| Rows { order: (0..n).collect(), pos: n })
        .collect();
    let mut adam = AdamState::new(&model.store, cfg.lr);
    for _ in 0..cfg.epochs {
        for s in &mut streams {
            s.order.shuffle(&mut rng);
            s.pos = 0;
        }
        for _ in 0..per_epoch {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (d, s) in domains.iter().zip(&mut streams) {
                let idx = s.next(cfg.batch_size, &mut rng);
                xs.push(d.select_rows(&idx));
                ys.push(idx.iter().map(|&i| d.labels().unwrap()[i]).collect::<Vec<_>>());
            }
            let xt = target.select_rows(&streams.last_mut().unwrap().next(cfg.batch_size, &mut rng));
            let mut g = Graph::new();
            let out = model.forward(&mut g, &xs, &xt).unwrap();
            let labels: Vec<&[usize]> = ys.iter().map(Vec::as_slice).collect();
            let ce = losses::cross_entropy(&mut g, &out.probs_source, &labels).unwrap();
            let loss = g.lin_comb(&[(1.0, ce)]).unwrap();
            model.store.zero_grad();
            g.backward(loss, &mut model.store).unwrap();
            adam.step(&mut model.store).unwrap();
        }
    }
    for (a, b) in trained.store.iter().zip(model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value, "{} diverged", a.name);
    }
}

#[test]
fn every_loss_term_reaches_the_common_extractor() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |r: usize, c: usize| Matrix::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
        let batch = Batch {
            sources: vec![normal(8, 6), normal(8, 6), normal(8, 6)],
            source_labels: vec![vec![0, 1, 2, 0, 1, 2, 0, 1]; 3],
            target: normal(8, 6),
        };
        let cfg = TrainConfig {
            confidence_threshold: 0.0,
            ..TrainConfig::for_classes(3)
        };
        let mut model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), seed).unwrap();
        let mut g = Graph::new();
        let terms = trainer::loss_terms(&mut g, &mut model, &batch, &cfg, None).unwrap();
        let named = [("ce", terms.ce), ("mmd", terms.mmd), ("scd", terms.scd.unwrap()), ("disc", terms.disc.unwrap())];
        for (name, v) in named {
            model.store.zero_grad();
            g.backward(v, &mut model.store).unwrap();
            let norm: f64 = model
                .store
                .iter()
                .filter(|p| p.name.starts_with("cfe."))
                .map(|p| p.grad.iter().map(|x| x * x).sum::<f64>())
                .sum();
            assert!(norm > 0.0, "seed {seed}: {name} leaves the extractor untouched");
        }
    }
}

#[test]
fn reloaded_checkpoint_trains_with_batch_statistics() {
    let (sources, target) = generate_synthetic(&spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::for_classes(3)
    };
    let fresh = MsDcdaModel::new(ModelConfig::new(8, 2, 3), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    fresh.save(&path).unwrap();
    let loaded = MsDcdaModel::load(&path).unwrap();
    let a = trainer::train(fresh, &sources, &target.unlabeled(), &cfg).unwrap();
    let b = trainer::train(loaded, &sources, &target.unlabeled(), &cfg).unwrap();
    assert_eq!(a.loss_log, b.loss_log);
}
