//! Central finite differences against the tape gradient of the full
//! objective for a tiny model.

use msdcda::losses::KernelConfig;
use msdcda::model::{ModelConfig, MsDcdaModel};
use msdcda::ndiff::{Graph, Matrix};
use msdcda::trainer::{self, Batch, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> msdcda::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut normal = |r, c| Matrix::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
    let batch = Batch {
        // two sources plus the ensemble batch
        sources: vec![normal(4, 6), normal(4, 6), normal(4, 6)],
        source_labels: vec![vec![0, 1, 2, 0], vec![2, 2, 1, 0], vec![1, 0, 2, 2]],
        target: normal(4, 6),
    };
    let mut model = MsDcdaModel::new(ModelConfig::new(6, 2, 3), 7)?;
    let cfg = TrainConfig {
        kernel: KernelConfig {
            bandwidth_grad: true,
            ..KernelConfig::default()
        },
        confidence_threshold: 0.0,
        ..TrainConfig::for_classes(3)
    };
    let (alpha, beta, tau) = (0.5, 0.05, 0.3);

    let mut g = Graph::new();
    let terms = trainer::loss_terms(&mut g, &mut model, &batch, &cfg, None)?;
    let pseudo = terms.pseudo.clone();
    let loss = trainer::assemble(&mut g, &terms, &cfg, alpha, beta, tau)?;
    model.store.zero_grad();
    g.backward(loss, &mut model.store)?;

    let h = 1e-5;
    let mut pick = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let (rows, cols) = model.store.grad(id).dim();
        let (r, c) = (pick.random_range(0..rows), pick.random_range(0..cols));
        let analytic = model.store.grad(id)[[r, c]];
        let orig = model.store.get(id).value[[r, c]];
        let mut at = |d: f64| -> msdcda::Result<f64> {
            model.store.get_mut(id).value[[r, c]] = orig + d;
            let mut g = Graph::new();
            let t = trainer::loss_terms(&mut g, &mut model, &batch, &cfg, Some(&pseudo))?;
            let l = trainer::assemble(&mut g, &t, &cfg, alpha, beta, tau)?;
            model.store.get_mut(id).value[[r, c]] = orig;
            Ok(g.scalar(l))
        };
        let numeric = (at(h)? - at(-h)?) / (2.0 * h);
        println!(
            "{:<28} [{r},{c}] analytic {analytic:>12.4e} numeric {numeric:>12.4e}",
            model.store.get(id).name
        );
    }
    Ok(())
}
