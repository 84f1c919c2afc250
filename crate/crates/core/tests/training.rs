use std::collections::BTreeSet;

use formstruct::document::{generate_synthetic, SynthConfig};
use formstruct::model::{HierarchyModel, ModelConfig};
use formstruct::training::{sample_negative_indices, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn twenty_pages_thirty_epochs_drive_the_loss_down() {
    let data = generate_synthetic(&SynthConfig::default(), 17).unwrap();
    assert_eq!(data.pages.len(), 20);
    let cfg = TrainConfig {
        epochs: 30,
        seed: 17,
        ..TrainConfig::default()
    };
    let mut model = HierarchyModel::new(&ModelConfig::default(), 17).unwrap();
    let pages = model.prepare_all(&data.pages).unwrap();
    let mut trainer = Trainer::new(&model, &cfg).unwrap();
    trainer.run(&mut model, &pages, None, |_, _| Ok(())).unwrap();
    let last = trainer.history().last().unwrap();
    let bound = 0.2 * ((cfg.negatives + 1) as f64).ln();
    assert!(last.loss < bound, "final mean edge loss {} >= {bound}", last.loss);
    assert_eq!(last.skipped_edges, 0);
}

#[test]
fn sampled_negatives_never_include_a_gold_parent() {
    let data = generate_synthetic(&SynthConfig::default(), 5).unwrap();
    let model = HierarchyModel::new(&ModelConfig::with_modalities(formstruct::fusion::Modalities::L), 5).unwrap();
    let pages = model.prepare_all(&data.pages).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut drawn = 0;
    for _ in 0..20 {
        for page in &pages {
            for &(_, child) in &page.edges {
                let gold = &page.gold_parents[child];
                let negs = sample_negative_indices(page.len(), child, gold, 10, &mut rng);
                let unique: BTreeSet<usize> = negs.iter().copied().collect();
                assert_eq!(unique.len(), negs.len());
                assert!(negs.iter().all(|k| *k != child && !gold.contains(k)));
                assert_eq!(negs.len(), 10.min(page.len() - 1 - gold.len()));
                drawn += negs.len();
            }
        }
    }
    assert!(drawn > 0);
}
