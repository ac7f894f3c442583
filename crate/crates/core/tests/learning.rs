//! Short training runs on a small phantom: the loss must go down.

use vseg::network::NetworkVariant;
use vseg::pipeline::{train, TrainConfig};
use vseg::sampler::EpochPlan;
use vseg::volume::{generate_phantom, PhantomSpec};

#[test]
fn second_epoch_loss_is_below_the_first() {
    let spec = PhantomSpec {
        size: [33; 3],
        seed: 4,
        contrast_gap: 1.0,
        noise_sigma: 5.0,
        smoothness: 3,
    };
    let volume = generate_phantom(&spec).unwrap().normalized().0;
    let config = TrainConfig {
        variant: NetworkVariant::TriplanarShared,
        plan: EpochPlan {
            samples_per_class: 50,
            epochs: 2,
            seed: 3,
        },
        batch_size: 30,
        ..TrainConfig::default()
    };
    let outcome = train(&[volume], &config).unwrap();
    let [first, last] = outcome.epoch_losses[..] else {
        panic!("expected two epochs, got {:?}", outcome.epoch_losses);
    };
    assert_eq!(outcome.batch_losses.len(), 10);
    assert!(last < first, "epoch losses {first} -> {last}");
}
