use dsm_core::train::train;
use dsm_core::{LossWeights, TrainConfig};

#[test]
fn regularizer_only_training_lowers_initial_loss_each_epoch() {
    let cfg = TrainConfig {
        weights: LossWeights::l1_baseline(),
        samples: 8,
        epochs: 10,
        seed: 0,
        ..Default::default()
    };
    let (_, history) = train(&cfg).unwrap();
    assert_eq!(history.len(), 10);
    for w in history.windows(2) {
        assert!(
            w[1].loss.l1_init < w[0].loss.l1_init,
            "epoch {}: {} -> {}",
            w[1].epoch,
            w[0].loss.l1_init,
            w[1].loss.l1_init
        );
    }
}
