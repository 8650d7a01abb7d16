use pacbayes_core::data::synthetic;
use pacbayes_core::nn::{self, MlpArchitecture};
use pacbayes_core::sgd::{train_sgd, SgdConfig};

#[test]
fn loss_history_stays_finite_and_decreases() {
    let train = synthetic::gaussian_blobs(400, 0.12, false, 8);
    let test = synthetic::gaussian_blobs(200, 0.12, false, 9);
    let arch = MlpArchitecture::new(vec![2, 10, 1]).unwrap();
    let w0 = nn::init_weights(&arch, 0.3, 8).unwrap();
    let cfg = SgdConfig {
        learning_rate: 0.05,
        batch_size: 20,
        epochs: 15,
        ..SgdConfig::default()
    };
    let (_, history) = train_sgd(&w0, &train, Some(&test), &cfg).unwrap();
    assert_eq!(history.len(), 15);
    for r in &history {
        assert!(r.mean_batch_loss.is_finite());
        assert!(r.train_surrogate.unwrap().is_finite());
        assert!(r.test_error.unwrap() <= 1.0);
    }
    let first = history[0].train_surrogate.unwrap();
    let last = history.last().unwrap().train_surrogate.unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(history.last().unwrap().train_error.unwrap() < 0.2);
}
