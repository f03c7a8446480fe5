use evseg_core::eval::{region_metrics, MetricsOptions};
use evseg_core::evidential::SubnetId;
use evseg_core::subnet::{
    predict_subnet, train, ConvNet, InputChannel, SubnetConfig, SubnetParams, TrainConfig,
};
use evseg_core::{Dims, LabelMap, Volume};

/// Five identical channels: 1 inside a centred box, 0 outside.
fn box_case(dims: Dims, lo: usize, hi: usize) -> (Volume<f32>, LabelMap) {
    let inside = |m: usize| {
        let (x, y, _) = dims.coords(m);
        (lo..hi).contains(&x) && (lo..hi).contains(&y)
    };
    let v = Volume::from_fn(dims, 5, [1.0; 3], |_, m| inside(m) as u8 as f32).unwrap();
    let labels = (0..dims.voxels()).map(|m| inside(m) as u16).collect();
    (
        v,
        LabelMap::new(dims, labels, LabelMap::default_names(2)).unwrap(),
    )
}

fn toy_set() -> Vec<(Volume<f32>, LabelMap)> {
    let dims = Dims::new(16, 16, 4);
    vec![
        box_case(dims, 4, 12),
        box_case(dims, 3, 11),
        box_case(dims, 5, 13),
    ]
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn two_class_toy_is_learned_in_twenty_epochs() {
    let set = toy_set();
    let (net, record) = train(
        &set,
        &[],
        InputChannel::Fa,
        &SubnetConfig::new(2, 3),
        &toy_config(),
    )
    .unwrap();
    assert_eq!(record.len(), 20);
    assert!(record.epochs.iter().all(|e| e.train.is_finite()));
    let (v, gt) = box_case(Dims::new(16, 16, 4), 4, 12);
    let pred = predict_subnet(&net, &v, InputChannel::Fa).unwrap();
    let report = region_metrics(&pred.labels, &gt, MetricsOptions::default()).unwrap();
    assert!(
        report.mean_dice >= 0.99,
        "foreground Dice {}",
        report.mean_dice
    );
    let agree = pred
        .labels
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(a, b)| a == b)
        .count();
    assert!(agree as f64 >= 0.99 * gt.labels().len() as f64);
}

#[test]
fn training_is_deterministic() {
    let set = toy_set();
    let cfg = TrainConfig {
        epochs: 4,
        ..toy_config()
    };
    let run = || {
        train(
            &set[..2],
            &set[2..],
            InputChannel::Md,
            &SubnetConfig::new(2, 11),
            &cfg,
        )
        .unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    let bits = |n: &SubnetParams| n.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ra.losses(), rb.losses());
    assert!(ra.epochs.iter().all(|e| e.validation.is_some()));
}

#[test]
fn zero_network_on_zero_volume_is_uniform() {
    let dims = Dims::new(5, 4, 3);
    for classes in [2usize, 6] {
        let config = SubnetConfig::new(classes, 0);
        let init: SubnetParams = ConvNet::init(
            config.clone(),
            SubnetId::new("fa"),
            LabelMap::default_names(classes),
        )
        .unwrap();
        let zero = ConvNet::from_parts(
            config,
            SubnetId::new("fa"),
            LabelMap::default_names(classes),
            vec![0.0; init.num_params()],
        )
        .unwrap();
        let v = Volume::<f32>::zeros(dims, 5).unwrap();
        let pred = predict_subnet(&zero, &v, InputChannel::Fa).unwrap();
        let n = classes as f64;
        let expected = n / (n * std::f64::consts::LN_2 + n);
        assert!(pred
            .uncertainty
            .data()
            .iter()
            .all(|&u| (u as f64 - expected).abs() < 1e-6));
        assert!(pred
            .evidence
            .volume()
            .data()
            .iter()
            .all(|&e| (e as f64 - std::f64::consts::LN_2).abs() < 1e-6));
        assert!(pred.labels.labels().iter().all(|&l| l == 0));
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let mut set = toy_set();
    let other = box_case(Dims::new(12, 16, 4), 2, 8);
    set.push(other);
    assert!(train(
        &set,
        &[],
        InputChannel::Fa,
        &SubnetConfig::new(2, 0),
        &toy_config()
    )
    .is_err());
    let set = toy_set();
    assert!(train(
        &set,
        &[],
        InputChannel::Fa,
        &SubnetConfig::new(3, 0),
        &toy_config()
    )
    .is_err());
}
