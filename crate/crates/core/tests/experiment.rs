use fedpmt::data::Dataset;
use fedpmt::masking::{local_update, BpMask, LocalConfig};
use fedpmt::nn::LayerParams;
use fedpmt::sim::{
    load_data, metrics_csv, mix_seed, run_experiment, time_to_accuracy, ExperimentConfig, StrategyConfig,
};
use fedpmt::strategies::StrategyKind;

const BASE: &str = r#"
seed = 5
targets = [0.3]

[dataset]
kind = "synthetic"
classes = 5
dim = 8
train_per_class = 80
test_per_class = 20
separation = 2.0

[partition]
kind = "iid"
devices = 10
per_device = 30

[model]
kind = "fcnn"
hidden = [12, 10, 8, 6]

[strategy]
kind = "fedpmt"
widths = 5
complexity_ratios = [0.46, 0.58, 0.88, 0.94, 1.0]

[training]
selected = 5
rounds = 4
batch_size = 10
lr = { kind = "constant", value = 0.1 }

[timing]
tiers = [0.2, 0.25, 0.3333333333333333, 0.5, 1.0]
balanced = true
base_full_time = 10.0
"#;

fn config(edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
    edit(&mut cfg);
    cfg.validate().unwrap();
    cfg
}

fn fedavg(cfg: &mut ExperimentConfig) {
    cfg.strategy = StrategyConfig {
        kind: StrategyKind::Fedavg,
        widths: 1,
        complexity_ratios: None,
        ..cfg.strategy.clone()
    };
}

#[test]
fn tier_round_durations() {
    let pmt = run_experiment(&config(|_| {})).unwrap();
    let avg = run_experiment(&config(fedavg)).unwrap();
    for (a, b) in pmt.records.iter().zip(&avg.records) {
        assert!((a.round_seconds - 26.4).abs() < 1e-9, "{}", a.round_seconds);
        assert!((b.round_seconds - 50.0).abs() < 1e-9);
        assert!(a.round_seconds <= b.round_seconds);
        assert_eq!(a.selected, b.selected);
    }
    let last = pmt.records.last().unwrap();
    assert!((last.cumulative_seconds - 4.0 * 26.4).abs() < 1e-9);
}

#[test]
fn deadline_includes_tiers_by_time() {
    let pmt = run_experiment(&config(|c| c.timing.deadline = Some(26.5))).unwrap();
    let avg = run_experiment(&config(|c| {
        fedavg(c);
        c.timing.deadline = Some(26.5);
    }))
    .unwrap();
    for r in &pmt.records {
        assert_eq!(r.included, r.selected);
        assert!((r.round_seconds - 26.4).abs() < 1e-9);
    }
    for r in &avg.records {
        assert_eq!(r.included.len(), 2);
        assert!(r.included.iter().all(|&k| k % 5 >= 3));
        assert!((r.round_seconds - 20.0).abs() < 1e-9);
    }
}

#[test]
fn empty_rounds_keep_model_and_cost_deadline() {
    let cfg = config(|c| c.timing.deadline = Some(5.0));
    let out = run_experiment(&cfg).unwrap();
    let init = LayerParams::init(&out.spec, mix_seed(&[cfg.seed, 3]));
    assert_eq!(out.params, init);
    for (t, r) in out.records.iter().enumerate() {
        assert!(r.empty && r.included.is_empty());
        assert_eq!(r.cumulative_seconds, 5.0 * (t + 1) as f64);
    }
    assert!(metrics_csv(&out.records).lines().nth(1).unwrap().starts_with("1,5.000000,5.000000,5,0,"));
}

#[test]
fn single_width_fedpmt_reproduces_fedavg() {
    let pmt = run_experiment(&config(|c| {
        c.strategy.widths = 1;
        c.strategy.complexity_ratios = None;
    }))
    .unwrap();
    let avg = run_experiment(&config(fedavg)).unwrap();
    assert_eq!(pmt.records, avg.records);
    assert_eq!(pmt.params, avg.params);
}

#[test]
fn one_device_one_step_is_the_local_model() {
    let cfg = config(|c| {
        fedavg(c);
        c.partition.devices = 1;
        c.training.selected = 1;
        c.training.rounds = 1;
        c.training.steps = Some(1);
        c.timing.tiers = vec![1.0];
    });
    let out = run_experiment(&cfg).unwrap();
    let (train, _) = load_data(&cfg).unwrap();
    let part = fedpmt::data::partition_iid(&train, 1, 30, mix_seed(&[cfg.seed, 2])).unwrap();
    let local: Dataset = part.materialize(&train).unwrap().remove(0);
    let init = LayerParams::init(&out.spec, mix_seed(&[cfg.seed, 3]));
    let u = local_update(
        &out.spec,
        &init,
        &local,
        &BpMask::all_ones(5),
        &LocalConfig {
            step_size: 0.1,
            steps: 1,
            batch_size: 10,
            seed: mix_seed(&[cfg.seed, 5, 1, 0]),
        },
    )
    .unwrap();
    assert_eq!(out.params, u.params);
}

#[test]
fn runs_are_deterministic() {
    for kind in [StrategyKind::Fedpmt, StrategyKind::Fedavg, StrategyKind::Feddrop] {
        let cfg = config(|c| {
            c.strategy.kind = kind;
            if kind == StrategyKind::Feddrop {
                c.strategy.complexity_ratios = None;
            }
        });
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(metrics_csv(&a.records), metrics_csv(&b.records));
        assert_eq!(a.params, b.params);
    }
}

#[test]
fn feddrop_uses_matched_rates() {
    let out = run_experiment(&config(|c| {
        c.strategy.kind = StrategyKind::Feddrop;
        c.strategy.complexity_ratios = None;
    }))
    .unwrap();
    let rates = out.keep_rates.unwrap();
    assert_eq!(rates.len(), 5);
    assert_eq!(rates[4], 1.0);
    assert!(rates.windows(2).all(|w| w[0] <= w[1]));
    assert!(out.params.is_finite());
}

#[test]
fn noniid_run_and_time_to_target() {
    let out = run_experiment(&config(|c| {
        c.partition.kind = fedpmt::sim::PartitionKind::Noniid2;
        c.training.rounds = 6;
        c.training.eval_every = 2;
    }))
    .unwrap();
    let evaluated: Vec<_> = out.records.iter().filter(|r| r.accuracy.is_some()).collect();
    assert_eq!(evaluated.len(), 3);
    assert_eq!(time_to_accuracy(&out.records, 0.0), Some(evaluated[0].cumulative_seconds));
    assert_eq!(time_to_accuracy(&out.records, 1.01), None);
}

#[test]
fn idx_files_drive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, n: usize, offset: usize| {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, n as u8, 0, 0, 0, 4, 0, 0, 0, 4];
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, n as u8];
        for i in 0..n {
            let class = (i + offset) % 10;
            img.extend((0..16).map(|p| if p == class { 255 } else { (p * 7 % 50) as u8 }));
            lab.push(class as u8);
        }
        std::fs::write(dir.path().join(format!("{name}-images")), img).unwrap();
        std::fs::write(dir.path().join(format!("{name}-labels")), lab).unwrap();
    };
    write("train", 100, 0);
    write("test", 20, 3);
    let text = BASE
        .replace(
            "kind = \"synthetic\"\nclasses = 5\ndim = 8\ntrain_per_class = 80\ntest_per_class = 20\nseparation = 2.0",
            "kind = \"idx\"\ntrain_images = \"train-images\"\ntrain_labels = \"train-labels\"\ntest_images = \"test-images\"\ntest_labels = \"test-labels\"",
        )
        .replace("per_device = 30", "per_device = 10");
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, text).unwrap();
    let cfg = ExperimentConfig::from_file(&path).unwrap();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.spec.input_len(), 16);
    assert_eq!(out.spec.classes(), 10);
    assert_eq!(out.records.len(), 4);
}
