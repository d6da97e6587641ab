use fedsmc::data::{generate_clients, read_csv, write_csv, DataConfig};
use fedsmc::protocol::{run_training, run_training_on, RunConfig, RunOptions, StrategyKind};
use fedsmc::Error;

#[test]
fn dataset_csv_round_trips() {
    let clients = generate_clients(&DataConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_csv(&clients, &mut buf).unwrap();
    let back = read_csv(&buf[..]).unwrap();
    assert_eq!(back, clients);
}

#[test]
fn resolved_config_round_trips_through_json() {
    let cfg = RunConfig {
        strategy: StrategyKind::Dp,
        rounds: 7,
        ..RunConfig::default().with_clients(8)
    };
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    back.validate().unwrap();

    let partial: RunConfig = serde_json::from_str(r#"{"rounds": 4, "strategy": "fedavg"}"#).unwrap();
    assert_eq!(partial.rounds, 4);
    assert_eq!(partial.clients, 6);
    assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 4}"#).is_err());
}

#[test]
fn runs_reproduce_from_config_alone() {
    let cfg = RunConfig {
        rounds: 10,
        master_seed: 42,
        ..RunConfig::default()
    };
    let a = run_training(&cfg, RunOptions::default()).unwrap();
    let clients = generate_clients(&cfg.data).unwrap();
    let b = run_training_on(&cfg, &clients, RunOptions::default()).unwrap();
    assert_eq!(a.final_weights, b.final_weights);
    assert_eq!(a.report, b.report);
    assert_eq!(a.log, b.log);

    let other = run_training(&RunConfig { master_seed: 43, ..cfg }, RunOptions::default()).unwrap();
    assert_ne!(other.final_weights, a.final_weights);
}

#[test]
fn mismatched_data_profile_is_rejected() {
    let mut cfg = RunConfig::default();
    cfg.data.sizes.pop();
    assert!(matches!(run_training(&cfg, RunOptions::default()), Err(Error::Config { .. })));
}
