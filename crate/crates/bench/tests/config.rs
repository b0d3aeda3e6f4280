use std::path::Path;

use groundiff::corpus::Variability;
use groundiff::text::EncoderMode;
use groundiff_bench::experiment::MeanStd;
use groundiff_bench::ExperimentConfig;

const MINIMAL: &str = r#"
[corpora]
high = "data/high"
"#;

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/experiment.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.modes, vec![EncoderMode::Frozen, EncoderMode::Learnable]);
    assert_eq!(cfg.regimes, vec![Variability::High]);
    assert_eq!(cfg.seeds.len(), cfg.n_runs);
}

#[test]
fn defaults_fill_missing_sections() {
    let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
    assert_eq!(cfg.n_runs, 3);
    assert_eq!(cfg.train.batch_size, 32);
    assert!((cfg.effective_drop_prob() - 0.3).abs() < 1e-12);
}

#[test]
fn no_uncond_ablation_zeroes_drop_probability() {
    let text = format!("{MINIMAL}\n[ablation]\nno_uncond_training = true\n");
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.effective_drop_prob(), 0.0);
}

#[test]
fn invalid_configs_are_rejected() {
    let cases = [
        format!("n_runs = 2\nseeds = [0]\n{MINIMAL}"),
        format!("regimes = [\"low\"]\n{MINIMAL}"),
        format!("{MINIMAL}\n[train]\nuncond_drop_prob = 1.5\n"),
        format!("{MINIMAL}\n[train]\nsteps_frozen = 0\n"),
        format!("{MINIMAL}\n[eval]\ngroup_size = 1\n"),
        format!("{MINIMAL}\n[train]\nunknown_key = 3\n"),
        "modes = [\"frozen\"]\n".to_string(),
    ];
    for text in &cases {
        assert!(ExperimentConfig::from_toml(text).is_err(), "accepted:\n{text}");
    }
}

#[test]
fn hash_tracks_content() {
    let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
    let b = ExperimentConfig::from_toml(MINIMAL).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    let mut c = a.clone();
    c.train.learning_rate = 2e-4;
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn mean_std_uses_sample_deviation() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m.mean - 2.5).abs() < 1e-12);
    assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
    assert!(MeanStd::of(&[]).mean.is_nan());
}

/// Reused cells are read back from JSON, so scores must survive the trip
/// bit for bit.
#[test]
fn summary_json_round_trip_is_exact() {
    use groundiff::metrics::ScoreSummary;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let s = ScoreSummary { n: 857, cnr: rng.random_range(-2.0..2.0), cnr_abs: rng.random(), auc: rng.random(), top1: rng.random_range(0..858) as f64 / 857.0 };
        let back: ScoreSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!([back.cnr, back.cnr_abs, back.auc, back.top1].map(f64::to_bits), [s.cnr, s.cnr_abs, s.auc, s.top1].map(f64::to_bits));
    }
}
