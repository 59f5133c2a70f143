use std::io::Write as _;
use std::path::PathBuf;

use cllmr_cli::config::{parse_config, ConfigError, ExperimentConfig};
use cllmr_core::inferencer::{DebiasTarget, InferenceMode};
use cllmr_core::spectrum::NoiseMode;
use cllmr_core::trainer::losses::AlignmentForm;
use cllmr_core::trainer::EncoderChoice;

fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut file = tempfile::NamedTempFile::new().expect("temp file");
    file.write_all(text.as_bytes()).expect("write config");
    parse_config(file.path())
}

#[test]
fn empty_file_yields_all_defaults() {
    let config = parse_str("").expect("empty config parses");
    assert_eq!(config, ExperimentConfig::default());
}

#[test]
fn defaults_match_the_documented_values() {
    let config = ExperimentConfig::default();
    assert_eq!(config.backbone.dim, 32);
    assert_eq!(config.spectrum.rank, 32);
    assert_eq!(config.spectrum.epsilon, 0.01);
    assert_eq!(config.trainer.lr, 1e-3);
    assert_eq!(config.trainer.batch, 4096);
    assert_eq!(config.inference.n_list, vec![10, 30, 50]);
}

#[test]
fn zero_rank_is_rejected_by_name() {
    let err = parse_str("[spectrum]\nrank = 0\n").unwrap_err();
    let message = err.to_string();
    assert!(message.contains("spectrum.rank"), "got: {message}");
    assert!(message.contains("got 0"), "got: {message}");
}

#[test]
fn unknown_section_key_is_rejected_by_name() {
    let err = parse_str("[trainer]\nlearning_rate = 0.1\n").unwrap_err();
    let message = err.to_string();
    assert!(message.contains("learning_rate"), "got: {message}");
}

#[test]
fn unknown_top_level_key_is_rejected_by_name() {
    let err = parse_str("speed = 3\n").unwrap_err();
    assert!(err.to_string().contains("speed"), "got: {err}");
}

#[test]
fn type_mismatch_names_the_key() {
    let err = parse_str("[spectrum]\nrank = \"large\"\n").unwrap_err();
    assert!(err.to_string().contains("rank"), "got: {err}");
}

#[test]
fn negative_alpha_is_rejected_by_name() {
    let err = parse_str("[inference]\nalpha = -0.5\n").unwrap_err();
    assert!(err.to_string().contains("inference.alpha"), "got: {err}");
}

#[test]
fn file_embedder_demands_both_embedding_files() {
    let err = parse_str("[profiles]\nembedder = \"file\"\n").unwrap_err();
    let message = err.to_string();
    assert!(message.contains("user_embedding_file"), "got: {message}");
}

#[test]
fn missing_file_reports_the_path() {
    let err = parse_config(std::path::Path::new("/nonexistent/experiment.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/experiment.toml"));
}

#[test]
fn golden_fixture_parses_to_the_exact_record() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/experiment.toml");
    let config = parse_config(&path).expect("golden fixture parses");

    let mut expected = ExperimentConfig::default();
    expected.seed = 7;
    expected.out = Some(PathBuf::from("runs/golden"));
    expected.data.dataset = cllmr_core::profiles::Dataset::Amazon;
    expected.data.min_rating = 3.0;
    expected.data.split_seed = 11;
    expected.data.ratios = [8, 1, 1];
    expected.data.users = 120;
    expected.data.items = 90;
    expected.data.blocks = 3;
    expected.data.interactions_per_user = 9;
    expected.profiles.embed_dim = 48;
    expected.spectrum.rank = 24;
    expected.spectrum.epsilon = 0.02;
    expected.spectrum.sign_mode = NoiseMode::Symmetric;
    expected.encoder.kind = EncoderChoice::Plain;
    expected.encoder.hidden = vec![64, 32];
    expected.encoder.pretrain_epochs = 2;
    expected.backbone.dim = 16;
    expected.backbone.layers = 3;
    expected.backbone.init_scale = 0.05;
    expected.trainer.lr = 0.005;
    expected.trainer.batch = 512;
    expected.trainer.beta = 0.2;
    expected.trainer.tau = 0.5;
    expected.trainer.elbo_weight = 0.75;
    expected.trainer.patience = 4;
    expected.trainer.max_epochs = 30;
    expected.trainer.alignment = false;
    expected.trainer.alignment_form = AlignmentForm::Literal;
    expected.trainer.eval_n = 20;
    expected.inference.alpha = 0.8;
    expected.inference.n_list = vec![5, 10];
    expected.inference.target = DebiasTarget::GatedComponent;

    assert_eq!(config, expected);
}

#[test]
fn partial_sections_keep_the_other_defaults() {
    let config = parse_str("[backbone]\ndim = 8\n").expect("partial section parses");
    assert_eq!(config.backbone.dim, 8);
    assert_eq!(config.backbone.layers, 2);
    assert_eq!(config.trainer.batch, 4096);
}

#[test]
fn hash_is_stable_and_sensitive() {
    let a = ExperimentConfig::default();
    let b = ExperimentConfig::default();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));

    let mut c = ExperimentConfig::default();
    c.spectrum.epsilon = 0.05;
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn train_settings_map_the_right_fields() {
    let mut config = ExperimentConfig::default();
    config.seed = 13;
    config.backbone.dim = 24;
    config.backbone.layers = 4;
    config.trainer.lr = 0.02;
    config.trainer.batch = 128;
    config.trainer.beta = 0.3;
    config.trainer.tau = 0.7;
    config.encoder.hidden = vec![48];
    config.encoder.pretrain_epochs = 5;
    config.trainer.eval_n = 25;

    let settings = config.train_settings();
    assert_eq!(settings.embed_dim, 24);
    assert_eq!(settings.layers, 4);
    assert_eq!(settings.lr, 0.02);
    assert_eq!(settings.batch_size, 128);
    assert_eq!(settings.align_weight, 0.3);
    assert_eq!(settings.temperature, 0.7);
    assert_eq!(settings.sse_hidden, vec![48]);
    assert_eq!(settings.sse_pretrain_epochs, 5);
    assert_eq!(settings.eval_n, 25);
    assert_eq!(settings.seed, 13);
}

#[test]
fn inference_config_maps_the_inference_section() {
    let mut config = ExperimentConfig::default();
    config.inference.alpha = 0.75;
    config.inference.n_list = vec![20];
    config.inference.mode = InferenceMode::Factual;

    let inference = config.inference_config();
    assert_eq!(inference.alpha, 0.75);
    assert_eq!(inference.n_list, vec![20]);
    assert_eq!(inference.mode, InferenceMode::Factual);
    assert_eq!(inference.target, DebiasTarget::Gate);
}
