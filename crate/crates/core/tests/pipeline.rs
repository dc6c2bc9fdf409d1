//! Library-level pipeline test: a miniature experiment end to end, with
//! the emitted report validated against the published JSON schema.

use fairaudit_core::config::ExperimentConfig;
use fairaudit_core::experiment::{run_experiment, RunOptions};
use fairaudit_core::report::ReportFormat;

const TINY_CONFIG: &str = r#"
output_dir = "out"
seeds = [2, 5]

[dataset]
source = "synthetic"
skew_ratio = 0.8
majority_group = 0

[dataset.synthetic]
dim = 4
n = 300
noise_std = 1.0
class_shift = 1.0
group_shift = 0.4

[split]
member_fraction = 0.34
nonmember_fraction = 0.33
shadow_fraction = 0.33

[target]
layer_sizes = [4, 8, 2]
epochs = 4
batch_size = 16
learning_rate = 0.1
weight_decay = 0.0

[intervention]
method = "reweight"
lambda = 0.0

[attacks]
kinds = ["mia_score", "aia_black"]
fd = true
k_shadows = 3
k_shadows_quick = 2

[attacks.shadow_train]
epochs = 3
batch_size = 16
learning_rate = 0.1
weight_decay = 0.0

[defense]
enabled = true

[defense.dp]
clip_norm = 1.0
noise_multiplier = 4.0
delta = 1e-5
epochs = 1
batch_size = 32
learning_rate = 0.5
weight_decay = 0.0
k_shadows = 2

[defense.restriction]
mode = "label_only"
"#;

#[test]
fn emitted_report_validates_against_the_schema() {
    let cfg = ExperimentConfig::from_toml_str(TINY_CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        formats: vec![ReportFormat::Json, ReportFormat::Csv],
        output_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    let report = run_experiment(&cfg, &opts).unwrap();
    assert_eq!(report.medians.completed_seeds, 2);

    // With embeddings withheld by the restriction, the defense phase
    // must carry no white-box rows but keep the other kinds.
    let defense = report.per_seed[0].defense.as_ref().unwrap();
    assert!(defense.epsilon.is_some());
    assert!(!defense.attacks.is_empty());

    let schema_text = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json"),
    )
    .unwrap();
    let schema: serde_json::Value = serde_json::from_str(&schema_text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}
