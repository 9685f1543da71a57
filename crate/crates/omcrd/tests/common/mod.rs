#![allow(dead_code)]

use std::path::Path;

use omcrd::config::RunConfig;
use omcrd_core::data::synth_generate;
use omcrd_core::Dataset;
use toml::Value;

pub const TINY: &str = r#"
[synth]
n_subjects = 5
trials_per_class_per_subject = 4
channels = 3
samples = 40
sample_rate_hz = 10.0
seed = 5

[peer]
embed_rg_dim = 6
embed_ch_dim = 5
contrastive_dim = 4
conv = { kernels = [8, 3], strides = [4, 2], channels = [4, 3] }

[train]
peers = 2
epochs = 2
base_lr = 1e-3
per_class = 4
seed = 17

[split]
folds = 2
"#;

pub fn tiny_config(run_dir: &Path, extra: &[(&str, Value)]) -> RunConfig {
    let mut over = vec![("paths.run_dir", Value::String(run_dir.display().to_string()))];
    over.extend(extra.iter().cloned());
    RunConfig::from_toml(TINY, &over).unwrap()
}

pub fn tiny_data() -> Dataset {
    let cfg = RunConfig::from_toml(TINY, &[]).unwrap();
    synth_generate(&cfg.synth).unwrap()
}
