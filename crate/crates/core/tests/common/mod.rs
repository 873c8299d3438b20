#![allow(dead_code)]

use evret::config::RunConfig;

/// A configuration small enough for a full pipeline run in seconds.
pub const TINY_TOML: &str = r#"
seed = 3

[encoder]
num_layers = 1
hidden_dim = 16
num_heads = 2
ffn_dim = 32
vocab_size = 2048

[fusion]
num_heads = 2
tower_dim = 16

[train]
batch_size = 8
max_steps = 12
learning_rate = 1e-3

[bank]
factor = 2
rank = 2

[event]
embed_dim = 64

[synth]
queries = 20
events = 4
docs = 200
"#;

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_TOML).expect("tiny config is valid")
}

/// Independent scalar helpers for oracle checks.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
