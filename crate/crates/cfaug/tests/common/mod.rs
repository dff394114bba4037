#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfaug_core::toy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn cfaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfaug"))
        .args(args)
        .env_remove("CFAUG_API_KEY")
        .output()
        .expect("run cfaug")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A skewed toy corpus plus a small-model config in `dir`; returns the
/// config path.
pub fn toy_workspace(dir: &Path, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reviews = toy::toy_reviews(&mut rng, 60, 0.75, "r");
    cfaug::io::write_reviews(&dir.join("data/reviews.jsonl"), &reviews).unwrap();
    let config = r#"
seed = 7
workers = 2

[paths]
corpus = "data/reviews.jsonl"

[corpus]
min_freq = 1
max_rewrites = 16

[prompt]
m = 4
n = 2

[model]
embed_dim = 8
encoder_hidden = 10
attention_dim = 6
sentiment_dim = 3
content_dim = 5
decoder_hidden = 12
max_decode_len = 16
beam_width = 2

[train]
epochs = 2
batch_size = 8
learning_rate = 0.005
checkpoint_every = 3

[reproduce]
per_product_quota = 2
max_parents = 6

[evaluate]
summarizer_epochs = 1
"#;
    let path = dir.join("cfaug.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
