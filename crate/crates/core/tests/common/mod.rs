#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Every job kind on a model small enough to train in well under a second.
pub const TINY_SUITE: &str = r#"
[[job]]
name = "data"
kind = "gen_data"
count = 400
digit_min = 2
digit_max = 2
data_seed = 4

[[job]]
name = "base"
kind = "train_base"
corpus = "data"
embed_dim = 8
num_layers = 2
num_heads = 2
context_len = 40
steps = 6
batch_size = 4
eval_count = 6

[[job]]
name = "brep"
kind = "train_brep"
base = "base"
corpus = "data"
steps = 4
batch_size = 4
train_prefix = 2
b_target = 0.01
eval_count = 4

[[job]]
name = "reft"
kind = "train_reft"
base = "base"
corpus = "data"
steps = 4
batch_size = 4
eval_count = 4

[[job]]
name = "eval_brep"
kind = "eval"
base = "base"
intervention = "brep"
corpus = "data"
eval_count = 5
max_new = 6

[[job]]
name = "prefix"
kind = "prefix_eval"
base = "base"
intervention = "brep"
corpus = "data"
eval_count = 3
samples = 2
prefix_lengths = [0, 1, 2]
max_new = 5

[[job]]
name = "probe"
kind = "fit_probe"
base = "base"
corpus = "data"
layer = 1
position = "first_number"
train_count = 40
eval_count = 10

[[job]]
name = "sweep"
kind = "sweep"
base = "base"
probe = "probe"
corpus = "data"
eval_count = 4
deltas = [0.0, 1.0, 4.0]
max_new = 5

[[job]]
name = "faith"
kind = "faithfulness"
base = "base"
intervention = "brep"
compare = "reft"
corpus = "data"
eval_count = 30

[[job]]
name = "sim"
kind = "similarity"
runs = ["brep", "reft"]
"#;

/// Relative path → bytes for every file under `root`, sorted.
pub fn bundle(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
