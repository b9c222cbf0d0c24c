//! Writes the golden fixture manifest and a run configuration covering
//! every task to the directory given as the first argument.
//!
//! ```text
//! cargo run -p relkit --example make_golden -- /tmp/golden
//! relkit --config /tmp/golden/run.json run
//! ```

use std::path::PathBuf;

use relkit::synthetic::golden_manifest;

const RUN_CONFIG: &str = r#"{
  "manifests": ["manifest.json"],
  "models": [
    {"kind": "logits"},
    {"kind": "lbfgs", "name": "linear_probe"},
    {"kind": "head", "name": "gp", "spec": {"kind": "rfgp", "num_features": 64}, "train": {"epochs": 20}}
  ],
  "tasks": ["eval", "calibration", "selective", "osr", "label_uncertainty", "subpop",
            "fewshot", "zeroshot_osr", "active_learning", "score"],
  "fewshot": {"shots": [1, 5, 10]},
  "seed": 0,
  "output_dir": "out"
}
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).ok_or("usage: make_golden <dir>")?);
    let manifest = golden_manifest(0).save(&dir)?;
    std::fs::write(dir.join("run.json"), RUN_CONFIG)?;
    println!("{}", manifest.display());
    println!("{}", dir.join("run.json").display());
    Ok(())
}
