//! Head directories: one UBT tensor per parameter block plus
//! `descriptor.json`. Ensemble members live in `member_<i>/` subdirectories.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BatchEnsembleHead, BeLayer, BeOutput, Classifier, Dense, EnsembleHead, Head, HeadError, HeteroscedasticHead,
    LinearSoftmaxHead, McDropoutHead, Mlp, RfgpHead, TrainedHead, MEAN_FIELD_FACTOR,
};
use crate::tensor_store::{load_tensor, save_tensor, Tensor};

pub const DESCRIPTOR_FILE: &str = "descriptor.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDescriptor {
    pub kind: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hyperparams: Value,
    pub seed: u64,
    pub train_loss: Option<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

fn put2(dir: &Path, name: &str, a: &Array2<f64>) -> Result<(), HeadError> {
    Ok(save_tensor(&Tensor::from_array2(a), dir.join(format!("{name}.ubt")))?)
}

fn put1(dir: &Path, name: &str, a: &Array1<f64>) -> Result<(), HeadError> {
    Ok(save_tensor(&Tensor::from_array1(a), dir.join(format!("{name}.ubt")))?)
}

fn get2(dir: &Path, name: &str) -> Result<Array2<f64>, HeadError> {
    Ok(load_tensor(dir.join(format!("{name}.ubt")))?.to_array2()?)
}

fn get1(dir: &Path, name: &str) -> Result<Array1<f64>, HeadError> {
    Ok(load_tensor(dir.join(format!("{name}.ubt")))?.to_array1()?)
}

fn save_be_layer(dir: &Path, prefix: &str, l: &BeLayer) -> Result<(), HeadError> {
    put2(dir, &format!("{prefix}.w0"), &l.w0)?;
    put2(dir, &format!("{prefix}.r"), &l.r)?;
    put2(dir, &format!("{prefix}.s"), &l.s)?;
    put2(dir, &format!("{prefix}.bias"), &l.bias)
}

fn load_be_layer(dir: &Path, prefix: &str) -> Result<BeLayer, HeadError> {
    Ok(BeLayer {
        w0: get2(dir, &format!("{prefix}.w0"))?,
        r: get2(dir, &format!("{prefix}.r"))?,
        s: get2(dir, &format!("{prefix}.s"))?,
        bias: get2(dir, &format!("{prefix}.bias"))?,
    })
}

fn hyperparams(head: &Head) -> Value {
    match head {
        Head::Linear(_) => json!({}),
        Head::Rfgp(h) => json!({
            "num_features": h.num_features(),
            "lengthscale": h.lengthscale,
            "mean_field": h.mean_field,
            "mean_field_factor": MEAN_FIELD_FACTOR,
            "precision": if h.precision().is_some() { "pooled" } else { "none" },
        }),
        Head::Heteroscedastic(h) => json!({
            "rank": h.rank,
            "temperature": h.temperature,
            "train_samples": h.train_samples,
            "eval_samples": h.eval_samples,
            "eval_seed": h.eval_seed,
        }),
        Head::BatchEnsemble(h) => json!({
            "members": h.members(),
            "hidden": h.hidden.len(),
            "output": match h.output { BeOutput::Shared(_) => "shared", BeOutput::PerMember(_) => "per_member" },
        }),
        Head::McDropout(h) => json!({
            "layers": h.base.layers.len(),
            "rate": h.rate,
            "samples": h.samples,
            "eval_seed": h.eval_seed,
        }),
        Head::Ensemble(e) => json!({ "members": e.members.len() }),
    }
}

fn save_tensors(head: &Head, dir: &Path, seed: u64) -> Result<(), HeadError> {
    match head {
        Head::Linear(h) => {
            put2(dir, "weights", &h.weights)?;
            put1(dir, "bias", &h.bias)?;
        }
        Head::Rfgp(h) => {
            put2(dir, "rf_weights", &h.rf_weights)?;
            put1(dir, "rf_bias", &h.rf_bias)?;
            put2(dir, "beta", &h.beta)?;
            if let Some(p) = h.precision() {
                put2(dir, "precision", p)?;
            }
        }
        Head::Heteroscedastic(h) => {
            put2(dir, "mean.weights", &h.mean.weights)?;
            put1(dir, "mean.bias", &h.mean.bias)?;
            let (d, k) = h.diag.dim();
            let t = Tensor::from_f64(vec![d, k, h.rank], h.low_rank.iter().copied().collect())?;
            save_tensor(&t, dir.join("low_rank.ubt"))?;
            put2(dir, "diag", &h.diag)?;
        }
        Head::BatchEnsemble(h) => {
            for (l, layer) in h.hidden.iter().enumerate() {
                save_be_layer(dir, &format!("hidden{l}"), layer)?;
            }
            match &h.output {
                BeOutput::Shared(l) => save_be_layer(dir, "output", l)?,
                BeOutput::PerMember(v) => {
                    for (m, o) in v.iter().enumerate() {
                        put2(dir, &format!("member{m}.weights"), &o.weights)?;
                        put1(dir, &format!("member{m}.bias"), &o.bias)?;
                    }
                }
            }
        }
        Head::McDropout(h) => {
            for (l, layer) in h.base.layers.iter().enumerate() {
                put2(dir, &format!("layer{l}.w"), &layer.w)?;
                put1(dir, &format!("layer{l}.b"), &layer.b)?;
            }
        }
        Head::Ensemble(e) => {
            for (m, member) in e.members.iter().enumerate() {
                let t = TrainedHead {
                    head: member.clone(),
                    seed,
                    train_loss: None,
                };
                save_head(&t, dir.join(format!("member_{m}")))?;
            }
        }
    }
    Ok(())
}

/// Writes `trained` to `dir`, creating it if needed.
pub fn save_head(trained: &TrainedHead, dir: impl AsRef<Path>) -> Result<HeadDescriptor, HeadError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let head = &trained.head;
    let desc = HeadDescriptor {
        kind: head.kind_name().to_string(),
        input_dim: head.input_dim(),
        num_classes: head.num_classes(),
        hyperparams: hyperparams(head),
        seed: trained.seed,
        train_loss: trained.train_loss,
        flags: head.flags(),
    };
    save_tensors(head, dir, trained.seed)?;
    let text = serde_json::to_string_pretty(&desc).map_err(|e| HeadError::Descriptor(e.to_string()))?;
    fs::write(dir.join(DESCRIPTOR_FILE), text + "\n")?;
    Ok(desc)
}

fn field<T: serde::de::DeserializeOwned>(hp: &Value, key: &str) -> Result<T, HeadError> {
    let v = hp
        .get(key)
        .ok_or_else(|| HeadError::Descriptor(format!("hyperparams missing {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| HeadError::Descriptor(format!("{key}: {e}")))
}

/// Reads a head written by [`save_head`].
pub fn load_head(dir: impl AsRef<Path>) -> Result<TrainedHead, HeadError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(DESCRIPTOR_FILE))?;
    let desc: HeadDescriptor = serde_json::from_str(&text).map_err(|e| HeadError::Descriptor(e.to_string()))?;
    let hp = &desc.hyperparams;
    let head = match desc.kind.as_str() {
        "linear" => Head::Linear(LinearSoftmaxHead {
            weights: get2(dir, "weights")?,
            bias: get1(dir, "bias")?,
        }),
        "rfgp" => {
            let precision = if dir.join("precision.ubt").exists() {
                Some(get2(dir, "precision")?)
            } else {
                None
            };
            Head::Rfgp(RfgpHead::from_parts(
                get2(dir, "rf_weights")?,
                get1(dir, "rf_bias")?,
                get2(dir, "beta")?,
                field(hp, "lengthscale")?,
                field(hp, "mean_field")?,
                precision,
            )?)
        }
        "heteroscedastic" => {
            let rank: usize = field(hp, "rank")?;
            let lr = load_tensor(dir.join("low_rank.ubt"))?;
            let (d, k) = (desc.input_dim, desc.num_classes);
            if lr.dims() != [d, k, rank] {
                return Err(HeadError::Shape(format!("low_rank has dims {:?}, expected [{d}, {k}, {rank}]", lr.dims())));
            }
            Head::Heteroscedastic(HeteroscedasticHead {
                mean: LinearSoftmaxHead {
                    weights: get2(dir, "mean.weights")?,
                    bias: get1(dir, "mean.bias")?,
                },
                low_rank: Array2::from_shape_vec((d, k * rank), lr.to_f64_vec())
                    .map_err(|e| HeadError::Shape(e.to_string()))?,
                diag: get2(dir, "diag")?,
                rank,
                temperature: field(hp, "temperature")?,
                train_samples: field(hp, "train_samples")?,
                eval_samples: field(hp, "eval_samples")?,
                eval_seed: field(hp, "eval_seed")?,
            })
        }
        "batch_ensemble" => {
            let n_hidden: usize = field(hp, "hidden")?;
            let members: usize = field(hp, "members")?;
            let hidden = (0..n_hidden)
                .map(|l| load_be_layer(dir, &format!("hidden{l}")))
                .collect::<Result<Vec<_>, _>>()?;
            let output = match field::<String>(hp, "output")?.as_str() {
                "shared" => BeOutput::Shared(load_be_layer(dir, "output")?),
                "per_member" => BeOutput::PerMember(
                    (0..members)
                        .map(|m| {
                            Ok(LinearSoftmaxHead {
                                weights: get2(dir, &format!("member{m}.weights"))?,
                                bias: get1(dir, &format!("member{m}.bias"))?,
                            })
                        })
                        .collect::<Result<Vec<_>, HeadError>>()?,
                ),
                other => return Err(HeadError::Descriptor(format!("unknown output kind {other:?}"))),
            };
            Head::BatchEnsemble(BatchEnsembleHead::from_parts(hidden, output))
        }
        "mc_dropout" => {
            let n: usize = field(hp, "layers")?;
            let layers = (0..n)
                .map(|l| {
                    Ok(Dense {
                        w: get2(dir, &format!("layer{l}.w"))?,
                        b: get1(dir, &format!("layer{l}.b"))?,
                    })
                })
                .collect::<Result<Vec<_>, HeadError>>()?;
            Head::McDropout(McDropoutHead {
                base: Mlp { layers },
                rate: field(hp, "rate")?,
                samples: field(hp, "samples")?,
                eval_seed: field(hp, "eval_seed")?,
            })
        }
        "ensemble" => {
            let n: usize = field(hp, "members")?;
            let members = (0..n)
                .map(|m| load_head(dir.join(format!("member_{m}"))).map(|t| t.head))
                .collect::<Result<Vec<_>, _>>()?;
            Head::Ensemble(EnsembleHead { members })
        }
        other => return Err(HeadError::Descriptor(format!("unknown head kind {other:?}"))),
    };
    if head.input_dim() != desc.input_dim || head.num_classes() != desc.num_classes {
        return Err(HeadError::Shape(format!(
            "tensors give a {}x{} head but the descriptor says {}x{}",
            head.input_dim(),
            head.num_classes(),
            desc.input_dim,
            desc.num_classes
        )));
    }
    Ok(TrainedHead {
        head,
        seed: desc.seed,
        train_loss: desc.train_loss,
    })
}
