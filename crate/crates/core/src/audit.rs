//! Finite-difference audit of every layer and loss, in double precision.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    finite_diff_check, finite_diff_check_coords, weighted_sum, GradCheck, Tape, Var,
};
use crate::error::Result;
use crate::losses::{
    combined_loss, cross_entropy, metric_loss_centroid, metric_loss_pairwise, SampleSet,
};
use crate::model::{MEnetParams, ModelConfig};
use crate::nn::{self, BatchNormParams, BnMode};
use crate::rng::{random_normal, Rng};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

struct Audit {
    rng: Rng,
    entries: Vec<AuditEntry>,
}

impl Audit {
    fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        random_normal(&mut self.rng, shape, 0.0, 1.0).expect("unit std")
    }

    fn record(&mut self, name: &str, check: Result<GradCheck>) -> Result<()> {
        let err = check?.max_rel_error;
        self.entries.push(AuditEntry {
            name: name.to_string(),
            max_rel_error: err,
            passed: err < TOLERANCE,
        });
        Ok(())
    }

    /// Check `layer` with respect to each of its inputs in turn, reading the
    /// output out through a random linear functional.
    fn layer<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, layer: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let y = layer(&mut t, &vars)?;
            t.value(y).shape().to_vec()
        };
        let readout = self.normal(&out_shape);
        for k in 0..inputs.len() {
            let check = finite_diff_check(
                |t, x| {
                    let vars: Vec<Var> = (0..inputs.len())
                        .map(|j| {
                            if j == k {
                                x
                            } else {
                                t.constant(inputs[j].clone())
                            }
                        })
                        .collect();
                    let y = layer(t, &vars)?;
                    weighted_sum(t, y, readout.clone())
                },
                &inputs[k],
                EPS,
            );
            let label = if inputs.len() == 1 {
                name.to_string()
            } else {
                format!("{name}[{k}]")
            };
            self.record(&label, check)?;
        }
        Ok(())
    }
}

fn labels_and_sets(rng: &mut Rng, n: usize, hw: usize) -> (Vec<Vec<u8>>, Vec<SampleSet>) {
    let labels: Vec<Vec<u8>> = (0..n)
        .map(|_| {
            let mut l: Vec<u8> = (0..hw).map(|_| rng.bernoulli(0.3) as u8).collect();
            l[0] = 1;
            l[1] = 0;
            l
        })
        .collect();
    let sets = labels.iter().map(|l| SampleSet::all(l)).collect();
    (labels, sets)
}

/// Run every check. Entries are returned in a fixed order; the audit passes
/// when every entry does.
pub fn gradient_audit(seed: u64) -> Result<Vec<AuditEntry>> {
    let mut a = Audit {
        rng: Rng::new(seed, 0),
        entries: Vec::new(),
    };

    let inputs = vec![
        a.normal(&[2, 2, 6, 6]),
        a.normal(&[3, 2, 3, 3]),
        a.normal(&[3]),
    ];
    a.layer("conv2d stride 1", inputs, |t, v| {
        nn::conv2d(t, v[0], v[1], Some(v[2]), 1, 1)
    })?;
    let inputs = vec![
        a.normal(&[2, 2, 6, 6]),
        a.normal(&[3, 2, 3, 3]),
        a.normal(&[3]),
    ];
    a.layer("conv2d stride 2", inputs, |t, v| {
        nn::conv2d(t, v[0], v[1], Some(v[2]), 2, 1)
    })?;
    let inputs = vec![
        a.normal(&[2, 3, 3, 3]),
        a.normal(&[3, 2, 3, 3]),
        a.normal(&[2]),
    ];
    a.layer("deconv2d", inputs, |t, v| {
        nn::deconv2d(t, v[0], v[1], Some(v[2]), 2, 1)
    })?;

    let bn = BatchNormParams::<f64>::new(3, true);
    let inputs = vec![a.normal(&[2, 3, 4, 4]), a.normal(&[3]), a.normal(&[3])];
    a.layer("batch_norm train", inputs, |t, v| {
        Ok(nn::batch_norm(t, v[0], Some(v[1]), Some(v[2]), &bn, BnMode::Train)?.0)
    })?;

    // keep every input at least 0.1 away from the kink
    let away: Vec<f64> = a
        .normal(&[2, 2, 4, 4])
        .data()
        .iter()
        .map(|&v| v.signum() * (v.abs() + 0.1))
        .collect();
    a.layer(
        "relu",
        vec![Tensor::from_vec(&[2, 2, 4, 4], away)?],
        |t, v| nn::relu(t, v[0]),
    )?;
    let logits = a.normal(&[2, 2, 4, 4]);
    a.layer("softmax2", vec![logits], |t, v| nn::softmax2(t, v[0]))?;
    let inputs = vec![a.normal(&[2, 1, 4, 4]), a.normal(&[2, 3, 4, 4])];
    a.layer("concat", inputs, nn::concat_channels)?;
    let coarse = a.normal(&[2, 1, 2, 2]);
    a.layer("replicate_upsample", vec![coarse], |t, v| {
        nn::replicate_upsample(t, v[0], 4)
    })?;

    let (labels, sets) = labels_and_sets(&mut a.rng, 2, 16);
    let probs: Vec<f64> = (0..2 * 2 * 16)
        .map(|_| a.rng.uniform_in(0.05, 0.95))
        .collect();
    let probs = Tensor::from_vec(&[2, 2, 4, 4], probs)?;
    a.record(
        "cross_entropy",
        finite_diff_check(|t, p| cross_entropy(t, p, &labels, &sets), &probs, EPS),
    )?;
    let emb = a.normal(&[2, 4, 4, 4]);
    a.record(
        "metric_loss_pairwise",
        finite_diff_check(|t, e| metric_loss_pairwise(t, e, &labels, &sets), &emb, EPS),
    )?;
    a.record(
        "metric_loss_centroid",
        finite_diff_check(|t, e| metric_loss_centroid(t, e, &labels, &sets), &emb, EPS),
    )?;
    let (pc, ec) = (probs.clone(), emb.clone());
    let total = |t: &mut Tape<f64>, e: Var, p: Var| {
        Ok(combined_loss(t, e, p, &labels, &sets, &sets, 1.0, 1.0)?.total)
    };
    a.record(
        "combined_loss[embedding]",
        finite_diff_check(
            |t, e| {
                let p = t.constant(pc.clone());
                total(t, e, p)
            },
            &emb,
            EPS,
        ),
    )?;
    a.record(
        "combined_loss[probs]",
        finite_diff_check(
            |t, p| {
                let e = t.constant(ec.clone());
                total(t, e, p)
            },
            &probs,
            EPS,
        ),
    )?;

    // whole network, train-mode batch norm, with respect to a sample of input pixels
    let config = ModelConfig {
        input_size: 8,
        base_channels: 2,
        convs_per_block: 1,
        embedding_dim: 4,
        ..ModelConfig::default()
    };
    let params = MEnetParams::<f64>::build(&config, &a.rng.split(1))?;
    let (labels, sets) = labels_and_sets(&mut a.rng, 2, 64);
    let image = Tensor::from_vec(
        &[2, 3, 8, 8],
        (0..2 * 3 * 64).map(|_| a.rng.uniform()).collect(),
    )?;
    let coords: Vec<usize> = (0..24).map(|_| a.rng.below(image.numel())).collect();
    let check = finite_diff_check_coords(
        |t, x| {
            let vars = params.register(t, false);
            let f = params.forward_on_tape(t, x, &vars, BnMode::Train)?;
            Ok(combined_loss(t, f.embedding, f.probs, &labels, &sets, &sets, 1.0, 1.0)?.total)
        },
        &image,
        EPS,
        &coords,
    );
    a.record("menet end to end", check)?;
    Ok(a.entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_covers_every_layer_and_loss() {
        let entries = gradient_audit(0).unwrap();
        for name in [
            "conv2d stride 2[0]",
            "deconv2d[1]",
            "batch_norm train[0]",
            "relu",
            "softmax2",
            "concat[1]",
            "replicate_upsample",
            "cross_entropy",
            "metric_loss_pairwise",
            "metric_loss_centroid",
            "menet end to end",
        ] {
            assert!(entries.iter().any(|e| e.name == name), "missing {name}");
        }
    }
}
