//! The GDN scoring network: a linear encoder over propagated features
//! followed by a one-hidden-layer ReLU valuator that emits a scalar score.
//!
//! ```text
//! z = x W_e + b_e
//! o = relu(z W_h + b_h)
//! s = o . u + c
//! ```
//!
//! Gradients are written out by hand. The ReLU derivative at exactly zero
//! is taken as zero.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PropagatedFeatures;
use crate::rng::Rng;

macro_rules! tensor_set {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub encoder_weight: Array2<f64>,
            pub encoder_bias: Array1<f64>,
            pub hidden_weight: Array2<f64>,
            pub hidden_bias: Array1<f64>,
            pub output_weight: Array1<f64>,
            pub output_bias: f64,
        }

        impl $name {
            pub fn zeros(d: usize, h_e: usize, h_v: usize) -> Self {
                $name {
                    encoder_weight: Array2::zeros((d, h_e)),
                    encoder_bias: Array1::zeros(h_e),
                    hidden_weight: Array2::zeros((h_e, h_v)),
                    hidden_bias: Array1::zeros(h_v),
                    output_weight: Array1::zeros(h_v),
                    output_bias: 0.0,
                }
            }

            pub fn input_dim(&self) -> usize {
                self.encoder_weight.nrows()
            }

            pub fn encoder_dim(&self) -> usize {
                self.encoder_weight.ncols()
            }

            pub fn hidden_dim(&self) -> usize {
                self.hidden_weight.ncols()
            }

            /// Total number of scalar entries.
            pub fn len(&self) -> usize {
                self.encoder_weight.len()
                    + self.encoder_bias.len()
                    + self.hidden_weight.len()
                    + self.hidden_bias.len()
                    + self.output_weight.len()
                    + 1
            }

            pub fn is_empty(&self) -> bool {
                false
            }

            /// All entries in field order, row-major within each matrix.
            pub fn to_flat(&self) -> Vec<f64> {
                let mut out = Vec::with_capacity(self.len());
                out.extend(self.encoder_weight.iter());
                out.extend(self.encoder_bias.iter());
                out.extend(self.hidden_weight.iter());
                out.extend(self.hidden_bias.iter());
                out.extend(self.output_weight.iter());
                out.push(self.output_bias);
                out
            }

            /// Inverse of [`Self::to_flat`] for the given dimensions.
            pub fn from_flat(d: usize, h_e: usize, h_v: usize, flat: &[f64]) -> Result<Self> {
                let mut out = Self::zeros(d, h_e, h_v);
                if flat.len() != out.len() {
                    return Err(Error::Shape(format!(
                        "expected {} values, got {}",
                        out.len(),
                        flat.len()
                    )));
                }
                let mut it = flat.iter().copied();
                for v in out
                    .encoder_weight
                    .iter_mut()
                    .chain(out.encoder_bias.iter_mut())
                    .chain(out.hidden_weight.iter_mut())
                    .chain(out.hidden_bias.iter_mut())
                    .chain(out.output_weight.iter_mut())
                {
                    *v = it.next().unwrap();
                }
                out.output_bias = it.next().unwrap();
                Ok(out)
            }

            pub fn all_finite(&self) -> bool {
                self.encoder_weight.iter().all(|v| v.is_finite())
                    && self.encoder_bias.iter().all(|v| v.is_finite())
                    && self.hidden_weight.iter().all(|v| v.is_finite())
                    && self.hidden_bias.iter().all(|v| v.is_finite())
                    && self.output_weight.iter().all(|v| v.is_finite())
                    && self.output_bias.is_finite()
            }

            fn shape_key(&self) -> (usize, usize, usize) {
                (self.input_dim(), self.encoder_dim(), self.hidden_dim())
            }
        }
    };
}

tensor_set!(GdnParams);
tensor_set!(GdnGradients);

impl GdnParams {
    /// Validates shape congruence and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (d, h_e, h_v) = self.shape_key();
        if self.encoder_bias.len() != h_e
            || self.hidden_weight.nrows() != h_e
            || self.hidden_bias.len() != h_v
            || self.output_weight.len() != h_v
            || d == 0
        {
            return Err(Error::Shape("inconsistent parameter shapes".into()));
        }
        if !self.all_finite() {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Returns `self - lr * grads`. Neither input is modified.
    pub fn apply_gradient_step(&self, grads: &GdnGradients, lr: f64) -> Result<GdnParams> {
        if self.shape_key() != grads.shape_key() {
            return Err(Error::Shape(format!(
                "params {:?} vs gradients {:?}",
                self.shape_key(),
                grads.shape_key()
            )));
        }
        let mut out = self.clone();
        out.encoder_weight.scaled_add(-lr, &grads.encoder_weight);
        out.encoder_bias.scaled_add(-lr, &grads.encoder_bias);
        out.hidden_weight.scaled_add(-lr, &grads.hidden_weight);
        out.hidden_bias.scaled_add(-lr, &grads.hidden_bias);
        out.output_weight.scaled_add(-lr, &grads.output_weight);
        out.output_bias -= lr * grads.output_bias;
        Ok(out)
    }
}

impl GdnGradients {
    pub fn zeros_like(params: &GdnParams) -> Self {
        let (d, h_e, h_v) = params.shape_key();
        GdnGradients::zeros(d, h_e, h_v)
    }

    pub fn add_assign(&mut self, other: &GdnGradients) {
        self.encoder_weight += &other.encoder_weight;
        self.encoder_bias += &other.encoder_bias;
        self.hidden_weight += &other.hidden_weight;
        self.hidden_bias += &other.hidden_bias;
        self.output_weight += &other.output_weight;
        self.output_bias += other.output_bias;
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and zero biases.
pub fn init_params(d: usize, h_e: usize, h_v: usize, rng: &mut Rng) -> Result<GdnParams> {
    if d == 0 || h_e == 0 || h_v == 0 {
        return Err(Error::Config(format!(
            "layer widths must be positive (d={d}, h_e={h_e}, h_v={h_v})"
        )));
    }
    let mut p = GdnParams::zeros(d, h_e, h_v);
    let mut fill = |values: &mut dyn Iterator<Item = &mut f64>, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in values {
            *v = rng.gen_range(-bound..=bound);
        }
    };
    fill(&mut p.encoder_weight.iter_mut(), d);
    fill(&mut p.hidden_weight.iter_mut(), h_e);
    fill(&mut p.output_weight.iter_mut(), h_v);
    Ok(p)
}

/// Scores for a batch of nodes, aligned with `node_indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    pub node_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

struct Activations {
    inputs: Array2<f64>,
    encoded: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    scores: Array1<f64>,
}

fn check_batch(params: &GdnParams, feats: &PropagatedFeatures, batch: &[usize]) -> Result<()> {
    if feats.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, encoder expects {}",
            feats.dim(),
            params.input_dim()
        )));
    }
    let n = feats.num_nodes();
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            num_nodes: n,
        });
    }
    Ok(())
}

fn activations(params: &GdnParams, inputs: Array2<f64>) -> Activations {
    let mut encoded = inputs.dot(&params.encoder_weight);
    encoded += &params.encoder_bias;
    let mut pre = encoded.dot(&params.hidden_weight);
    pre += &params.hidden_bias;
    let hidden = pre.mapv(|v| v.max(0.0));
    let mut scores = hidden.dot(&params.output_weight);
    scores += params.output_bias;
    Activations {
        inputs,
        encoded,
        pre,
        hidden,
        scores,
    }
}

/// Anomaly scores of the batch nodes.
pub fn forward(
    params: &GdnParams,
    feats: &PropagatedFeatures,
    batch: &[usize],
) -> Result<ScoreBatch> {
    check_batch(params, feats, batch)?;
    let act = activations(params, feats.matrix().select(Axis(0), batch));
    Ok(ScoreBatch {
        node_indices: batch.to_vec(),
        scores: act.scores.to_vec(),
    })
}

/// Scores every node of the feature matrix.
pub fn score_all(params: &GdnParams, feats: &PropagatedFeatures) -> Result<Vec<f64>> {
    if feats.dim() != params.input_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, encoder expects {}",
            feats.dim(),
            params.input_dim()
        )));
    }
    Ok(activations(params, feats.matrix().clone()).scores.to_vec())
}

/// Gradient of `sum_i dloss_dscore[i] * s_i` with respect to every parameter.
pub fn backward(
    params: &GdnParams,
    feats: &PropagatedFeatures,
    batch: &[usize],
    dloss_dscore: &[f64],
) -> Result<GdnGradients> {
    check_batch(params, feats, batch)?;
    if dloss_dscore.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} upstream gradients for a batch of {}",
            dloss_dscore.len(),
            batch.len()
        )));
    }
    let act = activations(params, feats.matrix().select(Axis(0), batch));
    Ok(backward_from(params, &act, ArrayView1::from(dloss_dscore)))
}

fn backward_from(params: &GdnParams, act: &Activations, upstream: ArrayView1<'_, f64>) -> GdnGradients {
    let output_bias = upstream.sum();
    let output_weight = act.hidden.t().dot(&upstream);

    // d pre = upstream (outer) u, masked where the ReLU was inactive
    let mut d_pre = upstream
        .insert_axis(Axis(1))
        .dot(&params.output_weight.view().insert_axis(Axis(0)));
    ndarray::Zip::from(&mut d_pre)
        .and(&act.pre)
        .for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
    let hidden_weight = act.encoded.t().dot(&d_pre);
    let hidden_bias = d_pre.sum_axis(Axis(0));

    let d_encoded = d_pre.dot(&params.hidden_weight.t());
    let encoder_weight = act.inputs.t().dot(&d_encoded);
    let encoder_bias = d_encoded.sum_axis(Axis(0));

    GdnGradients {
        encoder_weight,
        encoder_bias,
        hidden_weight,
        hidden_bias,
        output_weight,
        output_bias,
    }
}

/// Scores a batch and returns the gradient of an arbitrary score-level loss.
///
/// `loss` receives the scores and returns `(value, dvalue/dscore)`.
pub fn forward_backward<F>(
    params: &GdnParams,
    feats: &PropagatedFeatures,
    batch: &[usize],
    loss: F,
) -> Result<(f64, GdnGradients)>
where
    F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_batch(params, feats, batch)?;
    let act = activations(params, feats.matrix().select(Axis(0), batch));
    let (value, upstream) = loss(act.scores.as_slice().expect("contiguous"))?;
    if upstream.len() != batch.len() {
        return Err(Error::Shape("loss gradient length differs from batch".into()));
    }
    Ok((value, backward_from(params, &act, ArrayView1::from(&upstream))))
}

/// On-disk parameter checkpoint. Floats are written with round-trip
/// precision so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub d: usize,
    pub h_e: usize,
    pub h_v: usize,
    pub sgc_degree: usize,
    pub encoder_weight: Tensor,
    pub encoder_bias: Tensor,
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub output_weight: Tensor,
    pub output_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "metagdn-checkpoint-v1";

impl Tensor {
    fn matrix(m: &Array2<f64>) -> Self {
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            values: m.iter().copied().collect(),
        }
    }

    fn vector(v: &Array1<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            values: v.to_vec(),
        }
    }

    fn to_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        if self.shape != [rows, cols] {
            return Err(Error::Shape(format!(
                "{name}: shape {:?}, expected [{rows}, {cols}]",
                self.shape
            )));
        }
        Array2::from_shape_vec((rows, cols), self.values.clone())
            .map_err(|e| Error::Shape(format!("{name}: {e}")))
    }

    fn to_vector(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        if self.shape != [len] || self.values.len() != len {
            return Err(Error::Shape(format!(
                "{name}: shape {:?}, expected [{len}]",
                self.shape
            )));
        }
        Ok(Array1::from(self.values.clone()))
    }
}

impl Checkpoint {
    pub fn new(params: &GdnParams, sgc_degree: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            d: params.input_dim(),
            h_e: params.encoder_dim(),
            h_v: params.hidden_dim(),
            sgc_degree,
            encoder_weight: Tensor::matrix(&params.encoder_weight),
            encoder_bias: Tensor::vector(&params.encoder_bias),
            hidden_weight: Tensor::matrix(&params.hidden_weight),
            hidden_bias: Tensor::vector(&params.hidden_bias),
            output_weight: Tensor::vector(&params.output_weight),
            output_bias: Tensor {
                shape: vec![],
                values: vec![params.output_bias],
            },
        }
    }

    pub fn params(&self) -> Result<GdnParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if !self.output_bias.shape.is_empty() || self.output_bias.values.len() != 1 {
            return Err(Error::Shape("output_bias must be a scalar".into()));
        }
        let p = GdnParams {
            encoder_weight: self.encoder_weight.to_matrix("encoder_weight", self.d, self.h_e)?,
            encoder_bias: self.encoder_bias.to_vector("encoder_bias", self.h_e)?,
            hidden_weight: self.hidden_weight.to_matrix("hidden_weight", self.h_e, self.h_v)?,
            hidden_bias: self.hidden_bias.to_vector("hidden_bias", self.h_v)?,
            output_weight: self.output_weight.to_vector("output_weight", self.h_v)?,
            output_bias: self.output_bias.values[0],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
