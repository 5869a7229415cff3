use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Floor applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Weighted categorical cross-entropy, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub class_weights: Vec<f64>,
}

impl LossSpec {
    pub fn new(class_weights: Vec<f64>) -> Result<Self> {
        if class_weights.is_empty() || class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weights must be positive, got {class_weights:?}")));
        }
        Ok(LossSpec { class_weights })
    }

    pub fn uniform(n_classes: usize) -> Self {
        LossSpec {
            class_weights: vec![1.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn eval<T: Scalar>(&self, probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
        weighted_cce(probs, labels, &self.class_weights)
    }
}

fn check_probs<T: Scalar>(probs: &Tensor<T>, labels: &[usize], n_weights: usize) -> Result<(usize, usize)> {
    let &[batch, classes] = probs.shape() else {
        return Err(shape_err("weighted_cce", format!("probs must be (batch, classes), got {:?}", probs.shape())));
    };
    if labels.len() != batch {
        return Err(shape_err("weighted_cce", format!("{} labels for batch of {batch}", labels.len())));
    }
    if n_weights != classes {
        return Err(shape_err("weighted_cce", format!("{n_weights} weights for {classes} classes")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    for row in probs.data().chunks_exact(classes) {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("probability row sums to {s}, expected 1")));
        }
    }
    Ok((batch, classes))
}

/// `L = (1/B) Σ_b w[y_b] · (−ln max(p[b, y_b], 1e-12))`.
pub fn weighted_cce<T: Scalar>(probs: &Tensor<T>, labels: &[usize], weights: &[f64]) -> Result<T> {
    let (batch, classes) = check_probs(probs, labels, weights.len())?;
    let floor = T::lit(LOG_FLOOR);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| T::lit(weights[y]) * -probs.data()[b * classes + y].max(floor).ln())
        .sum();
    Ok(total / T::lit(batch as f64))
}

/// Plain categorical cross-entropy, averaged over the batch.
pub fn unweighted_cce<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (batch, classes) = check_probs(probs, labels, probs.shape().get(1).copied().unwrap_or(0))?;
    let floor = T::lit(LOG_FLOOR);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -probs.data()[b * classes + y].max(floor).ln())
        .sum();
    Ok(total / T::lit(batch as f64))
}

/// Column vector of shape `(B·C, 1)` holding `w[y_b] / B` at `(b, y_b)` and
/// zero elsewhere; fed to the graph built by [`weighted_cce_node`].
pub fn loss_mask<T: Scalar>(labels: &[usize], weights: &[f64]) -> Result<Tensor<T>> {
    let classes = weights.len();
    let batch = labels.len();
    let mut data = vec![T::zero(); batch * classes];
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        data[b * classes + y] = T::lit(weights[y] / batch as f64);
    }
    Tensor::new(vec![batch * classes, 1], data)
}

/// Appends the weighted CCE of a `(B, C)` probability node as
/// `−(reshape(ln max(p, floor)) · mask)`. Returns the mask input node and
/// the `(1, 1)` loss node.
pub fn weighted_cce_node(graph: &mut Graph, probs: NodeId, mask_name: &str) -> Result<(NodeId, NodeId)> {
    let &[batch, classes] = graph.shape(probs) else {
        return Err(shape_err("weighted_cce", format!("probs must be (batch, classes), got {:?}", graph.shape(probs))));
    };
    let n = batch * classes;
    let mask = graph.input(mask_name, [n, 1])?;
    let logp = graph.log(probs, LOG_FLOOR)?;
    let row = graph.reshape(logp, [1, n])?;
    let dot = graph.matmul(row, mask)?;
    let loss = graph.scale(dot, -1.0)?;
    graph.set_label(loss, "loss");
    Ok((mask, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Init, Mode, ParamTable};
    use std::collections::HashMap;

    #[test]
    fn perfect_prediction_costs_nothing() {
        let p = Tensor::<f64>::from_f64([2, 3], &[1., 0., 0., 0., 0., 1.]).unwrap();
        assert_eq!(weighted_cce(&p, &[0, 2], &[0.3, 2.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_w_ln3() {
        let p = Tensor::<f64>::full([1, 3], 1.0 / 3.0);
        let l = weighted_cce(&p, &[1], &[1.0, 0.7, 1.0]).unwrap();
        assert!((l - 0.7 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_match_plain_cce_bitwise() {
        let p = Tensor::<f32>::from_f64([3, 3], &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.6, 0.3, 0.1]).unwrap();
        let labels = [1, 2, 0];
        assert_eq!(
            weighted_cce(&p, &labels, &[1.0; 3]).unwrap().to_bits(),
            unweighted_cce(&p, &labels).unwrap().to_bits()
        );
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::<f64>::full([1, 3], 1.0 / 3.0);
        assert!(matches!(
            weighted_cce(&p, &[3], &[1.0; 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn graph_loss_matches_eager_loss() {
        let mut g = Graph::new();
        let z = g.param("z", [2, 3], Init::Zeros).unwrap();
        let p = g.softmax(z).unwrap();
        let (_, loss) = weighted_cce_node(&mut g, p, "mask").unwrap();
        let mut params = ParamTable::<f64>::new();
        params.insert("z", Tensor::from_f64([2, 3], &[0.5, -1.0, 2.0, 0.0, 0.3, -0.2]).unwrap(), true);
        let weights = [0.26, 0.29, 0.45];
        let labels = [2, 0];
        let mut inputs = HashMap::new();
        inputs.insert("mask".to_string(), loss_mask(&labels, &weights).unwrap());
        let ev = g.eval(&params, &inputs, Mode::Infer).unwrap();
        let eager = weighted_cce(ev.value(p), &labels, &weights).unwrap();
        assert!((ev.value(loss).data()[0] - eager).abs() < 1e-15);
    }
}
