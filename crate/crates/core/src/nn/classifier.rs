use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Exec};
use crate::tensor::DenseTensor;

/// Terminal layer: flattens `C × H × W` features, applies a dense map to
/// `classes` logits, and is trained through softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    /// `classes × features`.
    weights: DenseTensor,
    bias: Vec<f64>,
    pub frozen: bool,
}

impl SoftmaxClassifier {
    pub fn new(weights: DenseTensor, bias: Vec<f64>) -> Result<Self> {
        let &[classes, _] = weights.shape() else {
            return Err(Error::invalid("classifier weights must be classes × features"));
        };
        if bias.len() != classes {
            return Err(Error::invalid("classifier bias length must equal the class count"));
        }
        if classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        Ok(Self {
            weights,
            bias,
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &DenseTensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenseTensor {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn check(&self, input: &DenseTensor) -> Result<usize> {
        let batch = input.shape()[0];
        if input.len() != batch * self.features() {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, self.features()],
                actual: input.shape().to_vec(),
            });
        }
        Ok(batch)
    }

    /// Logits, `B × classes`.
    pub fn forward(&self, input: &DenseTensor, exec: Exec) -> Result<DenseTensor> {
        let batch = self.check(input)?;
        let f = self.features();
        let k = self.classes();
        let w = self.weights.data();
        let rows = map_indexed(exec, batch, |b| {
            let x = &input.data()[b * f..(b + 1) * f];
            (0..k)
                .map(|c| self.bias[c] + w[c * f..(c + 1) * f].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect::<Vec<f64>>()
        });
        Ok(DenseTensor::from_parts(vec![batch, k], rows.concat()))
    }

    /// Returns `(grad_input, grad_weights, grad_bias)`.
    pub fn backward(
        &self,
        input: &DenseTensor,
        grad_logits: &DenseTensor,
    ) -> Result<(DenseTensor, DenseTensor, Vec<f64>)> {
        let batch = self.check(input)?;
        let (f, k) = (self.features(), self.classes());
        if grad_logits.shape() != [batch, k] {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, k],
                actual: grad_logits.shape().to_vec(),
            });
        }
        let w = self.weights.data();
        let mut gx = vec![0.0; batch * f];
        let mut gw = vec![0.0; k * f];
        let mut gb = vec![0.0; k];
        for b in 0..batch {
            let x = &input.data()[b * f..(b + 1) * f];
            let gxb = &mut gx[b * f..(b + 1) * f];
            for c in 0..k {
                let g = grad_logits.data()[b * k + c];
                gb[c] += g;
                let wr = &w[c * f..(c + 1) * f];
                let gwr = &mut gw[c * f..(c + 1) * f];
                for i in 0..f {
                    gwr[i] += g * x[i];
                    gxb[i] += g * wr[i];
                }
            }
        }
        Ok((
            DenseTensor::from_parts(input.shape().to_vec(), gx),
            DenseTensor::from_parts(vec![k, f], gw),
            gb,
        ))
    }
}

/// Row-wise softmax with the max-shift for stability.
pub fn softmax(logits: &DenseTensor) -> Result<DenseTensor> {
    let &[b, k] = logits.shape() else {
        return Err(Error::invalid("logits must be B × classes"));
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(DenseTensor::from_parts(vec![b, k], out))
}

/// Mean cross-entropy over the batch and its gradient `(p − onehot) / B`.
pub fn softmax_cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let &[b, k] = logits.shape() else {
        return Err(Error::invalid("logits must be B × classes"));
    };
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * k];
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        for c in 0..k {
            let p = (row[c] - lse).exp();
            grad[n * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, DenseTensor::from_parts(vec![b, k], grad)))
}

/// Index of the largest logit in each row; ties go to the lowest class.
pub fn argmax_rows(logits: &DenseTensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = DenseTensor::zeros(&[3, 7]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_logits_are_stable() {
        let logits = DenseTensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.is_finite());
        let p = softmax(&logits).unwrap();
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_label_rejected() {
        let logits = DenseTensor::zeros(&[1, 3]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4, 1.5, 0.0];
        let logits = DenseTensor::from_vec(&[2, 4], data.clone()).unwrap();
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..data.len() {
            let mut p = data.clone();
            p[i] += h;
            let mut m = data.clone();
            m[i] -= h;
            let lp = softmax_cross_entropy(&DenseTensor::from_vec(&[2, 4], p).unwrap(), &labels)
                .unwrap()
                .0;
            let lm = softmax_cross_entropy(&DenseTensor::from_vec(&[2, 4], m).unwrap(), &labels)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() <= 1e-6, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let logits = DenseTensor::from_vec(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }
}
