use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Channel-wise maxout: output channel `c` is the max over input channels
/// `c·group_size .. (c+1)·group_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Maxout {
    pub group_size: usize,
}

impl Maxout {
    pub fn new(group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("maxout group size must be ≥ 1"));
        }
        Ok(Self { group_size })
    }

    pub fn output_channels(&self, channels: usize) -> Result<usize> {
        if !channels.is_multiple_of(self.group_size) {
            return Err(Error::invalid(format!(
                "{channels} channels are not divisible by maxout group {}",
                self.group_size
            )));
        }
        Ok(channels / self.group_size)
    }
}

/// Forward pass; also returns, per output element, the flat input index that
/// won (lowest channel on ties).
pub fn maxout_forward(layer: &Maxout, input: &DenseTensor) -> Result<(DenseTensor, Vec<usize>)> {
    let &[b, c, h, w] = input.shape() else {
        return Err(Error::invalid(format!(
            "maxout input must be B×C×H×W, got {:?}",
            input.shape()
        )));
    };
    let co = layer.output_channels(c)?;
    let plane = h * w;
    let x = input.data();
    let mut out = Vec::with_capacity(b * co * plane);
    let mut arg = Vec::with_capacity(b * co * plane);
    for n in 0..b {
        for oc in 0..co {
            for p in 0..plane {
                let mut best = (n * c + oc * layer.group_size) * plane + p;
                for k in 1..layer.group_size {
                    let idx = (n * c + oc * layer.group_size + k) * plane + p;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((DenseTensor::from_parts(vec![b, co, h, w], out), arg))
}

pub fn maxout_backward(input_shape: &[usize], argmax: &[usize], grad_out: &DenseTensor) -> Result<DenseTensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::invalid("maxout gradient does not match the forward pass"));
    }
    let mut grad = DenseTensor::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&src, &v) in argmax.iter().zip(grad_out.data()) {
        g[src] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_of_one_is_identity() {
        let x = DenseTensor::from_vec(&[1, 3, 1, 2], vec![1.0, -2.0, 3.0, 0.5, -1.0, 4.0]).unwrap();
        let (y, _) = maxout_forward(&Maxout::new(1).unwrap(), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn picks_max_and_routes_gradient() {
        let x = DenseTensor::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let (y, arg) = maxout_forward(&Maxout::new(2).unwrap(), &x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let g = maxout_backward(
            x.shape(),
            &arg,
            &DenseTensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0, 2.5]);
    }

    #[test]
    fn ties_go_to_lowest_channel() {
        let x = DenseTensor::from_vec(&[1, 2, 1, 1], vec![2.0, 2.0]).unwrap();
        let (_, arg) = maxout_forward(&Maxout::new(2).unwrap(), &x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let x = DenseTensor::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(maxout_forward(&Maxout::new(2).unwrap(), &x).is_err());
        assert!(Maxout::new(0).is_err());
    }
}
