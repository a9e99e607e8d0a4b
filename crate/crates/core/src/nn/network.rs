use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::random::{seeded, uniform_vec, SeededRng};
use crate::tensor::DenseTensor;

use super::classifier::SoftmaxClassifier;
use super::conv::{conv_backward_with, conv_forward_with, ConvLayer, Padding};
use super::maxout::{maxout_backward, maxout_forward, Maxout};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    Maxout(Maxout),
    Classifier(SoftmaxClassifier),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn conv(name: impl Into<String>, layer: ConvLayer) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv(layer),
        }
    }

    pub fn maxout(name: impl Into<String>, layer: Maxout) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Maxout(layer),
        }
    }

    pub fn classifier(name: impl Into<String>, layer: SoftmaxClassifier) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Classifier(layer),
        }
    }

    /// Whether training leaves this layer alone, given the freeze-inserted
    /// option.
    pub fn is_frozen(&self, freeze_inserted: bool) -> bool {
        match &self.kind {
            LayerKind::Conv(c) => c.frozen || (freeze_inserted && c.inserted),
            LayerKind::Maxout(_) => true,
            LayerKind::Classifier(c) => c.frozen,
        }
    }
}

/// Parameter gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Conv {
        kernel: DenseTensor,
        bias: Option<Vec<f64>>,
    },
    Classifier {
        weights: DenseTensor,
        bias: Vec<f64>,
    },
}

impl LayerGrads {
    pub fn squared_norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        match self {
            LayerGrads::None => 0.0,
            LayerGrads::Conv { kernel, bias } => sq(kernel.data()) + bias.as_deref().map_or(0.0, sq),
            LayerGrads::Classifier { weights, bias } => sq(weights.data()) + sq(bias),
        }
    }

    pub fn scale(&mut self, c: f64) {
        let mul = |v: &mut [f64]| v.iter_mut().for_each(|x| *x *= c);
        match self {
            LayerGrads::None => {}
            LayerGrads::Conv { kernel, bias } => {
                mul(kernel.data_mut());
                if let Some(b) = bias {
                    mul(b);
                }
            }
            LayerGrads::Classifier { weights, bias } => {
                mul(weights.data_mut());
                mul(bias);
            }
        }
    }
}

/// Activations recorded by [`Network::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[i + 1]` the output of
    /// layer `i`; the last entry holds the logits.
    pub activations: Vec<DenseTensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DenseTensor {
        self.activations.last().expect("at least the input")
    }
}

/// Ordered, named layers ending in a single softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

impl Network {
    /// Checks that names are unique, shapes chain from `input_shape`
    /// (`C × H × W`) and the last layer, and only the last, is a classifier.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::invalid("input shape entries must be ≥ 1"));
        }
        let net = Self { input_shape, layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for layer in &self.layers {
            let ok = !layer.name.is_empty()
                && layer
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
            if !ok {
                return Err(Error::invalid(format!("bad layer name `{}`", layer.name)));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name `{}`", layer.name)));
            }
        }
        let classifiers = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Classifier(_)))
            .count();
        let last_is_classifier = matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::Classifier(_)));
        if classifiers != 1 || !last_is_classifier {
            return Err(Error::invalid(
                "a network needs exactly one classifier, as its last layer",
            ));
        }
        self.layer_shapes().map(|_| ())
    }

    /// Input shape (`C × H × W`) of every layer, followed by `[classes, 1, 1]`.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input_shape];
        let mut cur = self.input_shape;
        for layer in &self.layers {
            let [c, h, w] = cur;
            cur = match &layer.kind {
                LayerKind::Conv(conv) => {
                    if conv.in_channels() != c {
                        return Err(Error::invalid(format!(
                            "layer `{}` expects {} channels, gets {c}",
                            layer.name,
                            conv.in_channels()
                        )));
                    }
                    let (ho, wo) = conv.output_hw(h, w)?;
                    [conv.out_channels(), ho, wo]
                }
                LayerKind::Maxout(m) => [m.output_channels(c)?, h, w],
                LayerKind::Classifier(cls) => {
                    if cls.features() != c * h * w {
                        return Err(Error::invalid(format!(
                            "classifier `{}` expects {} features, gets {}",
                            layer.name,
                            cls.features(),
                            c * h * w
                        )));
                    }
                    [cls.classes(), 1, 1]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for value updates. Callers must not change shapes;
    /// use [`Network::new`] to build a different architecture.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn num_classes(&self) -> usize {
        match &self.layers.last().expect("validated").kind {
            LayerKind::Classifier(c) => c.classes(),
            _ => unreachable!("validated"),
        }
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        Ok(&self.layers[self.layer_index(name)?])
    }

    /// Logits, `B × classes`.
    pub fn forward(&self, input: &DenseTensor, exec: Exec) -> Result<DenseTensor> {
        let mut cur = self.check_input(input)?;
        for layer in &self.layers {
            cur = match &layer.kind {
                LayerKind::Conv(c) => conv_forward_with(c, &cur, exec)?,
                LayerKind::Maxout(m) => maxout_forward(m, &cur)?.0,
                LayerKind::Classifier(c) => c.forward(&cur, exec)?,
            };
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, input: &DenseTensor, exec: Exec) -> Result<ForwardCache> {
        let mut activations = vec![self.check_input(input)?];
        let mut argmax = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cur = activations.last().expect("non-empty");
            let (next, arg) = match &layer.kind {
                LayerKind::Conv(c) => (conv_forward_with(c, cur, exec)?, None),
                LayerKind::Maxout(m) => {
                    let (y, a) = maxout_forward(m, cur)?;
                    (y, Some(a))
                }
                LayerKind::Classifier(c) => (c.forward(cur, exec)?, None),
            };
            activations.push(next);
            argmax.push(arg);
        }
        Ok(ForwardCache { activations, argmax })
    }

    /// Backpropagates `grad_logits` through the cached pass. Returns one
    /// entry per layer and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &DenseTensor,
        exec: Exec,
    ) -> Result<(Vec<LayerGrads>, DenseTensor)> {
        let mut grads = vec![LayerGrads::None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            g = match &layer.kind {
                LayerKind::Conv(c) => {
                    let cg = conv_backward_with(c, input, &g, exec)?;
                    grads[i] = LayerGrads::Conv {
                        kernel: cg.kernel,
                        bias: cg.bias,
                    };
                    cg.input
                }
                LayerKind::Maxout(_) => {
                    let arg = cache.argmax[i].as_deref().expect("maxout records its argmax");
                    maxout_backward(input.shape(), arg, &g)?
                }
                LayerKind::Classifier(c) => {
                    let (gx, gw, gb) = c.backward(input, &g)?;
                    grads[i] = LayerGrads::Classifier { weights: gw, bias: gb };
                    gx
                }
            };
        }
        Ok((grads, g))
    }

    fn check_input(&self, input: &DenseTensor) -> Result<DenseTensor> {
        let s = input.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            let batch = s.first().copied().unwrap_or(1);
            let [c, h, w] = self.input_shape;
            return Err(Error::ShapeMismatch {
                expected: vec![batch, c, h, w],
                actual: s.to_vec(),
            });
        }
        Ok(input.clone())
    }
}

/// Convolution with zero-mean uniform weights of half-width
/// `√(6 / (fan_in + fan_out))` and zero bias.
pub fn glorot_conv(
    kernel_shape: [usize; 4],
    groups: usize,
    padding: Padding,
    bias: bool,
    rng: &mut SeededRng,
) -> Result<ConvLayer> {
    let [dh, dw, s_group, t] = kernel_shape;
    let fan_in = dh * dw * s_group;
    let fan_out = dh * dw * t / groups.max(1);
    let half = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let kernel = DenseTensor::from_vec(&kernel_shape, uniform_vec(rng, dh * dw * s_group * t, half))?;
    ConvLayer::new(kernel, bias.then(|| vec![0.0; t]), groups, padding)
}

fn glorot_classifier(classes: usize, features: usize, rng: &mut SeededRng) -> Result<SoftmaxClassifier> {
    let half = (6.0 / (classes + features) as f64).sqrt();
    let weights = DenseTensor::from_vec(&[classes, features], uniform_vec(rng, classes * features, half))?;
    SoftmaxClassifier::new(weights, vec![0.0; classes])
}

/// The two-convolution network used for the desk-scale experiments, on
/// `1 × 24 × 24` inputs:
///
/// `conv1` 5×5, 1→8 · `maxout1` /2 · `conv2` 5×5, 4→16 · `maxout2` /2 ·
/// `classifier` 2048→`num_classes`.
pub fn toy_network(num_classes: usize, seed: u64) -> Result<Network> {
    let mut rng = seeded(seed, 0);
    let layers = vec![
        Layer::conv("conv1", glorot_conv([5, 5, 1, 8], 1, Padding::Valid, true, &mut rng)?),
        Layer::maxout("maxout1", Maxout::new(2)?),
        Layer::conv("conv2", glorot_conv([5, 5, 4, 16], 1, Padding::Valid, true, &mut rng)?),
        Layer::maxout("maxout2", Maxout::new(2)?),
        Layer::classifier("classifier", glorot_classifier(num_classes, 8 * 16 * 16, &mut rng)?),
    ];
    Network::new([1, 24, 24], layers)
}
