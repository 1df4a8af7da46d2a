use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Cache, Conv2d, Layer, Linear, Mode};
use super::tensor::Tensor;
use crate::imaging::Image;
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MODEL_FORMAT: &str = "pfoa-cnn";
pub const MODEL_VERSION: u32 = 1;
const CE_EPS: f64 = 1e-12;

/// Shape of the network. Each conv block is conv(k x k, stride 1, padding 1)
/// followed by batch norm, 2x2 max pooling and ReLU; two fully connected
/// layers with dropout between them produce the class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub fc_hidden: usize,
    pub classes: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            input_height: crate::imaging::CROP_HEIGHT,
            input_width: crate::imaging::CROP_WIDTH,
            input_channels: 1,
            conv_channels: vec![32, 64, 128],
            kernel_size: 3,
            fc_hidden: 256,
            classes: 2,
        }
    }
}

impl ArchDescriptor {
    pub fn with_widths(mut self, conv_channels: &[usize], fc_hidden: usize) -> Self {
        self.conv_channels = conv_channels.to_vec();
        self.fc_hidden = fc_hidden;
        self
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    /// Spatial size after all pooling stages.
    pub fn pooled_dims(&self) -> (usize, usize) {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for _ in &self.conv_channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.pooled_dims();
        h * w * self.conv_channels.last().copied().unwrap_or(self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Model("empty input shape".into()));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Model("conv widths must be non-empty and positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Model("kernel size must be odd for same padding".into()));
        }
        if self.fc_hidden == 0 || self.classes < 2 {
            return Err(Error::Model("fc_hidden must be > 0 and classes >= 2".into()));
        }
        Ok(())
    }
}

/// Cached forward state, consumed by [`CnnModel::backward`].
pub struct Tape {
    caches: Vec<Cache>,
}

/// Parameter gradients in [`CnnModel::params`] order.
pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub descriptor: ArchDescriptor,
    pub layers: Vec<Layer>,
}

fn he_uniform(n: usize, fan_in: usize, rng: &mut Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl CnnModel {
    /// Fresh network with He-uniform weights, zero biases, unit BN scale.
    pub fn new(descriptor: ArchDescriptor, dropout_p: f64, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Model(format!("dropout probability {dropout_p} outside [0, 1)")));
        }
        let mut rng = rng::seeded(seed);
        let k = descriptor.kernel_size;
        let mut layers = Vec::new();
        let mut c_in = descriptor.input_channels;
        for &c_out in &descriptor.conv_channels {
            let fan_in = c_in * k * k;
            layers.push(Layer::Conv2d(Conv2d {
                shape: [c_out, c_in, k, k],
                weights: he_uniform(c_out * fan_in, fan_in, &mut rng),
                bias: vec![0.0; c_out],
                stride: 1,
                padding: k / 2,
            }));
            layers.push(Layer::BatchNorm2d(BatchNorm2d::new(c_out)));
            layers.push(Layer::MaxPool2x2);
            layers.push(Layer::Relu);
            c_in = c_out;
        }
        layers.push(Layer::Flatten);
        let flat = descriptor.flat_features();
        layers.push(Layer::Linear(Linear {
            in_features: flat,
            out_features: descriptor.fc_hidden,
            weights: he_uniform(flat * descriptor.fc_hidden, flat, &mut rng),
            bias: vec![0.0; descriptor.fc_hidden],
        }));
        layers.push(Layer::Relu);
        layers.push(Layer::Dropout { p: dropout_p });
        layers.push(Layer::Linear(Linear {
            in_features: descriptor.fc_hidden,
            out_features: descriptor.classes,
            weights: he_uniform(
                descriptor.fc_hidden * descriptor.classes,
                descriptor.fc_hidden,
                &mut rng,
            ),
            bias: vec![0.0; descriptor.classes],
        }));
        layers.push(Layer::Softmax);
        Ok(CnnModel { descriptor, layers })
    }

    /// Checks that layer shapes agree with the descriptor and that all
    /// parameters and running statistics are usable.
    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        let reference = CnnModel::new(self.descriptor.clone(), 0.0, 0)?;
        if reference.layers.len() != self.layers.len() {
            return Err(Error::Model("layer count disagrees with descriptor".into()));
        }
        for (i, (a, b)) in self.layers.iter().zip(&reference.layers).enumerate() {
            let consistent = match (a, b) {
                (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                    x.shape == y.shape && x.weights.len() == y.weights.len() && x.bias.len() == y.bias.len()
                }
                (Layer::BatchNorm2d(x), Layer::BatchNorm2d(y)) => {
                    x.gamma.len() == y.gamma.len()
                        && x.beta.len() == y.beta.len()
                        && x.running_mean.len() == y.running_mean.len()
                        && x.running_var.len() == y.running_var.len()
                        && x.running_var.iter().all(|&v| v >= 0.0)
                }
                (Layer::Linear(x), Layer::Linear(y)) => {
                    x.in_features == y.in_features
                        && x.out_features == y.out_features
                        && x.weights.len() == y.weights.len()
                        && x.bias.len() == y.bias.len()
                }
                (Layer::Dropout { p }, Layer::Dropout { .. }) => (0.0..1.0).contains(p),
                (x, y) => std::mem::discriminant(x) == std::mem::discriminant(y),
            };
            if !consistent {
                return Err(Error::Model(format!("layer {i} inconsistent with descriptor")));
            }
        }
        if self.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let d = &self.descriptor;
        let [_, c, h, w] = batch.shape();
        if (c, h, w) != (d.input_channels, d.input_height, d.input_width) {
            return Err(Error::Shape(format!(
                "input {c}x{h}x{w}, model expects {}x{}x{}",
                d.input_channels, d.input_height, d.input_width
            )));
        }
        if batch.batch() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Class probabilities for `batch`, recording the tape for a backward
    /// pass. In train mode batch-norm running statistics are updated and
    /// dropout draws its masks from `rng`.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Tape)> {
        self.check_input(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &mut self.layers {
            let out = layer.forward(&x, mode, rng)?;
            if let (Layer::BatchNorm2d(bn), Some(stats)) = (&mut *layer, &out.batch_stats) {
                bn.update_running(stats);
            }
            caches.push(out.cache);
            x = out.output;
        }
        Ok((x, Tape { caches }))
    }

    /// Eval-mode probabilities; pure, so an immutable model can be shared.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        // Eval mode never draws from the generator.
        let mut unused = rng::seeded(0);
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.forward(&x, Mode::Eval, &mut unused)?.output;
        }
        Ok(x)
    }

    /// Backpropagates `grad_probs` (dL/d probabilities) through the tape.
    pub fn backward(&self, tape: &Tape, grad_probs: &Tensor) -> Result<Gradients> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Model("tape does not belong to this model".into()));
        }
        let mut grads_rev: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_probs.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            let (gi, pg) = layer.backward(cache, &g)?;
            grads_rev.push(pg);
            g = gi;
        }
        Ok(grads_rev.into_iter().rev().flatten().collect())
    }

    /// Probability of the positive class for a preprocessed ROI crop.
    pub fn predict_proba(&self, image: &Image) -> Result<f64> {
        self.validate()?;
        let plane = image.to_unit_f64();
        let batch = Tensor::from_planes(&[&plane], image.height(), image.width())?;
        Ok(self.predict(&batch)?.data()[1])
    }

    /// Positive-class probabilities for many `[0, 1]`-scaled inputs,
    /// evaluated in chunks.
    pub fn predict_many(&self, inputs: &[&[f64]], chunk: usize) -> Result<Vec<f64>> {
        let (h, w) = (self.descriptor.input_height, self.descriptor.input_width);
        let k = self.descriptor.classes;
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(chunk.max(1)) {
            let probs = self.predict(&Tensor::from_planes(part, h, w)?)?;
            out.extend(probs.data().chunks_exact(k).map(|row| row[1]));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string(&file)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: ModelHeader = serde_json::from_str(&text)?;
        if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
            return Err(Error::Model(format!(
                "{}: container {} v{} is not {MODEL_FORMAT} v{MODEL_VERSION}",
                path.display(),
                header.format,
                header.version
            )));
        }
        let file: ModelFile = serde_json::from_str(&text)?;
        file.model.validate()?;
        Ok(file.model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: CnnModel,
}

#[derive(Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
}

/// Mean negative log-likelihood of the labelled class; logs are clamped at
/// `1e-12`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = probs.sample_len();
    if labels.len() != probs.batch() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.batch()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in probs.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::Shape(format!("label {y} outside {k} classes")));
        }
        total -= row[y].max(CE_EPS).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the probabilities.
pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let k = probs.sample_len();
    let n = labels.len() as f64;
    let mut g = Tensor::zeros(probs.shape());
    for ((grow, prow), &y) in g
        .data_mut()
        .chunks_exact_mut(k)
        .zip(probs.data().chunks_exact(k))
        .zip(labels)
    {
        if prow[y] > CE_EPS {
            grow[y] = -1.0 / (n * prow[y]);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor::default().with_input(12, 6).with_widths(&[2, 3, 2], 4)
    }

    fn random_batch(n: usize, d: &ArchDescriptor, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let len = n * d.input_height * d.input_width;
        Tensor::from_vec(
            [n, 1, d.input_height, d.input_width],
            (0..len).map(|_| r.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn probabilities_are_normalised() {
        let m = CnnModel::new(tiny(), 0.5, 1).unwrap();
        let p = m.predict(&random_batch(5, &m.descriptor, 2)).unwrap();
        for row in p.data().chunks(2) {
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let mut m = CnnModel::new(tiny(), 0.5, 3).unwrap();
        // Move the running statistics away from their initial values.
        let mut r = rng::seeded(9);
        m.forward(&random_batch(4, &m.descriptor, 4), Mode::Train, &mut r)
            .unwrap();
        let batch = random_batch(6, &m.descriptor, 5);
        let a = m.predict(&batch).unwrap();
        let b = m.predict(&batch).unwrap();
        assert_eq!(a, b);
        let (h, w) = (m.descriptor.input_height, m.descriptor.input_width);
        for i in 0..6 {
            let single = Tensor::from_planes(&[batch.sample(i)], h, w).unwrap();
            let p = m.predict(&single).unwrap();
            for c in 0..2 {
                assert!((p.data()[c] - a.data()[2 * i + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let m = CnnModel::new(tiny(), 0.5, 1).unwrap();
        let bad = Tensor::zeros([1, 1, 12, 7]);
        assert!(m.predict(&bad).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let perfect = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(cross_entropy(&perfect, &[0, 1]).unwrap().abs() < 1e-15);
        let uniform = Tensor::from_vec([3, 2, 1, 1], vec![0.5; 6]).unwrap();
        assert!((cross_entropy(&uniform, &[0, 1, 1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Tensor::from_vec([2, 2, 1, 1], vec![0.2, 0.8, 0.7, 0.3]).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((cross_entropy(&p, &[1, 0]).unwrap() - expect).abs() < 1e-15);
        // A confidently wrong prediction is clamped, not infinite.
        assert!(cross_entropy(&perfect, &[1, 0]).unwrap().is_finite());
    }

    #[test]
    fn save_load_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = CnnModel::new(tiny(), 0.5, 7).unwrap();
        m.save(&path).unwrap();
        assert_eq!(CnnModel::load(&path).unwrap(), m);

        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":99", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(CnnModel::load(&path), Err(Error::Model(_))));
    }

    #[test]
    fn inconsistent_model_is_rejected() {
        let mut m = CnnModel::new(tiny(), 0.5, 7).unwrap();
        if let Layer::Linear(l) = &mut m.layers[13] {
            l.weights.pop();
        }
        assert!(m.validate().is_err());
        let img = crate::imaging::Image::filled(6, 12, 0.2, crate::imaging::BitDepth::Eight, 3).unwrap();
        assert!(m.predict_proba(&img).is_err());
    }

    #[test]
    fn pool_then_relu_equals_relu_then_pool() {
        use super::super::layers::maxpool2x2_forward;
        let mut r = rng::seeded(77);
        for _ in 0..20 {
            let x = Tensor::from_vec([2, 3, 6, 5], (0..180).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            let a = maxpool2x2_forward(&x).0.map(|v| v.max(0.0));
            let b = maxpool2x2_forward(&x.map(|v| v.max(0.0))).0;
            assert_eq!(a, b);
        }
    }
}
