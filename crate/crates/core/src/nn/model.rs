//! Layered models split into a feature extractor and a decision head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Pooled};
use super::loss::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::prototype::{GlobalPrototypeSet, ProtoDistance};
use crate::tensor::Tensor;

/// The fixed architectures the simulator can build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// conv(1→10, 5×5) → relu → pool → conv(10→20, 5×5) → relu → pool → dense(320→50) → relu → dense(50→C)
    Cnn4,
    /// dense(in→hidden) → relu → dense(hidden→C)
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    /// Valid stride-1 convolution, ReLU, then an optional 2×2 max-pool.
    Conv { pool: bool },
    /// Affine map over the flattened input, optionally followed by ReLU.
    Dense { relu: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn dense(name: &str, inputs: usize, outputs: usize, relu: bool) -> Self {
        Layer {
            name: name.to_string(),
            op: LayerOp::Dense { relu },
            weight: Tensor::zeros(vec![outputs, inputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, pool: bool) -> Self {
        Layer {
            name: name.to_string(),
            op: LayerOp::Conv { pool },
            weight: Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(vec![out_channels]),
        }
    }

    fn fan_in(&self) -> usize {
        self.weight.row_len()
    }
}

/// Ordered model parameters. Layers before `extractor_boundary` form the
/// feature extractor, the rest form the decision head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    extractor_boundary: usize,
    embedding_dim: usize,
    num_classes: usize,
}

/// Per-parameter tensors in [`ModelParams::tensors`] order
/// (`weight₀, bias₀, weight₁, bias₁, …`).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct LayerCache {
    input: Tensor,
    activated: Option<Tensor>,
    pooled: Option<Pooled>,
}

/// Activations from one forward pass.
pub struct ForwardPass {
    /// Extractor output flattened to `[batch × d]`.
    pub embeddings: Tensor,
    pub logits: Tensor,
    caches: Vec<LayerCache>,
}

impl ModelParams {
    /// Assembles a model and checks that the layer shapes chain for `input_shape`
    /// (per-sample shape, without the batch dimension).
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, extractor_boundary: usize) -> Result<Self> {
        if layers.is_empty() || extractor_boundary >= layers.len() {
            return Err(Error::dim(
                "extractor_boundary",
                format!("{extractor_boundary} is not a valid boundary for {} layers", layers.len()),
            ));
        }
        let mut params = ModelParams {
            input_shape,
            layers,
            extractor_boundary,
            embedding_dim: 0,
            num_classes: 0,
        };
        let probe = Tensor::zeros(std::iter::once(1).chain(params.input_shape.clone()).collect());
        let pass = params.run(&probe, false)?;
        params.embedding_dim = pass.embeddings.row_len();
        params.num_classes = pass.logits.row_len();
        Ok(params)
    }

    pub fn cnn4(num_classes: usize) -> Self {
        let layers = vec![
            Layer::conv("conv1", 1, 10, 5, true),
            Layer::conv("conv2", 10, 20, 5, true),
            Layer::dense("fc1", 320, 50, true),
            Layer::dense("fc2", 50, num_classes, false),
        ];
        ModelParams::new(vec![1, 28, 28], layers, 3).expect("cnn4 layer shapes chain")
    }

    pub fn mlp2(inputs: usize, hidden: usize, num_classes: usize) -> Self {
        let layers = vec![
            Layer::dense("fc1", inputs, hidden, true),
            Layer::dense("fc2", hidden, num_classes, false),
        ];
        ModelParams::new(vec![inputs], layers, 1).expect("mlp2 layer shapes chain")
    }

    /// Fan-in scaled uniform initialisation: every weight and bias of a layer
    /// is drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init_uniform<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        for layer in &mut self.layers {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            for v in layer.weight.data_mut().iter_mut().chain(layer.bias.data_mut()) {
                *v = rng.random_range(-bound..bound);
            }
        }
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn extractor_boundary(&self) -> usize {
        self.extractor_boundary
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Zero-valued tensors shaped like every parameter.
    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
    }

    /// True when both models have the same layer names and tensor shapes.
    pub fn compatible(&self, other: &ModelParams) -> bool {
        self.extractor_boundary == other.extractor_boundary
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.op == b.op
                    && a.weight.same_shape(&b.weight)
                    && a.bias.same_shape(&b.bias)
            })
    }

    /// Forward pass without retaining intermediates.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardPass> {
        self.run(batch, false)
    }

    /// Forward pass that keeps what [`ModelParams::backward`] needs.
    pub fn forward_train(&self, batch: &Tensor) -> Result<ForwardPass> {
        self.run(batch, true)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let expected: usize = self.input_shape.iter().product();
        let conv_first = matches!(self.layers[0].op, LayerOp::Conv { .. });
        let ok = if conv_first {
            batch.shape().get(1..) == Some(self.input_shape.as_slice())
        } else {
            batch.shape().len() >= 2 && batch.row_len() == expected
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "batch",
                format!("model expects samples of shape {:?}, got batch {:?}", self.input_shape, batch.shape()),
            ))
        }
    }

    fn run(&self, batch: &Tensor, keep: bool) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let rows = batch.rows();
        let mut x = batch.clone();
        let mut embeddings = None;
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.extractor_boundary {
                let d = x.row_len();
                embeddings = Some(x.clone().reshape(vec![rows, d])?);
            }
            let (out, cache) = match layer.op {
                LayerOp::Conv { pool } => {
                    let z = layers::conv2d_forward(&layer.weight, &layer.bias, &x)?;
                    let a = layers::relu(&z);
                    if pool {
                        let p = layers::maxpool2(&a)?;
                        (p.output.clone(), (Some(a), Some(p)))
                    } else {
                        (a.clone(), (Some(a), None))
                    }
                }
                LayerOp::Dense { relu } => {
                    let z = layers::dense_forward(&layer.weight, &layer.bias, &x)?;
                    if relu {
                        let a = layers::relu(&z);
                        (a.clone(), (Some(a), None))
                    } else {
                        (z, (None, None))
                    }
                }
            };
            if keep {
                caches.push(LayerCache {
                    input: x,
                    activated: cache.0,
                    pooled: cache.1,
                });
            }
            x = out;
        }
        Ok(ForwardPass {
            embeddings: embeddings.expect("boundary lies inside the layer stack"),
            logits: x,
            caches,
        })
    }

    /// Back-propagates `dlogits`, adding `dembeddings` (if any) where the
    /// extractor output enters the head. Requires a pass from `forward_train`.
    pub fn backward(&self, pass: &ForwardPass, dlogits: &Tensor, dembeddings: Option<&Tensor>) -> Result<Gradients> {
        if pass.caches.len() != self.layers.len() {
            return Err(Error::State("backward needs a pass from forward_train".into()));
        }
        if !dlogits.same_shape(&pass.logits) {
            return Err(Error::dim("dlogits", "shape differs from logits"));
        }
        let mut grads = vec![Tensor::zeros(vec![0]); 2 * self.layers.len()];
        let mut g = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let cache = &pass.caches[i];
            if i + 1 == self.extractor_boundary {
                if let Some(de) = dembeddings {
                    if de.len() != g.len() {
                        return Err(Error::dim("dembeddings", "size differs from embeddings"));
                    }
                    for (a, b) in g.data_mut().iter_mut().zip(de.data()) {
                        *a += b;
                    }
                }
            }
            let lg = match layer.op {
                LayerOp::Conv { pool } => {
                    let activated = cache.activated.as_ref().expect("conv caches relu output");
                    if pool {
                        let p = cache.pooled.as_ref().expect("pool caches argmax");
                        let g_out = g.reshape(p.output.shape().to_vec())?;
                        g = layers::maxpool2_backward(activated.shape(), &p.argmax, &g_out)?;
                    } else {
                        g = g.reshape(activated.shape().to_vec())?;
                    }
                    let dz = layers::relu_backward(activated, &g)?;
                    layers::conv2d_backward(&layer.weight, &cache.input, &dz)?
                }
                LayerOp::Dense { relu } => {
                    let dz = match &cache.activated {
                        Some(a) if relu => {
                            let g = g.reshape(a.shape().to_vec())?;
                            layers::relu_backward(a, &g)?
                        }
                        _ => g,
                    };
                    layers::dense_backward(&layer.weight, &cache.input, &dz)?
                }
            };
            grads[2 * i] = lg.weight;
            grads[2 * i + 1] = lg.bias;
            g = lg.input;
        }
        Ok(Gradients(grads))
    }

    /// `self ← self + scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) -> Result<()> {
        if !self.compatible(other) {
            return Err(Error::dim("params", "models are not element-wise combinable"));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// Copy with every value set to zero.
    pub fn zeroed(&self) -> ModelParams {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }
}

/// Convenience wrapper returning `(embeddings, logits)`.
pub fn model_forward(params: &ModelParams, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let pass = params.forward(batch)?;
    Ok((pass.embeddings, pass.logits))
}

/// Loss terms and gradients for one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchLossReport {
    pub total_loss: f64,
    pub ce_loss: f64,
    pub proto_loss: f64,
    pub grads: Gradients,
}

/// Cross-entropy plus `lambda` times the mean squared distance between each
/// embedding and the global prototype of its class.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    protos: &GlobalPrototypeSet,
    lambda: f64,
) -> Result<BatchLossReport> {
    loss_and_grad_with(params, batch, labels, protos, lambda, ProtoDistance::Squared)
}

/// [`loss_and_grad`] with a selectable distance for the prototype term.
///
/// Samples whose class has no global prototype contribute zero; the term is
/// still averaged over the full batch. Prototypes are constants.
pub fn loss_and_grad_with(
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    protos: &GlobalPrototypeSet,
    lambda: f64,
    distance: ProtoDistance,
) -> Result<BatchLossReport> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be non-negative, got {lambda}")));
    }
    let pass = params.forward_train(batch)?;
    let (ce_loss, dlogits) = softmax_cross_entropy(&pass.logits, labels)?;

    let rows = pass.embeddings.rows();
    let d = pass.embeddings.row_len();
    if lambda > 0.0 {
        if let Some(dim) = protos.dim() {
            if dim != d {
                return Err(Error::dim(
                    "prototypes",
                    format!("prototype dimension {dim} differs from embedding dimension {d}"),
                ));
            }
        }
    }

    let mut proto_loss = 0.0;
    let mut dembed = vec![0.0; rows * d];
    let scale = 1.0 / rows as f64;
    for (b, &label) in labels.iter().enumerate() {
        let Some(target) = protos.get(label) else { continue };
        let e = pass.embeddings.row(b);
        if target.vector.len() != d {
            if lambda > 0.0 {
                return Err(Error::dim("prototypes", "prototype dimension differs from embedding"));
            }
            continue;
        }
        let (dist, grad) = distance.value_and_grad(e, target.vector.data());
        proto_loss += dist;
        for (acc, gv) in dembed[b * d..(b + 1) * d].iter_mut().zip(grad) {
            *acc = lambda * scale * gv;
        }
    }
    proto_loss *= scale;

    let dembeddings = Tensor::new(vec![rows, d], dembed)?;
    let extra = (lambda > 0.0 && !protos.is_empty()).then_some(&dembeddings);
    let grads = params.backward(&pass, &dlogits, extra)?;
    Ok(BatchLossReport {
        total_loss: ce_loss + lambda * proto_loss,
        ce_loss,
        proto_loss,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::{GlobalPrototype, GlobalPrototypeSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cnn4_shapes() {
        let m = ModelParams::cnn4(10);
        assert_eq!(m.embedding_dim(), 50);
        assert_eq!(m.num_classes(), 10);
        assert_eq!(m.num_parameters(), 260 + 5020 + 16050 + 510);
    }

    #[test]
    fn zero_model_gives_zero_outputs() {
        let m = ModelParams::cnn4(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(vec![2, 1, 28, 28], &mut rng);
        let (e, l) = model_forward(&m, &x).unwrap();
        assert_eq!(e.shape(), &[2, 50]);
        assert!(e.data().iter().chain(l.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_extractor_passes_inputs_through() {
        let mut m = ModelParams::mlp2(3, 3, 2);
        for i in 0..3 {
            m.layers[0].weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_rows(&[vec![0.5, 2.0, 0.0], vec![1.0, 0.25, 3.0]]).unwrap();
        let (e, _) = model_forward(&m, &x).unwrap();
        assert_eq!(e.data(), x.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ModelParams::cnn4(10).init_uniform(&mut ChaCha8Rng::seed_from_u64(9));
        let x = rand_tensor(vec![3, 1, 28, 28], &mut ChaCha8Rng::seed_from_u64(10));
        let a = model_forward(&m, &x).unwrap();
        let b = model_forward(&m, &x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(bits(&a.1), bits(&b.1));
    }

    #[test]
    fn batch_shape_mismatch() {
        let m = ModelParams::cnn4(10);
        assert!(matches!(
            model_forward(&m, &Tensor::zeros(vec![1, 1, 27, 28])),
            Err(Error::Dimension { .. })
        ));
        let m = ModelParams::mlp2(4, 3, 2);
        assert!(model_forward(&m, &Tensor::zeros(vec![2, 5])).is_err());
    }

    #[test]
    fn invalid_boundary() {
        let layers = vec![Layer::dense("fc", 2, 2, false)];
        assert!(ModelParams::new(vec![2], layers, 1).is_err());
    }

    #[test]
    fn lambda_zero_is_pure_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ModelParams::mlp2(5, 6, 3).init_uniform(&mut rng);
        let x = rand_tensor(vec![4, 5], &mut rng);
        let labels = [0, 2, 1, 2];
        let mut protos = GlobalPrototypeSet::default();
        protos.insert(2, GlobalPrototype { vector: rand_tensor(vec![6], &mut rng), contributors: 1 });
        let reg = loss_and_grad(&m, &x, &labels, &protos, 0.0).unwrap();
        let plain = loss_and_grad(&m, &x, &labels, &GlobalPrototypeSet::default(), 0.0).unwrap();
        assert_eq!(reg.total_loss, reg.ce_loss);
        assert!(reg.proto_loss > 0.0);
        assert_eq!(reg.grads, plain.grads);
    }

    #[test]
    fn zero_distance_gives_zero_proto_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = ModelParams::mlp2(4, 5, 2).init_uniform(&mut rng);
        let x = rand_tensor(vec![1, 4], &mut rng);
        let (e, _) = model_forward(&m, &x).unwrap();
        let mut protos = GlobalPrototypeSet::default();
        protos.insert(1, GlobalPrototype { vector: Tensor::vector(e.row(0).to_vec()), contributors: 1 });
        let r = loss_and_grad(&m, &x, &[1], &protos, 1.0).unwrap();
        assert_eq!(r.proto_loss, 0.0);
        assert_eq!(r.total_loss, r.ce_loss);
    }

    #[test]
    fn prototype_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = ModelParams::mlp2(4, 5, 2).init_uniform(&mut rng);
        let x = rand_tensor(vec![2, 4], &mut rng);
        let mut protos = GlobalPrototypeSet::default();
        protos.insert(0, GlobalPrototype { vector: Tensor::zeros(vec![3]), contributors: 1 });
        assert!(matches!(
            loss_and_grad(&m, &x, &[0, 1], &protos, 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_requires_training_pass() {
        let m = ModelParams::mlp2(2, 2, 2);
        let x = Tensor::zeros(vec![1, 2]);
        let pass = m.forward(&x).unwrap();
        assert!(matches!(m.backward(&pass, &pass.logits, None), Err(Error::State(_))));
    }
}
