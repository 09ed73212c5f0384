//! Network architectures, the cut layer, and the client/server partition.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, Initializer, LayerSpec};
use crate::rng::{seeded, stream};
use crate::tensor::{GradientSet, ParameterSet, Tensor};

/// Input shape LeNet-class models declare: one 32x32 channel.
pub const LENET_INPUT: [usize; 3] = [1, 32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape (`[channels, height, width]` or `[features]`).
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}:", self.name, self.input_shape)?;
        for (i, l) in self.layers.iter().enumerate() {
            write!(f, "{}{l}", if i == 0 { " " } else { " -> " })?;
        }
        Ok(())
    }
}

impl ArchitectureSpec {
    /// Builds an architecture from layer tokens (see [`LayerSpec::parse`]),
    /// threading the per-sample shape through the stack.
    pub fn from_tokens(name: &str, input_shape: &[usize], class_count: usize, tokens: &[&str]) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(tokens.len());
        for token in tokens {
            let layer = LayerSpec::parse(token, &shape)?;
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        let spec = ArchitectureSpec { name: name.to_string(), layers, input_shape: input_shape.to_vec(), class_count };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks chain compatibility, layer count and the logit width.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidArchitecture("at least two layers required".into()));
        }
        let out = self.output_shapes()?;
        if out.last().map(Vec::as_slice) != Some(&[self.class_count][..]) {
            return Err(Error::InvalidArchitecture(format!(
                "final output {:?} does not match {} classes",
                out.last(),
                self.class_count
            )));
        }
        Ok(())
    }

    /// Per-sample output shape of every layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Number of parameter tensors held by the layers in `range`.
    pub fn tensor_count(&self, range: std::ops::Range<usize>) -> usize {
        self.layers[range].iter().map(|l| l.param_shapes().len()).sum()
    }

    /// Fresh parameters for the whole network, deterministic in `seed`.
    pub fn init_params(&self, init: Initializer, seed: u64) -> ParameterSet {
        let mut rng = seeded(seed, &[stream::INIT]);
        let mut entries = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let tensors = layer.init_params(init, &mut rng);
            for ((role, _), t) in layer.param_shapes().into_iter().zip(tensors) {
                entries.push((format!("layer{i}.{role}"), t));
            }
        }
        ParameterSet::new(entries).expect("layer indices make names unique")
    }

    pub fn segment(&self, range: std::ops::Range<usize>) -> Segment<'_> {
        Segment { layers: &self.layers[range.clone()], first: range.start }
    }

    pub fn full(&self) -> Segment<'_> {
        self.segment(0..self.layers.len())
    }

    /// Reshapes a batch of dataset samples to this architecture's input,
    /// converting `[H, W, C]` samples to channel-first and zero-padding them
    /// (centred) when the declared input is larger.
    pub fn fit_input(&self, batch: &Tensor) -> Result<Tensor> {
        fit_input(batch, &self.input_shape)
    }
}

/// See [`ArchitectureSpec::fit_input`].
pub fn fit_input(batch: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let n = batch.rows();
    let sample = &batch.shape()[1..];
    let want: usize = input_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    if sample.len() == 3 && input_shape.len() == 3 {
        let (h, w, c) = (sample[0], sample[1], sample[2]);
        let (tc, th, tw) = (input_shape[0], input_shape[1], input_shape[2]);
        if c == tc && th >= h && tw >= w {
            if c == 1 && th == h && tw == w {
                return batch.clone().reshape(shape);
            }
            let (top, left) = ((th - h) / 2, (tw - w) / 2);
            let mut out = vec![0.0; n * want];
            let src = batch.data();
            for s in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            let v = src[((s * h + y) * w + x) * c + ch];
                            out[s * want + (ch * th + y + top) * tw + x + left] = v;
                        }
                    }
                }
            }
            return Tensor::new(shape, out);
        }
    }
    if batch.row_len() == want {
        return batch.clone().reshape(shape);
    }
    Err(Error::ShapeMismatch(format!("dataset samples {sample:?} do not fit model input {input_shape:?}")))
}

/// Builds one of the named architectures with its default input and class
/// count: `lenet_small` on `[1, 32, 32]` with 10 classes, `mlp2` on 64
/// features with 10 classes.
pub fn build_architecture(name: &str) -> Result<ArchitectureSpec> {
    match name {
        "lenet_small" => build_architecture_for(name, &LENET_INPUT, 10),
        "mlp2" => build_architecture_for(name, &[64], 10),
        other => Err(Error::UnknownArchitecture(other.to_string())),
    }
}

/// Named architecture on a custom input shape and class count.
pub fn build_architecture_for(name: &str, input_shape: &[usize], classes: usize) -> Result<ArchitectureSpec> {
    let dense_out = format!("dense:{classes}");
    match name {
        "lenet_small" => ArchitectureSpec::from_tokens(
            name,
            input_shape,
            classes,
            &[
                "conv2d:6:5",
                "relu",
                "maxpool2d:2",
                "conv2d:16:5",
                "relu",
                "maxpool2d:2",
                "flatten",
                "dense:120",
                "relu",
                "dense:84",
                "relu",
                &dense_out,
            ],
        ),
        "mlp2" => {
            let flat = [input_shape.iter().product::<usize>()];
            ArchitectureSpec::from_tokens(name, &flat, classes, &["dense:128", "relu", &dense_out])
        }
        other => Err(Error::UnknownArchitecture(other.to_string())),
    }
}

/// Cut index after the first pooling layer when the model has one, else
/// after the first layer.
pub fn default_cut(arch: &ArchitectureSpec) -> usize {
    arch.layers
        .iter()
        .position(|l| matches!(l, LayerSpec::MaxPool2d { .. } | LayerSpec::AvgPool2d { .. }))
        .map(|p| p + 1)
        .unwrap_or(1)
        .min(arch.layers.len() - 1)
}

/// Layer inputs recorded during a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    pub output: Tensor,
}

impl Trace {
    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }

    /// The trace restricted to example `i` of the batch.
    pub fn example(&self, i: usize) -> Trace {
        Trace {
            inputs: self.inputs.iter().map(|t| t.slice_rows(i, i + 1)).collect(),
            output: self.output.slice_rows(i, i + 1),
        }
    }
}

/// A contiguous run of layers whose parameters are named by their global
/// layer index.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    layers: &'a [LayerSpec],
    first: usize,
}

impl<'a> Segment<'a> {
    pub fn layers(&self) -> &'a [LayerSpec] {
        self.layers
    }

    fn layer_params<'p>(&self, params: &'p ParameterSet) -> Result<Vec<Vec<&'p Tensor>>> {
        let mut entries = params.entries().iter();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut tensors = Vec::new();
            for (role, _) in layer.param_shapes() {
                let (name, t) = entries
                    .next()
                    .ok_or_else(|| Error::ShapeMismatch(format!("missing parameters for layer {}", self.first + i)))?;
                let expected = format!("layer{}.{role}", self.first + i);
                if *name != expected {
                    return Err(Error::ShapeMismatch(format!("expected parameter {expected}, found {name}")));
                }
                tensors.push(t);
            }
            out.push(tensors);
        }
        if entries.next().is_some() {
            return Err(Error::ShapeMismatch("extra parameters for segment".into()));
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
        let per_layer = self.layer_params(params)?;
        let mut x = input.clone();
        for (layer, p) in self.layers.iter().zip(&per_layer) {
            x = layer_forward(layer, &x, p)?;
        }
        Ok(x)
    }

    pub fn forward_traced(&self, params: &ParameterSet, input: &Tensor) -> Result<Trace> {
        let per_layer = self.layer_params(params)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (layer, p) in self.layers.iter().zip(&per_layer) {
            let y = layer_forward(layer, &x, p)?;
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok(Trace { inputs, output: x })
    }

    /// Back-propagates `upstream` (gradient w.r.t. the segment output) and
    /// returns the gradient w.r.t. the segment input plus the parameter
    /// gradients in parameter order.
    pub fn backward(&self, params: &ParameterSet, trace: &Trace, upstream: &Tensor) -> Result<(Tensor, GradientSet)> {
        let per_layer = self.layer_params(params)?;
        let mut grad = upstream.clone();
        let mut collected: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for ((layer, p), input) in self.layers.iter().zip(&per_layer).zip(&trace.inputs).rev() {
            let (dx, dparams) = layer_backward(layer, input, &grad, p)?;
            grad = dx;
            collected.push(dparams);
        }
        collected.reverse();
        let names = params.entries().iter().map(|(n, _)| n.clone());
        let grads = GradientSet::new(names.zip(collected.into_iter().flatten()).collect());
        Ok((grad, grads))
    }
}

/// A network split at `cut_index`: layers `[0, cut)` belong to the client,
/// `[cut, end)` to the main server.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub arch: ArchitectureSpec,
    pub cut_index: usize,
    pub client_params: ParameterSet,
    pub server_params: ParameterSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelStats {
    /// |W|
    pub total_params: usize,
    pub client_params: usize,
    /// β
    pub client_fraction: f64,
    /// q: cut-layer activation elements per sample.
    pub smashed_size: usize,
}

/// Splits `arch` at `cut_index` with Xavier-uniform initialisation.
pub fn split_at(arch: &ArchitectureSpec, cut_index: usize, seed: u64) -> Result<SplitModel> {
    split_at_with(arch, cut_index, seed, Initializer::default())
}

pub fn split_at_with(arch: &ArchitectureSpec, cut_index: usize, seed: u64, init: Initializer) -> Result<SplitModel> {
    let max = arch.layers.len().saturating_sub(1);
    if cut_index < 1 || cut_index > max {
        return Err(Error::CutOutOfRange { cut: cut_index, max });
    }
    arch.validate()?;
    let full = arch.init_params(init, seed);
    let (client_params, server_params) = full.split_at(arch.tensor_count(0..cut_index));
    Ok(SplitModel { arch: arch.clone(), cut_index, client_params, server_params })
}

impl SplitModel {
    pub fn client(&self) -> Segment<'_> {
        self.arch.segment(0..self.cut_index)
    }

    pub fn server(&self) -> Segment<'_> {
        self.arch.segment(self.cut_index..self.arch.layers.len())
    }

    pub fn full_params(&self) -> ParameterSet {
        self.client_params.concat(&self.server_params).expect("portions have disjoint names")
    }

    /// Splits a full parameter set into (client, server) portions at this
    /// model's cut.
    pub fn partition(&self, full: &ParameterSet) -> (ParameterSet, ParameterSet) {
        full.split_at(self.client_params.len())
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let smashed = self.client().forward(&self.client_params, input)?;
        self.server().forward(&self.server_params, &smashed)
    }
}

/// |W|, β and q for a split model.
pub fn model_stats(model: &SplitModel) -> ModelStats {
    let total = model.arch.param_count();
    let client = model.client_params.element_count();
    let shapes = model.arch.output_shapes().expect("validated at split time");
    ModelStats {
        total_params: total,
        client_params: client,
        client_fraction: client as f64 / total as f64,
        smashed_size: shapes[model.cut_index - 1].iter().product(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent per-layer count: conv (k*k*in + 1)*out, dense (in + 1)*out.
    #[test]
    fn lenet_parameter_count() {
        let arch = build_architecture("lenet_small").unwrap();
        let hand = (5 * 5 + 1) * 6 + (5 * 5 * 6 + 1) * 16 + (400 + 1) * 120 + (120 + 1) * 84 + (84 + 1) * 10;
        assert_eq!(hand, 61_706);
        assert_eq!(arch.param_count(), hand);
        // roughly the 60 thousand quoted for LeNet
        assert!((55_000..=65_000).contains(&arch.param_count()));
    }

    #[test]
    fn mlp2_parameter_count_and_stats() {
        let arch = build_architecture("mlp2").unwrap();
        assert_eq!(arch.param_count(), 9_610);
        let model = split_at(&arch, 1, 0).unwrap();
        let stats = model_stats(&model);
        assert_eq!(stats.smashed_size, 128);
        assert_eq!(stats.client_params, 64 * 128 + 128);
        assert!((stats.client_fraction - 8320.0 / 9610.0).abs() < 1e-15);
    }

    #[test]
    fn lenet_default_cut_smashed_size() {
        let arch = build_architecture("lenet_small").unwrap();
        let cut = default_cut(&arch);
        assert_eq!(cut, 3);
        let stats = model_stats(&split_at(&arch, cut, 1).unwrap());
        // shape oracle: 32 - 5 + 1 = 28 after conv, 28 / 2 = 14 after pooling
        let conv = 32 - 5 + 1;
        let side = conv / 2;
        assert_eq!(stats.smashed_size, 6 * side * side);
        assert_eq!(stats.smashed_size, 1176);
    }

    #[test]
    fn cut_bounds() {
        let arch = build_architecture("mlp2").unwrap();
        assert!(matches!(split_at(&arch, 0, 0), Err(Error::CutOutOfRange { .. })));
        assert!(matches!(split_at(&arch, 3, 0), Err(Error::CutOutOfRange { .. })));
        let last = split_at(&arch, 2, 0).unwrap();
        assert_eq!(last.server().layers().len(), 1);
    }

    #[test]
    fn unknown_architecture() {
        assert!(matches!(build_architecture("vgg16"), Err(Error::UnknownArchitecture(_))));
    }

    #[test]
    fn same_seed_same_init() {
        let arch = build_architecture("lenet_small").unwrap();
        let a = split_at(&arch, 3, 42).unwrap();
        let b = split_at(&arch, 3, 42).unwrap();
        let c = split_at(&arch, 3, 43).unwrap();
        assert_eq!(a.full_params().fingerprint(), b.full_params().fingerprint());
        assert_ne!(a.full_params().fingerprint(), c.full_params().fingerprint());
    }

    #[test]
    fn fit_input_pads_mnist_to_lenet() {
        let mut data = vec![0.0; 28 * 28];
        data[0] = 1.0;
        let batch = Tensor::new(vec![1, 28, 28, 1], data).unwrap();
        let fitted = fit_input(&batch, &LENET_INPUT).unwrap();
        assert_eq!(fitted.shape(), &[1, 1, 32, 32]);
        assert_eq!(fitted.data()[2 * 32 + 2], 1.0);
        assert_eq!(fitted.data().iter().sum::<f64>(), 1.0);
    }
}
