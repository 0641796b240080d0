//! Layer descriptors, parameter storage and the composite blocks the
//! Mobile-UNet is assembled from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::kernels::{self, BatchStats, BnMode};
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    TransposedConv,
    InvertedResidual,
    Batchnorm,
    Relu6,
    Sigmoid,
}

/// Static description of one layer: kernel `k`, stride `s`, expansion `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub s: usize,
    pub t: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: usize,
}

impl LayerSpec {
    /// Inverted residual with a 3×3 depthwise stage.
    pub fn inverted_residual(in_channels: usize, out_channels: usize, s: usize, t: usize) -> Self {
        Self {
            kind: LayerKind::InvertedResidual,
            k: 3,
            s,
            t,
            in_channels,
            out_channels,
            padding: 1,
        }
    }

    pub fn transposed_conv(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            k: 4,
            s: 2,
            t: 1,
            in_channels,
            out_channels,
            padding: 1,
        }
    }

    pub fn standard_conv(in_channels: usize, out_channels: usize, k: usize, s: usize) -> Self {
        Self {
            kind: LayerKind::StandardConv,
            k,
            s,
            t: 1,
            in_channels,
            out_channels,
            padding: k / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 {
            return Err(Error::config(format!("{self:?}: k and s must be at least 1")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(format!("{self:?}: channel counts must be positive")));
        }
        if self.kind == LayerKind::InvertedResidual && self.t == 0 {
            return Err(Error::config(format!(
                "{self:?}: expansion factor must be at least 1"
            )));
        }
        Ok(())
    }

    /// A residual shortcut exists exactly when the block preserves shape.
    pub fn has_residual(&self) -> bool {
        self.kind == LayerKind::InvertedResidual
            && self.s == 1
            && self.in_channels == self.out_channels
    }

    pub fn expanded_channels(&self) -> usize {
        self.in_channels * self.t
    }

    /// Output `(C, H, W)` for an input of spatial size `h × w`.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (ho, wo) = match self.kind {
            LayerKind::TransposedConv => (
                kernels::conv_transpose_output_len(h, self.k, self.s, self.padding, 0)?,
                kernels::conv_transpose_output_len(w, self.k, self.s, self.padding, 0)?,
            ),
            LayerKind::Batchnorm | LayerKind::Relu6 | LayerKind::Sigmoid => (h, w),
            _ => (
                kernels::conv_output_len(h, self.k, self.s, self.padding)?,
                kernels::conv_output_len(w, self.k, self.s, self.padding)?,
            ),
        };
        Ok((self.out_channels, ho, wo))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Named learnable parameters plus named non-learnable buffers
/// (batchnorm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            param_names: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.param_names.push(name.into());
        self.params.push(value);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Every tensor in serialization order: parameters, then buffers.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.param_names
            .iter()
            .zip(&self.params)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        if let Some(i) = self.param_names.iter().position(|n| n == name) {
            return Some(&mut self.params[i]);
        }
        self.buffer_names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.buffers[i])
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_tensors().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Records every parameter as a leaf of `g`; the returned vars are
    /// indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone())).collect()
    }

    pub fn apply_bn_updates(&mut self, updates: &[(BatchNormIds, BatchStats<T>)]) {
        for (ids, stats) in updates {
            let (lo, hi) = (ids.running_mean.0.min(ids.running_var.0), ids.running_mean.0.max(ids.running_var.0));
            let (head, tail) = self.buffers.split_at_mut(hi);
            let (a, b) = (&mut head[lo], &mut tail[0]);
            let (mean, var) = if ids.running_mean.0 < ids.running_var.0 {
                (a, b)
            } else {
                (b, a)
            };
            kernels::update_running_stats(stats, mean.data_mut(), var.data_mut());
        }
    }

    pub fn map_all(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in self.param_names.iter().zip(self.params.iter_mut()) {
            f(n, t);
        }
        for (n, t) in self.buffer_names.iter().zip(self.buffers.iter_mut()) {
            f(n, t);
        }
    }
}

/// How freshly built layers are filled.
pub enum Init<'a, R: Rng> {
    /// Fan-in scaled uniform weights, unit-gamma/zero-beta batchnorm.
    /// Transposed convolutions use the smaller linear-layer bound.
    Random(&'a mut R),
    /// Every tensor zero, running variance one.
    Zeros,
}

impl<R: Rng> Init<'_, R> {
    fn weight<T: Scalar>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        match self {
            Init::Random(rng) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
        }
    }

    /// Smaller uniform bound `1/√fan_in` for linear layers with no batchnorm
    /// behind them; the fan-in bound doubles the variance at every stage.
    fn linear_weight<T: Scalar>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        match self {
            Init::Random(rng) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
        }
    }

    fn bias<T: Scalar>(&mut self, n: usize, fan_in: usize) -> Tensor<T> {
        match self {
            Init::Random(rng) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(vec![n], |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(vec![n]),
        }
    }

    fn gamma<T: Scalar>(&self, n: usize) -> Tensor<T> {
        match self {
            Init::Random(_) => Tensor::full(vec![n], T::one()),
            Init::Zeros => Tensor::zeros(vec![n]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNormIds {
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        init: &mut Init<'_, R>,
    ) -> Self {
        Self {
            gamma: store.add_param(format!("{prefix}.weight"), init.gamma(channels)),
            beta: store.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(
                format!("{prefix}.running_mean"),
                Tensor::zeros(vec![channels]),
            ),
            running_var: store.add_buffer(
                format!("{prefix}.running_var"),
                Tensor::full(vec![channels], T::one()),
            ),
        }
    }
}

/// Forward-pass context: the graph, the parameter leaves bound on it, and
/// the batchnorm statistics collected in train mode.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub vars: &'a [Var],
    pub store: &'a ParamStore<T>,
    pub mode: BnMode,
    pub bn_updates: Vec<(BatchNormIds, BatchStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        vars: &'a [Var],
        store: &'a ParamStore<T>,
        mode: BnMode,
    ) -> Self {
        Self {
            graph,
            vars,
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn batchnorm(&mut self, x: Var, ids: BatchNormIds) -> Result<Var> {
        let (y, stats) = self.graph.batchnorm(
            x,
            self.vars[ids.gamma.0],
            self.vars[ids.beta.0],
            self.store.buffer(ids.running_mean).data(),
            self.store.buffer(ids.running_var).data(),
            self.mode,
        )?;
        if let Some(stats) = stats {
            self.bn_updates.push((ids, stats));
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
}

/// Bias-free convolution followed by batchnorm and an optional ReLU6.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BatchNormIds,
    pub kind: ConvKind,
    pub stride: usize,
    pub padding: usize,
    pub relu6: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        relu6: bool,
        init: &mut Init<'_, R>,
    ) -> Self {
        let (shape, fan_in) = match kind {
            ConvKind::Standard => (vec![out_channels, in_channels, k, k], in_channels * k * k),
            ConvKind::Depthwise => (vec![out_channels, 1, k, k], k * k),
        };
        let weight = store.add_param(format!("{prefix}.conv.weight"), init.weight(shape, fan_in));
        let bn = BatchNormIds::build(store, &format!("{prefix}.bn"), out_channels, init);
        Self {
            weight,
            bn,
            kind,
            stride,
            padding: k / 2,
            relu6,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.var(self.weight);
        let y = match self.kind {
            ConvKind::Standard => f.graph.conv2d(x, w, None, self.stride, self.padding)?,
            ConvKind::Depthwise => {
                f.graph
                    .depthwise_conv2d(x, w, None, self.stride, self.padding)?
            }
        };
        let y = f.batchnorm(y, self.bn)?;
        if self.relu6 {
            f.graph.relu6(y)
        } else {
            Ok(y)
        }
    }
}

/// MobileNetV2 bottleneck: pointwise expand → ReLU6 → depthwise → ReLU6 →
/// linear pointwise projection, plus the input when shapes permit.
///
/// With `t == 1` the expansion is the identity and its convolution is
/// omitted, as in MobileNetV2's first bottleneck.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub spec: LayerSpec,
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl InvertedResidual {
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: LayerSpec,
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.kind != LayerKind::InvertedResidual {
            return Err(Error::config(format!(
                "{prefix}: expected an inverted_residual spec, got {:?}",
                spec.kind
            )));
        }
        let hidden = spec.expanded_channels();
        let expand = (spec.t != 1).then(|| {
            ConvBn::build(
                store,
                &format!("{prefix}.expand"),
                ConvKind::Standard,
                spec.in_channels,
                hidden,
                1,
                1,
                true,
                init,
            )
        });
        let depthwise = ConvBn::build(
            store,
            &format!("{prefix}.depthwise"),
            ConvKind::Depthwise,
            hidden,
            hidden,
            spec.k,
            spec.s,
            true,
            init,
        );
        let project = ConvBn::build(
            store,
            &format!("{prefix}.project"),
            ConvKind::Standard,
            hidden,
            spec.out_channels,
            1,
            1,
            false,
            init,
        );
        Ok(Self {
            spec,
            expand,
            depthwise,
            project,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(expand) = &self.expand {
            h = expand.forward(f, h)?;
        }
        h = self.depthwise.forward(f, h)?;
        h = self.project.forward(f, h)?;
        if self.spec.has_residual() {
            h = f.graph.add(x, h)?;
        }
        Ok(h)
    }
}

/// Evaluates one inverted residual block on a tensor with running
/// batchnorm statistics.
pub fn inverted_residual<T: Scalar>(
    x: &Tensor<T>,
    block: &InvertedResidual,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let (c, _, _, _) = x.batch_dims()?;
    if c != block.spec.in_channels {
        return Err(Error::dim(format!(
            "inverted residual expects {} input channels, got {c}",
            block.spec.in_channels
        )));
    }
    let mut g = Graph::inference();
    let vars = store.bind(&mut g);
    let input = g.leaf(x.clone());
    let mut f = Forward::new(&mut g, &vars, store, BnMode::Infer);
    let out = block.forward(&mut f, input)?;
    Ok(g.value(out).clone())
}

/// Learnable upsampling: 4×4 stride-2 transposed convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct UpConv {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn build<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: LayerSpec,
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.kind != LayerKind::TransposedConv {
            return Err(Error::config(format!(
                "{prefix}: expected a transposed_conv spec, got {:?}",
                spec.kind
            )));
        }
        let fan_in = (spec.in_channels * spec.k * spec.k / (spec.s * spec.s)).max(1);
        let weight = store.add_param(
            format!("{prefix}.weight"),
            init.linear_weight(
                vec![spec.in_channels, spec.out_channels, spec.k, spec.k],
                fan_in,
            ),
        );
        let bias = store.add_param(format!("{prefix}.bias"), init.bias(spec.out_channels, fan_in));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.var(self.weight), f.var(self.bias));
        f.graph
            .conv_transpose2d(x, w, Some(b), self.spec.s, self.spec.padding, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_rule() {
        assert!(LayerSpec::inverted_residual(16, 16, 1, 6).has_residual());
        assert!(!LayerSpec::inverted_residual(16, 16, 2, 6).has_residual());
        assert!(!LayerSpec::inverted_residual(16, 24, 1, 6).has_residual());
    }

    #[test]
    fn zero_block_passes_input_through() {
        let mut store = ParamStore::<f32>::new();
        let spec = LayerSpec::inverted_residual(4, 4, 1, 6);
        let block =
            InvertedResidual::build(&mut store, "b", spec, &mut Init::<ChaCha8Rng>::Zeros).unwrap();
        let x = Tensor::from_fn(vec![4, 5, 5], |i| (i as f32 * 0.37).sin());
        let y = inverted_residual(&x, &block, &store).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn expansion_width_is_t_times_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LayerSpec::inverted_residual(16, 16, 1, 6);
        let block = InvertedResidual::build(&mut store, "b", spec, &mut Init::Random(&mut rng)).unwrap();
        let expand = block.expand.unwrap();
        assert_eq!(store.param(expand.weight).shape(), &[96, 16, 1, 1]);
        assert_eq!(store.param(block.depthwise.weight).shape(), &[96, 1, 3, 3]);
    }

    #[test]
    fn strided_block_halves_resolution_without_residual() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = LayerSpec::inverted_residual(8, 8, 2, 6);
        let block = InvertedResidual::build(&mut store, "b", spec, &mut Init::Random(&mut rng)).unwrap();
        let x = Tensor::full(vec![8, 10, 10], 0.5f32);
        let y = inverted_residual(&x, &block, &store).unwrap();
        assert_eq!(y.shape(), &[8, 5, 5]);
        assert!(!spec.has_residual());
    }

    #[test]
    fn spec_validation() {
        let mut bad = LayerSpec::inverted_residual(4, 4, 1, 0);
        assert!(bad.validate().is_err());
        bad.t = 1;
        bad.s = 0;
        assert!(bad.validate().is_err());
    }
}
