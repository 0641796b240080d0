use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Task};
use crate::error::{Error, Result};
use crate::nn::layer::{ConvBn, ConvKind, InvertedResidual, UpConv};
use crate::nn::{BnMode, Forward, Graph, Init, LayerKind, LayerSpec, ParamStore, Scalar, Tensor, Var};

/// Per-channel input standardization `(x - mean) / std`, applied after
/// scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config(format!("invalid normalization constants {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut Tensor<f32>) {
        let plane = x.len() / 3;
        for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Anything that maps a preprocessed `(3, S, S)` image to per-channel
/// probabilities `(C, S, S)`.
pub trait ProbabilityModel {
    fn task(&self) -> Task;
    fn input_size(&self) -> usize;
    fn normalization(&self) -> Option<&Normalization> {
        None
    }
    fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    block: InvertedResidual,
    tap: bool,
}

/// The encoder-decoder network and its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    stem: ConvBn,
    encoder: Vec<EncoderBlock>,
    ups: Vec<UpConv>,
    blocks: Vec<InvertedResidual>,
    pub normalization: Option<Normalization>,
}

/// Graph handles of one forward pass.
pub struct ForwardVars {
    pub output: Var,
    /// Head activations before the sigmoid.
    pub logits: Var,
    /// Encoder skip tensors X1, X2, ... in encoder order.
    pub taps: Vec<Var>,
    /// Decoder tensors entering each fusion, deepest first.
    pub decoder_inputs: Vec<Var>,
    /// Fusion results, deepest first.
    pub fused: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Random fan-in initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(config, &mut Init::Random(&mut rng))
    }

    /// Every parameter zero (biases included), running variance one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::assemble(config, &mut Init::<ChaCha8Rng>::Zeros)
    }

    fn assemble<R: rand::Rng>(config: ModelConfig, init: &mut Init<'_, R>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stem = ConvBn::build(
            &mut store,
            "encoder.stem",
            ConvKind::Standard,
            3,
            config.stem_channels,
            3,
            2,
            true,
            init,
        );
        let mut encoder = Vec::new();
        let mut cin = config.stem_channels;
        for st in &config.encoder_stages {
            for j in 0..st.n {
                let s = if j == 0 { st.s } else { 1 };
                let spec = LayerSpec::inverted_residual(cin, st.c, s, st.t);
                let prefix = format!("encoder.blocks.{}", encoder.len());
                let block = InvertedResidual::build(&mut store, &prefix, spec, init)?;
                encoder.push(EncoderBlock {
                    block,
                    tap: st.tap && j + 1 == st.n,
                });
                cin = st.c;
            }
        }
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for spec in &config.decoder_stages {
            match spec.kind {
                LayerKind::TransposedConv => {
                    let prefix = format!("decoder.up{}", ups.len() + 1);
                    ups.push(UpConv::build(&mut store, &prefix, *spec, init)?);
                }
                _ => {
                    let prefix = format!("decoder.block{}", blocks.len() + 1);
                    blocks.push(InvertedResidual::build(&mut store, &prefix, *spec, init)?);
                }
            }
        }
        Ok(Self {
            config,
            store,
            stem,
            encoder,
            ups,
            blocks,
            normalization: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn num_transposed_stages(&self) -> usize {
        self.ups.len()
    }

    pub fn num_decoder_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Names of every stored tensor, in container order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.store.named_tensors().map(|(n, _)| n.to_string()).collect()
    }

    pub fn encoder_names(&self) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .filter(|n| is_encoder_name(n))
            .collect()
    }

    /// Records the network on `f.graph` starting from the input var `x`.
    pub fn forward_graph(&self, f: &mut Forward<'_, T>, x: Var) -> Result<ForwardVars> {
        let mut h = self.stem.forward(f, x)?;
        let mut taps = Vec::new();
        for e in &self.encoder {
            h = e.block.forward(f, h)?;
            if e.tap {
                taps.push(h);
            }
        }
        let mut decoder_inputs = Vec::new();
        let mut fused = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            h = self.ups[i].forward(f, h)?;
            decoder_inputs.push(h);
            let skip = taps[taps.len() - 1 - i];
            h = f.graph.add(h, skip)?;
            fused.push(h);
            h = block.forward(f, h)?;
        }
        let logits = self.ups[self.blocks.len()].forward(f, h)?;
        let output = f.graph.sigmoid(logits)?;
        Ok(ForwardVars {
            output,
            logits,
            taps,
            decoder_inputs,
            fused,
        })
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let want = self.config.input_shape();
        if input.shape() != want {
            return Err(Error::dim(format!(
                "model input must be {want:?}, got {:?}",
                input.shape()
            )));
        }
        Ok(())
    }

    /// Inference forward pass with running batchnorm statistics; returns the
    /// output probabilities and the encoder skip tensors.
    pub fn forward_with_taps(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_input(input)?;
        let mut g = Graph::inference();
        let vars = self.store.bind(&mut g);
        let x = g.leaf(input.clone());
        let mut f = Forward::new(&mut g, &vars, &self.store, BnMode::Infer);
        let out = self.forward_graph(&mut f, x)?;
        let taps = out.taps.iter().map(|&v| g.value(v).clone()).collect();
        Ok((g.value(out.output).clone(), taps))
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_taps(input)?.0)
    }
}

pub fn is_encoder_name(name: &str) -> bool {
    name.starts_with("encoder.")
}

impl ProbabilityModel for Model<f32> {
    fn task(&self) -> Task {
        self.config.task
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    fn predict(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobile_unet::config::Task;

    fn small(task: Task) -> ModelConfig {
        ModelConfig::with_input_size(task, 32)
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let m = Model::<f32>::zeros(small(Task::Localization)).unwrap();
        let x = Tensor::from_fn(vec![3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 32, 32]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::build(small(Task::Segmentation), 9).unwrap();
        let b = Model::<f32>::build(small(Task::Segmentation), 9).unwrap();
        let c = Model::<f32>::build(small(Task::Segmentation), 10).unwrap();
        assert_eq!(a.store.params(), b.store.params());
        assert_ne!(a.store.params(), c.store.params());
    }

    #[test]
    fn wrong_input_shape() {
        let m = Model::<f32>::zeros(small(Task::Segmentation)).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(vec![3, 16, 16])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn names_are_unique() {
        let m = Model::<f32>::build(small(Task::Segmentation), 1).unwrap();
        let mut names = m.tensor_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(m.encoder_names().iter().all(|n| n.starts_with("encoder.")));
    }

    #[test]
    fn zeroed_decoder_branch_fuses_to_the_skip() {
        let mut m = Model::<f32>::build(small(Task::Segmentation), 4).unwrap();
        m.store.map_all(|name, t| {
            if name.starts_with("decoder.up1.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let x = Tensor::from_fn(vec![3, 32, 32], |i| ((i * 31) % 17) as f32 / 17.0);
        let mut g = Graph::inference();
        let vars = m.store.bind(&mut g);
        let xv = g.leaf(x);
        let mut f = Forward::new(&mut g, &vars, &m.store, BnMode::Infer);
        let out = m.forward_graph(&mut f, xv).unwrap();
        assert!(g.value(out.decoder_inputs[0]).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out.fused[0]), g.value(*out.taps.last().unwrap()));
    }
}
