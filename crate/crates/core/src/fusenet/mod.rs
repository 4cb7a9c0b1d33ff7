//! The text-guided fusion network: per-modality feature extraction, text
//! reduction, cascaded cross-attention blocks and a multi-scale
//! encoder-decoder.

mod io;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) use io::write_atomic;
pub use io::{load_model, save_model, FORMAT_VERSION, MAGIC};
pub use network::{Modality, Network};

use crate::hashing::derive_seed;
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::perception::QUESTION_COUNT;

/// Negative slope of every leaky activation in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum FusenetError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("not a model file: {0}")]
    Format(String),
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error("model file is inconsistent: {0}")]
    Consistency(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters; everything needed to lay out parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// Feature channels `C` after extraction.
    pub channels: usize,
    /// Number of stride-2 encoder stages.
    pub scales: usize,
    /// Text embedding dimension `d`.
    pub embed_dim: usize,
    /// Attention width `d_k`.
    pub attn_dim: usize,
    /// Cascaded cross-attention blocks.
    pub blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { channels: 32, scales: 2, embed_dim: 512, attn_dim: 64, blocks: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    FanIn(usize),
    Zero,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![cout, cin, k, k],
        init: Init::FanIn(cin * k * k),
    });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![cout], init: Init::Zero });
}

impl Architecture {
    pub fn validate(&self) -> Result<(), FusenetError> {
        let bad = |what: &str| Err(FusenetError::Architecture(what.to_owned()));
        if self.channels == 0 || self.embed_dim == 0 || self.attn_dim == 0 {
            return bad("channels, embed_dim and attn_dim must be positive");
        }
        if self.blocks == 0 {
            return bad("at least one cross-attention block is required");
        }
        if self.scales == 0 || self.scales > 6 {
            return bad("scales must be in 1..=6");
        }
        if self.channels.checked_shl(self.scales as u32).is_none_or(|c| c > 1 << 16) {
            return bad("channels << scales is too large");
        }
        Ok(())
    }

    /// Spatial sizes are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.scales
    }

    /// Parameters in storage order.
    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let (c, d, dk) = (self.channels, self.embed_dim, self.attn_dim);
        let mut s = Vec::new();
        for m in ["ir", "vis"] {
            conv_specs(&mut s, &format!("extract.{m}.conv1"), c, 1, 3);
            conv_specs(&mut s, &format!("extract.{m}.conv2"), c, c, 3);
        }
        for m in ["ir", "vis"] {
            s.push(ParamSpec {
                name: format!("reduce.{m}.weight"),
                shape: vec![1, QUESTION_COUNT],
                init: Init::FanIn(QUESTION_COUNT),
            });
        }
        for b in 0..self.blocks {
            let p = format!("attn{b}");
            s.push(ParamSpec { name: format!("{p}.w_q"), shape: vec![d, dk], init: Init::FanIn(d) });
            s.push(ParamSpec { name: format!("{p}.w_k"), shape: vec![c, dk], init: Init::FanIn(c) });
            s.push(ParamSpec { name: format!("{p}.w_v"), shape: vec![c, dk], init: Init::FanIn(c) });
            s.push(ParamSpec { name: format!("{p}.w_o"), shape: vec![2 * dk, c], init: Init::Zero });
        }
        conv_specs(&mut s, "merge", c, 2 * c, 1);
        conv_specs(&mut s, "enc0", c, c, 3);
        for k in 1..=self.scales {
            conv_specs(&mut s, &format!("down{k}"), c << k, c << (k - 1), 3);
        }
        for k in (1..=self.scales).rev() {
            conv_specs(&mut s, &format!("up{k}.reduce"), c << (k - 1), c << k, 1);
            conv_specs(&mut s, &format!("up{k}.conv"), c << (k - 1), c << (k - 1), 3);
        }
        conv_specs(&mut s, "head", 1, c, 1);
        s
    }
}

/// All trainable parameters plus the architecture they belong to.
///
/// Values are kept representable in 32-bit floats so that the on-disk
/// format round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
}

pub(crate) fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}

impl FusionModel {
    /// Seeded fan-in uniform initialization for leaky activations; biases
    /// and attention output projections start at zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, FusenetError> {
        arch.validate()?;
        let specs = arch.param_specs();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut t = match spec.init {
                Init::Zero => Tensor::zeros(spec.shape),
                Init::FanIn(fan_in) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                        b"fusenet-init",
                        &seed.to_le_bytes(),
                        spec.name.as_bytes(),
                    ]));
                    let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
                    Tensor::uniform(spec.shape, -bound, bound, &mut rng)
                }
            };
            round_to_f32(&mut t);
            names.push(spec.name);
            params.push(t);
        }
        Ok(Self { arch, names, params })
    }

    /// Assemble from named tensors; names and shapes must match the layout.
    pub fn from_named(arch: Architecture, named: Vec<(String, Tensor)>) -> Result<Self, FusenetError> {
        arch.validate().map_err(|e| FusenetError::Consistency(e.to_string()))?;
        let specs = arch.param_specs();
        if specs.len() != named.len() {
            return Err(FusenetError::Consistency(format!("expected {} tensors, found {}", specs.len(), named.len())));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name {
                return Err(FusenetError::Consistency(format!("expected tensor {}, found {name}", spec.name)));
            }
            if spec.shape != t.shape() {
                return Err(FusenetError::Consistency(format!(
                    "{name}: header implies shape {:?}, tensor has {:?}",
                    spec.shape,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(FusenetError::Consistency(format!("{name}: non-finite values")));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { arch, names, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable access for optimizers; call [`FusionModel::quantize`] after
    /// updating.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Round every parameter to the nearest 32-bit float.
    pub fn quantize(&mut self) {
        self.params.iter_mut().for_each(round_to_f32);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Network<'t, '_> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        Network::new(&self.arch, &self.names, vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_consistent() {
        let arch = Architecture::default();
        let model = FusionModel::new(arch, 1).unwrap();
        let specs = arch.param_specs();
        assert_eq!(model.params().len(), specs.len());
        let mut names: Vec<_> = model.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        assert_eq!(model.param("attn1.w_o").unwrap().shape(), &[128, 32]);
        assert!(model.param("attn0.w_o").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(model.param("down2.weight").is_some_and(|t| t.shape() == [128, 64, 3, 3]));
        assert!(model.param("up1.conv.bias").is_some_and(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let arch = Architecture { channels: 4, embed_dim: 8, attn_dim: 4, ..Default::default() };
        let a = FusionModel::new(arch, 3).unwrap();
        assert_eq!(a, FusionModel::new(arch, 3).unwrap());
        assert_ne!(a, FusionModel::new(arch, 4).unwrap());
        for p in a.params() {
            assert!(p.data().iter().all(|&v| f64::from(v as f32) == v));
        }
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        for arch in [
            Architecture { channels: 0, ..Default::default() },
            Architecture { scales: 0, ..Default::default() },
            Architecture { scales: 7, ..Default::default() },
        ] {
            assert!(matches!(FusionModel::new(arch, 0), Err(FusenetError::Architecture(_))));
        }
    }
}
