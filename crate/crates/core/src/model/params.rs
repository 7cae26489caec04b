use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LocHead, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Truncated normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub attn: Attn,
    pub cross: Option<(Norm, Attn)>,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Stack {
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

/// Index map from architectural role to parameter slot.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub embed: usize,
    pub proj: Linear,
    pub cls: usize,
    pub modality: Option<usize>,
    pub text: Option<Stack>,
    pub video: Option<Stack>,
    pub joint: Stack,
    pub head_cls: Mlp,
    pub head_loc: Option<Mlp>,
    pub span: Option<(Mlp, Mlp)>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    d: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, final_layer: bool) -> Linear {
        let init = if final_layer { Init::Zeros } else { Init::Xavier };
        Linear {
            w: self.add(format!("{name}.weight"), vec![inp, out], init),
            b: self.add(format!("{name}.bias"), vec![out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str) -> Norm {
        Norm {
            g: self.add(format!("{name}.gain"), vec![self.d], Init::Ones),
            b: self.add(format!("{name}.bias"), vec![self.d], Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str) -> Attn {
        let d = self.d;
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, false),
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, false),
            o: self.linear(&format!("{name}.o"), d, d, false),
        }
    }

    fn stack(&mut self, name: &str, depth: usize, ffn: usize, cross: bool) -> Stack {
        let d = self.d;
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("{name}.blocks.{i}");
                let ln1 = self.norm(&format!("{p}.ln1"));
                let attn = self.attn(&format!("{p}.attn"));
                let cross = cross.then(|| (self.norm(&format!("{p}.ln_cross")), self.attn(&format!("{p}.cross"))));
                let ln2 = self.norm(&format!("{p}.ln2"));
                let ff1 = self.linear(&format!("{p}.ff1"), d, ffn, false);
                let ff2 = self.linear(&format!("{p}.ff2"), ffn, d, false);
                Block {
                    ln1,
                    attn,
                    cross,
                    ln2,
                    ff1,
                    ff2,
                }
            })
            .collect();
        let norm = self.norm(&format!("{name}.norm"));
        Stack { blocks, norm }
    }

    fn mlp(&mut self, name: &str) -> Mlp {
        let d = self.d;
        Mlp {
            hidden: self.linear(&format!("{name}.hidden"), d, d, false),
            out: self.linear(&format!("{name}.out"), d, 1, true),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let ffn = cfg.ffn_width();
        let mut b = Builder {
            specs: Vec::new(),
            d,
        };
        let (has_text, has_video) = cfg.variant.stacks();
        let embed = b.add("text.embed".into(), vec![cfg.vocab_size, d], Init::Normal(1.0 / (d as f64).sqrt()));
        let proj = b.linear("video.proj", cfg.input_dim, d, false);
        let cls = b.add("cls".into(), vec![1, d], Init::Normal(INIT_STD));
        let modality = cfg
            .modality_embeddings
            .then(|| b.add("joint.modality".into(), vec![2, d], Init::Normal(INIT_STD)));
        let text = has_text.then(|| b.stack("text", cfg.text_layers, ffn, false));
        let video = has_video.then(|| b.stack("video", cfg.video_layers, ffn, false));
        let joint = b.stack("joint", cfg.joint_layers, ffn, cfg.variant.is_decoder());
        let head_cls = b.mlp("head_cls");
        let (head_loc, span) = match (cfg.variant.localizes(), cfg.loc_head) {
            (false, _) => (None, None),
            (true, LocHead::FrameSigmoid) => (Some(b.mlp("head_loc")), None),
            (true, LocHead::SpanSoftmax) => (None, Some((b.mlp("span_start"), b.mlp("span_end")))),
        };
        Layout {
            specs: b.specs,
            embed,
            proj,
            cls,
            modality,
            text,
            video,
            joint,
            head_cls,
            head_loc,
            span,
        }
    }
}

/// Named trainable tensors of one model.
#[derive(Clone, Debug)]
pub struct Parameters<F> {
    config: ModelConfig,
    pub(crate) layout: Layout,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Parameters<F> {
    /// Assembles parameters from tensors in layout order, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if named.len() != layout.specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors for this config, found {}",
                layout.specs.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name {
                return Err(Error::Config(format!(
                    "expected parameter {}, found {name}",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::shape(format!(
                    "{name}: config implies {:?}, found {:?}",
                    spec.shape,
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.layout
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Xavier-uniform linear weights, `Normal(0, 1/sqrt(d))` phoneme embeddings
/// and `Normal(0, 0.02)` for the CLS and modality rows, truncated at two
/// standard deviations. Biases, layer-norm offsets and the output layers of
/// both heads start at zero.
pub fn init_parameters<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .specs
        .iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * std {
                                break F::lit(v);
                            }
                        })
                        .collect()
                }
                Init::Xavier => {
                    let fan: usize = spec.shape.iter().sum();
                    let a = (6.0 / fan as f64).sqrt();
                    (0..n).map(|_| F::lit(rng.random_range(-a..a))).collect()
                }
            };
            Tensor::new(spec.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Parameters {
        config: config.clone(),
        layout,
        tensors,
    })
}
