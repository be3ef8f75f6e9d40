//! Network specs and their layer programs.
//!
//! Each spec compiles to a flat list of [`Layer`]s with parameter offsets resolved.
//! Residual connections and multi-head discriminators use a small save/restore
//! stack, so one interpreter drives every architecture.

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use super::tape::{ConvGeom, LinearGeom, PadMode, Slot, Tape, Var};
use super::tensor::Tensor;
use crate::data::Rng;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NetworkSpec {
    /// Encoder, residual trunk, decoder; `tanh` output.
    Generator {
        channels: usize,
        ngf: usize,
        n_down: usize,
        n_res: usize,
        outer_kernel: usize,
    },
    /// One patch discriminator per entry of `heads` (its number of stride-2 layers).
    Discriminator {
        channels: usize,
        ndf: usize,
        heads: Vec<usize>,
    },
    /// Area downsample, strided convolutions, then one linear score.
    ImportanceBackbone {
        channels: usize,
        downsample_to: usize,
        ndf: usize,
        n_convs: usize,
    },
    TestMlp {
        inputs: usize,
        hidden: usize,
        outputs: usize,
    },
}

impl NetworkSpec {
    pub fn paper_generator(channels: usize) -> Self {
        NetworkSpec::Generator {
            channels,
            ngf: 64,
            n_down: 2,
            n_res: 9,
            outer_kernel: 7,
        }
    }

    pub fn paper_discriminator(channels: usize) -> Self {
        NetworkSpec::Discriminator {
            channels,
            ndf: 64,
            heads: vec![3, 5],
        }
    }

    pub fn paper_importance(channels: usize) -> Self {
        NetworkSpec::ImportanceBackbone {
            channels,
            downsample_to: 64,
            ndf: 64,
            n_convs: 4,
        }
    }

    pub fn reduced_generator(channels: usize) -> Self {
        NetworkSpec::Generator {
            channels,
            ngf: 8,
            n_down: 1,
            n_res: 2,
            outer_kernel: 5,
        }
    }

    pub fn reduced_discriminator(channels: usize) -> Self {
        NetworkSpec::Discriminator {
            channels,
            ndf: 8,
            heads: vec![2],
        }
    }

    pub fn reduced_importance(channels: usize) -> Self {
        NetworkSpec::ImportanceBackbone {
            channels,
            downsample_to: 16,
            ndf: 8,
            n_convs: 4,
        }
    }

    /// The same architecture for inputs with `c` channels.
    pub fn with_channels(&self, c: usize) -> Self {
        let mut s = self.clone();
        match &mut s {
            NetworkSpec::Generator { channels, .. }
            | NetworkSpec::Discriminator { channels, .. }
            | NetworkSpec::ImportanceBackbone { channels, .. } => *channels = c,
            NetworkSpec::TestMlp { .. } => {}
        }
        s
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NetworkSpec::Generator { .. } => "generator",
            NetworkSpec::Discriminator { .. } => "discriminator",
            NetworkSpec::ImportanceBackbone { .. } => "importance-backbone",
            NetworkSpec::TestMlp { .. } => "test-mlp",
        }
    }

    /// Output shape of each head for an input of shape `(c, h, w)`.
    pub fn output_shapes(&self, input: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
        let (c, h, w) = input;
        match self {
            NetworkSpec::Generator { channels, n_down, .. } => {
                check_channels(*channels, c)?;
                let f = 1usize << n_down;
                if h % f != 0 || w % f != 0 || h / f < 2 || w / f < 2 {
                    return Err(Error::Shape(format!(
                        "generator with {n_down} downsamplings needs sides divisible by {f}, got {h}x{w}"
                    )));
                }
                Ok(vec![(c, h, w)])
            }
            NetworkSpec::Discriminator { channels, heads, .. } => {
                check_channels(*channels, c)?;
                heads
                    .iter()
                    .map(|&layers| {
                        let (mut hh, mut ww) = (h, w);
                        for _ in 0..layers {
                            hh = (hh + 2).checked_sub(4).map(|v| v / 2 + 1).unwrap_or(0);
                            ww = (ww + 2).checked_sub(4).map(|v| v / 2 + 1).unwrap_or(0);
                        }
                        if hh < 3 || ww < 3 {
                            return Err(Error::Shape(format!(
                                "{h}x{w} input too small for a {layers}-layer discriminator head"
                            )));
                        }
                        Ok((1, 1, 1))
                    })
                    .collect()
            }
            NetworkSpec::ImportanceBackbone {
                channels,
                downsample_to,
                ..
            } => {
                check_channels(*channels, c)?;
                if h != w || h % downsample_to != 0 {
                    return Err(Error::Shape(format!(
                        "importance input {h}x{w} cannot be area-downsampled to {downsample_to}"
                    )));
                }
                Ok(vec![(1, 1, 1)])
            }
            NetworkSpec::TestMlp { inputs, outputs, .. } => {
                if c * h * w != *inputs {
                    return Err(Error::Shape(format!(
                        "test-mlp expects {inputs} inputs, got {}",
                        c * h * w
                    )));
                }
                Ok(vec![(*outputs, 1, 1)])
            }
        }
    }
}

fn check_channels(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("expected {expected} channels, got {got}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(ConvGeom),
    Linear(LinearGeom),
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Upsample2,
    AreaTo(usize),
    Mean,
    /// Push the current activation.
    Save,
    /// Pop a saved activation and add it to the current one.
    AddSaved,
    /// Emit the current activation as an output and restart from the input.
    Output,
}

struct Program {
    layers: Vec<Layer>,
    n_params: usize,
    biases: Vec<(usize, usize)>,
    last_linear: Option<(usize, usize)>,
}

impl Program {
    fn new() -> Self {
        Self {
            layers: Vec::new(),
            n_params: 0,
            biases: Vec::new(),
            last_linear: None,
        }
    }

    fn alloc(&mut self, n: usize) -> usize {
        let off = self.n_params;
        self.n_params += n;
        off
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, mode: PadMode, bias: bool) {
        let w_off = self.alloc(out_c * in_c * k * k);
        let b_off = bias.then(|| {
            let b = self.alloc(out_c);
            self.biases.push((b, out_c));
            b
        });
        self.layers.push(Layer::Conv(ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            pad,
            mode,
            w_off,
            b_off,
        }));
    }

    fn linear(&mut self, in_len: usize, out_len: usize) {
        let w_off = self.alloc(in_len * out_len);
        let b_off = self.alloc(out_len);
        self.biases.push((b_off, out_len));
        self.last_linear = Some((w_off, in_len * out_len + out_len));
        self.layers.push(Layer::Linear(LinearGeom {
            in_len,
            out_len,
            w_off,
            b_off,
        }));
    }

    fn push(&mut self, l: Layer) {
        self.layers.push(l);
    }
}

fn compile(spec: &NetworkSpec) -> Result<Program> {
    let mut p = Program::new();
    match spec {
        NetworkSpec::Generator {
            channels,
            ngf,
            n_down,
            n_res,
            outer_kernel,
        } => {
            let (c, ngf, k) = (*channels, *ngf, *outer_kernel);
            if k % 2 == 0 || ngf == 0 {
                return Err(Error::Config("generator needs odd outer_kernel and ngf > 0".into()));
            }
            // Convolutions feeding an instance norm carry no bias: the norm removes it.
            p.conv(c, ngf, k, 1, k / 2, PadMode::Reflect, false);
            p.push(Layer::InstanceNorm);
            p.push(Layer::Relu);
            let mut width = ngf;
            for _ in 0..*n_down {
                p.conv(width, width * 2, 3, 2, 1, PadMode::Zero, false);
                p.push(Layer::InstanceNorm);
                p.push(Layer::Relu);
                width *= 2;
            }
            for _ in 0..*n_res {
                p.push(Layer::Save);
                p.conv(width, width, 3, 1, 1, PadMode::Reflect, false);
                p.push(Layer::InstanceNorm);
                p.push(Layer::Relu);
                p.conv(width, width, 3, 1, 1, PadMode::Reflect, false);
                p.push(Layer::InstanceNorm);
                p.push(Layer::AddSaved);
            }
            for _ in 0..*n_down {
                p.push(Layer::Upsample2);
                p.conv(width, width / 2, 3, 1, 1, PadMode::Reflect, false);
                p.push(Layer::InstanceNorm);
                p.push(Layer::Relu);
                width /= 2;
            }
            p.conv(width, c, k, 1, k / 2, PadMode::Reflect, true);
            p.push(Layer::Tanh);
            p.push(Layer::Output);
        }
        NetworkSpec::Discriminator { channels, ndf, heads } => {
            if heads.is_empty() || heads.contains(&0) || *ndf == 0 {
                return Err(Error::Config("discriminator needs ndf > 0 and non-empty heads".into()));
            }
            for &layers in heads {
                p.conv(*channels, *ndf, 4, 2, 1, PadMode::Zero, true);
                p.push(Layer::LeakyRelu);
                let mut width = *ndf;
                for _ in 1..layers {
                    let next = (width * 2).min(ndf * 8);
                    p.conv(width, next, 4, 2, 1, PadMode::Zero, false);
                    p.push(Layer::InstanceNorm);
                    p.push(Layer::LeakyRelu);
                    width = next;
                }
                p.conv(width, 1, 4, 1, 1, PadMode::Zero, true);
                p.push(Layer::Mean);
                p.push(Layer::Output);
            }
        }
        NetworkSpec::ImportanceBackbone {
            channels,
            downsample_to,
            ndf,
            n_convs,
        } => {
            let side = downsample_to >> n_convs;
            if *ndf == 0 || side == 0 || side << n_convs != *downsample_to {
                return Err(Error::Config(format!(
                    "importance downsample_to {downsample_to} must be divisible by 2^{n_convs}"
                )));
            }
            p.push(Layer::AreaTo(*downsample_to));
            let mut width = *channels;
            for i in 0..*n_convs {
                let next = (ndf << i).min(ndf * 8);
                p.conv(width, next, 4, 2, 1, PadMode::Zero, true);
                p.push(Layer::LeakyRelu);
                width = next;
            }
            p.linear(width * side * side, 1);
            p.push(Layer::Output);
        }
        NetworkSpec::TestMlp {
            inputs,
            hidden,
            outputs,
        } => {
            p.linear(*inputs, *hidden);
            p.push(Layer::Tanh);
            p.linear(*hidden, *outputs);
            p.push(Layer::Output);
        }
    }
    Ok(p)
}

/// A spec with its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    pub params: ParamVector,
    layers: Vec<Layer>,
    last_linear: Option<(usize, usize)>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    spec: NetworkSpec,
    params: ParamVector,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkRepr {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = NetworkRepr::deserialize(d)?;
        Network::from_params(repr.spec, repr.params).map_err(serde::de::Error::custom)
    }
}

impl Network {
    /// Gaussian(0, 0.02) weights, zero biases.
    pub fn new(name: &str, spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let prog = compile(&spec)?;
        let mut params = ParamVector::gaussian(name, prog.n_params, INIT_STD, rng);
        for &(off, len) in &prog.biases {
            params.values[off..off + len].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Self {
            spec,
            params,
            layers: prog.layers,
            last_linear: prog.last_linear,
        })
    }

    pub fn zeros(name: &str, spec: NetworkSpec) -> Result<Self> {
        let prog = compile(&spec)?;
        Ok(Self {
            spec,
            params: ParamVector::zeros(name, prog.n_params),
            layers: prog.layers,
            last_linear: prog.last_linear,
        })
    }

    pub fn from_params(spec: NetworkSpec, params: ParamVector) -> Result<Self> {
        let prog = compile(&spec)?;
        params.check_consistent()?;
        if params.len() != prog.n_params {
            return Err(Error::Checkpoint(format!(
                "`{}` has {} parameters, spec needs {}",
                params.name,
                params.len(),
                prog.n_params
            )));
        }
        Ok(Self {
            spec,
            params,
            layers: prog.layers,
            last_linear: prog.last_linear,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.params.name
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Sets the final linear layer to zero so every input gets the same output.
    pub fn zero_head(&mut self) {
        if let Some((off, len)) = self.last_linear {
            self.params.values[off..off + len].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Slot {
        tape.bind(&self.params)
    }

    /// Records the forward pass on `tape`; returns one output per head.
    ///
    /// `slot` must come from [`Network::bind`] on the same tape.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, slot: Slot, x: Var) -> Result<Vec<Var>> {
        let t = tape.value(x);
        self.spec.output_shapes(t.shape())?;
        let mut cur = x;
        let mut stack = Vec::new();
        let mut outputs = Vec::new();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(g) => tape.conv(cur, slot, *g)?,
                Layer::Linear(g) => tape.linear(cur, slot, *g)?,
                Layer::InstanceNorm => tape.instance_norm(cur),
                Layer::Relu => tape.relu(cur),
                Layer::LeakyRelu => tape.leaky_relu(cur, LEAK),
                Layer::Tanh => tape.tanh(cur),
                Layer::Upsample2 => tape.upsample2(cur),
                Layer::AreaTo(side) => {
                    let h = tape.value(cur).h;
                    tape.avg_pool(cur, h / side)?
                }
                Layer::Mean => tape.mean(cur),
                Layer::Save => {
                    stack.push(cur);
                    cur
                }
                Layer::AddSaved => {
                    let saved = stack.pop().expect("balanced program");
                    tape.add(cur, saved)?
                }
                Layer::Output => {
                    outputs.push(cur);
                    x
                }
            };
        }
        Ok(outputs)
    }

    /// Untaped evaluation of all heads.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let slot = self.bind(&mut tape);
        let v = tape.input(x.clone());
        let outs = self.forward(&mut tape, slot, v)?;
        Ok(outs.into_iter().map(|o| tape.value(o).clone()).collect())
    }

    /// Evaluation of a single-output network.
    pub fn infer_one(&self, x: &Tensor) -> Result<Tensor> {
        let mut outs = self.infer(x)?;
        if outs.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "`{}` has {} outputs",
                self.name(),
                outs.len()
            )));
        }
        Ok(outs.pop().expect("one output"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng_from_seed;

    fn rand_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let p = ParamVector::gaussian("x", c * h * w, 0.5, &mut rng_from_seed(seed));
        Tensor::new(c, h, w, p.values).unwrap()
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let net = Network::new("G", NetworkSpec::reduced_generator(1), &mut rng_from_seed(1)).unwrap();
        let x = rand_input(1, 16, 16, 2);
        let y = net.infer_one(&x).unwrap();
        assert_eq!(y.shape(), (1, 16, 16));
        assert!(y.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn paper_generator_parameter_layout_compiles() {
        let prog = compile(&NetworkSpec::paper_generator(3)).unwrap();
        // stem 3*64*49, downs 64*128*9 + 128*256*9, 18 trunk convs 256*256*9,
        // ups 256*128*9 + 128*64*9, head 64*3*49 + 3
        let expected = 3 * 64 * 49
            + 64 * 128 * 9
            + 128 * 256 * 9
            + 18 * 256 * 256 * 9
            + 256 * 128 * 9
            + 128 * 64 * 9
            + 64 * 3 * 49
            + 3;
        assert_eq!(prog.n_params, expected);
    }

    #[test]
    fn discriminator_gives_one_score_per_head() {
        let spec = NetworkSpec::Discriminator {
            channels: 1,
            ndf: 4,
            heads: vec![1, 2],
        };
        let net = Network::new("D", spec, &mut rng_from_seed(3)).unwrap();
        let outs = net.infer(&rand_input(1, 16, 16, 4)).unwrap();
        assert_eq!(outs.len(), 2);
        assert!(outs.iter().all(|o| o.len() == 1));
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let spec = NetworkSpec::TestMlp {
            inputs: 4,
            hidden: 3,
            outputs: 2,
        };
        let net = Network::zeros("m", spec).unwrap();
        let y = net.infer_one(&rand_input(1, 2, 2, 5)).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Network::new("G", NetworkSpec::reduced_generator(1), &mut rng_from_seed(1)).unwrap();
        assert!(matches!(net.infer(&rand_input(3, 16, 16, 0)), Err(Error::Shape(_))));
        assert!(matches!(net.infer(&rand_input(1, 15, 15, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_pure() {
        let net = Network::new("B", NetworkSpec::reduced_importance(1), &mut rng_from_seed(9)).unwrap();
        let x = rand_input(1, 32, 32, 1);
        assert_eq!(net.infer(&x).unwrap(), net.infer(&x).unwrap());
    }

    #[test]
    fn zero_head_gives_constant_scores() {
        let mut net = Network::new("B", NetworkSpec::reduced_importance(1), &mut rng_from_seed(9)).unwrap();
        net.zero_head();
        let a = net.infer_one(&rand_input(1, 16, 16, 1)).unwrap();
        let b = net.infer_one(&rand_input(1, 16, 16, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn network_serde_round_trip() {
        let net = Network::new("D", NetworkSpec::reduced_discriminator(1), &mut rng_from_seed(2)).unwrap();
        let s = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&s).unwrap();
        assert_eq!(net, back);
    }
}
