//! Named parameter registry and its binding onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AttentionKind, ClassifierSpec};
use crate::numerics::{LstmVars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Ordered, named parameters. Order is the registry order used by
/// checkpoints and gradient vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

/// Registry entries for a classifier, in canonical order.
fn layout(spec: &ClassifierSpec) -> Vec<(String, Vec<usize>, Init)> {
    let c = &spec.crnn;
    let (kt, kf) = (c.kernel_time, c.kernel_freq);
    let mut out = Vec::new();
    let mut c_in = c.input_channels;
    for (i, &c_out) in c.conv_channels.iter().enumerate() {
        out.push((
            format!("conv{}.kernel", i + 1),
            vec![c_out, c_in, kt, kf],
            Init::Glorot {
                fan_in: c_in * kt * kf,
                fan_out: c_out * kt * kf,
            },
        ));
        out.push((format!("conv{}.bias", i + 1), vec![c_out], Init::Zeros));
        c_in = c_out;
    }
    let (w, l) = (c.flattened_width(), c.linear_units);
    out.push(("linear.weight".into(), vec![w, l], Init::Glorot { fan_in: w, fan_out: l }));
    out.push(("linear.bias".into(), vec![l], Init::Zeros));
    let h = c.lstm_cells;
    for dir in ["fwd", "bwd"] {
        out.push((format!("lstm.{dir}.w_ih"), vec![l, 4 * h], Init::Glorot { fan_in: l, fan_out: 4 * h }));
        out.push((format!("lstm.{dir}.w_hh"), vec![h, 4 * h], Init::Glorot { fan_in: h, fan_out: 4 * h }));
        out.push((format!("lstm.{dir}.bias"), vec![4 * h], Init::Zeros));
    }
    let d = c.encoder_dim();
    let vector = Init::Glorot { fan_in: d, fan_out: 1 };
    match spec.attention {
        AttentionKind::SelfAttention => out.push(("attention.w".into(), vec![d], vector)),
        AttentionKind::SpeakerAttention => {
            for n in ["w_q_em", "w_k_em", "w_k_sp", "w_v_em", "w_v_sp"] {
                out.push((format!("ssa.{n}"), vec![d], vector));
            }
        }
    }
    let (e, k) = (spec.embedding, spec.classes);
    out.push(("embed.weight".into(), vec![d, e], Init::Glorot { fan_in: d, fan_out: e }));
    out.push(("embed.bias".into(), vec![e], Init::Zeros));
    out.push(("classify.weight".into(), vec![e, k], Init::Glorot { fan_in: e, fan_out: k }));
    out.push(("classify.bias".into(), vec![k], Init::Zeros));
    out
}

impl ParamSet {
    pub fn init(spec: &ClassifierSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(spec) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data).expect("layout shapes are consistent"));
        }
        ParamSet { names, tensors }
    }

    pub fn zeros(spec: &ClassifierSpec) -> Self {
        let (names, tensors) = layout(spec)
            .into_iter()
            .map(|(n, s, _)| (n, Tensor::zeros(&s)))
            .unzip();
        ParamSet { names, tensors }
    }

    /// Rebuilds from registry entries and a flat value list, checking the
    /// registry against `spec`.
    pub fn from_flat(spec: &ClassifierSpec, registry: &[ParamInfo], values: &[f64]) -> crate::Result<Self> {
        let expected = layout(spec);
        let matches = expected.len() == registry.len()
            && expected.iter().zip(registry).all(|((n, s, _), r)| *n == r.name && *s == r.shape);
        if !matches {
            return Err(crate::Error::Format("parameter registry does not match the classifier shape".into()));
        }
        let total: usize = registry.iter().map(|r| r.shape.iter().product::<usize>()).sum();
        if total != values.len() {
            return Err(crate::Error::Format(format!(
                "registry holds {total} values, payload has {}",
                values.len()
            )));
        }
        let mut off = 0;
        let mut tensors = Vec::new();
        for r in registry {
            let n: usize = r.shape.iter().product();
            tensors.push(Tensor::new(r.shape.clone(), values[off..off + n].to_vec())?);
            off += n;
        }
        Ok(ParamSet {
            names: registry.iter().map(|r| r.name.clone()).collect(),
            tensors,
        })
    }

    pub fn registry(&self) -> Vec<ParamInfo> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| ParamInfo {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rounds every value through `f32`, as a checkpoint round trip does.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Places every parameter on the tape, as leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Structured view of bound classifier parameters.
#[derive(Clone, Debug)]
pub struct ClassifierVars {
    pub convs: Vec<(Var, Var)>,
    pub linear: (Var, Var),
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    pub attention: AttentionVars,
    pub embed: (Var, Var),
    pub classify: (Var, Var),
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionVars {
    SelfAttention { w: Var },
    Speaker(SsaVars),
}

/// Tape handles of the five speaker-attention weight vectors.
#[derive(Clone, Copy, Debug)]
pub struct SsaVars {
    pub w_q_em: Var,
    pub w_k_em: Var,
    pub w_k_sp: Var,
    pub w_v_em: Var,
    pub w_v_sp: Var,
}

impl ClassifierVars {
    /// Interprets vars bound in registry order.
    pub fn from_bound(spec: &ClassifierSpec, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("bound vars follow the registry layout");
        let convs = spec.crnn.conv_channels.iter().map(|_| (next(), next())).collect();
        let linear = (next(), next());
        let mut lstm = || LstmVars {
            w_ih: next(),
            w_hh: next(),
            bias: next(),
        };
        let fwd = lstm();
        let bwd = lstm();
        let attention = match spec.attention {
            AttentionKind::SelfAttention => AttentionVars::SelfAttention { w: next() },
            AttentionKind::SpeakerAttention => AttentionVars::Speaker(SsaVars {
                w_q_em: next(),
                w_k_em: next(),
                w_k_sp: next(),
                w_v_em: next(),
                w_v_sp: next(),
            }),
        };
        let embed = (next(), next());
        let classify = (next(), next());
        ClassifierVars {
            convs,
            linear,
            fwd,
            bwd,
            attention,
            embed,
            classify,
        }
    }
}
