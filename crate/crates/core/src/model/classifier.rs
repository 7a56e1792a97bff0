use super::config::{AttentionKind, ClassifierSpec};
use super::layers::{classify, crnn_encode, self_attention, speaker_attention};
use super::params::{AttentionVars, ClassifierVars, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Tape, Tensor, Var};

/// One convolutional-recurrent classifier: encoder, attention pooling,
/// embedding layer and classification layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    spec: ClassifierSpec,
    params: ParamSet,
    class_names: Vec<String>,
    frozen: bool,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Encoder states `[T', d]`.
    pub h: Var,
    pub alpha: Var,
    pub context: Var,
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub posteriors: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Loss and parameter gradients of one training sample.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub loss: f64,
    /// One buffer per registry entry.
    pub grads: Vec<Vec<f64>>,
    /// Input of the classification layer for this sample.
    pub embedding: Vec<f64>,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let params = ParamSet::init(&spec, seed);
        Classifier::from_params(spec, class_names, params)
    }

    pub fn from_params(spec: ClassifierSpec, class_names: Vec<String>, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        if class_names.len() != spec.classes {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                class_names.len(),
                spec.classes
            )));
        }
        if params.registry() != ParamSet::zeros(&spec).registry() {
            return Err(Error::invalid("parameters do not match the classifier shape"));
        }
        Ok(Classifier {
            spec,
            params,
            class_names,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn uses_speaker_attention(&self) -> bool {
        self.spec.attention == AttentionKind::SpeakerAttention
    }

    /// Marks the parameters as fixed; a frozen classifier may feed another.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Records a forward pass on `tape` using already-bound parameters.
    /// `h_sp` must be given exactly when the classifier uses speaker attention.
    pub fn forward(&self, tape: &mut Tape, x: Var, h_sp: Option<Var>, vars: &ClassifierVars) -> Result<Forward> {
        let h = crnn_encode(tape, x, &self.spec.crnn, vars)?;
        let (alpha, context) = match (&vars.attention, h_sp) {
            (AttentionVars::SelfAttention { w }, None) => self_attention(tape, h, *w)?,
            (AttentionVars::Speaker(p), Some(h_sp)) => speaker_attention(tape, h, h_sp, p)?,
            (AttentionVars::SelfAttention { .. }, Some(_)) => {
                return Err(Error::invalid("self-attention classifier was given speaker states"))
            }
            (AttentionVars::Speaker(_), None) => {
                return Err(Error::invalid("speaker-attention classifier needs speaker states"))
            }
        };
        let (embedding, logits) = classify(tape, context, vars)?;
        Ok(Forward {
            h,
            alpha,
            context,
            embedding,
            logits,
        })
    }

    /// Binds the parameters (as leaves unless frozen) and runs a forward pass.
    pub fn forward_bound(&self, tape: &mut Tape, x: &Tensor, h_sp: Option<&Tensor>) -> Result<(Forward, Vec<Var>)> {
        let bound = self.params.bind(tape, !self.frozen);
        let vars = ClassifierVars::from_bound(&self.spec, &bound);
        let xv = tape.constant(x.clone());
        let hv = h_sp.map(|h| tape.constant(h.clone()));
        let out = self.forward(tape, xv, hv, &vars)?;
        Ok((out, bound))
    }

    /// Encoder states for one input, without recording gradients.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let vars = ClassifierVars::from_bound(&self.spec, &bound);
        let xv = tape.constant(x.clone());
        let h = crnn_encode(&mut tape, xv, &self.spec.crnn, &vars)?;
        Ok(tape.value(h).clone())
    }

    pub fn predict(&self, x: &Tensor, h_sp: Option<&Tensor>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let vars = ClassifierVars::from_bound(&self.spec, &bound);
        let xv = tape.constant(x.clone());
        let hv = h_sp.map(|h| tape.constant(h.clone()));
        let out = self.forward(&mut tape, xv, hv, &vars)?;
        let logits = tape.value(out.logits).data().to_vec();
        Ok(Prediction {
            posteriors: softmax(&logits),
            logits,
            embedding: tape.value(out.embedding).data().to_vec(),
        })
    }

    /// Cross-entropy of one sample and its gradient for every parameter.
    pub fn sample_gradient(&self, x: &Tensor, target: usize, h_sp: Option<&Tensor>) -> Result<SampleGradient> {
        self.sample_gradient_seeded(x, target, h_sp, None)
    }

    /// As [`Classifier::sample_gradient`], with an extra constant gradient
    /// `embedding_seed` injected at the embedding (the gradient of the
    /// linear term `embedding . seed`). The reported loss is the
    /// cross-entropy alone.
    pub fn sample_gradient_seeded(
        &self,
        x: &Tensor,
        target: usize,
        h_sp: Option<&Tensor>,
        embedding_seed: Option<&Tensor>,
    ) -> Result<SampleGradient> {
        if self.frozen {
            return Err(Error::invalid("cannot compute gradients of a frozen classifier"));
        }
        let mut tape = Tape::new();
        let (out, bound) = self.forward_bound(&mut tape, x, h_sp)?;
        let ce = tape.softmax_cross_entropy(out.logits, &[target])?;
        let loss = match embedding_seed {
            Some(seed) => {
                let s = tape.constant(seed.clone());
                let prod = tape.mul(out.embedding, s)?;
                let extra = tape.sum(prod);
                tape.add(ce, extra)?
            }
            None => ce,
        };
        let mut grads = tape.backward(loss)?;
        Ok(SampleGradient {
            loss: tape.value(ce).item(),
            embedding: tape.value(out.embedding).data().to_vec(),
            grads: bound.iter().map(|&v| grads.take(v)).collect(),
        })
    }
}

/// Speaker tower pass: encoder states for later speaker attention, and
/// speaker posteriors.
pub fn forward_sp(sp: &Classifier, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if sp.uses_speaker_attention() {
        return Err(Error::invalid("the speaker classifier uses self-attention pooling"));
    }
    let mut tape = Tape::new();
    let bound = sp.params.bind(&mut tape, false);
    let vars = ClassifierVars::from_bound(&sp.spec, &bound);
    let xv = tape.constant(x.clone());
    let out = sp.forward(&mut tape, xv, None, &vars)?;
    Ok((tape.value(out.h).clone(), softmax(tape.value(out.logits).data())))
}

/// Speaker-tower states to feed `em`, or `None` when `em` does not use them.
/// A speaker tower must be frozen before it can condition another classifier.
pub fn speaker_states(em: &Classifier, sp: Option<&Classifier>, x: &Tensor) -> Result<Option<Tensor>> {
    if !em.uses_speaker_attention() {
        return Ok(None);
    }
    let sp = sp.ok_or_else(|| Error::invalid("speaker attention requires a trained speaker classifier"))?;
    if !sp.is_frozen() {
        return Err(Error::invalid("the speaker classifier must be frozen before conditioning emotions"));
    }
    sp.encode(x).map(Some)
}

/// Emotion posteriors for one segment.
pub fn forward_em(em: &Classifier, x: &Tensor, sp: Option<&Classifier>) -> Result<Prediction> {
    let h_sp = speaker_states(em, sp, x)?;
    em.predict(x, h_sp.as_ref())
}
