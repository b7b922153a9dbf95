//! Model architectures, initialization and gradient computation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datasets::LabeledExample;
use crate::error::{Error, Result};
use crate::gradient::{self, GradientVector};
use crate::par;
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Conv(32,5x5,s2) ReLU Conv(64,5x5,s2) ReLU Linear(512) ReLU Linear(64) ReLU Linear(C)
    Cnn,
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Conv { weight: usize, bias: usize, stride: usize },
    Linear { weight: usize, bias: usize },
    Relu,
    Flatten,
}

fn add_param(params: &mut Vec<ParamInfo>, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
    params.push(ParamInfo { name, shape, fan_in });
    params.len() - 1
}

fn linear(params: &mut Vec<ParamInfo>, name: &str, fan_in: usize, out: usize) -> Layer {
    let weight = add_param(params, format!("{name}.weight"), vec![fan_in, out], fan_in);
    let bias = add_param(params, format!("{name}.bias"), vec![out], fan_in);
    Layer::Linear { weight, bias }
}

/// Resolves an architecture into layers and the parameter table, in
/// declaration order (weight before bias within a layer).
fn plan(config: &ModelConfig) -> Result<(Vec<Layer>, Vec<ParamInfo>)> {
    if config.classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {}", config.classes)));
    }
    if config.input_shape.is_empty() || config.input_shape.contains(&0) {
        return Err(Error::config(format!("invalid input shape {:?}", config.input_shape)));
    }
    let mut layers = Vec::new();
    let mut params: Vec<ParamInfo> = Vec::new();
    match &config.architecture {
        Architecture::Cnn => {
            let &[c, h, w] = &config.input_shape[..] else {
                return Err(Error::config(format!(
                    "CNN needs a [C, H, W] input, got {:?}",
                    config.input_shape
                )));
            };
            let mut shape = vec![c, h, w];
            for (i, out) in [32usize, 64].into_iter().enumerate() {
                let geo = ConvGeometry::new(&shape, &[out, shape[0], 5, 5], 2)
                    .map_err(|_| Error::config(format!("input {:?} too small for the CNN", config.input_shape)))?;
                let fan_in = shape[0] * 25;
                let weight = add_param(&mut params, format!("conv{}.weight", i + 1), geo.kernel_shape(), fan_in);
                let bias = add_param(&mut params, format!("conv{}.bias", i + 1), vec![out], fan_in);
                layers.push(Layer::Conv { weight, bias, stride: 2 });
                layers.push(Layer::Relu);
                shape = geo.output_shape();
            }
            layers.push(Layer::Flatten);
            let mut width: usize = shape.iter().product();
            for (i, out) in [512usize, 64].into_iter().enumerate() {
                layers.push(linear(&mut params, &format!("fc{}", i + 1), width, out));
                layers.push(Layer::Relu);
                width = out;
            }
            layers.push(linear(&mut params, "fc3", width, config.classes));
        }
        Architecture::Mlp { hidden } => {
            if hidden.contains(&0) {
                return Err(Error::config("hidden layer widths must be positive"));
            }
            layers.push(Layer::Flatten);
            let mut width: usize = config.input_shape.iter().product();
            for (i, &out) in hidden.iter().enumerate() {
                layers.push(linear(&mut params, &format!("fc{}", i + 1), width, out));
                layers.push(Layer::Relu);
                width = out;
            }
            layers.push(linear(&mut params, &format!("fc{}", hidden.len() + 1), width, config.classes));
        }
    }
    Ok((layers, params))
}

/// Parameters plus the resolved architecture.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    layout: Vec<ParamInfo>,
    params: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Gradient of one example's loss together with the loss value.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub gradient: GradientVector,
    pub loss: f64,
}

impl Model {
    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / fan_in)`, biases zero.
    pub fn init(config: ModelConfig) -> Result<Model> {
        let (layers, layout) = plan(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout
            .iter()
            .map(|p| {
                if p.name.ends_with(".bias") {
                    return Tensor::zeros(&p.shape);
                }
                let a = (6.0 / p.fan_in as f64).sqrt();
                let data = (0..p.numel()).map(|_| rng.random_range(-a..=a)).collect();
                Tensor::new(p.shape.clone(), data).expect("layout shapes are valid")
            })
            .collect();
        Ok(Model {
            config,
            layers,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layout.iter().map(|p| p.shape.clone()).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Total parameter count `d`.
    pub fn dim(&self) -> usize {
        self.layout.iter().map(ParamInfo::numel).sum()
    }

    pub fn flat_params(&self) -> GradientVector {
        gradient::flatten(&self.params)
    }

    pub fn set_flat_params(&mut self, flat: &GradientVector) -> Result<()> {
        self.params = gradient::unflatten(flat, &self.param_shapes())?;
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: input.shape().to_vec(),
                right: self.config.input_shape.clone(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.config.classes,
            });
        }
        Ok(())
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn record_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.parameter(p.clone())).collect()
    }

    /// Logits `[1, C]` for a single input.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { weight, bias, stride } => {
                    let y = tape.conv2d(x, params[weight], stride)?;
                    tape.add_channel_bias(y, params[bias])?
                }
                Layer::Linear { weight, bias } => tape.linear(x, params[weight], params[bias])?,
                Layer::Relu => tape.relu(x)?,
                Layer::Flatten => {
                    let n = tape.value(x).numel();
                    tape.reshape(x, &[1, n])?
                }
            };
        }
        Ok(x)
    }

    /// Cross-entropy loss of one example, recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape, params: &[Var], input: Var, label: usize) -> Result<Var> {
        self.check_label(label)?;
        let logits = self.forward(tape, params, input)?;
        tape.softmax_cross_entropy(logits, &[label])
    }

    pub fn logits(&self, input: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn sample_gradient(&self, example: &LabeledExample) -> Result<SampleGradient> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let x = tape.constant(example.input.clone());
        let loss = self.loss(&mut tape, &params, x, example.label)?;
        let grads = tape.backward(loss, &params)?;
        let tensors: Vec<Tensor> = grads.iter().map(|&g| tape.value(g).clone()).collect();
        Ok(SampleGradient {
            gradient: gradient::flatten(&tensors),
            loss: tape.value(loss).item(),
        })
    }

    /// Per-example gradients, one message per example, in batch order.
    pub fn per_sample_gradients(&self, batch: &[LabeledExample]) -> Result<Vec<SampleGradient>> {
        if batch.is_empty() {
            return Err(Error::config("per-sample gradients of an empty batch"));
        }
        par::map(batch, |ex| self.sample_gradient(ex)).into_iter().collect()
    }

    /// Gradient of the mean loss over `batch` from a single backward pass.
    pub fn batch_gradient(&self, batch: &[LabeledExample]) -> Result<SampleGradient> {
        if batch.is_empty() {
            return Err(Error::config("batch gradient of an empty batch"));
        }
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let mut total: Option<Var> = None;
        for ex in batch {
            let x = tape.constant(ex.input.clone());
            let l = self.loss(&mut tape, &params, x, ex.label)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let mean = tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f64)?;
        let grads = tape.backward(mean, &params)?;
        let tensors: Vec<Tensor> = grads.iter().map(|&g| tape.value(g).clone()).collect();
        Ok(SampleGradient {
            gradient: gradient::flatten(&tensors),
            loss: tape.value(mean).item(),
        })
    }

    /// Model gradient of one example's loss, and the input gradient of
    /// `<direction, grad_theta L(x, y)>` with the parameters held fixed.
    pub fn gradient_and_input_vjp(
        &self,
        input: &Tensor,
        label: usize,
        direction: &GradientVector,
    ) -> Result<(SampleGradient, Tensor)> {
        if direction.dim() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: direction.dim(),
            });
        }
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape);
        let x = tape.input(input.clone());
        let loss = self.loss(&mut tape, &params, x, label)?;
        let grads = tape.backward(loss, &params)?;
        let dirs = gradient::unflatten(direction, &self.param_shapes())?;
        let mut inner: Option<Var> = None;
        for (&g, d) in grads.iter().zip(dirs) {
            let d = tape.constant(d);
            let term = tape.dot(g, d)?;
            inner = Some(match inner {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let gx = tape.backward(inner.expect("model has parameters"), &[x])?[0];
        let tensors: Vec<Tensor> = grads.iter().map(|&g| tape.value(g).clone()).collect();
        Ok((
            SampleGradient {
                gradient: gradient::flatten(&tensors),
                loss: tape.value(loss).item(),
            },
            tape.value(gx).clone(),
        ))
    }

    /// Accuracy (argmax, ties to the lowest class) and mean loss.
    pub fn evaluate(&self, data: &[LabeledExample]) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::config("evaluation on an empty dataset"));
        }
        let rows = par::map(data, |ex| -> Result<(bool, f64)> {
            let logits = self.logits(&ex.input)?;
            let loss = crate::tensor::softmax_cross_entropy(&logits, ex.label)?;
            Ok((argmax(&logits) == ex.label, loss))
        });
        let (mut correct, mut loss) = (0usize, 0.0);
        for r in rows {
            let (hit, l) = r?;
            correct += hit as usize;
            loss += l;
        }
        Ok(Evaluation {
            accuracy: correct as f64 / data.len() as f64,
            mean_loss: loss / data.len() as f64,
        })
    }
}

/// Index of the largest value; ties (and NaN) resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
