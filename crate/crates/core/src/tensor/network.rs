//! Declarative layer graphs and their trainable realization.
//!
//! A [`NetworkSpec`] is a list of nodes in topological order. Value slot 0 is
//! the network input and slot `i + 1` is the output of node `i`; every node
//! names the slots it consumes. The last node's output is the network output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{derive_seed, init_weights, Init};
use super::ops::{self, LrnParams, LstmCache, Window};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        init: Init,
        weight_decay: f64,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        init: Init,
        weight_decay: f64,
    },
    MaxPool {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool,
    Lrn {
        depth_radius: usize,
        alpha: f64,
        beta: f64,
        bias: f64,
    },
    InstanceNorm {
        epsilon: f64,
    },
    BatchNorm {
        epsilon: f64,
        momentum: f64,
        /// Initializer for the scale; zero makes a residual branch vanish.
        gamma_init: Init,
    },
    Dropout {
        rate: f64,
    },
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    ResidualAdd,
    Concat,
    Lstm {
        units: usize,
        return_sequences: bool,
        init: Init,
        weight_decay: f64,
    },
    Flatten,
    /// Zero-padded window of the input: output pixel `(y, x)` reads input
    /// `(y + top, x + left)`, or zero outside the input.
    CropPad {
        top: isize,
        left: isize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    pub fn lrn_default() -> Self {
        let p = LrnParams::default();
        LayerSpec::Lrn {
            depth_radius: p.depth_radius,
            alpha: p.alpha,
            beta: p.beta,
            bias: p.bias,
        }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm {
            epsilon: 1e-5,
            momentum: 0.9,
            gamma_init: Init::Ones,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::GlobalAvgPool => "global-avgpool",
            LayerSpec::Lrn { .. } => "lrn",
            LayerSpec::InstanceNorm { .. } => "instance-norm",
            LayerSpec::BatchNorm { .. } => "batch-norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::ResidualAdd => "residual-add",
            LayerSpec::Concat => "concat",
            LayerSpec::Lstm { .. } => "lstm-cell",
            LayerSpec::Flatten => "flatten",
            LayerSpec::CropPad { .. } => "crop-pad",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            LayerSpec::ResidualAdd => 2..=2,
            LayerSpec::Concat => 2..=usize::MAX,
            _ => 1..=1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: LayerSpec,
    /// Value slots consumed: 0 is the network input, `i + 1` is node `i`.
    pub inputs: Vec<usize>,
}

/// Shape and initialization of one trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
    pub fan_in: usize,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-example input shape, e.g. `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
}

fn shape_err(node: &Node, idx: usize, message: impl Into<String>) -> TensorError {
    TensorError::Shape {
        layer: format!("#{idx} {} ({})", node.name, node.layer.kind_name()),
        message: message.into(),
    }
}

fn window_for(shape: &[usize], kernel: usize, stride: usize, padding: Padding) -> Option<Window> {
    Window::new(shape[0], shape[1], kernel, stride, padding == Padding::Same)
}

/// Per-example `(steps, features)` an LSTM sees for a given input shape.
/// Images are read row by row with channels laid side by side along the
/// row, so a `[H, W, C]` image becomes `H` steps of `W·C` features.
fn lstm_geometry(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1])),
        3 => Some((shape[0], shape[1] * shape[2])),
        _ => None,
    }
}

impl NetworkSpec {
    /// Per-example shapes of every value slot (input first).
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(TensorError::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        if self.nodes.is_empty() {
            return Err(TensorError::Config("network has no layers".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.layer.arity().contains(&node.inputs.len()) {
                return Err(shape_err(node, idx, format!("wrong input count {}", node.inputs.len())));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&s| s > idx) {
                return Err(shape_err(node, idx, format!("input slot {bad} is not yet computed")));
            }
            let ins: Vec<&[usize]> = node.inputs.iter().map(|&s| shapes[s].as_slice()).collect();
            let x = ins[0];
            let need_rank = |r: usize| -> Result<()> {
                if x.len() != r {
                    Err(shape_err(node, idx, format!("expects rank-{r} input, got {x:?}")))
                } else {
                    Ok(())
                }
            };
            let out = match &node.layer {
                LayerSpec::Dense { units, .. } => {
                    need_rank(1)?;
                    if *units == 0 {
                        return Err(shape_err(node, idx, "zero units"));
                    }
                    vec![*units]
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    need_rank(3)?;
                    if *filters == 0 {
                        return Err(shape_err(node, idx, "zero filters"));
                    }
                    let w = window_for(x, *kernel, *stride, *padding).ok_or_else(|| {
                        shape_err(node, idx, format!("kernel {kernel} does not fit input {x:?}"))
                    })?;
                    vec![w.out_h, w.out_w, *filters]
                }
                LayerSpec::MaxPool { window, stride, padding }
                | LayerSpec::AvgPool { window, stride, padding } => {
                    need_rank(3)?;
                    let w = window_for(x, *window, *stride, *padding).ok_or_else(|| {
                        shape_err(node, idx, format!("window {window} larger than input {x:?}"))
                    })?;
                    vec![w.out_h, w.out_w, x[2]]
                }
                LayerSpec::GlobalAvgPool => {
                    need_rank(3)?;
                    vec![x[2]]
                }
                LayerSpec::InstanceNorm { .. } => {
                    if x.len() < 2 {
                        return Err(shape_err(node, idx, "needs spatial positions and channels"));
                    }
                    x.to_vec()
                }
                LayerSpec::Lrn { .. }
                | LayerSpec::BatchNorm { .. }
                | LayerSpec::Dropout { .. }
                | LayerSpec::Relu
                | LayerSpec::Tanh
                | LayerSpec::Sigmoid => x.to_vec(),
                LayerSpec::Softmax => {
                    need_rank(1)?;
                    x.to_vec()
                }
                LayerSpec::ResidualAdd => {
                    if ins[0] != ins[1] {
                        return Err(shape_err(
                            node,
                            idx,
                            format!("cannot add {:?} and {:?}", ins[0], ins[1]),
                        ));
                    }
                    x.to_vec()
                }
                LayerSpec::Concat => {
                    let lead = &x[..x.len() - 1];
                    let mut last = 0;
                    for s in &ins {
                        if s.len() != x.len() || &s[..s.len() - 1] != lead {
                            return Err(shape_err(node, idx, format!("cannot concat {:?} with {:?}", x, s)));
                        }
                        last += s[s.len() - 1];
                    }
                    let mut out = lead.to_vec();
                    out.push(last);
                    out
                }
                LayerSpec::Lstm {
                    units,
                    return_sequences,
                    ..
                } => {
                    let (steps, _) = lstm_geometry(x)
                        .ok_or_else(|| shape_err(node, idx, format!("cannot read {x:?} as a sequence")))?;
                    if *units == 0 {
                        return Err(shape_err(node, idx, "zero units"));
                    }
                    if *return_sequences {
                        vec![steps, *units]
                    } else {
                        vec![*units]
                    }
                }
                LayerSpec::Flatten => vec![x.iter().product()],
                LayerSpec::CropPad { height, width, .. } => {
                    need_rank(3)?;
                    if *height == 0 || *width == 0 {
                        return Err(shape_err(node, idx, "empty crop window"));
                    }
                    vec![*height, *width, x[2]]
                }
            };
            if let LayerSpec::Dropout { rate } = node.layer {
                if !(0.0..1.0).contains(&rate) {
                    return Err(shape_err(node, idx, format!("dropout rate {rate} outside [0, 1)")));
                }
            }
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Trainable tensors of node `idx` given its first input's shape.
    pub fn param_shapes_for(&self, idx: usize, input: &[usize]) -> Vec<ParamShape> {
        match &self.nodes[idx].layer {
            LayerSpec::Dense {
                units,
                init,
                weight_decay,
            } => vec![
                ParamShape {
                    name: "kernel",
                    shape: vec![input[0], *units],
                    init: *init,
                    fan_in: input[0],
                    weight_decay: *weight_decay,
                },
                ParamShape {
                    name: "bias",
                    shape: vec![*units],
                    init: Init::Zeros,
                    fan_in: input[0],
                    weight_decay: 0.0,
                },
            ],
            LayerSpec::Conv2d {
                filters,
                kernel,
                init,
                weight_decay,
                ..
            } => {
                let fan_in = kernel * kernel * input[2];
                vec![
                    ParamShape {
                        name: "kernel",
                        shape: vec![*kernel, *kernel, input[2], *filters],
                        init: *init,
                        fan_in,
                        weight_decay: *weight_decay,
                    },
                    ParamShape {
                        name: "bias",
                        shape: vec![*filters],
                        init: Init::Zeros,
                        fan_in,
                        weight_decay: 0.0,
                    },
                ]
            }
            LayerSpec::BatchNorm { gamma_init, .. } => {
                let c = input[input.len() - 1];
                vec![
                    ParamShape {
                        name: "gamma",
                        shape: vec![c],
                        init: *gamma_init,
                        fan_in: c,
                        weight_decay: 0.0,
                    },
                    ParamShape {
                        name: "beta",
                        shape: vec![c],
                        init: Init::Zeros,
                        fan_in: c,
                        weight_decay: 0.0,
                    },
                ]
            }
            LayerSpec::Lstm {
                units,
                init,
                weight_decay,
                ..
            } => {
                let (_, dim) = lstm_geometry(input).unwrap_or((0, 0));
                vec![
                    ParamShape {
                        name: "input_kernel",
                        shape: vec![dim, 4 * units],
                        init: *init,
                        fan_in: dim,
                        weight_decay: *weight_decay,
                    },
                    ParamShape {
                        name: "recurrent_kernel",
                        shape: vec![*units, 4 * units],
                        init: *init,
                        fan_in: *units,
                        weight_decay: *weight_decay,
                    },
                    ParamShape {
                        name: "bias",
                        shape: vec![4 * units],
                        init: Init::Zeros,
                        fan_in: dim,
                        weight_decay: 0.0,
                    },
                ]
            }
            _ => Vec::new(),
        }
    }

    /// All trainable tensor shapes, grouped per node.
    pub fn param_shapes(&self) -> Result<Vec<Vec<ParamShape>>> {
        let shapes = self.infer_shapes()?;
        Ok((0..self.nodes.len())
            .map(|i| self.param_shapes_for(i, &shapes[self.nodes[i].inputs[0]]))
            .collect())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.infer_shapes()?.pop().unwrap_or_default())
    }
}

/// Forward pass flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Mask(Vec<f64>),
    Argmax(Vec<usize>),
    Scale(Vec<f64>),
    Norm { normalized: Vec<f64>, inv_std: Vec<f64> },
    Lstm { steps_input: Vec<f64>, cache: LstmCache },
}

#[derive(Clone, Debug)]
struct ForwardCache {
    batch: usize,
    values: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

/// Running statistics of a batch-norm layer used in eval mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Trainable realization of a [`NetworkSpec`].
///
/// One mutable owner trains it; [`Network::infer`] takes `&self` and may be
/// called concurrently on a shared snapshot.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<Tensor>>,
    decay: Vec<Vec<f64>>,
    running: Vec<Option<RunningStats>>,
    seed: u64,
    dropout_seed: u64,
    cache: Option<ForwardCache>,
}

impl Network {
    /// Instantiate with freshly initialized weights; deterministic in `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut params = Vec::with_capacity(spec.nodes.len());
        let mut decay = Vec::with_capacity(spec.nodes.len());
        let mut running = Vec::with_capacity(spec.nodes.len());
        for (i, node) in spec.nodes.iter().enumerate() {
            let ps = spec.param_shapes_for(i, &shapes[node.inputs[0]]);
            let mut tensors = Vec::with_capacity(ps.len());
            for (j, p) in ps.iter().enumerate() {
                let s = derive_seed(seed, ((i as u64) << 8) | j as u64);
                tensors.push(init_weights(p.init, &p.shape, p.fan_in, s)?);
            }
            decay.push(ps.iter().map(|p| p.weight_decay).collect());
            params.push(tensors);
            running.push(match node.layer {
                LayerSpec::BatchNorm { .. } => {
                    let c = *shapes[node.inputs[0]].last().unwrap();
                    Some(RunningStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    })
                }
                _ => None,
            });
        }
        Ok(Self {
            spec,
            shapes,
            params,
            decay,
            running,
            seed,
            dropout_seed: seed,
            cache: None,
        })
    }

    /// Rebuild from stored tensors, validating every shape against the spec.
    pub fn from_parts(
        spec: NetworkSpec,
        params: Vec<Vec<Tensor>>,
        running: Vec<Option<RunningStats>>,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Network::new(spec, seed)?;
        if params.len() != net.params.len() || running.len() != net.running.len() {
            return Err(TensorError::Checkpoint("layer count mismatch".into()));
        }
        for (i, (have, want)) in params.iter().zip(&net.params).enumerate() {
            if have.len() != want.len() || have.iter().zip(want).any(|(a, b)| a.shape() != b.shape()) {
                return Err(TensorError::Checkpoint(format!("parameter shapes differ at node {i}")));
            }
        }
        for (have, want) in running.iter().zip(&net.running) {
            let ok = match (have, want) {
                (None, None) => true,
                (Some(a), Some(b)) => a.mean.len() == b.mean.len() && a.var.len() == b.var.len(),
                _ => false,
            };
            if !ok {
                return Err(TensorError::Checkpoint("running statistics mismatch".into()));
            }
        }
        net.params = params;
        net.running = running;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_width(&self) -> usize {
        self.shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Seed for dropout masks of subsequent train-mode passes.
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_seed = seed;
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn running_stats(&self) -> &[Option<RunningStats>] {
        &self.running
    }

    /// Trainable tensors in a fixed node-major order.
    pub fn trainable(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().flatten().collect()
    }

    pub fn param_count(&self) -> usize {
        self.trainable().map(Tensor::len).sum()
    }

    /// `½·λ·Σw²` summed over every decayed tensor.
    pub fn weight_decay_loss(&self) -> f64 {
        self.params
            .iter()
            .zip(&self.decay)
            .flat_map(|(ts, ds)| ts.iter().zip(ds))
            .filter(|(_, &d)| d != 0.0)
            .map(|(t, &d)| 0.5 * d * t.data().iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Bias of the final dense layer, if the network has one.
    pub fn output_bias(&self) -> Option<&[f64]> {
        self.spec
            .nodes
            .iter()
            .enumerate()
            .rev()
            .find(|(_, n)| matches!(n.layer, LayerSpec::Dense { .. }))
            .map(|(i, _)| self.params[i][1].data())
    }

    pub fn output_bias_mut(&mut self) -> Option<&mut [f64]> {
        let i = self
            .spec
            .nodes
            .iter()
            .rposition(|n| matches!(n.layer, LayerSpec::Dense { .. }))?;
        Some(self.params[i][1].data_mut())
    }

    fn batch_of(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        let want = &self.spec.input_shape;
        if s.len() == want.len() + 1 && &s[1..] == want.as_slice() {
            Ok(s[0])
        } else {
            Err(TensorError::Shape {
                layer: "#input".into(),
                message: format!("expected [N, {want:?}], got {s:?}"),
            })
        }
    }

    /// Eval-mode inference on a batch `[N, ...input_shape]`; returns `[N, out]`.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(input)?;
        let (values, _, _) = self.run(input, batch, Mode::Eval, false)?;
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shapes.last().unwrap());
        Tensor::new(shape, values.into_iter().last().unwrap())
    }

    /// Output vector for a single example of the declared input shape.
    pub fn predict(&self, example: &[f64]) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.spec.input_shape);
        let t = Tensor::new(shape, example.to_vec())?;
        Ok(self.infer(&t)?.into_data())
    }

    /// Forward pass. Train mode applies dropout, uses batch statistics,
    /// updates running statistics and caches activations for [`backward`].
    ///
    /// [`backward`]: Network::backward
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let batch = self.batch_of(input)?;
        let (values, aux, batch_stats) = self.run(input, batch, mode, mode == Mode::Train)?;
        for (i, stats) in batch_stats.into_iter().enumerate() {
            if let (Some((mean, var)), LayerSpec::BatchNorm { momentum, .. }) = (stats, &self.spec.nodes[i].layer) {
                let r = self.running[i].as_mut().expect("batch-norm running stats");
                for (rm, m) in r.mean.iter_mut().zip(&mean) {
                    *rm = momentum * *rm + (1.0 - momentum) * m;
                }
                for (rv, v) in r.var.iter_mut().zip(&var) {
                    *rv = momentum * *rv + (1.0 - momentum) * v;
                }
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shapes.last().unwrap());
        let out = Tensor::new(shape, values.last().unwrap().clone())?;
        self.cache = if mode == Mode::Train {
            Some(ForwardCache { batch, values, aux })
        } else {
            None
        };
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        input: &Tensor,
        batch: usize,
        mode: Mode,
        keep_aux: bool,
    ) -> Result<(Vec<Vec<f64>>, Vec<Aux>, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
        let train = mode == Mode::Train;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.spec.nodes.len() + 1);
        values.push(input.data().to_vec());
        let mut aux = Vec::with_capacity(if keep_aux { self.spec.nodes.len() } else { 0 });
        let mut stats = vec![None; self.spec.nodes.len()];
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let in_shape = &self.shapes[node.inputs[0]];
            let x = &values[node.inputs[0]];
            let params = &self.params[i];
            let mut a = Aux::None;
            let out = match &node.layer {
                LayerSpec::Dense { units, .. } => {
                    let d = in_shape[0];
                    let mut y = vec![0.0; batch * units];
                    for row in y.chunks_exact_mut(*units) {
                        row.copy_from_slice(params[1].data());
                    }
                    ops::matmul_acc(x, params[0].data(), &mut y, batch, d, *units);
                    y
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let win = window_for(in_shape, *kernel, *stride, *padding).unwrap();
                    ops::conv2d_forward(
                        x,
                        batch,
                        &win,
                        in_shape[2],
                        params[0].data(),
                        Some(params[1].data()),
                        *filters,
                    )
                }
                LayerSpec::MaxPool { window, stride, padding } => {
                    let win = window_for(in_shape, *window, *stride, *padding).unwrap();
                    let (y, arg) = ops::maxpool_forward(x, batch, &win, in_shape[2]);
                    a = Aux::Argmax(arg);
                    y
                }
                LayerSpec::AvgPool { window, stride, padding } => {
                    let win = window_for(in_shape, *window, *stride, *padding).unwrap();
                    ops::avgpool_forward(x, batch, &win, in_shape[2])
                }
                LayerSpec::GlobalAvgPool => {
                    ops::global_avgpool_forward(x, batch, in_shape[0] * in_shape[1], in_shape[2])
                }
                LayerSpec::Lrn {
                    depth_radius,
                    alpha,
                    beta,
                    bias,
                } => {
                    let p = LrnParams {
                        depth_radius: *depth_radius,
                        alpha: *alpha,
                        beta: *beta,
                        bias: *bias,
                    };
                    let (y, scale) = ops::lrn_forward(x, *in_shape.last().unwrap(), &p);
                    a = Aux::Scale(scale);
                    y
                }
                LayerSpec::InstanceNorm { epsilon } => {
                    let c = *in_shape.last().unwrap();
                    let positions = in_shape.iter().product::<usize>() / c;
                    let (y, _, inv_std) = ops::instance_norm_forward(x, batch, positions, c, *epsilon);
                    a = Aux::Norm {
                        normalized: y.clone(),
                        inv_std,
                    };
                    y
                }
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let c = *in_shape.last().unwrap();
                    let (gamma, beta) = (params[0].data(), params[1].data());
                    let (xhat, inv_std) = if train {
                        let (xhat, mean, var, inv_std) = ops::batch_norm_stats(x, c, *epsilon);
                        stats[i] = Some((mean, var));
                        (xhat, inv_std)
                    } else {
                        let r = self.running[i].as_ref().unwrap();
                        let inv_std: Vec<f64> = r.var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                        let mut xhat = vec![0.0; x.len()];
                        for (row, orow) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
                            for k in 0..c {
                                orow[k] = (row[k] - r.mean[k]) * inv_std[k];
                            }
                        }
                        (xhat, inv_std)
                    };
                    let mut y = vec![0.0; x.len()];
                    for (row, orow) in xhat.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
                        for k in 0..c {
                            orow[k] = gamma[k] * row[k] + beta[k];
                        }
                    }
                    a = Aux::Norm {
                        normalized: xhat,
                        inv_std,
                    };
                    y
                }
                LayerSpec::Dropout { rate } => {
                    if train && *rate > 0.0 {
                        let keep = 1.0 - rate;
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.dropout_seed, i as u64));
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        a = Aux::Mask(mask);
                        y
                    } else {
                        x.clone()
                    }
                }
                LayerSpec::Relu => x.iter().map(|&v| ops::relu(v)).collect(),
                LayerSpec::Tanh => x.iter().map(|v| v.tanh()).collect(),
                LayerSpec::Sigmoid => x.iter().map(|&v| ops::sigmoid(v)).collect(),
                LayerSpec::Softmax => ops::softmax_rows(x, in_shape[0]),
                LayerSpec::ResidualAdd => {
                    let b = &values[node.inputs[1]];
                    x.iter().zip(b).map(|(p, q)| p + q).collect()
                }
                LayerSpec::Concat => {
                    let lasts: Vec<usize> = node.inputs.iter().map(|&s| *self.shapes[s].last().unwrap()).collect();
                    let total: usize = lasts.iter().sum();
                    let rows = x.len() / lasts[0];
                    let mut y = vec![0.0; rows * total];
                    let mut offset = 0;
                    for (&s, &w) in node.inputs.iter().zip(&lasts) {
                        let src = &values[s];
                        for r in 0..rows {
                            y[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                        }
                        offset += w;
                    }
                    y
                }
                LayerSpec::Lstm {
                    units,
                    return_sequences,
                    ..
                } => {
                    let (steps, dim) = lstm_geometry(in_shape).unwrap();
                    let seq = to_sequence(x, batch, in_shape);
                    let cache = ops::lstm_forward(
                        &seq,
                        batch,
                        steps,
                        dim,
                        *units,
                        params[0].data(),
                        params[1].data(),
                        params[2].data(),
                    );
                    let y = lstm_output(&cache.hidden, batch, steps, *units, *return_sequences);
                    a = Aux::Lstm {
                        steps_input: seq,
                        cache,
                    };
                    y
                }
                LayerSpec::Flatten => x.clone(),
                LayerSpec::CropPad {
                    top,
                    left,
                    height,
                    width,
                } => crop_pad(x, batch, in_shape, *top, *left, *height, *width),
            };
            if keep_aux {
                aux.push(a);
            }
            values.push(out);
        }
        Ok((values, aux, stats))
    }

    /// Reverse-mode pass seeded with `d loss / d output`. Overwrites every
    /// trainable tensor's gradient, including the weight-decay term `λ·w`.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<()> {
        let cache = self.cache.take().ok_or(TensorError::NoForwardCache)?;
        let last = cache.values.len() - 1;
        if loss_grad.len() != cache.values[last].len() {
            return Err(TensorError::Shape {
                layer: "#output".into(),
                message: format!("loss gradient has {} elements, output has {}", loss_grad.len(), cache.values[last].len()),
            });
        }
        self.backprop(cache, self.spec.nodes.len(), loss_grad.data().to_vec())
    }

    /// Mean cross-entropy of the cached train-mode output against `labels`,
    /// backpropagated through the network. Returns the loss (without the
    /// weight-decay term). When the last layer is a softmax the gradient is
    /// seeded at its input as `(p − y)/N`.
    pub fn backward_cross_entropy(&mut self, labels: &[usize]) -> Result<f64> {
        let cache = self.cache.take().ok_or(TensorError::NoForwardCache)?;
        let width = self.output_width();
        let probs = cache.values.last().unwrap();
        if labels.len() != cache.batch {
            return Err(TensorError::Shape {
                layer: "#loss".into(),
                message: format!("{} labels for a batch of {}", labels.len(), cache.batch),
            });
        }
        let loss = cross_entropy(probs, labels, width)?;
        let n = cache.batch as f64;
        let last_node = self.spec.nodes.len() - 1;
        if matches!(self.spec.nodes[last_node].layer, LayerSpec::Softmax) {
            let mut g = probs.clone();
            for (row, &l) in g.chunks_exact_mut(width).zip(labels) {
                row[l] -= 1.0;
                row.iter_mut().for_each(|v| *v /= n);
            }
            let slot = self.spec.nodes[last_node].inputs[0];
            self.backprop(cache, slot, g)?;
        } else {
            let mut g = vec![0.0; probs.len()];
            for (r, &l) in labels.iter().enumerate() {
                g[r * width + l] = -1.0 / (n * probs[r * width + l].max(1e-300));
            }
            self.backprop(cache, self.spec.nodes.len(), g)?;
        }
        Ok(loss)
    }

    /// Backpropagate `grad` of value slot `slot` through nodes `0..slot`.
    fn backprop(&mut self, cache: ForwardCache, slot: usize, grad: Vec<f64>) -> Result<()> {
        let batch = cache.batch;
        for ts in &mut self.params {
            for t in ts {
                t.grad_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; cache.values.len()];
        grads[slot] = Some(grad);
        for i in (0..slot).rev() {
            let Some(g) = grads[i + 1].take() else { continue };
            let node = &self.spec.nodes[i];
            let in_shape = &self.shapes[node.inputs[0]];
            let x = &cache.values[node.inputs[0]];
            let y = &cache.values[i + 1];
            let need_dx = node.inputs.iter().any(|&s| s != 0);
            let params = &mut self.params[i];
            let mut input_grads: Vec<Vec<f64>> = Vec::new();
            match (&node.layer, &cache.aux[i]) {
                (LayerSpec::Dense { units, .. }, _) => {
                    let d = in_shape[0];
                    let (w, rest) = params.split_at_mut(1);
                    ops::matmul_at_b_acc(x, &g, w[0].grad_mut(), batch, d, *units);
                    let db = rest[0].grad_mut();
                    for row in g.chunks_exact(*units) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    if need_dx {
                        let mut dx = vec![0.0; x.len()];
                        ops::matmul_a_bt_acc(&g, w[0].data(), &mut dx, batch, *units, d);
                        input_grads.push(dx);
                    }
                }
                (
                    LayerSpec::Conv2d {
                        filters,
                        kernel,
                        stride,
                        padding,
                        ..
                    },
                    _,
                ) => {
                    let win = window_for(in_shape, *kernel, *stride, *padding).unwrap();
                    let (w, rest) = params.split_at_mut(1);
                    let wdata = w[0].data().to_vec();
                    let dx = ops::conv2d_backward(
                        x,
                        batch,
                        &win,
                        in_shape[2],
                        &wdata,
                        *filters,
                        &g,
                        w[0].grad_mut(),
                        Some(rest[0].grad_mut()),
                        need_dx,
                    );
                    input_grads.push(dx);
                }
                (LayerSpec::MaxPool { .. }, Aux::Argmax(arg)) => {
                    input_grads.push(ops::maxpool_backward(arg, &g, x.len()));
                }
                (LayerSpec::AvgPool { window, stride, padding }, _) => {
                    let win = window_for(in_shape, *window, *stride, *padding).unwrap();
                    input_grads.push(ops::avgpool_backward(&g, batch, &win, in_shape[2]));
                }
                (LayerSpec::GlobalAvgPool, _) => {
                    input_grads.push(ops::global_avgpool_backward(
                        &g,
                        batch,
                        in_shape[0] * in_shape[1],
                        in_shape[2],
                    ));
                }
                (
                    LayerSpec::Lrn {
                        depth_radius,
                        alpha,
                        beta,
                        bias,
                    },
                    Aux::Scale(scale),
                ) => {
                    let p = LrnParams {
                        depth_radius: *depth_radius,
                        alpha: *alpha,
                        beta: *beta,
                        bias: *bias,
                    };
                    input_grads.push(ops::lrn_backward(x, scale, &g, *in_shape.last().unwrap(), &p));
                }
                (LayerSpec::InstanceNorm { .. }, Aux::Norm { normalized, inv_std }) => {
                    let c = *in_shape.last().unwrap();
                    let positions = in_shape.iter().product::<usize>() / c;
                    input_grads.push(ops::instance_norm_backward(normalized, inv_std, &g, batch, positions, c));
                }
                (LayerSpec::BatchNorm { .. }, Aux::Norm { normalized, inv_std }) => {
                    let c = *in_shape.last().unwrap();
                    let gamma = params[0].data().to_vec();
                    {
                        let dgamma = params[0].grad_mut();
                        for (grow, xrow) in g.chunks_exact(c).zip(normalized.chunks_exact(c)) {
                            for k in 0..c {
                                dgamma[k] += grow[k] * xrow[k];
                            }
                        }
                    }
                    {
                        let dbeta = params[1].grad_mut();
                        for grow in g.chunks_exact(c) {
                            for k in 0..c {
                                dbeta[k] += grow[k];
                            }
                        }
                    }
                    let dxhat: Vec<f64> = g.iter().enumerate().map(|(j, v)| v * gamma[j % c]).collect();
                    input_grads.push(ops::batch_norm_backward(normalized, inv_std, &dxhat, c));
                }
                (LayerSpec::Dropout { .. }, Aux::Mask(mask)) => {
                    input_grads.push(g.iter().zip(mask).map(|(a, b)| a * b).collect());
                }
                (LayerSpec::Dropout { .. }, _) => input_grads.push(g),
                (LayerSpec::Relu, _) => {
                    input_grads.push(g.iter().zip(y).map(|(a, &b)| if b > 0.0 { *a } else { 0.0 }).collect())
                }
                (LayerSpec::Tanh, _) => input_grads.push(g.iter().zip(y).map(|(a, b)| a * (1.0 - b * b)).collect()),
                (LayerSpec::Sigmoid, _) => input_grads.push(g.iter().zip(y).map(|(a, b)| a * b * (1.0 - b)).collect()),
                (LayerSpec::Softmax, _) => input_grads.push(ops::softmax_backward(y, &g, in_shape[0])),
                (LayerSpec::ResidualAdd, _) => {
                    input_grads.push(g.clone());
                    input_grads.push(g);
                }
                (LayerSpec::Concat, _) => {
                    let lasts: Vec<usize> = node.inputs.iter().map(|&s| *self.shapes[s].last().unwrap()).collect();
                    let total: usize = lasts.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &w in &lasts {
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        input_grads.push(d);
                        offset += w;
                    }
                }
                (
                    LayerSpec::Lstm {
                        units,
                        return_sequences,
                        ..
                    },
                    Aux::Lstm { steps_input, cache: lc },
                ) => {
                    let (steps, dim) = lstm_geometry(in_shape).unwrap();
                    let u = *units;
                    let mut dh_seq = vec![0.0; steps * batch * u];
                    for n in 0..batch {
                        if *return_sequences {
                            for t in 0..steps {
                                dh_seq[(t * batch + n) * u..][..u].copy_from_slice(&g[(n * steps + t) * u..][..u]);
                            }
                        } else {
                            dh_seq[((steps - 1) * batch + n) * u..][..u].copy_from_slice(&g[n * u..(n + 1) * u]);
                        }
                    }
                    let wx = params[0].data().to_vec();
                    let wh = params[1].data().to_vec();
                    let mut dwx = params[0].grad_mut().to_vec();
                    let mut dwh = params[1].grad_mut().to_vec();
                    let mut db = params[2].grad_mut().to_vec();
                    let dseq = ops::lstm_backward(
                        steps_input,
                        batch,
                        steps,
                        dim,
                        u,
                        &wx,
                        &wh,
                        lc,
                        &dh_seq,
                        &mut dwx,
                        &mut dwh,
                        &mut db,
                    );
                    params[0].grad_mut().copy_from_slice(&dwx);
                    params[1].grad_mut().copy_from_slice(&dwh);
                    params[2].grad_mut().copy_from_slice(&db);
                    input_grads.push(from_sequence(&dseq, batch, in_shape));
                }
                (LayerSpec::Flatten, _) => input_grads.push(g),
                (
                    LayerSpec::CropPad {
                        top,
                        left,
                        height,
                        width,
                    },
                    _,
                ) => {
                    input_grads.push(crop_pad_backward(&g, batch, in_shape, *top, *left, *height, *width));
                }
                (layer, _) => {
                    return Err(TensorError::Config(format!(
                        "missing cached state for {} in backward",
                        layer.kind_name()
                    )))
                }
            }
            for (&s, dg) in node.inputs.iter().zip(input_grads) {
                match grads[s].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += b),
                    None => grads[s] = Some(dg),
                }
            }
        }
        for (ts, ds) in self.params.iter_mut().zip(&self.decay) {
            for (t, &d) in ts.iter_mut().zip(ds) {
                if d != 0.0 {
                    let w = t.data().to_vec();
                    for (gv, wv) in t.grad_mut().iter_mut().zip(w) {
                        *gv += d * wv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy `−ln p[label]` over rows of `probs`.
pub fn cross_entropy(probs: &[f64], labels: &[usize], width: usize) -> Result<f64> {
    let rows = probs.len() / width;
    if labels.len() != rows || rows == 0 {
        return Err(TensorError::Config(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut total = 0.0;
    for (row, &l) in probs.chunks_exact(width).zip(labels) {
        if l >= width {
            return Err(TensorError::Config(format!("label {l} outside {width} classes")));
        }
        total -= row[l].max(1e-300).ln();
    }
    Ok(total / rows as f64)
}

/// `[N, H, W, C]` (or `[N, T, D]`) to `[N, T, D]` with `D = C·W`, feature
/// `c·W + w`.
fn to_sequence(x: &[f64], batch: usize, shape: &[usize]) -> Vec<f64> {
    if shape.len() == 2 {
        return x.to_vec();
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out[((n * h + row) * c + ch) * w + col] = x[((n * h + row) * w + col) * c + ch];
                }
            }
        }
    }
    out
}

fn from_sequence(d: &[f64], batch: usize, shape: &[usize]) -> Vec<f64> {
    if shape.len() == 2 {
        return d.to_vec();
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; d.len()];
    for n in 0..batch {
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out[((n * h + row) * w + col) * c + ch] = d[((n * h + row) * c + ch) * w + col];
                }
            }
        }
    }
    out
}

fn lstm_output(hidden: &[f64], batch: usize, steps: usize, units: usize, sequences: bool) -> Vec<f64> {
    if sequences {
        let mut y = vec![0.0; batch * steps * units];
        for t in 0..steps {
            for n in 0..batch {
                y[(n * steps + t) * units..][..units].copy_from_slice(&hidden[(t * batch + n) * units..][..units]);
            }
        }
        y
    } else {
        hidden[(steps - 1) * batch * units..].to_vec()
    }
}

fn crop_pad(x: &[f64], batch: usize, shape: &[usize], top: isize, left: isize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w, c) = (shape[0] as isize, shape[1] as isize, shape[2]);
    let mut out = vec![0.0; batch * oh * ow * c];
    for n in 0..batch {
        for y in 0..oh {
            let iy = y as isize + top;
            if iy < 0 || iy >= h {
                continue;
            }
            for xx in 0..ow {
                let ix = xx as isize + left;
                if ix < 0 || ix >= w {
                    continue;
                }
                let src = ((n as isize * h + iy) * w + ix) as usize * c;
                let dst = ((n * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

fn crop_pad_backward(
    g: &[f64],
    batch: usize,
    shape: &[usize],
    top: isize,
    left: isize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (h, w, c) = (shape[0] as isize, shape[1] as isize, shape[2]);
    let mut dx = vec![0.0; batch * shape.iter().product::<usize>()];
    for n in 0..batch {
        for y in 0..oh {
            let iy = y as isize + top;
            if iy < 0 || iy >= h {
                continue;
            }
            for xx in 0..ow {
                let ix = xx as isize + left;
                if ix < 0 || ix >= w {
                    continue;
                }
                let src = ((n * oh + y) * ow + xx) * c;
                let dst = ((n as isize * h + iy) * w + ix) as usize * c;
                for k in 0..c {
                    dx[dst + k] += g[src + k];
                }
            }
        }
    }
    dx
}

/// Incremental builder used by the model zoo and tests.
#[derive(Clone, Debug)]
pub struct SpecBuilder {
    spec: NetworkSpec,
}

impl SpecBuilder {
    pub fn new(name: impl Into<String>, input_shape: &[usize]) -> Self {
        Self {
            spec: NetworkSpec {
                name: name.into(),
                input_shape: input_shape.to_vec(),
                nodes: Vec::new(),
            },
        }
    }

    /// Slot of the network input.
    pub const INPUT: usize = 0;

    /// Append a layer fed by `inputs`; returns the new value slot.
    pub fn add(&mut self, name: impl Into<String>, layer: LayerSpec, inputs: &[usize]) -> usize {
        self.spec.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: inputs.to_vec(),
        });
        self.spec.nodes.len()
    }

    /// Append a layer fed by the most recent slot.
    pub fn then(&mut self, name: impl Into<String>, layer: LayerSpec) -> usize {
        let last = self.spec.nodes.len();
        self.add(name, layer, &[last])
    }

    pub fn last(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn shape_of(&self, slot: usize) -> Result<Vec<usize>> {
        let shapes = self.spec.infer_shapes()?;
        Ok(shapes[slot].clone())
    }

    pub fn build(self) -> NetworkSpec {
        self.spec
    }
}
