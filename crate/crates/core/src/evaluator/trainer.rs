use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EvaluationBudget, Evaluator, EvaluatorError, FitnessReport, SyntheticTask, FITNESS_FLOOR};
use crate::assembly::{AssembledNetwork, LayerOp, Shape};
use crate::hyperparams::{HyperparameterTable, LayerKind};

pub const BATCH_SIZE: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

const ACTIVATION_PARAMS: [&str; 2] = ["layer_activation", "activation"];
const NESTEROV_PARAMS: [&str; 3] = ["nesterov", "nesterov_momentum", "nesterov_accelerated_gradient"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activation {
    Relu,
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn from_params(params: &HyperparameterTable) -> Self {
        match ACTIVATION_PARAMS.iter().find_map(|n| params.get_str(n)) {
            Some(s) => match s.to_ascii_lowercase().as_str() {
                "linear" | "identity" => Activation::Linear,
                "tanh" => Activation::Tanh,
                "sigmoid" => Activation::Sigmoid,
                _ => Activation::Relu,
            },
            None => Activation::Relu,
        }
    }

    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Linear => z.clone(),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Linear => Array2::ones(z.raw_dim()),
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
            Activation::Sigmoid => a.mapv(|v| v * (1.0 - v)),
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Input,
    Affine {
        w: Array2<f64>,
        b: Array1<f64>,
        act: Activation,
    },
    Concat,
    Sum,
    Identity,
}

/// Dense network instantiated from an assembled network.
#[derive(Debug, Clone)]
struct Model {
    nodes: Vec<Node>,
    parents: Vec<Vec<usize>>,
    widths: Vec<usize>,
}

struct Pass {
    z: Vec<Option<Array2<f64>>>,
    a: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct Grads {
    w: Vec<Option<Array2<f64>>>,
    b: Vec<Option<Array1<f64>>>,
}

fn width(shape: &Shape) -> usize {
    shape.elements()
}

impl Model {
    fn build(
        net: &AssembledNetwork,
        features: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, EvaluatorError> {
        let he = net
            .globals
            .get_str("weight_initialization")
            .is_some_and(|s| s.to_ascii_lowercase().starts_with("he"));
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); net.layers.len()];
        for (f, t) in &net.edges {
            parents[*t].push(*f);
        }
        for p in &mut parents {
            p.sort_unstable();
        }
        let mut nodes = Vec::with_capacity(net.layers.len());
        let mut widths = Vec::with_capacity(net.layers.len());
        for layer in &net.layers {
            if layer.output.is_image() {
                return Err(EvaluatorError::Unsupported(format!("{} {}", layer.op.name(), layer.output)));
            }
            let fan_in: usize = parents[layer.id].iter().map(|p| widths[*p]).sum::<usize>();
            let affine = |units: usize, act: Activation, rng: &mut dyn rand::RngCore| {
                let scale = layer.params.get_f64("initial_weight_scaling").unwrap_or(1.0);
                let std = if he {
                    (2.0 / fan_in as f64).sqrt()
                } else {
                    (2.0 / (fan_in + units) as f64).sqrt()
                } * scale;
                let w = Array2::from_shape_simple_fn((fan_in, units), || {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                });
                Node::Affine {
                    w,
                    b: Array1::zeros(units),
                    act,
                }
            };
            let node = match &layer.op {
                LayerOp::Input { shape } => {
                    if width(shape) != features {
                        return Err(EvaluatorError::Mismatch(format!(
                            "input has {} units, task has {features} features",
                            width(shape)
                        )));
                    }
                    Node::Input
                }
                LayerOp::Dense { units } => affine(*units, Activation::from_params(&layer.params), rng),
                LayerOp::Bottleneck { target } => affine(width(target), Activation::Linear, rng),
                LayerOp::Output { units } => {
                    if *units != classes {
                        return Err(EvaluatorError::Mismatch(format!(
                            "output has {units} units, task has {classes} classes"
                        )));
                    }
                    affine(*units, Activation::Linear, rng)
                }
                LayerOp::Concatenate => Node::Concat,
                LayerOp::Sum => Node::Sum,
                LayerOp::Flatten => Node::Identity,
                other => return Err(EvaluatorError::Unsupported(other.name().to_string())),
            };
            nodes.push(node);
            widths.push(width(&layer.output));
        }
        Ok(Self { nodes, parents, widths })
    }

    fn parameter_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Affine { w, b, .. } => w.len() + b.len(),
                _ => 0,
            })
            .sum()
    }

    fn input_of(&self, i: usize, a: &[Array2<f64>]) -> Array2<f64> {
        let ps = &self.parents[i];
        if ps.len() == 1 {
            return a[ps[0]].clone();
        }
        let views: Vec<ArrayView2<f64>> = ps.iter().map(|p| a[*p].view()).collect();
        concatenate(Axis(1), &views).expect("rows agree")
    }

    fn forward(&self, x: ArrayView2<f64>) -> Pass {
        let mut z = Vec::with_capacity(self.nodes.len());
        let mut a: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let (zi, ai) = match node {
                Node::Input => (None, x.to_owned()),
                Node::Affine { w, b, act } => {
                    let pre = self.input_of(i, &a).dot(w) + b;
                    let out = act.apply(&pre);
                    (Some(pre), out)
                }
                Node::Concat => (None, self.input_of(i, &a)),
                Node::Sum => {
                    let mut acc = a[self.parents[i][0]].clone();
                    for p in &self.parents[i][1..] {
                        acc += &a[*p];
                    }
                    (None, acc)
                }
                Node::Identity => (None, a[self.parents[i][0]].clone()),
            };
            z.push(zi);
            a.push(ai);
        }
        Pass { z, a }
    }

    fn logits<'a>(&self, pass: &'a Pass) -> &'a Array2<f64> {
        pass.a.last().expect("output is last")
    }

    /// Mean softmax cross-entropy and its gradient with respect to the logits.
    fn loss(logits: &Array2<f64>, y: &[usize]) -> (f64, Array2<f64>) {
        let n = logits.nrows() as f64;
        let mut grad = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for (i, row) in logits.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                let p = e / total;
                grad[[i, j]] = (p - f64::from(u8::from(j == y[i]))) / n;
            }
            loss -= (exps[y[i]] / total).ln();
        }
        (loss / n, grad)
    }

    fn backward(&self, pass: &Pass, dlogits: Array2<f64>) -> Grads {
        let n = self.nodes.len();
        let rows = dlogits.nrows();
        let mut da: Vec<Array2<f64>> = self.widths.iter().map(|w| Array2::zeros((rows, *w))).collect();
        da[n - 1] = dlogits;
        let mut grads = Grads {
            w: vec![None; n],
            b: vec![None; n],
        };
        for i in (0..n).rev() {
            let upstream = std::mem::replace(&mut da[i], Array2::zeros((0, 0)));
            match &self.nodes[i] {
                Node::Input => {}
                Node::Affine { w, act, .. } => {
                    let z = pass.z[i].as_ref().expect("affine keeps z");
                    let dz = upstream * act.derivative(z, &pass.a[i]);
                    let input = self.input_of(i, &pass.a);
                    grads.w[i] = Some(input.t().dot(&dz));
                    grads.b[i] = Some(dz.sum_axis(Axis(0)));
                    let dinput = dz.dot(&w.t());
                    self.scatter(i, &dinput, &mut da);
                }
                Node::Concat => self.scatter(i, &upstream, &mut da),
                Node::Sum | Node::Identity => {
                    for p in &self.parents[i] {
                        da[*p] += &upstream;
                    }
                }
            }
        }
        grads
    }

    /// Splits a gradient over the concatenated input of node `i`.
    fn scatter(&self, i: usize, grad: &Array2<f64>, da: &mut [Array2<f64>]) {
        let mut col = 0;
        for p in &self.parents[i] {
            let w = self.widths[*p];
            da[*p] += &grad.slice(s![.., col..col + w]);
            col += w;
        }
    }

    fn batch_loss(&self, x: ArrayView2<f64>, y: &[usize]) -> f64 {
        Self::loss(self.logits(&self.forward(x)), y).0
    }

    fn accuracy(&self, x: ArrayView2<f64>, y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let pass = self.forward(x);
        let correct = self
            .logits(&pass)
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(row, label)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if *v > acc.1 { (j, *v) } else { acc });
                best.0 == **label
            })
            .count();
        correct as f64 / y.len() as f64
    }
}

struct Optimizer {
    lr: f64,
    momentum: f64,
    nesterov: bool,
    vw: Vec<Option<Array2<f64>>>,
    vb: Vec<Option<Array1<f64>>>,
}

impl Optimizer {
    fn new(model: &Model, globals: &HyperparameterTable) -> Self {
        let zeros_w = model
            .nodes
            .iter()
            .map(|n| match n {
                Node::Affine { w, .. } => Some(Array2::zeros(w.raw_dim())),
                _ => None,
            })
            .collect();
        let zeros_b = model
            .nodes
            .iter()
            .map(|n| match n {
                Node::Affine { b, .. } => Some(Array1::zeros(b.raw_dim())),
                _ => None,
            })
            .collect();
        Self {
            lr: globals.get_f64("learning_rate").unwrap_or(DEFAULT_LEARNING_RATE),
            momentum: globals.get_f64("momentum").unwrap_or(DEFAULT_MOMENTUM),
            nesterov: NESTEROV_PARAMS.iter().find_map(|n| globals.get_bool(n)).unwrap_or(false),
            vw: zeros_w,
            vb: zeros_b,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Grads) {
        let (lr, mu, nesterov) = (self.lr, self.momentum, self.nesterov);
        for (i, node) in model.nodes.iter_mut().enumerate() {
            let Node::Affine { w, b, .. } = node else { continue };
            let (gw, gb) = (grads.w[i].as_ref().expect("affine"), grads.b[i].as_ref().expect("affine"));
            let vw = self.vw[i].as_mut().expect("affine");
            let vb = self.vb[i].as_mut().expect("affine");
            *vw = &*vw * mu - gw * lr;
            *vb = &*vb * mu - gb * lr;
            if nesterov {
                *w += &(&*vw * mu - gw * lr);
                *b += &(&*vb * mu - gb * lr);
            } else {
                *w += &*vw;
                *b += &*vb;
            }
        }
    }
}

/// Trains dense networks with mini-batch SGD on a synthetic task and scores
/// them by validation accuracy.
#[derive(Debug, Clone)]
pub struct Trainer {
    task: Arc<SyntheticTask>,
}

impl Trainer {
    pub fn new(task: SyntheticTask) -> Self {
        Self { task: Arc::new(task) }
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }
}

impl Evaluator for Trainer {
    fn evaluate(
        &self,
        network_id: u64,
        net: &AssembledNetwork,
        budget: &EvaluationBudget,
    ) -> Result<FitnessReport, EvaluatorError> {
        budget.validate()?;
        let task = &*self.task;
        let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
        let mut model = Model::build(net, task.features(), task.classes(), &mut rng)?;
        let mut opt = Optimizer::new(&model, &net.globals);
        let n = task.train_x.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut curve = Vec::with_capacity(budget.epochs as usize);
        for _ in 0..budget.epochs {
            order.shuffle(&mut rng);
            let used = if budget.sample_cap > 0 { budget.sample_cap.min(n) } else { n };
            for chunk in order[..used].chunks(BATCH_SIZE) {
                let x = task.train_x.select(Axis(0), chunk);
                let y: Vec<usize> = chunk.iter().map(|i| task.train_y[*i]).collect();
                let pass = model.forward(x.view());
                let (_, dlogits) = Model::loss(model.logits(&pass), &y);
                let grads = model.backward(&pass, dlogits);
                opt.step(&mut model, &grads);
            }
            let loss = model.batch_loss(task.train_x.view(), &task.train_y);
            curve.push(loss);
            if !loss.is_finite() {
                let mut report = FitnessReport::new(network_id, FITNESS_FLOOR);
                report.diagnostics.insert("diverged".into(), true.into());
                report.diagnostics.insert("epochs_completed".into(), (curve.len() - 1).into());
                return Ok(report);
            }
        }
        let accuracy = model.accuracy(task.val_x.view(), &task.val_y);
        let mut report = FitnessReport::new(network_id, accuracy);
        report.diagnostics.insert("train_loss".into(), curve.into());
        report.diagnostics.insert("parameters".into(), model.parameter_count().into());
        Ok(report)
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn capabilities(&self) -> Vec<LayerKind> {
        vec![LayerKind::Dense]
    }
}

/// Largest relative difference between backpropagated gradients and central
/// finite differences with step `epsilon`, over every weight and bias, on
/// the first (up to) 16 training samples. Relative error uses
/// `max(|analytic| + |numeric|, 1e-6)` as the denominator.
pub fn gradient_check(
    net: &AssembledNetwork,
    task: &SyntheticTask,
    epsilon: f64,
    seed: u64,
) -> Result<f64, EvaluatorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(net, task.features(), task.classes(), &mut rng)?;
    for node in &mut model.nodes {
        if let Node::Affine { b, .. } = node {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    let rows = task.train_x.nrows().min(16);
    let x = task.train_x.slice(s![..rows, ..]).to_owned();
    let y = &task.train_y[..rows];
    let pass = model.forward(x.view());
    let (_, dlogits) = Model::loss(model.logits(&pass), y);
    let grads = model.backward(&pass, dlogits);

    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for i in 0..model.nodes.len() {
        let Node::Affine { w, b, .. } = &model.nodes[i] else { continue };
        for idx in 0..w.len() {
            let (r, c) = (idx / w.ncols(), idx % w.ncols());
            let numeric = central_difference(&model, &x, y, epsilon, |m, d| {
                if let Node::Affine { w, .. } = &mut m.nodes[i] {
                    w[[r, c]] += d;
                }
            });
            worst = worst.max(rel(grads.w[i].as_ref().expect("affine")[[r, c]], numeric));
        }
        for j in 0..b.len() {
            let numeric = central_difference(&model, &x, y, epsilon, |m, d| {
                if let Node::Affine { b, .. } = &mut m.nodes[i] {
                    b[j] += d;
                }
            });
            worst = worst.max(rel(grads.b[i].as_ref().expect("affine")[j], numeric));
        }
    }
    Ok(worst)
}

fn central_difference(
    model: &Model,
    x: &Array2<f64>,
    y: &[usize],
    epsilon: f64,
    nudge: impl Fn(&mut Model, f64),
) -> f64 {
    let mut plus = model.clone();
    nudge(&mut plus, epsilon);
    let mut minus = model.clone();
    nudge(&mut minus, -epsilon);
    (plus.batch_loss(x.view(), y) - minus.batch_loss(x.view(), y)) / (2.0 * epsilon)
}
