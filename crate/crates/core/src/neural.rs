//! LSTM and GRU cells with per-step coefficients, a dense output head,
//! exact reverse-mode gradients through time, and the gradient-descent
//! training loop.
//!
//! A model reads the `S × k` predictor block of one day, runs the cell over
//! the `S` intra-day steps, and maps the stacked outputs `H` to the `P`
//! forecast values with `y = D · H`. Each step `s` owns its own gate
//! coefficients (row `s` of `Γ`, `Θ` and `Λ`) unless `shared_weights` is set,
//! in which case all steps read row 0. With `width = 1` the hidden state is a
//! scalar.
//!
//! Column layout of the coefficient matrices, for gate `g`, input `j`,
//! hidden units `v` (source) and `w` (target):
//!
//! * `Γ`: column `(g·k + j)·W + w`
//! * `Θ`: column `(g·W + v)·W + w`
//! * `Λ`: column `g·W + w`
//! * `D`: column `s·W + w`
//!
//! LSTM gates are ordered input, forget, memory, output; GRU gates are
//! input (reset), candidate, update.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::SamplePair;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("non-finite value at step {step} in gate {gate}")]
    Numeric { step: usize, gate: &'static str },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    fn gate_name(self, g: usize) -> &'static str {
        match (self, g) {
            (CellKind::Lstm, 0) => "input",
            (CellKind::Lstm, 1) => "forget",
            (CellKind::Lstm, 2) => "memory",
            (CellKind::Lstm, _) => "output",
            (CellKind::Gru, 0) => "input",
            (CellKind::Gru, 1) => "candidate",
            (CellKind::Gru, _) => "update",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "LSTM",
            CellKind::Gru => "GRU",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = NeuralError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(NeuralError::Param(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Dimensions of a recurrent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnShape {
    pub kind: CellKind,
    /// Time steps `S`.
    pub steps: usize,
    /// Inputs per step `k`.
    pub inputs: usize,
    /// Forecast length `P`.
    pub outputs: usize,
    /// Hidden width (1 for a scalar cell).
    pub width: usize,
    pub shared_weights: bool,
}

impl RnnShape {
    pub fn new(kind: CellKind, steps: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            kind,
            steps,
            inputs,
            outputs,
            width: 1,
            shared_weights: false,
        }
    }

    fn param_rows(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.steps
        }
    }
}

/// Coefficients of a recurrent model: gate input weights `Γ`, recurrent
/// weights `Θ`, intercepts `Λ` and the dense head `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    shape: RnnShape,
    pub gamma: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub dense: DMatrix<f64>,
}

impl RnnParams {
    pub fn zeros(shape: RnnShape) -> Result<Self> {
        if shape.steps == 0 || shape.inputs == 0 || shape.outputs == 0 || shape.width == 0 {
            return Err(NeuralError::Param(format!("degenerate shape {shape:?}")));
        }
        let (g, w, r) = (shape.kind.gates(), shape.width, shape.param_rows());
        Ok(Self {
            shape,
            gamma: DMatrix::zeros(r, shape.inputs * g * w),
            theta: DMatrix::zeros(r, g * w * w),
            lambda: DMatrix::zeros(r, g * w),
            dense: DMatrix::zeros(shape.outputs, shape.steps * w),
        })
    }

    /// Every coordinate drawn from `uniform(−scale, scale)`.
    pub fn random(shape: RnnShape, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.for_each_mut(|v| *v = rng.random_range(-scale..=scale));
        Ok(p)
    }

    pub fn shape(&self) -> RnnShape {
        self.shape
    }

    pub fn kind(&self) -> CellKind {
        self.shape.kind
    }

    pub fn n_params(&self) -> usize {
        self.gamma.len() + self.theta.len() + self.lambda.len() + self.dense.len()
    }

    /// The four coefficient blocks as flat slices.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            self.gamma.as_slice(),
            self.theta.as_slice(),
            self.lambda.as_slice(),
            self.dense.as_slice(),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.gamma.as_mut_slice(),
            self.theta.as_mut_slice(),
            self.lambda.as_mut_slice(),
            self.dense.as_mut_slice(),
        ]
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(&mut f);
        }
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &RnnParams, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn row(&self, s: usize) -> usize {
        if self.shape.shared_weights {
            0
        } else {
            s
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.shape.steps || x.ncols() != self.shape.inputs {
            return Err(NeuralError::Param(format!(
                "input block is {}×{}, model expects {}×{}",
                x.nrows(),
                x.ncols(),
                self.shape.steps,
                self.shape.inputs
            )));
        }
        Ok(())
    }

    fn pre_activation(&self, s: usize, g: usize, w: usize, x: &DMatrix<f64>, hprev: &[f64]) -> f64 {
        let (k, width) = (self.shape.inputs, self.shape.width);
        let r = self.row(s);
        let mut a = self.lambda[(r, g * width + w)];
        for j in 0..k {
            a += x[(s, j)] * self.gamma[(r, (g * k + j) * width + w)];
        }
        for (v, h) in hprev.iter().enumerate() {
            a += h * self.theta[(r, (g * width + v) * width + w)];
        }
        a
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    kind: CellKind,
    width: usize,
    /// Hidden states `h_0 … h_S`, `width` values each.
    pub hidden: Vec<f64>,
    /// LSTM memory `m_0 … m_S`; empty for a GRU.
    pub memory: Vec<f64>,
    /// Activated gate values per step: `gates[(s·G + g)·W + w]`.
    pub gates: Vec<f64>,
}

impl ForwardTrace {
    /// Outputs `H = (h_1, …, h_S)`.
    pub fn outputs(&self) -> &[f64] {
        &self.hidden[self.width..]
    }

    fn gate(&self, s: usize, g: usize, w: usize) -> f64 {
        self.gates[(s * self.kind.gates() + g) * self.width + w]
    }
}

fn check_state(name: &str, v: &[f64], width: usize) -> Result<()> {
    if v.len() != width || v.iter().any(|x| !x.is_finite()) {
        return Err(NeuralError::Param(format!(
            "{name} must hold {width} finite values"
        )));
    }
    Ok(())
}

/// Runs the LSTM cell over all steps.
pub fn lstm_forward(
    params: &RnnParams,
    x: &DMatrix<f64>,
    h0: &[f64],
    m0: &[f64],
) -> Result<ForwardTrace> {
    if params.kind() != CellKind::Lstm {
        return Err(NeuralError::Param("lstm_forward needs LSTM parameters".into()));
    }
    params.check_input(x)?;
    let (steps, width) = (params.shape.steps, params.shape.width);
    check_state("h0", h0, width)?;
    check_state("m0", m0, width)?;
    let mut hidden = Vec::with_capacity((steps + 1) * width);
    let mut memory = Vec::with_capacity((steps + 1) * width);
    let mut gates = Vec::with_capacity(steps * 4 * width);
    hidden.extend_from_slice(h0);
    memory.extend_from_slice(m0);
    let mut act = vec![0.0; 4 * width];
    for s in 0..steps {
        let hprev = &hidden[s * width..(s + 1) * width];
        for g in 0..4 {
            for w in 0..width {
                let a = params.pre_activation(s, g, w, x, hprev);
                let v = if g == 2 { a.tanh() } else { sigmoid(a) };
                if !v.is_finite() {
                    return Err(NeuralError::Numeric {
                        step: s,
                        gate: CellKind::Lstm.gate_name(g),
                    });
                }
                act[g * width + w] = v;
            }
        }
        for w in 0..width {
            let (i, f, c, o) = (act[w], act[width + w], act[2 * width + w], act[3 * width + w]);
            let m = f * memory[s * width + w] + i * c;
            let h = o * m.tanh();
            if !(m.is_finite() && h.is_finite()) {
                return Err(NeuralError::Numeric {
                    step: s,
                    gate: "memory",
                });
            }
            memory.push(m);
            hidden.push(h);
        }
        gates.extend_from_slice(&act);
    }
    Ok(ForwardTrace {
        kind: CellKind::Lstm,
        width,
        hidden,
        memory,
        gates,
    })
}

/// Runs the GRU cell over all steps. The reset (input) gate multiplies the
/// previous output inside the candidate's recurrent term.
pub fn gru_forward(params: &RnnParams, x: &DMatrix<f64>, h0: &[f64]) -> Result<ForwardTrace> {
    if params.kind() != CellKind::Gru {
        return Err(NeuralError::Param("gru_forward needs GRU parameters".into()));
    }
    params.check_input(x)?;
    let (steps, width) = (params.shape.steps, params.shape.width);
    check_state("h0", h0, width)?;
    let mut hidden = Vec::with_capacity((steps + 1) * width);
    let mut gates = Vec::with_capacity(steps * 3 * width);
    hidden.extend_from_slice(h0);
    let mut act = vec![0.0; 3 * width];
    let mut gated = vec![0.0; width];
    for s in 0..steps {
        let hprev = hidden[s * width..(s + 1) * width].to_vec();
        for w in 0..width {
            act[w] = sigmoid(params.pre_activation(s, 0, w, x, &hprev));
            act[2 * width + w] = sigmoid(params.pre_activation(s, 2, w, x, &hprev));
        }
        for v in 0..width {
            gated[v] = act[v] * hprev[v];
        }
        for w in 0..width {
            act[width + w] = params.pre_activation(s, 1, w, x, &gated).tanh();
        }
        for g in 0..3 {
            if act[g * width..(g + 1) * width].iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::Numeric {
                    step: s,
                    gate: CellKind::Gru.gate_name(g),
                });
            }
        }
        for w in 0..width {
            let (c, u) = (act[width + w], act[2 * width + w]);
            hidden.push((1.0 - u) * hprev[w] + u * c);
        }
        gates.extend_from_slice(&act);
    }
    Ok(ForwardTrace {
        kind: CellKind::Gru,
        width,
        hidden,
        memory: Vec::new(),
        gates,
    })
}

/// Forward pass from a zero initial state.
pub fn forward(params: &RnnParams, x: &DMatrix<f64>) -> Result<ForwardTrace> {
    let zeros = vec![0.0; params.shape.width];
    match params.kind() {
        CellKind::Lstm => lstm_forward(params, x, &zeros, &zeros),
        CellKind::Gru => gru_forward(params, x, &zeros),
    }
}

/// `D · H`.
pub fn dense_apply(dense: &DMatrix<f64>, h: &[f64]) -> Result<Vec<f64>> {
    if dense.ncols() != h.len() {
        return Err(NeuralError::Param(format!(
            "dense head has {} columns, hidden output has {} values",
            dense.ncols(),
            h.len()
        )));
    }
    let mut out = vec![0.0; dense.nrows()];
    for (c, &hv) in h.iter().enumerate() {
        for (o, d) in out.iter_mut().zip(dense.column(c).iter()) {
            *o += d * hv;
        }
    }
    Ok(out)
}

/// Per-sample loss `(1/P) Σ (ŷ − y)²`.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / pred.len() as f64
}

/// Gradient of the mean squared error with respect to every coefficient.
pub fn backward(
    params: &RnnParams,
    trace: &ForwardTrace,
    x: &DMatrix<f64>,
    target: &[f64],
) -> Result<RnnParams> {
    let pred = dense_apply(&params.dense, trace.outputs())?;
    if target.len() != pred.len() {
        return Err(NeuralError::Param(format!(
            "target has {} values, model forecasts {}",
            target.len(),
            pred.len()
        )));
    }
    let residual: Vec<f64> = pred.iter().zip(target).map(|(p, y)| p - y).collect();
    backward_residual(params, trace, x, &residual)
}

/// [`backward`] expressed through the residual `ŷ − y`.
pub fn backward_residual(
    params: &RnnParams,
    trace: &ForwardTrace,
    x: &DMatrix<f64>,
    residual: &[f64],
) -> Result<RnnParams> {
    params.check_input(x)?;
    let shape = params.shape;
    let (steps, width, k) = (shape.steps, shape.width, shape.inputs);
    if residual.len() != shape.outputs
        || trace.kind != shape.kind
        || trace.width != width
        || trace.hidden.len() != (steps + 1) * width
    {
        return Err(NeuralError::Param(
            "trace or residual does not match the model shape".into(),
        ));
    }
    let p = shape.outputs as f64;
    let dy: Vec<f64> = residual.iter().map(|r| 2.0 * r / p).collect();
    let mut grad = RnnParams::zeros(shape)?;

    // dense head and the gradient reaching each output h_s
    let outputs = trace.outputs();
    let mut dh_dense = vec![0.0; steps * width];
    for c in 0..steps * width {
        let mut acc = 0.0;
        for (o, &d) in dy.iter().enumerate() {
            grad.dense[(o, c)] = d * outputs[c];
            acc += params.dense[(o, c)] * d;
        }
        dh_dense[c] = acc;
    }

    let n_gates = shape.kind.gates();
    let mut dh_next = vec![0.0; width];
    let mut dm_next = vec![0.0; width];
    let mut da = vec![0.0; n_gates * width];
    for s in (0..steps).rev() {
        let r = params.row(s);
        let hprev = &trace.hidden[s * width..(s + 1) * width];
        let mut dh_prev = vec![0.0; width];
        match shape.kind {
            CellKind::Lstm => {
                for w in 0..width {
                    let dh = dh_dense[s * width + w] + dh_next[w];
                    let (i, f, c, o) = (
                        trace.gate(s, 0, w),
                        trace.gate(s, 1, w),
                        trace.gate(s, 2, w),
                        trace.gate(s, 3, w),
                    );
                    let m_prev = trace.memory[s * width + w];
                    let tm = trace.memory[(s + 1) * width + w].tanh();
                    let d_o = dh * tm;
                    let dm = dm_next[w] + dh * o * (1.0 - tm * tm);
                    da[w] = dm * c * i * (1.0 - i);
                    da[width + w] = dm * m_prev * f * (1.0 - f);
                    da[2 * width + w] = dm * i * (1.0 - c * c);
                    da[3 * width + w] = d_o * o * (1.0 - o);
                    dm_next[w] = dm * f;
                }
                for g in 0..4 {
                    for w in 0..width {
                        let d = da[g * width + w];
                        for (v, dhp) in dh_prev.iter_mut().enumerate() {
                            let col = (g * width + v) * width + w;
                            grad.theta[(r, col)] += hprev[v] * d;
                            *dhp += params.theta[(r, col)] * d;
                        }
                    }
                }
            }
            CellKind::Gru => {
                for w in 0..width {
                    let dh = dh_dense[s * width + w] + dh_next[w];
                    let (c, u) = (trace.gate(s, 1, w), trace.gate(s, 2, w));
                    da[width + w] = dh * u * (1.0 - c * c);
                    da[2 * width + w] = dh * (c - hprev[w]) * u * (1.0 - u);
                    dh_prev[w] += dh * (1.0 - u);
                }
                // candidate: recurrent term acts on reset ⊙ h_prev
                for v in 0..width {
                    let reset = trace.gate(s, 0, v);
                    let mut d_gated = 0.0;
                    for w in 0..width {
                        let col = (width + v) * width + w;
                        grad.theta[(r, col)] += reset * hprev[v] * da[width + w];
                        d_gated += params.theta[(r, col)] * da[width + w];
                    }
                    dh_prev[v] += d_gated * reset;
                    da[v] = d_gated * hprev[v] * reset * (1.0 - reset);
                }
                for g in [0, 2] {
                    for w in 0..width {
                        let d = da[g * width + w];
                        for (v, dhp) in dh_prev.iter_mut().enumerate() {
                            let col = (g * width + v) * width + w;
                            grad.theta[(r, col)] += hprev[v] * d;
                            *dhp += params.theta[(r, col)] * d;
                        }
                    }
                }
            }
        }
        for g in 0..n_gates {
            for w in 0..width {
                let d = da[g * width + w];
                grad.lambda[(r, g * width + w)] += d;
                for j in 0..k {
                    grad.gamma[(r, (g * k + j) * width + w)] += x[(s, j)] * d;
                }
            }
        }
        dh_next = dh_prev;
    }
    Ok(grad)
}

/// Loss and gradient of one sample.
pub fn loss_and_gradient(
    params: &RnnParams,
    x: &DMatrix<f64>,
    target: &[f64],
) -> Result<(f64, RnnParams)> {
    let trace = forward(params, x)?;
    let pred = dense_apply(&params.dense, trace.outputs())?;
    let loss = mse(&pred, target);
    let grad = backward(params, &trace, x, target)?;
    Ok((loss, grad))
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Samples per update; `None` uses the full training set.
    pub batch_size: Option<usize>,
    pub width: usize,
    pub shared_weights: bool,
    /// Half-width of the uniform initialisation.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
            grad_clip: Some(5.0),
            batch_size: Some(16),
            width: 1,
            shared_weights: false,
            init_scale: 0.05,
        }
    }
}

/// A trained model with its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub params: RnnParams,
    pub loss_history: Vec<f64>,
}

fn batch_gradient(params: &RnnParams, batch: &[&SamplePair]) -> Result<(f64, RnnParams)> {
    let parts: Vec<Result<(f64, RnnParams)>> = batch
        .par_iter()
        .map(|pair| loss_and_gradient(params, &pair.predictors, &pair.target))
        .collect();
    // fixed summation order keeps runs bit-identical
    let mut total = RnnParams::zeros(params.shape())?;
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    let n = batch.len() as f64;
    for block in total.blocks_mut() {
        block.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss, total))
}

/// Fits a recurrent model by gradient descent on the mean squared error,
/// `Ψ ← Ψ − δ ∇loss`, over shuffled mini-batches.
pub fn train(kind: CellKind, samples: &[SamplePair], cfg: &TrainConfig) -> Result<Trained> {
    let first = samples
        .first()
        .ok_or_else(|| NeuralError::Param("empty training set".into()))?;
    if !(cfg.learning_rate >= 0.0) || cfg.epochs == 0 {
        return Err(NeuralError::Param(
            "learning rate must be non-negative and epochs positive".into(),
        ));
    }
    let shape = RnnShape {
        kind,
        steps: first.predictors.nrows(),
        inputs: first.predictors.ncols(),
        outputs: first.target.len(),
        width: cfg.width,
        shared_weights: cfg.shared_weights,
    };
    if samples
        .iter()
        .any(|s| s.predictors.shape() != first.predictors.shape() || s.target.len() != shape.outputs)
    {
        return Err(NeuralError::Param("samples have inconsistent shapes".into()));
    }
    let mut params = RnnParams::random(shape, cfg.seed, cfg.init_scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let batch_size = cfg.batch_size.unwrap_or(samples.len()).clamp(1, samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, mut grad) = batch_gradient(&params, &batch)?;
            epoch_loss += loss;
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.norm();
                if norm > clip {
                    let f = clip / norm;
                    grad.for_each_mut(|v| *v *= f);
                }
            }
            params.add_scaled(&grad, -cfg.learning_rate);
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        if !mean_loss.is_finite() || !params.is_finite() || mean_loss > 1e6 * history.first().copied().unwrap_or(mean_loss) {
            return Err(NeuralError::TrainingDiverged {
                epoch,
                loss: mean_loss,
            });
        }
        history.push(mean_loss);
    }
    Ok(Trained {
        params,
        loss_history: history,
    })
}

/// A forecast clipped to the scaled load range.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub values: Vec<f64>,
    /// How many values were moved into `[0, 1]`.
    pub clipped: usize,
}

pub fn clip_unit(raw: Vec<f64>) -> Forecast {
    let mut clipped = 0;
    let values = raw
        .into_iter()
        .map(|v| {
            let c = v.clamp(0.0, 1.0);
            if c != v {
                clipped += 1;
            }
            c
        })
        .collect();
    Forecast { values, clipped }
}

/// Unclipped model output `D · H`.
pub fn predict_raw(model: &RnnParams, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let trace = forward(model, x)?;
    dense_apply(&model.dense, trace.outputs())
}

pub fn forecast_nn(model: &RnnParams, x: &DMatrix<f64>) -> Result<Forecast> {
    Ok(clip_unit(predict_raw(model, x)?))
}

const MAGIC: &str = "stlf-rnn";
const FORMAT_VERSION: u32 = 1;

fn write_matrix<W: Write>(out: &mut W, name: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(out, "{name} {} {}", m.nrows(), m.ncols())?;
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

fn read_matrix<I: Iterator<Item = std::io::Result<String>>>(
    lines: &mut I,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>> {
    let header = next_line(lines)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts != [name, &rows.to_string(), &cols.to_string()] {
        return Err(NeuralError::Format(format!(
            "expected block header `{name} {rows} {cols}`, found `{header}`"
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let line = next_line(lines)?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != cols {
            return Err(NeuralError::Format(format!(
                "{name} row {r} has {} values, expected {cols}",
                values.len()
            )));
        }
        for (c, v) in values.iter().enumerate() {
            m[(r, c)] = v
                .parse()
                .map_err(|_| NeuralError::Format(format!("{name} row {r}: bad number {v:?}")))?;
        }
    }
    Ok(m)
}

fn next_line<I: Iterator<Item = std::io::Result<String>>>(lines: &mut I) -> Result<String> {
    lines
        .next()
        .ok_or_else(|| NeuralError::Format("unexpected end of file".into()))?
        .map_err(NeuralError::from)
}

impl RnnParams {
    /// Writes the versioned text format: a shape header followed by the
    /// row-major `Γ`, `Θ`, `Λ` and `D` blocks.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let s = self.shape;
        writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(
            out,
            "kind={} S={} k={} G={} P={} width={} shared={}",
            s.kind,
            s.steps,
            s.inputs,
            s.kind.gates(),
            s.outputs,
            s.width,
            u8::from(s.shared_weights)
        )?;
        write_matrix(&mut out, "gamma", &self.gamma)?;
        write_matrix(&mut out, "theta", &self.theta)?;
        write_matrix(&mut out, "lambda", &self.lambda)?;
        write_matrix(&mut out, "dense", &self.dense)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let magic = next_line(&mut lines)?;
        if magic != format!("{MAGIC} {FORMAT_VERSION}") {
            return Err(NeuralError::Format(format!("unsupported header `{magic}`")));
        }
        let header = next_line(&mut lines)?;
        let mut fields = std::collections::HashMap::new();
        for part in header.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| NeuralError::Format(format!("bad shape field `{part}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| NeuralError::Format(format!("missing shape field `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| NeuralError::Format(format!("shape field `{k}` is not a count")))
        };
        let kind: CellKind = get("kind")?.parse()?;
        if num("G")? != kind.gates() {
            return Err(NeuralError::Format("gate count does not match the cell kind".into()));
        }
        let shape = RnnShape {
            kind,
            steps: num("S")?,
            inputs: num("k")?,
            outputs: num("P")?,
            width: num("width")?,
            shared_weights: num("shared")? == 1,
        };
        let template = RnnParams::zeros(shape)?;
        let gamma = read_matrix(&mut lines, "gamma", template.gamma.nrows(), template.gamma.ncols())?;
        let theta = read_matrix(&mut lines, "theta", template.theta.nrows(), template.theta.ncols())?;
        let lambda = read_matrix(&mut lines, "lambda", template.lambda.nrows(), template.lambda.ncols())?;
        let dense = read_matrix(&mut lines, "dense", template.dense.nrows(), template.dense.ncols())?;
        let params = RnnParams {
            shape,
            gamma,
            theta,
            lambda,
            dense,
        };
        if !params.is_finite() {
            return Err(NeuralError::Format("non-finite coefficient".into()));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_input(seed: u64, s: usize, k: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(s, k, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_lstm_has_half_gates() {
        let p = RnnParams::zeros(RnnShape::new(CellKind::Lstm, 96, 4, 192)).unwrap();
        let x = random_input(1, 96, 4);
        let t = lstm_forward(&p, &x, &[0.0], &[0.0]).unwrap();
        for s in 0..96 {
            assert_eq!(t.gate(s, 0, 0), 0.5);
            assert_eq!(t.gate(s, 1, 0), 0.5);
            assert_eq!(t.gate(s, 3, 0), 0.5);
        }
        assert!(t.outputs().iter().all(|&h| h == 0.0));
        assert!(t.memory.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn lstm_one_step_by_hand() {
        let mut p = RnnParams::zeros(RnnShape::new(CellKind::Lstm, 1, 1, 1)).unwrap();
        p.gamma.fill(1.0);
        let x = DMatrix::from_element(1, 1, 1.0);
        let t = lstm_forward(&p, &x, &[0.0], &[0.0]).unwrap();
        let s1 = sig(1.0);
        let m = s1 * 1.0f64.tanh();
        let h = s1 * m.tanh();
        assert!((t.gate(0, 0, 0) - s1).abs() < 1e-15);
        assert!((t.gate(0, 1, 0) - s1).abs() < 1e-15);
        assert!((t.gate(0, 3, 0) - s1).abs() < 1e-15);
        assert!((t.memory[1] - m).abs() < 1e-15);
        assert!((t.outputs()[0] - h).abs() < 1e-15);
    }

    #[test]
    fn gru_zero_parameters() {
        let p = RnnParams::zeros(RnnShape::new(CellKind::Gru, 5, 4, 3)).unwrap();
        let x = random_input(2, 5, 4);
        let t = gru_forward(&p, &x, &[0.0]).unwrap();
        assert!(t.outputs().iter().all(|&h| h == 0.0));
        assert!((0..5).all(|s| t.gate(s, 0, 0) == 0.5 && t.gate(s, 2, 0) == 0.5 && t.gate(s, 1, 0) == 0.0));
        let t = gru_forward(&p, &x, &[1.0]).unwrap();
        assert_eq!(t.outputs()[0], 0.5);
    }

    #[test]
    fn gru_closed_update_gate_holds_state() {
        let mut p = RnnParams::random(RnnShape::new(CellKind::Gru, 8, 2, 1), 3, 0.5).unwrap();
        for s in 0..8 {
            p.lambda[(s, 2)] = -60.0;
        }
        let t = gru_forward(&p, &random_input(4, 8, 2), &[0.7]).unwrap();
        assert!(t.outputs().iter().all(|h| (h - 0.7).abs() < 1e-20_f64.max(1e-12)));
    }

    #[test]
    fn gru_open_update_gate_is_candidate() {
        let mut p = RnnParams::random(RnnShape::new(CellKind::Gru, 8, 2, 1), 5, 0.5).unwrap();
        for s in 0..8 {
            p.lambda[(s, 2)] = 60.0;
        }
        let t = gru_forward(&p, &random_input(6, 8, 2), &[0.3]).unwrap();
        for s in 0..8 {
            assert!((t.outputs()[s] - t.gate(s, 1, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_cases() {
        let h = vec![0.1, -0.2, 0.3];
        let mut stacked = DMatrix::zeros(6, 3);
        for i in 0..3 {
            stacked[(i, i)] = 1.0;
            stacked[(i + 3, i)] = 1.0;
        }
        assert_eq!(dense_apply(&stacked, &h).unwrap(), [h.clone(), h.clone()].concat());
        assert!(dense_apply(&DMatrix::zeros(6, 3), &h).unwrap().iter().all(|&v| v == 0.0));
        assert!(dense_apply(&DMatrix::zeros(6, 4), &h).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = DMatrix::from_fn(192, 96, |_, _| rng.random_range(-1.0..1.0));
        let h: Vec<f64> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = dense_apply(&d, &h).unwrap();
        for p in 0..192 {
            let mut acc = 0.0;
            for s in 0..96 {
                acc += d[(p, s)] * h[s];
            }
            assert!((out[p] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let p = RnnParams::random(RnnShape::new(kind, 6, 3, 4), 9, 0.5).unwrap();
            let x = random_input(10, 6, 3);
            let pred = predict_raw(&p, &x).unwrap();
            let (_, g) = loss_and_gradient(&p, &x, &pred).unwrap();
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn doubling_residual_doubles_dense_gradient() {
        let p = RnnParams::random(RnnShape::new(CellKind::Lstm, 5, 2, 3), 11, 0.5).unwrap();
        let x = random_input(12, 5, 2);
        let trace = forward(&p, &x).unwrap();
        let r = vec![0.3, -0.7, 0.11];
        let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let g1 = backward_residual(&p, &trace, &x, &r).unwrap();
        let g2 = backward_residual(&p, &trace, &x, &r2).unwrap();
        for (a, b) in g1.dense.iter().zip(g2.dense.iter()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn shape_mismatch_is_param_error() {
        let p = RnnParams::zeros(RnnShape::new(CellKind::Lstm, 4, 2, 3)).unwrap();
        let x = DMatrix::zeros(4, 3);
        assert!(matches!(forward(&p, &x), Err(NeuralError::Param(_))));
        let x = DMatrix::zeros(4, 2);
        let t = forward(&p, &x).unwrap();
        assert!(matches!(backward(&p, &t, &x, &[0.0; 2]), Err(NeuralError::Param(_))));
    }

    #[test]
    fn non_finite_input_names_step_and_gate() {
        let p = RnnParams::random(RnnShape::new(CellKind::Lstm, 4, 2, 3), 1, 0.5).unwrap();
        let mut x = DMatrix::zeros(4, 2);
        x[(2, 1)] = f64::NAN;
        match forward(&p, &x) {
            Err(NeuralError::Numeric { step, gate }) => {
                assert_eq!(step, 2);
                assert_eq!(gate, "input");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_model_forecasts_zero() {
        let p = RnnParams::zeros(RnnShape::new(CellKind::Gru, 96, 4, 192)).unwrap();
        let f = forecast_nn(&p, &random_input(1, 96, 4)).unwrap();
        assert_eq!(f.values.len(), 192);
        assert!(f.values.iter().all(|&v| v == 0.0));
        assert_eq!(f.clipped, 0);
    }

    #[test]
    fn persistence_round_trip() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let mut shape = RnnShape::new(kind, 7, 3, 5);
            shape.width = 2;
            let p = RnnParams::random(shape, 13, 1.0).unwrap();
            let mut buf = Vec::new();
            p.write_to(&mut buf).unwrap();
            let back = RnnParams::read_from(buf.as_slice()).unwrap();
            assert_eq!(back, p);
        }
        assert!(RnnParams::read_from("nonsense\n".as_bytes()).is_err());
    }

    #[test]
    fn wide_and_shared_gradients_match_finite_differences() {
        for kind in [CellKind::Lstm, CellKind::Gru] {
            for shared in [false, true] {
                let shape = RnnShape {
                    kind,
                    steps: 4,
                    inputs: 2,
                    outputs: 3,
                    width: 2,
                    shared_weights: shared,
                };
                let p = RnnParams::random(shape, 21, 0.8).unwrap();
                let x = random_input(22, 4, 2);
                let y = vec![0.2, -0.4, 0.9];
                let (_, g) = loss_and_gradient(&p, &x, &y).unwrap();
                let eps = 1e-6;
                let mut worst: f64 = 0.0;
                for b in 0..4 {
                    for i in 0..p.blocks()[b].len() {
                        let mut plus = p.clone();
                        plus.blocks_mut()[b][i] += eps;
                        let mut minus = p.clone();
                        minus.blocks_mut()[b][i] -= eps;
                        let lp = mse(&predict_raw(&plus, &x).unwrap(), &y);
                        let lm = mse(&predict_raw(&minus, &x).unwrap(), &y);
                        let fd = (lp - lm) / (2.0 * eps);
                        let a = g.blocks()[b][i];
                        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
                    }
                }
                assert!(worst < 1e-5, "{kind} shared={shared}: {worst}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialisation() {
        let samples = toy_samples(6);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let trained = train(CellKind::Lstm, &samples, &cfg).unwrap();
        let init = RnnParams::random(trained.params.shape(), 4, cfg.init_scale).unwrap();
        assert_eq!(trained.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(10);
        let cfg = TrainConfig {
            epochs: 5,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train(CellKind::Gru, &samples, &cfg).unwrap();
        let b = train(CellKind::Gru, &samples, &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            train(CellKind::Lstm, &[], &TrainConfig::default()),
            Err(NeuralError::Param(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let samples = toy_samples(6);
        let cfg = TrainConfig {
            learning_rate: 1e9,
            epochs: 50,
            grad_clip: None,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(CellKind::Lstm, &samples, &cfg),
            Err(NeuralError::TrainingDiverged { .. })
        ));
    }

    fn toy_samples(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|t| SamplePair {
                day_index: t,
                predictors: random_input(100 + t as u64, 8, 4),
                target: (0..16).map(|p| ((t + p) % 5) as f64 / 5.0).collect(),
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn lstm_output_is_bounded(seed in 0u64..300, scale in 0.1f64..20.0) {
            let p = RnnParams::random(RnnShape::new(CellKind::Lstm, 12, 3, 2), seed, scale).unwrap();
            let x = random_input(seed + 1, 12, 3).map(|v| v * scale);
            let t = forward(&p, &x).unwrap();
            proptest::prop_assert!(t.outputs().iter().all(|h| h.abs() < 1.0));
        }
    }
}
