//! Hybrid network: a single LSTM layer over the event window, a tanh layer
//! over the static features, and a sigmoid head on their concatenation.
//! Trained by backpropagation through time with Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{logit_loss, sigmoid, Adam, LearnerError};
use crate::features::{SequenceDataset, SequenceScaler, EVENT_WIDTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmParams {
    pub hidden: usize,
    pub static_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LstmParams {
    fn default() -> Self {
        LstmParams { hidden: 16, static_hidden: 16, learning_rate: 3e-3, epochs: 12, batch_size: 64 }
    }
}

impl LstmParams {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.hidden == 0 || self.static_hidden == 0 {
            e.push("lstm.hidden and lstm.static_hidden must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            e.push("lstm.learning_rate must be > 0".into());
        }
        if self.batch_size == 0 {
            e.push("lstm.batch_size must be >= 1".into());
        }
        e
    }
}

/// Network shape and flat parameters. Layout: input weights (I x 4H, gate
/// blocks i, f, o, g within each input's row), recurrent weights (4H x H),
/// gate biases (4H), static weights (F x S), static biases (S), head weights
/// (H + S), head bias. Input-major blocks let a nonzero input touch one
/// contiguous slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub inputs: usize,
    pub hidden: usize,
    pub statics: usize,
    pub static_hidden: usize,
    pub params: Vec<f64>,
}

/// One training or scoring example: `steps` rows of `inputs` values,
/// oldest first, and the static vector.
pub struct SeqExample<'a> {
    pub steps: &'a [f64],
    pub statics: &'a [f64],
    pub label: u8,
}

struct Offsets {
    wh: usize,
    b: usize,
    ws: usize,
    bs: usize,
    wo: usize,
    bo: usize,
}

const GATES: [char; 4] = ['i', 'f', 'o', 'g'];

struct Trace {
    /// Per step: i, f, o, g activations (4H), cell (H), tanh(cell) (H),
    /// hidden (H).
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    hiddens: Vec<f64>,
    static_out: Vec<f64>,
}

impl LstmModel {
    pub fn n_params(inputs: usize, hidden: usize, statics: usize, static_hidden: usize) -> usize {
        4 * hidden * inputs + 4 * hidden * hidden + 4 * hidden + static_hidden * statics + static_hidden + hidden + static_hidden + 1
    }

    fn offsets(&self) -> Offsets {
        let h4 = 4 * self.hidden;
        let wh = h4 * self.inputs;
        let b = wh + h4 * self.hidden;
        let ws = b + h4;
        let bs = ws + self.static_hidden * self.statics;
        let wo = bs + self.static_hidden;
        let bo = wo + self.hidden + self.static_hidden;
        Offsets { wh, b, ws, bs, wo, bo }
    }

    /// Uniform ±1/sqrt(fan_in) weights, zero biases except the forget gate
    /// at 1.
    pub fn init(inputs: usize, hidden: usize, statics: usize, static_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = LstmModel { inputs, hidden, statics, static_hidden, params: vec![0.0; Self::n_params(inputs, hidden, statics, static_hidden)] };
        let o = m.offsets();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let a = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-a..=a);
            }
        };
        fill(0..o.b, inputs + hidden, &mut m.params);
        fill(o.ws..o.bs, statics, &mut m.params);
        fill(o.wo..o.bo, hidden + static_hidden, &mut m.params);
        for j in 0..hidden {
            m.params[o.b + hidden + j] = 1.0;
        }
        m
    }

    pub fn param_names(&self) -> Vec<String> {
        let h = self.hidden;
        let mut names = Vec::with_capacity(self.params.len());
        for c in 0..self.inputs {
            for r in 0..4 * h {
                names.push(format!("Wx[{}{},{c}]", GATES[r / h], r % h));
            }
        }
        for r in 0..4 * h {
            for c in 0..h {
                names.push(format!("Wh[{}{},{c}]", GATES[r / h], r % h));
            }
        }
        names.extend((0..4 * h).map(|r| format!("b[{}{}]", GATES[r / h], r % h)));
        for c in 0..self.statics {
            for r in 0..self.static_hidden {
                names.push(format!("Ws[{r},{c}]"));
            }
        }
        names.extend((0..self.static_hidden).map(|r| format!("bs[{r}]")));
        names.extend((0..h + self.static_hidden).map(|r| format!("wo[{r}]")));
        names.push("bo".into());
        names
    }

    fn forward(&self, p: &[f64], ex: &SeqExample, trace: &mut Trace) -> f64 {
        let (h, n_in) = (self.hidden, self.inputs);
        let o = self.offsets();
        let steps = ex.steps.len() / n_in;
        trace.gates.resize(steps * 4 * h, 0.0);
        trace.cells.resize(steps * h, 0.0);
        trace.tanh_cells.resize(steps * h, 0.0);
        trace.hiddens.resize(steps * h, 0.0);
        trace.static_out.resize(self.static_hidden, 0.0);
        let mut a = vec![0.0; 4 * h];
        for t in 0..steps {
            let x = &ex.steps[t * n_in..(t + 1) * n_in];
            a.copy_from_slice(&p[o.b..o.b + 4 * h]);
            for (c, &xc) in x.iter().enumerate() {
                if xc != 0.0 {
                    for (ar, w) in a.iter_mut().zip(&p[c * 4 * h..(c + 1) * 4 * h]) {
                        *ar += w * xc;
                    }
                }
            }
            if t > 0 {
                let prev = &trace.hiddens[(t - 1) * h..t * h];
                for r in 0..4 * h {
                    let w = &p[o.wh + r * h..o.wh + (r + 1) * h];
                    a[r] += w.iter().zip(prev).map(|(w, v)| w * v).sum::<f64>();
                }
            }
            let g = &mut trace.gates[t * 4 * h..(t + 1) * 4 * h];
            for r in 0..3 * h {
                g[r] = sigmoid(a[r]);
            }
            for r in 3 * h..4 * h {
                g[r] = a[r].tanh();
            }
            for j in 0..h {
                let prev_c = if t > 0 { trace.cells[(t - 1) * h + j] } else { 0.0 };
                let c = g[h + j] * prev_c + g[j] * g[3 * h + j];
                trace.cells[t * h + j] = c;
                let tc = c.tanh();
                trace.tanh_cells[t * h + j] = tc;
                trace.hiddens[t * h + j] = g[2 * h + j] * tc;
            }
        }
        let mut z = p[o.bo];
        if steps > 0 {
            let last = &trace.hiddens[(steps - 1) * h..steps * h];
            z += p[o.wo..o.wo + h].iter().zip(last).map(|(w, v)| w * v).sum::<f64>();
        }
        let sh = self.static_hidden;
        trace.static_out.copy_from_slice(&p[o.bs..o.bs + sh]);
        for (c, &xc) in ex.statics.iter().enumerate() {
            if xc != 0.0 {
                for (s, w) in trace.static_out.iter_mut().zip(&p[o.ws + c * sh..o.ws + (c + 1) * sh]) {
                    *s += w * xc;
                }
            }
        }
        for r in 0..sh {
            let u = trace.static_out[r].tanh();
            trace.static_out[r] = u;
            z += p[o.wo + h + r] * u;
        }
        z
    }

    fn empty_trace() -> Trace {
        Trace { gates: Vec::new(), cells: Vec::new(), tanh_cells: Vec::new(), hiddens: Vec::new(), static_out: Vec::new() }
    }

    pub fn score(&self, ex: &SeqExample) -> f64 {
        sigmoid(self.forward(&self.params, ex, &mut Self::empty_trace()))
    }

    /// Summed loss over `batch` under `p`; `grad` is overwritten with the
    /// summed gradient.
    pub fn loss_and_grad(&self, p: &[f64], batch: &[SeqExample], grad: &mut [f64]) -> f64 {
        let (h, n_in) = (self.hidden, self.inputs);
        let o = self.offsets();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut trace = Self::empty_trace();
        let mut loss = 0.0;
        let mut dh = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        let mut ds = vec![0.0; self.static_hidden];
        for ex in batch {
            let z = self.forward(p, ex, &mut trace);
            let y = f64::from(ex.label);
            loss += logit_loss(z, y);
            let dz = sigmoid(z) - y;
            let steps = ex.steps.len() / n_in;
            grad[o.bo] += dz;

            // static branch
            let sh = self.static_hidden;
            for r in 0..sh {
                let u = trace.static_out[r];
                grad[o.wo + h + r] += dz * u;
                ds[r] = dz * p[o.wo + h + r] * (1.0 - u * u);
                grad[o.bs + r] += ds[r];
            }
            for (c, &xc) in ex.statics.iter().enumerate() {
                if xc != 0.0 {
                    for (g, d) in grad[o.ws + c * sh..o.ws + (c + 1) * sh].iter_mut().zip(&ds) {
                        *g += d * xc;
                    }
                }
            }
            if steps == 0 {
                continue;
            }

            let last = &trace.hiddens[(steps - 1) * h..steps * h];
            for j in 0..h {
                grad[o.wo + j] += dz * last[j];
                dh[j] = dz * p[o.wo + j];
                dc_next[j] = 0.0;
            }
            for t in (0..steps).rev() {
                let g = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
                for j in 0..h {
                    let (i_g, f_g, o_g, c_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = trace.tanh_cells[t * h + j];
                    let prev_c = if t > 0 { trace.cells[(t - 1) * h + j] } else { 0.0 };
                    let d_o = dh[j] * tc;
                    let dc = dc_next[j] + dh[j] * o_g * (1.0 - tc * tc);
                    da[j] = dc * c_g * i_g * (1.0 - i_g);
                    da[h + j] = dc * prev_c * f_g * (1.0 - f_g);
                    da[2 * h + j] = d_o * o_g * (1.0 - o_g);
                    da[3 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                    dc_next[j] = dc * f_g;
                }
                let x = &ex.steps[t * n_in..(t + 1) * n_in];
                for (c, &xc) in x.iter().enumerate() {
                    if xc != 0.0 {
                        for (g, d) in grad[c * 4 * h..(c + 1) * 4 * h].iter_mut().zip(&da) {
                            *g += d * xc;
                        }
                    }
                }
                for r in 0..4 * h {
                    grad[o.b + r] += da[r];
                }
                dh.iter_mut().for_each(|v| *v = 0.0);
                if t > 0 {
                    let prev = &trace.hiddens[(t - 1) * h..t * h];
                    for r in 0..4 * h {
                        let w = &p[o.wh + r * h..o.wh + (r + 1) * h];
                        let gw = &mut grad[o.wh + r * h..o.wh + (r + 1) * h];
                        for j in 0..h {
                            gw[j] += da[r] * prev[j];
                            dh[j] += w[j] * da[r];
                        }
                    }
                }
            }
        }
        loss
    }

    pub fn predict_dataset(&self, data: &SequenceDataset, scaler: &SequenceScaler) -> Vec<f64> {
        data.samples
            .iter()
            .map(|s| {
                let (steps, statics) = prepare(data, s, scaler);
                self.score(&SeqExample { steps: &steps, statics: &statics, label: 0 })
            })
            .collect()
    }
}

fn prepare(data: &SequenceDataset, s: &crate::features::SequenceSample, scaler: &SequenceScaler) -> (Vec<f64>, Vec<f64>) {
    let mut window = data.table.window(s);
    scaler.transform_window(&mut window);
    let steps: Vec<f64> = window.iter().flat_map(|r| r.iter().copied()).collect();
    let mut statics = data.table.static_features(s).to_vec();
    scaler.statics.transform_row(&mut statics);
    (steps, statics)
}

pub fn fit_lstm_hybrid(train: &SequenceDataset, scaler: &SequenceScaler, params: &LstmParams, seed: u64) -> Result<LstmModel, LearnerError> {
    let prepared: Vec<(Vec<f64>, Vec<f64>, u8)> = train
        .samples
        .iter()
        .map(|s| {
            let (steps, statics) = prepare(train, s, scaler);
            (steps, statics, s.label)
        })
        .collect();
    let n_static = train.table.phases.dictionary.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = LstmModel::init(EVENT_WIDTH, params.hidden, n_static, params.static_hidden, &mut rng);
    let mut adam = Adam::new(model.params.len(), params.learning_rate);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(params.batch_size) {
            let batch: Vec<SeqExample> = chunk
                .iter()
                .map(|&i| SeqExample { steps: &prepared[i].0, statics: &prepared[i].1, label: prepared[i].2 })
                .collect();
            epoch_loss += model.loss_and_grad(&model.params, &batch, &mut grad);
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grad);
        }
        if !epoch_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(LearnerError::Diverged { epoch, detail: format!("lstm loss {epoch_loss}") });
        }
        log::debug!("lstm epoch {epoch}: mean loss {:.5}", epoch_loss / prepared.len().max(1) as f64);
    }
    Ok(model)
}
