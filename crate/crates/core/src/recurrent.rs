//! Single-layer LSTM cell and short-window unrolling.
//!
//! Gates follow the usual formulation with separate input and recurrent
//! biases:
//!
//! ```text
//! i = σ(W_ii x + b_ii + W_hi h + b_hi)
//! f = σ(W_if x + b_if + W_hf h + b_hf)
//! g = tanh(W_ig x + b_ig + W_hg h + b_hg)
//! o = σ(W_io x + b_io + W_ho h + b_ho)
//! c' = f ⊙ c + i ⊙ g
//! h' = o ⊙ tanh(c')
//! ```
//!
//! Two evaluation paths exist: [`LstmParams::step`] on plain slices for
//! inference, and [`lstm_step`] on a [`Tape`] for training. Tests pin them
//! to each other.

use rand::Rng;

use crate::ndtensor::{sigmoid, BoundParams, ParamSet, Tape, Tensor, TensorError, Var};

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_HIDDEN: usize = 64;

/// Gate order used for parameter naming and storage.
pub const GATES: [char; 4] = ['i', 'f', 'g', 'o'];

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `hidden × input`
    pub w_x: Tensor,
    /// `hidden × hidden`
    pub w_h: Tensor,
    pub b_x: Tensor,
    pub b_h: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    /// Indexed like [`GATES`].
    pub gates: [GateParams; 4],
}

fn dim_err(detail: String) -> TensorError {
    TensorError::Shape { op: "lstm", detail }
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let g = GateParams {
            w_x: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, hidden]),
            b_x: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        };
        Self {
            input,
            hidden,
            gates: [g.clone(), g.clone(), g.clone(), g],
        }
    }

    /// Uniform `±1/√hidden` initialization.
    pub fn random(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let a = 1.0 / (hidden as f64).sqrt();
        for g in &mut p.gates {
            for t in [&mut g.w_x, &mut g.w_h, &mut g.b_x, &mut g.b_h] {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let (h, n) = (self.hidden, self.input);
        if h == 0 || n == 0 {
            return Err(dim_err(format!("empty dimensions input={n} hidden={h}")));
        }
        for (name, g) in GATES.iter().zip(&self.gates) {
            if g.w_x.shape() != [h, n] || g.w_h.shape() != [h, h] || g.b_x.shape() != [h] || g.b_h.shape() != [h] {
                return Err(dim_err(format!(
                    "gate {name}: W_x {:?}, W_h {:?}, b_x {:?}, b_h {:?} for input {n}, hidden {h}",
                    g.w_x.shape(),
                    g.w_h.shape(),
                    g.b_x.shape(),
                    g.b_h.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_names(prefix: &str) -> Vec<String> {
        GATES
            .iter()
            .flat_map(|g| {
                ["w_i", "w_h", "b_i", "b_h"]
                    .into_iter()
                    .map(move |k| format!("{prefix}{k}{g}"))
            })
            .collect()
    }

    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) -> Result<(), TensorError> {
        let names = Self::param_names(prefix);
        let tensors = self
            .gates
            .iter()
            .flat_map(|g| [&g.w_x, &g.w_h, &g.b_x, &g.b_h]);
        for (n, t) in names.into_iter().zip(tensors) {
            set.insert(n, t.clone())?;
        }
        Ok(())
    }

    pub fn from_set(set: &ParamSet, prefix: &str) -> Result<Self, TensorError> {
        let names = Self::param_names(prefix);
        let get = |n: &String| {
            set.get(n)
                .cloned()
                .ok_or_else(|| TensorError::Format(format!("missing parameter '{n}'")))
        };
        let mut gates = Vec::with_capacity(4);
        for chunk in names.chunks(4) {
            gates.push(GateParams {
                w_x: get(&chunk[0])?,
                w_h: get(&chunk[1])?,
                b_x: get(&chunk[2])?,
                b_h: get(&chunk[3])?,
            });
        }
        let w0 = gates[0].w_x.shape();
        if w0.len() != 2 {
            return Err(dim_err(format!("input weights have shape {w0:?}")));
        }
        let (hidden, input) = (w0[0], w0[1]);
        let gates: [GateParams; 4] = gates.try_into().expect("four gates");
        let p = Self { input, hidden, gates };
        p.validate()?;
        Ok(p)
    }

    /// One step on plain vectors.
    pub fn step(&self, x: &[f64], s: &LstmState) -> Result<LstmState, TensorError> {
        if x.len() != self.input || s.h.len() != self.hidden || s.c.len() != self.hidden {
            return Err(dim_err(format!(
                "x {} / h {} / c {} against input {} hidden {}",
                x.len(),
                s.h.len(),
                s.c.len(),
                self.input,
                self.hidden
            )));
        }
        let pre = |g: &GateParams| -> Vec<f64> {
            let (wx, wh) = (g.w_x.data(), g.w_h.data());
            (0..self.hidden)
                .map(|r| {
                    let ax: f64 = wx[r * self.input..(r + 1) * self.input].iter().zip(x).map(|(a, b)| a * b).sum();
                    let ah: f64 = wh[r * self.hidden..(r + 1) * self.hidden].iter().zip(&s.h).map(|(a, b)| a * b).sum();
                    ax + g.b_x.data()[r] + ah + g.b_h.data()[r]
                })
                .collect()
        };
        let i = pre(&self.gates[0]);
        let f = pre(&self.gates[1]);
        let g = pre(&self.gates[2]);
        let o = pre(&self.gates[3]);
        let mut h = vec![0.0; self.hidden];
        let mut c = vec![0.0; self.hidden];
        for k in 0..self.hidden {
            c[k] = sigmoid(f[k]) * s.c[k] + sigmoid(i[k]) * g[k].tanh();
            h[k] = sigmoid(o[k]) * c[k].tanh();
        }
        Ok(LstmState { h, c })
    }

    /// Folds [`LstmParams::step`] over `xs` from `s0` and returns the final state.
    pub fn window(&self, xs: &[Vec<f64>], s0: &LstmState) -> Result<LstmState, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Invalid {
                op: "lstm_window",
                detail: "empty window".into(),
            });
        }
        let mut s = s0.clone();
        for x in xs {
            s = self.step(x, &s)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Pads `history` (oldest first) at the front with zero vectors up to `len`
/// entries, keeping the most recent `len` when longer.
pub fn pad_window(history: &[Vec<f64>], len: usize, dim: usize) -> Vec<Vec<f64>> {
    let keep = history.len().min(len);
    let mut out = vec![vec![0.0; dim]; len - keep];
    out.extend_from_slice(&history[history.len() - keep..]);
    out
}

/// Tape handles for one LSTM parameter block.
#[derive(Debug, Clone)]
pub struct LstmVars {
    pub input: usize,
    pub hidden: usize,
    gates: [[Var; 4]; 4],
}

impl LstmVars {
    pub fn bind(tape: &mut Tape, p: &LstmParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let gates = p.gates.each_ref().map(|g| [put(&g.w_x), put(&g.w_h), put(&g.b_x), put(&g.b_h)]);
        Self {
            input: p.input,
            hidden: p.hidden,
            gates,
        }
    }

    /// Looks up already-bound parameters named as in [`LstmParams::param_names`].
    pub fn from_bound(bound: &BoundParams<'_>, prefix: &str) -> Result<Self, TensorError> {
        Self::from_lookup(bound.set(), prefix, |n| bound.var(n))
    }

    /// Like [`LstmVars::from_bound`] with an arbitrary name-to-handle map.
    pub fn from_lookup(set: &ParamSet, prefix: &str, lookup: impl Fn(&str) -> Var) -> Result<Self, TensorError> {
        let p = LstmParams::from_set(set, prefix)?;
        let names = LstmParams::param_names(prefix);
        let v: Vec<Var> = names.iter().map(|n| lookup(n)).collect();
        let gates = [0, 1, 2, 3].map(|g| [v[4 * g], v[4 * g + 1], v[4 * g + 2], v[4 * g + 3]]);
        Ok(Self {
            input: p.input,
            hidden: p.hidden,
            gates,
        })
    }

    /// All handles, gate-major, in [`LstmParams::param_names`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.gates.iter().flatten().copied().collect()
    }
}

/// Tape-side state.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

impl StateVars {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[hidden])),
            c: tape.constant(Tensor::zeros(&[hidden])),
        }
    }
}

/// One differentiable step; returns the new state (its `h` is the output).
pub fn lstm_step(tape: &mut Tape, p: &LstmVars, x: Var, s: StateVars) -> Result<StateVars, TensorError> {
    if tape.shape(x) != [p.input] {
        return Err(dim_err(format!("input {:?}, expected [{}]", tape.shape(x), p.input)));
    }
    let mut pre = [x; 4];
    for (k, g) in p.gates.iter().enumerate() {
        let a = tape.affine(x, g[0], g[2])?;
        let b = tape.affine(s.h, g[1], g[3])?;
        pre[k] = tape.add(a, b)?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let g = tape.tanh(pre[2]);
    let o = tape.sigmoid(pre[3]);
    let fc = tape.mul(f, s.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(StateVars { h, c })
}

/// Unrolls [`lstm_step`] over `xs` and returns the final hidden vector.
pub fn lstm_window(tape: &mut Tape, p: &LstmVars, xs: &[Var], s0: StateVars) -> Result<Var, TensorError> {
    if xs.is_empty() {
        return Err(TensorError::Invalid {
            op: "lstm_window",
            detail: "empty window".into(),
        });
    }
    let mut s = s0;
    for &x in xs {
        s = lstm_step(tape, p, x, s)?;
    }
    Ok(s.h)
}
