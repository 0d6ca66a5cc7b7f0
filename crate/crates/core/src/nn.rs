//! Layers used by every model: affine maps, two-layer perceptrons and a
//! gated recurrent unit, plus orthogonal weight initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::NnError;
use crate::tape::{GradTape, ParamRef, Slot, Var};
use crate::tensor::{ParamSet, Tensor};

/// Orthogonal matrix of shape `[rows, cols]` scaled by `gain`.
///
/// For `rows <= cols` the rows are orthonormal (`W·Wᵀ = gain²·I`),
/// otherwise the columns are (`Wᵀ·W = gain²·I`).
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs positive dimensions");
    let (n, m) = if rows < cols { (cols, rows) } else { (rows, cols) };
    // m column vectors of length n
    let mut cols_v: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..m {
        // two Gram-Schmidt passes keep orthogonality near machine precision
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = cols_v[j].iter().zip(&cols_v[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols_v.split_at_mut(j);
                for (a, b) in tail[0].iter_mut().zip(&head[k]) {
                    *a -= dot * b;
                }
            }
        }
        let norm = cols_v[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for a in cols_v[j].iter_mut() {
            *a /= norm;
        }
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            // rows < cols: W = Qᵀ, so W[r][c] = Q[c][r] = cols_v[r][c]
            data[r * cols + c] = gain
                * if rows < cols {
                    cols_v[r][c]
                } else {
                    cols_v[c][r]
                };
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape is consistent")
}

/// Affine map `W·x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: usize,
    b: usize,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = params.insert(format!("{name}.w"), orthogonal_init(out_dim, in_dim, gain, rng));
        let b = params.insert(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }

    pub fn forward(&self, tape: &mut GradTape, slot: Slot, x: Var) -> Var {
        let y = tape.matvec(ParamRef { slot, idx: self.w }, x);
        tape.add_param(y, ParamRef { slot, idx: self.b })
    }
}

/// Two-layer perceptron `W₂·relu(W₁·x + b₁) + b₂`. The output is linear;
/// heads apply their own activation where needed.
#[derive(Debug, Clone)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let l1 = Linear::new(params, &format!("{name}.l1"), in_dim, hidden, 2f64.sqrt(), rng);
        let l2 = Linear::new(params, &format!("{name}.l2"), hidden, out_dim, out_gain, rng);
        Self { l1, l2 }
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim
    }

    pub fn output_layer(&self) -> &Linear {
        &self.l2
    }

    pub fn forward(&self, tape: &mut GradTape, slot: Slot, x: Var) -> Result<Var, NnError> {
        let width = tape.value(x).len();
        if width != self.l1.in_dim {
            return Err(NnError::Shape {
                context: "mlp input",
                expected: self.l1.in_dim,
                found: width,
            });
        }
        let h = self.l1.forward(tape, slot, x);
        let h = tape.relu(h);
        Ok(self.l2.forward(tape, slot, h))
    }
}

/// Gated recurrent unit with one bias per gate:
///
/// ```text
/// z  = σ(W_z·x + U_z·h + b_z)
/// r  = σ(W_r·x + U_r·h + b_r)
/// ĥ  = tanh(W_h·x + U_h·(r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
///
/// The reset gate is applied to the hidden state before the candidate
/// projection. Gate order in the parameter set is z, r, h.
#[derive(Debug, Clone)]
pub struct GruCell {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wh: usize,
    uh: usize,
    bh: usize,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut gate = |g: &str, params: &mut ParamSet| {
            let w = params.insert(format!("{name}.w_{g}"), orthogonal_init(hidden, input, 1.0, rng));
            let u = params.insert(format!("{name}.u_{g}"), orthogonal_init(hidden, hidden, 1.0, rng));
            let b = params.insert(format!("{name}.b_{g}"), Tensor::zeros(&[hidden]));
            (w, u, b)
        };
        let (wz, uz, bz) = gate("z", params);
        let (wr, ur, br) = gate("r", params);
        let (wh, uh, bh) = gate("h", params);
        Self {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wh,
            uh,
            bh,
            input,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// Indices of the update-gate bias, used by tests that pin the gate.
    pub fn update_bias_index(&self) -> usize {
        self.bz
    }

    pub fn step(&self, tape: &mut GradTape, slot: Slot, x: Var, h: Var) -> Result<Var, NnError> {
        let (xw, hw) = (tape.value(x).len(), tape.value(h).len());
        if xw != self.input {
            return Err(NnError::Shape {
                context: "gru input",
                expected: self.input,
                found: xw,
            });
        }
        if hw != self.hidden {
            return Err(NnError::Shape {
                context: "gru hidden",
                expected: self.hidden,
                found: hw,
            });
        }
        let p = |idx| ParamRef { slot, idx };
        let gate = |tape: &mut GradTape, w, u, b, hin: Var| {
            let a = tape.matvec(p(w), x);
            let c = tape.matvec(p(u), hin);
            let s = tape.add(a, c);
            tape.add_param(s, p(b))
        };
        let z = gate(tape, self.wz, self.uz, self.bz, h);
        let z = tape.sigmoid(z);
        let r = gate(tape, self.wr, self.ur, self.br, h);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let cand = gate(tape, self.wh, self.uh, self.bh, rh);
        let cand = tape.tanh(cand);
        let diff = tape.sub(cand, h);
        let step = tape.mul(z, diff);
        Ok(tape.add(h, step))
    }
}
