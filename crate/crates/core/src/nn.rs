//! Small layers built on the tape: recurrent encoders, perceptrons and
//! initializers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Glorot-uniform matrix.
pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

pub fn ones<'t>(tape: &'t Tape, rows: usize, cols: usize) -> Var<'t> {
    tape.constant(Tensor::full(&[rows, cols], 1.0))
}

/// `x + 1·b` for a `1×c` bias row.
pub fn add_bias<'t>(x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    if rows == 1 {
        return x.add(b);
    }
    x.add(ones(x.tape(), rows, 1).matmul(b)?)
}

/// `w ⊙ a + (1 − w) ⊙ b`.
pub fn blend<'t>(w: Var<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    w.mul(a)?.add(w.one_minus().mul(b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let wx = store.add(format!("{name}.wx"), Tensor::uniform(&[input, 4 * hidden], bound, rng));
        let wh = store.add(format!("{name}.wh"), Tensor::uniform(&[hidden, 4 * hidden], bound, rng));
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    fn cell<'t>(&self, z: Var<'t>, c_prev: Option<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.hidden;
        let i = z.slice_cols(0, h)?.sigmoid();
        let g = z.slice_cols(2 * h, 3 * h)?.tanh();
        let o = z.slice_cols(3 * h, 4 * h)?.sigmoid();
        let mut c = i.mul(g)?;
        if let Some(cp) = c_prev {
            let f = z.slice_cols(h, 2 * h)?.sigmoid();
            c = f.mul(cp)?.add(c)?;
        }
        let hv = o.mul(c.tanh())?;
        Ok((hv, c))
    }

    /// Hidden states for every step of `x` (`T×input`), read forward or in
    /// reverse. Row `t` of the result always corresponds to input row `t`.
    pub fn run<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let t_len = x.shape()[0];
        let xw = add_bias(x.matmul(tape.param(store, self.wx))?, tape.param(store, self.b))?;
        let wh = tape.param(store, self.wh);
        let mut outs: Vec<Option<Var<'t>>> = vec![None; t_len];
        let mut state: Option<(Var<'t>, Var<'t>)> = None;
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let mut z = xw.row(t)?;
            if let Some((hp, _)) = state {
                z = z.add(hp.matmul(wh)?)?;
            }
            let (h, c) = self.cell(z, state.map(|s| s.1))?;
            outs[t] = Some(h);
            state = Some((h, c));
        }
        let outs: Vec<Var<'t>> = outs.into_iter().map(|o| o.expect("filled")).collect();
        if outs.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[0, self.hidden])));
        }
        Var::concat(&outs, 0)
    }

    /// Each row of `x` treated as its own length-one sequence.
    pub fn run_singletons<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let z = add_bias(x.matmul(tape.param(store, self.wx))?, tape.param(store, self.b))?;
        Ok(self.cell(z, None)?.0)
    }
}

/// Two independent directions with `hidden / 2` units each, concatenated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 || !hidden.is_multiple_of(2) {
            return Err(Error::Contract(format!("bidirectional hidden size must be even and positive, got {hidden}")));
        }
        Ok(Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden / 2, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden / 2, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden * 2
    }

    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.fwd.run(tape, store, x, false)?;
        let b = self.bwd.run(tape, store, x, true)?;
        Var::concat(&[f, b], 1)
    }

    pub fn encode_singletons<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.fwd.run_singletons(tape, store, x)?;
        let b = self.bwd.run_singletons(tape, store, x)?;
        Var::concat(&[f, b], 1)
    }
}

/// `tanh(x W₁ + b₁) W₂ + b₂` with a scalar output per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), xavier(input, hidden, rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[1, hidden])),
            w2: store.add(format!("{name}.w2"), xavier(hidden, 1, rng)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[1, 1])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = add_bias(x.matmul(tape.param(store, self.w1))?, tape.param(store, self.b1))?.tanh();
        add_bias(h.matmul(tape.param(store, self.w2))?, tape.param(store, self.b2))
    }
}
