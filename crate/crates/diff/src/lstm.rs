use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cell and hidden state of one LSTM layer, each `[B x hidden]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub c: Var,
    pub h: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(g: &mut Graph<T>, batch: usize, hidden: usize) -> Self {
        LstmState {
            c: g.constant(Tensor::zeros(&[batch, hidden])),
            h: g.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// One LSTM step with gate blocks ordered (input, forget, candidate,
    /// output) along the `4 * hidden` axis of `w_x[I x 4H]`, `w_h[H x 4H]`
    /// and `bias[4H]`.
    pub fn lstm_cell(&mut self, x: Var, state: LstmState, w_x: Var, w_h: Var, bias: Var) -> Result<LstmState> {
        let hs = self.shape(state.h).to_vec();
        if hs.len() != 2 || self.shape(state.c) != hs.as_slice() {
            return Err(Error::shape("lstm_cell", &hs, self.shape(state.c)));
        }
        let hidden = hs[1];
        if self.shape(w_h) != [hidden, 4 * hidden] || self.shape(bias) != [4 * hidden] {
            return Err(Error::shape("lstm_cell", &hs, self.shape(w_h)));
        }
        let xs = self.shape(x);
        let ws = self.shape(w_x);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || ws[1] != 4 * hidden || xs[0] != hs[0] {
            return Err(Error::shape("lstm_cell", xs, ws));
        }
        let from_x = self.matmul(x, w_x)?;
        let from_h = self.matmul(state.h, w_h)?;
        let pre = self.add(from_x, from_h)?;
        let pre = self.add_row(pre, bias)?;
        let gate = |g: &mut Self, k: usize| g.slice(pre, k * hidden, hidden);
        let (i, f, cand, o) = (gate(self, 0)?, gate(self, 1)?, gate(self, 2)?, gate(self, 3)?);
        let i = self.sigmoid(i);
        let f = self.sigmoid(f);
        let cand = self.tanh(cand);
        let o = self.sigmoid(o);
        let keep = self.mul(f, state.c)?;
        let write = self.mul(i, cand)?;
        let c = self.add(keep, write)?;
        let tc = self.tanh(c);
        let h = self.mul(o, tc)?;
        Ok(LstmState { c, h })
    }
}
