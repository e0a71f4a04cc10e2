use super::params::ParamBuilder;
use super::Result;
use crate::tensor::{Graph, Tensor, Var};

/// `y = x·W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, out: usize, bias: bool) -> Self {
        let w = pb.uniform(&format!("{name}.w"), input, out);
        let b = bias.then(|| pb.constant(&format!("{name}.b"), 1, out, 0.0));
        Linear { w, b, out }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => g.add_broadcast(y, p[b])?,
            None => y,
        })
    }
}

/// Single LSTM layer, gate order input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        let w_x = pb.uniform(&format!("{name}.w_x"), input, 4 * hidden);
        let w_h = pb.uniform(&format!("{name}.w_h"), hidden, 4 * hidden);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = pb.store.push(format!("{name}.b"), Tensor::row(bias));
        Lstm { w_x, w_h, b, hidden }
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    /// Input projection for a whole sequence: `[T, in] -> [T, 4H]`.
    pub fn project(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w_x])?;
        Ok(g.add_broadcast(y, p[self.b])?)
    }

    /// One step from a projected input row `[1, 4H]`.
    pub fn step(&self, g: &mut Graph, p: &[Var], xproj: Var, s: LstmState) -> Result<LstmState> {
        let hh = self.hidden;
        let rec = g.matmul(s.h, p[self.w_h])?;
        let z = g.add(xproj, rec)?;
        let i = g.slice_cols(z, 0, hh)?;
        let f = g.slice_cols(z, hh, hh)?;
        let c_in = g.slice_cols(z, 2 * hh, hh)?;
        let o = g.slice_cols(z, 3 * hh, hh)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_in = g.tanh(c_in);
        let o = g.sigmoid(o);
        let keep = g.mul(f, s.c)?;
        let write = g.mul(i, c_in)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Unprojected single-step input `[1, in]`.
    pub fn step_input(&self, g: &mut Graph, p: &[Var], x: Var, s: LstmState) -> Result<LstmState> {
        let xp = self.project(g, p, x)?;
        self.step(g, p, xp, s)
    }

    /// Runs over all rows of `x`; returns hidden states `[T, H]` in time order.
    pub fn run(&self, g: &mut Graph, p: &[Var], x: Var, reverse: bool) -> Result<Var> {
        let t_len = g.value(x).rows();
        let xp = self.project(g, p, x)?;
        let mut s = self.zero_state(g);
        let mut hs = vec![s.h; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let row = g.slice_rows(xp, t, 1)?;
            s = self.step(g, p, row, s)?;
            hs[t] = s.h;
        }
        Ok(g.concat_rows(&hs)?)
    }
}
