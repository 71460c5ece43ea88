//! Layers shared by the world model and the frame generator.

use cpl_tensor::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub(crate) const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, cout * k * k, rng),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), &[dout, din], din, dout, rng),
            b: bias.then(|| store.add_zeros(format!("{name}.b"), &[dout])),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

/// `[K, d]` lookup table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let t = Tensor::from_fn(&[rows, dim], |_| T::lit(rng.gen_range(-1.0..1.0)));
        Self {
            table: store.add(format!("{name}.table"), t),
        }
    }

    /// 1-based labels.
    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, labels: &[usize]) -> Var {
        let idx: Vec<usize> = labels.iter().map(|&k| k - 1).collect();
        g.gather_rows(p.get(self.table), &idx)
    }

    pub fn table(&self) -> ParamId {
        self.table
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Fully connected LSTM cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct LstmCell {
    wx: Linear,
    wh: Linear,
    hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            wx: Linear::new(store, &format!("{name}.x"), din, 4 * hidden, true, rng),
            wh: Linear::new(store, &format!("{name}.h"), hidden, 4 * hidden, false, rng),
            hidden,
        }
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, n: usize) -> LstmState {
        LstmState {
            h: g.input(Tensor::zeros(&[n, self.hidden])),
            c: g.input(Tensor::zeros(&[n, self.hidden])),
        }
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, s: LstmState) -> LstmState {
        let nh = self.hidden;
        let ax = self.wx.apply(g, p, x);
        let ah = self.wh.apply(g, p, s.h);
        let a = g.add(ax, ah);
        let i = g.slice(a, 0, nh);
        let i = g.sigmoid(i);
        let f = g.slice(a, nh, nh);
        let f = g.add_scalar(f, T::one());
        let f = g.sigmoid(f);
        let o = g.slice(a, 2 * nh, nh);
        let o = g.sigmoid(o);
        let u = g.slice(a, 3 * nh, nh);
        let u = g.tanh(u);
        let fc = g.mul(f, s.c);
        let iu = g.mul(i, u);
        let c = g.add(fc, iu);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }
}

/// Spatiotemporal LSTM cell with a temporal cell `c` and a spatiotemporal
/// memory `m` that is handed between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct StLstmCell {
    conv_x: Conv,
    conv_h: Conv,
    conv_m: Conv,
    conv_o: Conv,
    conv_last: Conv,
    hidden: usize,
}

pub(crate) struct StLstmOut {
    pub h: Var,
    pub c: Var,
    pub m: Var,
}

impl StLstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        hidden: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv_x: Conv::new(store, &format!("{name}.conv_x"), cin, 7 * hidden, k, 1, rng),
            conv_h: Conv::new(store, &format!("{name}.conv_h"), hidden, 4 * hidden, k, 1, rng),
            conv_m: Conv::new(store, &format!("{name}.conv_m"), hidden, 3 * hidden, k, 1, rng),
            conv_o: Conv::new(store, &format!("{name}.conv_o"), 2 * hidden, hidden, k, 1, rng),
            conv_last: Conv::new(store, &format!("{name}.conv_last"), 2 * hidden, hidden, 1, 1, rng),
            hidden,
        }
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: Var, c: Var, m: Var) -> StLstmOut {
        let nh = self.hidden;
        let xc = self.conv_x.apply(g, p, x);
        let hc = self.conv_h.apply(g, p, h);
        let mc = self.conv_m.apply(g, p, m);
        let gate = |g: &mut Graph<T>, src: Var, idx: usize| g.slice(src, idx * nh, nh);

        let (ix, fx, gx) = (gate(g, xc, 0), gate(g, xc, 1), gate(g, xc, 2));
        let (ixp, fxp, gxp) = (gate(g, xc, 3), gate(g, xc, 4), gate(g, xc, 5));
        let ox = gate(g, xc, 6);
        let (ih, fh, gh, oh) = (gate(g, hc, 0), gate(g, hc, 1), gate(g, hc, 2), gate(g, hc, 3));
        let (im, fm, gm) = (gate(g, mc, 0), gate(g, mc, 1), gate(g, mc, 2));

        let i = g.add(ix, ih);
        let i = g.sigmoid(i);
        let f = g.add(fx, fh);
        let f = g.add_scalar(f, T::one());
        let f = g.sigmoid(f);
        let u = g.add(gx, gh);
        let u = g.tanh(u);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c_new = g.add(fc, iu);

        let i2 = g.add(ixp, im);
        let i2 = g.sigmoid(i2);
        let f2 = g.add(fxp, fm);
        let f2 = g.add_scalar(f2, T::one());
        let f2 = g.sigmoid(f2);
        let u2 = g.add(gxp, gm);
        let u2 = g.tanh(u2);
        let fm2 = g.mul(f2, m);
        let iu2 = g.mul(i2, u2);
        let m_new = g.add(fm2, iu2);

        let mem = g.concat(&[c_new, m_new]);
        let oc = self.conv_o.apply(g, p, mem);
        let o = g.add(ox, oh);
        let o = g.add(o, oc);
        let o = g.sigmoid(o);
        let last = self.conv_last.apply(g, p, mem);
        let last = g.tanh(last);
        let h_new = g.mul(o, last);
        StLstmOut {
            h: h_new,
            c: c_new,
            m: m_new,
        }
    }
}
