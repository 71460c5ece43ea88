//! Define-by-run computation tape with reverse-mode differentiation.

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::{Gradients, ParamId, ParamStore, Scalar, Tensor};

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Clamp(Var, T, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    BroadcastSpatial(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Upsample2(Var),
    SumItems(Var),
    MeanItems(Var),
    SumAll(Var),
    MseItems(Var, Var),
    GaussianKl {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameters of one [`ParamStore`] bound into a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Results of [`Graph::backward`].
pub struct Grads<T> {
    params: Gradients<T>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn params(&self) -> &Gradients<T> {
        &self.params
    }

    pub fn into_params(self) -> Gradients<T> {
        self.params
    }

    /// Gradient w.r.t. an input created with [`Graph::input_with_grad`].
    pub fn var(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_from(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let ng = parents.iter().any(|&p| self.needs(p));
        self.push(value, op, ng)
    }

    /// Constant input; never receives gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Grads::var`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Copy of `v`'s value cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        Bound {
            vars: store.ids().map(|id| self.param(store, id)).collect(),
        }
    }

    /// Binds parameters as constants: values participate, gradients do not.
    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> Bound {
        Bound {
            vars: store.ids().map(|id| self.input(store.get(id).clone())).collect(),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape(), data);
        self.push_from(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        self.push_from(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[geom.n, geom.o, geom.out_h(), geom.out_w()], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_from(t, Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, in], got {xs:?}");
        assert_eq!(xs[1], ws[1], "linear dim mismatch: input {xs:?} weight {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            T::one(),
            &mut out,
            dout as isize,
            1,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_from(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, &parents)
    }

    /// Concatenates along dim 1; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut ch = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat trailing dims mismatch");
            ch += s[1];
        }
        let mut data = Vec::with_capacity(n * ch * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let len = t.item_len();
                data.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[1] = ch;
        self.push_from(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start+len` along dim 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[1], "slice out of range");
        let inner: usize = s[2..].iter().product();
        let t = self.value(x);
        let il = t.item_len();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            data.extend_from_slice(&t.data()[b * il + start * inner..b * il + (start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        self.push_from(Tensor::new(&shape, data), Op::Slice { x, start }, &[x])
    }

    /// `[N, C]` -> `[N, C, h, w]` by spatial replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * h * w);
        for &v in src {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        self.push_from(Tensor::new(&[s[0], s[1], h, w], data), Op::BroadcastSpatial(x), &[x])
    }

    /// Rows of `table: [K, d]` picked by `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        assert_eq!(t.shape().len(), 2);
        let k = t.shape()[0];
        assert!(idx.iter().all(|&i| i < k), "row index out of range");
        let picked = t.select(idx);
        self.push_from(
            picked,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push_from(t, Op::Reshape(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); s[0] * s[1] * 4 * h * w];
        for nc in 0..s[0] * s[1] {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(nc * 2 * h + y) * 2 * w + xx] = src[(nc * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push_from(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], data),
            Op::Upsample2(x),
            &[x],
        )
    }

    /// Sum over every non-batch dim, giving `[N]`.
    pub fn sum_items(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let il = t.item_len();
        let data = t.data().chunks(il).map(|c| c.iter().copied().sum()).collect();
        let n = t.batch();
        self.push_from(Tensor::new(&[n], data), Op::SumItems(x), &[x])
    }

    /// Mean over every non-batch dim, giving `[N]`.
    pub fn mean_items(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let il = t.item_len();
        let inv = T::one() / T::from_usize(il).unwrap();
        let data = t.data().chunks(il).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let n = t.batch();
        self.push_from(Tensor::new(&[n], data), Op::MeanItems(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_from(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Per-item mean squared error, giving `[N]`.
    pub fn mse_items(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let il = ta.item_len();
        let inv = T::one() / T::from_usize(il).unwrap();
        let data = ta
            .data()
            .chunks(il)
            .zip(tb.data().chunks(il))
            .map(|(x, y)| {
                x.iter()
                    .zip(y)
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum::<T>()
                    * inv
            })
            .collect();
        let n = ta.batch();
        self.push_from(Tensor::new(&[n], data), Op::MseItems(a, b), &[a, b])
    }

    /// Closed-form `KL(N(mq, e^lq) || N(mp, e^lp))` for diagonal Gaussians,
    /// summed over the latent dim, giving `[N]`.
    pub fn gaussian_kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let s = self.shape(mq).to_vec();
        for v in [lq, mp, lp] {
            assert_eq!(self.shape(v), &s[..], "kl shape mismatch");
        }
        let half = T::lit(0.5);
        let d = s[1..].iter().product::<usize>();
        let (a, b, c, e) = (
            self.value(mq).data(),
            self.value(lq).data(),
            self.value(mp).data(),
            self.value(lp).data(),
        );
        let data = (0..s[0])
            .map(|n| {
                (n * d..(n + 1) * d)
                    .map(|i| {
                        let diff = a[i] - c[i];
                        half * (e[i] - b[i] + (b[i].exp() + diff * diff) / e[i].exp() - T::one())
                    })
                    .sum()
            })
            .collect();
        self.push_from(
            Tensor::new(&[s[0]], data),
            Op::GaussianKl { mq, lq, mp, lp },
            &[mq, lq, mp, lp],
        )
    }

    /// Reverse pass from a scalar (single-element) node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut params = Gradients::new(0);
        if !self.needs(loss) {
            return Grads { params, nodes: grads };
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Grads { params, nodes: grads }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut Gradients<T>,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let out = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate(*id, g, node.value.shape()),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (d, &x) in s.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (d, &x) in s.iter_mut().zip(g) {
                    *d += x * *c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(out) {
                    *d += x * y * (T::one() - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(out) {
                    *d += x * (T::one() - y * y);
                }
            }),
            Op::LeakyRelu(a, slope) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(va) {
                        *d += if y > T::zero() { x } else { x * *slope };
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for ((d, &x), &y) in s.iter_mut().zip(g).zip(out) {
                    *d += x * y;
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(g).zip(va) {
                        if y > *lo && y < *hi {
                            *d += x;
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, geom } => {
                let want_dx = self.needs(*x);
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), g, geom, want_dx);
                if let Some(dx) = dx {
                    acc(*x, &mut |s| add_into(s, &dx));
                }
                acc(*w, &mut |s| add_into(s, &dw));
                if let Some(b) = b {
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = node.value.shape()[1];
                acc(*x, &mut |s| {
                    // dx = g [n, dout] * w [dout, din]
                    T::gemm(n, dout, din, T::one(), g, dout as isize, 1, val(*w), din as isize, 1, T::one(), s, din as isize, 1);
                });
                acc(*w, &mut |s| {
                    // dw = g^T [dout, n] * x [n, din]
                    T::gemm(dout, n, din, T::one(), g, 1, dout as isize, val(*x), din as isize, 1, T::one(), s, din as isize, 1);
                });
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks(dout) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let n = node.value.batch();
                let total = node.value.item_len();
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.item_len();
                    acc(p, &mut |s| {
                        for b in 0..n {
                            add_into(&mut s[b * len..(b + 1) * len], &g[b * total + off..b * total + off + len]);
                        }
                    });
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.nodes[x.0].value.shape();
                let inner: usize = xs[2..].iter().product();
                let il = self.nodes[x.0].value.item_len();
                let ol = node.value.item_len();
                acc(*x, &mut |s| {
                    for b in 0..xs[0] {
                        add_into(&mut s[b * il + start * inner..b * il + start * inner + ol], &g[b * ol..(b + 1) * ol]);
                    }
                });
            }
            Op::BroadcastSpatial(x) => {
                let sh = node.value.shape();
                let hw = sh[2] * sh[3];
                acc(*x, &mut |s| {
                    for (d, chunk) in s.iter_mut().zip(g.chunks(hw)) {
                        *d += chunk.iter().copied().sum();
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Upsample2(x) => {
                let xs = self.nodes[x.0].value.shape();
                let (h, w) = (xs[2], xs[3]);
                acc(*x, &mut |s| {
                    for nc in 0..xs[0] * xs[1] {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                s[(nc * h + y / 2) * w + xx / 2] += g[(nc * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::SumItems(x) => {
                let il = self.nodes[x.0].value.item_len();
                acc(*x, &mut |s| {
                    for (chunk, &gv) in s.chunks_mut(il).zip(g) {
                        for d in chunk {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MeanItems(x) => {
                let il = self.nodes[x.0].value.item_len();
                let inv = T::one() / T::from_usize(il).unwrap();
                acc(*x, &mut |s| {
                    for (chunk, &gv) in s.chunks_mut(il).zip(g) {
                        for d in chunk {
                            *d += gv * inv;
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |s| {
                for d in s {
                    *d += g[0];
                }
            }),
            Op::MseItems(a, b) => {
                let il = self.nodes[a.0].value.item_len();
                let two = T::lit(2.0) / T::from_usize(il).unwrap();
                let (va, vb) = (val(*a), val(*b));
                let diff: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .enumerate()
                    .map(|(i, (&p, &q))| two * (p - q) * g[i / il])
                    .collect();
                acc(*a, &mut |s| add_into(s, &diff));
                acc(*b, &mut |s| {
                    for (d, &x) in s.iter_mut().zip(&diff) {
                        *d -= x;
                    }
                });
            }
            Op::GaussianKl { mq, lq, mp, lp } => {
                let d = self.nodes[mq.0].value.item_len();
                let (a, b, c, e) = (val(*mq), val(*lq), val(*mp), val(*lp));
                let half = T::lit(0.5);
                let len = a.len();
                let mut gm = vec![T::zero(); len];
                let mut glq = vec![T::zero(); len];
                let mut glp = vec![T::zero(); len];
                for i in 0..len {
                    let gv = g[i / d];
                    let inv_vp = (-e[i]).exp();
                    let diff = a[i] - c[i];
                    let vq = b[i].exp();
                    gm[i] = gv * diff * inv_vp;
                    glq[i] = gv * half * (vq * inv_vp - T::one());
                    glp[i] = gv * half * (T::one() - (vq + diff * diff) * inv_vp);
                }
                acc(*mq, &mut |s| add_into(s, &gm));
                acc(*mp, &mut |s| {
                    for (dd, &x) in s.iter_mut().zip(&gm) {
                        *dd -= x;
                    }
                });
                acc(*lq, &mut |s| add_into(s, &glq));
                acc(*lp, &mut |s| add_into(s, &glp));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
