//! Reverse-mode automatic differentiation over dynamically shaped f64 arrays.
//!
//! A [`Tape`] records a computation graph as operations execute; calling
//! [`Tape::backward`] on a scalar node produces gradients for every node that
//! requires them. Values are stored as `ArcArray` so backward closures can
//! capture them without copying. Parents always precede children in the node
//! list, so a single reverse sweep suffices.

use ndarray::{ArcArray, Array2, ArrayD, ArrayViewD, Axis, IxDyn, Zip};

pub type Arr = ArrayD<f64>;
type Shared = ArcArray<f64, IxDyn>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &mut dyn FnMut(Var, Arr))>;

struct Node {
    value: Shared,
    needs_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward sweep, indexed by `Var`.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Output shape of a numpy-style broadcast, or None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
pub fn reduce_to_shape(grad: Arr, shape: &[usize]) -> Arr {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if g.shape()[ax] != s {
            debug_assert_eq!(s, 1);
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn bin_forward(a: &Shared, b: &Shared, f: impl Fn(f64, f64) -> f64) -> Arr {
    // equal shapes: operate on contiguous slices (values on the tape are
    // always standard layout)
    if a.shape() == b.shape() {
        if let (Some(xs), Some(ys)) = (a.as_slice(), b.as_slice()) {
            let data: Vec<f64> = xs.iter().zip(ys).map(|(&x, &y)| f(x, y)).collect();
            return Arr::from_shape_vec(a.raw_dim(), data).unwrap();
        }
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("broadcast mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    let dim = IxDyn(&shape);
    // broadcast along leading/unit axes only: walk the output in C order and
    // map flat indices through precomputed strides
    let out_len: usize = shape.iter().product();
    let stride_for = |src: &Shared| -> Vec<usize> {
        let n = shape.len();
        let off = n - src.ndim();
        let mut strides = vec![0usize; n];
        let mut acc = 1usize;
        for i in (0..src.ndim()).rev() {
            let s = src.shape()[i];
            strides[off + i] = if s == 1 { 0 } else { acc };
            acc *= s;
        }
        strides
    };
    let sa = stride_for(a);
    let sb = stride_for(b);
    let (xs, ys) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut data = Vec::with_capacity(out_len);
    let mut idx = vec![0usize; shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..out_len {
        data.push(f(xs[ia], ys[ib]));
        // increment the multi-index, updating both flat offsets
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= sa[ax] * shape[ax];
            ib -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Arr::from_shape_vec(dim, data).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, needs_grad: bool, backward: Option<BackFn>) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite value on tape");
        // keep every node value in standard layout so op closures may rely
        // on contiguity (as_slice, into_shape_with_order)
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { value: value.into_shared(), needs_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Register a custom operation. `backward` receives the output gradient and
    /// an accumulator callback for parent contributions.
    pub fn custom(&mut self, value: Arr, needs_grad: bool, backward: BackFn) -> Var {
        self.push(value, needs_grad, if needs_grad { Some(backward) } else { None })
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, false, None)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(ndarray::arr0(x).into_dyn(), false, None)
    }

    /// Leaf with gradient tracking (a trainable parameter or probed input).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, true, None)
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn value_owned(&self, v: Var) -> Arr {
        self.nodes[v.0].value.to_owned()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shared(&self, v: Var) -> Shared {
        self.nodes[v.0].value.clone()
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = bin_forward(&va, &vb, |x, y| x + y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    acc(a, reduce_to_shape(g.clone(), &sa));
                    acc(b, reduce_to_shape(g.clone(), &sb));
                })
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = bin_forward(&va, &vb, |x, y| x - y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    acc(a, reduce_to_shape(g.clone(), &sa));
                    acc(b, reduce_to_shape(g.mapv(|x| -x), &sb));
                })
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = bin_forward(&va, &vb, |x, y| x * y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    acc(a, reduce_to_shape(bin_forward(&g.clone().into_shared(), &vb, |x, y| x * y), va.shape()));
                    acc(b, reduce_to_shape(bin_forward(&g.clone().into_shared(), &va, |x, y| x * y), vb.shape()));
                })
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = bin_forward(&va, &vb, |x, y| x / y);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                let (va, vb) = (va.clone(), vb.clone());
                Box::new(move |g, acc| {
                    let gs = g.clone().into_shared();
                    acc(a, reduce_to_shape(bin_forward(&gs, &vb, |x, y| x / y), va.shape()));
                    let ga_num = bin_forward(&gs, &va, |x, y| x * y).into_shared();
                    let gb = bin_forward(&ga_num, &vb, |x, y| -x / (y * y));
                    acc(b, reduce_to_shape(gb, vb.shape()));
                })
            }),
        )
    }

    // ---- elementwise unary ----

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        // df(input, output) -> local derivative
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let va = self.shared(a);
        let xs = va.as_slice().expect("tape values are contiguous");
        let data: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let out = Arr::from_shape_vec(va.raw_dim(), data).unwrap();
        let ng = self.needs_grad(a);
        let out_shared = out.clone().into_shared();
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let gs = g.as_slice().expect("grad contiguous");
                    let xs = va.as_slice().unwrap();
                    let ys = out_shared.as_slice().unwrap();
                    let data: Vec<f64> = gs
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(&gi, (&x, &y))| gi * df(x, y))
                        .collect();
                    acc(a, Arr::from_shape_vec(va.raw_dim(), data).unwrap());
                })
            }),
        )
    }

    /// Custom elementwise function with analytic derivative `df(input, output)`.
    pub fn unary_fn(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        self.unary(a, f, df)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, |_, _| 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, |x, _| x.cos())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, |x, _| -x.sin())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    // ---- matrix products (2-D operands) ----

    fn as2(v: &Shared) -> ndarray::ArrayView2<'_, f64> {
        v.view().into_dimensionality::<ndarray::Ix2>().expect("matmul operand must be 2-D")
    }

    fn mm(a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>) -> Array2<f64> {
        a.dot(&b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = Self::mm(Self::as2(&va), Self::as2(&vb)).into_dyn();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    acc(a, Self::mm(g2, Self::as2(&vb).t()).into_dyn());
                    acc(b, Self::mm(Self::as2(&va).t(), g2).into_dyn());
                })
            }),
        )
    }

    /// `a · bᵀ` for `a: (m,k)`, `b: (n,k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let out = Self::mm(Self::as2(&va), Self::as2(&vb).t()).into_dyn();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    acc(a, Self::mm(g2, Self::as2(&vb)).into_dyn());
                    acc(b, Self::mm(g2.t(), Self::as2(&va)).into_dyn());
                })
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = ndarray::arr0(va.sum()).into_dyn();
        let ng = self.needs_grad(a);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let gv = g.iter().next().copied().unwrap();
                    acc(a, Arr::from_elem(va.raw_dim(), gv));
                })
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping the axis with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let va = self.shared(a);
        let out = va.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let ng = self.needs_grad(a);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    // tile the gradient along the reduced axis
                    let shape = va.shape();
                    let rep = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let gs = g.as_slice().expect("grad contiguous");
                    let mut data = vec![0.0f64; outer * rep * inner];
                    for o in 0..outer {
                        let src = &gs[o * inner..(o + 1) * inner];
                        for r in 0..rep {
                            let dst = (o * rep + r) * inner;
                            data[dst..dst + inner].copy_from_slice(src);
                        }
                    }
                    acc(a, Arr::from_shape_vec(va.raw_dim(), data).unwrap());
                })
            }),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.nodes[a.0].value.shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Max along `axis` (keepdim), detached from the graph. Used for softmax
    /// stabilization where the subtracted constant has zero net gradient.
    pub fn max_axis_detached(&mut self, a: Var, axis: usize) -> Var {
        let va = self.shared(a);
        let out = va.map_axis(Axis(axis), |lane| lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        self.constant(out.insert_axis(Axis(axis)))
    }

    // ---- shape ops ----

    /// Numpy-style broadcast to a target shape.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.shared(a);
        let out = va
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", va.shape(), shape))
            .to_owned();
        let ng = self.needs_grad(a);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    acc(a, reduce_to_shape(g.clone(), va.shape()));
                })
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.shared(a);
        let orig = va.shape().to_vec();
        let out = va
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs_grad(a);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    acc(a, g.clone().into_shape_with_order(IxDyn(&orig)).unwrap());
                })
            }),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let vals: Vec<Shared> = parts.iter().map(|&p| self.shared(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        let parts = parts.to_vec();
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let mut start = 0;
                    for (&p, &len) in parts.iter().zip(&sizes) {
                        let sl = g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len));
                        acc(p, sl.to_owned());
                        start += len;
                    }
                })
            }),
        )
    }

    /// Slice `len` elements starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.shared(a);
        let out = va.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len)).to_owned();
        let ng = self.needs_grad(a);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let mut full = Arr::zeros(va.raw_dim());
                    full.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len)).assign(g);
                    acc(a, full);
                })
            }),
        )
    }

    /// Gather rows along axis 0: `out[i] = a[indices[i]]`.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Var {
        let va = self.shared(a);
        let out = va.select(Axis(0), indices);
        let ng = self.needs_grad(a);
        let idx = indices.to_vec();
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    let mut full = Arr::zeros(va.raw_dim());
                    for (row, &i) in idx.iter().enumerate() {
                        let gi = g.index_axis(Axis(0), row);
                        let mut tgt = full.index_axis_mut(Axis(0), i);
                        tgt += &gi;
                    }
                    acc(a, full);
                })
            }),
        )
    }

    /// Cross product along the last axis (size 3); shapes must match exactly.
    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        assert_eq!(va.shape(), vb.shape(), "cross3 shape mismatch");
        assert_eq!(va.shape().last(), Some(&3));
        let out = cross_arrays(&va.to_owned(), &vb.to_owned());
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(
            out,
            ng,
            ng.then(|| -> BackFn {
                Box::new(move |g, acc| {
                    acc(a, cross_arrays(&vb.to_owned(), g));
                    acc(b, cross_arrays(g, &va.to_owned()));
                })
            }),
        )
    }

    // ---- backward sweep ----

    /// Reverse-sweep from `loss` (any shape; seeded with ones).
    pub fn backward(&mut self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || grads[id].is_none() {
                continue;
            }
            let Some(back) = self.nodes[id].backward.as_ref() else {
                continue; // leaf: retain gradient
            };
            let g = grads[id].take().unwrap();
            let g = if g.is_standard_layout() { g } else { g.as_standard_layout().to_owned() };
            back(&g, &mut |v: Var, contrib: Arr| {
                debug_assert!(v.0 < id, "parent ordering violated");
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                debug_assert_eq!(contrib.shape(), self.nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Grads { by_node: grads }
    }
}

fn cross_arrays(a: &Arr, b: &Arr) -> Arr {
    let mut out = Arr::zeros(a.raw_dim());
    let n = a.len() / 3;
    let af = a.as_slice().expect("contiguous");
    let bf = b.as_slice().expect("contiguous");
    {
        let of = out.as_slice_mut().unwrap();
        for i in 0..n {
            let (a0, a1, a2) = (af[3 * i], af[3 * i + 1], af[3 * i + 2]);
            let (b0, b1, b2) = (bf[3 * i], bf[3 * i + 1], bf[3 * i + 2]);
            of[3 * i] = a1 * b2 - a2 * b1;
            of[3 * i + 1] = a2 * b0 - a0 * b2;
            of[3 * i + 2] = a0 * b1 - a1 * b0;
        }
    }
    out
}
