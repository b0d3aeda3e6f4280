//! Define-by-run reverse-mode autodiff tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape once in reverse and accumulates vector-Jacobian products into the
//! nodes that require gradients. Activations use the NHWC layout
//! (`[batch, height, width, channels]`), sequences use `[batch, tokens, dim]`.

use crate::real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over NHWC input with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddPerSample(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    ConcatLast(Var, Var),
    SliceLast { x: Var, start: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Silu(Var),
    Relu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    MeanMiddle(Var),
    Tile(Var),
    Substitute { x: Var, fill: Var, mask: Vec<bool> },
    Sum(Var),
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    BceWithLogits { logits: Var },
}

struct Node<R> {
    value: Vec<R>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    /// Op-specific buffer kept from the forward pass (im2col patches,
    /// normalized activations, softmax probabilities, targets).
    saved: Vec<R>,
    /// Second op-specific buffer (per-group reciprocal std).
    saved_aux: Vec<R>,
}

const NORM_EPS: f64 = 1e-5;

/// Gradients produced by [`Graph::backward`].
pub struct Grads<R> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Grads<R> {
    pub fn wrt(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

fn grad_buf<'a, R: Real>(grads: &'a mut [Option<Vec<R>>], v: Var, len: usize) -> &'a mut Vec<R> {
    grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<R>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "value/shape mismatch for {op:?}");
        self.nodes.push(Node { value, shape, op, needs_grad, saved: Vec::new(), saved_aux: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    fn push_saved(&mut self, value: Vec<R>, shape: Vec<usize>, op: Op, needs_grad: bool, saved: Vec<R>, saved_aux: Vec<R>) -> Var {
        let v = self.push(value, shape, op, needs_grad);
        let node = &mut self.nodes[v.0];
        node.saved = saved;
        node.saved_aux = saved_aux;
        v
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value[0]
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, data: Vec<R>, shape: &[usize]) -> Var {
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, data: Vec<R>, shape: &[usize]) -> Var {
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    pub fn leaf(&mut self, data: Vec<R>, shape: &[usize], trainable: bool) -> Var {
        self.push(data, shape.to_vec(), Op::Leaf, trainable)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.nodes[x.0].value.len(), "reshape changes element count");
        let value = self.nodes[x.0].value.clone();
        let ng = self.ng(x);
        self.push(value, shape.to_vec(), Op::Reshape(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, self.shape(a).to_vec(), Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, self.shape(a).to_vec(), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let sr = R::from_f64(s);
        let value = self.value(x).iter().map(|&v| v * sr).collect();
        let ng = self.ng(x);
        self.push(value, self.shape(x).to_vec(), Op::Scale(x, s), ng)
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let c = *self.shape(x).last().expect("add_bias on scalar");
        assert_eq!(self.value(b).len(), c, "add_bias: bias length");
        let bias = self.value(b);
        let value = self.value(x).chunks(c).flat_map(|row| row.iter().zip(bias).map(|(&v, &bb)| v + bb)).collect();
        let ng = self.ng(x) || self.ng(b);
        self.push(value, self.shape(x).to_vec(), Op::AddBias(x, b), ng)
    }

    /// `x[n, ..., c] + t[n, c]`: one channel vector per sample.
    pub fn add_per_sample(&mut self, x: Var, t: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], *shape.last().unwrap());
        assert_eq!(self.shape(t), &[n, c], "add_per_sample: expects [batch, channels]");
        let per = numel(&shape) / n;
        let tv = self.value(t);
        let mut value = self.value(x).to_vec();
        for (i, chunk) in value.chunks_mut(per).enumerate() {
            let trow = &tv[i * c..(i + 1) * c];
            for px in chunk.chunks_mut(c) {
                for (v, &tt) in px.iter_mut().zip(trow) {
                    *v += tt;
                }
            }
        }
        let ng = self.ng(x) || self.ng(t);
        self.push(value, shape, Op::AddPerSample(x, t), ng)
    }

    /// 2-D matrix product `op(a) @ op(b)`; `a` may carry leading dims that are
    /// flattened into rows when `ta` is false.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sb.len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = if ta {
            assert_eq!(sa.len(), 2);
            (sa[1], sa[0])
        } else {
            let k = *sa.last().unwrap();
            (numel(&sa) / k, k)
        };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, kb, "matmul: inner dimension mismatch {sa:?} x {sb:?}");
        let mut value = vec![R::zero(); m * n];
        R::gemm(m, k, n, R::one(), self.value(a), ta, self.value(b), tb, R::zero(), &mut value);
        let shape = if ta {
            vec![m, n]
        } else {
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            s
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, shape, Op::MatMul { a, b, ta, tb, m, k, n }, ng)
    }

    /// Batched product over the leading dim of 3-D operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul: {sa:?} x {sb:?}");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "batch_matmul: inner dimension mismatch");
        let mut value = vec![R::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            R::gemm(
                m,
                k,
                n,
                R::one(),
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                R::zero(),
                &mut value[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, vec![batch, m, n], Op::BatchMatMul { a, b, ta, tb, batch, m, k, n }, ng)
    }

    /// Square-kernel convolution. `x` is `[n, h, w, c_in]`, `w` is
    /// `[k * k * c_in, c_out]` with rows ordered `(ky, kx, c_in)`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "conv2d expects NHWC input");
        let sw = self.shape(w).to_vec();
        let (batch, height, width, c_in) = (sx[0], sx[1], sx[2], sx[3]);
        assert_eq!(sw[0], kernel * kernel * c_in, "conv2d: weight rows");
        let c_out = sw[1];
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom { batch, height, width, c_in, c_out, kernel, stride, pad, out_h, out_w };
        let mut cols = vec![R::zero(); geom.rows() * geom.patch()];
        im2col(self.value(x), &geom, &mut cols);
        let mut value = vec![R::zero(); geom.rows() * c_out];
        R::gemm(geom.rows(), geom.patch(), c_out, R::one(), &cols, false, self.value(w), false, R::zero(), &mut value);
        let ng = self.ng(x) || self.ng(w);
        // patches are only needed for the weight gradient
        let saved = if self.ng(w) { cols } else { Vec::new() };
        self.push_saved(value, vec![batch, out_h, out_w, c_out], Op::Conv2d { x, w, geom }, ng, saved, Vec::new())
    }

    /// Nearest-neighbour 2x upsampling of NHWC input.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut value = vec![R::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((b * h + y / 2) * w + xx / 2) * c;
                    let dst = ((b * 2 * h + y) * 2 * w + xx) * c;
                    value[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, vec![n, 2 * h, 2 * w, c], Op::Upsample2x(x), ng)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat_last: leading dims differ");
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let value = self
            .value(a)
            .chunks(ca)
            .zip(self.value(b).chunks(cb))
            .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
            .collect();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.ng(a) || self.ng(b);
        self.push(value, shape, Op::ConcatLast(a, b), ng)
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        assert!(start + len <= c, "slice_last out of range");
        let value = self.value(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(value, shape, Op::SliceLast { x, start }, ng)
    }

    /// Group normalization over `[n, ..., c]`; statistics per sample and group.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], *s.last().unwrap());
        assert_eq!(c % groups, 0, "group_norm: channels not divisible by groups");
        let per = numel(&s) / n;
        let pixels = per / c;
        let cg = c / groups;
        let count = R::from_f64((pixels * cg) as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![R::zero(); xv.len()];
        let mut rstd = vec![R::zero(); n * groups];
        let mut value = vec![R::zero(); xv.len()];
        for b in 0..n {
            let base = b * per;
            for g in 0..groups {
                let mut mean = R::zero();
                for p in 0..pixels {
                    for ch in g * cg..(g + 1) * cg {
                        mean += xv[base + p * c + ch];
                    }
                }
                mean = mean / count;
                let mut var = R::zero();
                for p in 0..pixels {
                    for ch in g * cg..(g + 1) * cg {
                        let d = xv[base + p * c + ch] - mean;
                        var += d * d;
                    }
                }
                let r = R::one() / (var / count + R::from_f64(NORM_EPS)).sqrt();
                rstd[b * groups + g] = r;
                for p in 0..pixels {
                    for ch in g * cg..(g + 1) * cg {
                        let i = base + p * c + ch;
                        let h = (xv[i] - mean) * r;
                        xhat[i] = h;
                        value[i] = h * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push_saved(value, s, Op::GroupNorm { x, gamma, beta, groups }, ng, xhat, rstd)
    }

    /// Layer normalization over the last dim.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        let cr = R::from_f64(c as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![R::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / c);
        let mut value = vec![R::zero(); xv.len()];
        for (row, (hrow, orow)) in xv.chunks(c).zip(xhat.chunks_mut(c).zip(value.chunks_mut(c))) {
            let mean = row.iter().copied().sum::<R>() / cr;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / cr;
            let r = R::one() / (var + R::from_f64(NORM_EPS)).sqrt();
            rstd.push(r);
            for i in 0..c {
                hrow[i] = (row[i] - mean) * r;
                orow[i] = hrow[i] * gv[i] + bv[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push_saved(value, s, Op::LayerNorm { x, gamma, beta }, ng, xhat, rstd)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let ng = self.ng(x);
        self.push(value, self.shape(x).to_vec(), Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(R::zero())).collect();
        let ng = self.ng(x);
        self.push(value, self.shape(x).to_vec(), Op::Relu(x), ng)
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(value, self.shape(x).to_vec(), Op::Softmax(x), ng)
    }

    /// Softmax over the last dim of `[b, t, t]` scores where query `i` only
    /// sees keys `j <= i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let t = s[s.len() - 1];
        assert_eq!(s[s.len() - 2], t, "causal_softmax expects square score blocks");
        let mut value = self.value(x).to_vec();
        for (r, row) in value.chunks_mut(t).enumerate() {
            let i = r % t;
            softmax_in_place(&mut row[..=i]);
            for v in &mut row[i + 1..] {
                *v = R::zero();
            }
        }
        let ng = self.ng(x);
        self.push(value, s, Op::CausalSoftmax(x), ng)
    }

    /// Row lookup into `table` (`[vocab, dim]`); output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        let d = s[1];
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < s[0], "embedding id {id} out of range {}", s[0]);
            value.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(value, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// Mean over all middle dims: `[n, ..., c] -> [n, c]`.
    pub fn mean_middle(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], *s.last().unwrap());
        let per = numel(&s) / n;
        let pixels = R::from_f64((per / c) as f64);
        let xv = self.value(x);
        let mut value = vec![R::zero(); n * c];
        for b in 0..n {
            for px in xv[b * per..(b + 1) * per].chunks(c) {
                for (o, &v) in value[b * c..(b + 1) * c].iter_mut().zip(px) {
                    *o += v;
                }
            }
        }
        for v in &mut value {
            *v = *v / pixels;
        }
        let ng = self.ng(x);
        self.push(value, vec![n, c], Op::MeanMiddle(x), ng)
    }

    /// Repeat `x` `times` times along a new leading dim.
    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            value.extend_from_slice(xv);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let ng = self.ng(x);
        self.push(value, shape, Op::Tile(x), ng)
    }

    /// Replace sample `i` of `x` (`[n, ...]`) by `fill` (shape `[...]`)
    /// wherever `mask[i]` is set.
    pub fn substitute(&mut self, x: Var, fill: Var, mask: &[bool]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(mask.len(), s[0], "substitute: mask length");
        let per = numel(&s[1..]);
        assert_eq!(self.value(fill).len(), per, "substitute: fill size");
        let mut value = self.value(x).to_vec();
        let fv = self.value(fill);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                value[i * per..(i + 1) * per].copy_from_slice(fv);
            }
        }
        let ng = self.ng(x) || self.ng(fill);
        self.push(value, s, Op::Substitute { x, fill, mask: mask.to_vec() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().copied().sum::<R>();
        let ng = self.ng(x);
        self.push(vec![v], vec![], Op::Sum(x), ng)
    }

    /// Mean squared error, scalar output.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        assert_eq!(self.value(pred).len(), self.value(target).len(), "mse: length mismatch");
        let n = R::from_f64(self.value(pred).len() as f64);
        let v = self.value(pred).iter().zip(self.value(target)).map(|(&p, &t)| (p - t) * (p - t)).sum::<R>() / n;
        let ng = self.ng(pred) || self.ng(target);
        self.push(vec![v], vec![], Op::Mse { pred, target }, ng)
    }

    /// Mean cross-entropy over rows of `logits` that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let c = *self.shape(logits).last().unwrap();
        let mut probs = self.value(logits).to_vec();
        assert_eq!(probs.len() / c, targets.len(), "cross_entropy: one target slot per row");
        let mut total = R::zero();
        let mut count = 0usize;
        for (row, t) in probs.chunks_mut(c).zip(targets) {
            softmax_in_place(row);
            if let Some(t) = *t {
                total -= row[t].max(R::min_positive_value()).ln();
                count += 1;
            }
        }
        let v = if count > 0 { total / R::from_f64(count as f64) } else { R::zero() };
        let ng = self.ng(logits);
        self.push_saved(vec![v], vec![], Op::CrossEntropy { logits, targets: targets.to_vec() }, ng, probs, Vec::new())
    }

    /// Mean binary cross-entropy with logits against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[R]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "bce: length mismatch");
        let n = R::from_f64(lv.len() as f64);
        let v = lv
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(R::zero()) - x * y + (R::one() + (-x.abs()).exp()).ln())
            .sum::<R>()
            / n;
        let ng = self.ng(logits);
        self.push_saved(vec![v], vec![], Op::BceWithLogits { logits }, ng, targets.to_vec(), Vec::new())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<R> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node<R>, gout: &[R], grads: &mut [Option<Vec<R>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accumulate(grads, *x, gout),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout);
                self.accumulate(grads, *b, gout);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    let ga = grad_buf(grads, *a, gout.len());
                    for ((g, &go), &bb) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += go * bb;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let gb = grad_buf(grads, *b, gout.len());
                    for ((g, &go), &aa) in gb.iter_mut().zip(gout).zip(av) {
                        *g += go * aa;
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    let sr = R::from_f64(*s);
                    let gx = grad_buf(grads, *x, gout.len());
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += go * sr;
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gout);
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let gb = grad_buf(grads, *b, c);
                    for row in gout.chunks(c) {
                        for (g, &go) in gb.iter_mut().zip(row) {
                            *g += go;
                        }
                    }
                }
            }
            Op::AddPerSample(x, t) => {
                self.accumulate(grads, *x, gout);
                if self.ng(*t) {
                    let st = self.shape(*t);
                    let (n, c) = (st[0], st[1]);
                    let per = gout.len() / n;
                    let gt = grad_buf(grads, *t, n * c);
                    for b in 0..n {
                        for px in gout[b * per..(b + 1) * per].chunks(c) {
                            for (g, &go) in gt[b * c..(b + 1) * c].iter_mut().zip(px) {
                                *g += go;
                            }
                        }
                    }
                }
            }
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let ga = grad_buf(grads, a, m * k);
                    if ta {
                        R::gemm(k, n, m, R::one(), bv, tb, gout, true, R::one(), ga);
                    } else {
                        R::gemm(m, n, k, R::one(), gout, false, bv, !tb, R::one(), ga);
                    }
                }
                if self.ng(b) {
                    let gb = grad_buf(grads, b, k * n);
                    if tb {
                        R::gemm(n, m, k, R::one(), gout, true, av, ta, R::one(), gb);
                    } else {
                        R::gemm(k, m, n, R::one(), av, !ta, gout, false, R::one(), gb);
                    }
                }
            }
            &Op::BatchMatMul { a, b, ta, tb, batch, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let ga = grad_buf(grads, a, batch * m * k);
                    for i in 0..batch {
                        let go = &gout[i * m * n..(i + 1) * m * n];
                        let bs = &bv[i * k * n..(i + 1) * k * n];
                        let gas = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            R::gemm(k, n, m, R::one(), bs, tb, go, true, R::one(), gas);
                        } else {
                            R::gemm(m, n, k, R::one(), go, false, bs, !tb, R::one(), gas);
                        }
                    }
                }
                if self.ng(b) {
                    let gb = grad_buf(grads, b, batch * k * n);
                    for i in 0..batch {
                        let go = &gout[i * m * n..(i + 1) * m * n];
                        let as_ = &av[i * m * k..(i + 1) * m * k];
                        let gbs = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            R::gemm(n, m, k, R::one(), go, true, as_, ta, R::one(), gbs);
                        } else {
                            R::gemm(k, m, n, R::one(), as_, !ta, go, false, R::one(), gbs);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, geom } => {
                if self.ng(w) {
                    let gw = grad_buf(grads, w, geom.patch() * geom.c_out);
                    R::gemm(geom.patch(), geom.rows(), geom.c_out, R::one(), &node.saved, true, gout, false, R::one(), gw);
                }
                if self.ng(x) {
                    let mut dcols = vec![R::zero(); geom.rows() * geom.patch()];
                    R::gemm(geom.rows(), geom.c_out, geom.patch(), R::one(), gout, false, self.value(w), true, R::zero(), &mut dcols);
                    let gx = grad_buf(grads, x, geom.batch * geom.height * geom.width * geom.c_in);
                    col2im(&dcols, &geom, gx);
                }
            }
            Op::Upsample2x(x) => {
                if self.ng(*x) {
                    let s = self.shape(*x);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let gx = grad_buf(grads, *x, n * h * w * c);
                    for b in 0..n {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let src = ((b * 2 * h + y) * 2 * w + xx) * c;
                                let dst = ((b * h + y / 2) * w + xx / 2) * c;
                                for ch in 0..c {
                                    gx[dst + ch] += gout[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                if self.ng(*a) {
                    let ga = grad_buf(grads, *a, self.value(*a).len());
                    for (g, go) in ga.chunks_mut(ca).zip(gout.chunks(ca + cb)) {
                        for (x, &y) in g.iter_mut().zip(&go[..ca]) {
                            *x += y;
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = grad_buf(grads, *b, self.value(*b).len());
                    for (g, go) in gb.chunks_mut(cb).zip(gout.chunks(ca + cb)) {
                        for (x, &y) in g.iter_mut().zip(&go[ca..]) {
                            *x += y;
                        }
                    }
                }
            }
            &Op::SliceLast { x, start } => {
                if self.ng(x) {
                    let c = *self.shape(x).last().unwrap();
                    let len = *node.shape.last().unwrap();
                    let gx = grad_buf(grads, x, self.value(x).len());
                    for (g, go) in gx.chunks_mut(c).zip(gout.chunks(len)) {
                        for (a, &b) in g[start..start + len].iter_mut().zip(go) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::GroupNorm { x, gamma, beta, groups } => {
                let s = self.shape(x);
                let (n, c) = (s[0], *s.last().unwrap());
                let per = gout.len() / n;
                let pixels = per / c;
                let cg = c / groups;
                let xhat = &node.saved;
                let gv = self.value(gamma);
                if self.ng(gamma) {
                    let gg = grad_buf(grads, gamma, c);
                    for (i, &go) in gout.iter().enumerate() {
                        gg[i % c] += go * xhat[i];
                    }
                }
                if self.ng(beta) {
                    let gb = grad_buf(grads, beta, c);
                    for (i, &go) in gout.iter().enumerate() {
                        gb[i % c] += go;
                    }
                }
                if self.ng(x) {
                    let count = R::from_f64((pixels * cg) as f64);
                    let gx = grad_buf(grads, x, gout.len());
                    for b in 0..n {
                        let base = b * per;
                        for g in 0..groups {
                            let r = node.saved_aux[b * groups + g];
                            let mut m1 = R::zero();
                            let mut m2 = R::zero();
                            for p in 0..pixels {
                                for ch in g * cg..(g + 1) * cg {
                                    let i = base + p * c + ch;
                                    let d = gout[i] * gv[ch];
                                    m1 += d;
                                    m2 += d * xhat[i];
                                }
                            }
                            m1 = m1 / count;
                            m2 = m2 / count;
                            for p in 0..pixels {
                                for ch in g * cg..(g + 1) * cg {
                                    let i = base + p * c + ch;
                                    let d = gout[i] * gv[ch];
                                    gx[i] += r * (d - m1 - xhat[i] * m2);
                                }
                            }
                        }
                    }
                }
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let c = *self.shape(x).last().unwrap();
                let xhat = &node.saved;
                let gv = self.value(gamma);
                if self.ng(gamma) {
                    let gg = grad_buf(grads, gamma, c);
                    for (i, &go) in gout.iter().enumerate() {
                        gg[i % c] += go * xhat[i];
                    }
                }
                if self.ng(beta) {
                    let gb = grad_buf(grads, beta, c);
                    for (i, &go) in gout.iter().enumerate() {
                        gb[i % c] += go;
                    }
                }
                if self.ng(x) {
                    let cr = R::from_f64(c as f64);
                    let gx = grad_buf(grads, x, gout.len());
                    for (row, ((go, xh), gxr)) in gout.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let r = node.saved_aux[row];
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for i in 0..c {
                            let d = go[i] * gv[i];
                            m1 += d;
                            m2 += d * xh[i];
                        }
                        m1 = m1 / cr;
                        m2 = m2 / cr;
                        for i in 0..c {
                            let d = go[i] * gv[i];
                            gxr[i] += r * (d - m1 - xh[i] * m2);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let gx = grad_buf(grads, *x, gout.len());
                    for ((g, &go), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        let s = sigmoid(v);
                        *g += go * s * (R::one() + v * (R::one() - s));
                    }
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let gx = grad_buf(grads, *x, gout.len());
                    for ((g, &go), &v) in gx.iter_mut().zip(gout).zip(xv) {
                        if v > R::zero() {
                            *g += go;
                        }
                    }
                }
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                if self.ng(*x) {
                    let c = *node.shape.last().unwrap();
                    let gx = grad_buf(grads, *x, gout.len());
                    for ((y, go), g) in node.value.chunks(c).zip(gout.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot = y.iter().zip(go).map(|(&a, &b)| a * b).sum::<R>();
                        for i in 0..c {
                            g[i] += y[i] * (go[i] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let d = self.shape(*table)[1];
                    let gt = grad_buf(grads, *table, self.value(*table).len());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::MeanMiddle(x) => {
                if self.ng(*x) {
                    let s = self.shape(*x);
                    let (n, c) = (s[0], *s.last().unwrap());
                    let len = self.value(*x).len();
                    let per = len / n;
                    let inv = R::one() / R::from_f64((per / c) as f64);
                    let gx = grad_buf(grads, *x, len);
                    for b in 0..n {
                        for px in gx[b * per..(b + 1) * per].chunks_mut(c) {
                            for (g, &go) in px.iter_mut().zip(&gout[b * c..(b + 1) * c]) {
                                *g += go * inv;
                            }
                        }
                    }
                }
            }
            Op::Tile(x) => {
                if self.ng(*x) {
                    let len = self.value(*x).len();
                    let gx = grad_buf(grads, *x, len);
                    for chunk in gout.chunks(len) {
                        for (g, &go) in gx.iter_mut().zip(chunk) {
                            *g += go;
                        }
                    }
                }
            }
            Op::Substitute { x, fill, mask } => {
                let per = self.value(*fill).len();
                if self.ng(*x) {
                    let gx = grad_buf(grads, *x, gout.len());
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for (g, &go) in gx[i * per..(i + 1) * per].iter_mut().zip(&gout[i * per..(i + 1) * per]) {
                                *g += go;
                            }
                        }
                    }
                }
                if self.ng(*fill) {
                    let gf = grad_buf(grads, *fill, per);
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for (g, &go) in gf.iter_mut().zip(&gout[i * per..(i + 1) * per]) {
                                *g += go;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let len = self.value(*x).len();
                    let gx = grad_buf(grads, *x, len);
                    for g in gx.iter_mut() {
                        *g += gout[0];
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(pred), self.value(target));
                let scale = R::from_f64(2.0) * gout[0] / R::from_f64(pv.len() as f64);
                if self.ng(pred) {
                    let gp = grad_buf(grads, pred, pv.len());
                    for ((g, &p), &t) in gp.iter_mut().zip(pv).zip(tv) {
                        *g += scale * (p - t);
                    }
                }
                if self.ng(target) {
                    let gt = grad_buf(grads, target, tv.len());
                    for ((g, &p), &t) in gt.iter_mut().zip(pv).zip(tv) {
                        *g -= scale * (p - t);
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.ng(*logits) {
                    let c = *self.shape(*logits).last().unwrap();
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    if count == 0 {
                        return;
                    }
                    let scale = gout[0] / R::from_f64(count as f64);
                    let gl = grad_buf(grads, *logits, node.saved.len());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                let y = if j == t { R::one() } else { R::zero() };
                                gl[r * c + j] += scale * (node.saved[r * c + j] - y);
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits } => {
                if self.ng(*logits) {
                    let lv = self.value(*logits);
                    let scale = gout[0] / R::from_f64(lv.len() as f64);
                    let gl = grad_buf(grads, *logits, lv.len());
                    for ((g, &x), &y) in gl.iter_mut().zip(lv).zip(&node.saved) {
                        *g += scale * (sigmoid(x) - y);
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<R>>], v: Var, gout: &[R]) {
        if !self.ng(v) {
            return;
        }
        let g = grad_buf(grads, v, gout.len());
        for (a, &b) in g.iter_mut().zip(gout) {
            *a += b;
        }
    }
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn im2col<R: Real>(x: &[R], g: &ConvGeom, cols: &mut [R]) {
    let patch = g.patch();
    let cin = g.c_in;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_h + oy) * g.out_w + ox;
                let dst_row = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        let dst = &mut dst_row[(ky * g.kernel + kx) * cin..(ky * g.kernel + kx + 1) * cin];
                        if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                            dst.fill(R::zero());
                        } else {
                            let src = ((n * g.height + iy as usize) * g.width + ix as usize) * cin;
                            dst.copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(cols: &[R], g: &ConvGeom, dx: &mut [R]) {
    let patch = g.patch();
    let cin = g.c_in;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_h + oy) * g.out_w + ox;
                let src_row = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = &src_row[(ky * g.kernel + kx) * cin..(ky * g.kernel + kx + 1) * cin];
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * cin;
                        for (d, &s) in dx[dst..dst + cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
