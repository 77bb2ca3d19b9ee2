//! Scalar reverse-mode tape.
//!
//! Losses are assembled from scalar [`Var`]s. Network outputs (values and
//! input derivatives for a whole batch) enter the tape as leaf blocks; during
//! [`Tape::backward`] their adjoints are handed to [`DenseNet::backward`], so
//! the gradient flows through the forward-mode input derivatives into the
//! parameters.
//!
//! Only the operations exposed here can be recorded, so every loss built on a
//! tape is differentiable by construction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::{DenseNet, JetAdjoint, JetCache, JetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Scale(u32, f64),
    AddConst(u32),
    Exp(u32),
    Square(u32),
    Recip(u32),
    Softplus(u32),
    LinComb(u32, u32),
}

#[derive(Debug)]
struct Block {
    net: usize,
    cache: Option<JetCache>,
    first: u32,
    len: usize,
}

/// Handle to the outputs of one batched network evaluation on a tape.
///
/// Leaves are laid out as the value block, then one block per first
/// derivative, then the optional second-derivative block, each `batch x width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetVars {
    first: u32,
    pub batch: usize,
    pub width: usize,
    pub num_dirs: usize,
    pub has_second: bool,
}

impl NetVars {
    fn at(&self, block: usize, b: usize, o: usize) -> Var {
        debug_assert!(b < self.batch && o < self.width);
        Var(self.first + (block * self.batch * self.width + b * self.width + o) as u32)
    }

    pub fn value(&self, b: usize, o: usize) -> Var {
        self.at(0, b, o)
    }

    /// First derivative along the `k`-th requested direction.
    pub fn d(&self, k: usize, b: usize, o: usize) -> Var {
        assert!(k < self.num_dirs, "direction {k} was not requested");
        self.at(1 + k, b, o)
    }

    pub fn dd(&self, b: usize, o: usize) -> Var {
        assert!(self.has_second, "second derivative was not requested");
        self.at(1 + self.num_dirs, b, o)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    terms: Vec<(u32, f64)>,
    blocks: Vec<Block>,
    record: bool,
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
    nets: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.index()]
    }

    /// Parameter gradient of network `id`, if it was requested.
    pub fn net(&self, id: usize) -> Option<&[f64]> {
        self.nets.get(id).and_then(|g| g.as_deref())
    }

    pub fn take_net(&mut self, id: usize) -> Option<Vec<f64>> {
        self.nets.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    /// A tape that records network caches for a later backward pass.
    pub fn new() -> Self {
        Tape {
            record: true,
            ..Default::default()
        }
    }

    /// A tape for evaluation only; [`Tape::backward`] will refuse to run.
    pub fn evaluation_only() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        let id = self.values.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.ops.push(op);
        self.values.push(value);
        Var(id as u32)
    }

    /// Independent input; its adjoint is available after `backward`.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddConst(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = libm::exp(self.value(a));
        self.push(Op::Exp(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Square(a.0), x * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = 1.0 / self.value(a);
        self.push(Op::Recip(a.0), v)
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = softplus(self.value(a));
        self.push(Op::Softplus(a.0), v)
    }

    /// `Σ c_k v_k`, summed pairwise so the value does not depend on how long
    /// the list is grouped.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let start = self.terms.len();
        let mut products = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            self.terms.push((v.0, c));
            products.push(self.value(v) * c);
        }
        let value = pairwise_sum(&products);
        self.push(Op::LinComb(start as u32, terms.len() as u32), value)
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, 1.0)).collect();
        self.lin_comb(&terms)
    }

    pub fn mean(&mut self, vars: &[Var]) -> Var {
        if vars.is_empty() {
            return self.constant(0.0);
        }
        let w = 1.0 / vars.len() as f64;
        let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, w)).collect();
        self.lin_comb(&terms)
    }

    /// Evaluates `net` on a batch (row-major `batch x input_width`) and
    /// records its outputs as leaves tagged with the caller's network `id`.
    pub fn network(&mut self, id: usize, net: &DenseNet, inputs: &[f64], spec: &JetSpec) -> Result<NetVars> {
        let cache = net.forward_cached(inputs, spec, self.record)?;
        let out = cache.output();
        let first = self.values.len() as u32;
        let nvars = NetVars {
            first,
            batch: out.batch,
            width: out.width,
            num_dirs: out.d.len(),
            has_second: out.dd.is_some(),
        };
        let mut len = 0;
        let blocks = core::iter::once(&out.value)
            .chain(out.d.iter())
            .chain(out.dd.iter());
        for block in blocks {
            for &v in block {
                self.ops.push(Op::Leaf);
                self.values.push(v);
            }
            len += block.len();
        }
        if self.values.len() >= u32::MAX as usize {
            return Err(Error::invalid("tape overflow"));
        }
        self.blocks.push(Block {
            net: id,
            cache: self.record.then_some(cache),
            first,
            len,
        });
        Ok(nvars)
    }

    /// Reverse sweep from `output`. `nets[id]` supplies the network recorded
    /// under `id`; `None` skips that network's parameter gradient (frozen).
    pub fn backward(&self, output: Var, nets: &[Option<&DenseNet>]) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward on an evaluation-only tape"));
        }
        let n = self.values.len();
        let mut adj = vec![0.0; n];
        adj[output.index()] = 1.0;
        for i in (0..=output.index()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += a;
                }
                Op::Sub(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] -= a;
                }
                Op::Mul(x, y) => {
                    let (vx, vy) = (self.values[x as usize], self.values[y as usize]);
                    adj[x as usize] += a * vy;
                    adj[y as usize] += a * vx;
                }
                Op::Scale(x, c) => adj[x as usize] += a * c,
                Op::AddConst(x) => adj[x as usize] += a,
                Op::Exp(x) => adj[x as usize] += a * self.values[i],
                Op::Square(x) => adj[x as usize] += 2.0 * a * self.values[x as usize],
                Op::Recip(x) => adj[x as usize] -= a * self.values[i] * self.values[i],
                Op::Softplus(x) => adj[x as usize] += a * sigmoid(self.values[x as usize]),
                Op::LinComb(start, len) => {
                    for &(x, c) in &self.terms[start as usize..(start + len) as usize] {
                        adj[x as usize] += a * c;
                    }
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = nets.iter().map(|n| n.map(|n| vec![0.0; n.params().len()])).collect();
        for block in &self.blocks {
            let Some(Some(net)) = nets.get(block.net) else {
                continue;
            };
            let cache = block.cache.as_ref().expect("recording tape keeps caches");
            let seg = &adj[block.first as usize..block.first as usize + block.len];
            if seg.iter().all(|&x| x == 0.0) {
                continue;
            }
            let m = cache.output().batch * cache.output().width;
            let nd = cache.spec().dirs.len();
            let jadj = JetAdjoint {
                value: seg[..m].to_vec(),
                d: (0..nd).map(|k| seg[(1 + k) * m..(2 + k) * m].to_vec()).collect(),
                dd: cache.spec().second.map(|_| seg[(1 + nd) * m..(2 + nd) * m].to_vec()),
            };
            let g = grads[block.net].as_mut().expect("allocated above");
            net.backward(cache, &jadj, g)?;
        }
        Ok(Gradients { adjoints: adj, nets: grads })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + libm::log(-libm::expm1(-y))
    } else {
        libm::log(libm::expm1(y))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::OutputTransform;

    #[test]
    fn scalar_ops_match_finite_differences() {
        let f = |x: f64, y: f64| -> (f64, f64, f64) {
            let mut t = Tape::new();
            let a = t.leaf(x);
            let b = t.leaf(y);
            let p = t.mul(a, b);
            let e = t.exp(p);
            let s = t.softplus(b);
            let r = t.recip(s);
            let q = t.square(a);
            let l = t.lin_comb(&[(e, 0.5), (r, -2.0), (q, 3.0)]);
            let m = t.sub(l, a);
            let k = t.add_const(m, 4.0);
            let out = t.scale(k, 1.5);
            let g = t.backward(out, &[]).unwrap();
            (t.value(out), g.wrt(a), g.wrt(b))
        };
        let (x, y) = (0.3, -0.7);
        let (_, gx, gy) = f(x, y);
        let h = 1e-6;
        let fdx = (f(x + h, y).0 - f(x - h, y).0) / (2.0 * h);
        let fdy = (f(x, y + h).0 - f(x, y - h).0) / (2.0 * h);
        assert!((gx - fdx).abs() < 1e-8);
        assert!((gy - fdy).abs() < 1e-8);
    }

    #[test]
    fn softplus_round_trip() {
        for &s in &[0.01, 0.5, 2.0, 40.0] {
            assert!((softplus(softplus_inverse(s)) - s).abs() < 1e-12 * s.max(1.0));
        }
    }

    #[test]
    fn network_block_gradient_and_frozen_skip() {
        let net = DenseNet::xavier(&[2, 4, 1], OutputTransform::Identity, 1).unwrap();
        let x = [0.2, 0.4, 0.6, 0.1];
        let loss = |n: &DenseNet| -> f64 {
            let mut t = Tape::new();
            let o = t.network(0, n, &x, &JetSpec::first(&[1])).unwrap();
            let a = t.square(o.d(0, 0, 0));
            let b = t.mul(o.value(1, 0), o.d(0, 1, 0));
            let s = t.add(a, b);
            t.value(s)
        };
        let mut t = Tape::new();
        let o = t.network(0, &net, &x, &JetSpec::first(&[1])).unwrap();
        let a = t.square(o.d(0, 0, 0));
        let b = t.mul(o.value(1, 0), o.d(0, 1, 0));
        let s = t.add(a, b);
        let g = t.backward(s, &[Some(&net)]).unwrap();
        let grad = g.net(0).unwrap();
        for p in 0..grad.len() {
            let h = 1e-6;
            let mut np = net.clone();
            np.params_mut()[p] += h;
            let mut nm = net.clone();
            nm.params_mut()[p] -= h;
            let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
            assert!((fd - grad[p]).abs() < 1e-7 + 1e-5 * fd.abs());
        }
        let frozen = t.backward(s, &[None]).unwrap();
        assert!(frozen.net(0).is_none());
    }

    #[test]
    fn evaluation_only_refuses_backward() {
        let mut t = Tape::evaluation_only();
        let a = t.leaf(1.0);
        assert!(t.backward(a, &[]).is_err());
    }

    #[test]
    fn pairwise_sum_small_and_large() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }
}
