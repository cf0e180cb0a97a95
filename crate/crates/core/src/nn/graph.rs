use serde::{Deserialize, Serialize};

use crate::kinematics::{step_with_jacobian, StepJacobian};
use crate::scene::{wrap_angle, Action, AgentState};
use crate::error::{Error, Result};

use super::params::{Grads, ParamId, ParamSet};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape of a square-kernel 2-D convolution over a channel-major input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_size(&self) -> usize {
        (self.size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Fixed standard deviations of the state reconstruction likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateNoise {
    pub pos: f64,
    pub psi: f64,
    pub v: f64,
}

impl Default for StateNoise {
    fn default() -> Self {
        Self { pos: 0.5, psi: 0.1, v: 0.5 }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Linear { x: Var, w: ParamId, b: ParamId },
    Conv { x: Var, w: ParamId, b: ParamId, shape: ConvShape, cols: Vec<f64> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleEach(Var, Vec<f64>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Kinematic { state: Var, action: Var, jac: StepJacobian },
    StateNll { pred: Var, grad: [f64; 4] },
    Kl { mu: Var, sigma: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    needs_grad: bool,
}

/// A reverse-mode tape over `f64` vectors whose learnable leaves live in a
/// borrowed [`ParamSet`].
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value, false)
    }

    /// A leaf whose adjoint [`Graph::backward_wrt`] can report.
    pub fn variable(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value, true)
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wt = self.params.get(w);
        let bias = &self.params.get(b).data;
        let (out, inp) = (wt.shape[0], wt.shape[1]);
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), inp, "linear input width");
        let mut y = bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &wt.data[o * inp..(o + 1) * inp];
            *yo += dot(row, xv);
        }
        debug_assert_eq!(y.len(), out);
        self.push(Op::Linear { x, w, b }, y, true)
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, shape: ConvShape) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), shape.in_channels * shape.size * shape.size, "conv input size");
        let wt = &self.params.get(w).data;
        let bias = &self.params.get(b).data;
        let cols = im2col(xv, &shape);
        let mm = shape.out_size() * shape.out_size();
        let rows = shape.fan_in();
        let mut y = vec![0.0; shape.out_channels * mm];
        for (oc, plane) in y.chunks_exact_mut(mm).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[oc]);
            for (r, col) in cols.chunks_exact(mm).enumerate() {
                let wv = wt[oc * rows + r];
                plane.iter_mut().zip(col).for_each(|(d, c)| *d += wv * c);
            }
        }
        self.push(Op::Conv { x, w, b, shape, cols }, y, true)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let y = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(op, y, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn scale_each(&mut self, x: Var, c: &[f64]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), c.len(), "scale widths");
        let y = xv.iter().zip(c).map(|(a, b)| a * b).collect();
        let ng = self.ng(x);
        self.push(Op::ScaleEach(x, c.to_vec()), y, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.len(), bv.len(), "elementwise operand widths");
        let y = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(op, y, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Op::Concat(parts.to_vec()), y, ng)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.nodes[x.0].value[start..start + len].to_vec();
        let ng = self.ng(x);
        self.push(Op::Slice(x, start), y, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = vec![self.nodes[x.0].value.iter().sum()];
        let ng = self.ng(x);
        self.push(Op::Sum(x), y, ng)
    }

    /// Bicycle-model transition of a 4-vector state under a 2-vector action.
    pub fn kinematic_step(&mut self, state: Var, action: Var, dt: f64, length: f64) -> Result<Var> {
        let s = AgentState::from_array(self.value(state).try_into().expect("state width 4"));
        let a = self.value(action);
        let act = Action { accel: a[0], steer: a[1] };
        let (next, jac) = step_with_jacobian(&s, &act, dt, length)?;
        let ng = self.ng(state) || self.ng(action);
        Ok(self.push(Op::Kinematic { state, action, jac }, next.to_array().to_vec(), ng))
    }

    /// Negative log density of `target` under the Gaussian centered on the
    /// predicted state, heading residual wrapped.
    pub fn state_nll(&mut self, pred: Var, target: &AgentState, noise: &StateNoise) -> Var {
        let p = self.value(pred);
        let dx = target.x - p[0];
        let dy = target.y - p[1];
        let dpsi = wrap_angle(target.psi - p[2]);
        let dv = target.v - p[3];
        let (sp2, sh2, sv2) = (noise.pos * noise.pos, noise.psi * noise.psi, noise.v * noise.v);
        let two_pi = 2.0 * std::f64::consts::PI;
        let nll = 0.5 * (dx * dx + dy * dy) / sp2
            + 0.5 * dpsi * dpsi / sh2
            + 0.5 * dv * dv / sv2
            + (two_pi * sp2).ln()
            + 0.5 * (two_pi * sh2).ln()
            + 0.5 * (two_pi * sv2).ln();
        let grad = [-dx / sp2, -dy / sp2, -dpsi / sh2, -dv / sv2];
        let ng = self.ng(pred);
        self.push(Op::StateNll { pred, grad }, vec![nll], ng)
    }

    /// KL divergence of a diagonal Gaussian from the standard normal.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        let value = super::kl_diag_gaussian(self.value(mu), self.value(sigma))?;
        let ng = self.ng(mu) || self.ng(sigma);
        Ok(self.push(Op::Kl { mu, sigma }, vec![value], ng))
    }

    /// Accumulates d(root)/d(param) into `grads`. `root` must be a scalar.
    pub fn backward(&self, root: Var, grads: &mut Grads) {
        self.backward_wrt(root, grads, &[]);
    }

    /// Like [`Graph::backward`], additionally returning the adjoints of the
    /// given [`Graph::variable`] leaves.
    pub fn backward_wrt(&self, root: Var, grads: &mut Grads, wrt: &[Var]) -> Vec<Vec<f64>> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(node, &g, &mut adj, grads);
        }
        wrt.iter()
            .map(|v| {
                let n = self.nodes[v.0].value.len();
                adj.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| vec![0.0; n])
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut Grads) {
        let nodes = &self.nodes;
        let mut send = |v: Var, f: &dyn Fn(usize) -> f64| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (j, s) in slot.iter_mut().enumerate() {
                *s += f(j);
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Linear { x, w, b } => {
                let wt = self.params.get(*w);
                let inp = wt.shape[1];
                let xv = &nodes[x.0].value;
                {
                    let gw = grads.get_mut(*w);
                    for (o, go) in g.iter().enumerate() {
                        if *go == 0.0 {
                            continue;
                        }
                        for (gwi, xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xv) {
                            *gwi += go * xi;
                        }
                    }
                }
                for (gb, go) in grads.get_mut(*b).iter_mut().zip(g) {
                    *gb += go;
                }
                if nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; inp];
                    for (o, go) in g.iter().enumerate() {
                        if *go == 0.0 {
                            continue;
                        }
                        for (gxi, wi) in gx.iter_mut().zip(&wt.data[o * inp..(o + 1) * inp]) {
                            *gxi += go * wi;
                        }
                    }
                    send(*x, &|j| gx[j]);
                }
            }
            Op::Conv { x, w, b, shape, cols } => {
                let gx = self.conv_backward(*x, *w, *b, shape, cols, g, grads);
                if let Some(gx) = gx {
                    send(*x, &|j| gx[j]);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                send(*x, &|j| if xv[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                send(*x, &|j| g[j] * (1.0 - y[j] * y[j]));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, &|j| g[j] * y[j] * (1.0 - y[j]));
            }
            Op::Softplus(x) => {
                let xv = &nodes[x.0].value;
                send(*x, &|j| g[j] * sigmoid(xv[j]));
            }
            Op::Scale(x, c) => send(*x, &|j| g[j] * c),
            Op::ScaleEach(x, c) => send(*x, &|j| g[j] * c[j]),
            Op::Add(a, b) => {
                send(*a, &|j| g[j]);
                send(*b, &|j| g[j]);
            }
            Op::Sub(a, b) => {
                send(*a, &|j| g[j]);
                send(*b, &|j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                send(*a, &|j| g[j] * bv[j]);
                send(*b, &|j| g[j] * av[j]);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    let o = off;
                    send(*p, &|j| g[o + j]);
                    off += n;
                }
            }
            Op::Slice(x, start) => {
                let (s, n) = (*start, g.len());
                send(*x, &|j| if j >= s && j < s + n { g[j - s] } else { 0.0 });
            }
            Op::Sum(x) => send(*x, &|_| g[0]),
            Op::Kinematic { state, action, jac } => {
                send(*state, &|j| (0..4).map(|r| g[r] * jac.d_state[r][j]).sum());
                send(*action, &|j| (0..4).map(|r| g[r] * jac.d_action[r][j]).sum());
            }
            Op::StateNll { pred, grad } => send(*pred, &|j| g[0] * grad[j]),
            Op::Kl { mu, sigma } => {
                let (mv, sv) = (&nodes[mu.0].value, &nodes[sigma.0].value);
                send(*mu, &|j| g[0] * mv[j]);
                send(*sigma, &|j| g[0] * (sv[j] - 1.0 / sv[j]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: ParamId,
        b: ParamId,
        shape: &ConvShape,
        cols: &[f64],
        g: &[f64],
        grads: &mut Grads,
    ) -> Option<Vec<f64>> {
        let wt = &self.params.get(w).data;
        let mm = shape.out_size() * shape.out_size();
        let rows = shape.fan_in();
        {
            let gb = grads.get_mut(b);
            for (gbo, gplane) in gb.iter_mut().zip(g.chunks_exact(mm)) {
                *gbo += gplane.iter().sum::<f64>();
            }
        }
        let gw = grads.get_mut(w);
        for (oc, gplane) in g.chunks_exact(mm).enumerate() {
            for (r, col) in cols.chunks_exact(mm).enumerate() {
                gw[oc * rows + r] += dot(gplane, col);
            }
        }
        if !self.nodes[x.0].needs_grad {
            return None;
        }
        let mut gcols = vec![0.0; cols.len()];
        for (oc, gplane) in g.chunks_exact(mm).enumerate() {
            for (r, gcol) in gcols.chunks_exact_mut(mm).enumerate() {
                let wv = wt[oc * rows + r];
                gcol.iter_mut().zip(gplane).for_each(|(d, gv)| *d += wv * gv);
            }
        }
        Some(col2im(&gcols, shape))
    }

    /// Fails with a divergence error if `v` holds a non-finite entry.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence(format!("non-finite {what}")))
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Unfolds receptive fields into a `(in_channels * k * k) x (m * m)`
/// row-major matrix; padding reads as zero.
fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (n, m, k) = (s.size, s.out_size(), s.kernel);
    let mut cols = vec![0.0; s.fan_in() * m * m];
    for ic in 0..s.in_channels {
        let src = &x[ic * n * n..(ic + 1) * n * n];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ic * k + ky) * k + kx;
                let dst = &mut cols[r * m * m..(r + 1) * m * m];
                for oy in 0..m {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= n as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * n..(iy as usize + 1) * n];
                    for ox in 0..m {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < n as isize {
                            dst[oy * m + ox] = srow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], s: &ConvShape) -> Vec<f64> {
    let (n, m, k) = (s.size, s.out_size(), s.kernel);
    let mut x = vec![0.0; s.in_channels * n * n];
    for ic in 0..s.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ic * k + ky) * k + kx;
                let src = &cols[r * m * m..(r + 1) * m * m];
                for oy in 0..m {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= n as isize {
                        continue;
                    }
                    let base = ic * n * n + iy as usize * n;
                    for ox in 0..m {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < n as isize {
                            x[base + ix as usize] += src[oy * m + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.max(0.0) + (-v.abs()).exp().ln_1p()
    }
}
