//! Random gradient-check instances. Each function draws one tiny problem
//! from `seed`, computes analytic gradients through the library graph and
//! numeric gradients (central differences, step 1e-3) of the f64 oracle,
//! and returns the relative error of the full gradient vector: the largest
//! absolute deviation over all inputs divided by the largest numeric
//! gradient magnitude over all inputs. Normalizing per instance rather than
//! per tensor keeps inputs whose exact gradient is zero (a bias feeding a
//! normalization) from dividing rounding noise by zero.
//!
//! Scalarization is `L = sum(y * r)` with a fixed random `r`, so every
//! output element contributes with a different weight.

#![allow(dead_code)]

use rand::Rng;
use tilegan::gan::{self, Direction, Translator};
use tilegan::tensor::{Activation, Dims4, Graph, ParamStore, Tensor4, Var};

use super::*;

pub const STEP: f64 = 1e-3;

fn tensor(dims: Dims4, v: &[f64]) -> Tensor4 {
    Tensor4::from_vec(dims, to_f32(v)).unwrap()
}

/// Values that round-trip through f32 unchanged, so the oracle and the
/// graph see identical inputs.
fn draw(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    to_f64(&to_f32(&uniform(rng, len, lo, hi)))
}

fn draw_away(rng: &mut impl Rng, len: usize, gap: f64, hi: f64) -> Vec<f64> {
    to_f64(&to_f32(&away_from_zero(rng, len, gap, hi)))
}

fn dims(s: Shape) -> Dims4 {
    Dims4::new(s.n, s.h, s.w, s.c)
}

fn grad_of(g: &Graph<'_>, v: Var) -> Vec<f64> {
    to_f64(g.grad(v).expect("gradient present").data())
}

/// Relative error of the concatenated gradient over several
/// (analytic, numeric) pairs.
fn worst(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let a: Vec<f64> = pairs.iter().flat_map(|p| p.0.iter().copied()).collect();
    let n: Vec<f64> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
    rel_error(&a, &n)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvCase {
    pub xs: Shape,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_case(rng: &mut impl Rng) -> ConvCase {
    let k = rng.random_range(1..=3);
    let pad = rng.random_range(0..=k / 2);
    let xs = Shape::new(
        rng.random_range(1..=2),
        rng.random_range(3..=6),
        rng.random_range(3..=6),
        rng.random_range(1..=3),
    );
    ConvCase {
        xs,
        co: rng.random_range(1..=3),
        k,
        stride: rng.random_range(1..=2),
        pad,
    }
}

pub fn conv_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let c = conv_case(&mut rng);
    let wlen = c.co * c.k * c.k * c.xs.c;
    let x = draw(&mut rng, c.xs.len(), -1.0, 1.0);
    let w = draw(&mut rng, wlen, -1.0, 1.0);
    let b = draw(&mut rng, c.co, -0.5, 0.5);
    let (_, ys) = conv2d(&x, c.xs, &w, c.co, c.k, &b, c.stride, c.pad);
    let r = draw(&mut rng, ys.len(), -1.0, 1.0);

    let mut g = Graph::standalone();
    let xv = g.input_with_grad(tensor(dims(c.xs), &x));
    let wv = g.input_with_grad(tensor(Dims4::new(c.co, c.k, c.k, c.xs.c), &w));
    let bv = g.input_with_grad(tensor(Dims4::new(1, 1, 1, c.co), &b));
    let y = g.conv2d(xv, wv, bv, c.stride, c.pad).unwrap();
    assert_eq!(g.dims(y), dims(ys));
    let loss = g.dot(y, tensor(dims(ys), &r)).unwrap();
    g.backward(loss).unwrap();

    let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&conv2d(x, c.xs, w, c.co, c.k, b, c.stride, c.pad).0, &r);
    worst(&[
        (grad_of(&g, xv), numeric_grad(&x, STEP, |p| f(p, &w, &b))),
        (grad_of(&g, wv), numeric_grad(&w, STEP, |p| f(&x, p, &b))),
        (grad_of(&g, bv), numeric_grad(&b, STEP, |p| f(&x, &w, p))),
    ])
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTCase {
    pub xs: Shape,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

pub fn conv_transpose_case(rng: &mut impl Rng) -> ConvTCase {
    loop {
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let c = ConvTCase {
            xs: Shape::new(
                rng.random_range(1..=2),
                rng.random_range(2..=4),
                rng.random_range(2..=4),
                rng.random_range(1..=3),
            ),
            co: rng.random_range(1..=3),
            k,
            stride,
            pad: rng.random_range(0..=k / 2),
            output_padding: rng.random_range(0..stride),
        };
        let oh = (c.xs.h - 1) * stride + k + c.output_padding;
        let ow = (c.xs.w - 1) * stride + k + c.output_padding;
        if oh > 2 * c.pad && ow > 2 * c.pad {
            return c;
        }
    }
}

pub fn conv_transpose_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let c = conv_transpose_case(&mut rng);
    let wlen = c.xs.c * c.k * c.k * c.co;
    let x = draw(&mut rng, c.xs.len(), -1.0, 1.0);
    let w = draw(&mut rng, wlen, -1.0, 1.0);
    let b = draw(&mut rng, c.co, -0.5, 0.5);
    let run = |x: &[f64], w: &[f64], b: &[f64]| {
        conv_transpose2d(x, c.xs, w, c.co, c.k, b, c.stride, c.pad, c.output_padding)
    };
    let (_, ys) = run(&x, &w, &b);
    let r = draw(&mut rng, ys.len(), -1.0, 1.0);

    let mut g = Graph::standalone();
    let xv = g.input_with_grad(tensor(dims(c.xs), &x));
    let wv = g.input_with_grad(tensor(Dims4::new(c.xs.c, c.k, c.k, c.co), &w));
    let bv = g.input_with_grad(tensor(Dims4::new(1, 1, 1, c.co), &b));
    let y = g
        .conv_transpose2d(xv, wv, bv, c.stride, c.pad, c.output_padding)
        .unwrap();
    assert_eq!(g.dims(y), dims(ys));
    let loss = g.dot(y, tensor(dims(ys), &r)).unwrap();
    g.backward(loss).unwrap();

    let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&run(x, w, b).0, &r);
    worst(&[
        (grad_of(&g, xv), numeric_grad(&x, STEP, |p| f(p, &w, &b))),
        (grad_of(&g, wv), numeric_grad(&w, STEP, |p| f(&x, p, &b))),
        (grad_of(&g, bv), numeric_grad(&b, STEP, |p| f(&x, &w, p))),
    ])
}

pub const NORM_EPS: f64 = 1e-5;

pub fn instance_norm_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let xs = Shape::new(
        rng.random_range(1..=2),
        rng.random_range(2..=4),
        rng.random_range(2..=4),
        rng.random_range(1..=3),
    );
    let x = draw(&mut rng, xs.len(), -2.0, 2.0);
    let gamma = draw(&mut rng, xs.c, 0.5, 1.5);
    let beta = draw(&mut rng, xs.c, -0.5, 0.5);
    let r = draw(&mut rng, xs.len(), -1.0, 1.0);
    let cd = Dims4::new(1, 1, 1, xs.c);

    let mut g = Graph::standalone();
    let xv = g.input_with_grad(tensor(dims(xs), &x));
    let gv = g.input_with_grad(tensor(cd, &gamma));
    let bv = g.input_with_grad(tensor(cd, &beta));
    let y = g.instance_norm(xv, gv, bv, NORM_EPS as f32).unwrap();
    let loss = g.dot(y, tensor(dims(xs), &r)).unwrap();
    g.backward(loss).unwrap();

    // eps enters the graph as f32
    let eps = NORM_EPS as f32 as f64;
    let f = |x: &[f64], ga: &[f64], be: &[f64]| dot(&instance_norm(x, xs, ga, be, eps), &r);
    worst(&[
        (grad_of(&g, xv), numeric_grad(&x, STEP, |p| f(p, &gamma, &beta))),
        (grad_of(&g, gv), numeric_grad(&gamma, STEP, |p| f(&x, p, &beta))),
        (grad_of(&g, bv), numeric_grad(&beta, STEP, |p| f(&x, &gamma, p))),
    ])
}

/// Pre-activation margin below which a ReLU kink could fall inside the
/// finite-difference stencil.
const KINK_MARGIN: f64 = 0.02;

struct ResParams {
    xs: Shape,
    w1: Vec<f64>,
    b1: Vec<f64>,
    g1: Vec<f64>,
    t1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    g2: Vec<f64>,
    t2: Vec<f64>,
}

/// Oracle residual block; also returns the pre-ReLU values.
fn residual_oracle(p: &ResParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = p.xs.c;
    let eps = NORM_EPS as f32 as f64;
    let (h, _) = conv2d(x, p.xs, &p.w1, c, 3, &p.b1, 1, 1);
    let pre = instance_norm(&h, p.xs, &p.g1, &p.t1, eps);
    let h = relu(&pre);
    let (h, _) = conv2d(&h, p.xs, &p.w2, c, 3, &p.b2, 1, 1);
    let h = instance_norm(&h, p.xs, &p.g2, &p.t2, eps);
    (add(x, &h), pre)
}

/// Residual block conv → IN → ReLU → conv → IN, plus the identity skip.
/// Returns `None` when a ReLU input lies too close to zero for a valid
/// finite difference.
pub fn residual_instance(seed: u64) -> Option<f64> {
    let mut rng = rng(seed);
    let xs = Shape::new(1, rng.random_range(3..=4), rng.random_range(3..=4), rng.random_range(1..=2));
    let c = xs.c;
    let wl = c * 9 * c;
    let p = ResParams {
        xs,
        w1: draw(&mut rng, wl, -0.6, 0.6),
        b1: draw(&mut rng, c, -0.2, 0.2),
        g1: draw(&mut rng, c, 0.5, 1.5),
        t1: draw(&mut rng, c, -0.3, 0.3),
        w2: draw(&mut rng, wl, -0.6, 0.6),
        b2: draw(&mut rng, c, -0.2, 0.2),
        g2: draw(&mut rng, c, 0.5, 1.5),
        t2: draw(&mut rng, c, -0.3, 0.3),
    };
    let x = draw(&mut rng, xs.len(), -1.0, 1.0);
    let r = draw(&mut rng, xs.len(), -1.0, 1.0);
    let (_, pre) = residual_oracle(&p, &x);
    if pre.iter().any(|v| v.abs() < KINK_MARGIN) {
        return None;
    }

    let mut g = Graph::standalone();
    let cd = Dims4::new(1, 1, 1, c);
    let wd = Dims4::new(c, 3, 3, c);
    let xv = g.input_with_grad(tensor(dims(xs), &x));
    let w1 = g.input_with_grad(tensor(wd, &p.w1));
    let b1 = g.input_with_grad(tensor(cd, &p.b1));
    let g1 = g.input_with_grad(tensor(cd, &p.g1));
    let t1 = g.input_with_grad(tensor(cd, &p.t1));
    let w2 = g.input_with_grad(tensor(wd, &p.w2));
    let b2 = g.input_with_grad(tensor(cd, &p.b2));
    let g2 = g.input_with_grad(tensor(cd, &p.g2));
    let t2 = g.input_with_grad(tensor(cd, &p.t2));
    let eps = NORM_EPS as f32;
    let h = g.conv2d(xv, w1, b1, 1, 1).unwrap();
    let h = g.instance_norm(h, g1, t1, eps).unwrap();
    let h = g.activation(h, Activation::Relu).unwrap();
    let h = g.conv2d(h, w2, b2, 1, 1).unwrap();
    let h = g.instance_norm(h, g2, t2, eps).unwrap();
    let y = g.add(xv, h).unwrap();
    let loss = g.dot(y, tensor(dims(xs), &r)).unwrap();
    g.backward(loss).unwrap();

    let f = |p: &ResParams, x: &[f64]| dot(&residual_oracle(p, x).0, &r);
    let mut pairs = vec![(grad_of(&g, xv), numeric_grad(&x, STEP, |v| f(&p, v)))];
    macro_rules! field {
        ($var:expr, $name:ident) => {{
            let base = p.$name.clone();
            let num = numeric_grad(&base, STEP, |v| {
                let q = ResParams {
                    $name: v.to_vec(),
                    ..clone_params(&p)
                };
                f(&q, &x)
            });
            pairs.push((grad_of(&g, $var), num));
        }};
    }
    field!(w1, w1);
    field!(b1, b1);
    field!(g1, g1);
    field!(t1, t1);
    field!(w2, w2);
    field!(b2, b2);
    field!(g2, g2);
    field!(t2, t2);
    Some(worst(&pairs))
}

fn clone_params(p: &ResParams) -> ResParams {
    ResParams {
        xs: p.xs,
        w1: p.w1.clone(),
        b1: p.b1.clone(),
        g1: p.g1.clone(),
        t1: p.t1.clone(),
        w2: p.w2.clone(),
        b2: p.b2.clone(),
        g2: p.g2.clone(),
        t2: p.t2.clone(),
    }
}

/// LeakyReLU(0.2), ReLU and Tanh on inputs kept away from zero.
pub fn activation_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let xs = Shape::new(rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
    let x = draw_away(&mut rng, xs.len(), 0.01, 2.0);
    let r = draw(&mut rng, xs.len(), -1.0, 1.0);
    let mut err: f64 = 0.0;
    let kinds: [(Activation, fn(&[f64]) -> Vec<f64>); 3] = [
        (Activation::LeakyRelu(0.2), |v| leaky_relu(v, 0.2f32 as f64)),
        (Activation::Relu, relu),
        (Activation::Tanh, tanh),
    ];
    for (kind, oracle) in kinds {
        let mut g = Graph::standalone();
        let xv = g.input_with_grad(tensor(dims(xs), &x));
        let y = g.activation(xv, kind).unwrap();
        let loss = g.dot(y, tensor(dims(xs), &r)).unwrap();
        g.backward(loss).unwrap();
        let num = numeric_grad(&x, STEP, |p| dot(&oracle(p), &r));
        err = err.max(rel_error(&grad_of(&g, xv), &num));
    }
    err
}

/// Discriminator and generator least-squares losses with respect to the
/// four score maps.
pub fn lsgan_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let ss = Shape::new(rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), 1);
    let maps: Vec<Vec<f64>> = (0..4).map(|_| draw(&mut rng, ss.len(), -1.5, 1.5)).collect();
    let d = dims(ss);

    let disc = |m: &[Vec<f64>]| {
        (mean_sq_to(&m[0], 1.0) + mean_sq_to(&m[1], 1.0) + mean_sq_to(&m[2], 0.0) + mean_sq_to(&m[3], 0.0)) / 4.0
    };
    let gen = |m: &[Vec<f64>]| (mean_sq_to(&m[2], 1.0) + mean_sq_to(&m[3], 1.0)) / 2.0;

    let mut pairs = Vec::new();
    for (which, loss_fn) in [(0usize, &disc as &dyn Fn(&[Vec<f64>]) -> f64), (1, &gen)] {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = maps.iter().map(|m| g.input_with_grad(tensor(d, m))).collect();
        let loss = if which == 0 {
            gan::lsgan_disc_loss(&mut g, [vars[0], vars[1]], [vars[2], vars[3]]).unwrap()
        } else {
            gan::lsgan_gen_loss(&mut g, [vars[2], vars[3]]).unwrap()
        };
        let expect = loss_fn(&maps);
        assert!((g.scalar(loss) - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        g.backward(loss).unwrap();
        let used: &[usize] = if which == 0 { &[0, 1, 2, 3] } else { &[2, 3] };
        for &i in used {
            let num = numeric_grad(&maps[i], STEP, |p| {
                let mut m = maps.clone();
                m[i] = p.to_vec();
                loss_fn(&m)
            });
            pairs.push((grad_of(&g, vars[i]), num));
        }
    }
    worst(&pairs)
}

/// Two single-conv generators (3x3, 3→3 channels, Tanh) sharing nothing;
/// enough to exercise the cycle loss wiring in both directions.
pub struct ConvPair {
    pub store: ParamStore,
}

impl ConvPair {
    pub fn new(w_ab: &[f64], b_ab: &[f64], w_ba: &[f64], b_ba: &[f64]) -> Self {
        let mut store = ParamStore::new();
        let wd = Dims4::new(3, 3, 3, 3);
        let bd = Dims4::new(1, 1, 1, 3);
        store.add("ab.w", tensor(wd, w_ab)).unwrap();
        store.add("ab.b", tensor(bd, b_ab)).unwrap();
        store.add("ba.w", tensor(wd, w_ba)).unwrap();
        store.add("ba.b", tensor(bd, b_ba)).unwrap();
        Self { store }
    }
}

impl Translator for ConvPair {
    fn param_store(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, dir: Direction, x: Var) -> tilegan::Result<Var> {
        let prefix = match dir {
            Direction::AB => "ab",
            Direction::BA => "ba",
        };
        let w = g.param(self.store.id(&format!("{prefix}.w")).unwrap())?;
        let b = g.param(self.store.id(&format!("{prefix}.b")).unwrap())?;
        let y = g.conv2d(x, w, b, 1, 1)?;
        g.activation(y, Activation::Tanh)
    }
}

/// Cycle loss `mae(G_BA(G_AB(a)), a) + mae(G_AB(G_BA(b)), b)` with respect
/// to both generators' parameters and both inputs.
pub fn cycle_instance(seed: u64) -> Option<f64> {
    let mut rng = rng(seed);
    let xs = Shape::new(1, rng.random_range(2..=4), rng.random_range(2..=4), 3);
    let wl = 3 * 9 * 3;
    let w_ab = draw(&mut rng, wl, -0.5, 0.5);
    let b_ab = draw(&mut rng, 3, -0.2, 0.2);
    let w_ba = draw(&mut rng, wl, -0.5, 0.5);
    let b_ba = draw(&mut rng, 3, -0.2, 0.2);
    let a = draw(&mut rng, xs.len(), -0.9, 0.9);
    let b = draw(&mut rng, xs.len(), -0.9, 0.9);

    let gen = |x: &[f64], w: &[f64], bias: &[f64]| tanh(&conv2d(x, xs, w, 3, 3, bias, 1, 1).0);
    let oracle = |w_ab: &[f64], b_ab: &[f64], w_ba: &[f64], b_ba: &[f64], a: &[f64], b: &[f64]| {
        let rec_a = gen(&gen(a, w_ab, b_ab), w_ba, b_ba);
        let rec_b = gen(&gen(b, w_ba, b_ba), w_ab, b_ab);
        let diffs: Vec<f64> = rec_a.iter().zip(a).chain(rec_b.iter().zip(b)).map(|(r, x)| r - x).collect();
        (mae(&rec_a, a) + mae(&rec_b, b), diffs)
    };
    let (_, diffs) = oracle(&w_ab, &b_ab, &w_ba, &b_ba, &a, &b);
    if diffs.iter().any(|d| d.abs() < KINK_MARGIN) {
        return None;
    }

    let net = ConvPair::new(&w_ab, &b_ab, &w_ba, &b_ba);
    let mut g = Graph::recording(&net.store);
    let av = g.input_with_grad(tensor(dims(xs), &a));
    let bv = g.input_with_grad(tensor(dims(xs), &b));
    let loss = gan::cycle_loss(&net, &mut g, av, bv).unwrap();
    g.backward(loss).unwrap();
    let ga = grad_of(&g, av);
    let gb = grad_of(&g, bv);
    let grads = g.take_param_grads();
    let pg = |name: &str| to_f64(grads.get(net.store.id(name).unwrap()).unwrap().data());

    let l = |w_ab: &[f64], b_ab: &[f64], w_ba: &[f64], b_ba: &[f64], a: &[f64], b: &[f64]| {
        oracle(w_ab, b_ab, w_ba, b_ba, a, b).0
    };
    Some(worst(&[
        (pg("ab.w"), numeric_grad(&w_ab, STEP, |p| l(p, &b_ab, &w_ba, &b_ba, &a, &b))),
        (pg("ab.b"), numeric_grad(&b_ab, STEP, |p| l(&w_ab, p, &w_ba, &b_ba, &a, &b))),
        (pg("ba.w"), numeric_grad(&w_ba, STEP, |p| l(&w_ab, &b_ab, p, &b_ba, &a, &b))),
        (pg("ba.b"), numeric_grad(&b_ba, STEP, |p| l(&w_ab, &b_ab, &w_ba, p, &a, &b))),
        (ga, numeric_grad(&a, STEP, |p| l(&w_ab, &b_ab, &w_ba, &b_ba, p, &b))),
        (gb, numeric_grad(&b, STEP, |p| l(&w_ab, &b_ab, &w_ba, &b_ba, &a, p))),
    ]))
}

/// Run `instance` on consecutive seeds until `count` valid instances were
/// evaluated; returns the worst error.
pub fn worst_over(count: usize, base_seed: u64, instance: impl Fn(u64) -> Option<f64>) -> f64 {
    let mut done = 0;
    let mut seed = base_seed;
    let mut err: f64 = 0.0;
    while done < count {
        if let Some(e) = instance(seed) {
            err = err.max(e);
            done += 1;
        }
        seed += 1;
        assert!(seed - base_seed < 50 * count as u64, "too many rejected instances");
    }
    err
}

/// `<conv(x, w), y>` against `<x, convT(y, w)>` for one random geometry;
/// returns the relative gap.
pub fn adjoint_instance(seed: u64) -> f64 {
    let mut rng = rng(seed);
    // the transposed conv takes one output padding for both axes, so keep
    // geometries whose floor remainders agree
    let (c, oh, ow, op) = loop {
        let c = conv_case(&mut rng);
        let oh = (c.xs.h + 2 * c.pad - c.k) / c.stride + 1;
        let ow = (c.xs.w + 2 * c.pad - c.k) / c.stride + 1;
        let op_h = c.xs.h + 2 * c.pad - ((oh - 1) * c.stride + c.k);
        let op_w = c.xs.w + 2 * c.pad - ((ow - 1) * c.stride + c.k);
        if op_h == op_w {
            break (c, oh, ow, op_h);
        }
    };
    let wlen = c.co * c.k * c.k * c.xs.c;
    let x = draw(&mut rng, c.xs.len(), -1.0, 1.0);
    let w = draw(&mut rng, wlen, -1.0, 1.0);
    let ys = Shape::new(c.xs.n, oh, ow, c.co);
    let y = draw(&mut rng, ys.len(), -1.0, 1.0);

    let mut g = Graph::standalone_inference();
    let xv = g.input(tensor(dims(c.xs), &x));
    let wv = g.input(tensor(Dims4::new(c.co, c.k, c.k, c.xs.c), &w));
    let zero_co = g.input(Tensor4::zeros(Dims4::new(1, 1, 1, c.co)));
    let zero_ci = g.input(Tensor4::zeros(Dims4::new(1, 1, 1, c.xs.c)));
    let yv = g.input(tensor(dims(ys), &y));
    let conv = g.conv2d(xv, wv, zero_co, c.stride, c.pad).unwrap();
    let lhs = g.dot(conv, tensor(dims(ys), &y)).unwrap();
    let back = g.conv_transpose2d(yv, wv, zero_ci, c.stride, c.pad, op).unwrap();
    assert_eq!(g.dims(back), dims(c.xs));
    let rhs = g.dot(back, tensor(dims(c.xs), &x)).unwrap();
    let (l, r) = (g.scalar(lhs), g.scalar(rhs));
    (l - r).abs() / l.abs().max(r.abs()).max(1e-12)
}
