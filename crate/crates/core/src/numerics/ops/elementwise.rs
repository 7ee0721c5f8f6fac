use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{strides, Scalar, Tensor};

/// Flat input offsets for every output element under numpy-style broadcasting.
struct Broadcast {
    dims: Vec<usize>,
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
}

fn broadcast(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let nd = a.len().max(b.len());
    let pad = |d: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - d.len()];
        v.extend_from_slice(d);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut dims = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            _ if x == y => dims.push(x),
            (1, _) => dims.push(y),
            (_, 1) => dims.push(x),
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        }
    }
    let eff = |p: &[usize]| -> Vec<usize> {
        strides(p).iter().zip(p).map(|(&s, &d)| if d == 1 { 0 } else { s }).collect()
    };
    let (sa, sb) = (eff(&pa), eff(&pb));
    let n: usize = dims.iter().product();
    let mut a_idx = Vec::with_capacity(n);
    let mut b_idx = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        a_idx.push(oa);
        b_idx.push(ob);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Broadcast { dims, a_idx, b_idx })
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d/da, d/db) evaluated at (a, b).
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&self, op: BinOp, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (av, bv) = (a.rc(), b.rc());
        if av.dims() == bv.dims() {
            let out = av.zip_map(&bv, |x, y| op.apply(x, y));
            return Ok(self.record(
                op.name(),
                &[a, b],
                out,
                Box::new(move |g, needs| {
                    let n = g.len();
                    let mut ga = needs[0].then(|| vec![T::zero(); n]);
                    let mut gb = needs[1].then(|| vec![T::zero(); n]);
                    for i in 0..n {
                        let (da, db) = op.partials(av.data()[i], bv.data()[i]);
                        if let Some(v) = ga.as_mut() {
                            v[i] = g.data()[i] * da;
                        }
                        if let Some(v) = gb.as_mut() {
                            v[i] = g.data()[i] * db;
                        }
                    }
                    vec![
                        ga.map(|v| Tensor::from_vec(av.dims(), v)),
                        gb.map(|v| Tensor::from_vec(bv.dims(), v)),
                    ]
                }),
            ));
        }
        let bc = Rc::new(broadcast(av.dims(), bv.dims())?);
        let data = bc
            .a_idx
            .iter()
            .zip(&bc.b_idx)
            .map(|(&i, &j)| op.apply(av.data()[i], bv.data()[j]))
            .collect();
        let out = Tensor::from_vec(&bc.dims, data);
        Ok(self.record(
            op.name(),
            &[a, b],
            out,
            Box::new(move |g, needs| {
                let mut ga = needs[0].then(|| Tensor::zeros(av.dims()));
                let mut gb = needs[1].then(|| Tensor::zeros(bv.dims()));
                for (k, (&i, &j)) in bc.a_idx.iter().zip(&bc.b_idx).enumerate() {
                    let (da, db) = op.partials(av.data()[i], bv.data()[j]);
                    if let Some(t) = ga.as_mut() {
                        t.data_mut()[i] += g.data()[k] * da;
                    }
                    if let Some(t) = gb.as_mut() {
                        t.data_mut()[j] += g.data()[k] * db;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinOp::Div, a, b)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        &self,
        op: &'static str,
        x: &Var<T>,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<T> {
        let xv = x.rc();
        let out = Rc::new(xv.map(f));
        let yv = Rc::clone(&out);
        self.record(
            op,
            &[x],
            (*out).clone(),
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(g.dims(), data))]
            }),
        )
    }

    pub fn mul_scalar(&self, x: &Var<T>, c: T) -> Var<T> {
        self.unary("mul_scalar", x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: &Var<T>, c: T) -> Var<T> {
        self.unary("add_scalar", x, |v| v + c, |_, _| T::one())
    }

    pub fn neg(&self, x: &Var<T>) -> Var<T> {
        self.mul_scalar(x, -T::one())
    }

    pub fn square(&self, x: &Var<T>) -> Var<T> {
        let two = T::of(2.0);
        self.unary("square", x, |v| v * v, move |x, _| two * x)
    }

    pub fn sqrt(&self, x: &Var<T>) -> Var<T> {
        let half = T::of(0.5);
        self.unary("sqrt", x, |v| v.sqrt(), move |_, y| half / y)
    }

    pub fn sin(&self, x: &Var<T>) -> Var<T> {
        self.unary("sin", x, |v| v.sin(), |x, _| x.cos())
    }

    pub fn exp(&self, x: &Var<T>) -> Var<T> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        self.unary("abs", x, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn clamp_max(&self, x: &Var<T>, m: T) -> Var<T> {
        self.unary("clamp_max", x, |v| v.min(m), move |x, _| {
            if x < m {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        self.leaky_relu_named("relu", x, T::zero())
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: T) -> Var<T> {
        self.leaky_relu_named("leaky_relu", x, slope)
    }

    fn leaky_relu_named(&self, op: &'static str, x: &Var<T>, slope: T) -> Var<T> {
        self.unary(
            op,
            x,
            |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    /// Exact GELU, x·Φ(x).
    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        self.unary("gelu", x, gelu, |x, _| gelu_grad(x))
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    T::of(x * normal_cdf(x))
}

pub fn gelu_grad<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::of(normal_cdf(x) + x * pdf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, v.to_vec())
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-4);
        // x·Φ(x) at x=1 with Φ(1)=0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746).abs() < 1e-4);
        assert!((gelu(1.0f32) - 0.84134).abs() < 1e-4);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn broadcast_add_and_gradient_reduction() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3], &[10., 20., 30.]));
        let y = tape.add(&a, &b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let g = tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(g.wrt(&b).data(), &[2., 2., 2.]);
        assert_eq!(g.wrt(&a).data(), &[1.; 6]);
    }

    #[test]
    fn broadcast_middle_axis() {
        let tape = Tape::<f64>::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3, 2]));
        let b = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let y = tape.mul(&tape.add_scalar(&a, 1.0), &b).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]);
        assert!(tape.add(&a, &tape.constant(Tensor::zeros(&[4]))).is_err());
    }
}
