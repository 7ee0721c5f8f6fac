//! Named parameter trees.
//!
//! Every layer stores its weights in a struct generic over the leaf type `P`:
//! `Tensor<T>` at rest, `Var<T>` while a forward pass is being recorded. Each
//! leaf has a unique dotted name (`stages.0.blocks.1.ffn.blur`) used by the
//! optimizer and the checkpoint container.

use std::cell::RefCell;

use crate::error::Result;
use crate::numerics::{PortableRng, Scalar, Tape, Tensor, Var};

pub trait ParamTree<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P));

    fn count(&self) -> usize
    where
        P: HasLen,
    {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.numel());
        n
    }

    fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit("", &mut |name, _| v.push(name));
        v
    }
}

pub trait HasLen {
    fn numel(&self) -> usize;
}

impl<T: Scalar> HasLen for Tensor<T> {
    fn numel(&self) -> usize {
        self.len()
    }
}

impl<T: Scalar> HasLen for Var<T> {
    fn numel(&self) -> usize {
        self.value().len()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Converts a stored tree into one of tape variables.
pub trait Bind<T: Scalar> {
    type Bound;
    fn bind(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>) -> Var<T>) -> Self::Bound;

    /// All leaves become differentiable inputs on `tape`.
    fn leaves(&self, tape: &Tape<T>) -> Self::Bound {
        self.bind("", &mut |_, t| tape.leaf(t.clone()))
    }

    /// All leaves become constants.
    fn constants(&self) -> Self::Bound {
        self.bind("", &mut |_, t| Var::constant(t.clone()))
    }
}

/// One forward evaluation: tape plus training-time randomness.
pub struct Pass<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub training: bool,
    rng: RefCell<PortableRng>,
}

impl<'t, T: Scalar> Pass<'t, T> {
    pub fn inference(tape: &'t Tape<T>) -> Self {
        Self { tape, training: false, rng: RefCell::new(PortableRng::new(0)) }
    }

    pub fn training(tape: &'t Tape<T>, seed: u64) -> Self {
        Self { tape, training: true, rng: RefCell::new(PortableRng::new(seed)) }
    }

    /// Elementwise dropout with inverted scaling; identity outside training.
    pub fn dropout(&self, x: &Var<T>, rate: f64) -> Result<Var<T>> {
        if !self.training || rate <= 0.0 {
            return Ok(x.clone());
        }
        let n = x.value().len();
        let mask = self.keep_mask(n, rate);
        self.tape.mul(x, &Var::constant(Tensor::from_vec(x.dims(), mask)))
    }

    /// Stochastic depth: drops the whole branch per sample (axis 0).
    pub fn drop_path(&self, x: &Var<T>, rate: f64) -> Result<Var<T>> {
        if !self.training || rate <= 0.0 {
            return Ok(x.clone());
        }
        let b = x.dims()[0];
        let mask = self.keep_mask(b, rate);
        let mut md = vec![1; x.dims().len()];
        md[0] = b;
        self.tape.mul(x, &Var::constant(Tensor::from_vec(&md, mask)))
    }

    fn keep_mask(&self, n: usize, rate: f64) -> Vec<T> {
        let keep = 1.0 - rate;
        let mut rng = self.rng.borrow_mut();
        (0..n)
            .map(|_| if keep > 0.0 && rng.uniform() < keep { T::of(1.0 / keep) } else { T::zero() })
            .collect()
    }
}

/// Initializers shared by all layers.
pub struct Init {
    rng: PortableRng,
}

pub const INIT_STD: f64 = 0.02;

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: PortableRng::new(seed) }
    }

    pub fn trunc_normal<T: Scalar>(&mut self, dims: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(dims, |_| T::of(self.rng.trunc_normal(std)))
    }

    /// U(−1/√fan_in, 1/√fan_in), the usual convolution default.
    pub fn fan_in_uniform<T: Scalar>(&mut self, dims: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(dims, |_| T::of(self.rng.uniform_range(-bound, bound)))
    }
}

/// Implements [`ParamTree`] and [`Bind`] for a struct whose leaves are all
/// `P` fields; `keep` lists plain fields copied through `bind`.
macro_rules! impl_leaf_params {
    ($name:ident { $($field:ident : $key:literal),* $(,)? } $(keep { $($extra:ident),* $(,)? })?) => {
        impl<P> $crate::params::ParamTree<P> for $name<P> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $( f($crate::params::join(prefix, $key), &self.$field); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
                $( f($crate::params::join(prefix, $key), &mut self.$field); )*
            }
        }
        impl<T: $crate::numerics::Scalar> $crate::params::Bind<T> for $name<$crate::numerics::Tensor<T>> {
            type Bound = $name<$crate::numerics::Var<T>>;
            fn bind(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &$crate::numerics::Tensor<T>) -> $crate::numerics::Var<T>,
            ) -> Self::Bound {
                $name {
                    $( $field: f(&$crate::params::join(prefix, $key), &self.$field), )*
                    $( $( $extra: self.$extra.clone(), )* )?
                }
            }
        }
    };
}
pub(crate) use impl_leaf_params;

/// Leaves on `tape` plus the (name, variable) list for reading gradients back.
pub fn bind_named<T: Scalar, B: Bind<T>>(tree: &B, tape: &Tape<T>) -> (B::Bound, Vec<(String, Var<T>)>) {
    let mut named = Vec::new();
    let bound = tree.bind("", &mut |name, t| {
        let v = tape.leaf(t.clone());
        named.push((name.to_string(), v.clone()));
        v
    });
    (bound, named)
}
