//! Hierarchically named parameter access and initialization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that owns learnable tensors addressable by dotted names such as
/// `encoder.blocks.0.attn.qkv.weight`.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((String::from(n), t)));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn zero_all(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.all_finite());
        ok
    }

    /// `self += other` for two structurally identical parameter sets.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named_parameters();
        let mut i = 0;
        self.visit_mut("", &mut |name, t| {
            debug_assert_eq!(name, src[i].0);
            t.add_assign(src[i].1);
            i += 1;
        });
    }

    fn scale_all(&mut self, s: T) {
        self.visit_mut("", &mut |_, t| t.scale(s));
    }

    /// Flattened copy of every parameter value in visit order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.as_slice()));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal samples with standard deviation `std`, redrawn outside ±2 std.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}
