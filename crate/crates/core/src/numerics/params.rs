//! Named parameter trees.
//!
//! Model structures are generic over their leaf type `P`: with
//! `P = Tensor<T>` they hold concrete values, and mapping every leaf through
//! [`Tape::param`] yields the same structure with `P = Var`, ready for a
//! differentiable forward pass. Leaf names are dotted paths such as
//! `gabor.0.weight`.

use std::collections::BTreeMap;

use crate::error::{ensure, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::{Scalar, Tensor};

pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        let _ = self.map_params(prefix, &mut |n, p| f(n, p));
    }
}

/// Joins a dotted parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> ParamTree<P> for Vec<P> {
    type Mapped<Q> = Vec<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Vec<Q> {
        self.iter()
            .enumerate()
            .map(|(i, p)| f(&join(prefix, &i.to_string()), p))
            .collect()
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, p) in self.iter_mut().enumerate() {
            f(&join(prefix, &i.to_string()), p);
        }
    }
}

/// Registers every leaf as a trainable parameter on `tape`.
pub fn register<T: Scalar, M: ParamTree<Tensor<T>>>(m: &M, prefix: &str, tape: &mut Tape<T>) -> M::Mapped<Var> {
    m.map_params(prefix, &mut |name, t| tape.param(name, t.clone()))
}

/// Places every leaf on `tape` as a constant (no gradient).
pub fn constants<T: Scalar, M: ParamTree<Tensor<T>>>(m: &M, tape: &mut Tape<T>) -> M::Mapped<Var> {
    m.map_params("", &mut |_, t| tape.constant(t.clone()))
}

/// `(name, value)` pairs in traversal order.
pub fn named_tensors<T: Scalar, M: ParamTree<Tensor<T>>>(m: &M, prefix: &str) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    m.visit_params(prefix, &mut |n, t| out.push((n.to_owned(), t.clone())));
    out
}

pub fn param_count<T: Scalar, M: ParamTree<Tensor<T>>>(m: &M) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, t| n += t.len());
    n
}

/// Overwrites leaves from `(name, tensor)` pairs; every leaf must be present
/// with its current shape.
pub fn load_named<T: Scalar, M: ParamTree<Tensor<T>>>(
    m: &mut M,
    prefix: &str,
    values: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let mut problem = None;
    m.visit_params_mut(prefix, &mut |name, t| match values.get(name) {
        Some(v) if v.shape() == t.shape() => *t = v.clone(),
        Some(v) => {
            problem.get_or_insert(format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape()));
        }
        None => {
            problem.get_or_insert(format!("missing parameter {name}"));
        }
    });
    ensure!(problem.is_none(), "{}", problem.unwrap_or_default());
    Ok(())
}

/// Central-difference estimate `(f(p + h) − f(p − h)) / 2h` of the gradient
/// of `loss` with respect to every scalar in `params`.
pub fn finite_difference_grad<T, M, F>(loss: F, params: &M, step: T) -> Result<Gradients<T>>
where
    T: Scalar,
    M: ParamTree<Tensor<T>> + Clone,
    F: Fn(&M) -> Result<T>,
{
    ensure!(step > T::zero(), "finite difference step must be positive");
    let mut work = params.clone();
    let leaves = named_tensors(params, "");
    let mut grads = Gradients::new();
    let two_h = step + step;
    for (name, value) in leaves {
        let mut g = Tensor::zeros(value.shape().to_vec());
        for i in 0..value.len() {
            let orig = value.data()[i];
            set_element(&mut work, &name, i, orig + step);
            let plus = loss(&work)?;
            set_element(&mut work, &name, i, orig - step);
            let minus = loss(&work)?;
            set_element(&mut work, &name, i, orig);
            g.data_mut()[i] = (plus - minus) / two_h;
        }
        grads.insert(name, g);
    }
    Ok(grads)
}

fn set_element<T: Scalar, M: ParamTree<Tensor<T>>>(m: &mut M, name: &str, i: usize, value: T) {
    m.visit_params_mut("", &mut |n, t| {
        if n == name {
            t.data_mut()[i] = value;
        }
    });
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` over all shared
/// entries, together with the parameter name where it occurs.
pub fn max_relative_error<T: Scalar>(a: &Gradients<T>, b: &Gradients<T>, floor: T) -> Result<(T, String)> {
    ensure!(a.len() == b.len(), "gradient maps cover different parameters");
    let mut worst = (T::zero(), String::new());
    for (name, ga) in a {
        let Some(gb) = b.get(name) else {
            return Err(crate::Error::contract(format!("missing gradient for {name}")));
        };
        ensure!(ga.shape() == gb.shape(), "{name}: gradient shapes differ");
        for (&x, &y) in ga.data().iter().zip(gb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            let err = (x - y).abs() / denom;
            if err > worst.0 || err.is_nan() {
                worst = (err, name.clone());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Pair<P> {
        a: P,
        b: P,
    }

    impl<P> ParamTree<P> for Pair<P> {
        type Mapped<Q> = Pair<Q>;
        fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Pair<Q> {
            Pair {
                a: f(&join(prefix, "a"), &self.a),
                b: f(&join(prefix, "b"), &self.b),
            }
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
            f(&join(prefix, "a"), &mut self.a);
            f(&join(prefix, "b"), &mut self.b);
        }
    }

    #[test]
    fn cubic_derivative() {
        let p = vec![Tensor::scalar(2.0f64)];
        let g = finite_difference_grad(|p: &Vec<Tensor<f64>>| Ok(p[0].data()[0].powi(3)), &p, 1e-4).unwrap();
        assert!((g["0"].data()[0] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn abs_at_kink_is_symmetric_zero() {
        let p = vec![Tensor::scalar(0.0f64)];
        let g = finite_difference_grad(|p: &Vec<Tensor<f64>>| Ok(p[0].data()[0].abs()), &p, 1e-4).unwrap();
        assert_eq!(g["0"].data()[0], 0.0);
    }

    #[test]
    fn step_must_be_positive() {
        let p = vec![Tensor::scalar(0.0f64)];
        assert!(finite_difference_grad(|_: &Vec<Tensor<f64>>| Ok(0.0), &p, 0.0).is_err());
    }

    #[test]
    fn tape_and_finite_differences_agree_on_composite() {
        let p = Pair {
            a: Tensor::from_f64([3], &[0.3, -1.2, 2.0]).unwrap(),
            b: Tensor::from_f64([3], &[1.1, 0.4, -0.7]).unwrap(),
        };
        let eval = |p: &Pair<Tensor<f64>>, tape: &mut Tape<f64>| -> Result<Var> {
            let v = register(p, "", tape);
            let s = tape.sin(v.a);
            let e = tape.exp(v.b);
            let m = tape.mul(s, e)?;
            let q = tape.square(m);
            let sp = tape.softplus(v.b);
            let r = tape.recip(sp);
            let t = tape.add(q, r)?;
            Ok(tape.sum(t))
        };
        let mut tape = Tape::new();
        let out = eval(&p, &mut tape).unwrap();
        let analytic = tape.backward(out).unwrap().clone();
        let numeric = finite_difference_grad(
            |p| {
                let mut t = Tape::new();
                let o = eval(p, &mut t)?;
                t.value(o).item()
            },
            &p,
            1e-5,
        )
        .unwrap();
        let (err, _) = max_relative_error(&analytic, &numeric, 1e-8).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut p = Pair {
            a: Tensor::<f64>::zeros([2]),
            b: Tensor::<f64>::zeros([1]),
        };
        let mut values: BTreeMap<String, Tensor<f64>> = named_tensors(&p, "").into_iter().collect();
        values.insert("a".into(), Tensor::ones([2]));
        load_named(&mut p, "", &values).unwrap();
        assert_eq!(p.a.data(), &[1.0, 1.0]);
        values.insert("b".into(), Tensor::ones([3]));
        assert!(load_named(&mut p, "", &values).is_err());
    }
}
