//! Joint class probability over instances of one object: the elementwise
//! product of their vectors, renormalised.

use thiserror::Error;

use crate::classify::ClassProbs;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no vectors to fuse")]
    Empty,
    #[error("vectors have different class counts ({0} vs {1})")]
    ClassMismatch(usize, usize),
    #[error("degenerate joint: the product has no mass left")]
    DegenerateJoint,
}

/// Products below this total are treated as annihilated.
pub const DEGENERATE_MASS: f64 = 1e-300;

/// Above these sizes the product is accumulated as a sum of logs.
const LOG_SPACE_CLASSES: usize = 100;
const LOG_SPACE_VECTORS: usize = 4;

pub fn joint_probability(ps: &[ClassProbs]) -> Result<ClassProbs, FusionError> {
    let first = ps.first().ok_or(FusionError::Empty)?;
    let classes = first.num_classes();
    if let Some(p) = ps.iter().find(|p| p.num_classes() != classes) {
        return Err(FusionError::ClassMismatch(classes, p.num_classes()));
    }
    if ps.len() == 1 {
        return Ok(first.clone());
    }

    let joint = if classes >= LOG_SPACE_CLASSES || ps.len() >= LOG_SPACE_VECTORS {
        let mut logs = vec![0.0f64; classes];
        for p in ps {
            for (acc, &v) in logs.iter_mut().zip(p.as_slice()) {
                // ln(0) = -inf marks an exact zero and stays sticky.
                *acc += v.ln();
            }
        }
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(FusionError::DegenerateJoint);
        }
        let mut out: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= sum);
        out
    } else {
        let mut prod = vec![1.0f64; classes];
        for p in ps {
            for (acc, &v) in prod.iter_mut().zip(p.as_slice()) {
                *acc *= v;
            }
        }
        let sum: f64 = prod.iter().sum();
        if sum < DEGENERATE_MASS {
            return Err(FusionError::DegenerateJoint);
        }
        prod.iter_mut().for_each(|v| *v /= sum);
        prod
    };
    Ok(ClassProbs::from_normalized_unchecked(joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> ClassProbs {
        ClassProbs::new(v.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        let p = probs(&[0.2, 0.3, 0.5]);
        assert_eq!(joint_probability(std::slice::from_ref(&p)).unwrap(), p);

        let half = probs(&[0.5, 0.5]);
        assert_eq!(joint_probability(&[half.clone(), half]).unwrap().as_slice(), &[0.5, 0.5]);

        // 0.8² = 0.64, 0.2² = 0.04, total 0.68.
        let q = probs(&[0.8, 0.2]);
        let j = joint_probability(&[q.clone(), q]).unwrap();
        assert!((j.as_slice()[0] - 0.64 / 0.68).abs() < 1e-12);
        assert!((j.as_slice()[0] - 0.9412).abs() < 1e-4 && (j.as_slice()[1] - 0.0588).abs() < 1e-4);

        let a = probs(&[1.0, 0.0]);
        let b = probs(&[0.0, 1.0]);
        assert_eq!(joint_probability(&[a, b]), Err(FusionError::DegenerateJoint));
    }

    #[test]
    fn errors() {
        assert_eq!(joint_probability(&[]), Err(FusionError::Empty));
        assert_eq!(
            joint_probability(&[probs(&[1.0]), probs(&[0.5, 0.5])]),
            Err(FusionError::ClassMismatch(1, 2))
        );
    }

    #[test]
    fn log_space_survives_underflow() {
        // 1000 classes, ten instances: linear products would hit 1e-300.
        let mut v = vec![1e-40 / 998.0; 1000];
        v[3] = 0.5;
        v[4] = 0.5 - 1e-40;
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        let p = probs(&v);
        let j = joint_probability(&vec![p; 10]).unwrap();
        assert!((j.as_slice()[3] - 0.5).abs() < 1e-9);
        assert!((j.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zeros_stay_zero() {
        let mut v = vec![0.001; 1000];
        v[0] = 0.0;
        v[1] = 1.0 - 0.001 * 998.0;
        let p = probs(&v);
        let j = joint_probability(&[p.clone(), p]).unwrap();
        assert_eq!(j.as_slice()[0], 0.0);
    }

    #[test]
    fn one_hot_idempotent() {
        let h = ClassProbs::one_hot(1000, 42);
        assert_eq!(joint_probability(&[h.clone(), h.clone(), h.clone()]).unwrap(), h);
    }

    fn arb_probs(n: usize) -> impl Strategy<Value = ClassProbs> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| {
                let v: Vec<f64> = v.iter().map(|x| x / s).collect();
                ClassProbs::from_adapter(v).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn sharpening_and_argmax(p in arb_probs(7)) {
            let j = joint_probability(&[p.clone(), p.clone()]).unwrap();
            prop_assert!(j.max() >= p.max() - 1e-12);
            let top = p.max();
            let ties: Vec<usize> = (0..7).filter(|&i| p.as_slice()[i] == top).collect();
            prop_assert!(ties.contains(&j.argmax()));
            prop_assert!((j.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn order_invariant(a in arb_probs(5), b in arb_probs(5), c in arb_probs(5)) {
            let x = joint_probability(&[a.clone(), b.clone(), c.clone()]);
            let y = joint_probability(&[c, a, b]);
            match (x, y) {
                (Ok(x), Ok(y)) => {
                    for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                        prop_assert!((u - v).abs() < 1e-12);
                    }
                }
                (Err(e1), Err(e2)) => prop_assert_eq!(e1, e2),
                _ => prop_assert!(false, "one permutation failed"),
            }
        }
    }
}
