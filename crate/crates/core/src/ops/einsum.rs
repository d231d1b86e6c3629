//! Two-operand index contraction with an explicit output, e.g.
//! `"cdhw,d->chw"`. Indices absent from the output are summed.

use crate::error::{Result, TensorError};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    pub lhs: Vec<char>,
    pub rhs: Vec<char>,
    pub out: Vec<char>,
}

impl ContractSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |msg: String| TensorError::InvalidArgument {
            op: "contract",
            msg,
        };
        let (inputs, out) = spec
            .split_once("->")
            .ok_or_else(|| bad(format!("'{spec}' has no '->'")))?;
        let (lhs, rhs) = inputs
            .split_once(',')
            .ok_or_else(|| bad(format!("'{spec}' needs two operands")))?;
        let letters = |s: &str| -> Result<Vec<char>> {
            let v: Vec<char> = s.trim().chars().collect();
            for (i, c) in v.iter().enumerate() {
                if !c.is_ascii_lowercase() {
                    return Err(bad(format!("index '{c}' is not a lowercase letter")));
                }
                if v[..i].contains(c) {
                    return Err(bad(format!("index '{c}' repeated within one term")));
                }
            }
            Ok(v)
        };
        let parsed = Self {
            lhs: letters(lhs)?,
            rhs: letters(rhs)?,
            out: letters(out)?,
        };
        for c in &parsed.out {
            if !parsed.lhs.contains(c) && !parsed.rhs.contains(c) {
                return Err(bad(format!("output index '{c}' appears in no operand")));
            }
        }
        Ok(parsed)
    }

    /// Letter order used for iteration: output indices, then summed ones.
    fn letters(&self) -> Vec<char> {
        let mut all = self.out.clone();
        for c in self.lhs.iter().chain(&self.rhs) {
            if !all.contains(c) {
                all.push(*c);
            }
        }
        all
    }
}

pub struct ContractPlan {
    extents: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
    out_strides: Vec<usize>,
    pub out_shape: Vec<usize>,
}

fn term_strides(term: &[char], shape: &[usize], letters: &[char]) -> Vec<usize> {
    let mut per_pos = vec![0; term.len()];
    let mut acc = 1;
    for i in (0..term.len()).rev() {
        per_pos[i] = acc;
        acc *= shape[i];
    }
    letters
        .iter()
        .map(|c| term.iter().position(|t| t == c).map_or(0, |p| per_pos[p]))
        .collect()
}

impl ContractPlan {
    pub fn new(spec: &ContractSpec, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        for (term, shape) in [(&spec.lhs, lhs), (&spec.rhs, rhs)] {
            if term.len() != shape.len() {
                return Err(TensorError::InvalidArgument {
                    op: "contract",
                    msg: format!(
                        "term '{}' has {} indices but operand has rank {}",
                        term.iter().collect::<String>(),
                        term.len(),
                        shape.len()
                    ),
                });
            }
        }
        let letters = spec.letters();
        let mut extents = Vec::with_capacity(letters.len());
        for c in &letters {
            let l = spec.lhs.iter().position(|t| t == c).map(|p| lhs[p]);
            let r = spec.rhs.iter().position(|t| t == c).map(|p| rhs[p]);
            let e = match (l, r) {
                (Some(a), Some(b)) if a != b => {
                    return Err(TensorError::IndexExtent {
                        index: *c,
                        left: a,
                        right: b,
                    })
                }
                (Some(a), _) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("letter drawn from an operand"),
            };
            extents.push(e);
        }
        let out_shape: Vec<usize> = extents[..spec.out.len()].to_vec();
        Ok(Self {
            lhs_strides: term_strides(&spec.lhs, lhs, &letters),
            rhs_strides: term_strides(&spec.rhs, rhs, &letters),
            out_strides: term_strides(&spec.out, &out_shape, &letters),
            extents,
            out_shape,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.extents.len();
        if self.extents.contains(&0) {
            return;
        }
        if n == 0 {
            f(0, 0, 0);
            return;
        }
        let mut idx = vec![0usize; n];
        let (mut a, mut b, mut o) = (0usize, 0usize, 0usize);
        let last = n - 1;
        let (sa, sb, so) = (
            self.lhs_strides[last],
            self.rhs_strides[last],
            self.out_strides[last],
        );
        loop {
            let (mut ia, mut ib, mut io) = (a, b, o);
            for _ in 0..self.extents[last] {
                f(ia, ib, io);
                ia += sa;
                ib += sb;
                io += so;
            }
            // advance the odometer over all but the innermost index
            let mut k = last;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                idx[k] += 1;
                a += self.lhs_strides[k];
                b += self.rhs_strides[k];
                o += self.out_strides[k];
                if idx[k] < self.extents[k] {
                    break;
                }
                a -= self.lhs_strides[k] * idx[k];
                b -= self.rhs_strides[k] * idx[k];
                o -= self.out_strides[k] * idx[k];
                idx[k] = 0;
            }
        }
    }

    pub fn forward<T: Float>(&self, lhs: &[T], rhs: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_shape.iter().product()];
        self.for_each(|a, b, o| out[o] += lhs[a] * rhs[b]);
        out
    }

    pub fn backward<T: Float>(
        &self,
        lhs: &[T],
        rhs: &[T],
        dy: &[T],
        need: [bool; 2],
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let mut dl = need[0].then(|| vec![T::zero(); lhs.len()]);
        let mut dr = need[1].then(|| vec![T::zero(); rhs.len()]);
        self.for_each(|a, b, o| {
            let g = dy[o];
            if let Some(d) = dl.as_mut() {
                d[a] += g * rhs[b];
            }
            if let Some(d) = dr.as_mut() {
                d[b] += g * lhs[a];
            }
        });
        (dl, dr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_product() {
        let spec = ContractSpec::parse("ij,jk->ik").unwrap();
        let plan = ContractPlan::new(&spec, &[2, 3], &[3, 2]).unwrap();
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(plan.forward(&a, &b), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn outer_product_and_full_sum() {
        let outer = ContractSpec::parse("i,j->ij").unwrap();
        let plan = ContractPlan::new(&outer, &[2], &[3]).unwrap();
        assert_eq!(
            plan.forward(&[1.0f64, 2.0], &[1.0, 10.0, 100.0]),
            vec![1.0, 10.0, 100.0, 2.0, 20.0, 200.0]
        );
        let dot = ContractSpec::parse("i,i->").unwrap();
        let plan = ContractPlan::new(&dot, &[3], &[3]).unwrap();
        assert_eq!(
            plan.forward(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]),
            vec![32.0]
        );
    }

    #[test]
    fn extent_mismatch_names_the_index() {
        let spec = ContractSpec::parse("cd,d->c").unwrap();
        let err = ContractPlan::new(&spec, &[2, 3], &[4]).err().unwrap();
        assert_eq!(
            err,
            TensorError::IndexExtent {
                index: 'd',
                left: 3,
                right: 4
            }
        );
    }

    #[test]
    fn malformed_specs_are_rejected() {
        for s in ["ab,b", "ab->a", "aa,b->a", "ab,b->z", "aB,b->a"] {
            assert!(ContractSpec::parse(s).is_err(), "{s}");
        }
    }
}
