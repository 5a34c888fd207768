//! Two-operand Einstein-summation contractions.
//!
//! A contraction such as `bnmd,cmd->bcnm` is lowered onto batched matrix
//! products: indices shared by both operands and the output become batch
//! axes, indices shared only by the operands are summed, and the remaining
//! indices become the rows/columns of each product.

use super::{permute, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contraction {
    lhs: Vec<char>,
    rhs: Vec<char>,
    out: Vec<char>,
}

impl Contraction {
    /// Parses `"ab,bc->ac"`. Every index must appear in at least two of the
    /// three terms, and no term may repeat an index.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Contraction {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (inputs, out) = compact.split_once("->").ok_or_else(|| bad("missing `->`"))?;
        let (lhs, rhs) = inputs.split_once(',').ok_or_else(|| bad("expected two operands"))?;
        let term = |s: &str| -> Result<Vec<char>> {
            let chars: Vec<char> = s.chars().collect();
            if chars.iter().any(|c| !c.is_ascii_alphabetic()) {
                return Err(bad("indices must be ASCII letters"));
            }
            for (i, c) in chars.iter().enumerate() {
                if chars[..i].contains(c) {
                    return Err(bad(&format!("index `{c}` repeated within a term")));
                }
            }
            Ok(chars)
        };
        let c = Contraction {
            lhs: term(lhs)?,
            rhs: term(rhs)?,
            out: term(out)?,
        };
        for &i in c.lhs.iter().chain(&c.rhs).chain(&c.out) {
            let count = [&c.lhs, &c.rhs, &c.out].iter().filter(|t| t.contains(&i)).count();
            if count < 2 {
                return Err(bad(&format!("index `{i}` appears in only one term")));
            }
        }
        Ok(c)
    }

    /// Contraction giving the gradient of the left operand.
    pub(crate) fn lhs_grad(&self) -> Self {
        Contraction {
            lhs: self.out.clone(),
            rhs: self.rhs.clone(),
            out: self.lhs.clone(),
        }
    }

    /// Contraction giving the gradient of the right operand.
    pub(crate) fn rhs_grad(&self) -> Self {
        Contraction {
            lhs: self.lhs.clone(),
            rhs: self.out.clone(),
            out: self.rhs.clone(),
        }
    }

    fn spec(&self) -> String {
        let s = |v: &[char]| v.iter().collect::<String>();
        format!("{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

impl std::fmt::Display for Contraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.spec())
    }
}

/// Evaluates `spec` on raw tensors.
pub fn contract<T: Real>(spec: &Contraction, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = |reason: String| Error::Contraction {
        spec: spec.spec(),
        reason,
    };
    if a.rank() != spec.lhs.len() || b.rank() != spec.rhs.len() {
        return Err(mismatch(format!(
            "operand ranks {:?} and {:?} do not match the contraction",
            a.shape(),
            b.shape()
        )));
    }
    let extent = |i: char| -> Result<usize> {
        let da = spec.lhs.iter().position(|&c| c == i).map(|p| a.shape()[p]);
        let db = spec.rhs.iter().position(|&c| c == i).map(|p| b.shape()[p]);
        match (da, db) {
            (Some(x), Some(y)) if x != y => Err(mismatch(format!(
                "index `{i}` has extent {x} in {:?} but {y} in {:?}",
                a.shape(),
                b.shape()
            ))),
            (Some(x), _) | (None, Some(x)) => Ok(x),
            (None, None) => unreachable!("validated at parse"),
        }
    };

    let in_lhs = |c: &char| spec.lhs.contains(c);
    let in_rhs = |c: &char| spec.rhs.contains(c);
    let in_out = |c: &char| spec.out.contains(c);
    let batch: Vec<char> = spec.out.iter().copied().filter(|c| in_lhs(c) && in_rhs(c)).collect();
    let summed: Vec<char> = spec.lhs.iter().copied().filter(|c| in_rhs(c) && !in_out(c)).collect();
    let lhs_free: Vec<char> = spec.out.iter().copied().filter(|c| in_lhs(c) && !in_rhs(c)).collect();
    let rhs_free: Vec<char> = spec.out.iter().copied().filter(|c| in_rhs(c) && !in_lhs(c)).collect();

    let size = |idx: &[char]| -> Result<usize> { idx.iter().map(|&c| extent(c)).product() };
    let nb = size(&batch)?;
    let nk = size(&summed)?;
    let nm = size(&lhs_free)?;
    let nn = size(&rhs_free)?;

    let pos = |term: &[char], c: char| term.iter().position(|&x| x == c).unwrap();
    let lhs_perm: Vec<usize> = batch.iter().chain(&lhs_free).chain(&summed).map(|&c| pos(&spec.lhs, c)).collect();
    let rhs_perm: Vec<usize> = batch.iter().chain(&summed).chain(&rhs_free).map(|&c| pos(&spec.rhs, c)).collect();
    let a_p = permute(a.data(), a.shape(), &lhs_perm);
    let b_p = permute(b.data(), b.shape(), &rhs_perm);

    let mut tmp = vec![T::zero(); nb * nm * nn];
    for i in 0..nb {
        T::gemm(
            nm,
            nk,
            nn,
            &a_p[i * nm * nk..(i + 1) * nm * nk],
            (nk, 1),
            &b_p[i * nk * nn..(i + 1) * nk * nn],
            (nn, 1),
            T::zero(),
            &mut tmp[i * nm * nn..(i + 1) * nm * nn],
        );
    }

    // tmp is laid out as [batch.., lhs_free.., rhs_free..]
    let tmp_order: Vec<char> = batch.iter().chain(&lhs_free).chain(&rhs_free).copied().collect();
    let tmp_shape: Vec<usize> = tmp_order.iter().map(|&c| extent(c)).collect::<Result<_>>()?;
    let out_perm: Vec<usize> = spec.out.iter().map(|&c| pos(&tmp_order, c)).collect();
    let data = permute(&tmp, &tmp_shape, &out_perm);
    let out_shape: Vec<usize> = spec.out.iter().map(|&c| extent(c)).collect::<Result<_>>()?;
    Tensor::new(out_shape, data)
}
