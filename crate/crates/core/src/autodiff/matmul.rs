use super::Var;
use crate::error::{dim_err, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

/// Batch layout of a matmul: `a` is `[batch.., m, k]`, `b` is `[batch.., k, n]`
/// or a plain `[k, n]` shared by every batch entry (and symmetrically for `a`).
struct Plan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err!("matmul needs rank ≥ 2 operands, got {a:?} × {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions differ: {a:?} × {b:?}"));
    }
    let (a_lead, b_lead) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let lead = match (a_lead.is_empty(), b_lead.is_empty()) {
        (_, true) => a_lead,
        (true, false) => b_lead,
        (false, false) if a_lead == b_lead => a_lead,
        _ => return Err(dim_err!("matmul batch dimensions differ: {a:?} × {b:?}")),
    };
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, n]);
    Ok(Plan {
        batch: lead.iter().product(),
        m,
        k,
        n,
        a_batched: !a_lead.is_empty(),
        b_batched: !b_lead.is_empty(),
        out_shape,
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batched matrix product over the last two axes.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let p = plan(a.shape(), b.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let a_step = if p.a_batched { m * k } else { 0 };
        let b_step = if p.b_batched { k * n } else { 0 };
        let mut out = vec![T::zero(); p.batch * m * n];
        for i in 0..p.batch {
            gemm_nn(m, n, k, &a.data()[i * a_step..], &b.data()[i * b_step..], &mut out[i * m * n..(i + 1) * m * n]);
        }
        let out = Tensor::from_parts(p.out_shape.clone(), out);
        Ok(self.tape.push(out, &[self, other], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut ga = vec![T::zero(); a.numel()];
                for i in 0..p.batch {
                    // dA = dC · Bᵀ
                    gemm_nt(
                        m,
                        k,
                        n,
                        &gd[i * m * n..],
                        &b.data()[i * b_step..],
                        &mut ga[i * a_step..i * a_step + m * k],
                    );
                }
                Tensor::from_parts(a.shape().to_vec(), ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![T::zero(); b.numel()];
                for i in 0..p.batch {
                    // dB = Aᵀ · dC
                    gemm_tn(
                        k,
                        n,
                        m,
                        &a.data()[i * a_step..],
                        &gd[i * m * n..],
                        &mut gb[i * b_step..i * b_step + k * n],
                    );
                }
                Tensor::from_parts(b.shape().to_vec(), gb)
            });
            vec![ga, gb]
        }))
    }

    /// `self · weight + bias` where `bias` matches the last output axis.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }
}
