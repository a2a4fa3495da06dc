//! Central finite differences against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DapeError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `None` checks them all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Euclidean norm over checked coordinates, tape side.
    pub tape_norm: f64,
    /// Euclidean norm over checked coordinates, finite-difference side.
    pub fd_norm: f64,
}

/// Compare tape gradients of the scalar `f` with central differences.
///
/// The error per coordinate is `|g_fd − g_tape| / max(1, |g_fd|, |g_tape|)`;
/// the report carries the maximum.
pub fn grad_check<S, F>(params: &[Tensor<S>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<S>]| -> Result<(Tape<S>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, tape_norm: 0.0, fd_norm: 0.0 };
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let tape_grad = grads.get_or_zeros(vars[pi], p);
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < p.len() => {
                let mut c = sample(&mut rng, p.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for ci in coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + S::c(opts.eps);
            let (t_plus, _, o_plus) = eval(&work)?;
            work[pi].data_mut()[ci] = orig - S::c(opts.eps);
            let (t_minus, _, o_minus) = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let fp = t_plus.value(o_plus).data()[0].as_f64();
            let fm = t_minus.value(o_minus).data()[0].as_f64();
            let g_fd = (fp - fm) / (2.0 * opts.eps);
            let g_tape = tape_grad.data()[ci].as_f64();
            if !g_fd.is_finite() || !g_tape.is_finite() {
                return Err(DapeError::Numeric(format!("non-finite gradient at param {pi} coord {ci}")));
            }
            let rel = (g_fd - g_tape).abs() / 1f64.max(g_fd.abs()).max(g_tape.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            report.coords_checked += 1;
            report.tape_norm += g_tape * g_tape;
            report.fd_norm += g_fd * g_fd;
        }
    }
    report.tape_norm = report.tape_norm.sqrt();
    report.fd_norm = report.fd_norm.sqrt();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.hadamard(v, v).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
        let rep = grad_check(
            &[x],
            |t, p| {
                let sq = t.hadamard(p[0], p[0])?;
                t.sum_all(sq)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x);
        let s = tape.row_softmax(v).unwrap();
        let total = tape.sum_all(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.get(v).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn every_op_passes_grad_check() {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let bias = Tensor::<f64>::uniform(&[1, 3], -1.0, 1.0, &mut r);
        let img = Tensor::<f64>::uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
        let ker = Tensor::<f64>::uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
        let temp = Tensor::<f64>::scalar(0.7);
        let rep = grad_check(
            &[a, b, bias, img, ker, temp],
            |t, p| {
                let ab = t.matmul(p[0], p[1])?;
                let ab = t.add_row(ab, p[2])?;
                let sm = t.row_softmax(ab)?;
                let tr = t.transpose(sm)?;
                let rl = t.relu(tr)?;
                let g = t.gather_rows(rl, &[2, 0, 2])?;
                let pooled = t.pool_rows(g, &[vec![0, 1], vec![2], vec![1, 2, 0]])?;
                let g = t.add(g, pooled)?;
                let gc = t.gather_cols(g, &[1, 2])?;
                let cat = t.concat_cols(&[gc, g])?;
                let cr = t.concat_rows(&[cat, cat])?;
                let nrm = t.l2_normalize_rows(cr)?;
                let div = t.div_scalar(nrm, p[5])?;
                let ce = t.cross_entropy(div, &[0, 1, 2, 3, 4, 0])?;
                let conv = t.conv2d(p[3], p[4], 3)?;
                let flat = t.reshape(conv, &[16, 2])?;
                let mr = t.mean_rows(flat)?;
                let sq = t.hadamard(mr, mr)?;
                let s2 = t.sum_all(sq)?;
                let diff = t.sub(ce, s2)?;
                let sc = t.scale(diff, 0.5)?;
                t.add(sc, s2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
