//! Central finite-difference verification of tape gradients.
//!
//! The checker differentiates the recorded computation analytically once,
//! then re-evaluates the same builder with every parameter entry nudged by
//! ±h. One checker therefore certifies any composite built from tape
//! primitives, up to and including the full model loss.

use crate::error::{Error, Result};
use crate::tape::{ParamSet, Tape, ValueId};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over parameter entries of |analytic - cd| / max(|analytic|, |cd|, 1e-8)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences with step `h`, over every entry of every parameter.
///
/// `build` must be a pure function of the parameter values. Inputs should sit
/// away from relu kinks and clamp boundaries, where the derivative jumps.
pub fn grad_check<F, B>(params: &mut ParamSet<F>, build: B, h: f64) -> Result<GradCheckReport>
where
    F: Real,
    B: Fn(&ParamSet<F>, &mut Tape<F>) -> Result<ValueId>,
{
    let eval = |params: &ParamSet<F>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(params, &mut tape)?;
        let v = tape.value(loss).item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| tape.param_grad(params, id).data().iter().map(|v| v.as_f64()).collect())
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        for j in 0..params.get(*id).len() {
            let orig = params.get(*id).data()[j];
            params.get_mut(*id).data_mut()[j] = F::of(orig.as_f64() + h);
            let up = eval(params)?;
            params.get_mut(*id).data_mut()[j] = F::of(orig.as_f64() - h);
            let down = eval(params)?;
            params.get_mut(*id).data_mut()[j] = orig;

            let cd = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(*id).to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn vector_param(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::vector((0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn matrix_param(rng: &mut StdRng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_has_exact_derivative() {
        let mut params = ParamSet::new();
        let p = params.add("theta", Tensor::vector(vec![3.0f64]));
        let report = grad_check(
            &mut params,
            |params, tape| {
                let x = tape.param(params, p);
                tape.dot(x, x)
            },
            1e-5,
        )
        .unwrap();
        // analytic derivative 6
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn softmax_weighted_sum_chain() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let e = params.add("scores", vector_param(&mut rng, 5, -2.0, 2.0));
        let w = params.add("values", vector_param(&mut rng, 5, -1.0, 1.0));
        let report = grad_check(
            &mut params,
            |params, tape| {
                let eid = tape.param(params, e);
                let wid = tape.param(params, w);
                let att = tape.masked_softmax(eid, &[true, true, false, true, true])?;
                tape.dot(att, wid)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn rejects_non_finite_objectives() {
        let mut params = ParamSet::new();
        let p = params.add("theta", Tensor::vector(vec![0.0f64]));
        let err = grad_check(
            &mut params,
            |params, tape| {
                let x = tape.param(params, p);
                Ok(tape.ln(x))
            },
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let w = params.add("w", matrix_param(&mut rng, 5, 4));
        let x = params.add("x", vector_param(&mut rng, 4, -1.0, 1.0));
        let report = grad_check(
            &mut params,
            |params, tape| {
                let wid = tape.param(params, w);
                let xid = tape.param(params, x);
                let y = tape.affine(wid, xid, None)?;
                Ok(tape.sum(y))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn tanh_gradient_at_0p7_matches_central_difference() {
        let mut params = ParamSet::new();
        let p = params.add("x", Tensor::vector(vec![0.7f64]));
        let report = grad_check(
            &mut params,
            |params, tape| {
                let x = tape.param(params, p);
                let t = tape.tanh(x);
                Ok(tape.sum(t))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    /// Every primitive, randomized inputs, 100 trials.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(20240915);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let report = match trial % 14 {
                0 => check_matvec(&mut rng),
                1 => check_matvec_t(&mut rng),
                2 => check_matmul(&mut rng),
                3 => check_relu(&mut rng),
                4 => check_tanh_sigmoid(&mut rng),
                5 => check_masked_softmax(&mut rng),
                6 => check_l2_normalize(&mut rng),
                7 => check_l2_normalize_rows(&mut rng),
                8 => check_concat_slice(&mut rng),
                9 => check_scale_div(&mut rng),
                10 => check_dot_sum_addn(&mut rng),
                11 => check_ln_clamp(&mut rng),
                12 => check_mul_const(&mut rng),
                _ => check_stack_rows(&mut rng),
            };
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    /// Random linear functional so symmetric gradient errors cannot cancel.
    fn probe(
        tape: &mut Tape<f64>,
        out: ValueId,
        rng_vals: &[f64],
    ) -> crate::error::Result<ValueId> {
        let c = tape.constant(Tensor::vector(rng_vals.to_vec()));
        let flat_len = tape.value(out).len();
        let flat = tape.slice(out, 0, flat_len)?;
        tape.dot(flat, c)
    }

    fn probe_vals(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn check_matvec(rng: &mut StdRng) -> GradCheckReport {
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mut params = ParamSet::new();
        let w = params.add("w", matrix_param(rng, m, n));
        let x = params.add("x", vector_param(rng, n, -1.0, 1.0));
        let pv = probe_vals(rng, m);
        grad_check(
            &mut params,
            move |params, tape| {
                let wid = tape.param(params, w);
                let xid = tape.param(params, x);
                let y = tape.matvec(wid, xid)?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_matvec_t(rng: &mut StdRng) -> GradCheckReport {
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mut params = ParamSet::new();
        let w = params.add("w", matrix_param(rng, m, n));
        let x = params.add("x", vector_param(rng, m, -1.0, 1.0));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let wid = tape.param(params, w);
                let xid = tape.param(params, x);
                let y = tape.matvec_t(wid, xid)?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_matmul(rng: &mut StdRng) -> GradCheckReport {
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut params = ParamSet::new();
        let a = params.add("a", matrix_param(rng, m, k));
        let b = params.add("b", matrix_param(rng, k, n));
        let pv = probe_vals(rng, m * n);
        grad_check(
            &mut params,
            move |params, tape| {
                let aid = tape.param(params, a);
                let bid = tape.param(params, b);
                let y = tape.matmul(aid, bid)?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_relu(rng: &mut StdRng) -> GradCheckReport {
        // Inputs away from the kink at zero.
        let n = rng.gen_range(1..6);
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.01..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::vector(data));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let y = tape.relu(xid);
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_tanh_sigmoid(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(1..6);
        let mut params = ParamSet::new();
        let x = params.add("x", vector_param(rng, n, -2.0, 2.0));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let t = tape.tanh(xid);
                let s = tape.sigmoid(t);
                probe(tape, s, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_masked_softmax(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(2..7);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let mut params = ParamSet::new();
        let x = params.add("x", vector_param(rng, n, -3.0, 3.0));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let y = tape.masked_softmax(xid, &mask)?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_l2_normalize(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(1..6);
        let mut params = ParamSet::new();
        let x = params.add("x", vector_param(rng, n, 0.2, 1.5));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let y = tape.l2_normalize(xid);
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_l2_normalize_rows(rng: &mut StdRng) -> GradCheckReport {
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let mut params = ParamSet::new();
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(0.2..1.5)).collect();
        let x = params.add("x", Tensor::matrix(r, c, data).unwrap());
        let pv = probe_vals(rng, r * c);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let y = tape.l2_normalize_rows(xid)?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_concat_slice(rng: &mut StdRng) -> GradCheckReport {
        let mut params = ParamSet::new();
        let a = params.add("a", vector_param(rng, 3, -1.0, 1.0));
        let b = params.add("b", vector_param(rng, 2, -1.0, 1.0));
        let pv = probe_vals(rng, 3);
        grad_check(
            &mut params,
            move |params, tape| {
                let aid = tape.param(params, a);
                let bid = tape.param(params, b);
                let c = tape.concat(&[aid, bid]);
                let s = tape.slice(c, 1, 3)?;
                probe(tape, s, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_scale_div(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(1..5);
        let mut params = ParamSet::new();
        let x = params.add("x", vector_param(rng, n, -1.0, 1.0));
        let s = params.add("s", vector_param(rng, 1, 0.5, 2.0));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let sid = tape.param(params, s);
                let scaled = tape.scale_by(xid, sid)?;
                let divided = tape.div_by(scaled, sid)?;
                let shifted = tape.add_scalar(divided, sid)?;
                let again = tape.scale_by(shifted, sid)?;
                probe(tape, again, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_dot_sum_addn(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(1..5);
        let mut params = ParamSet::new();
        let a = params.add("a", vector_param(rng, n, -1.0, 1.0));
        let b = params.add("b", vector_param(rng, n, -1.0, 1.0));
        grad_check(
            &mut params,
            move |params, tape| {
                let aid = tape.param(params, a);
                let bid = tape.param(params, b);
                let s = tape.add_n(&[aid, bid, aid])?;
                let d = tape.dot(s, bid)?;
                let t = tape.sum(s);
                tape.add_n(&[d, t])
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_ln_clamp(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(1..5);
        let mut params = ParamSet::new();
        // Away from the clamp boundaries at 0.2 and 3.0.
        let x = params.add("x", vector_param(rng, n, 0.5, 2.0));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let c = tape.clamp(xid, 0.2, 3.0);
                let l = tape.ln(c);
                probe(tape, l, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_mul_const(rng: &mut StdRng) -> GradCheckReport {
        let n = rng.gen_range(1..5);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut params = ParamSet::new();
        let x = params.add("x", vector_param(rng, n, -1.0, 1.0));
        let pv = probe_vals(rng, n);
        grad_check(
            &mut params,
            move |params, tape| {
                let xid = tape.param(params, x);
                let y = tape.mul_const(xid, weights.clone())?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }

    fn check_stack_rows(rng: &mut StdRng) -> GradCheckReport {
        let c = rng.gen_range(1..4);
        let mut params = ParamSet::new();
        let a = params.add("a", vector_param(rng, c, -1.0, 1.0));
        let b = params.add("b", vector_param(rng, c, -1.0, 1.0));
        let pv = probe_vals(rng, 2);
        grad_check(
            &mut params,
            move |params, tape| {
                let aid = tape.param(params, a);
                let bid = tape.param(params, b);
                let m = tape.stack_rows(&[aid, bid])?;
                let v = tape.param(params, a);
                let y = tape.matvec(m, v)?;
                probe(tape, y, &pv)
            },
            1e-6,
        )
        .unwrap()
    }
}
