use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to round-off compare on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

/// The worst element seen by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ParamError>,
    pub elements_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape's gradients of `f` against central differences.
///
/// `f` records a scalar loss on the tape from the parameter leaves it is
/// given. It must be deterministic: two evaluations at the same point that
/// disagree make the check invalid.
pub fn grad_check<F>(
    names: &[String],
    params: &[Tensor],
    mut f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidCheck(format!(
            "eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    if names.len() != params.len() {
        return Err(Error::Contract("one name per parameter required".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item()?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf grads are populated").to_vec())
        .collect();

    let again = eval(&mut f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::InvalidCheck(format!(
            "function is not deterministic ({base} vs {again}); disable dropout"
        )));
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
        tol,
        passed: true,
    };
    for (p, (name, grads)) in names.iter().zip(&analytic).enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&mut f, &work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&mut f, &work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            report.elements_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(ParamError {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

fn eval<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_passes() {
        let report = grad_check(
            &["w".into()],
            &[Tensor::scalar(3.0)],
            |t, v| t.mul(v[0], v[0]),
            1e-5,
            1e-4,
        )
        .unwrap();
        let w = report.worst.unwrap();
        assert_eq!(w.analytic, 6.0);
        assert!((w.numeric - 6.0).abs() < 1e-7);
        assert!(report.passed);
    }

    #[test]
    fn two_layer_mlp_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[6, 4]);
        let labels = [0usize, 2, 1, 2, 0, 1];
        let params = vec![
            random(&mut rng, &[4, 5]),
            random(&mut rng, &[5]),
            random(&mut rng, &[5, 3]),
            random(&mut rng, &[3]),
        ];
        let names: Vec<String> = ["w1", "b1", "w2", "b2"].map(String::from).to_vec();
        let report = grad_check(
            &names,
            &params,
            |t, v| {
                let x = t.constant(x.clone());
                let h = t.matmul(x, v[0])?;
                let h = t.add(h, v[1])?;
                let h = t.relu(h);
                let o = t.matmul(h, v[2])?;
                let o = t.add(o, v[3])?;
                t.cross_entropy(o, &labels, None)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.elements_checked, 20 + 5 + 15 + 3);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&mut rng, &[2, 3, 4]),
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[4]),
            random(&mut rng, &[4]),
            random(&mut rng, &[2, 3, 4]),
            random(&mut rng, &[3, 2]),
        ];
        let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
        let report = grad_check(
            &names,
            &params,
            |t, v| {
                let g = t.layer_norm(v[0], v[2], v[3], 1e-5)?;
                let g = t.sub(g, v[4])?;
                let gt = t.transpose_last(v[4])?;
                let s = t.matmul(g, gt)?;
                let s = t.scale(s, 0.5);
                let s = t.softmax_rows(s);
                let h = t.matmul(s, v[0])?;
                let h = t.mul(h, v[2])?;
                let h = t.matmul(h, v[1])?;
                let h = t.pad_last(h, 5)?;
                let c = t.concat_last(&[h, v[4]])?;
                let m = t.mean_tokens(c)?;
                let r = t.reshape(m, vec![18])?;
                let q = t.slice_rows(v[5], 2)?;
                let qs = t.sum(q);
                let l = t.relu(r);
                let l = t.sum(l);
                let l = t.mul(l, qs)?;
                Ok(l)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn nondeterministic_function_is_invalid() {
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(1));
        let err = grad_check(
            &["w".into()],
            &[Tensor::vector((1..=32).map(f64::from).collect())],
            |t, v| {
                let mask: Vec<f64> = (0..32)
                    .map(|_| if rng.borrow_mut().gen_bool(0.5) { 2.0 } else { 0.0 })
                    .collect();
                let d = t.mask(v[0], mask)?;
                Ok(t.sum(d))
            },
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidCheck(_)));
    }

    #[test]
    fn eps_out_of_range_is_invalid() {
        let r = grad_check(&["w".into()], &[Tensor::scalar(1.0)], |t, v| Ok(t.sum(v[0])), 1e-2, 1e-4);
        assert!(matches!(r, Err(Error::InvalidCheck(_))));
    }
}
