//! Central finite-difference verification of analytic gradients.
//!
//! Always runs in f64: the step (default 1e-5) is far below anything f32
//! arithmetic can resolve.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Cap on checked coordinates across all tensors; 0 checks every one.
    pub max_coords: usize,
    /// Seed for coordinate subsampling when capped.
    pub seed: u64,
    /// Floor on the relative-error denominator, guarding near-zero gradients
    /// against finite-difference noise.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            max_coords: 0,
            seed: 0,
            denom_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorstCoord {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub pass: bool,
    pub worst: Option<WorstCoord>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max rel err {:.3e} over {} coords (tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.coords_checked,
            self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst tensor {} coord {}: analytic {:.6e} vs numeric {:.6e}",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` (the caller's gradients at `point`) against central
/// finite differences of `eval`.
pub fn grad_check(
    eval: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    point: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    assert_eq!(point.len(), analytic.len(), "one gradient per input tensor");

    let sizes: Vec<usize> = point.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let picked: Vec<usize> = if opts.max_coords == 0 || total <= opts.max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = rand::seq::index::sample(&mut rng, total, opts.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut all_finite = true;

    for flat in picked.iter().copied() {
        // map flat coordinate to (tensor, index)
        let mut t = 0usize;
        let mut index = flat;
        while index >= sizes[t] {
            index -= sizes[t];
            t += 1;
        }
        let orig = work[t].data()[index];

        work[t].data_mut()[index] = orig + opts.step;
        let f_plus = eval(&work)?;
        work[t].data_mut()[index] = orig - opts.step;
        let f_minus = eval(&work)?;
        work[t].data_mut()[index] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * opts.step);
        let an = analytic[t].data()[index];
        if !numeric.is_finite() || !an.is_finite() {
            all_finite = false;
            worst = Some(WorstCoord { tensor: t, index, analytic: an, numeric });
            max_rel = f64::INFINITY;
            break;
        }
        let denom = an.abs().max(numeric.abs()).max(opts.denom_floor);
        let rel = (an - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = Some(WorstCoord { tensor: t, index, analytic: an, numeric });
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: picked.len(),
        tol: opts.tol,
        pass: all_finite && max_rel <= opts.tol,
        worst,
    })
}

/// Convenience wrapper for graphs expressed as a tape builder: the builder
/// receives leaves for each input tensor and returns the scalar loss node.
/// Analytic gradients come from the tape; numeric ones re-evaluate the
/// forward pass only.
pub fn grad_check_graph(
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    point: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.scalar_value(loss).map(Scalar::as_f64)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(point)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    grad_check(eval, point, &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_function_passes() {
        // f(x) = x^2 at x = 3: analytic gradient 6
        let point = [Tensor::scalar(3.0f64)];
        let analytic = [Tensor::scalar(6.0f64)];
        let report = grad_check(
            |p: &[Tensor<f64>]| Ok(p[0].data()[0] * p[0].data()[0]),
            &point,
            &analytic,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn corrupted_adjoint_fails() {
        let point = [Tensor::scalar(3.0f64)];
        let corrupted = [Tensor::scalar(12.0f64)]; // off by 2x
        let report = grad_check(
            |p: &[Tensor<f64>]| Ok(p[0].data()[0] * p[0].data()[0]),
            &point,
            &corrupted,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn non_finite_analytic_is_a_fail_report() {
        let point = [Tensor::scalar(3.0f64)];
        let bad = [Tensor::scalar(f64::NAN)];
        let report = grad_check(
            |p: &[Tensor<f64>]| Ok(p[0].data()[0]),
            &point,
            &bad,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_err.is_infinite());
    }

    #[test]
    fn coordinate_subsampling_is_deterministic() {
        let point = [Tensor::<f64>::from_fn(&[100], |i| i as f64 * 0.01)];
        let analytic = [Tensor::<f64>::filled(&[100], 1.0)];
        let opts = GradCheckOptions {
            max_coords: 10,
            seed: 42,
            ..Default::default()
        };
        let f = |p: &[Tensor<f64>]| Ok(p[0].sum());
        let r1 = grad_check(f, &point, &analytic, &opts).unwrap();
        let r2 = grad_check(f, &point, &analytic, &opts).unwrap();
        assert_eq!(r1.coords_checked, 10);
        assert!(r1.pass);
        assert_eq!(r1.max_rel_err, r2.max_rel_err);
    }
}
