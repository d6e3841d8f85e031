use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::GradError;
use crate::moe::{EmaPolicy, RoutingMode};
use crate::train::{Batch, LanguageModel, ModelForwardOptions};

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Default difference step. With the five-point formula it balances
/// truncation against round-off for losses of order one.
pub const DEFAULT_FD_STEP: f64 = 5e-3;

/// Difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h²).
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error O(h⁴).
    #[default]
    FivePoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Blocks with more scalars than this are probed along random directions.
    pub max_coords: usize,
    /// Random unit directions with ±1/√n entries per large block.
    pub probes: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_FD_STEP,
            stencil: Stencil::FivePoint,
            max_coords: 64,
            probes: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdResult {
    pub max_rel_err: f64,
    pub checks: usize,
    /// Analytic and numeric values at the worst check.
    pub worst: (f64, f64),
    pub directional: bool,
}

/// Compares `analytic` (the gradient of `f` at `x`) against central
/// differences: one per coordinate for small inputs, `opts.probes` random
/// sign directions otherwise. `f` is evaluated twice at `x` first; differing
/// results are reported as non-determinism.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    opts: &FdOptions,
) -> Result<FdResult, GradError> {
    assert_eq!(
        x.len(),
        analytic.len(),
        "gradient length must match the input"
    );
    let first = f(x);
    let second = f(x);
    if first.to_bits() != second.to_bits() {
        return Err(GradError::NonDeterministic { first, second });
    }
    if !first.is_finite() {
        return Err(GradError::NonFinite(format!("f(x) = {first}")));
    }
    let h = opts.step;
    let mut res = FdResult {
        max_rel_err: 0.0,
        checks: 0,
        worst: (0.0, 0.0),
        directional: x.len() > opts.max_coords,
    };
    let mut xp = x.to_vec();
    let record = |a: f64, n: f64, res: &mut FdResult| {
        let e = relative_error(a, n);
        res.checks += 1;
        if e > res.max_rel_err || res.checks == 1 {
            res.max_rel_err = res.max_rel_err.max(e);
            res.worst = (a, n);
        }
    };
    let mut slope = |dir: &dyn Fn(usize) -> f64, xp: &mut Vec<f64>| -> f64 {
        let mut at = |t: f64| {
            xp.iter_mut()
                .enumerate()
                .for_each(|(i, p)| *p = x[i] + t * dir(i));
            f(xp)
        };
        match opts.stencil {
            Stencil::ThreePoint => (at(h) - at(-h)) / (2.0 * h),
            Stencil::FivePoint => {
                (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
            }
        }
    };
    if !res.directional {
        for i in 0..x.len() {
            let n = slope(&|j| if j == i { 1.0 } else { 0.0 }, &mut xp);
            record(analytic[i], n, &mut res);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let scale = 1.0 / (x.len() as f64).sqrt();
        for _ in 0..opts.probes {
            let dir: Vec<f64> = (0..x.len())
                .map(|_| if rng.random::<bool>() { scale } else { -scale })
                .collect();
            let a: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let n = slope(&|j| dir[j], &mut xp);
            record(a, n, &mut res);
        }
    }
    Ok(res)
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub numel: usize,
    #[serde(flatten)]
    pub result: FdResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelGradcheck {
    pub mode: RoutingMode,
    pub blocks: Vec<BlockCheck>,
    pub max_rel_err: f64,
}

impl ModelGradcheck {
    pub fn worst(&self) -> Option<&BlockCheck> {
        self.blocks
            .iter()
            .max_by(|a, b| a.result.max_rel_err.total_cmp(&b.result.max_rel_err))
    }
}

/// Checks the gradient of every parameter block of `model` in `mode` against
/// finite differences of the total loss. Expert selections are recorded on
/// the first forward and replayed for every perturbed evaluation, and default
/// vectors stay frozen, so in default mode the reference is the surrogate
/// function with the bank held fixed.
pub fn model_gradcheck(
    model: &LanguageModel<f64>,
    batch: &Batch,
    mode: RoutingMode,
    opts: &FdOptions,
) -> Result<ModelGradcheck, GradError> {
    let mut m = model.clone();
    let probe = ModelForwardOptions {
        mode: Some(mode),
        ema: EmaPolicy::Frozen,
        ..Default::default()
    };
    let (_, _, _, out) = m.loss_and_grads(batch, &probe)?;
    let forced = out.selections();
    let fixed = ModelForwardOptions {
        forced: Some(&forced),
        ..probe.clone()
    };
    let (_, grads, _, _) = m.loss_and_grads(batch, &fixed)?;

    let mut blocks = Vec::new();
    let ids: Vec<_> = m.params.ids().collect();
    for (bi, (&id, grad)) in ids.iter().zip(&grads).enumerate() {
        let name = m.params.param(id).name.clone();
        let x = m.params.get(id).data().to_vec();
        let mut work = m.clone();
        let f = |v: &[f64]| -> f64 {
            work.params.get_mut(id).data_mut().copy_from_slice(v);
            work.loss(batch, &fixed)
                .map(|l| l.total)
                .unwrap_or(f64::NAN)
        };
        let block_opts = FdOptions {
            seed: opts.seed.wrapping_add(bi as u64),
            ..*opts
        };
        let result = finite_difference_check(f, &x, grad.data(), &block_opts)?;
        blocks.push(BlockCheck {
            name,
            numel: x.len(),
            result,
        });
    }
    if m.banks != model.banks {
        return Err(GradError::StateDiverged(
            "default vectors changed during the check".into(),
        ));
    }
    let max_rel_err = blocks
        .iter()
        .map(|b| b.result.max_rel_err)
        .fold(0.0, f64::max);
    Ok(ModelGradcheck {
        mode,
        blocks,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_difference_check(|x| x[0] * x[0], &[3.0], &[6.0], &FdOptions::default())
            .unwrap();
        assert!(r.max_rel_err < 1e-8);
        assert_eq!(r.checks, 1);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        for step in [1e-4, 1e-2, 0.5] {
            let opts = FdOptions {
                step,
                ..Default::default()
            };
            let r = finite_difference_check(
                |x| 2.0 * x[0] - 0.5 * x[1],
                &[0.3, -1.0],
                &[2.0, -0.5],
                &opts,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-9, "step {step}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn directional_probes_on_large_inputs() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 / 100.0).collect();
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let r = finite_difference_check(
            |v| v.iter().map(|a| a * a).sum(),
            &x,
            &g,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.directional);
        assert_eq!(r.checks, 32);
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn five_point_is_exact_on_quartics_up_to_roundoff() {
        let f = |x: &[f64]| x[0].powi(4);
        for stencil in [Stencil::ThreePoint, Stencil::FivePoint] {
            let opts = FdOptions {
                step: 1e-2,
                stencil,
                ..Default::default()
            };
            let r = finite_difference_check(f, &[1.0], &[4.0], &opts).unwrap();
            match stencil {
                // Three-point error is h²·f'''/6 = 4h² relative to 4.
                Stencil::ThreePoint => {
                    assert!((r.max_rel_err - 1e-4).abs() < 1e-6, "{}", r.max_rel_err)
                }
                Stencil::FivePoint => assert!(r.max_rel_err < 1e-12, "{}", r.max_rel_err),
            }
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = finite_difference_check(|x| x[0] * x[0], &[3.0], &[5.0], &FdOptions::default())
            .unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn detects_nondeterminism() {
        let mut calls = 0.0;
        let err = finite_difference_check(
            |x| {
                calls += 1.0;
                x[0] + calls
            },
            &[1.0],
            &[1.0],
            &FdOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GradError::NonDeterministic { .. }));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-10, 0.0), 1e-10 / 1e-8);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
