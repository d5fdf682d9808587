//! Safe sets `S_h(t) = {x | h(t, x) ≤ 0}` and the two invariance conditions:
//! a coast must keep the bound nonpositive for one sample period, an impulse
//! must keep it nonpositive for the full dwell time after the jump.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounding::{segment_times, Barrier, Predictor};
use crate::error::{Error, Result};
use crate::hybrid::{FlowMap, ImpulseSchedule, IntegratorConfig, JumpMap, Stepper};
use crate::parallel;

/// A barrier with the bounding function used to certify it.
#[derive(Clone)]
pub struct BarrierSpec {
    pub barrier: Arc<dyn Barrier>,
    pub predictor: Predictor,
    /// Segment count for [`Predictor::PsiStar`].
    pub n_psi: usize,
}

impl BarrierSpec {
    pub fn scalar(barrier: Arc<dyn Barrier>) -> Self {
        Self {
            barrier,
            predictor: Predictor::Psi,
            n_psi: 1,
        }
    }

    pub fn segmented(barrier: Arc<dyn Barrier>, n_psi: usize) -> Self {
        Self {
            barrier,
            predictor: Predictor::PsiStar,
            n_psi: n_psi.max(1),
        }
    }

    pub fn label(&self) -> &str {
        self.barrier.label()
    }

    fn segments(&self) -> usize {
        match self.predictor {
            Predictor::Psi => 1,
            Predictor::PsiStar => self.n_psi,
        }
    }

    /// Bound elements over `[t, t + horizon]`: one for the scalar bound,
    /// `n_psi` for the segmented one.
    pub fn bound_elements(
        &self,
        f: &dyn FlowMap,
        cfg: &IntegratorConfig,
        t: f64,
        x: &[f64],
        horizon: f64,
    ) -> Result<Vec<f64>> {
        let n = self.segments();
        if n == 1 || horizon == 0.0 {
            return Ok(vec![self.barrier.psi(t + horizon, t, x)?]);
        }
        let times = segment_times(t, t + horizon, n);
        let mut stepper = Stepper::new(f, *cfg, t, x);
        let mut out = Vec::with_capacity(n);
        for w in times.windows(2) {
            stepper.advance_to(w[0])?;
            out.push(self.barrier.psi(w[1], w[0], stepper.state())?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub satisfied: bool,
    pub worst_value: f64,
    /// `label` or `label[j]` for segment `j` of a segmented bound.
    pub which: String,
}

/// Exact sign test `h(t, x) ≤ 0`. Singular evaluations count as outside.
pub fn in_set(spec: &BarrierSpec, t: f64, x: &[f64]) -> bool {
    matches!(spec.barrier.h(t, x), Ok(v) if v <= 0.0)
}

fn verdict_over(
    specs: &[BarrierSpec],
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    t: f64,
    x: &[f64],
    horizon: f64,
) -> Result<SafetyVerdict> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no barriers given".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut which = String::new();
    for spec in specs {
        let elems = spec.bound_elements(f, cfg, t, x, horizon)?;
        let multi = elems.len() > 1;
        for (j, v) in elems.into_iter().enumerate() {
            if v > worst {
                worst = v;
                which = if multi {
                    format!("{}[{j}]", spec.label())
                } else {
                    spec.label().to_string()
                };
            }
        }
    }
    Ok(SafetyVerdict {
        satisfied: worst <= 0.0,
        worst_value: worst,
        which,
    })
}

/// Coast test: `ψ_h(t+Δt, t, x) ≤ 0` for every barrier.
pub fn coast_condition(
    specs: &[BarrierSpec],
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    schedule: &ImpulseSchedule,
    t: f64,
    x: &[f64],
) -> Result<SafetyVerdict> {
    verdict_over(specs, f, cfg, t, x, schedule.dt)
}

/// Impulse test: `ψ_h(t+ΔT, t, g(t, x, u)) ≤ 0` for every barrier.
#[allow(clippy::too_many_arguments)]
pub fn jump_condition(
    specs: &[BarrierSpec],
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    jump: &dyn JumpMap,
    schedule: &ImpulseSchedule,
    t: f64,
    x: &[f64],
    u: &[f64],
) -> Result<SafetyVerdict> {
    let y = jump.apply(t, x, u);
    verdict_over(specs, f, cfg, t, &y, schedule.dwell)
}

/// Falsifier result for one `(t, x)` sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsifierSample {
    pub t: f64,
    pub x: Vec<f64>,
    /// `min_u ψ_h(t+ΔT, t, g(t, x, u))` over the control grid.
    pub min_value: f64,
    pub argmin_u: Vec<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsifierReport {
    pub barrier: String,
    pub samples: Vec<FalsifierSample>,
}

impl FalsifierReport {
    pub fn flagged(&self) -> impl Iterator<Item = &FalsifierSample> {
        self.samples.iter().filter(|s| s.flagged)
    }

    pub fn flag_count(&self) -> usize {
        self.flagged().count()
    }
}

/// Sampling-based falsifier for the ITCBF property: for each sample, the
/// smallest dwell-horizon bound achievable with a control from the grid.
/// Samples whose minimum is positive are flagged. This can find
/// counterexamples; it never proves the property.
#[allow(clippy::too_many_arguments)]
pub fn check_itcbf(
    spec: &BarrierSpec,
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    jump: &dyn JumpMap,
    schedule: &ImpulseSchedule,
    control_grid: &[Vec<f64>],
    samples: &[(f64, Vec<f64>)],
) -> Result<FalsifierReport> {
    if control_grid.is_empty() || samples.is_empty() {
        return Err(Error::InvalidArgument(
            "falsifier needs a nonempty control grid and sample set".into(),
        ));
    }
    let results = parallel::map(samples, |(t, x)| -> Result<FalsifierSample> {
        let mut best = f64::INFINITY;
        let mut arg = control_grid[0].clone();
        for u in control_grid {
            let y = jump.apply(*t, x, u);
            let worst = spec
                .bound_elements(f, cfg, *t, &y, schedule.dwell)?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            if worst < best {
                best = worst;
                arg = u.clone();
            }
        }
        Ok(FalsifierSample {
            t: *t,
            x: x.clone(),
            min_value: best,
            argmin_u: arg,
            flagged: best > 0.0,
        })
    });
    Ok(FalsifierReport {
        barrier: spec.label().to_string(),
        samples: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Uniform `k × k × …` grid over `[-radius, radius]^m`.
pub fn uniform_control_grid(m: usize, per_axis: usize, radius: f64) -> Vec<Vec<f64>> {
    let per_axis = per_axis.max(1);
    let axis: Vec<f64> = if per_axis == 1 {
        vec![0.0]
    } else {
        (0..per_axis)
            .map(|i| -radius + 2.0 * radius * i as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(*a);
                    q
                })
            })
            .collect();
    }
    out
}
