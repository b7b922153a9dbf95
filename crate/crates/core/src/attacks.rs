//! Gradient attacks crafted from auxiliary per-sample gradients.
//!
//! The attacker only sees its auxiliary gradients `S^a` (mean `g_a`,
//! coordinate-wise population std `sigma`) and submits `n_p` identical
//! copies of one vector.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregators::{aggregate, AggregatorSpec};
use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    GradientAscent {
        lambda: f64,
    },
    Orthogonal,
    LittleIsEnough {
        #[serde(default = "default_z_grid")]
        z_grid: Vec<f64>,
        /// Only consider deviations whose candidate the aggregator keeps
        /// (falls back to all of them when none is kept).
        #[serde(default = "default_stay_selected")]
        stay_selected: bool,
    },
}

fn default_stay_selected() -> bool {
    true
}

/// 50 log-spaced points in `[0.1, 10]`.
pub fn default_z_grid() -> Vec<f64> {
    (0..50).map(|k| 0.1 * 100f64.powf(k as f64 / 49.0)).collect()
}

impl AttackKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            AttackKind::GradientAscent { lambda } if !(*lambda > 0.0 && lambda.is_finite()) => {
                Err(Error::config(format!("gradient ascent lambda must be > 0, got {lambda}")))
            }
            AttackKind::LittleIsEnough { z_grid, .. } => {
                if z_grid.is_empty() || z_grid[0] <= 0.0 || z_grid.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::config("z grid must be non-empty, positive and strictly ascending"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::GradientAscent { .. } => "gradient_ascent",
            AttackKind::Orthogonal => "orthogonal",
            AttackKind::LittleIsEnough { .. } => "little_is_enough",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AuxiliaryStats {
    pub grads: Vec<GradientVector>,
    pub mean: GradientVector,
    /// Population standard deviation per coordinate.
    pub std: GradientVector,
}

impl AuxiliaryStats {
    pub fn from_gradients(grads: Vec<GradientVector>) -> Result<Self> {
        let mean = GradientVector::mean(&grads)?;
        let n = grads.len() as f64;
        let mut var = vec![0.0; mean.dim()];
        for g in &grads {
            for ((v, x), m) in var.iter_mut().zip(g.as_slice()).zip(mean.as_slice()) {
                *v += (x - m) * (x - m);
            }
        }
        let std = GradientVector::new(var.into_iter().map(|v| (v / n).sqrt()).collect());
        Ok(AuxiliaryStats { grads, mean, std })
    }

    pub fn n_a(&self) -> usize {
        self.grads.len()
    }
}

#[derive(Clone, Debug)]
pub struct CraftedAttack {
    pub vector: GradientVector,
    /// Deviation chosen by little-is-enough.
    pub z_max: Option<f64>,
    /// The attack had nothing to work with (zero mean or zero spread).
    pub degenerate: bool,
}

fn check_np(n_p: usize) -> Result<()> {
    if n_p == 0 {
        return Err(Error::config("attack needs at least one poison message"));
    }
    Ok(())
}

/// `g_p = -((lambda (n_a + n_p) + n_a) / n_p) g_a`, so the mean of `S^a`
/// plus `n_p` copies of `g_p` is exactly `-lambda g_a`.
pub fn craft_ga(stats: &AuxiliaryStats, lambda: f64, n_p: usize) -> Result<CraftedAttack> {
    check_np(n_p)?;
    let (na, np) = (stats.n_a() as f64, n_p as f64);
    let degenerate = stats.mean.norm_sq() == 0.0;
    if degenerate {
        warn!("gradient ascent on a zero auxiliary mean");
    }
    Ok(CraftedAttack {
        vector: stats.mean.scaled(-(lambda * (na + np) + na) / np),
        z_max: None,
        degenerate,
    })
}

/// Random direction orthogonal to `g_a` with the same norm, drawn from `rng`.
pub fn orthogonal_direction(g: &GradientVector, rng: &mut impl Rng) -> Result<GradientVector> {
    if g.dim() < 2 {
        return Err(Error::OrthogonalDim(g.dim()));
    }
    let gn2 = g.norm_sq();
    loop {
        let r = GradientVector::new((0..g.dim()).map(|_| StandardNormal.sample(rng)).collect());
        let t = r.lin_comb(1.0, g, -r.dot(g)? / gn2)?;
        let tn = t.norm();
        if tn >= 1e-12 * gn2.sqrt() {
            return Ok(t.scaled(gn2.sqrt() / tn));
        }
    }
}

/// `g_p = ((n_a + n_p) t - n_a g_a) / n_p` with `t` orthogonal to `g_a`,
/// so the poisoned auxiliary mean is `t`.
pub fn craft_og(stats: &AuxiliaryStats, n_p: usize, rng: &mut impl Rng) -> Result<CraftedAttack> {
    check_np(n_p)?;
    if stats.mean.dim() < 2 {
        return Err(Error::OrthogonalDim(stats.mean.dim()));
    }
    if stats.mean.norm_sq() == 0.0 {
        warn!("orthogonal attack on a zero auxiliary mean");
        return Ok(CraftedAttack {
            vector: GradientVector::zeros(stats.mean.dim()),
            z_max: None,
            degenerate: true,
        });
    }
    let t = orthogonal_direction(&stats.mean, rng)?;
    let (na, np) = (stats.n_a() as f64, n_p as f64);
    Ok(CraftedAttack {
        vector: t.lin_comb((na + np) / np, &stats.mean, -na / np)?,
        z_max: None,
        degenerate: false,
    })
}

/// Little-is-enough: `g_a - z sigma` for the grid value `z` that moves the
/// aggregate of `S^a` the most; ties go to the smaller `z`. With
/// `stay_selected`, candidates the aggregator rejects are passed over
/// unless every candidate is rejected.
pub fn craft_lie(
    stats: &AuxiliaryStats,
    n_p: usize,
    z_grid: &[f64],
    stay_selected: bool,
    aggregator: &AggregatorSpec,
) -> Result<CraftedAttack> {
    check_np(n_p)?;
    AttackKind::LittleIsEnough {
        z_grid: z_grid.to_vec(),
        stay_selected,
    }
    .validate()?;
    let clean = aggregate(aggregator, &stats.grads)?.aggregate;
    let n_a = stats.n_a();
    let deviations = par::map(z_grid, |&z| -> Result<(GradientVector, f64, bool)> {
        let cand = stats.mean.lin_comb(1.0, &stats.std, -z)?;
        let mut msgs = stats.grads.clone();
        msgs.extend(std::iter::repeat_n(cand.clone(), n_p));
        let r = aggregate(aggregator, &msgs)?;
        let kept = r.selected.last().is_some_and(|&i| i >= n_a);
        Ok((cand, r.aggregate.dist_sq(&clean)?.sqrt(), kept))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let restrict = stay_selected && deviations.iter().any(|d| d.2);
    let mut best: Option<(usize, f64)> = None;
    for (k, (_, delta, kept)) in deviations.iter().enumerate() {
        if restrict && !kept {
            continue;
        }
        if best.is_none_or(|b| *delta > b.1) {
            best = Some((k, *delta));
        }
    }
    let (k, _) = best.expect("grid is non-empty");
    let vector = deviations[k].0.clone();
    let degenerate = stats.std.norm_sq() == 0.0;
    if degenerate {
        warn!("little-is-enough with zero auxiliary spread");
    }
    Ok(CraftedAttack {
        vector,
        z_max: Some(z_grid[k]),
        degenerate,
    })
}

pub fn craft(
    kind: &AttackKind,
    stats: &AuxiliaryStats,
    n_p: usize,
    aggregator: &AggregatorSpec,
    rng: &mut impl Rng,
) -> Result<CraftedAttack> {
    match kind {
        AttackKind::GradientAscent { lambda } => craft_ga(stats, *lambda, n_p),
        AttackKind::Orthogonal => craft_og(stats, n_p, rng),
        AttackKind::LittleIsEnough { z_grid, stay_selected } => craft_lie(stats, n_p, z_grid, *stay_selected, aggregator),
    }
}
