//! Central-difference check of the analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{objective, TrainMode};
use crate::error::Result;
use crate::fusenet::FusedNet;
use crate::netspec::FusedNetSpec;
use crate::tensor::{LayerKind, LayerParams, Mode, ParamRole, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub mode: TrainMode,
    /// Central-difference step.
    pub h: f64,
    /// Coordinates checked per layer kind (all of them if fewer exist).
    pub coords_per_kind: usize,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub batch: usize,
    pub aux_weight: f64,
    pub seed: u64,
    /// Coordinates listed in the report, worst first.
    pub report_worst: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            mode: TrainMode::Deep,
            h: 1e-5,
            coords_per_kind: 200,
            tolerance: 1e-4,
            floor: 1e-6,
            batch: 2,
            aux_weight: 1.0,
            seed: 0,
            report_worst: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateError {
    pub layer: String,
    pub role: ParamRole,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindReport {
    pub kind: LayerKind,
    pub checked: usize,
    /// Coordinates whose ±h perturbation crossed a ReLU, pool or max kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub spec: String,
    pub mode: TrainMode,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub kinds: Vec<KindReport>,
    pub worst: Vec<CoordinateError>,
    pub passed: bool,
}

fn values_mut(p: &mut LayerParams<f64>, role: ParamRole) -> &mut Vec<f64> {
    match role {
        ParamRole::Weight => &mut p.weights,
        ParamRole::Bias => &mut p.bias,
        ParamRole::Gamma => &mut p.bn_gamma,
        ParamRole::Beta => &mut p.bn_beta,
    }
}

/// (layer, role, index) of one parameter value.
type Coord = (usize, ParamRole, usize);

const ROLES: [ParamRole; 4] = [ParamRole::Weight, ParamRole::Bias, ParamRole::Gamma, ParamRole::Beta];

/// A copy of `spec` small enough for finite differences: widths scaled so
/// the widest stage has `max_width` channels and an 8×8 input when the
/// pools allow it. Specs that do not survive shrinking are returned as is.
pub fn shrunken(spec: &FusedNetSpec, max_width: usize) -> FusedNetSpec {
    let widest = spec
        .members
        .iter()
        .filter_map(|m| m.network.as_ref())
        .flat_map(|n| n.stages.iter().map(|s| s.channels))
        .chain([spec.fc_channels])
        .max()
        .unwrap_or(1);
    let mut out = spec.clone();
    if widest > max_width {
        if let Ok(s) = spec.scale_width(max_width as f64 / widest as f64) {
            if crate::netspec::validate(&s).is_empty() {
                out = s;
            }
        }
    }
    if out.input.height > 8 && out.input.width > 8 {
        let small = out.clone().with_input(8, 8);
        if crate::netspec::validate(&small).is_empty() {
            out = small;
        }
    }
    out
}

/// Build a double-precision net for `spec` and check it on a random batch.
pub fn grad_check_spec(spec: &FusedNetSpec, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut net = FusedNet::<f64>::build_with(spec, cfg.mode.build_options(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let i = spec.input;
    let x = Tensor::from_fn(Shape::new(cfg.batch, i.channels, i.height, i.width), |_, _, _, _| {
        StandardNormal.sample(&mut rng)
    });
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..spec.num_classes)).collect();
    grad_check(&mut net, &x, &labels, cfg)
}

/// Compare analytic gradients of the mode's training loss with central
/// differences. Parameters are restored afterwards.
pub fn grad_check(
    net: &mut FusedNet<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let saved = net.layers().to_vec();
    let loss_at = |net: &mut FusedNet<f64>| -> Result<(f64, Vec<u8>)> {
        let o = objective(net, x, labels, cfg.mode, cfg.aux_weight, Mode::Train)?;
        Ok((o.loss, net.activation_pattern().unwrap_or_default()))
    };

    let obj = objective(net, x, labels, cfg.mode, cfg.aux_weight, Mode::Train)?;
    let base_pattern = net.activation_pattern().unwrap_or_default();
    net.zero_grad();
    net.backward(&obj.d_scores, &obj.d_aux)?;
    let analytic = net.grads().to_vec();

    let mut by_kind: BTreeMap<String, (LayerKind, Vec<Coord>)> = BTreeMap::new();
    for (id, p) in net.layers().iter().enumerate() {
        for role in ROLES {
            let n = match role {
                ParamRole::Weight => p.weights.len(),
                ParamRole::Bias => p.bias.len(),
                ParamRole::Gamma => p.bn_gamma.len(),
                ParamRole::Beta => p.bn_beta.len(),
            };
            if n > 0 {
                let entry = by_kind
                    .entry(format!("{:?}", p.kind))
                    .or_insert_with(|| (p.kind, Vec::new()));
                entry.1.push((id, role, n));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE);
    let mut kinds = Vec::new();
    let mut all = Vec::new();
    for (_, (kind, arrays)) in by_kind {
        let total: usize = arrays.iter().map(|a| a.2).sum();
        let picks = sample(&mut rng, total, total.min(cfg.coords_per_kind.saturating_mul(3))).into_vec();
        let mut report = KindReport {
            kind,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for flat in picks {
            if report.checked >= cfg.coords_per_kind {
                break;
            }
            let mut rest = flat;
            let &(id, role, _) = arrays
                .iter()
                .find(|a| {
                    if rest < a.2 {
                        true
                    } else {
                        rest -= a.2;
                        false
                    }
                })
                .expect("flat index within total");
            let index = rest;
            let original = values_mut(&mut net.layers_mut()[id], role)[index];
            values_mut(&mut net.layers_mut()[id], role)[index] = original + cfg.h;
            let (plus, p_plus) = loss_at(net)?;
            values_mut(&mut net.layers_mut()[id], role)[index] = original - cfg.h;
            let (minus, p_minus) = loss_at(net)?;
            values_mut(&mut net.layers_mut()[id], role)[index] = original;
            if p_plus != base_pattern || p_minus != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = {
                let g = &analytic[id];
                match role {
                    ParamRole::Weight => g.weights[index],
                    ParamRole::Bias => g.bias[index],
                    ParamRole::Gamma => g.bn_gamma[index],
                    ParamRole::Beta => g.bn_beta[index],
                }
            };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            all.push(CoordinateError {
                layer: net.layer_name(id).to_string(),
                role,
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
        kinds.push(report);
    }
    for (dst, src) in net.layers_mut().iter_mut().zip(saved) {
        *dst = src;
    }
    net.zero_grad();
    net.clear_retained();

    all.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    all.truncate(cfg.report_worst);
    let max_rel_error = kinds.iter().map(|k| k.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        spec: net.spec().name.clone(),
        mode: cfg.mode,
        tolerance: cfg.tolerance,
        max_rel_error,
        passed: max_rel_error < cfg.tolerance && kinds.iter().all(|k| k.checked > 0),
        kinds,
        worst: all,
    })
}
