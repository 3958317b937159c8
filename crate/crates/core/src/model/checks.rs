//! Finite-difference gradient suites over the tensor ops and the separator.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{atss_forward, attention_block, masked_l2_node, AtssModel, AttentionAxis, ModelConfig, Variant, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{grad_check, grad_check_params, Conv2dSpec, GradCheckReport, Graph, NodeId, Tensor};

/// Central-difference step.
pub const GRAD_STEP: f32 = 1e-3;
/// Threshold for single ops.
pub const LAYER_THRESHOLD: f64 = 1e-3;
/// Threshold for composite graphs in 32-bit storage.
pub const MODEL_THRESHOLD: f64 = 1e-2;
const SEEDS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Layers,
    Block,
    EndToEnd,
}

impl FromStr for GradScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Self::Layers),
            "block" => Ok(Self::Block),
            "end2end" => Ok(Self::EndToEnd),
            _ => Err(Error::invalid(format!(
                "scope must be layers, block or end2end, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Layers => "layers",
            Self::Block => "block",
            Self::EndToEnd => "end2end",
        })
    }
}

/// Worst result of one named check over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub threshold: f64,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passes(&self) -> bool {
        self.report.passes(self.threshold)
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Max-error report over several seeds, keeping coordinate and skip totals.
fn worst(name: &str, threshold: f64, reports: Vec<GradCheckReport>) -> GradCase {
    let mut out = reports[0].clone();
    for r in &reports[1..] {
        if r.max_rel_error > out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst = r.worst;
        }
    }
    out.coordinates = reports.iter().map(|r| r.coordinates).sum();
    out.skipped_kinks = reports.iter().map(|r| r.skipped_kinks).sum();
    GradCase {
        name: name.to_string(),
        threshold,
        report: out,
    }
}

fn op_case(
    name: &str,
    fault: Option<f32>,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCase> {
    let mut reports = Vec::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        reports.push(grad_check(&inputs, GRAD_STEP, None, |g, ids| {
            if let Some(f) = fault {
                g.inject_grad_fault(f);
            }
            let y = op(g, ids)?;
            // Fixed random contraction so every output coordinate matters.
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
            let w = rand_t(&mut wr, g.shape(y), -1.0, 1.0);
            g.dot_const(y, w)
        })?);
    }
    Ok(worst(name, LAYER_THRESHOLD, reports))
}

fn layer_cases(fault: Option<f32>) -> Result<Vec<GradCase>> {
    Ok(vec![
        op_case(
            "linear",
            fault,
            |r| {
                vec![
                    rand_t(r, &[3, 4], -1.0, 1.0),
                    rand_t(r, &[4, 5], -1.0, 1.0),
                    rand_t(r, &[5], -1.0, 1.0),
                ]
            },
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        )?,
        op_case(
            "conv2d",
            fault,
            |r| {
                vec![
                    rand_t(r, &[2, 7, 6], -1.0, 1.0),
                    rand_t(r, &[3, 2, 5, 3], -1.0, 1.0),
                    rand_t(r, &[3], -1.0, 1.0),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::dilated(2, 1)),
        )?,
        op_case(
            "softmax",
            fault,
            |r| vec![rand_t(r, &[3, 5], -1.0, 1.0)],
            |g, v| g.softmax(v[0]),
        )?,
        op_case(
            "layer_norm",
            fault,
            |r| {
                vec![
                    rand_t(r, &[3, 6], -1.0, 1.0),
                    rand_t(r, &[6], -1.0, 1.0),
                    rand_t(r, &[6], -1.0, 1.0),
                ]
            },
            |g, v| g.layer_norm(v[0], v[1], v[2], LN_EPS),
        )?,
        op_case(
            "stat_pool",
            fault,
            |r| vec![rand_t(r, &[3, 4, 5], -1.0, 1.0)],
            |g, v| g.stat_pool(v[0]),
        )?,
        // Inputs stay clear of the kink by more than the step.
        op_case(
            "relu",
            fault,
            |r| {
                vec![Tensor::from_fn(&[20], |_| {
                    let v: f32 = r.random_range(0.01..1.0);
                    if r.random_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })]
            },
            |g, v| Ok(g.relu(v[0])),
        )?,
        op_case(
            "sigmoid",
            fault,
            |r| vec![rand_t(r, &[12], -1.0, 1.0)],
            |g, v| Ok(g.sigmoid(v[0])),
        )?,
        op_case(
            "matmul",
            fault,
            |r| vec![rand_t(r, &[2, 3, 4], -1.0, 1.0), rand_t(r, &[2, 5, 4], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1], true),
        )?,
    ])
}

/// Toy dimensions for the composite checks.
pub fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_blocks: 1,
        n_heads: 2,
        d_k: 4,
        freq_bins: 9,
        embed_dim: 4,
        attention_axis: AttentionAxis::Time,
        variant,
    }
}

/// Every parameter drawn uniformly from `[-0.5, 0.5)` so no path is silenced
/// by zero initialization.
fn randomized(cfg: ModelConfig, seed: u64) -> Result<AtssModel> {
    let mut m = AtssModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(m)
}

fn block_case(fault: Option<f32>) -> Result<GradCase> {
    let cfg = toy_config(Variant::Full);
    let m = randomized(cfg, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_t(&mut rng, &[1, 6, 13], -1.0, 1.0);
    let w = rand_t(&mut rng, &[4, 6, 13], -1.0, 1.0);
    let r = grad_check_params(&m.params, GRAD_STEP, None, |g, p| {
        if let Some(f) = fault {
            g.inject_grad_fault(f);
        }
        let xn = g.constant(x.clone());
        let y = attention_block(g, p, 0, xn, &cfg)?;
        g.dot_const(y, w.clone())
    })?;
    Ok(worst("attention_block", MODEL_THRESHOLD, vec![r]))
}

fn end_to_end_cases(fault: Option<f32>) -> Result<Vec<GradCase>> {
    [Variant::Full, Variant::NoAttention]
        .into_iter()
        .map(|variant| {
            let cfg = toy_config(variant);
            let m = randomized(cfg, 12)?;
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mag = rand_t(&mut rng, &[6, 9], 0.0, 1.0);
            let target = rand_t(&mut rng, &[6, 9], 0.0, 1.0);
            let emb: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = grad_check_params(&m.params, GRAD_STEP, None, |g, p| {
                if let Some(f) = fault {
                    g.inject_grad_fault(f);
                }
                let masks = atss_forward(g, p, &cfg, &mag, Some(&emb))?;
                masked_l2_node(g, &mag, masks[0], &target)
            })?;
            Ok(worst(&format!("end2end_{variant}"), MODEL_THRESHOLD, vec![r]))
        })
        .collect()
}

/// Runs the checks of `scope`. `fault` scales every linear-weight gradient,
/// which the checks must then flag.
pub fn grad_check_suite(scope: GradScope, fault: Option<f32>) -> Result<Vec<GradCase>> {
    match scope {
        GradScope::Layers => layer_cases(fault),
        GradScope::Block => Ok(vec![block_case(fault)?]),
        GradScope::EndToEnd => end_to_end_cases(fault),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names() {
        for s in [GradScope::Layers, GradScope::Block, GradScope::EndToEnd] {
            assert_eq!(s.to_string().parse::<GradScope>().unwrap(), s);
        }
        assert!("all".parse::<GradScope>().is_err());
    }

    #[test]
    fn layer_suite_covers_required_ops_and_passes() {
        let cases = grad_check_suite(GradScope::Layers, None).unwrap();
        let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
        for op in [
            "linear",
            "conv2d",
            "softmax",
            "layer_norm",
            "stat_pool",
            "relu",
            "sigmoid",
        ] {
            assert!(names.contains(&op), "{op} missing");
        }
        for c in &cases {
            assert!(c.passes(), "{c:?}");
        }
    }

    #[test]
    fn faults_are_flagged_in_every_scope() {
        for scope in [GradScope::Layers, GradScope::Block, GradScope::EndToEnd] {
            let cases = grad_check_suite(scope, Some(1.1)).unwrap();
            assert!(cases.iter().any(|c| !c.passes()), "{scope}: {cases:?}");
        }
    }
}
