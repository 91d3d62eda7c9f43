//! Text dumps of attention biases for the bundled worked examples.
//!
//! Rows are labelled by original position (1-based). In the sequential phase
//! the first half is labelled `z<i>` and the second `x<i>`. `#` permits and
//! `.` blocks.

use std::fmt::Write as _;

use esolm_core::bias::{
    bias_a_diffusion_train, bias_a_sampling, bias_a_sequential_train, bias_b_diffusion_train, bias_b_sampling,
    bias_b_sequential_train, sorted_view, AttentionBias, BlockStructure, UnconsumedRows,
};
use esolm_core::ordering::{zero_based, Ordering};
use esolm_core::sampler::DenoisingSchedule;
use esolm_core::Variant;

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Phase {
    Diffusion,
    Sequential,
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Example {
    /// clean {1,3,6}, mask {2,4,5}, sigma (3,1,6,4,5,2)
    #[value(name = "six", alias = "fig2")]
    Six,
    /// same partition, sigma (3,1,6,2,4,5) with masks in natural order
    #[value(name = "six-natural", alias = "fig7")]
    SixNatural,
    /// eight-token schedule ((3,1),(6),(4,7),(2),(5),(8))
    #[value(name = "eight", alias = "b4")]
    Eight,
}

impl Example {
    fn name(self) -> &'static str {
        match self {
            Example::Six => "six",
            Example::SixNatural => "six-natural",
            Example::Eight => "eight",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InspectRequest {
    pub variant: Variant,
    pub phase: Phase,
    pub example: Example,
    /// 1-based sampling step; `None` dumps every step.
    pub step: Option<usize>,
    pub sorted: bool,
    pub unconsumed: UnconsumedRows,
}

fn tuple(xs: &[usize]) -> String {
    format!("({})", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn set(xs: &[usize]) -> String {
    format!("{{{}}}", xs.iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(", "))
}

fn cfg_err<E: std::fmt::Display>(e: E) -> ConfigError {
    ConfigError(e.to_string())
}

/// The eight-token schedule used by the sampling examples.
pub fn worked_schedule() -> DenoisingSchedule {
    DenoisingSchedule::from_draws(8, &[2, 1, 2], &zero_based(&[3, 1, 6, 4, 7])).expect("fixed schedule is valid")
}

pub fn render(req: &InspectRequest) -> Result<String, ConfigError> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "variant={} phase={} example={}{}",
        req.variant,
        format!("{:?}", req.phase).to_lowercase(),
        req.example.name(),
        if req.sorted { " sorted" } else { "" }
    );
    match (req.example, req.phase) {
        (Example::Eight, Phase::Sampling) => render_sampling(req, &mut out)?,
        (Example::Eight, _) => return Err(ConfigError("example eight only has a sampling phase".into())),
        (_, Phase::Sampling) => return Err(ConfigError("sampling dumps use example eight".into())),
        (ex, phase) => render_training(req, ex, phase, &mut out)?,
    }
    Ok(out)
}

fn render_training(req: &InspectRequest, ex: Example, phase: Phase, out: &mut String) -> Result<(), ConfigError> {
    let clean = zero_based(&[1, 3, 6]);
    let mask = zero_based(&[2, 4, 5]);
    let labels = if ex == Example::Six { [3, 1, 6, 4, 5, 2] } else { [3, 1, 6, 2, 4, 5] };
    let sigma = Ordering::from_one_based(&labels).map_err(cfg_err)?;
    let _ = writeln!(out, "sigma={}", tuple(&sigma.to_one_based()));
    let _ = writeln!(out, "clean={} mask={}", set(&clean), set(&mask));
    let (bias, blocks) = match (phase, req.variant) {
        (Phase::Diffusion, Variant::A) => (bias_a_diffusion_train(&clean, &mask, &sigma), BlockStructure::None),
        (Phase::Diffusion, Variant::B) => (bias_b_diffusion_train(&sigma), BlockStructure::None),
        (_, Variant::A) => (bias_a_sequential_train(&clean, &mask, req.unconsumed), BlockStructure::Quad),
        (_, Variant::B) => (bias_b_sequential_train(&clean, &mask, &sigma, req.unconsumed), BlockStructure::Quad),
    };
    let bias = bias.map_err(cfg_err)?;
    let len = sigma.len();
    let order: Vec<usize> = if req.sorted { sigma.perm().to_vec() } else { (0..len).collect() };
    let mut row_labels: Vec<String> = Vec::new();
    match blocks {
        BlockStructure::None => row_labels.extend(order.iter().map(|i| (i + 1).to_string())),
        BlockStructure::Quad => {
            row_labels.extend(order.iter().map(|i| format!("z{}", i + 1)));
            row_labels.extend(order.iter().map(|i| format!("x{}", i + 1)));
        }
    }
    let shown = if req.sorted {
        sorted_view(&bias, &sigma, blocks).map_err(cfg_err)?
    } else {
        bias
    };
    let _ = writeln!(out, "columns={}", row_labels.join(" "));
    out.push_str(&shown.render(&row_labels));
    Ok(())
}

fn render_sampling(req: &InspectRequest, out: &mut String) -> Result<(), ConfigError> {
    let schedule = worked_schedule();
    let sigma = schedule.sigma();
    let _ = writeln!(out, "schedule={}", schedule.to_one_based_string());
    let _ = writeln!(out, "sigma={}", tuple(&sigma.to_one_based()));
    let steps = schedule.steps();
    let wanted: Vec<usize> = match req.step {
        Some(k) if k >= 1 && k <= steps.len() => vec![k - 1],
        Some(k) => return Err(ConfigError(format!("step {k} outside 1..={}", steps.len()))),
        None => (0..steps.len()).collect(),
    };
    for k in wanted {
        let (mut d_mdm, mut d_ar) = (Vec::new(), Vec::new());
        for (j, s) in steps[..k].iter().enumerate() {
            if j < schedule.mdm_steps() {
                d_mdm.extend(s);
            } else {
                d_ar.extend(s);
            }
        }
        let s_k = &steps[k];
        let built = match req.variant {
            Variant::A => bias_a_sampling(&d_mdm, &d_ar, s_k, &sigma),
            Variant::B => bias_b_sampling(&d_mdm, &d_ar, s_k, &sigma),
        }
        .map_err(cfg_err)?;
        let mut order: Vec<usize> = (0..built.positions.len()).collect();
        if req.sorted {
            order.sort_by_key(|&c| sigma.rank(built.positions[c]));
        }
        let shown = AttentionBias::from_fn(order.len(), |r, c| built.bias.permits(order[r], order[c]));
        let labels: Vec<String> = order.iter().map(|&c| (built.positions[c] + 1).to_string()).collect();
        let s_one: Vec<usize> = s_k.iter().map(|i| i + 1).collect();
        let _ = writeln!(
            out,
            "\nstep={} s_k={} d_mdm={} d_ar={}",
            k + 1,
            tuple(&s_one),
            set(&d_mdm),
            set(&d_ar)
        );
        let _ = writeln!(out, "columns={}", labels.join(" "));
        out.push_str(&shown.render(&labels));
    }
    Ok(())
}
