use pointformer::backbone::{
    overfit, synthetic_scene, BackboneConfig, LrPolicy, OverfitTrace, Regressor, Trainable, AUTO_LR_START,
};
use pointformer::{Error, Real};

use super::{load_config, Globals};
use crate::error::{CliError, CliResult};
use crate::with_precision;

pub const REQUIRED_REDUCTION: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct OverfitArgs {
    pub config: String,
    pub steps: usize,
    /// `None` selects the automatic halving schedule.
    pub lr: Option<f64>,
    pub head_only: bool,
}

pub fn run(args: &OverfitArgs, globals: &Globals) -> CliResult<OverfitTrace> {
    let cfg = load_config(&args.config, globals)?;
    with_precision!(cfg.precision, train(&cfg, args))
}

fn train<T: Real>(cfg: &BackboneConfig, args: &OverfitArgs) -> CliResult<OverfitTrace> {
    let (model, store) = Regressor::<T>::build(cfg, true)?;
    let scene = synthetic_scene::<T>(cfg.seed, cfg.input_channels, false);
    let lr = args.lr.map_or(LrPolicy::Auto(AUTO_LR_START), LrPolicy::Fixed);
    let trainable = if args.head_only { Trainable::HeadOnly } else { Trainable::All };
    log::info!("overfit: {} parameters, {} steps, {lr:?}", store.num_scalars(), args.steps);
    overfit(&model, &store, &scene, args.steps, lr, trainable).map_err(|e| match e {
        Error::Divergence { step, lr } => CliError::Failed(format!("training diverged at step {step} (lr {lr})")),
        other => other.into(),
    })
}

pub fn render(trace: &OverfitTrace, every: usize) -> String {
    let mut out = String::new();
    let last = trace.losses.len() - 1;
    for (i, l) in trace.losses.iter().enumerate() {
        if i % every.max(1) == 0 || i == last {
            out.push_str(&format!("step {i:>5}  loss {l:.9e}\n"));
        }
    }
    out.push_str(&format!(
        "lr {} after {} halvings; initial {:.9e} final {:.9e} reduction {:.3e}x\n",
        trace.lr,
        trace.halvings,
        trace.initial(),
        trace.final_loss(),
        trace.reduction()
    ));
    out
}

pub fn verdict(trace: &OverfitTrace) -> CliResult<()> {
    if trace.final_loss() <= trace.initial() / REQUIRED_REDUCTION {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "final loss {:.6e} is above initial/{REQUIRED_REDUCTION} = {:.6e}",
            trace.final_loss(),
            trace.initial() / REQUIRED_REDUCTION
        )))
    }
}
