use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use looplab_core::fit::{
    self, fit_training_law, fit_ttc, fit_unified, functional_form_report, training_law_predict,
    FitOptions, GammaMode, TestTimeCurve, TrainingPoint, TrainingRecord, TtcForm, UnifiedPoint,
};
use looplab_core::flops;
use looplab_core::model::ModelConfig;

use super::write_output;
use crate::runconfig::RunConfig;

#[derive(Clone, Copy, ValueEnum)]
enum Law {
    Training,
    Ttc,
    Unified,
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaArg {
    Fixed,
    Learned,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    ExpDecay,
    ShiftedPower,
    Power,
    PowerNoFloor,
}

impl From<FormArg> for TtcForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::ExpDecay => TtcForm::ExpDecay,
            FormArg::ShiftedPower => TtcForm::ShiftedPower,
            FormArg::Power => TtcForm::Power,
            FormArg::PowerNoFloor => TtcForm::PowerNoFloor,
        }
    }
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    law: Law,
    /// JSONL input: TrainingRecord rows for the training law, TestTimeCurve
    /// rows for ttc/unified.
    #[arg(long)]
    input: PathBuf,
    /// JSON output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    restarts: u32,
    #[arg(long, default_value_t = 0xf17)]
    seed: u64,
    /// Run config providing the model shape when records lack n_effective.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Test-time functional form (ttc law only).
    #[arg(long, value_enum, default_value = "exp-decay")]
    form: FormArg,
    /// Also write the four-form comparison table (ttc law only) as CSV.
    #[arg(long)]
    form_report: Option<PathBuf>,
    /// Unified law: gamma fixed at 1, learned, or both side by side.
    #[arg(long, value_enum, default_value = "both")]
    gamma_mode: GammaArg,
    /// IsoLoss contour grid CSV over (mu_rec, tokens) (training law only).
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    grid_max_mu: u32,
}

fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let cfg = RunConfig::load(path)?;
    Ok(cfg.train.model)
}

fn n_effective_for(
    explicit: Option<f64>,
    mu_rec: u32,
    config: &Option<ModelConfig>,
) -> Result<f64> {
    match (explicit, config) {
        (Some(n), _) => Ok(n),
        (None, Some(c)) => Ok(flops::effective_params(c, mu_rec).n_effective as f64),
        (None, None) => bail!(
            "records lack n_effective; pass --model-config so N(mu_rec) can be derived"
        ),
    }
}

pub fn run(args: FitArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let opts = FitOptions { restarts: args.restarts, seed: args.seed, ..FitOptions::default() };
    let model_config = args.model_config.as_deref().map(load_model_config).transpose()?;

    match args.law {
        Law::Training => {
            let records: Vec<TrainingRecord> = fit::parse_jsonl(&text)?;
            let points: Vec<TrainingPoint> = records
                .iter()
                .map(|r| {
                    Ok(TrainingPoint {
                        n_eff: n_effective_for(r.n_effective, r.mu_rec, &model_config)?,
                        tokens: r.tokens,
                        loss: r.loss,
                    })
                })
                .collect::<Result<_>>()?;
            let fit = fit_training_law(&points, &opts)?;
            if let Some(grid_path) = &args.grid {
                let config = model_config
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("--grid needs --model-config"))?;
                let mut csv = String::from("mu_rec,tokens,loss\n");
                let (lo, hi) = tokens_span(&records);
                for mu in 1..=args.grid_max_mu {
                    let n = flops::effective_params(config, mu).n_effective as f64;
                    for j in 0..33 {
                        let tokens = lo * (hi / lo).powf(j as f64 / 32.0);
                        let loss = training_law_predict(&fit.coefficients, n, tokens);
                        csv.push_str(&format!("{mu},{tokens},{loss}\n"));
                    }
                }
                write_output(Some(grid_path), &csv)?;
            }
            write_output(args.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&fit)?))
        }
        Law::Ttc => {
            let curves: Vec<TestTimeCurve> = fit::parse_jsonl(&text)?;
            for c in &curves {
                c.validate()?;
            }
            if let Some(report_path) = &args.form_report {
                let tagged: Vec<(u32, Vec<fit::TtcPoint>)> =
                    curves.iter().map(|c| (c.mu_rec, c.points.clone())).collect();
                let report = functional_form_report(&tagged, &opts)?;
                let mut csv = String::from("form,in_distribution,extrapolation\n");
                for row in &report.rows {
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        row.form, row.in_distribution, row.extrapolation
                    ));
                }
                write_output(Some(report_path), &csv)?;
            }
            let fits: Vec<_> = curves
                .iter()
                .map(|c| fit_ttc(&c.points, args.form.into(), &opts))
                .collect::<Result<_, _>>()?;
            let payload = json!({
                "form": TtcForm::from(args.form).name(),
                "curves": curves.iter().map(|c| json!({"mu_rec": c.mu_rec, "tokens": c.tokens})).collect::<Vec<_>>(),
                "fits": fits,
            });
            write_output(args.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&payload)?))
        }
        Law::Unified => {
            let curves: Vec<TestTimeCurve> = fit::parse_jsonl(&text)?;
            let mut points = Vec::new();
            for c in &curves {
                c.validate()?;
                let n_eff = n_effective_for(c.n_effective, c.mu_rec, &model_config)?;
                for p in &c.points {
                    points.push(UnifiedPoint {
                        n_eff,
                        tokens: c.tokens,
                        mu_rec: c.mu_rec,
                        t: p.t,
                        loss: p.loss,
                    });
                }
            }
            let payload = match args.gamma_mode {
                GammaArg::Fixed => json!({"fixed": fit_unified(&points, GammaMode::Fixed, &opts)?}),
                GammaArg::Learned => {
                    json!({"learned": fit_unified(&points, GammaMode::Learned, &opts)?})
                }
                GammaArg::Both => json!({
                    "fixed": fit_unified(&points, GammaMode::Fixed, &opts)?,
                    "learned": fit_unified(&points, GammaMode::Learned, &opts)?,
                }),
            };
            write_output(args.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&payload)?))
        }
    }
}

fn tokens_span(records: &[TrainingRecord]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for r in records {
        lo = lo.min(r.tokens);
        hi = hi.max(r.tokens);
    }
    if !lo.is_finite() || hi <= 0.0 {
        (1e6, 1e9)
    } else {
        (lo, hi)
    }
}
