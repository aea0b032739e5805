use std::path::{Path, PathBuf};

use retherm_core::certify::{certify_guas, StabilityCertificate};
use retherm_core::config::ScenarioConfig;
use retherm_core::error::{Error, Result};
use retherm_core::harness::{
    compare_strategies, emit_results, parse_per_wafer_csv, run_scenario, RunContext, Strategy,
};
use retherm_core::io::{ensure_dir, load_family, read_json, save_family, write_json};
use retherm_core::pipeline;

use crate::Cli;

/// Effective configuration plus output location after CLI overrides.
pub struct Context {
    pub config: ScenarioConfig,
    pub out_dir: PathBuf,
    pub overwrite: bool,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Context> {
        let mut config = match &cli.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(out) = &cli.out {
            config.out_dir = out.display().to_string();
        }
        config.validate()?;
        let out_dir = PathBuf::from(&config.out_dir);
        Ok(Context {
            config,
            out_dir,
            overwrite: cli.overwrite,
        })
    }

    fn family_dir(&self) -> PathBuf {
        self.out_dir.join("family")
    }

    fn certificate_path(&self) -> PathBuf {
        self.out_dir.join("certificate.json")
    }

    fn refuse_existing(&self, path: &Path) -> Result<()> {
        if !self.overwrite && path.exists() {
            return Err(Error::Config(format!(
                "{} already exists; rerun with --overwrite or a fresh --out",
                path.display()
            )));
        }
        Ok(())
    }
}

/// `reduce`: build the family from the modeling plant, verify moment
/// matching, write the family directory, the moment report and the plant
/// matrix dumps.
pub fn reduce(ctx: &Context) -> Result<()> {
    ctx.refuse_existing(&ctx.family_dir())?;
    let (family, report) = pipeline::build_family(&ctx.config)?;
    ensure_dir(&ctx.out_dir)?;
    save_family(&ctx.family_dir(), &family)?;
    write_json(&ctx.out_dir.join("moment_report.json"), &report)?;
    let truth = pipeline::build_truth_plant(&ctx.config)?;
    let dump_dir = ensure_dir(&ctx.out_dir.join("plant"))?;
    truth.dump_matrices(&dump_dir)?;
    println!(
        "reduced {} regimes (order {}), moment report: {}",
        report.rows.len(),
        ctx.config.reduction.k_moments,
        if report.all_pass { "all-pass" } else { "MISMATCH" }
    );
    for row in &report.rows {
        println!(
            "  regime {}: order {}, worst moment error {:.3e}{}",
            row.regime,
            row.order,
            row.relative_errors.iter().cloned().fold(0.0, f64::max),
            if row.stabilized { " (post-stabilized)" } else { "" }
        );
    }
    Ok(())
}

/// `certify`: small-gain test of the assembled interconnection; writes the
/// certificate and fails (exit 2) when the margin is not positive.
pub fn certify(ctx: &Context) -> Result<()> {
    let family_dir = ctx.family_dir();
    if !family_dir.exists() {
        return Err(Error::Config(format!(
            "no model family at {}; run `reduce` first",
            family_dir.display()
        )));
    }
    let family = load_family(&family_dir)?;
    let (gp, delta) = pipeline::build_interconnection(&ctx.config, &family)?;
    let certificate = certify_guas(&gp, &delta)?;
    ctx.refuse_existing(&ctx.certificate_path())?;
    ensure_dir(&ctx.out_dir)?;
    write_json(&ctx.certificate_path(), &certificate)?;
    println!(
        "gamma = {:.6e}, delta bound = {:.6e}, margin = {:.4}",
        certificate.gamma, certificate.delta_bound, certificate.margin
    );
    if certificate.pass {
        println!("certificate: PASS");
        Ok(())
    } else {
        Err(Error::CertificationFailed(format!(
            "small-gain margin {:.4} is not positive",
            certificate.margin
        )))
    }
}

/// `simulate`: run the scenario with all strategies and write the result
/// files. Requires a passing certificate unless `force`.
pub fn simulate(ctx: &Context, force: bool) -> Result<()> {
    let family_dir = ctx.family_dir();
    if !family_dir.exists() {
        return Err(Error::Config(format!(
            "no model family at {}; run `reduce` first",
            family_dir.display()
        )));
    }
    let family = load_family(&family_dir)?;

    let certificate: Option<StabilityCertificate> = if ctx.certificate_path().exists() {
        Some(read_json(&ctx.certificate_path())?)
    } else {
        None
    };
    let certified = certificate.as_ref().map(|c| c.pass).unwrap_or(false);
    if !certified && !force {
        return Err(Error::Config(
            "no passing certificate found; run `certify` or pass --force".into(),
        ));
    }

    for name in ["per_wafer.csv", "trace.csv", "throughput.csv", "summary.json"] {
        ctx.refuse_existing(&ctx.out_dir.join(name))?;
    }

    let truth = pipeline::build_truth_plant(&ctx.config)?;
    let scheduler = pipeline::build_scheduler(&ctx.config, family)?;
    let lotplan = ctx.config.lot_plan()?;
    let opts = pipeline::run_options(&ctx.config);
    let trace = run_scenario(&truth, &scheduler, &lotplan, &opts)?;
    let metrics = compare_strategies(&trace)?;
    let run_ctx = RunContext {
        config_hash: format!("{:016x}", ctx.config.hash()),
        seed: ctx.config.seed,
        certificate,
        forced: !certified,
    };
    let written = emit_results(&trace, &metrics, &run_ctx, &ctx.out_dir)?;
    println!(
        "simulated {} wafers x {} strategies over {} steps",
        trace.wafer_spans().len(),
        trace.strategies.len(),
        trace.records.len()
    );
    for path in written {
        println!("  wrote {}", path.display());
    }
    Ok(())
}

/// `report`: human summary of a previous simulate run.
pub fn report(ctx: &Context) -> Result<()> {
    let per_wafer = parse_per_wafer_csv(&ctx.out_dir.join("per_wafer.csv"))?;
    let summary_path = ctx.out_dir.join("summary.json");
    let summary: serde_json::Value = read_json(&summary_path)?;

    println!("run {}:", summary["config_hash"].as_str().unwrap_or("?"));
    if let Some(cert) = summary.get("certificate").filter(|c| !c.is_null()) {
        println!(
            "  certificate: {} (gamma {:.3e}, margin {:.3})",
            if cert["pass"].as_bool().unwrap_or(false) { "pass" } else { "FAIL" },
            cert["gamma"].as_f64().unwrap_or(f64::NAN),
            cert["margin"].as_f64().unwrap_or(f64::NAN),
        );
    } else {
        println!("  certificate: none (forced run)");
    }

    for strategy in Strategy::ALL {
        let rows: Vec<_> = per_wafer.iter().filter(|m| m.strategy == strategy).collect();
        if rows.is_empty() {
            continue;
        }
        let mean_rms = rows.iter().map(|m| m.rms_nm).sum::<f64>() / rows.len() as f64;
        let worst = rows.iter().map(|m| m.max_nm).fold(0.0, f64::max);
        println!(
            "  {:<12} mean per-wafer rms {:.4} nm, worst |error| {:.4} nm",
            strategy.name(),
            mean_rms,
            worst
        );
    }

    // lot-2 degradation of the linear variant, the headline comparison
    let lot2 = |s: Strategy| -> Vec<f64> {
        let mut by_wafer = std::collections::BTreeMap::new();
        for m in per_wafer.iter().filter(|m| m.strategy == s && m.lot == 2) {
            let e = by_wafer.entry(m.wafer).or_insert(0.0f64);
            *e = (*e * *e + m.rms_nm * m.rms_nm).sqrt();
        }
        by_wafer.into_values().collect()
    };
    let prop = lot2(Strategy::Proposed);
    let lin = lot2(Strategy::LinearOnly);
    if !prop.is_empty() && prop.len() == lin.len() {
        let worst_factor = prop
            .iter()
            .zip(lin.iter())
            .map(|(p, l)| l / p.max(1e-30))
            .fold(0.0f64, f64::max);
        println!("  lot-2 worst linear/proposed rms factor: {worst_factor:.2}");
    }
    Ok(())
}
