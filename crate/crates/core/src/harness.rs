//! Lot-level experiment harness: simulates the heating / unclamp / reclamp
//! cycle, runs the competing estimation strategies on a shared noise
//! realization, aggregates per-wafer overlay metrics and throughput figures
//! and writes deterministic result files.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::certify::StabilityCertificate;
use crate::error::{Error, Result};
use crate::geometry::{thin_plate_interpolate, ImageArea, MarkGroup, MarkLayout};
use crate::noise::gaussian_vector;
use crate::plant::{FullOrderPlant, PlantStepper, RegimeId};
use crate::predictor::{Event, EventKind, HistoryLog, PredictorState, Scheduler};

/// Batch plan: lots, wafers, cycle times and the measurement geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LotPlan {
    pub n_lots: usize,
    pub wafers_per_lot: usize,
    pub wafer_expose_time: f64,
    pub wafer_swap_time: f64,
    /// Between-lot time; covers the unclamp/reclamp sequence.
    pub lot_swap_time: f64,
    pub image_area: ImageArea,
    pub layout: MarkLayout,
    /// Extra per-wafer alignment time when edge marks are measured, s.
    pub edge_mark_time: f64,
}

/// Estimation strategy identities, in fixed report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Switching predictor, edge marks withheld.
    Proposed,
    /// Nominal model under all regimes, edge marks withheld.
    LinearOnly,
    /// Per-wafer spatial interpolation of all measured marks (edge marks
    /// included); surrogate for the measurement-driven production baseline.
    StatusQuo,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Proposed, Strategy::LinearOnly, Strategy::StatusQuo];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Proposed => "proposed",
            Strategy::LinearOnly => "linear_only",
            Strategy::StatusQuo => "status_quo",
        }
    }

    /// Whether the strategy skips the edge-mark measurement.
    pub fn skips_edge_marks(self) -> bool {
        !matches!(self, Strategy::StatusQuo)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One simulation step of the scenario.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// End-of-step time, s.
    pub t: f64,
    /// True plant regime over the step.
    pub regime: RegimeId,
    /// Regime selected by the scheduler (drives the proposed strategy).
    pub scheduled: RegimeId,
    pub lot: usize,
    /// Wafer index within the lot; `None` during lot swaps.
    pub wafer: Option<usize>,
    pub exposing: bool,
    /// Spatial-mean reticle temperature at the end of the step, K.
    pub mean_temp: f64,
    /// True dense overlay field (interleaved x, y), nm.
    pub true_field: DVector<f64>,
    /// Per-strategy dense field estimates, nm.
    pub estimates: BTreeMap<Strategy, DVector<f64>>,
    /// Full-layout measurement taken at the start of this step, if any.
    pub measurement: Option<DVector<f64>>,
}

/// Dense predicted fields immediately before and after one model handoff,
/// with the output maps of both members (for range computations).
#[derive(Debug, Clone)]
pub struct HandoffJump {
    pub t: f64,
    pub from_regime: RegimeId,
    pub to_regime: RegimeId,
    pub field_before: DVector<f64>,
    pub field_after: DVector<f64>,
    pub c_before: nalgebra::DMatrix<f64>,
    pub c_after: nalgebra::DMatrix<f64>,
}

/// Full scenario output: per-step records plus the plan that produced them.
#[derive(Debug, Clone)]
pub struct ScenarioTrace {
    pub records: Vec<StepRecord>,
    pub events: Vec<Event>,
    pub strategies: Vec<Strategy>,
    /// Evaluation-grid point indices inside the image area; overlay metrics
    /// are computed over these points.
    pub image_points: Vec<usize>,
    /// One entry per model switch of the proposed strategy.
    pub handoff_jumps: Vec<HandoffJump>,
    pub lotplan: LotPlan,
    pub seed: u64,
    pub dt: f64,
}

/// Per-wafer, per-strategy, per-axis overlay error summary (magnitudes,
/// never negative).
#[derive(Debug, Clone, PartialEq)]
pub struct WaferMetric {
    pub lot: usize,
    pub wafer: usize,
    pub strategy: Strategy,
    /// "x" or "y".
    pub axis: char,
    pub max_nm: f64,
    pub rms_nm: f64,
}

/// Per-wafer error ratio of a strategy against the status-quo surrogate
/// (combined axes).
#[derive(Debug, Clone, PartialEq)]
pub struct WaferRatio {
    pub lot: usize,
    pub wafer: usize,
    pub strategy: Strategy,
    pub ratio_vs_status_quo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub variant: String,
    pub cycle_s: f64,
    pub wph: f64,
}

/// Steady-state throughput comparison; lot swaps are amortized separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub with_edge_marks: ThroughputRow,
    pub skip_edge_marks: ThroughputRow,
    /// `wph(skip) - wph(no skip)`.
    pub gain_wph: f64,
    /// Throughput loss per lot from the lot swap, in wafers.
    pub lot_swap_overhead_wafers: f64,
    /// Which variant the caller asked for.
    pub selected_skip: bool,
}

/// Comparison tables produced from one trace.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub per_wafer: Vec<WaferMetric>,
    pub ratios: Vec<WaferRatio>,
    /// Ratios restricted to the first two wafers of each lot.
    pub first_wafer_ratios: Vec<WaferRatio>,
    pub throughput: BTreeMap<Strategy, ThroughputReport>,
}

/// Knobs of one scenario run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dt: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Corrector speed for the gain design.
    pub rho: f64,
    /// Turn the pellicle on at every reclamp.
    pub pellicle_at_reclamp: bool,
    pub strategies: Vec<Strategy>,
    /// Disable measurement corrections entirely (prediction-only ablation).
    pub feedback_enabled: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            dt: 0.5,
            noise_std: 0.1,
            seed: 7,
            rho: 1.5,
            pellicle_at_reclamp: false,
            strategies: Strategy::ALL.to_vec(),
            feedback_enabled: true,
        }
    }
}

/// Clamp/pellicle bookkeeping for the true plant.
struct TruthState {
    clamped: bool,
    pellicle: bool,
    unclamped_once: bool,
}

impl TruthState {
    fn regime(&self) -> RegimeId {
        if !self.clamped {
            RegimeId::UNCLAMPED
        } else if self.unclamped_once {
            if self.pellicle {
                RegimeId::RECLAMPED_PELLICLE
            } else {
                RegimeId::RECLAMPED
            }
        } else if self.pellicle {
            RegimeId::PELLICLE
        } else {
            RegimeId::NOMINAL
        }
    }
}

/// One interval of the precomputed step program.
struct StepSpec {
    /// Events entering the history at the interval start.
    events: Vec<EventKind>,
    u_e: f64,
    lot: usize,
    wafer: Option<usize>,
    exposing: bool,
    /// A wafer alignment happens at the interval start (after any regime
    /// handoff scheduled at the same instant).
    measure_at_start: bool,
}

/// Expands the lot plan into per-step intervals.
fn build_step_program(lotplan: &LotPlan, opts: &RunOptions) -> Result<Vec<StepSpec>> {
    let dt = opts.dt;
    let expose_steps = steps_of(lotplan.wafer_expose_time, dt, "wafer_expose_time")?;
    let swap_steps = steps_of(lotplan.wafer_swap_time, dt, "wafer_swap_time")?;
    let lot_swap_steps = steps_of(lotplan.lot_swap_time, dt, "lot_swap_time")?;
    if expose_steps + swap_steps == 0 {
        return Err(Error::Config("wafer cycle shorter than one step".into()));
    }
    let mut steps: Vec<StepSpec> = Vec::new();
    for lot in 1..=lotplan.n_lots {
        let mut lot_events = vec![EventKind::LotStart { lot }];
        if lot > 1 {
            lot_events.push(EventKind::Clamp);
            if opts.pellicle_at_reclamp {
                lot_events.push(EventKind::PellicleOn);
            }
        }
        for wafer in 1..=lotplan.wafers_per_lot {
            let mut start_events = std::mem::take(&mut lot_events);
            start_events.push(EventKind::Measurement { layout_id: "production".into() });
            start_events.push(EventKind::ExposureOn);
            for k in 0..(expose_steps + swap_steps) {
                let exposing = k < expose_steps;
                let mut events = if k == 0 {
                    std::mem::take(&mut start_events)
                } else {
                    Vec::new()
                };
                if k == expose_steps {
                    events.push(EventKind::ExposureOff);
                }
                steps.push(StepSpec {
                    events,
                    u_e: if exposing { 1.0 } else { 0.0 },
                    lot,
                    wafer: Some(wafer),
                    exposing,
                    measure_at_start: k == 0,
                });
            }
        }
        if lot < lotplan.n_lots {
            let mut swap_events = vec![EventKind::LotEnd { lot }, EventKind::Unclamp];
            for _ in 0..lot_swap_steps {
                steps.push(StepSpec {
                    events: std::mem::take(&mut swap_events),
                    u_e: 0.0,
                    lot,
                    wafer: None,
                    exposing: false,
                    measure_at_start: false,
                });
            }
        } else if let Some(last) = steps.last_mut() {
            last.events.push(EventKind::LotEnd { lot });
        }
    }
    Ok(steps)
}

/// Simulates the full event timeline with every strategy consuming the same
/// plant states and the same measurement-noise draws.
///
/// Wafer alignments happen at wafer-start instants: the plant is measured
/// there and the predictors absorb the correction at that same instant,
/// after any regime handoff, before propagating into the wafer.
pub fn run_scenario(
    plant: &FullOrderPlant,
    scheduler: &Scheduler,
    lotplan: &LotPlan,
    opts: &RunOptions,
) -> Result<ScenarioTrace> {
    if opts.strategies.is_empty() {
        return Err(Error::Config("at least one strategy must run".into()));
    }
    lotplan.layout.validate(plant.config.reticle_side)?;
    lotplan.image_area.validate(plant.config.reticle_side)?;
    let dt = opts.dt;
    let program = build_step_program(lotplan, opts)?;

    // measurement geometry: the full layout for the status quo and noise
    // generation, the configured active subset for the model strategies
    let all_groups = [MarkGroup::Top, MarkGroup::Bottom, MarkGroup::Edge];
    let full_layout = lotplan.layout.with_active_groups(all_groups);
    let c_y_full = plant.measurement_map(&full_layout)?;
    let production_rows = sub_rows(&lotplan.layout, &full_layout);

    let family = &scheduler.family;
    let nominal = family.nominal().clone();
    let mut proposed = PredictorState::new(nominal.clone(), lotplan.layout.clone(), opts.rho, 0.0)?;
    let mut linear = proposed.clone();

    // status-quo state: dense field interpolated from the last measurement
    let eval_pts = plant.eval_grid.points();
    let mark_positions: Vec<(f64, f64)> =
        full_layout.active_marks().iter().map(|m| (m.x, m.y)).collect();
    let mut status_quo_field = DVector::zeros(2 * eval_pts.len());

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = HistoryLog::new();
    let mut events_out: Vec<Event> = Vec::new();
    let mut records = Vec::new();
    let mut truth = TruthState {
        clamped: true,
        pellicle: false,
        unclamped_once: false,
    };
    let mut x = DVector::zeros(plant.state_dim());
    let mut steppers: BTreeMap<RegimeId, PlantStepper> = BTreeMap::new();
    let mut handoff_jumps = Vec::new();

    for (k, spec) in program.iter().enumerate() {
        let t = k as f64 * dt;
        for kind in &spec.events {
            let e = Event { t, kind: kind.clone() };
            history.push(e.clone())?;
            events_out.push(e);
            match kind {
                EventKind::Clamp => truth.clamped = true,
                EventKind::Unclamp => {
                    truth.clamped = false;
                    truth.unclamped_once = true;
                }
                EventKind::PellicleOn => truth.pellicle = true,
                EventKind::PellicleOff => truth.pellicle = false,
                _ => {}
            }
        }

        let scheduled_regime = scheduler.classify_at(&history, t);
        if proposed.model.regime != scheduled_regime {
            let before = proposed.predicted_field()?;
            let from_regime = proposed.model.regime;
            let c_before = proposed.model.ssm.c.clone();
            proposed = proposed.handoff(family.member(scheduled_regime)?)?;
            handoff_jumps.push(HandoffJump {
                t,
                from_regime,
                to_regime: scheduled_regime,
                field_before: before.values,
                field_after: proposed.predicted_field()?.values,
                c_before,
                c_after: proposed.model.ssm.c.clone(),
            });
        }

        // wafer alignment at the interval start, after the handoff
        let mut measurement = None;
        if spec.measure_at_start {
            let mut y_full = &c_y_full * &x;
            if opts.noise_std > 0.0 {
                y_full += gaussian_vector(&mut rng, y_full.len(), opts.noise_std);
            }
            if opts.strategies.contains(&Strategy::StatusQuo) {
                status_quo_field = interpolate_marks(&mark_positions, &y_full, &eval_pts)?;
            }
            if opts.feedback_enabled {
                let y_production = DVector::from_fn(production_rows.len(), |i, _| {
                    y_full[production_rows[i]]
                });
                if opts.strategies.contains(&Strategy::Proposed) {
                    proposed = proposed.apply_measurement(&y_production)?;
                }
                if opts.strategies.contains(&Strategy::LinearOnly) {
                    linear = linear.apply_measurement(&y_production)?;
                }
            }
            measurement = Some(y_full);
        }

        let regime = truth.regime();
        x = stepper(plant, &mut steppers, regime, dt)?.step(&x, spec.u_e)?;
        let t_next = (k + 1) as f64 * dt;
        step_strategies(&mut proposed, &mut linear, spec.u_e, dt, &opts.strategies)?;

        records.push(make_record(
            plant,
            &x,
            t_next,
            regime,
            scheduled_regime,
            spec.lot,
            spec.wafer,
            spec.exposing,
            &proposed,
            &linear,
            &status_quo_field,
            measurement,
            &opts.strategies,
        )?);
    }

    let image_points = plant.eval_grid.points_inside(&lotplan.image_area);
    Ok(ScenarioTrace {
        records,
        events: events_out,
        strategies: opts.strategies.clone(),
        image_points,
        handoff_jumps,
        lotplan: lotplan.clone(),
        seed: opts.seed,
        dt,
    })
}

fn steps_of(duration: f64, dt: f64, name: &str) -> Result<usize> {
    let steps = duration / dt;
    if (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{name} = {duration} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(steps.round() as usize)
}

/// Row indices of the production-active marks inside the full-layout
/// measurement vector. Group filters preserve mark order, so the production
/// marks are a subsequence of the full set.
fn sub_rows(production: &MarkLayout, full: &MarkLayout) -> Vec<usize> {
    let mut rows = Vec::new();
    let mut full_idx = 0usize;
    for mark in &full.marks {
        let in_full = full.active_groups.contains(&mark.group);
        if !in_full {
            continue;
        }
        if production.active_groups.contains(&mark.group) {
            rows.push(2 * full_idx);
            rows.push(2 * full_idx + 1);
        }
        full_idx += 1;
    }
    rows
}

fn stepper<'a>(
    plant: &FullOrderPlant,
    cache: &'a mut BTreeMap<RegimeId, PlantStepper>,
    regime: RegimeId,
    dt: f64,
) -> Result<&'a PlantStepper> {
    if !cache.contains_key(&regime) {
        cache.insert(regime, PlantStepper::new(plant, regime, dt)?);
    }
    Ok(&cache[&regime])
}

fn step_strategies(
    proposed: &mut PredictorState,
    linear: &mut PredictorState,
    u_e: f64,
    dt: f64,
    strategies: &[Strategy],
) -> Result<()> {
    if strategies.contains(&Strategy::Proposed) {
        let (next, _) = proposed.step(u_e, None, dt)?;
        *proposed = next;
    }
    if strategies.contains(&Strategy::LinearOnly) {
        let (next, _) = linear.step(u_e, None, dt)?;
        *linear = next;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn make_record(
    plant: &FullOrderPlant,
    x: &DVector<f64>,
    t: f64,
    regime: RegimeId,
    scheduled: RegimeId,
    lot: usize,
    wafer: Option<usize>,
    exposing: bool,
    proposed: &PredictorState,
    linear: &PredictorState,
    status_quo_field: &DVector<f64>,
    measurement: Option<DVector<f64>>,
    strategies: &[Strategy],
) -> Result<StepRecord> {
    let true_field = &plant.c_z * x;
    let mut estimates = BTreeMap::new();
    for s in strategies {
        let est = match s {
            Strategy::Proposed => proposed.predicted_field()?.values,
            Strategy::LinearOnly => linear.predicted_field()?.values,
            Strategy::StatusQuo => status_quo_field.clone(),
        };
        estimates.insert(*s, est);
    }
    Ok(StepRecord {
        t,
        regime,
        scheduled,
        lot,
        wafer,
        exposing,
        mean_temp: x.mean(),
        true_field,
        estimates,
        measurement,
    })
}

/// Thin-plate interpolation of interleaved mark measurements onto the
/// evaluation grid, one axis at a time.
fn interpolate_marks(
    positions: &[(f64, f64)],
    y: &DVector<f64>,
    eval_pts: &[(f64, f64)],
) -> Result<DVector<f64>> {
    let n = positions.len();
    let vx: Vec<f64> = (0..n).map(|i| y[2 * i]).collect();
    let vy: Vec<f64> = (0..n).map(|i| y[2 * i + 1]).collect();
    let fx = thin_plate_interpolate(positions, &vx, eval_pts)?;
    let fy = thin_plate_interpolate(positions, &vy, eval_pts)?;
    let mut field = DVector::zeros(2 * eval_pts.len());
    for k in 0..eval_pts.len() {
        field[2 * k] = fx[k];
        field[2 * k + 1] = fy[k];
    }
    Ok(field)
}

impl ScenarioTrace {
    /// Per-step RMS prediction error of a strategy over the image area,
    /// both axes combined.
    pub fn step_rms(&self, record: &StepRecord, strategy: Strategy) -> f64 {
        let est = &record.estimates[&strategy];
        let mut sum = 0.0;
        for &p in &self.image_points {
            let ex = est[2 * p] - record.true_field[2 * p];
            let ey = est[2 * p + 1] - record.true_field[2 * p + 1];
            sum += ex * ex + ey * ey;
        }
        (sum / (2.0 * self.image_points.len() as f64)).sqrt()
    }

    /// Steps grouped per (lot, wafer).
    pub fn wafer_spans(&self) -> Vec<(usize, usize, Vec<usize>)> {
        let mut spans: Vec<(usize, usize, Vec<usize>)> = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            if let Some(w) = rec.wafer {
                match spans.last_mut() {
                    Some((lot, wafer, steps)) if *lot == rec.lot && *wafer == w => steps.push(i),
                    _ => spans.push((rec.lot, w, vec![i])),
                }
            }
        }
        spans
    }
}

/// Per-wafer error statistics, ratios against the status quo and throughput
/// figures for every strategy in the trace.
pub fn compare_strategies(trace: &ScenarioTrace) -> Result<MetricsTable> {
    if trace.strategies.len() < 2 {
        return Err(Error::Config(
            "strategy comparison needs at least two strategies".into(),
        ));
    }
    let mut per_wafer = Vec::new();
    let mut ratios = Vec::new();
    let mut first_wafer_ratios = Vec::new();

    for (lot, wafer, steps) in trace.wafer_spans() {
        let mut combined_rms: BTreeMap<Strategy, f64> = BTreeMap::new();
        for &strategy in &trace.strategies {
            let mut max_x = 0.0f64;
            let mut max_y = 0.0f64;
            let mut sum_x = 0.0;
            let mut sum_y = 0.0;
            let mut count = 0usize;
            for &i in &steps {
                let rec = &trace.records[i];
                let est = &rec.estimates[&strategy];
                for &p in &trace.image_points {
                    let ex = est[2 * p] - rec.true_field[2 * p];
                    let ey = est[2 * p + 1] - rec.true_field[2 * p + 1];
                    max_x = max_x.max(ex.abs());
                    max_y = max_y.max(ey.abs());
                    sum_x += ex * ex;
                    sum_y += ey * ey;
                    count += 1;
                }
            }
            let n = count.max(1) as f64;
            let rms_x = (sum_x / n).sqrt();
            let rms_y = (sum_y / n).sqrt();
            per_wafer.push(WaferMetric {
                lot,
                wafer,
                strategy,
                axis: 'x',
                max_nm: max_x,
                rms_nm: rms_x,
            });
            per_wafer.push(WaferMetric {
                lot,
                wafer,
                strategy,
                axis: 'y',
                max_nm: max_y,
                rms_nm: rms_y,
            });
            combined_rms.insert(strategy, ((sum_x + sum_y) / (2.0 * n)).sqrt());
        }
        if let Some(&base) = combined_rms.get(&Strategy::StatusQuo) {
            for (&strategy, &rms) in &combined_rms {
                if strategy == Strategy::StatusQuo {
                    continue;
                }
                let ratio = if base > 0.0 {
                    rms / base
                } else if rms == base {
                    1.0
                } else {
                    f64::INFINITY
                };
                let row = WaferRatio {
                    lot,
                    wafer,
                    strategy,
                    ratio_vs_status_quo: ratio,
                };
                if wafer <= 2 {
                    first_wafer_ratios.push(row.clone());
                }
                ratios.push(row);
            }
        }
    }

    let mut throughput = BTreeMap::new();
    for &strategy in &trace.strategies {
        throughput.insert(
            strategy,
            throughput_report(&trace.lotplan, strategy.skips_edge_marks())?,
        );
    }

    Ok(MetricsTable {
        per_wafer,
        ratios,
        first_wafer_ratios,
        throughput,
    })
}

/// Steady-state wafers-per-hour with and without the edge-mark measurement.
///
/// `wph = 3600 / (expose + swap [+ edge marks])`; the lot swap is amortized
/// separately as an overhead in wafers per lot.
pub fn throughput_report(lotplan: &LotPlan, skip_edge_marks: bool) -> Result<ThroughputReport> {
    let base = lotplan.wafer_expose_time + lotplan.wafer_swap_time;
    let cycle_with = base + lotplan.edge_mark_time;
    let cycle_skip = base;
    if cycle_skip <= 0.0 || cycle_with <= 0.0 {
        return Err(Error::Config("wafer cycle time must be positive".into()));
    }
    let wph_with = 3600.0 / cycle_with;
    let wph_skip = 3600.0 / cycle_skip;
    let overhead = lotplan.lot_swap_time / cycle_with;
    Ok(ThroughputReport {
        with_edge_marks: ThroughputRow {
            variant: "with_edge_marks".into(),
            cycle_s: cycle_with,
            wph: wph_with,
        },
        skip_edge_marks: ThroughputRow {
            variant: "skip_edge_marks".into(),
            cycle_s: cycle_skip,
            wph: wph_skip,
        },
        gain_wph: wph_skip - wph_with,
        lot_swap_overhead_wafers: overhead,
        selected_skip: skip_edge_marks,
    })
}

/// Context stamped into `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunContext {
    pub config_hash: String,
    pub seed: u64,
    pub certificate: Option<StabilityCertificate>,
    /// True when the run proceeded without a passing certificate.
    pub forced: bool,
}

#[derive(Debug, Serialize)]
struct StrategySummary {
    strategy: String,
    mean_rms_nm: f64,
    max_nm: f64,
    wph: f64,
    mean_ratio_vs_status_quo: Option<f64>,
    lot2_mean_ratio_vs_status_quo: Option<f64>,
}

/// Writes `per_wafer.csv`, `trace.csv`, `throughput.csv` and `summary.json`.
/// Identical inputs produce byte-identical files.
pub fn emit_results(
    trace: &ScenarioTrace,
    metrics: &MetricsTable,
    ctx: &RunContext,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    crate::io::ensure_dir(out_dir)?;
    let mut written = Vec::new();

    let per_wafer_path = out_dir.join("per_wafer.csv");
    let mut text = String::from("lot,wafer,strategy,axis,max_nm,rms_nm\n");
    for m in &metrics.per_wafer {
        text.push_str(&format!(
            "{},{},{},{},{:e},{:e}\n",
            m.lot, m.wafer, m.strategy, m.axis, m.max_nm, m.rms_nm
        ));
    }
    write_text(&per_wafer_path, &text)?;
    written.push(per_wafer_path);

    let trace_path = out_dir.join("trace.csv");
    let mut text = String::from("t_s,regime,strategy,rms_nm\n");
    for rec in &trace.records {
        for &s in &trace.strategies {
            text.push_str(&format!(
                "{:e},{},{},{:e}\n",
                rec.t,
                rec.regime.0,
                s,
                trace.step_rms(rec, s)
            ));
        }
    }
    write_text(&trace_path, &text)?;
    written.push(trace_path);

    let throughput_path = out_dir.join("throughput.csv");
    let mut text = String::from("variant,cycle_s,wph,gain_wph\n");
    if let Some(report) = metrics.throughput.values().next() {
        for row in [&report.with_edge_marks, &report.skip_edge_marks] {
            text.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                row.variant, row.cycle_s, row.wph, report.gain_wph
            ));
        }
    }
    write_text(&throughput_path, &text)?;
    written.push(throughput_path);

    // per-strategy aggregates for the summary
    let mut summaries = Vec::new();
    for &s in &trace.strategies {
        let rows: Vec<&WaferMetric> = metrics.per_wafer.iter().filter(|m| m.strategy == s).collect();
        let mean_rms = mean(rows.iter().map(|m| m.rms_nm));
        let max_nm = rows.iter().map(|m| m.max_nm).fold(0.0, f64::max);
        let ratios: Vec<f64> = metrics
            .ratios
            .iter()
            .filter(|r| r.strategy == s && r.ratio_vs_status_quo.is_finite())
            .map(|r| r.ratio_vs_status_quo)
            .collect();
        let lot2: Vec<f64> = metrics
            .ratios
            .iter()
            .filter(|r| r.strategy == s && r.lot == 2 && r.ratio_vs_status_quo.is_finite())
            .map(|r| r.ratio_vs_status_quo)
            .collect();
        let report = &metrics.throughput[&s];
        let wph = if report.selected_skip {
            report.skip_edge_marks.wph
        } else {
            report.with_edge_marks.wph
        };
        summaries.push(StrategySummary {
            strategy: s.name().into(),
            mean_rms_nm: mean_rms,
            max_nm,
            wph,
            mean_ratio_vs_status_quo: if ratios.is_empty() {
                None
            } else {
                Some(mean(ratios.iter().copied()))
            },
            lot2_mean_ratio_vs_status_quo: if lot2.is_empty() {
                None
            } else {
                Some(mean(lot2.iter().copied()))
            },
        });
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        config_hash: &'a str,
        seed: u64,
        forced: bool,
        certificate: &'a Option<StabilityCertificate>,
        n_records: usize,
        n_wafers: usize,
        strategies: Vec<StrategySummary>,
    }
    let summary_path = out_dir.join("summary.json");
    crate::io::write_json(
        &summary_path,
        &Summary {
            config_hash: &ctx.config_hash,
            seed: ctx.seed,
            forced: ctx.forced,
            certificate: &ctx.certificate,
            n_records: trace.records.len(),
            n_wafers: trace.wafer_spans().len(),
            strategies: summaries,
        },
    )?;
    written.push(summary_path);
    Ok(written)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Re-parses a `per_wafer.csv` written by [`emit_results`].
pub fn parse_per_wafer_csv(path: &Path) -> Result<Vec<WaferMetric>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("line {} has {} fields, expected 6", i + 1, fields.len()),
            ));
        }
        let strategy = match fields[2] {
            "proposed" => Strategy::Proposed,
            "linear_only" => Strategy::LinearOnly,
            "status_quo" => Strategy::StatusQuo,
            other => {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("unknown strategy {other}"),
                ))
            }
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad float {s}")))
        };
        rows.push(WaferMetric {
            lot: fields[0]
                .parse()
                .map_err(|_| Error::parse(path.display().to_string(), "bad lot"))?,
            wafer: fields[1]
                .parse()
                .map_err(|_| Error::parse(path.display().to_string(), "bad wafer"))?,
            strategy,
            axis: fields[3].chars().next().unwrap_or('?'),
            max_nm: parse_f(fields[4])?,
            rms_nm: parse_f(fields[5])?,
        });
    }
    Ok(rows)
}
