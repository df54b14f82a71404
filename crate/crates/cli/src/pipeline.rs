//! The pipeline stages. Each reads only the outputs of earlier stages plus the config.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use rd_binn_core::binn::{train, write_trace_csv, BinnModel, BinnNets, ModelManifest, TrainConfig, RESIDUAL_FORM, VALIDATION_LOSS};
use rd_binn_core::ensemble::{ensemble_curves, CurveKind, EnsembleCurve, SupportBounds, TrainedSplit};
use rd_binn_core::eval::{compare, count_from_net, count_from_solve, curve_metrics, CountCurves, CountMetrics, CurveMetrics};
use rd_binn_core::grid::{bin_points, read_points_csv, write_points_csv, DensityField, FieldMeta, PointCloud};
use rd_binn_core::mlp::NetworkParams;
use rd_binn_core::rng::derive_seed;
use rd_binn_core::solver::{ic_from_density_net, solve_rd, RateFn, Solution, SolveSpec, SCHEME};
use rd_binn_core::sr::{canonical_template, repeat_seed, select_best, sr_fit, Candidate, SymbolicModel};
use rd_binn_core::synth::{apply_noise, generate_clean, sample_points, NoiseSpec, TrueModel};
use serde::{Deserialize, Serialize};

use crate::config::{InputConfig, RunConfig};
use crate::fsio::{prepare_stage_dir, read_json, write_atomic, write_json_atomic, StageManifest};
use crate::CliError;

pub const STAGES: [&str; 5] = ["synth", "preprocess", "train", "ensemble-sr", "evaluate"];

/// Shared state for one invocation.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, jobs: usize, force: bool) -> Result<Self, CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Context { config, out, force, pool })
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn data_dir(&self) -> PathBuf {
        self.dir("data")
    }

    fn split_dir(&self, patience: usize, split: usize) -> PathBuf {
        self.dir("train").join(format!("p{patience}")).join(format!("split{split}"))
    }

    fn manifest(&self, stage: &str) -> StageManifest {
        let mut m = StageManifest::new(stage, &self.config);
        m.seeds.insert("base".into(), self.config.seed);
        m
    }
}

fn write_field(dir: &Path, stem: &str, field: &DensityField) -> Result<(), CliError> {
    write_atomic(&dir.join(format!("{stem}.csv")), |w| Ok(field.write_csv(w)?))?;
    write_json_atomic(&dir.join(format!("{stem}.meta.json")), &field.metadata())
}

fn read_field(dir: &Path, stem: &str) -> Result<DensityField, CliError> {
    let meta: FieldMeta = read_json(&dir.join(format!("{stem}.meta.json")))?;
    let path = dir.join(format!("{stem}.csv"));
    let f = fs::File::open(&path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    Ok(DensityField::read_csv(BufReader::new(f), &meta)?)
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// What the generator planted, for later comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    pub model: rd_binn_core::synth::ModelSpec,
    pub noise: NoiseSpec,
    pub clean_peak: f64,
}

pub fn cmd_synth(ctx: &Context) -> Result<StageManifest, CliError> {
    let InputConfig::Synth(s) = &ctx.config.input else {
        return Err(CliError::Config("synth needs a synth input section".into()));
    };
    let dir = ctx.dir("synth");
    prepare_stage_dir(&dir, ctx.force)?;
    let mut man = ctx.manifest("synth");
    let start = Instant::now();
    let ic = s.ic.on_grid(s.domain, ctx.config.bin_size, ctx.config.bin_size, s.domain.t_min)?;
    let model = TrueModel::from_spec(&s.model, ic)?;
    let clean = generate_clean(&model, &s.times(), ctx.config.solver)?;
    let peak = clean.max_value();
    let noise = NoiseSpec {
        gamma: s.noise.gamma,
        omega: s.noise.omega_for_peak(peak),
        seed: derive_seed(ctx.config.seed, 0x4015e),
    };
    let noisy = apply_noise(&clean, &noise)?;
    write_field(&dir, "clean", &clean)?;
    write_field(&dir, "noisy", &noisy)?;
    if s.write_points {
        let seed = derive_seed(ctx.config.seed, 0x9015);
        man.seeds.insert("points".into(), seed);
        let cloud = sample_points(&noisy, seed)?;
        write_atomic(&dir.join("points.csv"), |w| Ok(write_points_csv(w, &cloud)?))?;
    }
    write_json_atomic(
        &dir.join("truth.json"),
        &SynthTruth {
            model: s.model.clone(),
            noise,
            clean_peak: peak,
        },
    )?;
    man.seeds.insert("noise".into(), noise.seed);
    man.schemes.insert("solver".into(), SCHEME.into());
    man.wall_clock.insert("total".into(), elapsed(start));
    man.finish(&dir, &ctx.out)
}

pub fn cmd_preprocess(ctx: &Context) -> Result<StageManifest, CliError> {
    let dir = ctx.data_dir();
    let start = Instant::now();
    let field = match &ctx.config.input {
        InputConfig::Synth(_) => read_field(&ctx.dir("synth"), "noisy")?,
        InputConfig::Density(d) => {
            let meta: FieldMeta = read_json(&d.meta)?;
            let f = fs::File::open(&d.path).map_err(|e| CliError::Missing(format!("{}: {e}", d.path.display())))?;
            DensityField::read_csv(BufReader::new(f), &meta)?
        }
        InputConfig::Points(p) => {
            let f = fs::File::open(&p.path).map_err(|e| CliError::Missing(format!("{}: {e}", p.path.display())))?;
            let records = read_points_csv(BufReader::new(f))?;
            let cloud = match &p.frame_times {
                Some(t) => PointCloud::new(records, t.clone())?,
                None => PointCloud::from_records(records)?,
            };
            if cloud.frame_times().is_empty() {
                return Err(CliError::Config("no records and no frame_times: the tensor would have no frames".into()));
            }
            if cloud.is_empty() {
                log::warn!("point input {} is empty; writing zero tensors", p.path.display());
            }
            bin_points(&cloud, &p.domain, ctx.config.bin_size)?
        }
    };
    prepare_stage_dir(&dir, ctx.force)?;
    let mut man = ctx.manifest("preprocess");
    write_field(&dir, "density", &field)?;
    let (a, b, c) = field.shape();
    log::info!("density tensor {a}x{b}x{c}");
    man.wall_clock.insert("total".into(), elapsed(start));
    man.finish(&dir, &ctx.out)
}

fn load_data(ctx: &Context) -> Result<DensityField, CliError> {
    read_field(&ctx.data_dir(), "density")
}

/// One row of `train/summary.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummaryRow {
    pub patience: usize,
    pub split: usize,
    pub seed: u64,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatienceMedian {
    pub patience: usize,
    pub median_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub medians: Vec<PatienceMedian>,
    pub preferred_patience: usize,
    pub rule: String,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median best validation loss per patience, ascending in patience.
pub fn patience_medians(rows: &[TrainSummaryRow]) -> Vec<PatienceMedian> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by.entry(r.patience).or_default().push(r.best_val_loss);
    }
    by.into_iter()
        .map(|(patience, mut v)| PatienceMedian {
            patience,
            median_val_loss: median(&mut v),
        })
        .collect()
}

/// The smallest patience whose median validation loss is within `tolerance` of the best median.
pub fn choose(medians: &[PatienceMedian], tolerance: f64) -> usize {
    let best = medians.iter().map(|m| m.median_val_loss).fold(f64::INFINITY, f64::min);
    medians
        .iter()
        .find(|m| m.median_val_loss <= best * (1.0 + tolerance))
        .map(|m| m.patience)
        .expect("the best patience always qualifies")
}

fn save_model(dir: &Path, model: &BinnModel) -> Result<(), CliError> {
    for (name, net) in [("u", &model.nets.u), ("d", &model.nets.d), ("g", &model.nets.g)] {
        write_atomic(&dir.join(format!("{name}.json")), |w| Ok(net.write_json(w)?))?;
    }
    write_json_atomic(&dir.join("model.json"), &model.manifest())?;
    write_atomic(&dir.join("trace.csv"), |w| Ok(write_trace_csv(w, &model.trace)?))
}

fn load_model(dir: &Path) -> Result<BinnModel, CliError> {
    let net = |name: &str| -> Result<NetworkParams, CliError> {
        let p = dir.join(format!("{name}.json"));
        let f = fs::File::open(&p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
        Ok(NetworkParams::read_json(BufReader::new(f))?)
    };
    let manifest: ModelManifest = read_json(&dir.join("model.json"))?;
    let nets = BinnNets::new(net("u")?, net("d")?, net("g")?)?;
    Ok(BinnModel::from_manifest(manifest, nets, Vec::new()))
}

pub fn cmd_train(ctx: &Context) -> Result<StageManifest, CliError> {
    let field = load_data(ctx)?;
    let dir = ctx.dir("train");
    prepare_stage_dir(&dir, ctx.force)?;
    let mut man = ctx.manifest("train");
    let seeds = ctx.config.split_seeds();
    let mut patiences = ctx.config.patience_sweep.clone();
    patiences.sort_unstable();
    patiences.dedup();
    let jobs: Vec<(usize, usize)> = patiences
        .iter()
        .flat_map(|&p| (0..seeds.len()).map(move |k| (p, k)))
        .collect();
    let results: Vec<Result<(TrainSummaryRow, f64), CliError>> = ctx.pool.install(|| {
        jobs.par_iter()
            .map(|&(p, k)| {
                let cfg = TrainConfig {
                    es_patience: p,
                    ..ctx.config.train.clone()
                };
                let start = Instant::now();
                let model = train(&field, &cfg, seeds[k])?;
                let secs = elapsed(start);
                log::info!(
                    "patience {p} split {k}: stopped at epoch {} (best {} with {:.4e}) in {secs:.1}s",
                    model.stopped_epoch,
                    model.best_epoch,
                    model.best_val_loss
                );
                save_model(&ctx.split_dir(p, k), &model)?;
                Ok((
                    TrainSummaryRow {
                        patience: p,
                        split: k,
                        seed: seeds[k],
                        stopped_epoch: model.stopped_epoch,
                        best_epoch: model.best_epoch,
                        best_val_loss: model.best_val_loss,
                    },
                    secs,
                ))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let (row, secs) = r?;
        man.wall_clock.insert(format!("p{}/split{}", row.patience, row.split), secs);
        rows.push(row);
    }
    write_atomic(&dir.join("summary.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in &rows {
            out.serialize(r).map_err(rd_binn_core::Error::from)?;
        }
        out.flush()?;
        Ok(())
    })?;
    let medians = patience_medians(&rows);
    let (preferred, rule) = match ctx.config.preferred_patience {
        Some(p) => (p, "configured".to_string()),
        None => (
            choose(&medians, ctx.config.preferred_tolerance),
            format!(
                "smallest patience with median validation loss within {}% of the best",
                100.0 * ctx.config.preferred_tolerance
            ),
        ),
    };
    write_json_atomic(
        &dir.join("selection.json"),
        &Selection {
            medians,
            preferred_patience: preferred,
            rule,
        },
    )?;
    for (k, s) in seeds.iter().enumerate() {
        man.seeds.insert(format!("split{k}"), *s);
    }
    man.schemes.insert("residual_form".into(), RESIDUAL_FORM.into());
    man.schemes.insert("validation_loss".into(), VALIDATION_LOSS.into());
    man.finish(&dir, &ctx.out)
}

pub fn read_summary(ctx: &Context) -> Result<Vec<TrainSummaryRow>, CliError> {
    let p = ctx.dir("train").join("summary.csv");
    let f = fs::File::open(&p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
    let mut rdr = csv::Reader::from_reader(f);
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::Core(e.into())))
        .collect()
}

pub fn read_selection(ctx: &Context) -> Result<Selection, CliError> {
    read_json(&ctx.dir("train").join("selection.json"))
}

/// The trained splits at the preferred patience.
pub fn load_preferred_models(ctx: &Context) -> Result<Vec<BinnModel>, CliError> {
    let sel = read_selection(ctx)?;
    (0..ctx.config.n_splits)
        .map(|k| load_model(&ctx.split_dir(sel.preferred_patience, k)))
        .collect()
}

/// One row of a `*_candidates.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRow {
    pub repeat: usize,
    pub seed: u64,
    pub expr: String,
    pub template: String,
    pub complexity: usize,
    pub sq_error: f64,
}

fn kind_seed(base: u64, kind: CurveKind) -> u64 {
    match kind {
        CurveKind::Diffusion => derive_seed(base, 0xD1FF),
        CurveKind::Growth => derive_seed(base, 0x6807),
    }
}

pub fn cmd_ensemble_sr(ctx: &Context) -> Result<StageManifest, CliError> {
    let field = load_data(ctx)?;
    let models = load_preferred_models(ctx)?;
    let dir = ctx.dir("sr");
    prepare_stage_dir(&dir, ctx.force)?;
    let mut man = ctx.manifest("ensemble-sr");
    let start = Instant::now();
    let splits: Vec<TrainedSplit> = models.into_iter().map(|m| TrainedSplit::new(m, &field)).collect();
    let (d_curve, g_curve, bounds) = ensemble_curves(&splits, ctx.config.ensemble_grid_points)?;
    write_json_atomic(&dir.join("support.json"), &bounds)?;
    man.wall_clock.insert("ensemble".into(), elapsed(start));
    for curve in [&d_curve, &g_curve] {
        let name = curve.kind.name();
        write_atomic(&dir.join(format!("{name}_curve.csv")), |w| Ok(curve.write_csv(w)?))?;
        let data = curve.fit_data()?;
        let base = kind_seed(ctx.config.seed, curve.kind);
        man.seeds.insert(format!("sr_{name}"), base);
        let t = Instant::now();
        let cands: Vec<Result<Candidate, rd_binn_core::Error>> = ctx.pool.install(|| {
            (0..ctx.config.sr.repeats)
                .into_par_iter()
                .map(|r| sr_fit(&data, &ctx.config.sr, repeat_seed(base, r)))
                .collect()
        });
        let cands: Vec<Candidate> = cands.into_iter().collect::<Result<_, _>>()?;
        man.wall_clock.insert(format!("sr_{name}"), elapsed(t));
        write_atomic(&dir.join(format!("{name}_candidates.csv")), |w| {
            let mut out = csv::Writer::from_writer(w);
            for (r, c) in cands.iter().enumerate() {
                let row = CandidateRow {
                    repeat: r,
                    seed: c.seed,
                    expr: c.expr.to_string(),
                    template: canonical_template(&c.expr).text,
                    complexity: c.expr.complexity(),
                    sq_error: c.sq_error,
                };
                out.serialize(row).map_err(rd_binn_core::Error::from)?;
            }
            out.flush()?;
            Ok(())
        })?;
        let best = select_best(&cands)?;
        log::info!("{name}: {} ({} of {} candidates) -> {}", best.template, best.frequency, best.n_candidates, best.expr);
        write_json_atomic(&dir.join(format!("{name}_model.json")), &best)?;
    }
    man.finish(&dir, &ctx.out)
}

pub fn read_curve(ctx: &Context, kind: CurveKind) -> Result<EnsembleCurve, CliError> {
    let p = ctx.dir("sr").join(format!("{}_curve.csv", kind.name()));
    let f = fs::File::open(&p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
    Ok(EnsembleCurve::read_csv(BufReader::new(f), kind)?)
}

pub fn read_support(ctx: &Context) -> Result<SupportBounds, CliError> {
    read_json(&ctx.dir("sr").join("support.json"))
}

pub fn read_symbolic(ctx: &Context, kind: CurveKind) -> Result<SymbolicModel, CliError> {
    read_json(&ctx.dir("sr").join(format!("{}_model.json", kind.name())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub versus_data: CountMetrics,
    /// Symbolic forward solve against the network forward solve.
    pub sr_versus_fwd: Option<CurveMetrics>,
    pub fwd_clamped_mass: Option<f64>,
    pub sr_clamped_mass: Option<f64>,
}

fn mean_of(models: &Arc<Vec<BinnModel>>, kind: CurveKind) -> RateFn {
    let m = Arc::clone(models);
    RateFn::custom(move |u| {
        let s: f64 = m
            .iter()
            .map(|b| match kind {
                CurveKind::Diffusion => b.diffusion(u),
                CurveKind::Growth => b.growth(u),
            })
            .sum();
        s / m.len() as f64
    })
}

fn write_solution(dir: &Path, stem: &str, sol: &Solution) -> Result<(), CliError> {
    write_atomic(&dir.join(format!("{stem}_diagnostics.csv")), |w| Ok(sol.write_diagnostics_csv(w)?))
}

pub fn cmd_evaluate(ctx: &Context) -> Result<StageManifest, CliError> {
    let field = load_data(ctx)?;
    let dir = ctx.dir("eval");
    let times = field.times().to_vec();
    let mut curves = CountCurves::new(times.clone());
    curves.data = Some(count_from_solve(&field)?);
    let models = match load_preferred_models(ctx) {
        Ok(m) => Some(Arc::new(m)),
        Err(CliError::Missing(m)) => {
            log::warn!("no trained models ({m}); network curves omitted");
            None
        }
        Err(e) => return Err(e),
    };
    let symbolic = [CurveKind::Diffusion, CurveKind::Growth].map(|k| match read_symbolic(ctx, k) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("no symbolic {} model ({e}); N_SR omitted", k.name());
            None
        }
    });
    prepare_stage_dir(&dir, ctx.force)?;
    let mut man = ctx.manifest("evaluate");
    man.schemes.insert("solver".into(), SCHEME.into());
    let mut metrics = EvalMetrics {
        versus_data: CountMetrics::default(),
        sr_versus_fwd: None,
        fwd_clamped_mass: None,
        sr_clamped_mass: None,
    };
    if let Some(models) = &models {
        let n = models.len() as f64;
        let mut n_u = vec![0.0; times.len()];
        let mut ic = vec![0.0; field.n_x1() * field.n_x2()];
        for m in models.iter() {
            for (a, b) in n_u.iter_mut().zip(count_from_net(&m.nets.u, &m.scaling, &field, &times)?) {
                *a += b / n;
            }
            for (a, b) in ic.iter_mut().zip(ic_from_density_net(&m.nets.u, &m.scaling, &field)?.values()) {
                *a += b / n;
            }
        }
        curves.net = Some(n_u);
        let spec = SolveSpec {
            stepper: ctx.config.solver,
            ..SolveSpec::from_field(&field)
        }
        .with_initial(ic);
        let t = Instant::now();
        let fwd = solve_rd(&mean_of(models, CurveKind::Diffusion), &mean_of(models, CurveKind::Growth), &spec)?;
        man.wall_clock.insert("solve_fwd".into(), elapsed(t));
        write_solution(&dir, "fwd", &fwd)?;
        metrics.fwd_clamped_mass = Some(fwd.clamped_mass);
        curves.fwd = Some(count_from_solve(&fwd.field)?);
        if let [Some(d), Some(g)] = &symbolic {
            let scale = models[0].scaling.density;
            let rate = |m: &SymbolicModel| RateFn::Symbolic {
                expr: m.expr.clone(),
                density_scale: scale,
            };
            let t = Instant::now();
            let sr = solve_rd(&rate(d), &rate(g), &spec)?;
            man.wall_clock.insert("solve_sr".into(), elapsed(t));
            write_solution(&dir, "sr", &sr)?;
            metrics.sr_clamped_mass = Some(sr.clamped_mass);
            curves.sr = Some(count_from_solve(&sr.field)?);
        }
    }
    metrics.versus_data = compare(&curves)?;
    if let (Some(f), Some(s)) = (&curves.fwd, &curves.sr) {
        metrics.sr_versus_fwd = Some(curve_metrics(s, f)?);
    }
    write_atomic(&dir.join("counts.csv"), |w| Ok(curves.write_csv(w)?))?;
    write_json_atomic(&dir.join("metrics.json"), &metrics)?;
    man.finish(&dir, &ctx.out)
}

pub fn read_counts(ctx: &Context) -> Result<CountCurves, CliError> {
    let p = ctx.dir("eval").join("counts.csv");
    let f = fs::File::open(&p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
    Ok(CountCurves::read_csv(BufReader::new(f))?)
}

pub fn read_metrics(ctx: &Context) -> Result<EvalMetrics, CliError> {
    read_json(&ctx.dir("eval").join("metrics.json"))
}

/// Runs the stages in order; synth only for synthetic input.
pub fn cmd_run_all(ctx: &Context) -> Result<Vec<StageManifest>, CliError> {
    let mut out = Vec::new();
    if matches!(ctx.config.input, InputConfig::Synth(_)) {
        out.push(cmd_synth(ctx)?);
    }
    out.push(cmd_preprocess(ctx)?);
    out.push(cmd_train(ctx)?);
    out.push(cmd_ensemble_sr(ctx)?);
    out.push(cmd_evaluate(ctx)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(patience: usize, loss: f64) -> TrainSummaryRow {
        TrainSummaryRow {
            patience,
            split: 0,
            seed: 0,
            stopped_epoch: 0,
            best_epoch: 0,
            best_val_loss: loss,
        }
    }

    #[test]
    fn medians_per_patience() {
        let rows = [row(500, 3.0), row(500, 1.0), row(500, 2.0), row(1000, 1.0), row(1000, 2.0)];
        let m = patience_medians(&rows);
        assert_eq!(m, vec![
            PatienceMedian { patience: 500, median_val_loss: 2.0 },
            PatienceMedian { patience: 1000, median_val_loss: 1.5 },
        ]);
    }

    #[test]
    fn rule_prefers_the_smallest_patience_within_tolerance() {
        let m = |p, l| PatienceMedian { patience: p, median_val_loss: l };
        assert_eq!(choose(&[m(500, 1.02), m(1000, 1.01), m(2000, 1.0)], 0.03), 500);
        assert_eq!(choose(&[m(500, 1.2), m(1000, 1.02), m(2000, 1.0)], 0.03), 1000);
        assert_eq!(choose(&[m(500, 1.2), m(1000, 1.1), m(2000, 1.0)], 0.03), 2000);
    }
}
