use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use iqr_core::app::{
    config_hash, cross_validate, fence_line_fixture, read_schedule_csv, read_wind_csv, write_schedule_csv,
    write_wind_csv, RunManifest, Scaling, SourceGeometry, TransportTable, WindSeries,
};
use iqr_core::inference::{
    fmt_f64, mcmc_fit, posterior_summary, predictive_densities, read_curves_csv, write_curves_csv, Dataset,
    FitConfig, PosteriorSamples, SampleHeader,
};
use iqr_core::model::QuantileModel;
use iqr_core::scoring::{log_score, score_curves, CoefficientScore, LogScoreRow, MeanSe, QuantileGrid, ScoreReport};
use iqr_core::simulate::{gen_design, read_truth_csv, truth_points, write_truth_csv, DesignId, DesignSpec};

#[derive(Parser)]
#[command(name = "iqr", version, about = "Spatial quantile regression with I-splines and GPD tails")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridChoice {
    /// τ = 0.05, 0.06, ..., 0.95
    Central,
    /// τ = 0.950, 0.951, ..., 0.995
    UpperTail,
}

impl GridChoice {
    fn grid(self) -> QuantileGrid {
        match self {
            GridChoice::Central => QuantileGrid::central(),
            GridChoice::UpperTail => QuantileGrid::upper_tail(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            GridChoice::Central => "central",
            GridChoice::UpperTail => "upper-tail",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulation-study dataset and its true coefficients.
    Simulate {
        #[arg(long)]
        design: DesignId,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Observations per site (defaults to the standard design size).
        #[arg(long)]
        n_per_site: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit the model by MCMC.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// JSON fit configuration; defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
        /// Min-max scale predictors to [0, 1] before fitting.
        #[arg(long)]
        scale_predictors: bool,
        /// Fit on every row instead of only the training rows.
        #[arg(long)]
        all_rows: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Densities and quantiles of a fitted model at each row of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Scaling constants written by `fit --scale-predictors`.
        #[arg(long)]
        scaling: Option<PathBuf>,
        /// Fit directory whose draws give the posterior predictive density.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.5, 0.95])]
        levels: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// RMISE, coverage and log scores against known truth.
    Score {
        /// Curve summaries from `report`, one file per replicate.
        #[arg(long, required = true)]
        estimates: Vec<PathBuf>,
        /// True coefficients from `simulate`, one per replicate.
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = GridChoice::Central)]
        grid: GridChoice,
        /// In-sample predictions from `predict`, one per replicate.
        #[arg(long)]
        predictions_in: Vec<PathBuf>,
        /// Out-of-sample predictions from `predict`, one per replicate.
        #[arg(long)]
        predictions_out: Vec<PathBuf>,
        #[arg(long, default_value = "IQR")]
        method: String,
        #[arg(long, default_value = "")]
        design: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Transport predictors from hourly wind and source geometry.
    Transport {
        #[arg(long)]
        wind: PathBuf,
        /// CSV with a `period_start` column.
        #[arg(long)]
        schedule: PathBuf,
        /// JSON with `sources` and `sites` coordinate lists.
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Posterior β(τ, s) curves for plotting.
    Report {
        /// Directory written by `fit`.
        #[arg(long)]
        fit_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = GridChoice::Central)]
        grid: GridChoice,
        /// Credible level of the intervals.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// K-fold cross-validated log scores.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        scale_predictors: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the synthetic fence-line study inputs.
    Fixture {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(open(path)?).with_context(|| format!("cannot read dataset {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<FitConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(FitConfig::default()),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn finish(mut manifest: RunManifest, dir: &Path, outputs: &[&str]) -> Result<()> {
    for name in outputs {
        manifest.output(&dir.join(name))?;
    }
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn simulate(design: DesignId, seed: u64, n_per_site: Option<usize>, dir: &Path) -> Result<()> {
    out_dir(dir)?;
    let mut spec = DesignSpec::standard(design, seed);
    if let Some(n) = n_per_site {
        spec.n_per_site = n;
    }
    let sim = gen_design(&spec)?;
    let mut w = create(&dir.join("data.csv"))?;
    sim.data.write_csv(&mut w)?;
    w.flush()?;
    let mut levels: Vec<f64> = QuantileGrid::central().levels().to_vec();
    levels.extend_from_slice(QuantileGrid::upper_tail().levels());
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut w = create(&dir.join("truth.csv"))?;
    write_truth_csv(&truth_points(&spec, &levels)?, &mut w)?;
    w.flush()?;
    write_json(&dir.join("simulation.json"), &sim.manifest())?;

    let mut m = RunManifest::new("simulate");
    m.seed = Some(seed);
    m.config_hash = Some(config_hash(&spec)?);
    finish(m, dir, &["data.csv", "truth.csv", "simulation.json"])
}

struct FitArgs {
    data: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    iterations: Option<usize>,
    chains: Option<usize>,
    scale_predictors: bool,
    all_rows: bool,
    out_dir: PathBuf,
}

fn fit(a: FitArgs) -> Result<()> {
    let dir = &a.out_dir;
    out_dir(dir)?;
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.mcmc.seed = s;
    }
    if let Some(n) = a.iterations {
        config.mcmc.iterations = n;
    }
    if let Some(c) = a.chains {
        config.mcmc.chains = c;
    }
    let full = read_dataset(&a.data)?;
    let mut data = if a.all_rows { full } else { full.training() };
    let mut outputs = vec!["samples.csv", "samples.json", "model.json", "config.json"];
    if a.scale_predictors {
        let scaling = Scaling::fit(&data)?;
        data = scaling.apply(&data)?;
        write_json(&dir.join("scaling.json"), &scaling)?;
        outputs.push("scaling.json");
    }
    log::info!("fitting {} rows at {} sites", data.len(), data.n_sites());
    let samples = mcmc_fit(&data, &config)?;
    for b in &samples.acceptance {
        log::info!("chain {} block {}: acceptance {:.3}", b.chain, b.block, b.rate);
    }
    let mut w = create(&dir.join("samples.csv"))?;
    samples.write_csv(&mut w)?;
    w.flush()?;
    write_json(&dir.join("samples.json"), &samples.header())?;
    write_json(&dir.join("model.json"), &samples.model(samples.map_draw()?)?)?;
    write_json(&dir.join("config.json"), &config)?;

    let mut m = RunManifest::new("fit");
    m.seed = Some(config.mcmc.seed);
    m.config_hash = Some(config_hash(&config)?);
    m.input(&a.data)?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    finish(m, dir, &outputs)
}

fn load_samples(dir: &Path) -> Result<PosteriorSamples> {
    let header: SampleHeader = read_json(&dir.join("samples.json"))?;
    PosteriorSamples::read_csv(header, open(&dir.join("samples.csv"))?)
        .with_context(|| format!("cannot read samples in {}", dir.display()))
}

struct PredictArgs {
    model: PathBuf,
    data: PathBuf,
    scaling: Option<PathBuf>,
    samples: Option<PathBuf>,
    levels: Vec<f64>,
    out_dir: PathBuf,
}

fn predict(a: PredictArgs) -> Result<()> {
    let dir = &a.out_dir;
    out_dir(dir)?;
    if a.levels.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        bail!("quantile levels must lie in [0, 1]");
    }
    let model: QuantileModel = read_json(&a.model)?;
    let mut data = read_dataset(&a.data)?;
    if let Some(s) = &a.scaling {
        let scaling: Scaling = read_json(s)?;
        data = scaling.apply(&data)?;
    }
    if data.n_sites() > model.n_sites() || data.n_predictors() != model.n_predictors() {
        bail!(
            "dataset has {} sites and {} predictors, model has {} and {}",
            data.n_sites(),
            data.n_predictors(),
            model.n_sites(),
            model.n_predictors()
        );
    }
    let posterior = match &a.samples {
        Some(d) => Some(predictive_densities(&load_samples(d)?.models()?, &data)?),
        None => None,
    };
    let mut wr = csv::Writer::from_writer(create(&dir.join("predictions.csv"))?);
    let mut head = vec!["row".to_string(), "site_id".into(), "y".into(), "fold".into(), "density".into()];
    if posterior.is_some() {
        head.push("posterior_density".into());
    }
    head.extend(a.levels.iter().map(|t| format!("q_{}", fmt_f64(*t))));
    wr.write_record(&head)?;
    for r in 0..data.len() {
        let (s, x, y) = (data.site(r), data.x(r), data.y(r));
        let mut rec = vec![
            r.to_string(),
            s.to_string(),
            fmt_f64(y),
            data.fold(r).map_or(String::new(), |f| f.to_string()),
            fmt_f64(model.density(y, x, s).unwrap_or(0.0)),
        ];
        if let Some(p) = &posterior {
            rec.push(fmt_f64(p[r]));
        }
        for &t in &a.levels {
            rec.push(fmt_f64(model.q_eval(t, x, s)?));
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;

    let mut m = RunManifest::new("predict");
    m.input(&a.model)?.input(&a.data)?;
    finish(m, dir, &["predictions.csv"])
}

/// Densities from a predictions file, preferring the posterior column.
fn read_densities(path: &Path) -> Result<Vec<f64>> {
    let mut rd = csv::Reader::from_reader(open(path)?);
    let head = rd.headers()?.clone();
    let col = head
        .iter()
        .position(|h| h == "posterior_density")
        .or_else(|| head.iter().position(|h| h == "density"))
        .with_context(|| format!("{} has no density column", path.display()))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(rec[col].parse().with_context(|| format!("bad density `{}`", &rec[col]))?);
    }
    Ok(out)
}

struct ScoreArgs {
    estimates: Vec<PathBuf>,
    truth: Vec<PathBuf>,
    grid: GridChoice,
    predictions_in: Vec<PathBuf>,
    predictions_out: Vec<PathBuf>,
    method: String,
    design: String,
    out_dir: PathBuf,
}

fn score(a: ScoreArgs) -> Result<()> {
    let dir = &a.out_dir;
    out_dir(dir)?;
    if a.estimates.len() != a.truth.len() {
        bail!("{} estimate files but {} truth files", a.estimates.len(), a.truth.len());
    }
    if a.predictions_in.len() != a.predictions_out.len() {
        bail!("in-sample and out-of-sample prediction files must pair up");
    }
    let grid = a.grid.grid();
    let mut per_p: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (e, t) in a.estimates.iter().zip(&a.truth) {
        let est = read_curves_csv(open(e)?)?;
        let tru = read_truth_csv(open(t)?)?;
        let n_p = tru.iter().map(|t| t.p + 1).max().unwrap_or(0);
        per_p.resize(per_p.len().max(n_p), (vec![], vec![]));
        for (p, slot) in per_p.iter_mut().enumerate().take(n_p) {
            let (r, c) = score_curves(&est, &tru, &grid, p)?;
            slot.0.push(r);
            slot.1.push(c);
        }
    }
    let mut report = ScoreReport::default();
    for (p, (r, c)) in per_p.iter().enumerate() {
        let rm = MeanSe::of(r)?;
        report.coefficients.push(CoefficientScore {
            method: a.method.clone(),
            design: a.design.clone(),
            grid: a.grid.name().to_string(),
            coefficient: format!("beta_{p}"),
            rmise_mean: rm.mean,
            rmise_se: rm.se,
            coverage: c.iter().sum::<f64>() / c.len() as f64,
            replicates: r.len(),
        });
    }
    if !a.predictions_in.is_empty() {
        let (mut ins, mut outs) = (vec![], vec![]);
        for (i, o) in a.predictions_in.iter().zip(&a.predictions_out) {
            ins.push(log_score(&read_densities(i)?)?.mean);
            outs.push(log_score(&read_densities(o)?)?.mean);
        }
        let (i, o) = (MeanSe::of(&ins)?, MeanSe::of(&outs)?);
        report.log_scores.push(LogScoreRow {
            method: a.method.clone(),
            design: a.design.clone(),
            in_sample_mean: i.mean,
            in_sample_se: i.se,
            out_of_sample_mean: o.mean,
            out_of_sample_se: o.se,
            replicates: ins.len(),
        });
    }
    let mut w = create(&dir.join("scores.json"))?;
    report.write_json(&mut w)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = create(&dir.join("coefficients.csv"))?;
    report.write_coefficients_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("log_scores.csv"))?;
    report.write_log_scores_csv(&mut w)?;
    w.flush()?;

    let mut m = RunManifest::new("score");
    for p in a.estimates.iter().chain(&a.truth).chain(&a.predictions_in).chain(&a.predictions_out) {
        m.input(p)?;
    }
    finish(m, dir, &["scores.json", "coefficients.csv", "log_scores.csv"])
}

fn transport(wind: &Path, schedule: &Path, geometry: &Path, dir: &Path) -> Result<()> {
    out_dir(dir)?;
    let obs = read_wind_csv(open(wind)?)?;
    let starts = read_schedule_csv(open(schedule)?)?;
    let geom: SourceGeometry = read_json(geometry)?;
    let series = WindSeries::from_observations(&obs, &starts)?;
    let table = TransportTable::compute(&series, &geom)?;
    let mut w = create(&dir.join("transport.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    let mut m = RunManifest::new("transport");
    m.input(wind)?.input(schedule)?.input(geometry)?;
    finish(m, dir, &["transport.csv"])
}

fn report(fit_dir: &Path, grid: GridChoice, level: f64, dir: &Path) -> Result<()> {
    out_dir(dir)?;
    if !(level > 0.0 && level < 1.0) {
        bail!("credible level must lie in (0, 1)");
    }
    let samples = load_samples(fit_dir)?;
    let sites: Vec<usize> = (0..samples.layout.n_sites()).collect();
    let points = posterior_summary(&samples, grid.grid().levels(), &sites, level)?;
    let mut w = create(&dir.join("curves.csv"))?;
    write_curves_csv(&points, &mut w)?;
    w.flush()?;
    let mut m = RunManifest::new("report");
    m.seed = Some(samples.seed);
    m.input(&fit_dir.join("samples.json"))?.input(&fit_dir.join("samples.csv"))?;
    finish(m, dir, &["curves.csv"])
}

fn cv(data: &Path, config: Option<&Path>, folds: usize, seed: u64, scale: bool, dir: &Path) -> Result<()> {
    out_dir(dir)?;
    let cfg = load_config(config)?;
    let mut d = read_dataset(data)?;
    if scale {
        d = Scaling::fit(&d)?.apply(&d)?;
    }
    let rep = cross_validate(&d, folds, seed, &cfg)?;
    let mut w = create(&dir.join("cv.csv"))?;
    rep.write_csv(&mut w)?;
    w.flush()?;
    write_json(&dir.join("cv.json"), &rep)?;
    let mut m = RunManifest::new("cv");
    m.seed = Some(seed);
    m.config_hash = Some(config_hash(&cfg)?);
    m.input(data)?;
    finish(m, dir, &["cv.csv", "cv.json"])
}

fn fixture(seed: u64, dir: &Path) -> Result<()> {
    out_dir(dir)?;
    let f = fence_line_fixture(seed)?;
    let mut w = create(&dir.join("wind.csv"))?;
    write_wind_csv(&f.wind, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("schedule.csv"))?;
    write_schedule_csv(&f.schedule, &mut w)?;
    w.flush()?;
    write_json(&dir.join("geometry.json"), &f.geometry)?;
    let mut w = create(&dir.join("data.csv"))?;
    f.data.write_csv(&mut w)?;
    w.flush()?;
    write_json(&dir.join("config.json"), &f.config)?;
    let mut m = RunManifest::new("fixture");
    m.seed = Some(seed);
    finish(m, dir, &["wind.csv", "schedule.csv", "geometry.json", "data.csv", "config.json"])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            design,
            seed,
            n_per_site,
            out_dir,
        } => simulate(design, seed, n_per_site, &out_dir),
        Command::Fit {
            data,
            config,
            seed,
            iterations,
            chains,
            scale_predictors,
            all_rows,
            out_dir,
        } => fit(FitArgs {
            data,
            config,
            seed,
            iterations,
            chains,
            scale_predictors,
            all_rows,
            out_dir,
        }),
        Command::Predict {
            model,
            data,
            scaling,
            samples,
            levels,
            out_dir,
        } => predict(PredictArgs {
            model,
            data,
            scaling,
            samples,
            levels,
            out_dir,
        }),
        Command::Score {
            estimates,
            truth,
            grid,
            predictions_in,
            predictions_out,
            method,
            design,
            out_dir,
        } => score(ScoreArgs {
            estimates,
            truth,
            grid,
            predictions_in,
            predictions_out,
            method,
            design,
            out_dir,
        }),
        Command::Transport {
            wind,
            schedule,
            geometry,
            out_dir,
        } => transport(&wind, &schedule, &geometry, &out_dir),
        Command::Report {
            fit_dir,
            grid,
            level,
            out_dir,
        } => report(&fit_dir, grid, level, &out_dir),
        Command::Cv {
            data,
            config,
            folds,
            seed,
            scale_predictors,
            out_dir,
        } => cv(&data, config.as_deref(), folds, seed, scale_predictors, &out_dir),
        Command::Fixture { seed, out_dir } => fixture(seed, &out_dir),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
