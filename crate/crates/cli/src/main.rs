//! `hbrnorm`: fit, transfer and evaluate normative models from the command line.

mod failure;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hbrnorm::archive::{self, write_atomic};
use hbrnorm::combat::{combat_apply, combat_fit};
use hbrnorm::data::{ingest_csv, split, write_csv, Dataset, Schema, Standardizer};
use hbrnorm::evaluation::{
    anomaly_auc, regression_metrics, site_probe, Discriminant, EvalError, RepetitionDeviations,
    DEFAULT_ALPHA, DEFAULT_PERMUTATIONS, DEFAULT_REPETITIONS,
};
use hbrnorm::experiments::{self, AnomalySettings};
use hbrnorm::inference::SamplerConfig;
use hbrnorm::math::derive_seed;
use hbrnorm::models::{fit, FittedNormativeModel, MeanForm, ModelSpec, NoiseForm, Strategy};
use hbrnorm::synth::{generate, GenConfig};
use hbrnorm::transfer::{distill, predict_priors_only, recalibrate, HyperpriorPack};

use failure::{Class, Failure};
use ndarray::Axis;

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "hbrnorm",
    version,
    about = "Hierarchical Bayesian normative modelling across sites"
)]
struct Cli {
    /// Worker threads for per-unit fitting and prediction.
    #[arg(long, global = true, env = "HBRNORM_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site dataset.
    Simulate {
        /// Generator config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a matching schema file.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Fit a normative model on every response unit.
    Fit {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// `homo` or `hetero:<degree>`.
        #[arg(long, default_value = "homo")]
        noise: NoiseForm,
        /// `linear` or `poly:<degree>`.
        #[arg(long, default_value = "linear")]
        mean: MeanForm,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove batch effects with empirical Bayes ComBat.
    Harmonize {
        #[command(flatten)]
        input: Input,
        /// Covariates whose effect is preserved (comma separated).
        #[arg(long, value_delimiter = ',')]
        design: Vec<String>,
        /// Apply a previously fitted adjustment instead of fitting one.
        #[arg(long, conflicts_with = "model_out")]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Predictive mean and sd per row and unit.
    Predict {
        #[command(flatten)]
        input: Input,
        #[arg(long, required_unless_present = "pack")]
        model: Option<PathBuf>,
        /// Priors-only prediction from a hyperprior pack (no refitting).
        #[arg(long, conflicts_with = "model")]
        pack: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deviation z-scores and two-sided p-values per row and unit.
    Score {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an hbr model's hyperparameter posteriors into a pack.
    Distill {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an hbr model on new sites with a pack as hyperpriors.
    Recalibrate {
        #[arg(long)]
        pack: PathBuf,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation metrics.
    Evaluate {
        #[command(subcommand)]
        what: Evaluate,
    },
    /// Run a synthetic experiment end to end and print its tables.
    Repro {
        #[arg(long, value_enum)]
        setting: Setting,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler warmup per fit (regression: 1000; anomaly recalibrations: 500).
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
    },
}

#[derive(Subcommand)]
enum Evaluate {
    /// RHO, SMSE and MSLL of a model on held-out data.
    Regression {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
        /// Training data supplying the MSLL/SMSE baseline moments; the
        /// model's own training moments are used when omitted.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated site classifier on deviation scores.
    Sites {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-unit patient/healthy AUC with permutation tests over repeated
    /// recalibrations on random healthy halves.
    Anomaly {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        pack: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
        perms: usize,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        reps: usize,
        /// Fraction of healthy rows per site used for recalibration.
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        /// Patient group to test; required when the data has several.
        #[arg(long)]
        diagnosis: Option<String>,
        #[arg(long, value_enum, default_value = "absolute")]
        discriminant: DiscriminantArg,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    data: PathBuf,
    /// key=value schema file (subject, covariates, responses, batches, group).
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            target_accept: self.target_accept,
            ..SamplerConfig::default()
        }
        .with_chains(self.chains)
        .with_budget(self.warmup, self.draws)
        .with_seed(self.seed)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Pooling,
    Nopool,
    Hbr,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Pooling => Strategy::Pooling,
            StrategyArg::Nopool => Strategy::NoPooling,
            StrategyArg::Hbr => Strategy::Hbr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DiscriminantArg {
    Absolute,
    Positive,
    Negative,
}

impl From<DiscriminantArg> for Discriminant {
    fn from(d: DiscriminantArg) -> Self {
        match d {
            DiscriminantArg::Absolute => Discriminant::Absolute,
            DiscriminantArg::Positive => Discriminant::Positive,
            DiscriminantArg::Negative => Discriminant::Negative,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Setting {
    Regression,
    Anomaly,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            let f = Failure::new(Class::Other, head.join(" ").trim_start_matches("error: "));
            eprintln!("{f}");
            return ExitCode::from(f.class.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.class.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| {
                Failure::new(
                    Class::Other,
                    format!("cannot start {n} worker threads: {e}"),
                )
            })?;
    }
    match cli.command {
        Command::Simulate {
            config,
            seed,
            out,
            schema_out,
        } => simulate(config.as_deref(), seed, &out, schema_out.as_deref()),
        Command::Fit {
            input,
            strategy,
            noise,
            mean,
            sampler,
            out,
        } => {
            let ds = load(&input)?;
            let spec = ModelSpec::new(strategy.into())
                .with_noise(noise)
                .with_mean(mean);
            eprintln!("seed: {}", sampler.seed);
            let model = fit(&spec, &ds, &sampler.config())?;
            report_diagnostics(&model);
            archive::save_model(&model, &out)?;
            Ok(())
        }
        Command::Harmonize {
            input,
            design,
            model,
            out,
            model_out,
        } => {
            let ds = load(&input)?;
            let adjust = match model {
                Some(path) => archive::load_combat(&path)?,
                None => combat_fit(&ds, &design)?,
            };
            let harmonized = combat_apply(&adjust, &ds)?;
            let mut buf = Vec::new();
            write_csv(&harmonized, &mut buf)?;
            write_atomic(&out, &buf)?;
            if let Some(path) = model_out {
                archive::save_combat(&adjust, &path)?;
            }
            Ok(())
        }
        Command::Predict {
            input,
            model,
            pack,
            out,
        } => {
            let schema = Schema::from_file(&input.schema)?.without_responses();
            let ds = ingest(&input.data, &schema)?;
            let pred = match (model, pack) {
                (Some(m), _) => archive::load_model(&m)?.predict_dataset(&ds)?,
                (None, Some(p)) => predict_priors_only(&archive::load_pack(&p)?, ds.covariates())?,
                (None, None) => unreachable!("clap requires --model or --pack"),
            };
            write_atomic(&out, &table::prediction(&ds, &pred))?;
            Ok(())
        }
        Command::Score { input, model, out } => {
            let ds = load(&input)?;
            let model = archive::load_model(&model)?;
            write_atomic(&out, &table::deviations(&ds, &model.deviations(&ds)?))?;
            Ok(())
        }
        Command::Distill { model, out } => {
            let pack = distill(&archive::load_model(&model)?)?;
            archive::save_pack(&pack, &out)?;
            Ok(())
        }
        Command::Recalibrate {
            pack,
            input,
            sampler,
            out,
        } => {
            let pack = archive::load_pack(&pack)?;
            let ds = load(&input)?;
            eprintln!("seed: {}", sampler.seed);
            let model = recalibrate(&pack, &ds, &pack_spec(&pack), &sampler.config())?;
            report_diagnostics(&model);
            archive::save_model(&model, &out)?;
            Ok(())
        }
        Command::Evaluate { what } => evaluate(what),
        Command::Repro {
            setting,
            seed,
            warmup,
            draws,
        } => repro(setting, seed, warmup, draws),
    }
}

fn ingest(path: &Path, schema: &Schema) -> Outcome<Dataset> {
    let ingested = ingest_csv(path, schema)?;
    if ingested.dropped > 0 {
        eprintln!(
            "dropped {} incomplete rows from {}",
            ingested.dropped,
            path.display()
        );
    }
    Ok(ingested.dataset)
}

fn load(input: &Input) -> Outcome<Dataset> {
    ingest(&input.data, &Schema::from_file(&input.schema)?)
}

fn pack_spec(pack: &HyperpriorPack) -> ModelSpec {
    ModelSpec::new(Strategy::Hbr)
        .with_mean(pack.mean_form)
        .with_noise(pack.noise_form)
}

fn simulate(config: Option<&Path>, seed: u64, out: &Path, schema_out: Option<&Path>) -> Outcome {
    let cfg = match config {
        Some(path) => GenConfig::from_file(path)?,
        None => GenConfig::default(),
    };
    eprintln!("seed: {seed}");
    let (ds, _) = generate(&cfg, seed)?;
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf)?;
    write_atomic(out, &buf)?;
    if let Some(path) = schema_out {
        write_atomic(path, Schema::for_dataset(&ds).to_config().as_bytes())?;
    }
    eprintln!(
        "{} rows, {} units, {} batches",
        ds.n_rows(),
        ds.n_units(),
        ds.batch_index().len()
    );
    Ok(())
}

fn report_diagnostics(model: &FittedNormativeModel) {
    let summaries = model.summaries();
    for s in &summaries {
        println!(
            "{}\tr_hat {:.4}\tess_bulk {:.0}\tdivergences {}/{}{}",
            s.unit,
            s.max_r_hat,
            s.min_ess_bulk,
            s.divergences,
            s.transitions,
            if s.flagged { "\tFLAGGED" } else { "" }
        );
    }
    let flagged = summaries.iter().filter(|s| s.flagged).count();
    eprintln!("{} units fitted, {flagged} flagged", summaries.len());
}

fn evaluate(what: Evaluate) -> Outcome {
    match what {
        Evaluate::Regression {
            input,
            model,
            train,
            out,
        } => {
            let ds = load(&input)?;
            let model = archive::load_model(&model)?;
            let baseline = match train {
                Some(path) => {
                    let schema = Schema::from_file(&input.schema)?;
                    let train = ingest(&path, &schema)?;
                    Standardizer::fit(&train.select_units(&model.response_columns(&train)?))?
                }
                None => model.standardizer.clone(),
            };
            let pred = model.predict_dataset(&ds)?;
            let y = ds
                .responses()
                .select(Axis(1), &model.response_columns(&ds)?);
            let report = regression_metrics(
                &pred.unit_names,
                pred.mean.view(),
                pred.sd.view(),
                y.view(),
                &baseline,
            )?;
            let rho = report
                .median_rho
                .map_or("NA".to_string(), |r| format!("{r:.4}"));
            println!(
                "median rho {rho}\tmedian smse {:.4}\tmedian msll {:.4}",
                report.median_smse, report.median_msll
            );
            if let Some(path) = out {
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                write_atomic(&path, &buf)?;
            }
            Ok(())
        }
        Evaluate::Sites {
            input,
            model,
            folds,
            seed,
        } => {
            let ds = load(&input)?;
            let model = archive::load_model(&model)?;
            eprintln!("seed: {seed}");
            let z = model.deviations(&ds)?.z;
            let batches = ds.batch_index().assign(ds.batch_labels())?;
            let r = site_probe(z.view(), &batches, folds, seed)?;
            println!(
                "balanced accuracy {:.4}\tchance {:.4} ± {:.4}\tp {:.3e}\t{}",
                r.balanced_accuracy,
                r.chance,
                r.chance_se,
                r.p_value,
                if r.at_chance() {
                    "at chance"
                } else {
                    "above chance"
                }
            );
            Ok(())
        }
        Evaluate::Anomaly {
            input,
            pack,
            perms,
            alpha,
            reps,
            fraction,
            diagnosis,
            discriminant,
            sampler,
            out,
        } => {
            // Checked before the recalibrations, which are the slow part.
            if perms < 100 {
                return Err(EvalError::Permutations(perms).into());
            }
            if reps == 0 || !(alpha > 0.0 && alpha < 1.0) {
                return Err(Failure::new(
                    Class::Other,
                    "--reps must be positive and --alpha must lie in (0, 1)",
                ));
            }
            let ds = load(&input)?;
            let pack = archive::load_pack(&pack)?;
            let diagnosis = pick_diagnosis(&ds, diagnosis)?;
            let spec = pack_spec(&pack);
            eprintln!("seed: {}", sampler.seed);
            let mut deviations = Vec::with_capacity(reps);
            for k in 0..reps {
                let rep_seed = derive_seed(sampler.seed, 100 + k as u64);
                let (calib, test) = split(&ds, fraction, rep_seed, true)?;
                let cfg = sampler.config().with_seed(rep_seed);
                let model = recalibrate(&pack, &calib, &spec, &cfg)?;
                let z = model.deviations(&test)?.z;
                let pick = |rows: Vec<usize>| z.select(Axis(0), &rows);
                deviations.push(RepetitionDeviations {
                    healthy: pick(test.rows_where(|g| g.is_healthy())),
                    patients: pick(test.rows_where(|g| g.diagnosis() == Some(diagnosis.as_str()))),
                });
                eprintln!("repetition {}/{reps} done", k + 1);
            }
            let report = anomaly_auc(
                &pack
                    .units
                    .iter()
                    .map(|u| u.unit.clone())
                    .collect::<Vec<_>>(),
                &diagnosis,
                &deviations,
                perms,
                alpha,
                discriminant.into(),
                derive_seed(sampler.seed, 2),
            )?;
            let stable = report.stable_units();
            println!("stable units ({}): {}", stable.len(), stable.join(","));
            if let Some(path) = out {
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                write_atomic(&path, &buf)?;
            }
            Ok(())
        }
    }
}

fn pick_diagnosis(ds: &Dataset, requested: Option<String>) -> Outcome<String> {
    let mut found: Vec<&str> = ds.groups().iter().filter_map(|g| g.diagnosis()).collect();
    found.sort_unstable();
    found.dedup();
    match requested {
        Some(d) if found.contains(&d.as_str()) => Ok(d),
        Some(d) => Err(Failure::new(
            Class::Schema,
            format!("no rows with diagnosis `{d}` (found: {})", found.join(", ")),
        )),
        None if found.len() == 1 => Ok(found[0].to_string()),
        None if found.is_empty() => {
            Err(Failure::new(Class::Degenerate, "data has no patient rows"))
        }
        None => Err(Failure::new(
            Class::Schema,
            format!(
                "several diagnoses present ({}); choose one with --diagnosis",
                found.join(", ")
            ),
        )),
    }
}

fn repro(setting: Setting, seed: u64, warmup: Option<usize>, draws: Option<usize>) -> Outcome {
    eprintln!("seed: {seed}");
    match setting {
        Setting::Regression => {
            let (warmup, draws) = (warmup.unwrap_or(1000), draws.unwrap_or(1000));
            let ordering = experiments::method_ordering(&[seed], warmup, draws)?;
            println!("# median MSLL by method");
            print!("{}", ordering.table());
            println!("# site classification on deviation scores");
            let probe = experiments::probe(seed, warmup, draws)?;
            print!("{}", probe.table());
        }
        Setting::Anomaly => {
            let defaults = AnomalySettings::default();
            let budget = (
                warmup.unwrap_or(defaults.budget.0),
                draws.unwrap_or(defaults.budget.1),
            );
            let settings = AnomalySettings { budget, ..defaults };
            let outcome = experiments::anomaly(&settings, &[seed])?;
            println!("# planted units {:?}", settings.affected);
            print!("{}", outcome.table());
        }
    }
    Ok(())
}
