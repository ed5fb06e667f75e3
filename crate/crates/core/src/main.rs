use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use chainflow::config::{RunConfig, RESOLVED_NAME};
use chainflow::error::{Error, Result};
use chainflow::eval::{evaluate_pipeline, summary_table, MetricReport, PipelineArm};
use chainflow::flow::{build_schedule, ConditioningSource};
use chainflow::pipeline::{plan_scenario, register_model};
use chainflow::scenario::{generate_dataset, load_dataset, save_dataset, Scenario};
use chainflow::tensor::checkpoint::{self, ConfigDigest};
use chainflow::tensor::ParamStore;
use chainflow::training::{train_stage1, train_stage2, Stage2Context};

#[derive(Parser)]
#[command(name = "chainflow", version, about = "Two-stage trajectory planner on synthetic driving scenarios")]
struct Cli {
    /// TOML run config; every key is optional.
    #[arg(long, global = true, env = chainflow::config::CONFIG_ENV, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-path config override such as `train.base_lr=1e-3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker thread cap [default: all cores].
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset (JSON lines).
    GenData {
        /// Master seed [default: config `seed`].
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage I: train the chain and the scorer.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage II: train the refiner and the scorer on frozen proposals.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one or more arms and write per-scenario CSV reports.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint for the `full` and `ar-only` arms.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Checkpoint trained with semantic conditioning [default: --ckpt].
        #[arg(long)]
        ckpt_semantic: Option<PathBuf>,
        /// Checkpoint trained with scene-token conditioning.
        #[arg(long)]
        ckpt_scene: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "full,ar-only")]
        arms: Vec<Arm>,
        /// Denoising steps [default: config `model.flow.inference_steps`].
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan one scenario and draw it as SVG.
    Plan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario_id: String,
        #[arg(long)]
        ckpt: PathBuf,
        /// Skip refinement and select among raw proposals.
        #[arg(long, default_value_t = false)]
        ar_only: bool,
        #[arg(long)]
        svg_out: PathBuf,
    },
    /// Evaluate the full arm at several denoising step counts.
    SweepSteps {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,12,16")]
        steps: Vec<usize>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arm {
    Full,
    ArOnly,
    CondSemantic,
    CondScene,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::ArOnly => "ar-only",
            Arm::CondSemantic => "cond-semantic",
            Arm::CondScene => "cond-scene",
        }
    }
}

/// Files and directories created by the running command, removed on failure.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    /// Registers `path` as an output and clears any stale copy.
    fn claim(&mut self, path: PathBuf) -> Result<PathBuf> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.dir(parent)?;
        }
        if path.exists() {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        self.files.push(path.clone());
        Ok(path)
    }

    fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.claim(path)?;
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    fn remove_all(&self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir_all(d);
        }
    }
}

struct Run {
    config: RunConfig,
    outputs: Outputs,
    started: SystemTime,
    clock: Instant,
    argv: Vec<String>,
}

impl Run {
    /// Resolved config and timing sidecar for an output directory.
    fn echo_dir(&mut self, dir: &Path) -> Result<()> {
        self.outputs.write(dir.join(RESOLVED_NAME), self.config.to_toml()?)?;
        self.outputs.write(dir.join("run_meta.json"), self.meta()?)
    }

    /// Resolved config and timing sidecar next to an output file.
    fn echo_file(&mut self, file: &Path) -> Result<()> {
        self.outputs.write(sidecar(file, "config.toml"), self.config.to_toml()?)?;
        self.outputs.write(sidecar(file, "meta.json"), self.meta()?)
    }

    fn meta(&self) -> Result<String> {
        let started = self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = serde_json::json!({
            "argv": self.argv,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": started,
            "elapsed_seconds": self.clock.elapsed().as_secs_f64(),
            "threads": rayon::current_num_threads(),
        });
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))
    }
}

fn sidecar(file: &Path, suffix: &str) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    file.with_file_name(name)
}

fn load_data(path: &Path, config: &RunConfig) -> Result<Vec<Scenario>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("dataset {} does not exist", path.display())));
    }
    load_dataset(path, &config.scenario)
}

/// Loads a checkpoint and checks it was written for `config`.
fn load_ckpt(path: &Path, config: &RunConfig) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    let (digest, saved) = checkpoint::load(path)?;
    if digest != config.model_digest() {
        return Err(Error::Checkpoint(format!(
            "{} was written for a different model config",
            path.display()
        )));
    }
    let mut store = register_model(&config.model, config.seed)?;
    store.load_values_from(&saved)?;
    Ok(store)
}

/// Saves the checkpoint after every epoch and reports progress.
fn epoch_saver<'a>(
    stage: u8,
    epochs: usize,
    clock: Instant,
    ckpt: &'a Path,
    digest: &'a ConfigDigest,
) -> impl FnMut(usize, &ParamStore) -> Result<()> + 'a {
    move |epoch, store| {
        checkpoint::save(ckpt, store, digest)?;
        eprintln!("stage {stage} epoch {}/{epochs} {:.0}s", epoch + 1, clock.elapsed().as_secs_f64());
        Ok(())
    }
}

fn execute(cli: Cli, run: &mut Run) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, out } => {
            let seed = seed.unwrap_or(run.config.seed);
            let data = generate_dataset(seed, count, &run.config.scenario)?;
            let path = run.outputs.claim(out.clone())?;
            save_dataset(&data, &path, &run.config.scenario)?;
            run.echo_file(&out)?;
            eprintln!("wrote {} scenarios to {}", data.len(), out.display());
        }
        Command::TrainStage1 { data, out } => {
            let c = run.config.clone();
            let data = load_data(&data, &c)?;
            run.outputs.dir(&out)?;
            let mut store = register_model(&c.model, c.seed)?;
            let log = run.outputs.claim(out.join("train_log.csv"))?;
            let ckpt = run.outputs.claim(out.join("stage1.ckpt"))?;
            let digest = c.stage1_digest();
            let mut hook = epoch_saver(1, c.train.epochs_stage1, run.clock, &ckpt, &digest);
            let last = train_stage1(&data, &mut store, &c.model, &c.spec(), &c.train, c.seed, Some(&log), &mut hook)?;
            checkpoint::save(&ckpt, &store, &digest)?;
            run.echo_dir(&out)?;
            eprintln!("stage 1 done: loss {:.4}, train minADE {:.3}", last.loss_total, last.min_ade);
        }
        Command::TrainStage2 { data, stage1_ckpt, out } => {
            let c = run.config.clone();
            let data = load_data(&data, &c)?;
            if !stage1_ckpt.exists() {
                return Err(Error::Checkpoint(format!("{} does not exist", stage1_ckpt.display())));
            }
            let (digest, stage1) = checkpoint::load(&stage1_ckpt)?;
            if digest != c.stage1_digest() {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different chain or scorer config",
                    stage1_ckpt.display()
                )));
            }
            run.outputs.dir(&out)?;
            let mut store = register_model(&c.model, c.seed)?;
            for (name, p) in stage1.iter().filter(|(n, _)| !n.starts_with(chainflow::flow::PREFIX)) {
                store.set_value(name, p.value.clone())?;
            }
            let schedule = build_schedule(c.model.flow.n_train_steps)?;
            let cx = Stage2Context {
                model: &c.model,
                spec: c.spec(),
                schedule: &schedule,
                weights: c.train.weights,
                seed: c.seed,
            };
            let log = run.outputs.claim(out.join("train_log.csv"))?;
            let ckpt = run.outputs.claim(out.join("stage2.ckpt"))?;
            let digest = c.model_digest();
            let mut hook = epoch_saver(2, c.train.epochs_stage2, run.clock, &ckpt, &digest);
            let last = train_stage2(&data, &mut store, &cx, &c.train, Some(&log), &mut hook)?;
            checkpoint::save(&ckpt, &store, &digest)?;
            run.echo_dir(&out)?;
            eprintln!("stage 2 done: loss {:.4}", last.loss_total);
        }
        Command::Eval {
            data,
            ckpt,
            ckpt_semantic,
            ckpt_scene,
            arms,
            steps,
            out,
        } => {
            let data = load_data(&data, &run.config)?;
            let n_steps = steps.unwrap_or(run.config.model.flow.inference_steps);
            let mut reports: Vec<MetricReport> = Vec::new();
            for arm in arms {
                let mut c = run.config.clone();
                let path = match arm {
                    Arm::Full | Arm::ArOnly => ckpt.clone(),
                    Arm::CondSemantic => {
                        c.model.flow.conditioning_source = ConditioningSource::SemanticCtx;
                        ckpt_semantic.clone().or_else(|| ckpt.clone())
                    }
                    Arm::CondScene => {
                        c.model.flow.conditioning_source = ConditioningSource::SceneTokens;
                        ckpt_scene.clone()
                    }
                };
                let path = path.ok_or_else(|| Error::InvalidArgument(format!("arm {} needs a checkpoint", arm.name())))?;
                let store = load_ckpt(&path, &c)?;
                let schedule = build_schedule(c.model.flow.n_train_steps)?;
                let pa = PipelineArm {
                    name: arm.name(),
                    store: &store,
                    model: &c.model,
                    refine: arm != Arm::ArOnly,
                };
                reports.push(evaluate_pipeline(&data, &pa, &c.spec(), &schedule, n_steps, c.eval.noise_seed)?);
            }
            run.outputs.dir(&out)?;
            for r in &reports {
                run.outputs.write(out.join(format!("{}.csv", r.arm)), r.to_csv())?;
            }
            let mut summary = summary_table(&reports);
            for r in &reports {
                let heavy = r.means_where(|m| m.is_obstacle_heavy());
                summary.push_str(&format!("{} obstacle-heavy NC {:.2}\n", r.arm, heavy.nc * 100.0));
            }
            run.outputs.write(out.join("summary.txt"), &summary)?;
            run.echo_dir(&out)?;
            print!("{summary}");
        }
        Command::Plan {
            data,
            scenario_id,
            ckpt,
            ar_only,
            svg_out,
        } => {
            let c = run.config.clone();
            let data = load_data(&data, &c)?;
            let scenario = data
                .iter()
                .find(|s| s.id == scenario_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no scenario with id {scenario_id}")))?;
            let store = load_ckpt(&ckpt, &c)?;
            let schedule = build_schedule(c.model.flow.n_train_steps)?;
            let plan = plan_scenario(
                scenario,
                &store,
                &c.model,
                &c.spec(),
                &schedule,
                c.model.flow.inference_steps,
                !ar_only,
                c.eval.noise_seed,
            )?;
            run.outputs.write(svg_out.clone(), chainflow::plot::render_plan(scenario, &plan))?;
            run.echo_file(&svg_out)?;
            let s = chainflow::eval::metrics::sub_scores(&plan.trajectory, scenario);
            println!("selected {} pdms {:.4}", plan.selected, s.pdms());
        }
        Command::SweepSteps { data, ckpt, steps, out } => {
            let c = run.config.clone();
            let data = load_data(&data, &c)?;
            let store = load_ckpt(&ckpt, &c)?;
            let schedule = build_schedule(c.model.flow.n_train_steps)?;
            let mut csv = String::from("steps,pdms,nc,dac,ep,ttc,comfort\n");
            for &n in &steps {
                let pa = PipelineArm {
                    name: "full",
                    store: &store,
                    model: &c.model,
                    refine: true,
                };
                let m = evaluate_pipeline(&data, &pa, &c.spec(), &schedule, n, c.eval.noise_seed)?.means();
                csv.push_str(&format!(
                    "{n},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    m.pdms, m.nc, m.dac, m.ep, m.ttc, m.comfort
                ));
                eprintln!("steps {n}: pdms {:.4}", m.pdms);
            }
            run.outputs.write(out.clone(), &csv)?;
            run.echo_file(&out)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let config = match RunConfig::load(cli.config.as_deref(), &cli.set) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(&Error::InvalidArgument("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&Error::InvalidArgument(e.to_string()));
        }
    }
    let mut run = Run {
        config,
        outputs: Outputs::default(),
        started: SystemTime::now(),
        clock: Instant::now(),
        argv,
    };
    match execute(cli, &mut run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            run.outputs.remove_all();
            fail(&e)
        }
    }
}

fn fail(e: &Error) -> ExitCode {
    let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{}]: {msg}", e.kind());
    ExitCode::FAILURE
}
