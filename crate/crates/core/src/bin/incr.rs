//! `incr`: simulate, build panels, fit, score, report, bid and replicate.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use incrementality::attribution::{default_as_of, write_report_csv, write_report_json, Attribution};
use incrementality::bidding::{BidContext, Bidder};
use incrementality::config::{RunConfig, Stage};
use incrementality::estimators::{fit_model, CoefficientSet, DesignMatrices};
use incrementality::events::{ingest_path, open_reader, write_events, EventTimeline};
use incrementality::features::FeatureSet;
use incrementality::panel::{build_panel, split_holdout, Panel};
use incrementality::replicate::{run_scenario, Scenario};
use incrementality::simulator::simulate;
use incrementality::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "incr", version, about = "Continuous-time incrementality bidding and attribution")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides `rng_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true)]
    events: Option<PathBuf>,
    #[arg(long, global = true)]
    coefficients: Option<PathBuf>,
    #[arg(long, global = true)]
    contexts: Option<PathBuf>,
    #[arg(long, global = true)]
    panel: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a market: events.ndjson and ground_truth.json.
    Simulate,
    /// Build the Poisson regression panel from an event log.
    Panel,
    /// Fit coefficients on a panel (HCC with held-out penalty selection).
    Fit,
    /// Ex-ante incremental value of every bid in an event log.
    Score,
    /// Attribution report per slice.
    Report,
    /// Bids for a batch of bid contexts.
    Bid,
    /// Check an event log and the configuration; prints counts.
    Validate,
    /// Run a replication scenario end to end.
    Replicate {
        /// fig6, fig10, downsample, calibration or attribution.
        scenario: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Panel => "panel",
            Command::Fit => "fit",
            Command::Score => "score",
            Command::Report => "report",
            Command::Bid => "bid",
            Command::Validate => "validate",
            Command::Replicate { .. } => "replicate",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INCR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("incr: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}

/// Output files written to temporaries in the output directory and moved
/// into place only once every one of them is complete.
struct Staging {
    dir: PathBuf,
    files: Vec<(NamedTempFile, String)>,
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    wall_time_seconds: f64,
    artifacts: Vec<Artifact>,
}

impl Staging {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Staging { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut tmp = NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            body(&mut w)?;
            w.flush()?;
        }
        self.files.push((tmp, name.to_string()));
        Ok(())
    }

    fn commit(self, manifest_name: &str, mut manifest: Manifest) -> Result<()> {
        let mut moved = Vec::new();
        for (tmp, name) in self.files {
            let body = std::fs::read(tmp.path())?;
            let sha256 = hex::encode(Sha256::digest(&body));
            manifest.artifacts.push(Artifact { path: name.clone(), bytes: body.len() as u64, sha256 });
            moved.push((tmp, name));
        }
        let mut tmp = NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(tmp.as_file_mut(), &manifest)?;
        tmp.as_file_mut().write_all(b"\n")?;
        for (tmp, name) in moved {
            tmp.persist(self.dir.join(&name)).map_err(|e| Error::Io(e.error))?;
        }
        tmp.persist(self.dir.join(manifest_name)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    events: PathBuf,
    coefficients: PathBuf,
    contexts: PathBuf,
    panel: PathBuf,
    panel_meta: PathBuf,
    holdout: PathBuf,
    holdout_meta: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli, config: RunConfig) -> Self {
        let out = config.io.out_dir.clone().unwrap_or_else(|| cli.out.clone());
        let pick = |flag: &Option<PathBuf>, io: &Option<PathBuf>, name: &str| {
            flag.clone().or_else(|| io.clone()).unwrap_or_else(|| out.join(name))
        };
        let io = &config.io;
        Ctx {
            events: pick(&cli.events, &io.events, "events.ndjson"),
            coefficients: pick(&cli.coefficients, &io.coefficients, "coefficients.json"),
            contexts: pick(&cli.contexts, &io.contexts, "contexts.ndjson"),
            panel: pick(&cli.panel, &io.panel, "panel.csv"),
            panel_meta: pick(&None, &io.panel_meta, "panel_meta.json"),
            holdout: pick(&None, &io.holdout, "holdout.csv"),
            holdout_meta: pick(&None, &io.holdout_meta, "holdout_meta.json"),
            out,
            config,
        }
    }

    fn timelines(&self) -> Result<Vec<EventTimeline>> {
        let ingested = ingest_path(&self.events).map_err(|e| input_error(&self.events, e))?;
        if ingested.unknown_fields > 0 {
            log::warn!("{} unknown field(s) ignored in {}", ingested.unknown_fields, self.events.display());
        }
        Ok(ingested.timelines)
    }

    fn coefficients(&self, features: &FeatureSet) -> Result<CoefficientSet> {
        let c = CoefficientSet::read_json(open(&self.coefficients)?)?;
        if !c.feature_config_hash.is_empty() && c.feature_config_hash != features.config_hash() {
            log::warn!("coefficients were fitted under a different feature configuration");
        }
        Ok(c)
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))
}

fn input_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::config(format!("cannot open {}: {io}", path.display()))
        }
        e => e,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("rng_seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let started = Instant::now();
    let ctx = Ctx::new(&cli, config);
    let mut staging = Staging::new(&ctx.out)?;
    let cmd = &cli.command;
    log::info!("{} with config {}", cmd.name(), ctx.config.hash());
    match cmd {
        Command::Simulate => simulate_cmd(&ctx, &mut staging)?,
        Command::Panel => panel_cmd(&ctx, &mut staging)?,
        Command::Fit => fit_cmd(&ctx, &mut staging)?,
        Command::Score => score_cmd(&ctx, &mut staging)?,
        Command::Report => report_cmd(&ctx, &mut staging)?,
        Command::Bid => bid_cmd(&ctx, &mut staging)?,
        Command::Validate => return validate_cmd(&ctx),
        Command::Replicate { scenario } => {
            let scenario: Scenario = scenario.parse()?;
            let report = run_scenario(scenario, &ctx.config.replicate, ctx.config.rng_seed)?;
            staging.write(&format!("{}.json", scenario.name()), |w| {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                w.write_all(b"\n")?;
                Ok(())
            })?;
            let table = report.table();
            staging.write(&format!("{}.csv", scenario.name()), |w| Ok(w.write_all(table.as_bytes())?))?;
            print!("{table}");
        }
    }
    let manifest = Manifest {
        subcommand: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: ctx.config.hash(),
        seed: ctx.config.rng_seed,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        artifacts: Vec::new(),
    };
    staging.commit(&format!("{}.manifest.json", cmd.name()), manifest)
}

fn simulate_cmd(ctx: &Ctx, staging: &mut Staging) -> Result<()> {
    let mut market = ctx.config.market()?.clone();
    market.rng_seed = ctx.config.stage_seed(Stage::Market);
    let sim = simulate(&market)?;
    if sim.truth.clamped_intensity > 0 {
        log::warn!("conversion intensity clamped at zero {} time(s)", sim.truth.clamped_intensity);
    }
    staging.write("events.ndjson", |w| write_events(&sim.timelines, w))?;
    staging.write("ground_truth.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &sim.truth)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    log::info!("{} users, {} conversions, {} impressions", sim.truth.n_users, sim.truth.n_conversions, sim.truth.n_impressions);
    Ok(())
}

fn panel_cmd(ctx: &Ctx, staging: &mut Staging) -> Result<()> {
    let features = ctx.config.feature_set()?;
    let timelines = ctx.timelines()?;
    let mut pc = ctx.config.panel.clone();
    pc.rng_seed = ctx.config.stage_seed(Stage::Panel);
    let (train, holdout) = if pc.holdout_fraction > 0.0 {
        split_holdout(&timelines, pc.holdout_fraction, pc.rng_seed)
    } else {
        (timelines, Vec::new())
    };
    let panel = build_panel(&train, &features, &pc)?;
    staging.write("panel.csv", |w| panel.write_csv(w))?;
    staging.write("panel_meta.json", |w| panel.write_meta(w))?;
    if !holdout.is_empty() {
        let hp = build_panel(&holdout, &features, &pc)?;
        staging.write("holdout.csv", |w| hp.write_csv(w))?;
        staging.write("holdout_meta.json", |w| hp.write_meta(w))?;
    }
    Ok(())
}

fn read_panel(csv: &Path, meta: &Path, features: &FeatureSet) -> Result<DesignMatrices> {
    let panel = Panel::read(open(csv)?, open(meta)?)?;
    if panel.meta.feature_config_hash != features.config_hash() {
        return Err(Error::config(format!("{} was built under a different feature configuration", csv.display())));
    }
    DesignMatrices::from_panel(&panel, features)
}

fn fit_cmd(ctx: &Ctx, staging: &mut Staging) -> Result<()> {
    let features = ctx.config.feature_set()?;
    let train = read_panel(&ctx.panel, &ctx.panel_meta, &features)?;
    if !ctx.holdout.exists() {
        return Err(Error::config(format!(
            "penalty selection needs a holdout panel at {}; set panel.holdout_fraction",
            ctx.holdout.display()
        )));
    }
    let holdout = read_panel(&ctx.holdout, &ctx.holdout_meta, &features)?;
    let mut coefficients = fit_model(&train, &holdout, &ctx.config.estimator, ctx.config.stage_seed(Stage::Estimator))?;
    coefficients.feature_config_hash = features.config_hash();
    staging.write("coefficients.json", |w| coefficients.write_json(w))
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    user_id: &'a str,
    t_j: f64,
    won: bool,
    delta_y: f64,
}

fn score_cmd(ctx: &Ctx, staging: &mut Staging) -> Result<()> {
    let features = ctx.config.feature_set()?;
    let beta = ctx.coefficients(&features)?.aligned(&features)?;
    let timelines = ctx.timelines()?;
    staging.write("scores.ndjson", |w| {
        for tl in &timelines {
            for bid in &tl.bids {
                let delta_y = features.incremental_value(bid, &tl.retargets, &beta)?;
                serde_json::to_writer(&mut *w, &ScoreLine { user_id: &tl.user_id, t_j: bid.t_j, won: bid.won, delta_y })?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    })
}

fn report_cmd(ctx: &Ctx, staging: &mut Staging) -> Result<()> {
    let features = ctx.config.feature_set()?;
    let coefficients = ctx.coefficients(&features)?;
    let timelines = ctx.timelines()?;
    let attribution = Attribution::new(&features, &coefficients)?;
    let as_of = ctx.config.attribution.as_of.unwrap_or_else(|| default_as_of(&timelines));
    let rows = attribution.campaign_rollup(&timelines, as_of, &ctx.config.attribution.slices)?;
    staging.write("report.csv", |w| write_report_csv(&rows, w))?;
    staging.write("report.json", |w| {
        write_report_json(&rows, &mut *w)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn bid_cmd(ctx: &Ctx, staging: &mut Staging) -> Result<()> {
    let features = ctx.config.feature_set()?;
    let coefficients = ctx.coefficients(&features)?;
    let mut policy = ctx.config.bidding()?.clone();
    policy.rng_seed = ctx.config.stage_seed(Stage::Bidding);
    let mut bidder = Bidder::new(&features, &coefficients, policy)?;
    let reader = open_reader(&ctx.contexts).map_err(|e| input_error(&ctx.contexts, e))?;
    staging.write("bids.ndjson", |w| {
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let context: BidContext = serde_json::from_str(&line)
                .map_err(|e| Error::domain(format!("{} line {}: {e}", ctx.contexts.display(), i + 1)))?;
            serde_json::to_writer(&mut *w, &bidder.compute_bid(&context)?)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    if bidder.negative_values() > 0 {
        log::warn!("{} bid(s) valued below zero were clamped", bidder.negative_values());
    }
    Ok(())
}

fn validate_cmd(ctx: &Ctx) -> Result<()> {
    if !ctx.config.features.is_empty() {
        ctx.config.feature_set()?;
    }
    let ingested = ingest_path(&ctx.events).map_err(|e| input_error(&ctx.events, e))?;
    let counts = ingested.counts();
    println!("{}", serde_json::to_string(&counts)?);
    if ingested.unknown_fields > 0 {
        log::warn!("{} unknown field(s) ignored", ingested.unknown_fields);
    }
    Ok(())
}
