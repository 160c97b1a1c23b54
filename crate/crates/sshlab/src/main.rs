//! Command-line front end for the SSH eigenstate laboratory.
//!
//! Every subcommand resolves its parameters from built-in defaults, then an
//! optional JSON config file, then explicit flags (flags win), and writes the
//! resolved snapshot as `config.json` next to its outputs together with a
//! `run.log`. Outputs are deterministic for a fixed snapshot, independent of
//! `--threads`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sshlab::dataio::{self, Role};
use sshlab::error::{Result, SshError};
use sshlab::evalgen;
use sshlab::explain;
use sshlab::latent::{self, LayerTag};
use sshlab::tinycnn::{self, checkpoint, train::TrainConfig, Architecture};
use sshlab::topology::{self, PhaseDiagram};

#[derive(Parser)]
#[command(
    name = "sshlab",
    about = "Disordered SSH chains: eigenstate datasets, winding labels, a small CNN, and its explanations",
    version
)]
struct Cli {
    /// Cap on worker threads (default: all cores; env SSHLAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file supplying defaults per subcommand; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an eigenstate image dataset with winding labels.
    Generate(GenerateArgs),
    /// Label a (v, W) phase diagram by disorder-averaged winding numbers.
    Label(LabelArgs),
    /// Train the small CNN on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Predict a phase diagram with a trained network, optionally scoring it
    /// against a labeled target.
    PhaseDiagram(PhaseDiagramArgs),
    /// Class activation map for one sample.
    Cam(CamArgs),
    /// Gradient-weighted class activation map for one sample.
    Gradcam(GradcamArgs),
    /// PCA of layer activations over a dataset.
    Pca(PcaArgs),
    /// Eigenstate fidelity map against the v = 0 reference chain.
    Fidelity(FidelityArgs),
    /// Toy bright-pixel pipeline: dataset, optional training, optional CAM
    /// alignment report.
    Toy(ToyArgs),
    /// Multi-seed training sweep with Well/Poor generalization classes.
    Sweep(SweepArgs),
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SSHLAB_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(t) = threads {
        // Ignore the error if a pool already exists (tests call main twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    if let Err(e) = run(&cli) {
        eprintln!("error:{}: {e}", e.class());
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let file_cfg: Option<serde_json::Value> = match &cli.config {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    match &cli.cmd {
        Cmd::Generate(a) => cmd_generate(a, file_cfg.as_ref()),
        Cmd::Label(a) => cmd_label(a, file_cfg.as_ref()),
        Cmd::Train(a) => cmd_train(a, file_cfg.as_ref()),
        Cmd::Evaluate(a) => cmd_evaluate(a, file_cfg.as_ref()),
        Cmd::PhaseDiagram(a) => cmd_phase_diagram(a, file_cfg.as_ref()),
        Cmd::Cam(a) => cmd_cam(a, file_cfg.as_ref()),
        Cmd::Gradcam(a) => cmd_gradcam(a, file_cfg.as_ref()),
        Cmd::Pca(a) => cmd_pca(a, file_cfg.as_ref()),
        Cmd::Fidelity(a) => cmd_fidelity(a, file_cfg.as_ref()),
        Cmd::Toy(a) => cmd_toy(a, file_cfg.as_ref()),
        Cmd::Sweep(a) => cmd_sweep(a, file_cfg.as_ref()),
    }
}

/// Overlay the `section` object of the config file onto `base`.
fn overlay<T: Serialize + DeserializeOwned>(
    base: T,
    file_cfg: Option<&serde_json::Value>,
    section: &str,
) -> Result<T> {
    let Some(sec) = file_cfg.and_then(|v| v.get(section)) else {
        return Ok(base);
    };
    let mut merged = serde_json::to_value(&base)?;
    let (serde_json::Value::Object(dst), serde_json::Value::Object(src)) = (&mut merged, sec)
    else {
        return Err(SshError::Format(format!(
            "config section `{section}` is not an object"
        )));
    };
    for (k, v) in src {
        if !dst.contains_key(k) {
            return Err(SshError::Format(format!(
                "unknown key `{k}` in config section `{section}`"
            )));
        }
        dst.insert(k.clone(), v.clone());
    }
    Ok(serde_json::from_value(merged)?)
}

struct RunDir {
    dir: PathBuf,
    log: Vec<String>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: Vec::new(),
        })
    }

    fn note(&mut self, line: impl Into<String>) {
        let line = line.into();
        println!("{line}");
        self.log.push(line);
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.path(name), bytes)?;
        Ok(())
    }

    fn finish<C: Serialize>(mut self, config: &C) -> Result<()> {
        let snapshot = serde_json::to_string_pretty(config)?;
        self.write("config.json", snapshot.as_bytes())?;
        self.log.push("done".into());
        self.write("run.log", (self.log.join("\n") + "\n").as_bytes())
    }
}

fn parse_role(s: &str) -> Result<Role> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Role::Train),
        "validation" | "val" => Ok(Role::Validation),
        "test" => Ok(Role::Test),
        "sweep" => Ok(Role::Sweep),
        other => Err(SshError::InvalidSpec(format!("unknown role `{other}`"))),
    }
}

/// Parse one `W:count` stratum of a disordered plan.
fn parse_stratum(s: &str) -> std::result::Result<(f64, usize), String> {
    let (w, n) = s
        .split_once(':')
        .ok_or_else(|| format!("expected W:count, got `{s}`"))?;
    Ok((
        w.parse().map_err(|e| format!("bad amplitude: {e}"))?,
        n.parse().map_err(|e| format!("bad count: {e}"))?,
    ))
}

fn w_axis(count: usize, max: f64) -> Vec<f64> {
    // Linear from 0 so a single row means the clean chain.
    if count <= 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| max * i as f64 / (count - 1) as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// generate

#[derive(Args)]
struct GenerateArgs {
    /// train | validation | test | sweep
    #[arg(long)]
    role: Option<String>,
    #[arg(long)]
    cells: Option<usize>,
    /// Number of clean samples (default: role-dependent plan).
    #[arg(long)]
    clean: Option<usize>,
    /// Disordered stratum `W:count`; repeatable. Default: role-dependent plan.
    #[arg(long = "disordered", value_parser = parse_stratum)]
    disordered: Option<Vec<(f64, usize)>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct GenerateConfig {
    role: String,
    cells: usize,
    clean: Option<usize>,
    disordered: Option<Vec<(f64, usize)>>,
    seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            role: "train".into(),
            cells: 16,
            clean: None,
            disordered: None,
            seed: 0,
        }
    }
}

fn cmd_generate(a: &GenerateArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(GenerateConfig::default(), file_cfg, "generate")?;
    if let Some(r) = &a.role {
        cfg.role = r.clone();
    }
    if let Some(c) = a.cells {
        cfg.cells = c;
    }
    if a.clean.is_some() {
        cfg.clean = a.clean;
    }
    if a.disordered.is_some() {
        cfg.disordered = a.disordered.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }

    let role = parse_role(&cfg.role)?;
    let (plan_clean, plan_disordered) = match role {
        Role::Train => dataio::default_train_plan(),
        Role::Validation | Role::Sweep => dataio::default_validation_plan(),
        // Test defaults to clean data over the full v range.
        Role::Test => (1000, vec![]),
    };
    let n_clean = cfg.clean.unwrap_or(plan_clean);
    let disordered = cfg.disordered.clone().unwrap_or(plan_disordered);

    let mut run = RunDir::create(&a.out)?;
    let tensor_path = run.path("dataset.sshd");
    let ds = dataio::generate_dataset(
        role,
        cfg.cells,
        n_clean,
        &disordered,
        cfg.seed,
        tensor_path.clone(),
    )?;
    dataio::write_dataset(&ds, &tensor_path)?;
    run.note(format!(
        "generated {} samples ({} clean + {} disordered) at N={} into {}",
        ds.samples.len(),
        n_clean,
        ds.samples.len() - n_clean,
        cfg.cells,
        tensor_path.display()
    ));
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// label

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    cells: Option<usize>,
    /// Number of v-grid points.
    #[arg(long = "v-grid")]
    v_grid: Option<usize>,
    /// Number of W-grid rows (row 0 is always the clean chain).
    #[arg(long = "w-grid")]
    w_grid: Option<usize>,
    #[arg(long = "v-max")]
    v_max: Option<f64>,
    #[arg(long = "w-max")]
    w_max: Option<f64>,
    /// Disorder realizations per row.
    #[arg(long)]
    nr: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "k-points")]
    k_points: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct LabelConfig {
    cells: usize,
    v_grid: usize,
    w_grid: usize,
    v_max: f64,
    w_max: f64,
    nr: usize,
    seed: u64,
    k_points: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            cells: 16,
            v_grid: 50,
            w_grid: 50,
            v_max: 2.0,
            w_max: 2.0,
            nr: 5,
            seed: 0,
            k_points: 256,
        }
    }
}

fn label_grids(cfg: &LabelConfig) -> (Vec<f64>, Vec<f64>) {
    (
        topology::centered_grid(0.0, cfg.v_max, cfg.v_grid),
        w_axis(cfg.w_grid, cfg.w_max),
    )
}

fn cmd_label(a: &LabelArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(LabelConfig::default(), file_cfg, "label")?;
    if let Some(x) = a.cells {
        cfg.cells = x;
    }
    if let Some(x) = a.v_grid {
        cfg.v_grid = x;
    }
    if let Some(x) = a.w_grid {
        cfg.w_grid = x;
    }
    if let Some(x) = a.v_max {
        cfg.v_max = x;
    }
    if let Some(x) = a.w_max {
        cfg.w_max = x;
    }
    if let Some(x) = a.nr {
        cfg.nr = x;
    }
    if let Some(x) = a.seed {
        cfg.seed = x;
    }
    if let Some(x) = a.k_points {
        cfg.k_points = x;
    }

    let mut run = RunDir::create(&a.out)?;
    let (v, w) = label_grids(&cfg);
    let diagram =
        topology::label_phase_diagram(cfg.cells, &v, &w, cfg.nr, cfg.seed, cfg.k_points)?;
    write_diagram(&run, "diagram", &diagram)?;
    run.note(format!(
        "labeled {}x{} diagram, {} realizations per row",
        w.len(),
        v.len(),
        cfg.nr
    ));
    run.finish(&cfg)
}

fn write_diagram(run: &RunDir, stem: &str, d: &PhaseDiagram) -> Result<()> {
    run.write(&format!("{stem}.csv"), topology::diagram_to_csv(d).as_bytes())?;
    run.write(&format!("{stem}.pgm"), &topology::diagram_to_pgm(d))?;
    run.write(
        &format!("{stem}.json"),
        serde_json::to_string_pretty(d)?.as_bytes(),
    )
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (.sshd).
    #[arg(long = "train")]
    train: Option<PathBuf>,
    /// Validation dataset (.sshd).
    #[arg(long = "val")]
    val: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long = "warmup-epochs")]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct TrainCommandConfig {
    train: PathBuf,
    val: PathBuf,
    #[serde(flatten)]
    train_config: TrainConfig,
}

fn resolve_train_config(a: &TrainArgs, base: &mut TrainConfig) {
    if let Some(x) = a.lr {
        base.lr = x;
    }
    if let Some(x) = a.momentum {
        base.momentum = x;
    }
    if let Some(x) = a.weight_decay {
        base.weight_decay = x;
    }
    if let Some(x) = a.batch_size {
        base.batch_size = x;
    }
    if let Some(x) = a.max_epochs {
        base.max_epochs = x;
    }
    if let Some(x) = a.patience {
        base.patience = x;
    }
    if let Some(x) = a.warmup_epochs {
        base.warmup_epochs = x;
    }
    if let Some(x) = a.seed {
        base.seed = x;
    }
}

fn cmd_train(a: &TrainArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let defaults = TrainCommandConfig {
        train: PathBuf::new(),
        val: PathBuf::new(),
        train_config: TrainConfig::default(),
    };
    let mut cfg = overlay(defaults, file_cfg, "train")?;
    if let Some(p) = &a.train {
        cfg.train = p.clone();
    }
    if let Some(p) = &a.val {
        cfg.val = p.clone();
    }
    resolve_train_config(a, &mut cfg.train_config);
    if cfg.train.as_os_str().is_empty() || cfg.val.as_os_str().is_empty() {
        return Err(SshError::InvalidSpec(
            "train requires --train and --val dataset paths".into(),
        ));
    }

    let mut run = RunDir::create(&a.out)?;
    let train_ds = dataio::read_dataset(&cfg.train)?;
    let val_ds = dataio::read_dataset(&cfg.val)?;
    let arch = Architecture::for_cells(train_ds.manifest.n_cells)?;
    let model = tinycnn::init_model(arch, cfg.train_config.seed);
    run.note(format!(
        "training {} parameters on {} samples (validation {})",
        arch.n_params(),
        train_ds.samples.len(),
        val_ds.samples.len()
    ));
    let outcome = tinycnn::train::train(
        model,
        &tinycnn::to_examples(&train_ds),
        &tinycnn::to_examples(&val_ds),
        &cfg.train_config,
    )?;
    checkpoint::save_checkpoint(&outcome.model, &run.path("model.sshw"))?;
    run.write(
        "history.csv",
        tinycnn::train::history_to_csv(&outcome.history).as_bytes(),
    )?;
    if let Some(last) = outcome.history.last() {
        run.note(format!(
            "finished after {} epochs (early stop: {}): train_acc={:.4} val_acc={:.4}",
            outcome.history.len(),
            outcome.stopped_early,
            last.train_acc,
            last.val_acc
        ));
    }
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Default, Serialize, Deserialize)]
struct EvaluateConfig {
    model: PathBuf,
    data: PathBuf,
}

fn cmd_evaluate(a: &EvaluateArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(EvaluateConfig::default(), file_cfg, "evaluate")?;
    if let Some(p) = &a.model {
        cfg.model = p.clone();
    }
    if let Some(p) = &a.data {
        cfg.data = p.clone();
    }
    let mut run = RunDir::create(&a.out)?;
    let model = checkpoint::load_checkpoint(&cfg.model)?;
    let ds = dataio::read_dataset(&cfg.data)?;
    let (loss, accuracy) = tinycnn::evaluate(&model, &tinycnn::to_examples(&ds))?;
    let metrics = serde_json::json!({
        "samples": ds.samples.len(),
        "loss": loss,
        "accuracy": accuracy,
    });
    run.write("metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    run.note(format!(
        "{} samples: loss={loss:.6} accuracy={accuracy:.4}",
        ds.samples.len()
    ));
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// phase-diagram (predicted)

#[derive(Args)]
struct PhaseDiagramArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labeled diagram JSON to score against (optional).
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long = "v-grid")]
    v_grid: Option<usize>,
    #[arg(long = "w-grid")]
    w_grid: Option<usize>,
    #[arg(long = "v-max")]
    v_max: Option<f64>,
    #[arg(long = "w-max")]
    w_max: Option<f64>,
    #[arg(long)]
    nr: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PhaseDiagramConfig {
    model: PathBuf,
    target: Option<PathBuf>,
    #[serde(flatten)]
    grid: LabelConfig,
}

fn cmd_phase_diagram(a: &PhaseDiagramArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let defaults = PhaseDiagramConfig {
        model: PathBuf::new(),
        target: None,
        grid: LabelConfig::default(),
    };
    let mut cfg = overlay(defaults, file_cfg, "phase-diagram")?;
    if let Some(p) = &a.model {
        cfg.model = p.clone();
    }
    if a.target.is_some() {
        cfg.target = a.target.clone();
    }
    if let Some(x) = a.cells {
        cfg.grid.cells = x;
    }
    if let Some(x) = a.v_grid {
        cfg.grid.v_grid = x;
    }
    if let Some(x) = a.w_grid {
        cfg.grid.w_grid = x;
    }
    if let Some(x) = a.v_max {
        cfg.grid.v_max = x;
    }
    if let Some(x) = a.w_max {
        cfg.grid.w_max = x;
    }
    if let Some(x) = a.nr {
        cfg.grid.nr = x;
    }
    if let Some(x) = a.seed {
        cfg.grid.seed = x;
    }

    let mut run = RunDir::create(&a.out)?;
    let model = checkpoint::load_checkpoint(&cfg.model)?;

    let (predicted, target) = match &cfg.target {
        Some(path) => {
            // Pair against the target's own grid and seeds.
            let target: PhaseDiagram =
                serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let predicted = evalgen::predict_phase_diagram(
                &model,
                target.n_cells,
                &target.v_grid,
                &target.w_grid,
                target.n_realizations,
                target.master_seed,
            )?;
            (predicted, Some(target))
        }
        None => {
            let (v, w) = label_grids(&cfg.grid);
            let predicted = evalgen::predict_phase_diagram(
                &model,
                cfg.grid.cells,
                &v,
                &w,
                cfg.grid.nr,
                cfg.grid.seed,
            )?;
            (predicted, None)
        }
    };
    write_diagram(&run, "predicted", &predicted)?;
    if let Some(target) = target {
        let rmse = evalgen::diagram_rmse(&target, &predicted)?;
        let ood_accuracy = evalgen::diagram_accuracy(&target, &predicted)?;
        let well = rmse < evalgen::WELL_RMSE_THRESHOLD;
        let metrics = serde_json::json!({
            "rmse": rmse,
            "ood_accuracy": ood_accuracy,
            "class": if well { "well" } else { "poor" },
        });
        run.write("metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
        run.note(format!(
            "rmse={rmse:.4} ood_accuracy={ood_accuracy:.4} class={}",
            if well { "well" } else { "poor" }
        ));
    } else {
        run.note("predicted diagram written (no target given, no metrics)");
    }
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// cam / gradcam

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample index within the dataset.
    #[arg(long)]
    index: Option<usize>,
    /// Class to explain (default: the network's prediction).
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcamArgs {
    #[command(flatten)]
    cam: CamArgs,
    /// Target conv layer: conv1 | conv2 | conv3.
    #[arg(long)]
    layer: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CamConfig {
    model: PathBuf,
    data: PathBuf,
    index: usize,
    class: Option<usize>,
    layer: String,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            data: PathBuf::new(),
            index: 0,
            class: None,
            layer: "conv3".into(),
        }
    }
}

fn resolve_cam(
    a: &CamArgs,
    layer: Option<&String>,
    file_cfg: Option<&serde_json::Value>,
    section: &str,
) -> Result<CamConfig> {
    let mut cfg = overlay(CamConfig::default(), file_cfg, section)?;
    if let Some(p) = &a.model {
        cfg.model = p.clone();
    }
    if let Some(p) = &a.data {
        cfg.data = p.clone();
    }
    if let Some(i) = a.index {
        cfg.index = i;
    }
    if a.class.is_some() {
        cfg.class = a.class;
    }
    if let Some(l) = layer {
        cfg.layer = l.clone();
    }
    Ok(cfg)
}

fn cam_common(cfg: &CamConfig, grad: bool, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out)?;
    let model = checkpoint::load_checkpoint(&cfg.model)?;
    let ds = dataio::read_dataset(&cfg.data)?;
    let sample = ds
        .samples
        .get(cfg.index)
        .ok_or_else(|| SshError::Shape(format!("sample index {} out of range", cfg.index)))?;
    let class = match cfg.class {
        Some(c) if c < tinycnn::N_CLASSES => c,
        Some(c) => {
            return Err(SshError::InvalidSpec(format!("class {c} out of range")));
        }
        None => tinycnn::predict(&model, &sample.pixels)? as usize,
    };
    let map = if grad {
        let layer = match LayerTag::parse(&cfg.layer)? {
            LayerTag::Conv1 => 0,
            LayerTag::Conv2 => 1,
            LayerTag::Conv3 => 2,
            LayerTag::Gap => {
                return Err(SshError::NoSuchLayer(
                    "gradcam needs a spatial conv layer".into(),
                ))
            }
        };
        explain::grad_cam_at(&model, &sample.pixels, class, layer)?
    } else {
        explain::cam(&model, &sample.pixels, class)?
    };
    run.write("map.csv", explain::cam_to_csv(&map).as_bytes())?;
    run.write("map.pgm", &explain::cam_to_pgm(&map))?;
    run.note(format!(
        "{} map for sample {} (label {}), class {class}",
        if grad { "grad-cam" } else { "cam" },
        cfg.index,
        sample.label
    ));
    run.finish(cfg)
}

fn cmd_cam(a: &CamArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let cfg = resolve_cam(a, None, file_cfg, "cam")?;
    cam_common(&cfg, false, &a.out)
}

fn cmd_gradcam(a: &GradcamArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let cfg = resolve_cam(&a.cam, a.layer.as_ref(), file_cfg, "gradcam")?;
    cam_common(&cfg, true, &a.cam.out)
}

// ---------------------------------------------------------------------------
// pca

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// conv1 | conv2 | conv3 | gap
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct PcaConfig {
    model: PathBuf,
    data: PathBuf,
    layer: String,
    components: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            data: PathBuf::new(),
            layer: "gap".into(),
            components: 2,
        }
    }
}

fn cmd_pca(a: &PcaArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(PcaConfig::default(), file_cfg, "pca")?;
    if let Some(p) = &a.model {
        cfg.model = p.clone();
    }
    if let Some(p) = &a.data {
        cfg.data = p.clone();
    }
    if let Some(l) = &a.layer {
        cfg.layer = l.clone();
    }
    if let Some(c) = a.components {
        cfg.components = c;
    }
    let mut run = RunDir::create(&a.out)?;
    let model = checkpoint::load_checkpoint(&cfg.model)?;
    let ds = dataio::read_dataset(&cfg.data)?;
    let layer = LayerTag::parse(&cfg.layer)?;
    let acts = latent::capture_activations(&model, &ds, layer)?;
    let pca = latent::pca_fit(&acts.data, cfg.components)?;
    let proj = latent::pca_project(&pca, &acts.data)?;
    run.write(
        "projection.csv",
        latent::projection_to_csv(&proj, &acts.meta).as_bytes(),
    )?;
    let labels: Vec<u8> = acts.meta.iter().map(|m| m.label).collect();
    let silhouette = latent::cluster_separation(&proj, &labels).ok();
    let summary = serde_json::json!({
        "layer": layer.name(),
        "components": cfg.components,
        "explained_variance": pca.explained_variance,
        "silhouette": silhouette,
    });
    run.write("pca.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    run.note(format!(
        "pca at {} over {} samples: leading variance {:.4e}, silhouette {:?}",
        layer.name(),
        ds.samples.len(),
        pca.explained_variance[0],
        silhouette
    ));
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// fidelity

#[derive(Args)]
struct FidelityArgs {
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long = "v-grid")]
    v_grid: Option<usize>,
    #[arg(long = "v-max")]
    v_max: Option<f64>,
    /// Disorder amplitude W.
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct FidelityConfig {
    cells: usize,
    v_grid: usize,
    v_max: f64,
    w: f64,
    seed: u64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            cells: 16,
            v_grid: 100,
            v_max: 2.0,
            w: 0.0,
            seed: 0,
        }
    }
}

fn cmd_fidelity(a: &FidelityArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(FidelityConfig::default(), file_cfg, "fidelity")?;
    if let Some(x) = a.cells {
        cfg.cells = x;
    }
    if let Some(x) = a.v_grid {
        cfg.v_grid = x;
    }
    if let Some(x) = a.v_max {
        cfg.v_max = x;
    }
    if let Some(x) = a.w {
        cfg.w = x;
    }
    if let Some(x) = a.seed {
        cfg.seed = x;
    }
    let mut run = RunDir::create(&a.out)?;
    let v = topology::centered_grid(0.0, cfg.v_max, cfg.v_grid);
    let map = evalgen::fidelity_map(cfg.cells, &v, cfg.w, cfg.seed)?;
    run.write("fidelity.csv", evalgen::fidelity_to_csv(&map).as_bytes())?;
    let mut pgm = format!("P5\n{} {}\n255\n", map.v_grid.len(), 2 * map.n_cells).into_bytes();
    for &x in &map.values {
        pgm.push((255.0 * x.clamp(0.0, 1.0)).round() as u8);
    }
    run.write("fidelity.pgm", &pgm)?;
    run.note(format!(
        "fidelity map: {} states x {} couplings at W={}",
        2 * cfg.cells,
        cfg.v_grid,
        cfg.w
    ));
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// toy

#[derive(Args)]
struct ToyArgs {
    /// Total sample count (half topological, half noise).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also train the default network on the toy set.
    #[arg(long)]
    train: bool,
    /// Also report CAM peak alignment (implies --train).
    #[arg(long)]
    cam: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ToyConfig {
    n: usize,
    cells: usize,
    seed: u64,
    train: bool,
    cam: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 500,
            cells: 16,
            seed: 0,
            train: false,
            cam: false,
        }
    }
}

fn even(n: usize) -> usize {
    n + n % 2
}

fn cmd_toy(a: &ToyArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(ToyConfig::default(), file_cfg, "toy")?;
    if let Some(x) = a.n {
        cfg.n = x;
    }
    if let Some(x) = a.cells {
        cfg.cells = x;
    }
    if let Some(x) = a.seed {
        cfg.seed = x;
    }
    if a.train {
        cfg.train = true;
    }
    if a.cam {
        cfg.cam = true;
    }
    if cfg.cam {
        cfg.train = true;
    }

    let mut run = RunDir::create(&a.out)?;
    let n = even(cfg.n);
    let train_ds = explain::make_toy_dataset(n, cfg.cells, cfg.seed)?;
    dataio::write_dataset(&train_ds, &run.path("toy.sshd"))?;
    run.note(format!("toy dataset: {n} samples at N={}", cfg.cells));
    if !cfg.train {
        return run.finish(&cfg);
    }

    let side = even((n / 5).max(2));
    let val_ds = explain::make_toy_dataset(side, cfg.cells, sshlab::rng::mix2(cfg.seed, 1))?;
    let test_ds = explain::make_toy_dataset(side, cfg.cells, sshlab::rng::mix2(cfg.seed, 2))?;
    let model = tinycnn::init_model(Architecture::for_cells(cfg.cells)?, cfg.seed);
    let outcome = tinycnn::train::train(
        model,
        &tinycnn::to_examples(&train_ds),
        &tinycnn::to_examples(&val_ds),
        &TrainConfig {
            seed: cfg.seed,
            ..TrainConfig::default()
        },
    )?;
    checkpoint::save_checkpoint(&outcome.model, &run.path("model.sshw"))?;
    run.write(
        "history.csv",
        tinycnn::train::history_to_csv(&outcome.history).as_bytes(),
    )?;
    let (_, train_acc) = tinycnn::evaluate(&outcome.model, &tinycnn::to_examples(&train_ds))?;
    let (_, test_acc) = tinycnn::evaluate(&outcome.model, &tinycnn::to_examples(&test_ds))?;
    run.note(format!(
        "toy training: train_acc={train_acc:.4} test_acc={test_acc:.4} over {} epochs",
        outcome.history.len()
    ));

    let mut report = serde_json::json!({
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "epochs": outcome.history.len(),
    });
    if cfg.cam {
        let targets = explain::toy_target_pixels(cfg.cells);
        let mut alignments = Vec::new();
        for s in test_ds.samples.iter().filter(|s| s.label == 1) {
            let map = explain::cam(&outcome.model, &s.pixels, 1)?;
            alignments.push(explain::cam_peak_alignment(&map, &targets));
        }
        let mean_alignment = alignments.iter().sum::<f64>() / alignments.len() as f64;
        report["mean_cam_peak_alignment"] = serde_json::json!(mean_alignment);
        run.note(format!(
            "cam peak alignment over {} topological samples: {mean_alignment:.4}",
            alignments.len()
        ));
    }
    run.write("report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.finish(&cfg)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args)]
struct SweepArgs {
    /// Number of independently initialized training runs.
    #[arg(long)]
    seeds: Option<usize>,
    /// `default` (paper-scale datasets) or `desk` (reduced, minutes).
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long = "v-grid")]
    v_grid: Option<usize>,
    #[arg(long = "w-grid")]
    w_grid: Option<usize>,
    #[arg(long)]
    nr: Option<usize>,
    /// Master seed for datasets, diagram, and per-run initialization seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct SweepConfig {
    seeds: usize,
    plan: String,
    cells: usize,
    v_grid: usize,
    w_grid: usize,
    nr: usize,
    seed: u64,
    max_epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            plan: "desk".into(),
            cells: 16,
            v_grid: 50,
            w_grid: 50,
            nr: 5,
            seed: 0,
            max_epochs: 150,
        }
    }
}

/// Dataset sizes per sweep plan: (train clean, train stratum, eval clean,
/// eval stratum).
fn sweep_plan(plan: &str) -> Result<(usize, usize, usize, usize)> {
    match plan {
        "default" => Ok((5000, 1000, 1000, 250)),
        "desk" => Ok((600, 120, 200, 40)),
        other => Err(SshError::InvalidSpec(format!("unknown plan `{other}`"))),
    }
}

fn cmd_sweep(a: &SweepArgs, file_cfg: Option<&serde_json::Value>) -> Result<()> {
    let mut cfg = overlay(SweepConfig::default(), file_cfg, "sweep")?;
    if let Some(x) = a.seeds {
        cfg.seeds = x;
    }
    if let Some(p) = &a.plan {
        cfg.plan = p.clone();
    }
    if let Some(x) = a.cells {
        cfg.cells = x;
    }
    if let Some(x) = a.v_grid {
        cfg.v_grid = x;
    }
    if let Some(x) = a.w_grid {
        cfg.w_grid = x;
    }
    if let Some(x) = a.nr {
        cfg.nr = x;
    }
    if let Some(x) = a.seed {
        cfg.seed = x;
    }
    if let Some(x) = a.max_epochs {
        cfg.max_epochs = x;
    }

    let mut run = RunDir::create(&a.out)?;
    let (train_clean, train_stratum, eval_clean, eval_stratum) = sweep_plan(&cfg.plan)?;
    let strata = |n: usize| vec![(0.01, n), (0.05, n)];
    let mk = |role: Role, clean: usize, stratum: usize, tag: u64| -> Result<dataio::Dataset> {
        dataio::generate_dataset(
            role,
            cfg.cells,
            clean,
            &strata(stratum),
            sshlab::rng::mix2(cfg.seed, tag),
            PathBuf::new(),
        )
    };
    run.note(format!(
        "sweep `{}` plan: {}+{}x2 train, {}+{}x2 val/test samples",
        cfg.plan, train_clean, train_stratum, eval_clean, eval_stratum
    ));
    let train_ds = mk(Role::Train, train_clean, train_stratum, 1)?;
    let val_ds = mk(Role::Validation, eval_clean, eval_stratum, 2)?;
    let test_ds = mk(Role::Test, eval_clean, eval_stratum, 3)?;

    let v = topology::centered_grid(0.0, 2.0, cfg.v_grid);
    let w = w_axis(cfg.w_grid, 2.0);
    run.note(format!(
        "labeling {}x{} target diagram with {} realizations per row",
        w.len(),
        v.len(),
        cfg.nr
    ));
    let target = topology::label_phase_diagram(
        cfg.cells,
        &v,
        &w,
        cfg.nr,
        sshlab::rng::mix2(cfg.seed, 4),
        256,
    )?;
    write_diagram(&run, "target", &target)?;

    let train_config = TrainConfig {
        max_epochs: cfg.max_epochs,
        ..TrainConfig::default()
    };
    let report = evalgen::seed_sweep(
        &evalgen::SweepInputs {
            train: &train_ds,
            validation: &val_ds,
            test: &test_ds,
            target: &target,
        },
        &train_config,
        cfg.seeds,
        sshlab::rng::mix2(cfg.seed, 5),
    )?;
    run.write("sweep.csv", report.to_csv().as_bytes())?;
    run.write("sweep.txt", report.summary_table().as_bytes())?;
    run.write(
        "sweep.json",
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let n_well = report.rows.iter().filter(|r| r.well).count();
    run.note(format!(
        "sweep complete: {}/{} seeds classified well",
        n_well,
        report.rows.len()
    ));
    run.note(report.summary_table());
    run.finish(&cfg)
}
