//! `sbu`: fault-injection campaigns, compression and bias-flip predictions
//! from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation error, 3 internal.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sbu_core::campaign::{self, read_matrix_csv, write_matrix_csv, write_records_csv, CampaignConfig};
use sbu_core::census::{partial_exponent_census, value_range_census, RangeCensus};
use sbu_core::compression::{
    apply_prune, class_maps, fold_batch_norm, map_mismatch, quantize_model, sensitivity_sweep_all, stopping_check,
    write_curves_csv, PruningPlan, StopDecision,
};
use sbu_core::error_model::{bias_signs, class_frequencies, BiasSign, PredictionReport, SaturationProfile, Weighting};
use sbu_core::kernels::ActivationKind;
use sbu_core::model::{
    build_bias_probe_model, build_unet, enumerate_fault_space, infer, load_model, load_tensor, save_model,
    save_tensor, synthetic_inputs, DTypeMode, LayerKind, ModelGraph, ParamKind,
};
use sbu_core::report::{compare_prediction, RunManifest};
use sbu_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "sbu", version, about = "Single-bit-upset fault injection for segmentation networks")]
struct Cli {
    /// Directory for outputs that are not given an explicit path.
    #[arg(long, global = true, env = "SBU_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic U-Net model file.
    Gen(GenArgs),
    /// Generate a bias probe model and its input image.
    GenProbe(ProbeArgs),
    /// Print per-layer fault-space sizes and sample sizes.
    Plan(CampaignArgs),
    /// Run a campaign: records.csv, matrix.csv, manifest.json.
    Run(RunArgs),
    /// Expected bias-flip error from class frequencies and bias signs.
    Predict(PredictArgs),
    /// Compare a measured matrix with a prediction.
    Compare(CompareArgs),
    /// Remove the lowest-L1 filters of prunable convolutions.
    Prune(PruneArgs),
    /// Per-layer pruning sensitivity curves.
    Sweep(SweepArgs),
    /// Fold batch norm and quantize to int8.
    Quantize(QuantizeArgs),
    /// Value-range and partial-exponent census.
    Census(CensusArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    in_channels: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value = "relu")]
    activation: ActivationKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model path (default: <out-dir>/model.sbm).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Classifier biases, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    biases: Vec<f32>,
    /// Golden class frequencies, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    freqs: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model path (default: <out-dir>/probe.sbm).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input path (default: <out-dir>/probe_input.sbt).
    #[arg(long)]
    input_out: Option<PathBuf>,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    SaturatedOnly,
    LinearRamp,
}

#[derive(Args)]
struct PredictArgs {
    /// Class frequencies, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "model")]
    freqs: Option<Vec<f64>>,
    /// Per-bias error contributions in percent, instead of frequencies and signs.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["freqs", "model", "signs", "biases"])]
    contributions: Option<Vec<f64>>,
    /// Bias signs as `-`/`+` or `neg`/`pos`, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "biases")]
    signs: Option<Vec<String>>,
    /// Bias values, comma separated; only their signs are used.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    biases: Option<Vec<f64>>,
    /// Model whose classifier biases and golden map supply the inputs.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Input tensor for the golden map (default: one synthetic scene).
    #[arg(long, requires = "model")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-bias flip probabilities (default uniform).
    #[arg(long, value_delimiter = ',')]
    p_fi: Option<Vec<f64>>,
    /// Saturation bit (default 17 for ReLU, 19 for bounded activations).
    #[arg(long)]
    k_sat: Option<u8>,
    #[arg(long, default_value_t = 0)]
    k_min: u8,
    #[arg(long, value_enum, default_value = "saturated-only")]
    weighting: WeightingArg,
    /// Activation used to pick the default k_sat without a model.
    #[arg(long, default_value = "relu")]
    activation: ActivationKind,
    /// Report path (default: <out-dir>/prediction.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    prediction: PathBuf,
    /// Layer holding the classifier biases (default: highest in the matrix).
    #[arg(long)]
    layer: Option<usize>,
    /// Flag threshold in percentage points.
    #[arg(long, default_value_t = 2.5)]
    half_width: f64,
    /// Compare against the quantized expectation.
    #[arg(long)]
    quantized: bool,
    /// Report path (default: <out-dir>/deviation.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Same ratio for every prunable layer.
    #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
    ratio: Option<f64>,
    /// CSV with `layer_id,ratio` rows.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Model path (default: <out-dir>/pruned.sbm).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthInputs {
    /// Synthetic scenes used as inputs.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    inputs: SynthInputs,
    /// Curves path (default: <out-dir>/curves.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration tensor files (default: synthetic scenes).
    #[arg(long, num_args = 1..)]
    calib: Vec<PathBuf>,
    #[command(flatten)]
    inputs: SynthInputs,
    /// Model path (default: <out-dir>/quantized.sbm).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CensusArgs {
    #[arg(long)]
    model: PathBuf,
    /// Exponent bits to examine (23..=29).
    #[arg(long, value_delimiter = ',', default_values_t = 23u8..=29)]
    bits: Vec<u8>,
    /// Also write the census as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<sbu_core::Error> for Failure {
    fn from(e: sbu_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Usage(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Data(e))) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(3),
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let out = cli.out_dir;
    match cli.cmd {
        Cmd::Gen(a) => gen(a, &out),
        Cmd::GenProbe(a) => gen_probe(a, &out),
        Cmd::Plan(a) => plan(a),
        Cmd::Run(a) => run(a, &out),
        Cmd::Predict(a) => predict(a, &out),
        Cmd::Compare(a) => compare(a, &out),
        Cmd::Prune(a) => prune(a, &out),
        Cmd::Sweep(a) => sweep(a, &out),
        Cmd::Quantize(a) => quantize(a, &out),
        Cmd::Census(a) => census(a),
    }
}

fn output_path(explicit: Option<PathBuf>, dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let p = explicit.unwrap_or_else(|| dir.join(name));
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(p)
}

fn open_model(path: &Path) -> anyhow::Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn default_space(model: &ModelGraph) -> u64 {
    let kinds: BTreeSet<ParamKind> = ParamKind::DEFAULT_CAMPAIGN.into_iter().collect();
    enumerate_fault_space(model, &kinds).total()
}

fn print_summary(label: &str, model: &ModelGraph) {
    println!(
        "{label}: {} params, fault space N={} ({} mode, {})",
        model.param_count(),
        default_space(model),
        match model.dtype_mode() {
            DTypeMode::Float32 => "float32",
            DTypeMode::Int8 => "int8",
        },
        model.activation().name()
    );
}

fn synth(model: &ModelGraph, s: &SynthInputs) -> Result<Vec<Tensor>, Failure> {
    if s.count == 0 || s.size == 0 {
        return Err(Failure::Usage("--count and --size must be positive".into()));
    }
    Ok(synthetic_inputs(model.n_input_channels(), s.size, s.size, s.count, s.seed))
}

fn gen(a: GenArgs, dir: &Path) -> CmdResult {
    if a.depth == 0 || a.base_channels == 0 || a.in_channels == 0 || a.classes == 0 {
        return Err(Failure::Usage("depth, channels and classes must be at least 1".into()));
    }
    let m = build_unet(a.depth, a.base_channels, a.in_channels, a.classes, a.activation, a.seed)?;
    let path = output_path(a.out, dir, "model.sbm")?;
    save_model(&m, &path)?;
    let kinds: BTreeSet<ParamKind> = ParamKind::DEFAULT_CAMPAIGN.into_iter().collect();
    let space = enumerate_fault_space(&m, &kinds);
    for (layer, n) in space.layer_totals() {
        println!("layer {layer:3} {:<10} N={n}", m.nodes()[layer].kind.name());
    }
    print_summary("model", &m);
    println!("wrote {} sha256={}", path.display(), m.digest());
    Ok(())
}

fn gen_probe(a: ProbeArgs, dir: &Path) -> CmdResult {
    let (m, input) = build_bias_probe_model(&a.biases, &a.freqs, a.size, a.seed)?;
    let freqs = class_frequencies(&infer(&m, &input)?, m.n_classes())?;
    let mp = output_path(a.out, dir, "probe.sbm")?;
    let ip = output_path(a.input_out, dir, "probe_input.sbt")?;
    save_model(&m, &mp)?;
    save_tensor(&input, &ip)?;
    println!("golden frequencies: {}", join(&freqs, 4));
    println!("wrote {} and {}", mp.display(), ip.display());
    Ok(())
}

fn join(v: &[f64], prec: usize) -> String {
    v.iter().map(|x| format!("{x:.prec$}")).collect::<Vec<_>>().join(",")
}

fn plan(a: CampaignArgs) -> CmdResult {
    let config = CampaignConfig::load(&a.config)?;
    let m = open_model(&a.model)?;
    let p = campaign::plan(&m, &config)?;
    for l in &p.layers {
        println!("layer {:3} N={} n={}", l.layer_id, l.population, l.injections);
    }
    println!("total N={} n={}", p.total_population(), p.total_injections());
    Ok(())
}

fn run(a: RunArgs, dir: &Path) -> CmdResult {
    let start = Instant::now();
    let config = CampaignConfig::load(&a.campaign.config)?;
    let m = open_model(&a.campaign.model)?;
    let inputs = config.inputs.load(&m, a.campaign.config.parent())?;
    let (p, records, matrix) = campaign::run_campaign(&m, &config, inputs, a.jobs)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_records_csv(&records, BufWriter::new(File::create(dir.join("records.csv")).context("records.csv")?))?;
    write_matrix_csv(&matrix, BufWriter::new(File::create(dir.join("matrix.csv")).context("matrix.csv")?))?;
    let mut manifest = RunManifest::new("run", &config, &m.digest(), config.seed, a.jobs)?;
    manifest.add_output(dir, "records.csv")?;
    manifest.add_output(dir, "matrix.csv")?;
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(dir.join("manifest.json"))?;
    println!(
        "{} injections over {} layers, mean error {:.4} (std {:.4})",
        p.total_injections(),
        p.layers.len(),
        matrix.global.mean,
        matrix.global.std
    );
    println!("wrote records.csv, matrix.csv, manifest.json to {}", dir.display());
    Ok(())
}

fn parse_sign(s: &str) -> Result<BiasSign, Failure> {
    match s.trim() {
        "-" | "neg" | "negative" => Ok(BiasSign::Negative),
        "+" | "pos" | "positive" => Ok(BiasSign::Positive),
        other => Err(Failure::Usage(format!("bias sign `{other}` is not one of -, +, neg, pos"))),
    }
}

fn classifier_biases(m: &ModelGraph) -> anyhow::Result<Vec<f64>> {
    let b = m.nodes()[m.output_id()]
        .param(ParamKind::ConvBias)
        .ok_or_else(|| anyhow!("classifier has no bias"))?;
    Ok((0..b.len()).map(|i| b.real_value(i).unwrap()).collect())
}

fn predict(a: PredictArgs, dir: &Path) -> CmdResult {
    let weighting = match a.weighting {
        WeightingArg::SaturatedOnly => Weighting::SaturatedOnly,
        WeightingArg::LinearRamp => Weighting::LinearRamp,
    };
    let profile_for = |act: ActivationKind| {
        let k_sat = a.k_sat.unwrap_or(if act == ActivationKind::Relu { 17 } else { 19 });
        SaturationProfile { k_sat, k_min: a.k_min, bit_range: (0, 30), weighting }
    };
    let report = if let Some(c) = &a.contributions {
        PredictionReport::from_contributions(c, a.p_fi.as_deref(), profile_for(a.activation))?
    } else {
        let (freqs, signs, act) = if let Some(path) = &a.model {
            let m = open_model(path)?;
            let input = match &a.input {
                Some(p) => load_tensor(p).with_context(|| format!("loading {}", p.display()))?,
                None => synthetic_inputs(m.n_input_channels(), a.size, a.size, 1, a.seed).remove(0),
            };
            let freqs = class_frequencies(&infer(&m, &input)?, m.n_classes())?;
            (freqs, bias_signs(&classifier_biases(&m)?), m.activation())
        } else {
            let freqs = a.freqs.clone().ok_or_else(|| Failure::Usage("give --freqs, --contributions or --model".into()))?;
            let signs = match (&a.signs, &a.biases) {
                (Some(s), _) => s.iter().map(|s| parse_sign(s)).collect::<Result<_, _>>()?,
                (None, Some(b)) => bias_signs(b),
                (None, None) => return Err(Failure::Usage("give --signs or --biases with --freqs".into())),
            };
            (freqs, signs, a.activation)
        };
        if freqs.len() != signs.len() {
            return Err(Failure::Usage(format!("{} frequencies but {} signs", freqs.len(), signs.len())));
        }
        PredictionReport::new(&freqs, &signs, a.p_fi.as_deref(), profile_for(act))?
    };
    let path = output_path(a.out, dir, "prediction.json")?;
    fs::write(&path, serde_json::to_string_pretty(&report).context("serializing report")? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("contributions (%): {}", join(&report.contributions, 2));
    println!("expected error, float MSB flip: {:.2}%", report.expected_msb);
    println!("expected error, quantized (k_sat {}): {:.2}%", report.profile.k_sat, report.expected_quantized);
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(a: CompareArgs, dir: &Path) -> CmdResult {
    let rows = read_matrix_csv(File::open(&a.matrix).with_context(|| format!("opening {}", a.matrix.display()))?)?;
    let text = fs::read_to_string(&a.prediction).with_context(|| format!("reading {}", a.prediction.display()))?;
    let prediction: PredictionReport = serde_json::from_str(&text).context("parsing prediction")?;
    let layer = match a.layer.or_else(|| rows.iter().map(|r| r.layer_id).max()) {
        Some(l) => l,
        None => return Err(Failure::Data(anyhow!("matrix has no cells"))),
    };
    let report = compare_prediction(&rows, &prediction, layer, a.half_width, a.quantized)?;
    for c in &report.comparisons {
        println!(
            "{}: expected {:.2}% measured {:.2}% deviation {:.2}{}",
            c.name,
            c.expected,
            c.measured,
            c.abs_deviation,
            if c.flagged { format!(" FLAGGED (> {})", a.half_width) } else { String::new() }
        );
    }
    let path = output_path(a.out, dir, "deviation.json")?;
    fs::write(&path, serde_json::to_string_pretty(&report).context("serializing report")? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn prune(a: PruneArgs, dir: &Path) -> CmdResult {
    let m = open_model(&a.model)?;
    let plan = match (a.ratio, &a.plan) {
        (Some(r), _) => PruningPlan::uniform(&m, r),
        (None, Some(p)) => PruningPlan::read_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    let pruned = apply_prune(&m, &plan)?;
    let path = output_path(a.out, dir, "pruned.sbm")?;
    save_model(&pruned, &path)?;
    print_summary("before", &m);
    print_summary("after", &pruned);
    println!("wrote {} sha256={}", path.display(), pruned.digest());
    Ok(())
}

fn sweep(a: SweepArgs, dir: &Path) -> CmdResult {
    let m = open_model(&a.model)?;
    let inputs = synth(&m, &a.inputs)?;
    // no ground truth: the unpruned model's maps are the labels
    let labels = class_maps(&m, &inputs)?;
    let curves = sensitivity_sweep_all(&m, &inputs, &labels)?;
    let path = output_path(a.out, dir, "curves.csv")?;
    write_curves_csv(&curves, BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))?;
    for c in &curves {
        let base = (c.giou[0], c.wiou[0]);
        let keep = (1..c.ratios.len())
            .take_while(|&i| stopping_check(base, (c.giou[i], c.wiou[i])) == StopDecision::Continue)
            .last()
            .map_or(0.0, |i| c.ratios[i]);
        println!("layer {:3} GIoU at 0.9: {:6.2}  largest ratio within tolerance: {keep:.1}", c.layer_id, c.giou[c.giou.len() - 1]);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn quantize(a: QuantizeArgs, dir: &Path) -> CmdResult {
    let m = open_model(&a.model)?;
    let calib = if a.calib.is_empty() {
        synth(&m, &a.inputs)?
    } else {
        a.calib
            .iter()
            .map(|p| load_tensor(p).with_context(|| format!("loading {}", p.display())))
            .collect::<anyhow::Result<_>>()?
    };
    let has_bn = m.nodes().iter().any(|n| matches!(n.kind, LayerKind::BatchNorm { .. }));
    let folded = if has_bn { fold_batch_norm(&m)? } else { m.clone() };
    let q = quantize_model(&folded, &calib)?;
    let path = output_path(a.out, dir, "quantized.sbm")?;
    save_model(&q, &path)?;
    print_summary("before", &m);
    print_summary("after", &q);
    println!("class-map mismatch on calibration inputs: {:.2}%", 100.0 * map_mismatch(&folded, &q, &calib)?);
    println!("wrote {} sha256={}", path.display(), q.digest());
    Ok(())
}

fn census(a: CensusArgs) -> CmdResult {
    let m = open_model(&a.model)?;
    if let Some(b) = a.bits.iter().find(|b| !(23..=29).contains(*b)) {
        return Err(Failure::Usage(format!("exponent bit {b} outside 23..=29")));
    }
    let ranges = value_range_census(&m)?;
    println!("layer   total   |x|<1   1<=|x|<2  |x|>=2   zeros");
    let pooled = RangeCensus::pooled(&ranges);
    let rows = ranges.iter().map(|c| (c.layer_id.to_string(), c)).chain(std::iter::once(("all".to_string(), &pooled)));
    for (label, c) in rows {
        println!(
            "{label:>5} {:7} {:7.4} {:9.4} {:7.4} {:7.4}",
            c.total,
            c.frac_below_one(),
            c.frac_below_two() - c.frac_below_one(),
            c.frac_two_or_more(),
            c.frac_zero()
        );
    }
    let mut exps = Vec::new();
    println!("layer  bit  zero_at_bit  one_flip_from_full");
    for &bit in &a.bits {
        for c in partial_exponent_census(&m, bit)? {
            println!("{:5} {:4} {:12.4} {:19.4}", c.layer_id, bit, c.frac_zero_at_bit(), c.frac_one_flip());
            exps.push(c);
        }
    }
    if let Some(p) = a.json {
        let v = serde_json::json!({ "value_range": ranges, "partial_exponent": exps });
        fs::write(&p, serde_json::to_string_pretty(&v).context("serializing census")? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
