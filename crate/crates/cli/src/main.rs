//! `nids`: synthetic data generation, adapter training, refinement, matching,
//! evaluation and gradient checks over tensor-container files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nids_core::adapter::{Adapter, AdapterKind};
use nids_core::eval::synth::gen_synth;
use nids_core::eval::{compute_ap, IouMode};
use nids_core::io::layout::{
    mask_record_name, params_from_container, params_to_container, queries_from_container, queries_to_container,
    refine_container, templates_from_container, templates_to_container,
};
use nids_core::io::records::{read_records, to_ground_truth, to_predictions, write_records};
use nids_core::io::{Config, DetectionRecord, RunManifest, Tensor, TensorContainer};
use nids_core::matcher::{run_matching, MatcherConfig};
use nids_core::trainer::{grad_check, train_adapter, AdapterSpec, GradCheckConfig, GRAD_CHECK_TOL};
use nids_core::NidsError;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "nids", version, about = "Few-shot novel instance detection: embedding refinement and matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic template/query/ground-truth set.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter on a template container.
    TrainAdapter {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter container to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Replace the embeddings of a container by their refined versions.
    Refine {
        #[arg(long)]
        params: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score, assign and threshold query proposals.
    Match {
        #[command(flatten)]
        inputs: MatchInputs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run matching from a manifest file.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// COCO-style AP of prediction records against ground-truth records.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "box")]
        mode: ModeArg,
        /// Container holding the masks named by prediction records.
        #[arg(long)]
        pred_masks: Option<PathBuf>,
        /// Container holding the masks named by ground-truth records.
        #[arg(long)]
        gt_masks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic adapter gradients with central finite differences.
    GradCheck {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        templates: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check around the all-zero parameter point.
        #[arg(long)]
        zero_params: bool,
    },
}

#[derive(Args)]
struct MatchInputs {
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Add the patch-level appearance bonus.
    #[arg(long)]
    appearance: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Weight,
    Clip,
}

impl From<KindArg> for AdapterKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Weight => AdapterKind::Weight,
            KindArg::Clip => AdapterKind::Clip,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Box,
    Mask,
}

enum Failure {
    Data(NidsError),
    Check(String),
}

impl From<NidsError> for Failure {
    fn from(e: NidsError) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<Config, NidsError> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn gen_synth_cmd(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let ds = gen_synth(&cfg.synth)?;
    std::fs::create_dir_all(out)?;
    templates_to_container(&ds.templates, Some(&ds.template_grids))?.write(out.join("templates.nids"))?;
    queries_to_container(&ds.proposals)?.write(out.join("queries.nids"))?;
    let mut gt_masks = TensorContainer::new();
    let mut gt = Vec::with_capacity(ds.ground_truth.objects.len());
    for (i, o) in ds.ground_truth.objects.iter().enumerate() {
        let name = format!("gt_mask_{i}");
        if let Some(m) = &o.mask {
            gt_masks.push(name.clone(), Tensor::u8(vec![m.height(), m.width()], m.to_bytes())?)?;
        }
        gt.push(DetectionRecord {
            image_id: o.image_id,
            instance_id: Some(o.instance_id),
            score: 1.0,
            bbox: o.bbox,
            mask_name: o.mask.as_ref().map(|_| name),
        });
    }
    write_records(out.join("gt.tsv"), &gt)?;
    if !gt_masks.is_empty() {
        gt_masks.write(out.join("gt_masks.nids"))?;
    }
    println!(
        "wrote {} templates ({} instances) and {} proposals over {} scenes to {}",
        ds.templates.embeddings().len(),
        ds.templates.num_instances(),
        ds.proposals.len(),
        cfg.synth.scenes,
        out.display()
    );
    Ok(())
}

fn train_cmd(
    kind: AdapterKind,
    templates: &Path,
    config: Option<&Path>,
    out: &Path,
    loss_csv: Option<&Path>,
) -> CliResult {
    let cfg = load_config(config)?;
    let data = templates_from_container(&TensorContainer::read(templates)?)?;
    let spec = AdapterSpec { kind, scale: cfg.scale(kind) };
    let outcome = train_adapter(&data.set, spec, &cfg.train_config(kind))?;
    params_to_container(&outcome.adapter)?.write(out)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in outcome.loss_history.iter().enumerate() {
        let _ = writeln!(csv, "{e},{l}");
    }
    let csv_path = loss_csv.map_or_else(|| PathBuf::from(format!("{}.loss.csv", out.display())), Path::to_path_buf);
    std::fs::write(&csv_path, csv)?;
    if let (Some(first), Some(last)) = (outcome.loss_history.first(), outcome.loss_history.last()) {
        println!("{kind} adapter: loss {first:.6} -> {last:.6} over {} epochs", outcome.loss_history.len());
    }
    Ok(())
}

fn refine_cmd(params: &Path, input: &Path, out: &Path) -> CliResult {
    let adapter = params_from_container(&TensorContainer::read(params)?)?;
    refine_container(&TensorContainer::read(input)?, &adapter)?.write(out)?;
    Ok(())
}

fn match_files(
    templates: &Path,
    queries: &Path,
    params: Option<&Path>,
    mut cfg: MatcherConfig,
    appearance: bool,
    out: &Path,
) -> CliResult {
    let tdata = templates_from_container(&TensorContainer::read(templates)?)?;
    let qcont = TensorContainer::read(queries)?;
    let proposals = queries_from_container(&qcont)?;
    let adapter: Option<Adapter> = params
        .map(|p| TensorContainer::read(p).map_err(Failure::from))
        .transpose()?
        .map(|c| params_from_container(&c))
        .transpose()?;
    cfg.use_appearance_bonus |= appearance;
    let result = run_matching(&tdata.set, tdata.grids.as_deref(), &proposals, adapter.as_ref(), &cfg)?;
    let has_masks = proposals.masks.is_some();
    let records: Vec<DetectionRecord> = result
        .labeled
        .iter()
        .zip(&result.kept)
        .map(|(p, &q)| DetectionRecord {
            image_id: p.image_id,
            instance_id: p.instance_id,
            score: p.score,
            bbox: p.bbox,
            mask_name: has_masks.then(|| mask_record_name(q)),
        })
        .collect();
    write_records(out, &records)?;
    println!("{} of {} proposals labeled", records.len(), proposals.len());
    Ok(())
}

fn eval_cmd(
    pred: &Path,
    gt: &Path,
    mode: ModeArg,
    pred_masks: Option<&Path>,
    gt_masks: Option<&Path>,
    out: Option<&Path>,
) -> CliResult {
    let mode = match mode {
        ModeArg::Box => IouMode::Box,
        ModeArg::Mask => IouMode::Mask,
    };
    let load = |p: Option<&Path>| p.map(TensorContainer::read).transpose();
    let (pm, gm) = (load(pred_masks)?, load(gt_masks)?);
    let preds = to_predictions(&read_records(pred)?, pm.as_ref())?;
    let gts = to_ground_truth(&read_records(gt)?, gm.as_ref())?;
    let r = compute_ap(&preds, &gts, mode)?;
    let mut report = String::new();
    let _ = writeln!(report, "mode={}", if mode == IouMode::Box { "box" } else { "mask" });
    let _ = writeln!(report, "ap={}", r.ap);
    let _ = writeln!(report, "ap50={}", r.ap50);
    let _ = writeln!(report, "ap75={}", r.ap75);
    for c in &r.curves {
        let ap_t = c.precision.iter().sum::<f64>() / c.precision.len() as f64;
        let _ = writeln!(report, "ap@{:.2}={}", c.iou_threshold, ap_t);
    }
    for (id, ap) in &r.per_instance {
        let _ = writeln!(report, "ap_instance_{id}={ap}");
    }
    match out {
        Some(p) => std::fs::write(p, &report)?,
        None => print!("{report}"),
    }
    println!("AP={:.4} AP50={:.4} AP75={:.4}", r.ap, r.ap50, r.ap75);
    Ok(())
}

fn grad_check_cmd(cfg: GradCheckConfig) -> CliResult {
    let report = grad_check(&cfg)?;
    println!(
        "max relative error: {:.3e} ({} parameters checked, {} skipped at relu kinks)",
        report.max_rel_err, report.checked, report.skipped
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("max relative error {:.3e} exceeds {GRAD_CHECK_TOL:e}", report.max_rel_err)))
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenSynth { config, out } => gen_synth_cmd(config.as_deref(), &out),
        Command::TrainAdapter { kind, templates, config, out, loss_csv } => {
            train_cmd(kind.into(), &templates, config.as_deref(), &out, loss_csv.as_deref())
        }
        Command::Refine { params, input, out } => refine_cmd(&params, &input, &out),
        Command::Match { inputs, config, out } => {
            let cfg = load_config(config.as_deref())?;
            match_files(
                &inputs.templates,
                &inputs.queries,
                inputs.params.as_deref(),
                cfg.matcher,
                inputs.appearance,
                &out,
            )
        }
        Command::Run { manifest, out } => {
            let m = RunManifest::load(&manifest)?;
            match_files(&m.templates, &m.queries, m.params.as_deref(), m.config.matcher, false, &out)
        }
        Command::Eval { pred, gt, mode, pred_masks, gt_masks, out } => {
            eval_cmd(&pred, &gt, mode, pred_masks.as_deref(), gt_masks.as_deref(), out.as_deref())
        }
        Command::GradCheck { kind, dim, instances, templates, step, seed, zero_params } => {
            grad_check_cmd(GradCheckConfig {
                kind: kind.into(),
                dim,
                num_instances: instances,
                templates_per_instance: templates,
                step,
                seed,
                zero_params,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
