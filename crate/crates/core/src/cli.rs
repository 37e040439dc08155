//! Command-line entry points.
//!
//! Four subcommands cover the pipeline:
//!
//! - `pretrain`: generate the source dataset, train the source model, and
//!   write the checkpoint plus a dataset manifest.
//! - `prepare`: probe the checkpoint for per-unit penalty weights and train
//!   the projector and class prototypes; both artifacts embed the
//!   checkpoint hash.
//! - `adapt`: replay a corrupted target stream against the artifacts under
//!   a run configuration and write per-batch metrics.
//! - `report`: aggregate one or more metrics files into a summary table.
//!
//! Run settings come from a key=value config file, from `--key value`
//! flags, or both; a flag overrides the file. Seeds resolve as: explicit
//! flag or config key first, then the `TTA_SEED` environment variable,
//! then (for pretrain and prepare) a default of 0. Exit codes: 0 on
//! success, 1 for operational failures, 2 for usage errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::adapt::{pretrain_source, run_online_evaluation, PretrainConfig, StreamSpec};
use crate::artifacts::{
    load_checkpoint, load_nsp_bundle, load_penalty, save_checkpoint, save_nsp_bundle,
    save_penalty, PenaltyMeta,
};
use crate::config::{build_run_plan, parse_config, FileConfig, KNOWN_KEYS};
use crate::data::{generate_dataset, LabeledDataset, TransformSpec};
use crate::metrics::{format_report, load_metrics, report_to_csv, save_metrics};
use crate::model::small_cnn;
use crate::nsp::{train_projector_and_prototypes, NspTrainConfig, PrototypeSource};
use crate::swr::{compute_penalty_vector, ManualCurve, SwrVariant};
use crate::{derive_seed, Error, Result};

pub const SEED_ENV: &str = "TTA_SEED";

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const PENALTY_FILE: &str = "penalty.bin";
const NSP_FILE: &str = "nsp.bin";
const DATA_MANIFEST: &str = "data.txt";

const USAGE: &str = "\
usage: ttalab <command> [options]

commands:
  pretrain --out DIR [--config FILE] [--seed N] [--classes N] [--per-class N]
           [--size N] [--epochs N] [--lr X] [--batch-size N]
  prepare  --artifacts DIR [--seed N] [--samples N]
           [--swr-variant exponent=N|manual=CURVE] [--exponent N]
           [--manual CURVE] [--flip-vertical] [--flip-horizontal]
           [--projector-depth N] [--depth N] [--width N]
           [--nsp-epochs N] [--nsp-lr X]
           [--proto-source projection|representation|classifier]
  adapt    --artifacts DIR --out FILE [--config FILE] [--KEY VALUE ...]
  report   --metrics FILE [--metrics FILE ...] [--csv FILE]

adapt accepts every run-config key as a flag, for example
  adapt --mode full --lr 1e-2 --corruption gaussian_noise --severity 5 --seed 1
and a flag overrides the same key in the config file. CURVE is one of
ramp, step, or constant:X. Seeds fall back to the TTA_SEED environment
variable when not given.
";

/// Runs the CLI against the given arguments (program name excluded) and
/// returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            eprintln!();
            eprint!("{USAGE}");
            2
        }
        Err(CliError::Op(e)) => {
            eprintln!("error: {e}");
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            1
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Op(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Op(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn dispatch(args: &[String]) -> std::result::Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(usage("missing command"));
    };
    match command.as_str() {
        "pretrain" => cmd_pretrain(&args[1..]),
        "prepare" => cmd_prepare(&args[1..]),
        "adapt" => cmd_adapt(&args[1..]),
        "report" => cmd_report(&args[1..]),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

// ─── Flag parsing ────────────────────────────────────────────────────────

struct Flags {
    values: BTreeMap<String, Vec<String>>,
    switches: BTreeSet<String>,
}

fn parse_flags(
    args: &[String],
    with_value: &[&str],
    switch_only: &[&str],
) -> std::result::Result<Flags, CliError> {
    let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut switches = BTreeSet::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if !arg.starts_with("--") {
            return Err(usage(format!("unexpected argument {arg:?}")));
        }
        let name = &arg[2..];
        if switch_only.contains(&name) {
            switches.insert(name.to_string());
            i += 1;
        } else if with_value.contains(&name) {
            let Some(value) = args.get(i + 1) else {
                return Err(usage(format!("flag --{name} needs a value")));
            };
            values.entry(name.to_string()).or_default().push(value.clone());
            i += 2;
        } else {
            return Err(usage(format!("unknown flag --{name}")));
        }
    }
    Ok(Flags { values, switches })
}

impl Flags {
    fn one(&self, name: &str) -> std::result::Result<Option<&str>, CliError> {
        match self.values.get(name).map(|v| v.as_slice()) {
            None => Ok(None),
            Some([v]) => Ok(Some(v.as_str())),
            Some(_) => Err(usage(format!("flag --{name} given more than once"))),
        }
    }

    fn require(&self, name: &str) -> std::result::Result<&str, CliError> {
        self.one(name)?
            .ok_or_else(|| usage(format!("missing required flag --{name}")))
    }

    fn many(&self, name: &str) -> &[String] {
        self.values.get(name).map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn parse<T: std::str::FromStr>(
        &self,
        name: &str,
        default: T,
    ) -> std::result::Result<T, CliError> {
        match self.one(name)? {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(format!("flag --{name}: cannot parse {v:?}"))),
        }
    }
}

fn env_seed() -> std::result::Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}: cannot parse {v:?} as a seed"))),
    }
}

fn seed_flag(flags: &Flags) -> std::result::Result<Option<u64>, CliError> {
    match flags.one("seed")? {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("flag --seed: cannot parse {v:?}"))),
    }
}

fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(0))
}

// ─── Config files ────────────────────────────────────────────────────────

fn load_config_file(path: Option<&str>) -> std::result::Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Op(Error::io(p.to_string(), e)))?;
            Ok(parse_config(&text)?)
        }
    }
}

fn check_keys(file: &FileConfig, known: &[&str]) -> std::result::Result<(), CliError> {
    let unknown: Vec<&str> = file.keys().filter(|k| !known.contains(k)).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CliError::Op(Error::Config {
            detail: format!("unknown keys: {}", unknown.join(", ")),
        }))
    }
}

/// One setting with flag-over-file precedence. The config key is the flag
/// name with dashes turned into underscores.
fn setting<T: std::str::FromStr>(
    flags: &Flags,
    file: &FileConfig,
    flag: &str,
    default: T,
) -> std::result::Result<T, CliError> {
    if let Some(v) = flags.one(flag)? {
        return v
            .parse()
            .map_err(|_| usage(format!("flag --{flag}: cannot parse {v:?}")));
    }
    let key = flag.replace('-', "_");
    if let Some(v) = file.get(&key) {
        return v.parse().map_err(|_| {
            CliError::Op(Error::Config {
                detail: format!("{key}: cannot parse {v:?}"),
            })
        });
    }
    Ok(default)
}

// ─── Dataset manifest ────────────────────────────────────────────────────

struct DataManifest {
    classes: usize,
    per_class: usize,
    size: usize,
    master_seed: u64,
}

impl DataManifest {
    fn save(&self, dir: &Path) -> Result<()> {
        let text = format!(
            "classes = {}\nper_class = {}\nimage_size = {}\nmaster_seed = {}\n",
            self.classes, self.per_class, self.size, self.master_seed
        );
        let path = dir.join(DATA_MANIFEST);
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATA_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg = parse_config(&text)?;
        let want = |key: &str| -> Result<u64> {
            cfg.get(key)
                .ok_or_else(|| Error::Config {
                    detail: format!("{}: missing key {key:?}", path.display()),
                })?
                .parse()
                .map_err(|_| Error::Config {
                    detail: format!("{}: key {key:?} is not an integer", path.display()),
                })
        };
        Ok(DataManifest {
            classes: want("classes")? as usize,
            per_class: want("per_class")? as usize,
            size: want("image_size")? as usize,
            master_seed: want("master_seed")?,
        })
    }

    fn source_dataset(&self) -> Result<LabeledDataset> {
        generate_dataset(
            self.classes,
            self.per_class,
            self.size,
            derive_seed(self.master_seed, "source-data", 0),
        )
    }

    fn target_dataset(&self) -> Result<LabeledDataset> {
        generate_dataset(
            self.classes,
            self.per_class,
            self.size,
            derive_seed(self.master_seed, "target-data", 0),
        )
    }
}

// ─── Subcommands ─────────────────────────────────────────────────────────

fn cmd_pretrain(args: &[String]) -> std::result::Result<(), CliError> {
    let flags = parse_flags(
        args,
        &[
            "out",
            "config",
            "seed",
            "classes",
            "per-class",
            "size",
            "epochs",
            "lr",
            "batch-size",
        ],
        &[],
    )?;
    let file = load_config_file(flags.one("config")?)?;
    check_keys(
        &file,
        &["out", "seed", "classes", "per_class", "size", "epochs", "lr", "batch_size"],
    )?;
    let out = match flags.one("out")? {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(
            file.get("out")
                .ok_or_else(|| usage("missing required flag --out"))?,
        ),
    };
    let seed = match seed_flag(&flags)? {
        Some(s) => s,
        None => match file.get("seed") {
            Some(v) => v.parse().map_err(|_| {
                CliError::Op(Error::Config {
                    detail: format!("seed: cannot parse {v:?}"),
                })
            })?,
            None => resolve_seed(None)?,
        },
    };
    let manifest = DataManifest {
        classes: setting(&flags, &file, "classes", 5usize)?,
        per_class: setting(&flags, &file, "per-class", 100usize)?,
        size: setting(&flags, &file, "size", 16usize)?,
        master_seed: seed,
    };
    let epochs = setting(&flags, &file, "epochs", 20usize)?;
    let lr = setting(&flags, &file, "lr", 5e-2f64)?;
    let batch_size = setting(&flags, &file, "batch-size", 32usize)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let dataset = manifest.source_dataset()?;
    let mut model = small_cnn(
        (3, manifest.size, manifest.size),
        (6, 6),
        32,
        manifest.classes,
        derive_seed(seed, "model-init", 0),
    );
    let accuracy = pretrain_source(
        &mut model,
        &dataset,
        &PretrainConfig {
            epochs,
            batch_size,
            lr,
            seed: derive_seed(seed, "pretrain", 0),
        },
    )?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let hash = save_checkpoint(&ckpt, &model)?;
    manifest.save(&out)?;
    println!(
        "trained source model on {} examples ({} classes), clean train accuracy {:.1}%",
        dataset.len(),
        manifest.classes,
        100.0 * accuracy
    );
    println!("checkpoint: {} ({})", ckpt.display(), short_hash(&hash));
    Ok(())
}

fn short_hash(h: &[u8; 32]) -> String {
    h[..6].iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_manual_curve(flag: &str, v: &str) -> std::result::Result<ManualCurve, CliError> {
    match v {
        "ramp" => Ok(ManualCurve::LinearRamp),
        "step" => Ok(ManualCurve::Step),
        other => match other.strip_prefix("constant:") {
            Some(num) => num
                .parse()
                .map(ManualCurve::Constant)
                .map_err(|_| usage(format!("flag --{flag}: bad constant {num:?}"))),
            None => Err(usage(format!(
                "flag --{flag}: expected ramp, step, or constant:X, got {v:?}"
            ))),
        },
    }
}

fn cmd_prepare(args: &[String]) -> std::result::Result<(), CliError> {
    let flags = parse_flags(
        args,
        &[
            "artifacts",
            "seed",
            "samples",
            "swr-variant",
            "exponent",
            "manual",
            "projector-depth",
            "depth",
            "width",
            "nsp-epochs",
            "nsp-lr",
            "proto-source",
        ],
        &["flip-vertical", "flip-horizontal"],
    )?;
    let dir = PathBuf::from(flags.require("artifacts")?);

    let mut exponent: Option<u32> = None;
    let mut manual: Option<ManualCurve> = None;
    if let Some(v) = flags.one("swr-variant")? {
        if let Some(n) = v.strip_prefix("exponent=") {
            exponent = Some(n.parse().map_err(|_| {
                usage(format!("flag --swr-variant: bad exponent {n:?}"))
            })?);
        } else if let Some(curve) = v.strip_prefix("manual=") {
            manual = Some(parse_manual_curve("swr-variant", curve)?);
        } else {
            return Err(usage(format!(
                "flag --swr-variant: expected exponent=N or manual=CURVE, got {v:?}"
            )));
        }
    }
    if let Some(v) = flags.one("exponent")? {
        if exponent.is_some() {
            return Err(usage("flag --exponent conflicts with --swr-variant"));
        }
        exponent = Some(v.parse().map_err(|_| {
            usage(format!("flag --exponent: cannot parse {v:?}"))
        })?);
    }
    if let Some(v) = flags.one("manual")? {
        if manual.is_some() {
            return Err(usage("flag --manual conflicts with --swr-variant"));
        }
        manual = Some(parse_manual_curve("manual", v)?);
    }
    let variant = SwrVariant {
        exponent: exponent.unwrap_or(2),
        flip_vertical: flags.switches.contains("flip-vertical"),
        flip_horizontal: flags.switches.contains("flip-horizontal"),
        manual,
    };
    let samples = flags.parse("samples", 1024usize)?;

    let proto_source = match flags.one("proto-source")? {
        None | Some("projection") => PrototypeSource::ProjectionZ,
        Some("representation") => PrototypeSource::RepresentationH,
        Some("classifier") => PrototypeSource::ClassifierWeights,
        Some(v) => {
            return Err(usage(format!(
                "flag --proto-source: expected projection, representation, or classifier, got {v:?}"
            )))
        }
    };
    let depth = match (flags.one("depth")?, flags.one("projector-depth")?) {
        (Some(_), Some(_)) => {
            return Err(usage("flag --depth conflicts with --projector-depth"))
        }
        (a, b) => a.or(b),
    };

    let manifest = DataManifest::load(&dir)?;
    let seed = match seed_flag(&flags)? {
        Some(s) => s,
        None => env_seed()?.unwrap_or(manifest.master_seed),
    };
    let nsp_defaults = NspTrainConfig::default();
    let nsp_cfg = NspTrainConfig {
        depth: match depth {
            None => nsp_defaults.depth,
            Some(v) => v.parse().map_err(|_| {
                usage(format!("flag --depth: cannot parse {v:?}"))
            })?,
        },
        width: flags.parse("width", nsp_defaults.width)?,
        epochs: flags.parse("nsp-epochs", nsp_defaults.epochs)?,
        lr: flags.parse("nsp-lr", nsp_defaults.lr)?,
        source: proto_source,
        seed: derive_seed(seed, "nsp-train", 0),
        ..nsp_defaults
    };

    let (model, ckpt_hash) = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let dataset = manifest.source_dataset()?;
    let transform = TransformSpec::probe_default();

    let probe_seed = derive_seed(seed, "swr-probe", 0);
    let penalty = compute_penalty_vector(&model, &dataset, &transform, samples, probe_seed, &variant)?;
    let penalty_path = dir.join(PENALTY_FILE);
    save_penalty(
        &penalty_path,
        &penalty,
        &PenaltyMeta {
            samples: samples as u64,
            probe_seed,
            variant,
        },
        &ckpt_hash,
    )?;

    let (projector, bank) = train_projector_and_prototypes(&model, &dataset, &transform, &nsp_cfg)?;
    let nsp_path = dir.join(NSP_FILE);
    save_nsp_bundle(&nsp_path, &projector, &bank, &ckpt_hash)?;

    println!("penalty weights (gradient-cosine probe over {samples} samples):");
    for i in 0..penalty.unit_names.len() {
        println!(
            "  {:<8} similarity {:+.4}  weight {:.4}",
            penalty.unit_names[i], penalty.similarities[i], penalty.weights[i]
        );
    }
    println!("penalty:  {}", penalty_path.display());
    println!("prototypes: {} (projector depth {})", nsp_path.display(), projector.depth);
    Ok(())
}

fn cmd_adapt(args: &[String]) -> std::result::Result<(), CliError> {
    let mut value_flags: Vec<String> =
        vec!["artifacts".into(), "config".into(), "out".into()];
    for key in KNOWN_KEYS {
        value_flags.push(key.replace('_', "-"));
        if key.contains('_') {
            value_flags.push((*key).to_string());
        }
    }
    let flag_names: Vec<&str> = value_flags.iter().map(String::as_str).collect();
    let flags = parse_flags(args, &flag_names, &[])?;

    let mut file_cfg = load_config_file(flags.one("config")?)?;
    for key in KNOWN_KEYS {
        let dashed = key.replace('_', "-");
        let from_dashed = flags.one(&dashed)?;
        let from_plain = if dashed == *key { None } else { flags.one(key)? };
        let value = match (from_dashed, from_plain) {
            (Some(_), Some(_)) => {
                return Err(usage(format!("flag --{dashed} given more than once")))
            }
            (a, b) => a.or(b),
        };
        if let Some(v) = value {
            file_cfg.set(key, v);
        }
    }
    let artifacts_key = file_cfg.take("artifacts");
    let out_key = file_cfg.take("out");
    let dir = match flags.one("artifacts")? {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(
            artifacts_key.ok_or_else(|| usage("missing required flag --artifacts"))?,
        ),
    };
    let out = match flags.one("out")? {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(out_key.ok_or_else(|| usage("missing required flag --out"))?),
    };
    let plan = build_run_plan(&file_cfg, env_seed()?)?;

    let manifest = DataManifest::load(&dir)?;
    let (model, ckpt_hash) = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let (penalty, _, _) = load_penalty(&dir.join(PENALTY_FILE), Some(&ckpt_hash))?;
    let mut model = model;
    let mut projector = None;
    let mut bank = None;
    if plan.adapt.mode.uses_nsp() {
        let (p, b, _) = load_nsp_bundle(&dir.join(NSP_FILE), Some(&ckpt_hash))?;
        projector = Some(p);
        bank = Some(b);
    }

    let target = manifest.target_dataset()?;
    let spec = StreamSpec {
        dataset: &target,
        corruption: plan.corruption,
        batch_size: plan.adapt.batch_size,
        seed: plan.stream_seed,
    };
    let transform = TransformSpec::probe_default();
    let record = run_online_evaluation(
        &mut model,
        projector.as_mut(),
        bank.as_mut(),
        &penalty,
        &plan.adapt,
        &transform,
        &spec,
        &plan.run_id,
    )?;
    save_metrics(&out, &record)?;
    println!(
        "{}: {} batches, error {:.2}%, {} aborted steps -> {}",
        plan.run_id,
        record.batches.len(),
        100.0 * record.error_rate(),
        record.aborted_steps,
        out.display()
    );
    Ok(())
}

fn cmd_report(args: &[String]) -> std::result::Result<(), CliError> {
    let flags = parse_flags(args, &["metrics", "csv"], &[])?;
    let paths = flags.many("metrics");
    if paths.is_empty() {
        return Err(usage("report needs at least one --metrics FILE"));
    }
    let mut records = Vec::new();
    for p in paths {
        records.push(load_metrics(Path::new(p))?);
    }
    print!("{}", format_report(&records));
    if let Some(csv_path) = flags.one("csv")? {
        std::fs::write(csv_path, report_to_csv(&records))
            .map_err(|e| Error::io(csv_path.to_string(), e))?;
    }
    Ok(())
}
