//! Command-line front end: generate synthetic datasets, train, evaluate,
//! run preset experiment rows, and mix decoder-input corpora offline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use parrot::decode::BeamConfig;
use parrot::model::TransformerModel;
use parrot::sampling::{mix_tokens, read_hypothesis_file, write_hypothesis_file, MixLevel};
use parrot::vocab;
use parrot::workbench::{
    config::load_config, dataset_io, evaluate, generate_task, load_checkpoint, preset_ids,
    run_preset, train, Dataset, TrainLog,
};

#[derive(Parser)]
#[command(
    name = "parrot",
    about = "Desk-scale transformer sequence-transduction workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omit to start from defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--train.lr 0.0005 --seed 42`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset to disk (train split + test buckets).
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; receives train/ and test_<bucket>/ subdirs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (a train split written by `gen`).
        #[arg(long)]
        data: PathBuf,
        /// Run directory; receives checkpoint/ and train_log.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on datasets and write reports.
    Eval {
        /// Checkpoint directory (as written by `train` or `preset`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Generated root (evaluates every test_*/ inside) or a single
        /// dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report path prefix; writes <prefix>.txt and <prefix>.json.
        #[arg(long, default_value = "report")]
        report: PathBuf,
        #[arg(long, default_value_t = 5)]
        width: usize,
        /// Decode length cap; 0 sizes it from the data.
        #[arg(long, default_value_t = 0)]
        max_len: usize,
        #[arg(long)]
        length_norm: bool,
        /// Dump per-layer attention maps for the first utterance of each
        /// set into a directory (debug aid).
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Run one preset experiment row end to end.
    Preset {
        /// Preset id from the built-in comparison grid.
        #[arg(long)]
        id: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix a dataset's references with hypothesis transcripts offline and
    /// write the resulting decoder-input corpus.
    Mix {
        /// Dataset directory providing references and utterance ids.
        #[arg(long)]
        data: PathBuf,
        /// Hypothesis file: `<utt_id>\t<space-separated token ids>`.
        #[arg(long)]
        hyp: PathBuf,
        /// Teacher-force rate to mix at.
        #[arg(long)]
        p: f32,
        #[arg(long, default_value = "token")]
        level: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output corpus path (same format as the hypothesis file).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen { cfg, out } => cmd_gen(&cfg, &out),
        Command::Train { cfg, data, out } => cmd_train(&cfg, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            report,
            width,
            max_len,
            length_norm,
            dump_attention,
        } => cmd_eval(
            &checkpoint,
            &data,
            &report,
            width,
            max_len,
            length_norm,
            dump_attention.as_deref(),
        ),
        Command::Preset { id, cfg, out } => cmd_preset(&id, &cfg, &out),
        Command::Mix {
            data,
            hyp,
            p,
            level,
            seed,
            out,
        } => cmd_mix(&data, &hyp, p, &level, seed, &out),
    }
}

fn cmd_gen(args: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let task = cfg.task_config();
    let generated = generate_task(&task)?;
    dataset_io::save_dataset(&generated.train, &out.join("train"))?;
    println!(
        "wrote {} train utterances to {}",
        generated.train.utts.len(),
        out.join("train").display()
    );
    for (name, ds) in &generated.buckets {
        let dir = out.join(format!("test_{name}"));
        dataset_io::save_dataset(ds, &dir)?;
        println!(
            "wrote {} '{name}' utterances to {}",
            ds.utts.len(),
            dir.display()
        );
    }
    Ok(())
}

fn cmd_train(args: &ConfigArgs, data: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let dataset = dataset_io::load_dataset(data)?;
    let train_cfg = cfg.train_config()?;

    let mut model_cfg = cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = dataset.meta.vocab_size;
    }
    if model_cfg.input_feature_dim == 0 {
        model_cfg.input_feature_dim = dataset.meta.frame_dim;
    }
    if model_cfg.enc_pe_mode == parrot::positional::PeMode::Learned
        && model_cfg.enc_learned_max_len.is_none()
    {
        model_cfg.enc_learned_max_len = Some(dataset.max_frame_len());
    }
    if model_cfg.dec_pe_mode == parrot::positional::PeMode::Learned
        && model_cfg.dec_learned_max_len.is_none()
    {
        model_cfg.dec_learned_max_len = Some(dataset.max_token_len() + 1);
    }

    let source = match &cfg.sampling {
        Some(spec) => Some(spec.build_source()?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(0);
    let model = TransformerModel::new(model_cfg, &mut rng)?;
    println!(
        "training: {} parameters, {} utterances, {} epochs",
        model.param_count(),
        dataset.utts.len(),
        train_cfg.epochs
    );
    let log = train(&model, &dataset, &train_cfg, source.as_ref(), Some(out))?;
    report_training(&log, out);
    Ok(())
}

fn report_training(log: &TrainLog, out: &Path) {
    if let (Some(first), Some(last)) = (log.first_loss(), log.last_loss()) {
        println!(
            "done: {} steps, loss {first:.4} -> {last:.4}; artifacts in {}",
            log.steps.len(),
            out.display()
        );
    }
}

fn collect_eval_sets(data: &Path) -> anyhow::Result<Vec<(String, Dataset)>> {
    if data.join("manifest.tsv").is_file() {
        let name = data
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "test".to_string());
        return Ok(vec![(name, dataset_io::load_dataset(data)?)]);
    }
    let mut sets = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(data)
        .with_context(|| format!("reading {}", data.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(bucket) = name.strip_prefix("test_") {
            if path.join("manifest.tsv").is_file() {
                sets.push((bucket.to_string(), dataset_io::load_dataset(&path)?));
            }
        }
    }
    if sets.is_empty() {
        bail!(
            "{}: no dataset found (expected manifest.tsv or test_*/ subdirs)",
            data.display()
        );
    }
    Ok(sets)
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    report_prefix: &Path,
    width: usize,
    max_len: usize,
    length_norm: bool,
    dump_attention: Option<&Path>,
) -> anyhow::Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let sets = collect_eval_sets(data)?;
    let longest = sets
        .iter()
        .map(|(_, ds)| ds.max_token_len())
        .max()
        .unwrap_or(0);
    let beam = BeamConfig {
        width,
        max_len: if max_len == 0 { 2 * longest + 4 } else { max_len },
        length_norm,
    };
    let report = evaluate(&model, &sets, &beam)?;
    print!("{}", report.to_text());

    let txt = report_prefix.with_extension("txt");
    let json = report_prefix.with_extension("json");
    if let Some(parent) = txt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&txt, report.to_text())?;
    std::fs::write(&json, report.to_json())?;
    println!("reports: {} {}", txt.display(), json.display());

    if let Some(dir) = dump_attention {
        dump_attention_maps(&model, &sets, dir)?;
        println!("attention maps: {}", dir.display());
    }
    Ok(())
}

/// Re-encode the first utterance of each set with the probe on and write
/// per-layer attention maps as JSON.
fn dump_attention_maps(
    model: &TransformerModel,
    sets: &[(String, Dataset)],
    dir: &Path,
) -> anyhow::Result<()> {
    use parrot::model::FwdCtx;
    use parrot::tensor::{Graph, Tensor};
    std::fs::create_dir_all(dir)?;
    model.set_attn_probe(true);
    for (name, ds) in sets {
        let Some(u) = ds.utts.first() else { continue };
        let frames = Tensor::from_vec(&[1, u.n_frames, ds.meta.frame_dim], u.frames.clone())?;
        let mut graph = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = FwdCtx::new(&mut graph, &mut rng, false);
        let enc = model.encode(&mut ctx, &frames, &[u.n_frames])?;
        let dec_input = vec![std::iter::once(vocab::SOS)
            .chain(u.tokens.iter().copied())
            .collect::<Vec<u32>>()];
        model.decode_step_parallel(&mut ctx, &enc, &[u.n_frames], &dec_input)?;
        let maps: Vec<serde_json::Value> = model
            .probed_attention()
            .into_iter()
            .map(|(layer, shape, data)| {
                serde_json::json!({ "layer": layer, "shape": shape, "weights": data })
            })
            .collect();
        let path = dir.join(format!("{name}_{}.json", u.id));
        std::fs::write(&path, serde_json::to_string(&maps)?)?;
    }
    model.set_attn_probe(false);
    Ok(())
}

fn cmd_preset(id: &str, args: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let task = cfg.task_config();
    let train_cfg = {
        // Presets own the schedule; keep only the user's plain knobs.
        let mut t = cfg.train.clone();
        t.seed = cfg.master_seed();
        t.schedule = None;
        t
    };
    println!("preset {id} (valid ids: {})", preset_ids().join(", "));
    let outcome = run_preset(id, &task, &train_cfg, &cfg.model, &cfg.beam, Some(out))?;
    print!("{}", outcome.report.to_text());
    for bucket in &outcome.skipped_buckets {
        println!("{bucket}: skipped (exceeds learned position table)");
    }
    report_training(&outcome.log, out);
    Ok(())
}

fn cmd_mix(
    data: &Path,
    hyp: &Path,
    p: f32,
    level: &str,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&p) {
        bail!("--p must be in [0, 1], got {p}");
    }
    let level = match level {
        "token" => MixLevel::Token,
        "sentence" => MixLevel::Sentence,
        other => bail!("--level must be 'token' or 'sentence', got '{other}'"),
    };
    let seed = seed
        .or_else(|| {
            std::env::var(parrot::workbench::config::SEED_ENV_VAR)
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(parrot::workbench::config::DEFAULT_SEED);
    let dataset = dataset_io::load_dataset(data)?;
    let hyps = read_hypothesis_file(hyp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut mixed = Vec::with_capacity(dataset.utts.len());
    let mut kept = 0usize;
    let mut total = 0usize;
    for u in &dataset.utts {
        let y_hat = hyps
            .get(&u.id)
            .with_context(|| format!("no hypothesis for utterance id '{}'", u.id))?;
        let mut y = u.tokens.clone();
        y.push(vocab::EOS);
        let plan = mix_tokens(&y, y_hat, p, level, &mut rng);
        kept += plan.teacher_mask.iter().filter(|&&m| m).count();
        total += plan.teacher_mask.len();
        mixed.push((u.id.clone(), plan.mixed));
    }
    write_hypothesis_file(out, &mixed)?;
    println!(
        "mixed {} utterances at p={p} ({}): teacher fraction {:.4}; wrote {}",
        mixed.len(),
        match level {
            MixLevel::Token => "token",
            MixLevel::Sentence => "sentence",
        },
        kept as f32 / total.max(1) as f32,
        out.display()
    );
    Ok(())
}
