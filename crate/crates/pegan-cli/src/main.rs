//! Command-line pipeline for pyramid-embedded GAN glyph synthesis.
//!
//! Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pegan::data::{
    batch_to_tensor, build_eval_set, format_codepoint, load_glyph, load_metadata_tsv, load_pairs,
    parse_codepoint, save_image, split_dataset, tensor_to_images, EvalSet, GlyphImage, GlyphPair,
};
use pegan::error::{Error, Result};
use pegan::gradcheck;
use pegan::metrics::{evaluate_generator, turing_sheet, write_answer_key, Recognizer};
use pegan::tensor::{no_grad, Mode};
use pegan::train::{digest_f64s, pretrain, tune, Stage, Trainer};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pegan",
    about = "Pyramid-embedded GAN for glyph image synthesis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 pre-training: one source font to N target fonts.
    Train {
        /// Run configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured absolute step target.
        #[arg(long)]
        steps: Option<u64>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-2 tuning: continue from a checkpoint on one category with the
    /// generator encoder frozen.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target category id (must have been present in pre-training).
        #[arg(long)]
        category: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate styled glyphs for every image in a directory.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        category: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint over the configured evaluation set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Report file (defaults to <out_dir>/metrics.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the three-band evaluation character set from metadata TSV.
    BuildEvalSet {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_band: usize,
    },
    /// Compose a visual-Turing sheet and its hidden answer key.
    TuringSheet {
        #[arg(long)]
        real_dir: PathBuf,
        #[arg(long)]
        generated_dir: PathBuf,
        #[arg(long)]
        out_sheet: PathBuf,
        #[arg(long)]
        out_key: PathBuf,
        /// Images per side.
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify every gradient against central finite differences.
    Gradcheck {
        /// Test hook: add a deliberately wrong gradient that must be caught.
        #[arg(long)]
        corrupt: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Shape(_) | Error::Lookup(_)
        | Error::Json(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Archive(_) => 2,
        Error::Numeric(_) | Error::Domain(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version output exits cleanly; usage errors exit 1.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            steps,
            seed,
        } => cmd_train(&config, out, steps, seed),
        Command::Tune {
            config,
            checkpoint,
            category,
            out,
            steps,
        } => cmd_tune(&config, &checkpoint, category, out, steps),
        Command::Generate {
            checkpoint,
            input_dir,
            category,
            out_dir,
        } => cmd_generate(&checkpoint, &input_dir, category, &out_dir),
        Command::Evaluate {
            checkpoint,
            config,
            out,
        } => cmd_evaluate(&checkpoint, &config, out),
        Command::BuildEvalSet {
            metadata,
            out,
            per_band,
        } => cmd_build_eval_set(&metadata, &out, per_band),
        Command::TuringSheet {
            real_dir,
            generated_dir,
            out_sheet,
            out_key,
            count,
            seed,
        } => cmd_turing_sheet(&real_dir, &generated_dir, &out_sheet, &out_key, count, seed),
        Command::Gradcheck { corrupt } => cmd_gradcheck(corrupt),
    }
}

/// Loads the pairs of every configured target font, reporting unmatched
/// files on stderr.
fn load_dataset(cfg: &RunConfig) -> Result<Vec<GlyphPair>> {
    let size = cfg.model.generator.input_size[0];
    let mut pairs = Vec::new();
    for target in &cfg.data.targets {
        let loaded = load_pairs(&cfg.data.source_dir, &target.dir, target.category_id, size)?;
        for warn in &loaded.unmatched {
            eprintln!("warning: unmatched glyph {warn}");
        }
        eprintln!(
            "loaded {} pairs for target font {} (category {})",
            loaded.pairs.len(),
            target.name,
            target.category_id
        );
        pairs.extend(loaded.pairs);
    }
    Ok(pairs)
}

/// Pairs for training: evaluation-set characters are held out when an eval
/// section is configured.
fn training_pairs(cfg: &RunConfig) -> Result<Vec<GlyphPair>> {
    let pairs = load_dataset(cfg)?;
    match &cfg.eval {
        Some(eval) => {
            let set = EvalSet::load(&eval.eval_set)?;
            let (train, held_out) = split_dataset(pairs, &set);
            eprintln!("holding out {} evaluation pairs", held_out.len());
            Ok(train)
        }
        None => Ok(pairs),
    }
}

fn cmd_train(
    config_path: &Path,
    out: Option<PathBuf>,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if cfg.train.stage != Stage::Pretrain {
        return Err(Error::Config(
            "train requires stage = \"pretrain\" in the train section".into(),
        ));
    }
    let pairs = training_pairs(&cfg)?;
    let mut trainer = Trainer::init(&cfg.model.generator, &cfg.model.discriminator, &cfg.train)?;
    let final_ckpt = pretrain(&mut trainer, &pairs, &cfg.out_dir)?;
    println!(
        "pre-training complete at step {}; checkpoint {}",
        trainer.step,
        final_ckpt.display()
    );
    println!("loss log: {}", cfg.out_dir.join("loss.csv").display());
    Ok(())
}

fn encoder_digest(trainer: &Trainer) -> u64 {
    let mut bits = Vec::new();
    let names = trainer.gen.encoder_entry_names();
    let mut ar = pegan::archive::Archive::new();
    trainer.gen.save_state(&mut ar).expect("in-memory save");
    for name in names {
        let (_, data) = ar.f64s(&name).expect("encoder entry");
        bits.extend(data);
    }
    digest_f64s(&bits)
}

fn cmd_tune(
    config_path: &Path,
    checkpoint: &Path,
    category: usize,
    out: Option<PathBuf>,
    steps: Option<u64>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if cfg.train.stage != Stage::Tune {
        return Err(Error::Config(
            "tune requires stage = \"tune\" in the train section".into(),
        ));
    }
    let mut trainer = Trainer::load_checkpoint(checkpoint)?;
    // Hyperparameters follow the config; the seed stays with the checkpoint
    // so the master rng stream continues where it left off.
    let seed = trainer.train_cfg.seed;
    trainer.train_cfg = cfg.train.clone();
    trainer.train_cfg.seed = seed;
    if let Some(steps) = steps {
        trainer.train_cfg.steps = steps;
    }
    trainer.adam_g.learning_rate = trainer.train_cfg.learning_rate;
    trainer.adam_d.learning_rate = trainer.train_cfg.learning_rate;
    if trainer.train_cfg.steps < trainer.step {
        return Err(Error::Config(format!(
            "step target {} is behind the checkpoint's step {}",
            trainer.train_cfg.steps, trainer.step
        )));
    }

    let pairs = training_pairs(&cfg)?;
    let digest_before = encoder_digest(&trainer);
    let final_ckpt = tune(&mut trainer, category, &pairs, &cfg.out_dir)?;
    let digest_after = encoder_digest(&trainer);
    if digest_before != digest_after {
        return Err(Error::Numeric(
            "encoder changed during tuning; freeze contract violated".into(),
        ));
    }
    println!(
        "tuning complete at step {}; encoder digest {digest_before:016x} unchanged; checkpoint {}",
        trainer.step,
        final_ckpt.display()
    );
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    input_dir: &Path,
    category: usize,
    out_dir: &Path,
) -> Result<()> {
    let trainer = Trainer::load_checkpoint(checkpoint)?;
    let gen = &trainer.gen;
    let size = gen.config().input_size[0];
    if category >= gen.config().num_categories {
        return Err(Error::Lookup(format!(
            "category {category} out of range 0..{}",
            gen.config().num_categories
        )));
    }

    let mut files: Vec<(u32, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(input_dir)
        .map_err(|e| Error::Data(format!("{}: {e}", input_dir.display())))?
    {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png") | Some("pgm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Ok(cp) = parse_codepoint(stem) {
                files.push((cp, path));
            }
        }
    }
    files.sort_by_key(|(cp, _)| *cp);
    if files.is_empty() {
        eprintln!("warning: no U+XXXX glyph images in {}", input_dir.display());
        return Ok(());
    }

    std::fs::create_dir_all(out_dir)?;
    let mut failures = 0usize;
    let mut written = 0usize;
    for chunk in files.chunks(8) {
        let mut loaded: Vec<(u32, GlyphImage)> = Vec::new();
        for (cp, path) in chunk {
            match load_glyph(path, size) {
                Ok(img) => loaded.push((*cp, img)),
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    failures += 1;
                }
            }
        }
        if loaded.is_empty() {
            continue;
        }
        let refs: Vec<&GlyphImage> = loaded.iter().map(|(_, g)| g).collect();
        let categories = vec![category; refs.len()];
        let batch = batch_to_tensor(&refs)?;
        let out = no_grad(|| gen.generate(&batch, &categories, Mode::Eval, None))?;
        for ((cp, _), img) in loaded.iter().zip(tensor_to_images(&out)?) {
            let out_path = out_dir.join(format!("{}.png", format_codepoint(*cp)));
            match save_image(&img, &out_path) {
                Ok(()) => written += 1,
                Err(e) => {
                    eprintln!("error: {}: {e}", out_path.display());
                    failures += 1;
                }
            }
        }
    }
    println!("generated {written} glyphs into {}", out_dir.display());
    if failures > 0 {
        return Err(Error::Data(format!("{failures} glyphs failed")));
    }
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let eval = cfg
        .eval
        .as_ref()
        .ok_or_else(|| Error::Config("config has no eval section".into()))?;
    let category = cfg.eval_category()?;
    let trainer = Trainer::load_checkpoint(checkpoint)?;

    let pairs: Vec<GlyphPair> = load_dataset(&cfg)?
        .into_iter()
        .filter(|p| p.category_id == category)
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!("no pairs for category {category}")));
    }
    let eval_set = EvalSet::load(&eval.eval_set)?;
    let recognizer = match &eval.recognizer {
        Some(path) => Some(Recognizer::load(path)?),
        None => None,
    };
    let report = evaluate_generator(
        &trainer.gen,
        &pairs,
        &eval_set,
        recognizer.as_ref(),
        eval.max_value,
    )?;
    let text = report.to_json_string()?;
    print!("{text}");
    let out_path = out.unwrap_or_else(|| cfg.out_dir.join("metrics.json"));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out_path, &text)?;
    eprintln!("report written to {}", out_path.display());
    Ok(())
}

fn cmd_build_eval_set(metadata: &Path, out: &Path, per_band: usize) -> Result<()> {
    let meta = load_metadata_tsv(metadata)?;
    let set = build_eval_set(&meta, per_band)?;
    set.save(out)?;
    println!(
        "bands easy/mid/hard: {}/{}/{} characters; written to {}",
        set.easy.len(),
        set.mid.len(),
        set.hard.len(),
        out.display()
    );
    for band in &set.shortfall {
        eprintln!("warning: band {} fell short of {per_band}", band.name());
    }
    Ok(())
}

fn load_tiles(dir: &Path, count: usize, size_hint: Option<usize>) -> Result<Vec<GlyphImage>> {
    let mut files: Vec<(u32, PathBuf)> = Vec::new();
    for entry in
        std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png") | Some("pgm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Ok(cp) = parse_codepoint(stem) {
                files.push((cp, path));
            }
        }
    }
    files.sort_by_key(|(cp, _)| *cp);
    if files.len() < count {
        return Err(Error::Data(format!(
            "{}: {} glyphs available, {count} requested",
            dir.display(),
            files.len()
        )));
    }
    files.truncate(count);
    let mut out = Vec::with_capacity(count);
    for (_, path) in files {
        let img = pegan::data::load_image(&path)?;
        let img = match size_hint {
            Some(size) => pegan::data::normalize_glyph(&img, size),
            None => img,
        };
        out.push(img);
    }
    Ok(out)
}

fn cmd_turing_sheet(
    real_dir: &Path,
    generated_dir: &Path,
    out_sheet: &Path,
    out_key: &Path,
    count: usize,
    seed: u64,
) -> Result<()> {
    let real = load_tiles(real_dir, count, None)?;
    let size = real[0].width.max(real[0].height);
    let real = real
        .iter()
        .map(|g| pegan::data::normalize_glyph(g, size))
        .collect::<Vec<_>>();
    let generated = load_tiles(generated_dir, count, Some(size))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sheet, key) = turing_sheet(&real, &generated, &mut rng)?;
    save_image(&sheet, out_sheet)?;
    write_answer_key(out_key, &key)?;
    println!(
        "sheet with {} tiles written to {}; answer key to {}",
        key.len(),
        out_sheet.display(),
        out_key.display()
    );
    Ok(())
}

fn cmd_gradcheck(corrupt: bool) -> Result<()> {
    let start = std::time::Instant::now();
    let results = gradcheck::run_all(corrupt)?;
    let name_width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut all_passed = true;
    println!("{:name_width$}  {:>12}  {:>9}  status", "check", "max rel err", "tolerance");
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        all_passed &= r.passed();
        println!(
            "{:name_width$}  {:>12.3e}  {:>9.0e}  {status}",
            r.name, r.max_rel_err, r.tolerance
        );
    }
    println!(
        "{} checks in {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !all_passed {
        return Err(Error::Numeric(
            "finite-difference suite found gradient mismatches".into(),
        ));
    }
    Ok(())
}
