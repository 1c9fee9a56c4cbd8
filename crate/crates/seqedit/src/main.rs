//! Pipeline CLI: curate pairs, generate synthetic corpora, pretrain the
//! aligned encoders, train the editor, edit sequences, and run evaluations.
//! Exit codes: 0 success, 1 runtime failure, 2 usage/input error.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqedit::align;
use seqedit::bundle::ModelBundle;
use seqedit::config::RunConfig;
use seqedit::corpus::{self, Pair};
use seqedit::editor::{self, AntibodySettings, EditRequest, Sampling};
use seqedit::error::{Error, Result};
use seqedit::evaluate;
use seqedit::synth;
use seqedit::tokenize::Vocabulary;
use seqedit::util::derive_seed;

#[derive(Parser)]
#[command(
    name = "seqedit",
    version,
    about = "Text-conditioned protein sequence editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an annotation dump, filter it, and emit an aligned pair file.
    Curate(CurateArgs),
    /// Generate a synthetic composition-description corpus.
    SynthData(SynthArgs),
    /// Contrastive pretraining of the protein/text encoders.
    Pretrain(ConfigArgs),
    /// Train the FiLM-conditioned editing decoder on frozen encoders.
    TrainEditor(TrainEditorArgs),
    /// Rewrite sequences under a natural-language instruction.
    Edit(EditArgs),
    /// Run an evaluation task and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Export pooled protein embeddings (and optionally a 2-D PCA).
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct CurateArgs {
    /// Annotation dump (8-column TSV).
    dump: PathBuf,
    /// Output pair file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_coverage: Option<f64>,
    #[arg(long)]
    max_evidence: Option<u8>,
    /// Also write a coverage/evidence statistics report here.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Disable the quality filter (keep every templatable record).
    #[arg(long)]
    no_filter: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus flavor: truthful composition pairs or editing pairs.
    #[arg(long, value_enum, default_value_t = SynthKind::Composition)]
    kind: SynthKind,
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Composition,
    Editing,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainEditorArgs {
    #[arg(long)]
    config: PathBuf,
    /// Alignment checkpoint to start from (defaults to run_dir/align.ckpt).
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    /// A sequence literal, or a path to a file of sequences (`id<TAB>seq` or
    /// one bare sequence per line).
    #[arg(long)]
    seq: String,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Greedy decoding (the default when no temperature/top-k is given).
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generated length cap (defaults to original length plus slack).
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    /// classify: per-protein label scores (id, then one column per label).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// classify: true labels (id, comma-separated label indices).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// stability/antibody inputs.
    #[arg(long)]
    originals: Option<PathBuf>,
    #[arg(long)]
    editeds: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    instruction: Option<String>,
    /// stability: labeled (sequence, score) TSV used to train the oracle.
    #[arg(long)]
    stability_labels: Option<PathBuf>,
    /// antibody: input sequences.
    #[arg(long)]
    input: Option<PathBuf>,
    /// antibody: region as `start:end` (half-open, 0-based).
    #[arg(long)]
    region: Option<String>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 0.15)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Classify,
    Stability,
    Antibody,
}

#[derive(Args)]
struct ExportArgs {
    /// Sequence file (`id<TAB>seq` or one bare sequence per line).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write centered 2-D PCA coordinates here.
    #[arg(long)]
    pca: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Curate(args) => curate(args),
        Command::SynthData(args) => synth_data(args),
        Command::Pretrain(args) => pretrain(args),
        Command::TrainEditor(args) => train_editor(args),
        Command::Edit(args) => edit(args),
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::ExportEmbeddings(args) => export_embeddings(args),
    }
}

fn open_input(path: &Path) -> Result<BufReader<std::fs::File>> {
    Ok(BufReader::new(std::fs::File::open(path)?))
}

fn curate(args: CurateArgs) -> Result<()> {
    let (mut min_coverage, mut max_evidence) = (
        args.min_coverage.unwrap_or(0.4),
        args.max_evidence.unwrap_or(3),
    );
    if args.no_filter {
        min_coverage = 0.0;
        max_evidence = 5;
    }
    if !(0.0..=1.0).contains(&min_coverage) {
        return Err(Error::InvalidArgument(format!(
            "--min-coverage {min_coverage} outside [0, 1]"
        )));
    }
    if !(1..=5).contains(&max_evidence) {
        return Err(Error::InvalidArgument(format!(
            "--max-evidence {max_evidence} outside 1..=5"
        )));
    }
    let reader = open_input(&args.dump)?;
    let mut out = std::fs::File::create(&args.out)?;
    let report = corpus::curate_stream(
        reader,
        &mut out,
        min_coverage,
        max_evidence,
        args.stats.is_some(),
    )?;
    for issue in &report.malformed {
        eprintln!("skipped {issue}");
    }
    if let (Some(stats_path), Some(stats)) = (&args.stats, &report.stats) {
        std::fs::write(stats_path, stats.to_report())?;
    }
    println!(
        "parsed = {}  kept = {}  removed = {}  malformed = {}",
        report.parsed,
        report.filter.kept,
        report.filter.removed,
        report.malformed.len()
    );
    Ok(())
}

fn synth_data(args: SynthArgs) -> Result<()> {
    let pairs = match args.kind {
        SynthKind::Composition => synth::generate_composition_corpus(args.n, args.seed),
        SynthKind::Editing => synth::generate_editing_corpus(args.n, args.seed),
    };
    let mut out = std::fs::File::create(&args.out)?;
    corpus::write_pairs(&mut out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

/// Deterministic holdout split driven by the run seed.
fn split_pairs(pairs: Vec<Pair>, fraction: f64, seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, "holdout"));
    indices.shuffle(&mut rng);
    let eval_count = ((pairs.len() as f64) * fraction).round() as usize;
    let eval_set: std::collections::HashSet<usize> = indices.into_iter().take(eval_count).collect();
    let mut train = Vec::with_capacity(pairs.len() - eval_count);
    let mut eval = Vec::with_capacity(eval_count);
    for (i, pair) in pairs.into_iter().enumerate() {
        if eval_set.contains(&i) {
            eval.push(pair);
        } else {
            train.push(pair);
        }
    }
    (train, eval)
}

fn pretrain(args: ConfigArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    std::fs::create_dir_all(&cfg.run_dir)?;
    cfg.save(cfg.run_dir.join("pretrain.config.cfg"))?;

    let pairs = corpus::read_pairs(open_input(&cfg.pairs)?)?;
    let (train, eval) = match &cfg.eval_pairs {
        Some(path) => (pairs, corpus::read_pairs(open_input(path)?)?),
        None => split_pairs(pairs, cfg.holdout_fraction, cfg.seed),
    };
    let output = align::pretrain(&train, &eval, &cfg.pretrain_settings())?;

    let mut log = std::fs::File::create(cfg.run_dir.join("pretrain.log"))?;
    for stats in &output.epochs {
        writeln!(log, "{stats}")?;
        println!("{stats}");
    }
    output.vocab.save(cfg.run_dir.join("vocab.txt"))?;
    output.bundle.save(cfg.run_dir.join("align.ckpt"))?;
    println!(
        "saved checkpoint {} (train pairs = {}, eval pairs = {})",
        cfg.run_dir.join("align.ckpt").display(),
        train.len(),
        eval.len()
    );
    Ok(())
}

fn train_editor(args: TrainEditorArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    std::fs::create_dir_all(&cfg.run_dir)?;
    cfg.save(cfg.run_dir.join("editor.config.cfg"))?;

    let pairs = corpus::read_pairs(open_input(&cfg.pairs)?)?;
    let (mut bundle, vocab) = if cfg.use_pretraining {
        let ckpt = args
            .from
            .or_else(|| cfg.align_checkpoint.clone())
            .unwrap_or_else(|| cfg.run_dir.join("align.ckpt"));
        let vocab_path = cfg
            .vocab
            .clone()
            .unwrap_or_else(|| cfg.run_dir.join("vocab.txt"));
        (
            ModelBundle::<f32>::load(ckpt)?,
            Vocabulary::load(vocab_path)?,
        )
    } else {
        // Ablation arm: random frozen encoders instead of pretrained ones.
        let vocab = Vocabulary::build(
            pairs.iter().map(|p| p.biotext.as_str()),
            cfg.text_vocab_size.saturating_sub(4),
        );
        let mut text_cfg = cfg.text_encoder_config();
        text_cfg.vocab_size = vocab.len();
        let bundle = ModelBundle::<f32>::align_stage(
            cfg.protein_encoder_config(),
            text_cfg,
            derive_seed(cfg.seed, "random-encoders"),
        )?;
        vocab.save(cfg.run_dir.join("vocab.txt"))?;
        (bundle, vocab)
    };

    let before = bundle.encoder_checksums();
    let stats = editor::train_editor(&mut bundle, &vocab, &pairs, &cfg.editor_settings())?;
    let after = bundle.encoder_checksums();

    let mut log = std::fs::File::create(cfg.run_dir.join("editor.log"))?;
    for s in &stats {
        writeln!(log, "{s}")?;
        println!("{s}");
    }
    writeln!(
        log,
        "encoders_frozen = {}",
        if before == after { "true" } else { "false" }
    )?;
    bundle.save(cfg.run_dir.join("editor.ckpt"))?;
    println!(
        "saved checkpoint {} (encoders frozen: {})",
        cfg.run_dir.join("editor.ckpt").display(),
        before == after
    );
    Ok(())
}

/// Read sequences as (id, sequence) rows; `id<TAB>seq` or bare sequences.
fn read_sequences(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, seq)) => out.push((id.to_string(), seq.to_string())),
            None => out.push((format!("seq{}", i + 1), line.to_string())),
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no sequences in {}",
            path.display()
        )));
    }
    Ok(out)
}

fn edit(args: EditArgs) -> Result<()> {
    let sampling = match (args.greedy, args.temperature, args.top_k) {
        (_, None, None) => Sampling::Greedy,
        (false, Some(t), None) => Sampling::Temperature(t),
        (false, t, Some(k)) => Sampling::TopK {
            k,
            temperature: t.unwrap_or(1.0),
        },
        (true, _, _) => {
            return Err(Error::InvalidArgument(
                "--greedy conflicts with --temperature/--top-k".into(),
            ))
        }
    };
    let inputs: Vec<(String, String)> = if Path::new(&args.seq).is_file() {
        read_sequences(Path::new(&args.seq))?
    } else {
        vec![("seq1".to_string(), args.seq.clone())]
    };
    let bundle = ModelBundle::<f32>::load(&args.bundle)?;
    let vocab = Vocabulary::load(&args.vocab)?;

    let mut out = std::fs::File::create(&args.out)?;
    let mut sim_deltas = Vec::new();
    let mut distances = Vec::new();
    for (id, sequence) in &inputs {
        let req = EditRequest {
            sequence: sequence.clone(),
            instruction: args.instruction.clone(),
            sampling,
            max_len: args
                .max_len
                .unwrap_or(sequence.chars().count() + editor::GENERATION_SLACK),
            num_samples: args.samples,
            seed: args.seed,
        };
        let result = editor::generate(&req, &bundle, &vocab)?;
        for cand in &result.candidates {
            writeln!(
                out,
                "{id}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                cand.sequence, cand.log_prob, cand.sim_original, cand.sim_edited,
                cand.edit_distance
            )?;
            if cand.empty {
                eprintln!("warning: empty generation for {id}");
            }
            sim_deltas.push(cand.sim_edited - cand.sim_original);
            distances.push(cand.edit_distance);
        }
    }
    let mean_delta = sim_deltas.iter().sum::<f64>() / sim_deltas.len() as f64;
    distances.sort_unstable();
    let median = distances[distances.len() / 2];
    println!("mean_sim_delta = {mean_delta:.6}");
    println!("median_edit_distance = {median}");
    Ok(())
}

fn required<T>(value: Option<T>, flag: &str, task: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required for --task {task}")))
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    match args.task {
        Task::Classify => {
            let scores_path = required(args.scores.clone(), "scores", "classify")?;
            let labels_path = required(args.labels.clone(), "labels", "classify")?;
            classify(&scores_path, &labels_path, &args.out)
        }
        Task::Stability => {
            let originals = required(args.originals.clone(), "originals", "stability")?;
            let editeds = required(args.editeds.clone(), "editeds", "stability")?;
            let bundle_path = required(args.bundle.clone(), "bundle", "stability")?;
            let vocab_path = required(args.vocab.clone(), "vocab", "stability")?;
            let instruction = required(args.instruction.clone(), "instruction", "stability")?;
            stability(
                &originals,
                &editeds,
                &bundle_path,
                &vocab_path,
                &instruction,
                args.stability_labels.as_deref(),
                &args.out,
            )
        }
        Task::Antibody => {
            let input = required(args.input.clone(), "input", "antibody")?;
            let region = required(args.region.clone(), "region", "antibody")?;
            let bundle_path = required(args.bundle.clone(), "bundle", "antibody")?;
            let vocab_path = required(args.vocab.clone(), "vocab", "antibody")?;
            let instruction = required(args.instruction.clone(), "instruction", "antibody")?;
            antibody(
                &input,
                &region,
                &bundle_path,
                &vocab_path,
                &instruction,
                &args,
            )
        }
    }
}

fn classify(scores_path: &Path, labels_path: &Path, out: &Path) -> Result<()> {
    // Scores: id, then one float column per label.
    let mut ids = Vec::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for (i, line) in std::fs::read_to_string(scores_path)?.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default().to_string();
        let row: Vec<f64> = cols
            .map(|c| {
                c.parse::<f64>().map_err(|_| Error::MalformedRecord {
                    line: i as u64 + 1,
                    msg: format!("bad score {c:?}"),
                })
            })
            .collect::<Result<_>>()?;
        ids.push(id);
        scores.push(row);
    }
    // Labels: id, comma-separated true label indices.
    let mut truth_map = std::collections::HashMap::new();
    for (i, line) in std::fs::read_to_string(labels_path)?.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or(Error::MalformedRecord {
            line: i as u64 + 1,
            msg: "label line needs id<TAB>labels".into(),
        })?;
        let labels: Vec<usize> = rest
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::MalformedRecord {
                        line: i as u64 + 1,
                        msg: format!("bad label index {s:?}"),
                    })
            })
            .collect::<Result<_>>()?;
        truth_map.insert(id.to_string(), labels);
    }
    let truths: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| {
            truth_map
                .get(id)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no labels for protein {id}")))
        })
        .collect::<Result<_>>()?;

    // Micro AUPR over all (protein, label) cells; protein-centric Fmax.
    let mut flat_scores = Vec::new();
    let mut flat_labels = Vec::new();
    for (row, truth) in scores.iter().zip(&truths) {
        for (label, &s) in row.iter().enumerate() {
            flat_scores.push(s);
            flat_labels.push(truth.contains(&label));
        }
    }
    let aupr = evaluate::aupr(&flat_scores, &flat_labels)?;
    let fmax = evaluate::f_max(&scores, &truths, &evaluate::fmax_default_grid())?;
    let report = evaluate::format_report(&[
        ("aupr", aupr),
        ("fmax", fmax),
        ("proteins", ids.len() as f64),
    ]);
    std::fs::write(out, &report)?;
    print!("{report}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn stability(
    originals_path: &Path,
    editeds_path: &Path,
    bundle_path: &Path,
    vocab_path: &Path,
    instruction: &str,
    stability_labels: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let originals: Vec<String> = read_sequences(originals_path)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let editeds: Vec<String> = read_sequences(editeds_path)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let bundle = ModelBundle::<f32>::load(bundle_path)?;
    let vocab = Vocabulary::load(vocab_path)?;

    let sim_report = evaluate::improvement_rate(&originals, &editeds, |seq| {
        evaluate::stability_similarity(seq, instruction, &bundle, &vocab)
    })?;
    let mut entries: Vec<(String, f64)> = vec![
        ("improvement_rate.similarity".into(), sim_report.rate),
        ("mean_similarity.original".into(), sim_report.mean_original),
        ("mean_similarity.edited".into(), sim_report.mean_edited),
    ];

    if let Some(labels_path) = stability_labels {
        let labeled: Vec<(String, f64)> = std::fs::read_to_string(labels_path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let (seq, score) = line.split_once('\t').ok_or(Error::MalformedRecord {
                    line: i as u64 + 1,
                    msg: "stability label line needs seq<TAB>score".into(),
                })?;
                let score: f64 = score.trim().parse().map_err(|_| Error::MalformedRecord {
                    line: i as u64 + 1,
                    msg: format!("bad stability score {score:?}"),
                })?;
                Ok((seq.to_string(), score))
            })
            .collect::<Result<_>>()?;
        let (oracle, curve) =
            evaluate::train_oracle(&labeled, &bundle, &evaluate::OracleConfig::default())?;
        let oracle_report = evaluate::improvement_rate(&originals, &editeds, |seq| {
            evaluate::oracle_score(seq, &oracle, &bundle)
        })?;
        // Raw oracle scores plus a min-max normalized view over this run.
        let mut all_scores = Vec::new();
        for seq in originals.iter().chain(&editeds) {
            all_scores.push(evaluate::oracle_score(seq, &oracle, &bundle)?);
        }
        let lo = all_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        entries.push(("improvement_rate.oracle".into(), oracle_report.rate));
        entries.push(("mean_oracle.original".into(), oracle_report.mean_original));
        entries.push(("mean_oracle.edited".into(), oracle_report.mean_edited));
        entries.push((
            "mean_oracle_normalized.original".into(),
            norm(oracle_report.mean_original),
        ));
        entries.push((
            "mean_oracle_normalized.edited".into(),
            norm(oracle_report.mean_edited),
        ));
        entries.push(("oracle_final_mse".into(), *curve.last().unwrap()));
    }

    let refs: Vec<(&str, f64)> = entries.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let report = evaluate::format_report(&refs);
    std::fs::write(out, &report)?;
    print!("{report}");
    Ok(())
}

fn antibody(
    input: &Path,
    region: &str,
    bundle_path: &Path,
    vocab_path: &Path,
    instruction: &str,
    args: &EvaluateArgs,
) -> Result<()> {
    let (start, end) = region
        .split_once(':')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| {
            Error::InvalidArgument(format!("--region must be start:end, got {region:?}"))
        })?;
    let inputs = read_sequences(input)?;
    let bundle = ModelBundle::<f32>::load(bundle_path)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let settings = AntibodySettings {
        n_samples: args.samples,
        top_k: args.top_k,
        perturb_rate: args.rate,
        sampling_temperature: 1.0,
        seed: args.seed,
    };
    let mut out = std::fs::File::create(&args.out)?;
    for (id, seq) in &inputs {
        let outcome =
            editor::optimize_antibody(seq, start, end, instruction, &bundle, &vocab, &settings)?;
        for (rank, cand) in outcome.candidates.iter().enumerate() {
            writeln!(
                out,
                "{id}\t{}\t{}\t{:.6}",
                rank + 1,
                cand.sequence,
                cand.naturalness
            )?;
        }
    }
    println!(
        "wrote top-{} candidates for {} inputs to {}",
        args.top_k,
        inputs.len(),
        args.out.display()
    );
    Ok(())
}

fn export_embeddings(args: ExportArgs) -> Result<()> {
    let items = read_sequences(&args.input)?;
    let bundle = ModelBundle::<f32>::load(&args.bundle)?;
    let mut out = std::fs::File::create(&args.out)?;
    let rows = evaluate::export_embeddings(&items, &bundle, &mut out)?;
    if let Some(pca_path) = &args.pca {
        let pca = evaluate::pca_2d(&rows)?;
        if pca.degenerate {
            eprintln!("warning: rank-deficient embeddings; second component zeroed");
        }
        let mut f = std::fs::File::create(pca_path)?;
        for ((id, _), coord) in items.iter().zip(&pca.coords) {
            writeln!(f, "{id}\t{:.6e}\t{:.6e}", coord[0], coord[1])?;
        }
    }
    println!("exported {} embeddings", items.len());
    Ok(())
}
