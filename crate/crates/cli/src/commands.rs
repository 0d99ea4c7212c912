//! The five CLI commands: train, generate, eval, sweep, and params.
//!
//! Every report starts with the resolved configuration (canonical form,
//! `# `-prefixed for CSV) plus its hash, so any run can be reproduced
//! from its own output. No timestamps are written anywhere: identical
//! invocations produce byte-identical artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use paraformer_core::{
    checkpoint::{load_checkpoint, load_vocab, save_checkpoint, save_vocab},
    count_paper_params,
    data::{
        encode_context, load_corpus, load_word_vectors, parse_corpus, window_context,
        DialogueExample, Vocab, MAX_CONTEXT_TURNS,
    },
    decode::{generate, read_generations, write_generations, GenerationRecord},
    diversity_report, fit_with_state,
    metrics::{CoherenceScorer, LexicalOverlapScorer},
    AdamState, CoreError, EmbeddingInit, Model, Result, SeedStream,
};

use crate::config::{ExperimentConfig, ReportFormat};

const TOY_CORPUS: &str = include_str!("../assets/toy_corpus.jsonl");

// ── shared plumbing ─────────────────────────────────────────────────────

fn load_examples(corpus: &Option<PathBuf>) -> Result<Vec<DialogueExample>> {
    match corpus {
        Some(path) => load_corpus(path),
        None => parse_corpus(BufReader::new(TOY_CORPUS.as_bytes())),
    }
}

/// Deterministic split: shuffle indices from the seed's "split" stream,
/// reserve at least one example for evaluation.
fn split_examples(
    examples: Vec<DialogueExample>,
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<DialogueExample>, Vec<DialogueExample>)> {
    if examples.len() < 2 {
        return Err(CoreError::Data(format!(
            "need at least 2 examples to split off an evaluation set, got {}",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut SeedStream::new(seed).child("split").rng());
    let eval_count = ((examples.len() as f64 * eval_fraction).round() as usize)
        .clamp(1, examples.len() - 1);
    let mut slots: Vec<Option<DialogueExample>> = examples.into_iter().map(Some).collect();
    let eval: Vec<DialogueExample> =
        order[..eval_count].iter().map(|&i| slots[i].take().expect("unique index")).collect();
    let train: Vec<DialogueExample> =
        order[eval_count..].iter().map(|&i| slots[i].take().expect("unique index")).collect();
    Ok((train, eval))
}

struct TrainedRun {
    model: Model,
    adam: AdamState,
    vocab: Vocab,
    eval_set: Vec<DialogueExample>,
    final_eval_loss: f64,
    vector_coverage: Option<f64>,
}

/// The training pipeline shared by `train` and each sweep cell:
/// corpus -> vocab -> split -> build -> fit.
fn train_pipeline(cfg: &ExperimentConfig, log: Option<&mut Vec<u8>>) -> Result<TrainedRun> {
    cfg.validate()?;
    let examples = load_examples(&cfg.corpus)?;
    let vocab = Vocab::build(&examples, cfg.min_count)?;
    let (train_set, eval_set) = split_examples(examples, cfg.eval_fraction, cfg.seed)?;

    let model_cfg = cfg.model_config(vocab.size());
    let plan = cfg.layer_plan()?;
    let spec = cfg.init_spec()?;

    let mut vector_coverage = None;
    let embedding_init = match &cfg.vectors {
        Some(path) => {
            let stream = SeedStream::new(cfg.seed).child("word-vectors");
            let (table, coverage) = load_word_vectors(path, &vocab, cfg.dims.n, &stream)?;
            vector_coverage = Some(coverage);
            EmbeddingInit::Pretrained { table, trainable: !cfg.freeze_embedding }
        }
        None => EmbeddingInit::Random,
    };
    let model = Model::build_with_embedding(&model_cfg, &plan, &spec, cfg.seed, embedding_init)?;

    let mut adam = AdamState::new(model.trainable_params());
    let stats =
        fit_with_state(&model, &mut adam, &cfg.train, &train_set, &eval_set, &vocab, 1, log)?;
    let final_eval_loss = stats.last().map(|s| s.eval_loss).unwrap_or(f64::NAN);
    Ok(TrainedRun { model, adam, vocab, eval_set, final_eval_loss, vector_coverage })
}

fn comment_block(cfg: &ExperimentConfig, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    for line in cfg.canonical().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(&format!("# config_hash = {}\n", cfg.config_hash()));
    for (k, v) in extra {
        s.push_str(&format!("# {k} = {v}\n"));
    }
    s
}

fn out_writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

// ── train ───────────────────────────────────────────────────────────────

pub fn cmd_train(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let base = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let csv_path = base.with_extension("train.csv");
    let ckpt_path = base.with_extension("ckpt");
    let vocab_path = base.with_extension("vocab");

    let mut log = BufWriter::new(File::create(&csv_path)?);
    // The header comments are completed after training (coverage, sizes),
    // so stage the CSV body in memory first.
    let mut body: Vec<u8> = Vec::new();
    let run = train_pipeline(cfg, Some(&mut body))?;

    let mut extra = vec![
        ("vocab_size", run.vocab.size().to_string()),
        ("eval_examples", run.eval_set.len().to_string()),
    ];
    if let Some(c) = run.vector_coverage {
        extra.push(("word_vector_coverage", c.to_string()));
    }
    log.write_all(comment_block(cfg, &extra).as_bytes())?;
    log.write_all(&body)?;
    log.flush()?;

    save_checkpoint(&ckpt_path, &run.model, Some((&run.adam, cfg.train.epochs as u64)))?;
    save_vocab(&vocab_path, &run.vocab)?;

    println!(
        "trained {} epochs (plan={}, init={}), final eval loss {:.6}",
        cfg.train.epochs, cfg.plan, cfg.init_kind, run.final_eval_loss
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("vocabulary: {}", vocab_path.display());
    println!("epoch log:  {}", csv_path.display());
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────────

pub fn cmd_generate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let loaded = load_checkpoint(checkpoint)?;
    let vocab = load_vocab(&checkpoint.with_extension("vocab"))?;
    if vocab.size() != loaded.model.config.vocab_size {
        return Err(CoreError::Checkpoint(format!(
            "vocabulary sidecar has {} tokens but the checkpoint was trained with {}",
            vocab.size(),
            loaded.model.config.vocab_size
        )));
    }
    let decode_cfg = cfg.decode_config()?;
    let examples = load_examples(&cfg.corpus)?;

    let mut records = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let ctx_ids = encode_context(ex, &vocab, loaded.model.config.max_len);
        let stream = SeedStream::new(decode_cfg.seed).child("generate").child_idx(i as u64);
        let ids = generate(&loaded.model, &ctx_ids, &decode_cfg, &stream)?;
        let windowed = window_context(ex, MAX_CONTEXT_TURNS);
        let context: Vec<String> = windowed.context.iter().map(|turn| turn.join(" ")).collect();
        records.push(GenerationRecord {
            context: context.join(" <sep> "),
            response: vocab.decode(&ids).join(" "),
            strategy: decode_cfg.strategy.to_string(),
            seed: decode_cfg.seed,
        });
    }
    let out_path = out.or_else(|| cfg.out.clone());
    let mut w = out_writer(out_path.as_deref())?;
    write_generations(&mut w, &records)?;
    w.flush()?;
    if let Some(p) = out_path {
        eprintln!("wrote {} generations to {}", records.len(), p.display());
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

struct EvalRow {
    file: String,
    strategy: String,
    responses: usize,
    distinct: [f64; 3],
    coherence: f64,
}

fn eval_file(path: &Path, scorer: &dyn CoherenceScorer) -> Result<EvalRow> {
    let records = read_generations(BufReader::new(File::open(path).map_err(|e| {
        CoreError::Data(format!("cannot open generations {}: {e}", path.display()))
    })?))?;
    if records.is_empty() {
        return Err(CoreError::Data(format!("{} has no generation records", path.display())));
    }
    let responses: Vec<Vec<String>> = records
        .iter()
        .map(|r| r.response.split_whitespace().map(str::to_string).collect())
        .collect();
    let report = diversity_report(&responses)?;
    let mut coherence_sum = 0.0;
    for (rec, resp) in records.iter().zip(&responses) {
        let ctx: Vec<String> = rec.context.split_whitespace().map(str::to_string).collect();
        coherence_sum += scorer.score(&ctx, resp)?;
    }
    let mut strategies: Vec<&str> = records.iter().map(|r| r.strategy.as_str()).collect();
    strategies.dedup();
    let strategy =
        if strategies.len() == 1 { strategies[0].to_string() } else { "mixed".to_string() };
    Ok(EvalRow {
        file: path.display().to_string(),
        strategy,
        responses: records.len(),
        distinct: [report.distinct_1, report.distinct_2, report.distinct_3],
        coherence: coherence_sum / records.len() as f64,
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig, files: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    if files.is_empty() {
        return Err(CoreError::InvalidConfig("eval needs at least one generations file".into()));
    }
    let scorer = LexicalOverlapScorer;
    let mut sorted: Vec<&PathBuf> = files.iter().collect();
    sorted.sort_by_key(|p| p.display().to_string());

    let mut rows = Vec::new();
    for path in sorted {
        rows.push(eval_file(path, &scorer)?);
    }

    let coherence_col = format!("coherence_{}", scorer.name());
    let out_path = out.or_else(|| cfg.out.clone());
    let mut w = out_writer(out_path.as_deref())?;
    match cfg.format {
        ReportFormat::Csv => {
            w.write_all(comment_block(cfg, &[("scorer", scorer.name().to_string())]).as_bytes())?;
            writeln!(w, "file,strategy,responses,distinct_1,distinct_2,distinct_3,{coherence_col}")?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    r.file, r.strategy, r.responses, r.distinct[0], r.distinct[1], r.distinct[2],
                    r.coherence
                )?;
            }
        }
        ReportFormat::Markdown => {
            writeln!(w, "| file | strategy | responses | distinct-1 | distinct-2 | distinct-3 | {coherence_col} |")?;
            writeln!(w, "|---|---|---|---|---|---|---|")?;
            for r in rows {
                writeln!(
                    w,
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    r.file, r.strategy, r.responses, r.distinct[0], r.distinct[1], r.distinct[2],
                    r.coherence
                )?;
            }
            writeln!(w)?;
            writeln!(w, "```")?;
            write!(w, "{}", comment_block(cfg, &[("scorer", scorer.name().to_string())]))?;
            writeln!(w, "```")?;
        }
    }
    w.flush()?;
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Sigma,
    Gamma,
    Plan,
    Decode,
}

fn sweep_cells(kind: SweepKind, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut cells = Vec::new();
    match kind {
        SweepKind::Sigma => {
            for &sa in &[0.01, 0.05, 0.5] {
                for &ff in &[0.01, 0.05, 0.5] {
                    let mut c = base.clone();
                    c.init_kind = "standard".into();
                    c.sigma_sa = sa;
                    c.sigma_ff = ff;
                    // No commas in labels: they are CSV `setting` fields.
                    cells.push((format!("sigma_sa={sa} sigma_ff={ff}"), c));
                }
            }
        }
        SweepKind::Gamma => {
            for &sa in &[1.5, 2.5, 3.5] {
                for &ff in &[1.0, 1.5, 2.0] {
                    let mut c = base.clone();
                    c.init_kind = "kaiming".into();
                    c.gain_sa = sa;
                    c.gain_ff = ff;
                    cells.push((format!("gain_sa={sa} gain_ff={ff}"), c));
                }
            }
        }
        SweepKind::Plan => {
            for plan in ["alt", "full", "seq1", "seq2"] {
                let mut c = base.clone();
                c.plan = plan.into();
                cells.push((plan.to_string(), c));
            }
        }
        SweepKind::Decode => {
            let rows: Vec<(&str, f64)> = vec![
                ("greedy", 1.0),
                ("temperature", 0.5),
                ("temperature", 1.0),
                ("topk", 1.0),
                ("topp", 1.0),
                ("beam", 1.0),
            ];
            for (strategy, t) in rows {
                let mut c = base.clone();
                c.decode_strategy = strategy.into();
                c.temperature = t;
                let label = c
                    .decode_config()
                    .map(|d| d.strategy.to_string())
                    .unwrap_or_else(|_| strategy.to_string());
                cells.push((label.replace(',', ";"), c));
            }
        }
    }
    cells
}

struct SweepRow {
    label: String,
    hash: String,
    outcome: Result<(usize, [f64; 4])>,
}

/// Train the cell's model from scratch, then decode the evaluation
/// contexts with `decode_seeds` seeds and average the metrics.
fn run_cell(cfg: &ExperimentConfig) -> Result<(usize, [f64; 4])> {
    let run = train_pipeline(cfg, None)?;
    let decode_cfg = cfg.decode_config()?;
    let scorer = LexicalOverlapScorer;

    let mut sums = [0.0f64; 4];
    let mut response_count = 0usize;
    for s in 0..cfg.decode_seeds {
        let seed_stream = SeedStream::new(cfg.seed).child("decode-seed").child_idx(s as u64);
        let mut responses = Vec::new();
        let mut coherence_sum = 0.0;
        for (i, ex) in run.eval_set.iter().enumerate() {
            let ctx_ids = encode_context(ex, &run.vocab, run.model.config.max_len);
            let ids = generate(
                &run.model,
                &ctx_ids,
                &decode_cfg,
                &seed_stream.child("generate").child_idx(i as u64),
            )?;
            let response = run.vocab.decode(&ids);
            let windowed = window_context(ex, MAX_CONTEXT_TURNS);
            let ctx_tokens: Vec<String> = windowed.context.into_iter().flatten().collect();
            coherence_sum += scorer.score(&ctx_tokens, &response)?;
            responses.push(response);
        }
        let report = diversity_report(&responses)?;
        sums[0] += report.distinct_1;
        sums[1] += report.distinct_2;
        sums[2] += report.distinct_3;
        sums[3] += coherence_sum / responses.len() as f64;
        response_count = responses.len();
    }
    let n = cfg.decode_seeds as f64;
    Ok((response_count, [sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n]))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, kind: SweepKind, out: Option<PathBuf>) -> Result<()> {
    let cells = sweep_cells(kind, cfg);
    let mut rows = Vec::with_capacity(cells.len());
    for (label, cell_cfg) in &cells {
        // A failing cell becomes an error row; the sweep keeps going.
        let outcome = run_cell(cell_cfg);
        rows.push(SweepRow { label: label.clone(), hash: cell_cfg.config_hash(), outcome });
    }

    let scorer_name = LexicalOverlapScorer.name();
    let out_path = out.or_else(|| cfg.out.clone());
    let mut w = out_writer(out_path.as_deref())?;
    let header_extra = [("sweep_rows", rows.len().to_string())];
    match cfg.format {
        ReportFormat::Csv => {
            w.write_all(comment_block(cfg, &header_extra).as_bytes())?;
            writeln!(
                w,
                "setting,config_hash,responses,distinct_1,distinct_2,distinct_3,coherence_{scorer_name},status"
            )?;
            for row in rows {
                match row.outcome {
                    Ok((n, m)) => writeln!(
                        w,
                        "{},{},{},{},{},{},{},ok",
                        row.label, row.hash, n, m[0], m[1], m[2], m[3]
                    )?,
                    Err(e) => writeln!(
                        w,
                        "{},{},0,,,,,error: {}",
                        row.label,
                        row.hash,
                        e.to_string().replace(',', ";")
                    )?,
                }
            }
        }
        ReportFormat::Markdown => {
            writeln!(
                w,
                "| setting | config hash | responses | distinct-1 | distinct-2 | distinct-3 | coherence_{scorer_name} | status |"
            )?;
            writeln!(w, "|---|---|---|---|---|---|---|---|")?;
            for row in rows {
                match row.outcome {
                    Ok((n, m)) => writeln!(
                        w,
                        "| {} | {} | {} | {} | {} | {} | {} | ok |",
                        row.label, row.hash, n, m[0], m[1], m[2], m[3]
                    )?,
                    Err(e) => writeln!(
                        w,
                        "| {} | {} | 0 | | | | | error: {} |",
                        row.label,
                        row.hash,
                        e.to_string().replace('|', "/")
                    )?,
                }
            }
            writeln!(w)?;
            writeln!(w, "```")?;
            write!(w, "{}", comment_block(cfg, &header_extra))?;
            writeln!(w, "```")?;
        }
    }
    w.flush()?;
    Ok(())
}

// ── params ──────────────────────────────────────────────────────────────

fn with_commas(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn cmd_params(
    n: u64,
    d_qkv: u64,
    d_ff: u64,
    d_r: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    if n == 0 || d_qkv == 0 || d_ff == 0 || d_r == 0 {
        return Err(CoreError::InvalidConfig("all dimensions must be positive".into()));
    }
    let c = count_paper_params(n, d_qkv, d_ff, d_r);

    // As-built counts from the parameter registries' closed forms: a
    // single-head randomized attention block and one randomized
    // feed-forward block (these equal the formulas), plus the gain+bias
    // pairs actually allocated for a layer's two norms.
    let attn_built = 3 * n * d_qkv + d_qkv * n;
    let ff_built = (n * d_ff + d_ff) + (d_ff * n + n);
    let norm_built = 2 * (2 * n);

    let mut w = out_writer(out.as_deref())?;
    writeln!(w, "parameter accounting at n={n}, d_qkv={d_qkv}, d_ff={d_ff}, d_r={d_r}")?;
    writeln!(w)?;
    writeln!(w, "{:<28} {:>14} {:>14}  {}", "component", "formula", "as-built", "notes")?;
    writeln!(
        w,
        "{:<28} {:>14} {:>14}  {}",
        "attention (randomized)",
        with_commas(c.attn),
        with_commas(attn_built),
        "single-head: 3 frozen projections + trainable output mix"
    )?;
    writeln!(
        w,
        "{:<28} {:>14} {:>14}  {}",
        "feed-forward (randomized)",
        with_commas(c.ff),
        with_commas(ff_built),
        format!(
            "{} frozen + {} trainable",
            with_commas(n * d_ff + d_ff),
            with_commas(d_ff * n + n)
        )
    )?;
    writeln!(
        w,
        "{:<28} {:>14} {:>14}  {}",
        "layer norms (per layer)",
        with_commas(c.norm),
        with_commas(norm_built),
        "formula counts 2*n*n; an as-built gain+bias pair is 2*n"
    )?;
    writeln!(
        w,
        "{:<28} {:>14} {:>14}  {}",
        "rl attention",
        with_commas(c.rl_attn),
        "-",
        format!("reference stack at width d_r={d_r}")
    )?;
    writeln!(
        w,
        "{:<28} {:>14} {:>14}  {}",
        "rl feed-forward",
        with_commas(c.rl_ff),
        "-",
        "reference feed-forward with the extra n-width projection"
    )?;
    writeln!(w)?;
    writeln!(
        w,
        "size disparity: rl attention is {:.2}x the randomized attention; rl feed-forward is {:.2}x the randomized feed-forward",
        c.rl_attn as f64 / c.attn as f64,
        c.rl_ff as f64 / c.ff as f64
    )?;
    w.flush()?;
    Ok(())
}
