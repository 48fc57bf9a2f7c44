//! Stage orchestration: build-index, train-sentence, retrieve, train-verify,
//! predict, score. Every stage reads and writes artifacts under the output
//! directory, so a run can resume from any stage.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use fever_core::corpus::{load_claims, Claim, ClaimLabel, Corpus};
use fever_core::docretrieval::{retrieve_docs, TitleIndex};
use fever_core::encoder::{load_checkpoint, save_checkpoint, ModelParams};
use fever_core::metrics::{
    fever_score, pr_curve, read_final_predictions, write_final_predictions, write_pr_csv,
    EvalReport, FinalPrediction,
};
use fever_core::sentretrieval::{
    gen_candidates, rank_and_select, read_retrieval_predictions, read_scored_candidates,
    score_candidates, train_retriever, write_retrieval_predictions, write_scored_candidates,
    RetrievalOutput, RetrieverTrainConfig,
};
use fever_core::tokenizer::Vocabulary;
use fever_core::verification::{
    aggregate_verdict, build_verify_dataset, classify_batch, train_verifier, VerifierTrainConfig,
};
use fever_core::Candidate;

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    BuildIndex,
    TrainSentence,
    Retrieve,
    TrainVerify,
    Predict,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::BuildIndex,
        Stage::TrainSentence,
        Stage::Retrieve,
        Stage::TrainVerify,
        Stage::Predict,
        Stage::Score,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::BuildIndex => "build-index",
            Stage::TrainSentence => "train-sentence",
            Stage::Retrieve => "retrieve",
            Stage::TrainVerify => "train-verify",
            Stage::Predict => "predict",
            Stage::Score => "score",
        }
    }
}

/// Run stage bodies inside a sized rayon pool; 0 keeps the default.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool")
            .install(f)
    }
}

fn require_artifact(path: &Path, produced_by: Stage) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing artifact {}; run the `{}` stage first",
            path.display(),
            produced_by.name()
        );
    }
    Ok(())
}

fn load_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    cfg.validate_inputs()?;
    Corpus::load_wiki_jsonl(&cfg.wiki)
        .with_context(|| format!("loading wiki dump {}", cfg.wiki.display()))
}

fn load_labeled_claims(path: &Path, corpus: &Corpus) -> Result<Vec<Claim>> {
    let claims =
        load_claims(path).with_context(|| format!("loading claims {}", path.display()))?;
    for warning in corpus.audit_claims(&claims) {
        eprintln!("warning: {warning}");
    }
    Ok(claims)
}

pub fn build_index(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    let index = TitleIndex::build(&corpus);
    std::fs::create_dir_all(&cfg.out_dir)?;
    index.save(&cfg.index_path())?;
    println!(
        "[build-index] indexed {} pages -> {} ({:.1?})",
        index.num_docs(),
        cfg.index_path().display(),
        started.elapsed()
    );
    Ok(())
}

fn claim_docs(
    index: &TitleIndex,
    claims: &[Claim],
    k: usize,
) -> Result<Vec<Vec<String>>> {
    claims
        .par_iter()
        .map(|claim| Ok(retrieve_docs(index, &claim.text, k)?))
        .collect()
}

fn candidates_for(
    corpus: &Corpus,
    index: &TitleIndex,
    claims: &[Claim],
    k: usize,
) -> Result<Vec<Vec<Candidate>>> {
    let docs = claim_docs(index, claims, k)?;
    Ok(claims
        .par_iter()
        .zip(docs.par_iter())
        .map(|(claim, docs)| gen_candidates(corpus, claim, docs))
        .collect())
}

pub fn train_sentence(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    require_artifact(&cfg.index_path(), Stage::BuildIndex)?;
    let index = TitleIndex::load(&cfg.index_path())?;
    let claims = load_labeled_claims(&cfg.train_claims, &corpus)?;
    let claims: Vec<Claim> = claims
        .into_iter()
        .filter(|c| {
            if c.label == ClaimLabel::Unknown {
                eprintln!("warning: claim {} is unlabeled; skipped for training", c.claim_id);
                false
            } else {
                true
            }
        })
        .collect();

    let texts: Vec<&str> = corpus
        .pages()
        .flat_map(|p| p.sentences.iter().map(|(_, s)| s.as_str()))
        .chain(claims.iter().map(|c| c.text.as_str()))
        .collect();
    let vocab = Vocabulary::build(texts, cfg.max_vocab)?;
    vocab.save(&cfg.vocab_path())?;

    let candidates: Vec<Candidate> = candidates_for(&corpus, &index, &claims, cfg.k_docs)?
        .into_iter()
        .flatten()
        .collect();
    let positives = candidates
        .iter()
        .filter(|c| c.is_evidence == Some(true))
        .count();
    println!(
        "[train-sentence] {} candidates ({} positive) from {} claims",
        candidates.len(),
        positives,
        claims.len()
    );

    let mut encoder = cfg.encoder.clone();
    encoder.vocab_size = vocab.size();
    let train_cfg = RetrieverTrainConfig {
        mode: cfg.mode,
        sampling: cfg.sampling,
        encoder,
        epochs: cfg.retrieval_epochs,
        learning_rate: cfg.retrieval_lr,
        seed: cfg.stage_seed(1),
    };
    let (params, log) = train_retriever(&candidates, &claims, &vocab, &train_cfg)?;
    save_checkpoint(&params, &cfg.retriever_ckpt_path(), cfg.checkpoint_dtype)?;
    std::fs::write(
        cfg.retriever_log_path(),
        serde_json::to_string_pretty(&log)? + "\n",
    )?;
    let eval_first = log.eval.first().map(|e| e.loss).unwrap_or(f64::NAN);
    let eval_last = log.eval.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "[train-sentence] {} steps, eval loss {:.4} -> {:.4} ({:.1?})",
        log.steps.len(),
        eval_first,
        eval_last,
        started.elapsed()
    );
    Ok(())
}

fn load_model_and_vocab(cfg: &PipelineConfig, ckpt: &Path, stage: Stage) -> Result<(ModelParams, Vocabulary)> {
    require_artifact(ckpt, stage)?;
    require_artifact(&cfg.vocab_path(), Stage::TrainSentence)?;
    let params = load_checkpoint(ckpt)?;
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    Ok((params, vocab))
}

fn retrieve_for_claims(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    index: &TitleIndex,
    params: &ModelParams,
    vocab: &Vocabulary,
    claims: &[Claim],
) -> Result<Vec<RetrievalOutput>> {
    let per_claim = candidates_for(corpus, index, claims, cfg.k_docs)?;
    claims
        .par_iter()
        .zip(per_claim.into_par_iter())
        .map(|(claim, mut candidates)| {
            score_candidates(params, vocab, &claim.text, &mut candidates, cfg.scoring_batch)?;
            Ok(rank_and_select(claim.claim_id, candidates, cfg.threshold))
        })
        .collect()
}

pub fn retrieve(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    require_artifact(&cfg.index_path(), Stage::BuildIndex)?;
    let index = TitleIndex::load(&cfg.index_path())?;
    let (params, vocab) =
        load_model_and_vocab(cfg, &cfg.retriever_ckpt_path(), Stage::TrainSentence)?;

    let eval_claims = load_labeled_claims(cfg.eval_claims_path(), &corpus)?;
    let outputs = retrieve_for_claims(cfg, &corpus, &index, &params, &vocab, &eval_claims)?;
    write_retrieval_predictions(&outputs, BufWriter::new(File::create(cfg.retrieval_predictions_path())?))?;
    write_scored_candidates(&outputs, BufWriter::new(File::create(cfg.scored_path())?))?;

    if cfg.train_retrieval_predictions_path() != cfg.retrieval_predictions_path() {
        let train_claims = load_labeled_claims(&cfg.train_claims, &corpus)?;
        let train_outputs =
            retrieve_for_claims(cfg, &corpus, &index, &params, &vocab, &train_claims)?;
        write_retrieval_predictions(
            &train_outputs,
            BufWriter::new(File::create(cfg.train_retrieval_predictions_path())?),
        )?;
    }
    println!(
        "[retrieve] wrote top-5 evidence for {} claims ({:.1?})",
        eval_claims.len(),
        started.elapsed()
    );
    Ok(())
}

pub fn train_verify(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    require_artifact(&cfg.train_retrieval_predictions_path(), Stage::Retrieve)?;
    require_artifact(&cfg.vocab_path(), Stage::TrainSentence)?;
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    let claims = load_labeled_claims(&cfg.train_claims, &corpus)?;
    let predictions = read_retrieval_predictions(&cfg.train_retrieval_predictions_path())?;
    let dataset = build_verify_dataset(&claims, &predictions, &corpus);
    println!("[train-verify] {} evidence-claim pairs", dataset.len());

    let mut encoder = cfg.encoder.clone();
    encoder.vocab_size = vocab.size();
    let train_cfg = VerifierTrainConfig {
        encoder,
        epochs: cfg.verify_epochs,
        batch_size: cfg.verify_batch,
        learning_rate: cfg.verify_lr,
        seed: cfg.stage_seed(3),
    };
    let (params, log) = train_verifier(&dataset, &vocab, &train_cfg)?;
    save_checkpoint(&params, &cfg.verifier_ckpt_path(), cfg.checkpoint_dtype)?;
    std::fs::write(
        cfg.verifier_log_path(),
        serde_json::to_string_pretty(&log)? + "\n",
    )?;

    // Training-set pair accuracy, for the learning-sanity gate.
    let pairs: Vec<(String, String)> = dataset
        .iter()
        .map(|ex| (ex.evidence_text.clone(), ex.claim_text.clone()))
        .collect();
    let verdicts = classify_batch(&params, &vocab, &pairs, cfg.scoring_batch)?;
    let correct = verdicts
        .iter()
        .zip(&dataset)
        .filter(|(v, ex)| **v == ex.target)
        .count();
    let accuracy = correct as f64 / dataset.len().max(1) as f64;
    std::fs::write(
        cfg.out_dir.join("verifier_train_accuracy.json"),
        serde_json::to_string(&serde_json::json!({ "train_pair_accuracy": accuracy }))? + "\n",
    )?;
    println!(
        "[train-verify] {} steps, train pair accuracy {:.4} ({:.1?})",
        log.steps.len(),
        accuracy,
        started.elapsed()
    );
    Ok(())
}

pub fn predict(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let corpus = load_corpus(cfg)?;
    require_artifact(&cfg.retrieval_predictions_path(), Stage::Retrieve)?;
    let (params, vocab) =
        load_model_and_vocab(cfg, &cfg.verifier_ckpt_path(), Stage::TrainVerify)?;
    let retrieved = read_retrieval_predictions(&cfg.retrieval_predictions_path())?;

    // Flatten all (evidence, claim) pairs, classify in batches, regroup.
    let eval_claims = load_claims(cfg.eval_claims_path())?;
    let text_by_id: HashMap<i64, &str> = eval_claims
        .iter()
        .map(|c| (c.claim_id, c.text.as_str()))
        .collect();
    let mut flat: Vec<(String, String)> = Vec::new();
    let mut spans: Vec<(i64, usize)> = Vec::new();
    for pred in &retrieved {
        let Some(claim_text) = text_by_id.get(&pred.id) else {
            bail!(
                "retrieval predictions mention claim {} absent from {}",
                pred.id,
                cfg.eval_claims_path().display()
            );
        };
        let mut count = 0;
        for (page, idx) in &pred.predicted_evidence {
            if let Some(text) = corpus.page(page).and_then(|p| p.sentence(*idx)) {
                flat.push((
                    fever_core::corpus::prepend_title(page, text),
                    claim_text.to_string(),
                ));
                count += 1;
            }
        }
        spans.push((pred.id, count));
    }
    let verdicts = classify_batch(&params, &vocab, &flat, cfg.scoring_batch)?;

    let mut finals = Vec::with_capacity(retrieved.len());
    let mut cursor = 0;
    for (pred, (id, count)) in retrieved.iter().zip(spans) {
        debug_assert_eq!(pred.id, id);
        let label = aggregate_verdict(&verdicts[cursor..cursor + count]);
        cursor += count;
        finals.push(FinalPrediction {
            id,
            label,
            evidence: pred.predicted_evidence.clone(),
        });
    }
    write_final_predictions(&finals, BufWriter::new(File::create(cfg.predictions_path())?))?;
    println!(
        "[predict] wrote {} final verdicts ({:.1?})",
        finals.len(),
        started.elapsed()
    );
    Ok(())
}

/// Score a predictions file against gold claims, print the table, and return
/// the report (also written as JSON when `report_out` is given).
pub fn cmd_score(
    gold_path: &Path,
    predictions_path: &Path,
    report_out: Option<&Path>,
) -> Result<EvalReport> {
    let gold = load_claims(gold_path)
        .with_context(|| format!("loading gold claims {}", gold_path.display()))?;
    require_artifact(predictions_path, Stage::Predict)?;
    let predictions = read_final_predictions(predictions_path)?;
    let report = fever_score(&gold, &predictions)?;
    print!("{report}");
    if let Some(path) = report_out {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "{}", serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

pub fn score(cfg: &PipelineConfig) -> Result<EvalReport> {
    cmd_score(
        cfg.eval_claims_path(),
        &cfg.predictions_path(),
        Some(&cfg.report_path()),
    )
}

/// Threshold sweep over the persisted scored candidates; defaults to 21
/// evenly spaced thresholds across the observed score range.
pub fn cmd_pr_curve(
    cfg: &PipelineConfig,
    thresholds: Option<Vec<f64>>,
    output: Option<&Path>,
) -> Result<()> {
    require_artifact(&cfg.scored_path(), Stage::Retrieve)?;
    let scored = read_scored_candidates(&cfg.scored_path())?;
    let gold = load_claims(cfg.eval_claims_path())?;
    let thresholds = match thresholds {
        Some(t) if !t.is_empty() => t,
        _ => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for items in scored.values() {
                for (_, _, s) in items {
                    lo = lo.min(*s);
                    hi = hi.max(*s);
                }
            }
            if !lo.is_finite() || lo >= hi {
                vec![0.0]
            } else {
                (0..21).map(|i| lo + (hi - lo) * i as f64 / 20.0).collect()
            }
        }
    };
    let points = pr_curve(&gold, &scored, &thresholds)?;
    let out_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.pr_curve_path());
    let mut buf = Vec::new();
    write_pr_csv(&points, &mut buf)?;
    std::fs::write(&out_path, &buf)?;
    println!("[pr-curve] wrote {} rows -> {}", points.len(), out_path.display());
    Ok(())
}

/// Execute the pipeline from `from` through scoring; resumable because every
/// stage persists its artifact.
pub fn run(cfg: &PipelineConfig, from: Stage) -> Result<EvalReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.write_resolved()?;
    let started = Instant::now();
    let mut report = None;
    for stage in Stage::ALL {
        if stage < from {
            continue;
        }
        match stage {
            Stage::BuildIndex => build_index(cfg)?,
            Stage::TrainSentence => train_sentence(cfg)?,
            Stage::Retrieve => retrieve(cfg)?,
            Stage::TrainVerify => train_verify(cfg)?,
            Stage::Predict => predict(cfg)?,
            Stage::Score => report = Some(score(cfg)?),
        }
    }
    println!("[run] completed in {:.1?}", started.elapsed());
    report.context("run ended before the score stage")
}
