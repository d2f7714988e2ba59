//! Subcommand implementations. Each returns `Ok(true)` on success and
//! `Ok(false)` when a check it performs fails.

use std::io::Write;
use std::path::{Path, PathBuf};

use hoca_core::bench::{rank_sweep, scaling_sweep, summarise_ranks, RankSweepConfig, SweepGrid};
use hoca_core::captioner::decode::{best_token, log_softmax};
use hoca_core::captioner::{
    beam_decode, greedy_decode, load_checkpoint, save_checkpoint, synth_dataset, train_with, Captioner,
    DecoderState, Item, ItemDecoder, Split, BOS, EOS,
};
use hoca_core::maf::Mechanism;
use hoca_core::rng::GENERATOR_ID;
use hoca_core::tensor::FeatureMatrix;
use hoca_core::verify::{run_suites, Suite};
use hoca_core::{HocaError, Result};

use crate::bundle::{read_bundle, write_bundle};
use crate::config::RunConfig;
use crate::report::{fmt_f64, write_csv, write_curve, write_rank_rows, write_rank_summary, write_space, write_suites};

pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Where decode and emit-attention take their input features from.
#[derive(Debug, Clone)]
pub enum ItemSource {
    Bundle(PathBuf),
    /// Index into the test split of the configured synthetic dataset.
    Synthetic(usize),
}

impl ItemSource {
    /// `--bundle` wins over `--item`; with neither, the config's bundle or
    /// test item 0 is used.
    pub fn pick(bundle: Option<PathBuf>, item: Option<usize>, config: &RunConfig) -> Self {
        match (bundle, item) {
            (Some(b), _) => ItemSource::Bundle(b),
            (None, Some(i)) => ItemSource::Synthetic(i),
            (None, None) => config.bundle.clone().map_or(ItemSource::Synthetic(0), ItemSource::Bundle),
        }
    }
}

fn load_features(source: &ItemSource, config: &RunConfig) -> Result<Vec<FeatureMatrix>> {
    match source {
        ItemSource::Bundle(dir) => Ok(read_bundle(dir)?.1),
        ItemSource::Synthetic(index) => {
            let ds = synth_dataset(config.seed, &config.dataset)?;
            let item = ds.split(Split::Test).nth(*index).ok_or_else(|| {
                HocaError::Argument(format!("item: test split has {} items, asked for {index}", ds.split(Split::Test).count()))
            })?;
            Ok(item.features.clone())
        }
    }
}

fn tokens_str(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn verify(suite: Option<&str>, config: &RunConfig, out: Option<&Path>, w: &mut impl Write) -> Result<bool> {
    let filter = suite.map(str::parse::<Suite>).transpose()?;
    let reports = run_suites(filter)?;
    for r in &reports {
        writeln!(
            w,
            "{:<13} cases={:<6} max_error={:<24} tolerance={:<8} {}",
            r.suite.as_str(),
            r.cases,
            fmt_f64(r.max_error),
            fmt_f64(r.tolerance),
            if r.passed() { "PASS" } else { "FAIL" }
        )?;
        for f in &r.failures {
            writeln!(w, "  {f}")?;
        }
    }
    if let Some(dir) = out {
        config.save_into(dir)?;
        write_suites(&dir.join("verify.csv"), &reports)?;
    }
    Ok(reports.iter().all(|r| r.passed()))
}

pub fn train(config: &RunConfig, out: &Path, w: &mut impl Write) -> Result<bool> {
    if config.bundle.is_some() {
        return Err(HocaError::Config("bundle: training needs captions; use the synthetic dataset".into()));
    }
    config.save_into(out)?;
    let ds = synth_dataset(config.seed, &config.dataset)?;
    let mut model = Captioner::new(&config.model(), &ds.data_shape(), config.seed)?;
    let tr: Vec<&Item> = ds.split(Split::Train).collect();
    let va: Vec<&Item> = ds.split(Split::Val).collect();
    writeln!(
        w,
        "training {} arities {:?} rank {} on {} items (seed {}, {GENERATOR_ID})",
        config.mechanism,
        config.arities.as_slice(),
        config.rank,
        tr.len(),
        config.seed
    )?;
    let mut log = Vec::new();
    let curve = train_with(&mut model, &tr, &va, &config.train(), |r| {
        log.push(format!(
            "epoch {:>3}  train {:.4}  val {:.4}  acc {:.3}",
            r.epoch, r.train_loss, r.val_loss, r.val_token_acc
        ));
    })?;
    for line in log {
        writeln!(w, "{line}")?;
    }
    write_curve(&out.join("curve.csv"), &curve)?;
    save_checkpoint(&model, config.seed, &out.join(CHECKPOINT_DIR))?;
    Ok(true)
}

pub fn bench(config: &RunConfig, grid: &SweepGrid, out: &Path, w: &mut impl Write) -> Result<bool> {
    config.save_into(out)?;
    let result = scaling_sweep(grid)?;
    write_space(&out.join("bench.csv"), &result.reports)?;
    let capped = result.reports.iter().filter(|r| r.capped()).count();
    writeln!(w, "{} configurations, {capped} capped (counted = CAPPED)", result.reports.len())?;
    for m in &result.count_mismatches {
        writeln!(w, "count mismatch: {m}")?;
    }
    for v in &result.ordering_violations {
        writeln!(w, "ordering: {v}")?;
    }
    for v in &result.timing_violations {
        writeln!(w, "timing: {v}")?;
    }
    Ok(result.count_mismatches.is_empty())
}

pub fn sweep_rank(config: &RunConfig, ranks: &[usize], seeds: &[u64], out: &Path, w: &mut impl Write) -> Result<bool> {
    if ranks.is_empty() || seeds.is_empty() {
        return Err(HocaError::Config("ranks/seeds: need at least one of each".into()));
    }
    let mut model = config.model();
    model.maf.mechanism = Mechanism::Lowrank;
    for &k in ranks {
        let mut m = model.clone();
        m.maf.rank = k;
        m.validate(config.dataset.n_modalities)?;
    }
    config.save_into(out)?;
    let sweep = RankSweepConfig {
        dataset: config.dataset.clone(),
        model,
        train: config.train(),
        ranks: ranks.to_vec(),
        seeds: seeds.to_vec(),
    };
    let rows = rank_sweep(&sweep)?;
    let summary = summarise_ranks(&rows);
    write_rank_rows(&out.join("rank_sweep.csv"), &rows)?;
    write_rank_summary(&out.join("rank_summary.csv"), &summary)?;
    for s in &summary {
        writeln!(
            w,
            "rank {:>2}: mean acc {:.3} (min {:.3}, max {:.3}, {} runs)",
            s.rank, s.mean_acc, s.min_acc, s.max_acc, s.runs
        )?;
    }
    Ok(true)
}

pub fn decode(
    config: &RunConfig,
    checkpoint: &Path,
    source: &ItemSource,
    out: Option<&Path>,
    w: &mut impl Write,
) -> Result<bool> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let features = load_features(source, config)?;
    let params = model.snapshot()?;
    let dec = ItemDecoder::new(&params, &features)?;
    let greedy = greedy_decode(&dec, config.max_len)?;
    let beam = beam_decode(&dec, config.beam_width, config.max_len)?;
    writeln!(w, "greedy: {}", tokens_str(&greedy))?;
    writeln!(w, "beam:   {} (log p = {:.4})", tokens_str(&beam.tokens), beam.log_prob)?;
    if let Some(dir) = out {
        config.save_into(dir)?;
        write_csv(
            &dir.join("decode.csv"),
            &["method", "width", "tokens", "finished", "log_prob"],
            [
                vec!["greedy".into(), "1".into(), tokens_str(&greedy), greedy.last().is_some_and(|&t| t == EOS).to_string(), String::new()],
                vec![
                    "beam".into(),
                    config.beam_width.to_string(),
                    tokens_str(&beam.tokens),
                    beam.finished.to_string(),
                    fmt_f64(beam.log_prob),
                ],
            ],
        )?;
    }
    Ok(true)
}

/// Greedy decoding with every attention distribution recorded. Writes
/// `attention.csv` (one row per step, modality and family) and
/// `combined.csv` (one row per step and modality).
pub fn emit_attention(config: &RunConfig, checkpoint: &Path, source: &ItemSource, out: &Path, w: &mut impl Write) -> Result<bool> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let features = load_features(source, config)?;
    let params = model.snapshot()?;
    let dec = ItemDecoder::new(&params, &features)?;
    let n = features.len();
    let width = features.iter().map(FeatureMatrix::t).max().unwrap_or(0);
    let alpha_cols: Vec<String> = (0..width).map(|r| format!("alpha_{r}")).collect();
    let beta_cols: Vec<String> = (0..n).map(|m| format!("beta_{m}")).collect();
    let padded = |weights: &[f64]| -> Vec<String> {
        (0..width).map(|r| weights.get(r).map_or_else(String::new, |&v| fmt_f64(v))).collect()
    };

    let mut family_rows = Vec::new();
    let mut combined_rows = Vec::new();
    let mut state = DecoderState::zeros(params.hidden());
    let mut prev = BOS;
    let mut tokens = Vec::new();
    for step in 0..config.max_len {
        let (next, output) = dec.step_output(&state, prev)?;
        let token = best_token(&log_softmax(&output.logits));
        let beta: Vec<String> = output.beta.iter().map(|&b| fmt_f64(b)).collect();
        for l in 0..n {
            for (f, fam) in params.maf.families[l].iter().enumerate() {
                let label = fam.members.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
                let mut row = vec![step.to_string(), token.to_string(), l.to_string(), label, fam.members.len().to_string()];
                row.extend(padded(&output.families[l][f]));
                row.extend(beta.iter().cloned());
                family_rows.push(row);
            }
            let mut row = vec![step.to_string(), token.to_string(), l.to_string()];
            row.extend(padded(&output.combined[l]));
            row.extend(beta.iter().cloned());
            combined_rows.push(row);
        }
        tokens.push(token);
        if token == EOS {
            break;
        }
        state = next;
        prev = token;
    }

    config.save_into(out)?;
    let mut header: Vec<&str> = vec!["step", "token", "modality", "family", "arity"];
    header.extend(alpha_cols.iter().map(String::as_str));
    header.extend(beta_cols.iter().map(String::as_str));
    write_csv(&out.join("attention.csv"), &header, family_rows)?;
    let mut header: Vec<&str> = vec!["step", "token", "modality"];
    header.extend(alpha_cols.iter().map(String::as_str));
    header.extend(beta_cols.iter().map(String::as_str));
    write_csv(&out.join("combined.csv"), &header, combined_rows)?;
    writeln!(w, "decoded {} ({} steps)", tokens_str(&tokens), tokens.len())?;
    Ok(true)
}

pub fn bundle_export(config: &RunConfig, item: usize, out: &Path, w: &mut impl Write) -> Result<bool> {
    let features = load_features(&ItemSource::Synthetic(item), config)?;
    config.save_into(out)?;
    let manifest = write_bundle(out, &features)?;
    writeln!(w, "wrote {} modalities to {}", manifest.modalities.len(), out.display())?;
    Ok(true)
}
