//! The iterative CKA layer-pruning loop and its comparison baselines.
//!
//! One iteration: extract the reference representation `R` of the current
//! net on a fixed sample set, build every one-block-shorter candidate net
//! without fine-tuning, score each by `1 − CKA(R, R_candidate)`, remove the
//! lowest-scoring block and fine-tune. Cost per iteration is one removal and
//! one forward pass per candidate, plus one forward pass for `R`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{Affine, Block, BlockId, FlopCount, ResidualNet, StageCap};
use crate::rng;
use crate::similarity::{layer_score, KernelKind, SimilarityScore};
use crate::training::{evaluate, finetune, Dataset, SplitData, TrainConfig};

/// Environment variable capping the threads used for candidate scoring.
pub const THREADS_ENV: &str = "TOOLKIT_THREADS";

/// Where the reference representation comes from in each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Re-extract `R` from the current, fine-tuned net every iteration.
    #[default]
    ReExtract,
    /// Keep the representation of the original unpruned net throughout.
    FixedOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub iterations: usize,
    #[serde(default = "default_sample_count")]
    pub score_sample_count: usize,
    #[serde(default)]
    pub kernel: KernelKind,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub stage_cap: StageCap,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reference: ReferenceMode,
}

fn default_sample_count() -> usize {
    512
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("prune.iterations must be >= 1".into()));
        }
        if self.score_sample_count < 2 {
            return Err(Error::Config("prune.score_sample_count must be >= 2".into()));
        }
        self.kernel.validate()?;
        self.finetune.validate()
    }
}

/// Score of one candidate block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub block: BlockId,
    pub cka: f64,
    pub score: f64,
    pub degenerate: bool,
}

impl CandidateScore {
    fn new(block: BlockId, s: SimilarityScore) -> Self {
        Self {
            block,
            cka: s.cka,
            score: s.score,
            degenerate: s.degenerate,
        }
    }
}

/// Scores of every candidate plus the work done to get them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scoring {
    pub scores: Vec<CandidateScore>,
    pub temporary_removals: usize,
    pub representation_extractions: usize,
}

/// Threads for candidate scoring: `TOOLKIT_THREADS` if set and positive,
/// otherwise 1.
pub fn scoring_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or(1)
}

/// Knobs for [`score_with`].
#[derive(Debug, Clone, Copy)]
pub struct ScoreOptions<'a> {
    pub kernel: KernelKind,
    pub stage_cap: StageCap,
    /// Fixed reference representation; extracted from `net` when `None`.
    pub reference: Option<&'a Matrix>,
    pub threads: usize,
}

impl Default for ScoreOptions<'_> {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Linear,
            stage_cap: StageCap::default(),
            reference: None,
            threads: 1,
        }
    }
}

/// Scores every candidate of `net` on `x_score` with the default cap.
pub fn score_candidates(net: &ResidualNet, x_score: &Matrix, kernel: KernelKind) -> Result<Scoring> {
    score_with(
        net,
        x_score,
        &ScoreOptions {
            kernel,
            threads: scoring_threads(),
            ..ScoreOptions::default()
        },
    )
}

/// Scores every candidate of `net`. Candidates are independent, so the
/// result does not depend on `opts.threads` or evaluation order.
pub fn score_with(net: &ResidualNet, x_score: &Matrix, opts: &ScoreOptions<'_>) -> Result<Scoring> {
    let candidates = net.candidate_blocks_with_cap(opts.stage_cap);
    if candidates.is_empty() {
        return Err(Error::NothingPrunable);
    }
    if x_score.rows() < 2 {
        return Err(Error::TooFewSamples("score_candidates", x_score.rows()));
    }
    let (reference, own) = match opts.reference {
        Some(r) => (r.clone(), 0),
        None => (net.representation(x_score)?, 1),
    };
    let score_one = |id: &BlockId| -> Result<CandidateScore> {
        let pruned = net.remove_block_with_cap(*id, opts.stage_cap)?;
        let r = pruned.representation(x_score)?;
        Ok(CandidateScore::new(*id, layer_score(&reference, &r, opts.kernel)?))
    };
    let scores: Result<Vec<CandidateScore>> = if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| candidates.par_iter().map(score_one).collect())
    } else {
        candidates.iter().map(score_one).collect()
    };
    Ok(Scoring {
        scores: scores?,
        temporary_removals: candidates.len(),
        representation_extractions: candidates.len() + own,
    })
}

/// The block to remove: lowest score, degenerate candidates after all
/// others, ties to the lowest `(stage, position)`.
pub fn select(scores: &[CandidateScore]) -> Option<BlockId> {
    scores
        .iter()
        .min_by(|a, b| {
            a.degenerate
                .cmp(&b.degenerate)
                .then(a.score.total_cmp(&b.score))
                .then(a.block.cmp(&b.block))
        })
        .map(|c| c.block)
}

/// One prune step and everything measured around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub iteration: usize,
    pub scores: Vec<CandidateScore>,
    pub removed: BlockId,
    pub acc_before: Option<f64>,
    pub acc_after_removal: Option<f64>,
    pub acc_after_finetune: Option<f64>,
    pub flops_before: usize,
    pub flops_after: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub temporary_removals: usize,
    pub representation_extractions: usize,
}

fn record(iteration: usize, before: &ResidualNet, after: &ResidualNet, scoring: Scoring, removed: BlockId) -> PruneRecord {
    let fb = before.count_flops();
    let fa = after.count_flops();
    PruneRecord {
        iteration,
        scores: scoring.scores,
        removed,
        acc_before: None,
        acc_after_removal: None,
        acc_after_finetune: None,
        flops_before: fb.per_sample_flops,
        flops_after: fa.per_sample_flops,
        params_before: fb.params,
        params_after: fa.params,
        temporary_removals: scoring.temporary_removals,
        representation_extractions: scoring.representation_extractions,
    }
}

/// Scores all candidates and removes the selected one. No fine-tuning.
pub fn prune_one(net: &ResidualNet, x_score: &Matrix, kernel: KernelKind) -> Result<(ResidualNet, PruneRecord)> {
    prune_one_with(
        net,
        x_score,
        &ScoreOptions {
            kernel,
            threads: scoring_threads(),
            ..ScoreOptions::default()
        },
    )
}

pub fn prune_one_with(net: &ResidualNet, x_score: &Matrix, opts: &ScoreOptions<'_>) -> Result<(ResidualNet, PruneRecord)> {
    let scoring = score_with(net, x_score, opts)?;
    let removed = select(&scoring.scores).ok_or(Error::NothingPrunable)?;
    let pruned = net.remove_block_with_cap(removed, opts.stage_cap)?;
    let rec = record(0, net, &pruned, scoring, removed);
    Ok((pruned, rec))
}

/// Full record of an iterative pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub config: PruneConfig,
    pub records: Vec<PruneRecord>,
    pub initial: FlopCount,
    #[serde(rename = "final")]
    pub final_count: FlopCount,
    /// Set when candidates ran out before `config.iterations`.
    pub truncated: bool,
}

impl PruneTrace {
    /// One CSV row per iteration.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record([
            "iteration",
            "removed",
            "score",
            "cka",
            "candidates",
            "acc_before",
            "acc_after_removal",
            "acc_after_finetune",
            "flops_before",
            "flops_after",
            "params_before",
            "params_after",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |a| a.to_string());
        for r in &self.records {
            let chosen = r.scores.iter().find(|s| s.block == r.removed);
            w.write_record([
                r.iteration.to_string(),
                r.removed.to_string(),
                chosen.map_or(String::new(), |s| s.score.to_string()),
                chosen.map_or(String::new(), |s| s.cka.to_string()),
                r.scores.len().to_string(),
                opt(r.acc_before),
                opt(r.acc_after_removal),
                opt(r.acc_after_finetune),
                r.flops_before.to_string(),
                r.flops_after.to_string(),
                r.params_before.to_string(),
                r.params_after.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Seeded class-stratified subsample of `count` rows (all rows if fewer).
pub fn score_subsample(data: &Dataset, count: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, rng::tags::SCORE_SUBSAMPLE);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &c) in data.y.iter().enumerate() {
        by_class[c].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut r);
    }
    let want = count.min(data.len());
    let mut picked = Vec::with_capacity(want);
    let mut depth = 0;
    while picked.len() < want {
        for members in &by_class {
            if let Some(&i) = members.get(depth) {
                if picked.len() < want {
                    picked.push(i);
                }
            }
        }
        depth += 1;
    }
    data.x.select_rows(&picked)
}

/// Runs the prune → fine-tune loop for `cfg.iterations` steps or until no
/// candidate is left.
///
/// Scoring uses a fixed seeded subsample of the training split; accuracies
/// are measured on the test split. Fine-tuning in iteration `i` is seeded
/// with `cfg.finetune.seed + i`.
pub fn prune_iterative(net: &ResidualNet, data: &SplitData, cfg: &PruneConfig) -> Result<(ResidualNet, PruneTrace)> {
    prune_iterative_with_threads(net, data, cfg, scoring_threads())
}

pub fn prune_iterative_with_threads(
    net: &ResidualNet,
    data: &SplitData,
    cfg: &PruneConfig,
    threads: usize,
) -> Result<(ResidualNet, PruneTrace)> {
    prune_iterative_observed(net, data, cfg, threads, |_, _| Ok(()))
}

/// [`prune_iterative_with_threads`] calling `on_iteration` with each record
/// and the fine-tuned net it produced.
pub fn prune_iterative_observed(
    net: &ResidualNet,
    data: &SplitData,
    cfg: &PruneConfig,
    threads: usize,
    mut on_iteration: impl FnMut(&PruneRecord, &ResidualNet) -> Result<()>,
) -> Result<(ResidualNet, PruneTrace)> {
    cfg.validate()?;
    if data.test.is_empty() {
        return Err(Error::EmptyData);
    }
    let x_score = score_subsample(&data.train, cfg.score_sample_count, cfg.seed);
    if x_score.rows() < 2 {
        return Err(Error::TooFewSamples("prune", x_score.rows()));
    }
    let fixed = match cfg.reference {
        ReferenceMode::FixedOriginal => Some(net.representation(&x_score)?),
        ReferenceMode::ReExtract => None,
    };
    let initial = net.count_flops();
    let mut current = net.clone();
    let mut records = Vec::new();
    let mut truncated = false;
    for i in 0..cfg.iterations {
        if current.candidate_blocks_with_cap(cfg.stage_cap).is_empty() {
            truncated = true;
            break;
        }
        let opts = ScoreOptions {
            kernel: cfg.kernel,
            stage_cap: cfg.stage_cap,
            reference: fixed.as_ref(),
            threads,
        };
        let acc_before = evaluate(&current, &data.test)?;
        let (pruned, mut rec) = prune_one_with(&current, &x_score, &opts)?;
        rec.iteration = i + 1;
        rec.acc_before = Some(acc_before);
        rec.acc_after_removal = Some(evaluate(&pruned, &data.test)?);
        let ft_cfg = TrainConfig {
            seed: cfg.finetune.seed.wrapping_add(i as u64),
            ..cfg.finetune.clone()
        };
        current = finetune(&pruned, data, &ft_cfg)?;
        rec.acc_after_finetune = Some(evaluate(&current, &data.test)?);
        on_iteration(&rec, &current)?;
        records.push(rec);
    }
    let trace = PruneTrace {
        config: cfg.clone(),
        records,
        initial,
        final_count: current.count_flops(),
        truncated,
    };
    Ok((current, trace))
}

/// Random-layer baseline: removes a uniformly chosen candidate.
pub fn random_layer_prune(net: &ResidualNet, seed: u64) -> Result<(ResidualNet, BlockId)> {
    random_layer_prune_with_cap(net, seed, StageCap::default())
}

pub fn random_layer_prune_with_cap(net: &ResidualNet, seed: u64, cap: StageCap) -> Result<(ResidualNet, BlockId)> {
    let candidates = net.candidate_blocks_with_cap(cap);
    if candidates.is_empty() {
        return Err(Error::NothingPrunable);
    }
    let mut r = rng::stream(seed, rng::tags::RANDOM_LAYER);
    let id = candidates[r.random_range(0..candidates.len())];
    Ok((net.remove_block_with_cap(id, cap)?, id))
}

/// The random-layer baseline run through the same loop and budget as
/// [`prune_iterative`]. Iteration `i` draws with seed `cfg.seed + i`.
pub fn random_iterative(net: &ResidualNet, data: &SplitData, cfg: &PruneConfig) -> Result<(ResidualNet, Vec<BlockId>)> {
    cfg.validate()?;
    let mut current = net.clone();
    let mut removed = Vec::new();
    for i in 0..cfg.iterations {
        if current.candidate_blocks_with_cap(cfg.stage_cap).is_empty() {
            break;
        }
        let (pruned, id) = random_layer_prune_with_cap(&current, cfg.seed.wrapping_add(i as u64), cfg.stage_cap)?;
        let ft_cfg = TrainConfig {
            seed: cfg.finetune.seed.wrapping_add(i as u64),
            ..cfg.finetune.clone()
        };
        current = finetune(&pruned, data, &ft_cfg)?;
        removed.push(id);
    }
    Ok((current, removed))
}

/// Brute-force ground truth: remove each candidate in turn, fine-tune,
/// evaluate on the test split. Returned in candidate order.
pub fn oracle_rank(net: &ResidualNet, data: &SplitData, finetune_cfg: &TrainConfig) -> Result<Vec<(BlockId, f64)>> {
    oracle_rank_with_cap(net, data, finetune_cfg, StageCap::default())
}

pub fn oracle_rank_with_cap(
    net: &ResidualNet,
    data: &SplitData,
    finetune_cfg: &TrainConfig,
    cap: StageCap,
) -> Result<Vec<(BlockId, f64)>> {
    let candidates = net.candidate_blocks_with_cap(cap);
    if candidates.is_empty() {
        return Err(Error::NothingPrunable);
    }
    candidates
        .into_iter()
        .map(|id| {
            let pruned = net.remove_block_with_cap(id, cap)?;
            let tuned = finetune(&pruned, data, finetune_cfg)?;
            Ok((id, evaluate(&tuned, &data.test)?))
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Returns 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// ℓ1 fan-in norm of every hidden unit: `(block, unit, norm)`, stage-major.
pub fn unit_importance(net: &ResidualNet) -> Vec<(BlockId, usize, f64)> {
    let mut out = Vec::new();
    for id in net.block_ids().collect::<Vec<_>>() {
        let b = net.block(id).unwrap();
        for u in 0..b.hidden() {
            let norm = b.expand.weight.row(u).iter().map(|v| v.abs()).sum();
            out.push((id, u, norm));
        }
    }
    out
}

/// Removes the `units` globally least important hidden units by ℓ1 fan-in
/// norm (ties to the earliest block and unit). A removed unit loses its row
/// of `W1`, its entry of `b1` and its column of `W2`.
pub fn l1_filter_prune_units(net: &ResidualNet, units: usize) -> Result<ResidualNet> {
    let mut all = unit_importance(net);
    if units > all.len() {
        return Err(Error::Config(format!(
            "cannot remove {units} of {} hidden units",
            all.len()
        )));
    }
    all.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut drop: Vec<Vec<Vec<bool>>> = net
        .stages()
        .iter()
        .map(|s| s.iter().map(|b| vec![false; b.hidden()]).collect())
        .collect();
    for &(id, u, _) in &all[..units] {
        drop[id.stage][id.position][u] = true;
    }
    let fraction = units as f64 / all.len() as f64;
    let mut out = net.clone();
    for (s, blocks) in out.stages_mut().iter_mut().enumerate() {
        for (p, b) in blocks.iter_mut().enumerate() {
            let mask = &drop[s][p];
            let keep: Vec<usize> = (0..mask.len()).filter(|&u| !mask[u]).collect();
            if keep.is_empty() {
                return Err(Error::EmptiesBlock {
                    fraction,
                    stage: s,
                    position: p,
                });
            }
            if keep.len() < mask.len() {
                *b = shrink_block(b, &keep);
            }
        }
    }
    Ok(out)
}

/// ℓ1 filter pruning of `fraction` of all hidden units.
pub fn l1_filter_prune(net: &ResidualNet, fraction: f64) -> Result<ResidualNet> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1)")));
    }
    let total = net.hidden_units();
    l1_filter_prune_units(net, (fraction * total as f64).round() as usize)
}

fn shrink_block(b: &Block, keep: &[usize]) -> Block {
    let width = b.width();
    let expand = Affine {
        weight: b.expand.weight.select_rows(keep),
        bias: keep.iter().map(|&u| b.expand.bias[u]).collect(),
    };
    let project = Affine {
        weight: Matrix::from_fn(width, keep.len(), |i, j| b.project.weight.get(i, keep[j])),
        bias: b.project.bias.clone(),
    };
    Block { expand, project }
}
