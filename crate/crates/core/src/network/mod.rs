//! Residual MLP classifiers with removable identity-shortcut blocks.
//!
//! Layout of a net:
//!
//! ```text
//! x ─ stem ─ relu ─ [block]* ─ transition ─ relu ─ [block]* ─ … ─ relu ─ classifier
//!                   └ stage 0 ┘                  └ stage 1 ┘
//! ```
//!
//! Each block computes `y' = y + f(y)` with `f(y) = W2·relu(W1·y + b1) + b2`.
//! Blocks are the only removable units; the stem, the stage transitions and
//! the classifier always stay. Removing a block rebuilds the block list
//! without it and carries every surviving tensor over unchanged, which is the
//! same function as forcing `f ≡ 0` for that block.

mod backprop;
mod checkpoint;

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_transposed, Matrix};
use crate::rng;

pub use backprop::{backward, forward_trace, ForwardTrace};
pub use checkpoint::{load, read_checkpoint, save, write_checkpoint, MAGIC, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Declarative architecture of a [`ResidualNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArch(m));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if self.stage_widths.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "stage_widths has {} entries but blocks_per_stage has {}",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if let Some(s) = self.stage_widths.iter().position(|&w| w == 0) {
            return bad(format!("stage_widths[{s}] must be >= 1"));
        }
        if let Some(s) = self.blocks_per_stage.iter().position(|&b| b < 2) {
            return bad(format!("blocks_per_stage[{s}] must be >= 2"));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }
}

/// Per-stage limit on how many blocks may be removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StageCap {
    /// At most `k − 2` of a stage's `k` original blocks may go.
    #[default]
    #[serde(rename = "k-2")]
    KMinus2,
    /// At most `k − 1` may go.
    #[serde(rename = "k-1")]
    KMinus1,
}

impl StageCap {
    /// Blocks that must survive in every stage.
    pub fn min_remaining(self) -> usize {
        match self {
            StageCap::KMinus2 => 2,
            StageCap::KMinus1 => 1,
        }
    }
}

/// A block addressed by stage and its current position in that stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub stage: usize,
    pub position: usize,
}

impl BlockId {
    pub fn new(stage: usize, position: usize) -> Self {
        Self { stage, position }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.stage, self.position)
    }
}

/// Dense layer `y = x·Wᵀ + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn init(in_dim: usize, out_dim: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound));
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = matmul_transposed(x, &self.weight).expect("affine input width");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    pub fn params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// `2·in·out + out`: one multiply-add per weight plus the bias add.
    pub fn flops(&self) -> usize {
        2 * self.in_dim() * self.out_dim() + self.out_dim()
    }
}

/// Residual block `y + W2·relu(W1·y + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `width → hidden`
    pub expand: Affine,
    /// `hidden → width`
    pub project: Affine,
}

impl Block {
    pub fn width(&self) -> usize {
        self.expand.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.expand.out_dim()
    }

    /// The residual branch `f(y)`.
    pub fn branch(&self, y: &Matrix) -> Matrix {
        let mut a = self.expand.forward(y);
        relu_inplace(&mut a);
        self.project.forward(&a)
    }

    pub fn forward(&self, y: &Matrix) -> Matrix {
        let mut out = self.branch(y);
        for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
            *o += v;
        }
        out
    }

    pub fn params(&self) -> usize {
        self.expand.params() + self.project.params()
    }

    /// Two affines, the hidden ReLU and the residual add.
    pub fn flops(&self) -> usize {
        self.expand.flops() + self.hidden() + self.project.flops() + self.width()
    }
}

pub(crate) fn relu_inplace(m: &mut Matrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Per-sample forward FLOPs and trainable parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub per_sample_flops: usize,
    pub params: usize,
}

impl FlopCount {
    /// `1 − self/baseline` on FLOPs, as a fraction.
    pub fn flop_reduction(&self, baseline: &FlopCount) -> f64 {
        1.0 - self.per_sample_flops as f64 / baseline.per_sample_flops as f64
    }
}

/// Instantiated residual classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    pub(crate) spec: ArchSpec,
    pub(crate) stem: Affine,
    pub(crate) stages: Vec<Vec<Block>>,
    pub(crate) transitions: Vec<Affine>,
    pub(crate) classifier: Affine,
    pub(crate) removal_log: Vec<BlockId>,
}

impl ResidualNet {
    /// Builds a net with fan-in scaled uniform weights drawn from the
    /// seeded generator. Same spec, same weights, bit for bit.
    pub fn build(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.seed, rng::tags::INIT);
        let stem = Affine::init(spec.input_dim, spec.stage_widths[0], &mut rng);
        let mut stages = Vec::with_capacity(spec.stage_widths.len());
        for (&w, &k) in spec.stage_widths.iter().zip(&spec.blocks_per_stage) {
            let blocks = (0..k)
                .map(|_| Block {
                    expand: Affine::init(w, w, &mut rng),
                    project: Affine::init(w, w, &mut rng),
                })
                .collect();
            stages.push(blocks);
        }
        let transitions = spec
            .stage_widths
            .windows(2)
            .map(|p| Affine::init(p[0], p[1], &mut rng))
            .collect();
        let last = *spec.stage_widths.last().unwrap();
        let classifier = Affine::init(last, spec.num_classes, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
            transitions,
            classifier,
            removal_log: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn stem(&self) -> &Affine {
        &self.stem
    }

    pub fn stages(&self) -> &[Vec<Block>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Vec<Block>] {
        &mut self.stages
    }

    pub fn transitions(&self) -> &[Affine] {
        &self.transitions
    }

    pub fn classifier(&self) -> &Affine {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Affine {
        &mut self.classifier
    }

    pub fn removal_log(&self) -> &[BlockId] {
        &self.removal_log
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.stages.get(id.stage)?.get(id.position)
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut Block> {
        self.stages.get_mut(id.stage)?.get_mut(id.position)
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Hidden units over all blocks, the "neurons" that block and filter
    /// pruning both remove.
    pub fn hidden_units(&self) -> usize {
        self.stages.iter().flatten().map(Block::hidden).sum()
    }

    /// Every block in stage-major order.
    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, b)| (0..b.len()).map(move |p| BlockId::new(s, p)))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "forward",
                left: x.shape(),
                right: (x.rows(), self.spec.input_dim),
            });
        }
        Ok(())
    }

    fn features(&self, x: &Matrix) -> Matrix {
        let mut h = self.stem.forward(x);
        relu_inplace(&mut h);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                h = self.transitions[s - 1].forward(&h);
                relu_inplace(&mut h);
            }
            for b in blocks {
                h = b.forward(&h);
            }
        }
        relu_inplace(&mut h);
        h
    }

    /// Penultimate activations: the post-ReLU output of the last stage,
    /// `n × last_width`. Labels are never consulted.
    pub fn representation(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.features(x))
    }

    /// Class logits, `n × num_classes`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.classifier.forward(&self.features(x)))
    }

    /// Blocks that may still be removed under `cap`, stage-major.
    ///
    /// The leading `cap.min_remaining()` blocks of every stage are the
    /// protected stage-entry blocks and never candidates; every block after
    /// them is. Because protected blocks are never removed, a stage's
    /// candidate count is `len − min_remaining`, which reaches zero exactly
    /// when the stage's removal budget is spent.
    pub fn candidate_blocks_with_cap(&self, cap: StageCap) -> Vec<BlockId> {
        let keep = cap.min_remaining();
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, b)| (keep..b.len()).map(move |p| BlockId::new(s, p)))
            .collect()
    }

    /// Candidates under the default `k − 2` cap.
    pub fn candidate_blocks(&self) -> Vec<BlockId> {
        self.candidate_blocks_with_cap(StageCap::default())
    }

    /// New net without block `id`; every other tensor is copied unchanged.
    pub fn remove_block_with_cap(&self, id: BlockId, cap: StageCap) -> Result<ResidualNet> {
        let not = |reason: String| Error::NotCandidate {
            stage: id.stage,
            position: id.position,
            reason,
        };
        let stage = self
            .stages
            .get(id.stage)
            .ok_or_else(|| not(format!("net has {} stages", self.stages.len())))?;
        if id.position >= stage.len() {
            return Err(not(format!("stage has {} blocks", stage.len())));
        }
        if id.position < cap.min_remaining() {
            return Err(not(format!(
                "stage-entry block: the first {} blocks of a stage are kept under cap {:?}",
                cap.min_remaining(),
                cap
            )));
        }
        if stage.len() <= cap.min_remaining() {
            let original = self.spec.blocks_per_stage[id.stage];
            return Err(not(format!(
                "stage cap {:?} reached: {} of {} original blocks already removed",
                cap,
                original - stage.len(),
                original
            )));
        }
        let mut out = self.clone();
        out.stages[id.stage].remove(id.position);
        out.removal_log.push(id);
        Ok(out)
    }

    pub fn remove_block(&self, id: BlockId) -> Result<ResidualNet> {
        self.remove_block_with_cap(id, StageCap::default())
    }

    /// Copy of the net with block `id`'s residual branch forced to zero
    /// (`W2 = 0`, `b2 = 0`), which makes it an identity.
    pub fn with_zeroed_branch(&self, id: BlockId) -> Result<ResidualNet> {
        let mut out = self.clone();
        let b = out.block_mut(id).ok_or(Error::NotCandidate {
            stage: id.stage,
            position: id.position,
            reason: "no such block".into(),
        })?;
        b.project.weight.data_mut().fill(0.0);
        b.project.bias.fill(0.0);
        Ok(out)
    }

    pub fn count_flops(&self) -> FlopCount {
        let last = *self.spec.stage_widths.last().unwrap();
        let mut flops = self.stem.flops() + self.stem.out_dim();
        let mut params = self.stem.params();
        for b in self.stages.iter().flatten() {
            flops += b.flops();
            params += b.params();
        }
        for t in &self.transitions {
            flops += t.flops() + t.out_dim();
            params += t.params();
        }
        flops += last + self.classifier.flops();
        params += self.classifier.params();
        FlopCount {
            per_sample_flops: flops,
            params,
        }
    }

    /// Parameter tensors in checkpoint order: stem, every block of every
    /// stage (W1, b1, W2, b2), transitions, classifier.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.stem.weight.data(), &self.stem.bias];
        for b in self.stages.iter().flatten() {
            out.extend([
                b.expand.weight.data(),
                &b.expand.bias[..],
                b.project.weight.data(),
                &b.project.bias[..],
            ]);
        }
        for t in &self.transitions {
            out.extend([t.weight.data(), &t.bias[..]]);
        }
        out.extend([self.classifier.weight.data(), &self.classifier.bias[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.stem.weight.data_mut(), &mut self.stem.bias];
        for b in self.stages.iter_mut().flatten() {
            out.push(b.expand.weight.data_mut());
            out.push(&mut b.expand.bias);
            out.push(b.project.weight.data_mut());
            out.push(&mut b.project.bias);
        }
        for t in &mut self.transitions {
            out.push(t.weight.data_mut());
            out.push(&mut t.bias);
        }
        out.push(self.classifier.weight.data_mut());
        out.push(&mut self.classifier.bias);
        out
    }

    /// Same architecture with every parameter set to zero; used as the
    /// gradient and momentum buffer.
    pub fn zeros_like(&self) -> ResidualNet {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Hidden widths of every surviving block, per stage.
    pub fn hidden_widths(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|s| s.iter().map(Block::hidden).collect())
            .collect()
    }
}
