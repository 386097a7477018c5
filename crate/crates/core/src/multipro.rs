//! Multimodal prompting: tokens of each available modality are scored
//! against the frozen class representations, the top-scoring ones are added
//! onto learnable placeholders, and the fused sequence is encoded. Missing
//! modalities are supervised through their placeholder outputs.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, top_indices, Graph, Var};
use crate::cohort::{Cohort, MissingMask, Modality, Patient};
use crate::encoders::{
    adapt, adapter_param_names, encode, encoder_param_names, fnv1a64, EncoderConfig, EncoderTrace,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::params::{gaussian, Adam, AdamConfig, ParamStore};
use crate::survival::{concordance_index, nll_loss, risk_score, Censorship, HazardVector};
use crate::unipro::{
    classreps_name, similarity_matrix, topk_pool, unipro_hazards, ClassRepresentationSet,
    SimilarityMatrix, Stage1Output,
};

/// How fusion tokens are chosen from each bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    /// Top tokens by uni + cross + self score.
    Scored,
    /// Uniformly random tokens.
    Random,
}

/// Class the token scores are measured against during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreClass {
    /// The patient's labelled class.
    Label,
    /// The class estimated from the tokens, as at inference.
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub k_p: usize,
    pub k_g: usize,
    pub pool_k: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub selection: Selection,
    pub score_class: ScoreClass,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            k_p: 16,
            k_g: 16,
            pool_k: 8,
            alpha1: 1.0,
            alpha2: 1.0,
            epochs: 30,
            adam: AdamConfig::default(),
            seed: 0,
            selection: Selection::Scored,
            score_class: ScoreClass::Label,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.k_p == 0 || self.k_g == 0 || self.pool_k == 0 {
            return Err(Error::Config("K_p, K_g and K must be at least 1".into()));
        }
        if 1 + self.k_p + self.k_g > enc.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: 1 + self.k_p + self.k_g,
                max: enc.max_seq_len,
            });
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Config("distillation weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn slots(&self, modality: Modality) -> usize {
        match modality {
            Modality::Pathology => self.k_p,
            Modality::Genomics => self.k_g,
        }
    }

    /// Config with the scoring and distillation switches of `variant`.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (scored, distill) = match variant {
            Variant::Baseline => (false, false),
            Variant::Distillation => (false, true),
            Variant::Scoring => (true, false),
            Variant::Full => (true, true),
        };
        self.selection = if scored { Selection::Scored } else { Selection::Random };
        if !distill {
            self.alpha1 = 0.0;
            self.alpha2 = 0.0;
        }
        self
    }
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Random selection, no distillation.
    Baseline,
    /// Random selection with distillation.
    Distillation,
    /// Scored selection without distillation.
    Scoring,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Distillation, Variant::Scoring, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Distillation => "+UD",
            Variant::Scoring => "+US",
            Variant::Full => "full",
        }
    }
}

/// Per-token scores. `total` is the exact sum of the three components.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub uni: Vec<f64>,
    pub cross: Vec<f64>,
    pub self_: Vec<f64>,
    pub total: Vec<f64>,
}

impl ScoreBreakdown {
    pub fn new(uni: Vec<f64>, cross: Vec<f64>, self_: Vec<f64>) -> Result<Self> {
        if uni.len() != cross.len() || uni.len() != self_.len() {
            return Err(Error::shape("score components", uni.len(), (cross.len(), self_.len())));
        }
        let total = uni
            .iter()
            .zip(&cross)
            .zip(&self_)
            .map(|((u, c), a)| u + c + a)
            .collect();
        Ok(Self { uni, cross, self_, total })
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

pub fn selfscore_names(modality: Modality) -> [String; 2] {
    let t = modality.tag();
    [format!("selfscore.{t}.W"), format!("selfscore.{t}.w")]
}

pub fn placeholder_name(modality: Modality) -> String {
    format!("placeholder.{}", modality.tag())
}

pub fn indicator_name(modality: Modality) -> String {
    format!("indicator.{}", modality.tag())
}

pub const CLS_HEAD_WEIGHT: &str = "clshead.weight";
pub const CLS_HEAD_BIAS: &str = "clshead.bias";

/// `W` is `D' × D` with `D' = ⌈D/2⌉`, `w` is `1 × D'`.
pub fn self_scores_graph(g: &mut Graph, tokens: Var, w_big: Var, w_small: Var) -> Var {
    let hidden = g.matmul_t(tokens, w_big);
    let hidden = g.tanh(hidden);
    let logits = g.matmul_t(hidden, w_small);
    g.sigmoid(logits)
}

/// `a_i = sigmoid(wᵀ tanh(W x_i))` per token.
pub fn self_scores(tokens: &Array2<f64>, w_big: &Array2<f64>, w_small: &Array2<f64>) -> Result<Vec<f64>> {
    if w_big.ncols() != tokens.ncols() || w_small.dim() != (1, w_big.nrows()) {
        return Err(Error::shape("self-score weights", w_big.dim(), (tokens.ncols(), w_small.dim())));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let a = g.constant(w_big.clone());
    let b = g.constant(w_small.clone());
    let out = self_scores_graph(&mut g, x, a, b);
    Ok(g.value(out).column(0).to_vec())
}

/// Sigmoid similarity of each token to class `class_id` of its own
/// modality's representations and of the other modality's.
pub fn unipro_scores(
    tokens: &Array2<f64>,
    reps_own: &ClassRepresentationSet,
    reps_other: &ClassRepresentationSet,
    class_id: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    for reps in [reps_own, reps_other] {
        if class_id == 0 || class_id > reps.n_classes() {
            return Err(Error::ClassId {
                class_id,
                n_classes: reps.n_classes(),
            });
        }
        if reps.dim() != tokens.ncols() {
            return Err(Error::shape("score width", reps.dim(), tokens.ncols()));
        }
    }
    let score = |reps: &ClassRepresentationSet| tokens.dot(&reps.rep(class_id)).mapv(sigmoid).to_vec();
    Ok((score(reps_own), score(reps_other)))
}

/// Class estimate from whatever tokens are available: each token set is
/// compared with both representation sets, the two similarity matrices are
/// added, TopK-pooled, and the pooled vectors summed over modalities.
/// Ties go to the lowest class id.
pub fn predict_tau(
    token_sets: &[&Array2<f64>],
    reps_p: &ClassRepresentationSet,
    reps_g: &ClassRepresentationSet,
    k: usize,
) -> Result<usize> {
    if token_sets.is_empty() {
        return Err(Error::NoModality);
    }
    let mut pooled = Array1::<f64>::zeros(reps_p.n_classes());
    for tokens in token_sets {
        let sp = similarity_matrix(tokens, reps_p)?;
        let sg = similarity_matrix(tokens, reps_g)?;
        let combined = SimilarityMatrix::from_scores(sp.scores() + sg.scores());
        pooled += &topk_pool(&combined, k)?;
    }
    Ok(top_indices(pooled.to_vec(), 1)[0] + 1)
}

/// Indices of the `min(k, M)` largest totals, by value then index.
pub fn select_tokens(totals: &[f64], k: usize) -> Result<Vec<usize>> {
    if totals.is_empty() {
        return Err(Error::EmptyBag);
    }
    if k == 0 {
        return Err(Error::Config("token budget must be at least 1".into()));
    }
    Ok(top_indices(totals.to_vec(), k.min(totals.len())))
}

/// Learnable fusion slots, initialized around a unit indicator per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceholderBank {
    pub pathology: Array2<f64>,
    pub genomics: Array2<f64>,
    pub indicator_p: Array1<f64>,
    pub indicator_g: Array1<f64>,
}

impl PlaceholderBank {
    pub fn init(k_p: usize, k_g: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || {
            let v = gaussian(&mut rng, 1, dim, 1.0).row(0).to_owned();
            let norm = v.dot(&v).sqrt();
            v / norm
        };
        let indicator_p = unit();
        let indicator_g = unit();
        let rows = |rng: &mut ChaCha8Rng, k: usize, ind: &Array1<f64>| {
            gaussian(rng, k, dim, 0.02) + &ind.view().insert_axis(Axis(0))
        };
        Self {
            pathology: rows(&mut rng, k_p, &indicator_p),
            genomics: rows(&mut rng, k_g, &indicator_g),
            indicator_p,
            indicator_g,
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let row = |name: String| store.require(&name).map(|v| v.row(0).to_owned());
        Ok(Self {
            pathology: store.require(&placeholder_name(Modality::Pathology))?.clone(),
            genomics: store.require(&placeholder_name(Modality::Genomics))?.clone(),
            indicator_p: row(indicator_name(Modality::Pathology))?,
            indicator_g: row(indicator_name(Modality::Genomics))?,
        })
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(placeholder_name(Modality::Pathology), self.pathology.clone());
        store.insert(placeholder_name(Modality::Genomics), self.genomics.clone());
        store.insert(indicator_name(Modality::Pathology), self.indicator_p.clone().insert_axis(Axis(0)));
        store.insert(indicator_name(Modality::Genomics), self.indicator_g.clone().insert_axis(Axis(0)));
        store
    }
}

/// Adds `selected` (`n × D`, `n ≤ K`) onto the first `n` placeholder rows.
fn fill_block(g: &mut Graph, placeholders: Var, selected: Option<Var>) -> Var {
    let Some(sel) = selected else { return placeholders };
    let k = g.shape(placeholders).0;
    let n = g.shape(sel).0;
    if n == k {
        return g.add(placeholders, sel);
    }
    let head_rows: Vec<usize> = (0..n).collect();
    let tail_rows: Vec<usize> = (n..k).collect();
    let head = g.select_rows(placeholders, &head_rows);
    let head = g.add(head, sel);
    let tail = g.select_rows(placeholders, &tail_rows);
    g.concat_rows(&[head, tail])
}

fn fusion_graph(g: &mut Graph, cls: Var, p_block: Var, p_sel: Option<Var>, g_block: Var, g_sel: Option<Var>) -> Var {
    let p = fill_block(g, p_block, p_sel);
    let gg = fill_block(g, g_block, g_sel);
    g.concat_rows(&[cls, p, gg])
}

/// `[CLS] ‖ P-block ‖ G-block`. Selected tokens are added onto the leading
/// placeholders; a missing modality contributes bare placeholders.
pub fn build_fusion_input(
    selected_p: Option<&Array2<f64>>,
    selected_g: Option<&Array2<f64>>,
    bank: &PlaceholderBank,
    cls: &Array1<f64>,
) -> Result<TokenSequence> {
    if selected_p.is_none() && selected_g.is_none() {
        return Err(Error::NoModality);
    }
    let dim = cls.len();
    for (sel, slots) in [(selected_p, &bank.pathology), (selected_g, &bank.genomics)] {
        if let Some(sel) = sel {
            if sel.ncols() != dim || sel.nrows() > slots.nrows() {
                return Err(Error::shape("selected tokens", slots.dim(), sel.dim()));
            }
        }
    }
    let mut g = Graph::new();
    let cls = g.constant(cls.clone().insert_axis(Axis(0)));
    let pb = g.constant(bank.pathology.clone());
    let gb = g.constant(bank.genomics.clone());
    let ps = selected_p.map(|s| g.constant(s.clone()));
    let gs = selected_g.map(|s| g.constant(s.clone()));
    let out = fusion_graph(&mut g, cls, pb, ps, gb, gs);
    Ok(TokenSequence::unmasked(g.value(out).clone()))
}

/// Encoder outputs split into the CLS row and the two blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub cls: Array1<f64>,
    pub pathology_out: Array2<f64>,
    pub genomics_out: Array2<f64>,
}

impl FusionOutput {
    pub fn split(outputs: &Array2<f64>, k_p: usize) -> Self {
        Self {
            cls: outputs.row(0).to_owned(),
            pathology_out: outputs.slice(s![1..1 + k_p, ..]).to_owned(),
            genomics_out: outputs.slice(s![1 + k_p.., ..]).to_owned(),
        }
    }

    pub fn block(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Pathology => &self.pathology_out,
            Modality::Genomics => &self.genomics_out,
        }
    }
}

/// Output rows of a missing modality's block treated as a bag and scored
/// against that modality's class representations.
pub fn distillation_graph(
    g: &mut Graph,
    block: Var,
    reps: &ClassRepresentationSet,
    k: usize,
    interval: usize,
    censorship: Censorship,
) -> Var {
    let reps = g.constant(reps.reps().clone());
    let sims = g.matmul_t(block, reps);
    let pooled = g.topk_mean_cols(sims, k);
    let hazards = crate::unipro::unipro_hazards_graph(g, pooled);
    g.survival_nll(hazards, interval, censorship)
}

pub fn distillation_loss(
    block: &Array2<f64>,
    reps: &ClassRepresentationSet,
    interval: usize,
    censorship: Censorship,
    k: usize,
) -> Result<f64> {
    let sims = similarity_matrix(block, reps)?;
    let pooled = topk_pool(&sims, k)?;
    nll_loss(&unipro_hazards(pooled.as_slice().expect("contiguous")), interval, censorship)
}

/// Loss components of one patient or an average over many.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub surv_cls: f64,
    pub ud_p: f64,
    pub ud_g: f64,
    pub total: f64,
}

pub fn total_loss(surv_cls: f64, ud_p: f64, ud_g: f64, alpha1: f64, alpha2: f64) -> LossReport {
    LossReport {
        surv_cls,
        ud_p,
        ud_g,
        total: surv_cls + alpha1 * ud_p + alpha2 * ud_g,
    }
}

/// Linear head on a `1 × D` CLS row followed by a per-interval sigmoid.
pub fn cls_hazards_graph(g: &mut Graph, cls: Var, weight: Var, bias: Var) -> Var {
    let logits = g.matmul_t(cls, weight);
    let logits = g.add_row(logits, bias);
    g.sigmoid(logits)
}

pub fn cls_hazards(cls: &Array1<f64>, weight: &Array2<f64>, bias: &Array2<f64>) -> Result<HazardVector> {
    if weight.ncols() != cls.len() || bias.dim() != (1, weight.nrows()) {
        return Err(Error::shape("CLS head", weight.dim(), cls.len()));
    }
    let mut g = Graph::new();
    let c = g.constant(cls.clone().insert_axis(Axis(0)));
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let h = cls_hazards_graph(&mut g, c, w, b);
    HazardVector::new(g.value(h).row(0).to_vec())
}

/// Which modalities a test patient presents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    PathologyOnly,
    GenomicsOnly,
    Complete,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::PathologyOnly, Scenario::GenomicsOnly, Scenario::Complete];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::PathologyOnly => "pathology-only",
            Scenario::GenomicsOnly => "genomics-only",
            Scenario::Complete => "complete",
        }
    }

    /// Short command-line form.
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::PathologyOnly => "p-only",
            Scenario::GenomicsOnly => "g-only",
            Scenario::Complete => "complete",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag || s.label() == tag)
    }

    /// The patient as seen under this scenario.
    pub fn view(self, patient: &Patient) -> Patient {
        match self {
            Scenario::PathologyOnly => patient.without(Modality::Genomics),
            Scenario::GenomicsOnly => patient.without(Modality::Pathology),
            Scenario::Complete => patient.clone(),
        }
    }
}

/// Graph handles of one fusion pass.
#[derive(Debug, Clone)]
pub struct FusionPass {
    pub hazards: Var,
    pub outputs: Var,
    pub trace: EncoderTrace,
    pub class_id: usize,
    pub selected_p: Option<Vec<usize>>,
    pub selected_g: Option<Vec<usize>>,
    pub scores_p: Option<ScoreBreakdown>,
    pub scores_g: Option<ScoreBreakdown>,
}

/// Graph handles of the Stage-2 objective for one patient.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub surv_cls: Var,
    pub ud_p: Option<Var>,
    pub ud_g: Option<Var>,
    pub pass: FusionPass,
}

impl LossGraph {
    pub fn report(&self, g: &Graph, cfg: &Stage2Config) -> LossReport {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
        total_loss(g.scalar(self.surv_cls), v(self.ud_p), v(self.ud_g), cfg.alpha1, cfg.alpha2)
    }
}

/// Result of missing-aware inference on one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub hazards: HazardVector,
    pub risk: f64,
    pub class_id: usize,
    pub selected_p: Option<Vec<usize>>,
    pub selected_g: Option<Vec<usize>>,
    /// Mean attention received per fusion position, averaged over layers,
    /// heads and queries (`1 + K_p + K_g` values).
    pub attention_mass: Vec<f64>,
}

/// All Stage-2 state: trainable parameters plus the frozen class representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub encoder_config: EncoderConfig,
    /// Adapters, encoder, placeholders, indicators, self-scorers and CLS head.
    pub params: ParamStore,
    pub reps_p: ClassRepresentationSet,
    pub reps_g: ClassRepresentationSet,
    pub trained: bool,
    /// Mean per-sample loss components during each epoch.
    pub epoch_losses: Vec<LossReport>,
}

impl Stage2Model {
    /// Untrained Stage-2 state on top of both Stage-1 outputs. The CLS head
    /// starts at zero and the self-score output vector at zero.
    pub fn init(
        stage1_p: &Stage1Output,
        stage1_g: &Stage1Output,
        encoder: &ParamStore,
        enc_cfg: &EncoderConfig,
        cfg: &Stage2Config,
    ) -> Result<Self> {
        cfg.validate(enc_cfg)?;
        if stage1_p.modality() != Modality::Pathology || stage1_g.modality() != Modality::Genomics {
            return Err(Error::Config("stage-1 outputs must be (pathology, genomics)".into()));
        }
        let n_intervals = stage1_p.reps.n_intervals();
        if stage1_g.reps.n_intervals() != n_intervals {
            return Err(Error::shape("class representations", stage1_p.reps.n_classes(), stage1_g.reps.n_classes()));
        }
        let dim = enc_cfg.model_dim;
        let mut params = ParamStore::new();
        params.extend(&stage1_p.adapter());
        params.extend(&stage1_g.adapter());
        params.extend(encoder);
        params.extend(&PlaceholderBank::init(cfg.k_p, cfg.k_g, dim, cfg.seed ^ 0x91ac).to_store());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e1f);
        let hidden = dim.div_ceil(2);
        for m in Modality::BOTH {
            let [w_big, w_small] = selfscore_names(m);
            params.insert(w_big, gaussian(&mut rng, hidden, dim, 1.0 / (dim as f64).sqrt()));
            params.insert(w_small, Array2::zeros((1, hidden)));
        }
        params.insert(CLS_HEAD_WEIGHT, Array2::zeros((n_intervals, dim)));
        params.insert(CLS_HEAD_BIAS, Array2::zeros((1, n_intervals)));
        Ok(Self {
            config: *cfg,
            encoder_config: *enc_cfg,
            params,
            reps_p: stage1_p.reps.clone().frozen(),
            reps_g: stage1_g.reps.clone().frozen(),
            trained: false,
            epoch_losses: Vec::new(),
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.reps_p.n_intervals()
    }

    pub fn reps(&self, modality: Modality) -> &ClassRepresentationSet {
        match modality {
            Modality::Pathology => &self.reps_p,
            Modality::Genomics => &self.reps_g,
        }
    }

    pub fn placeholders(&self) -> Result<PlaceholderBank> {
        PlaceholderBank::from_store(&self.params)
    }

    /// Every name a Stage-2 checkpoint must contain.
    pub fn param_names(enc_cfg: &EncoderConfig) -> Vec<String> {
        let mut names = encoder_param_names(enc_cfg);
        for m in Modality::BOTH {
            names.extend(adapter_param_names(m));
            names.extend(selfscore_names(m));
            names.push(placeholder_name(m));
            names.push(indicator_name(m));
            names.push(classreps_name(m));
        }
        names.push(CLS_HEAD_WEIGHT.into());
        names.push(CLS_HEAD_BIAS.into());
        names
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = self.params.clone();
        store.insert(classreps_name(Modality::Pathology), self.reps_p.reps().clone());
        store.insert(classreps_name(Modality::Genomics), self.reps_g.reps().clone());
        store
    }

    /// Rebuilds a trained model from checkpoint parameters. Names outside
    /// the Stage-2 set are rejected unless `allow_unknown`.
    pub fn from_store(
        store: &ParamStore,
        enc_cfg: &EncoderConfig,
        cfg: &Stage2Config,
        allow_unknown: bool,
    ) -> Result<Self> {
        let names = Self::param_names(enc_cfg);
        store.check_names(names.iter().map(String::as_str), allow_unknown)?;
        let mut params = ParamStore::new();
        for name in &names {
            if !name.ends_with(".classreps") {
                params.insert(name.clone(), store.require(name)?.clone());
            }
        }
        let model = Self {
            config: *cfg,
            encoder_config: *enc_cfg,
            params,
            reps_p: ClassRepresentationSet::new(store.require(&classreps_name(Modality::Pathology))?.clone())?.frozen(),
            reps_g: ClassRepresentationSet::new(store.require(&classreps_name(Modality::Genomics))?.clone())?.frozen(),
            trained: true,
            epoch_losses: Vec::new(),
        };
        let k_p = model.params.require(&placeholder_name(Modality::Pathology))?.nrows();
        let k_g = model.params.require(&placeholder_name(Modality::Genomics))?.nrows();
        if (k_p, k_g) != (cfg.k_p, cfg.k_g) {
            return Err(Error::shape("placeholder slots", (cfg.k_p, cfg.k_g), (k_p, k_g)));
        }
        Ok(model)
    }

    /// Fusion pass. `class_id` fixes the class used for scoring (training
    /// uses the ground truth); `None` estimates it from the tokens.
    /// `selection_seed` drives random selection.
    pub fn fusion_pass(
        &self,
        g: &mut Graph,
        patient: &Patient,
        class_id: Option<usize>,
        selection_seed: u64,
        train: bool,
    ) -> Result<FusionPass> {
        if !patient.has(Modality::Pathology) && !patient.has(Modality::Genomics) {
            return Err(Error::NoModality);
        }
        let cfg = &self.config;
        let train_encoder = train && self.encoder_config.trainable_encoder;
        let mut tokens: [Option<Var>; 2] = [None, None];
        for (slot, m) in Modality::BOTH.into_iter().enumerate() {
            if let Some(bag) = patient.bag(m) {
                let x = g.constant(bag.to_f64());
                tokens[slot] = Some(adapt(g, &self.params, m, x, train)?);
            }
        }
        let class_id = match class_id {
            Some(c) => c,
            None => {
                let sets: Vec<Array2<f64>> = tokens.iter().flatten().map(|&t| g.value(t).clone()).collect();
                let refs: Vec<&Array2<f64>> = sets.iter().collect();
                predict_tau(&refs, &self.reps_p, &self.reps_g, cfg.pool_k)?
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(selection_seed);
        let mut selected: [Option<Vec<usize>>; 2] = [None, None];
        let mut scores: [Option<ScoreBreakdown>; 2] = [None, None];
        let mut chosen: [Option<Var>; 2] = [None, None];
        for (slot, m) in Modality::BOTH.into_iter().enumerate() {
            let Some(x) = tokens[slot] else { continue };
            let n = g.shape(x).0;
            let budget = cfg.slots(m).min(n);
            let (idx, sel) = match cfg.selection {
                Selection::Scored => {
                    let [wb, ws] = selfscore_names(m);
                    let w_big = self.params.bind(g, &wb, train);
                    let w_small = self.params.bind(g, &ws, train);
                    let a = self_scores_graph(g, x, w_big, w_small);
                    let (uni, cross) = unipro_scores(g.value(x), self.reps(m), self.reps(m.other()), class_id)?;
                    let breakdown = ScoreBreakdown::new(uni, cross, g.value(a).column(0).to_vec())?;
                    let idx = select_tokens(&breakdown.total, budget)?;
                    scores[slot] = Some(breakdown);
                    // twice the self-score, so the gate is one at w = 0
                    let rows = g.select_rows(x, &idx);
                    let gate = g.select_rows(a, &idx);
                    let gate = g.scale(gate, 2.0);
                    (idx.clone(), g.mul_col(rows, gate))
                }
                Selection::Random => {
                    let idx = sample(&mut rng, n, budget).into_vec();
                    let rows = g.select_rows(x, &idx);
                    (idx, rows)
                }
            };
            selected[slot] = Some(idx);
            chosen[slot] = Some(sel);
        }
        let cls = self.params.bind(g, "encoder.cls", train_encoder);
        let pb = self.params.bind(g, &placeholder_name(Modality::Pathology), train);
        let gb = self.params.bind(g, &placeholder_name(Modality::Genomics), train);
        let input = fusion_graph(g, cls, pb, chosen[0], gb, chosen[1]);
        let trace = encode(g, &self.params, &self.encoder_config, input, None, train_encoder)?;
        let w = self.params.bind(g, CLS_HEAD_WEIGHT, train);
        let b = self.params.bind(g, CLS_HEAD_BIAS, train);
        let hazards = cls_hazards_graph(g, trace.cls, w, b);
        let [selected_p, selected_g] = selected;
        let [scores_p, scores_g] = scores;
        Ok(FusionPass {
            hazards,
            outputs: trace.outputs,
            trace,
            class_id,
            selected_p,
            selected_g,
            scores_p,
            scores_g,
        })
    }

    /// Stage-2 objective for one training patient, scored with its true class.
    pub fn loss_graph(&self, g: &mut Graph, patient: &Patient, selection_seed: u64) -> Result<LossGraph> {
        let cfg = &self.config;
        let label = &patient.label;
        let class_id = match cfg.score_class {
            ScoreClass::Label => Some(label.class_id),
            ScoreClass::Predicted => None,
        };
        let pass = self.fusion_pass(g, patient, class_id, selection_seed, true)?;
        let surv_cls = g.survival_nll(pass.hazards, label.interval, label.censorship);
        let mut total = surv_cls;
        let mut ud = [None, None];
        for (slot, m) in Modality::BOTH.into_iter().enumerate() {
            let alpha = if m == Modality::Pathology { cfg.alpha1 } else { cfg.alpha2 };
            if patient.has(m) || alpha == 0.0 {
                continue;
            }
            let start = if m == Modality::Pathology { 1 } else { 1 + cfg.k_p };
            let rows: Vec<usize> = (start..start + cfg.slots(m)).collect();
            let block = g.select_rows(pass.outputs, &rows);
            let term = distillation_graph(g, block, self.reps(m), cfg.pool_k, label.interval, label.censorship);
            let weighted = g.scale(term, alpha);
            total = g.add(total, weighted);
            ud[slot] = Some(term);
        }
        let [ud_p, ud_g] = ud;
        Ok(LossGraph {
            total,
            surv_cls,
            ud_p,
            ud_g,
            pass,
        })
    }

    /// Missing-aware prediction with an estimated class.
    pub fn infer(&self, patient: &Patient) -> Result<Inference> {
        let mut g = Graph::new();
        let seed = self.config.seed ^ fnv1a64(patient.id.as_bytes());
        let pass = self.fusion_pass(&mut g, patient, None, seed, false)?;
        let hazards = HazardVector::new(g.value(pass.hazards).row(0).to_vec())?;
        let risk = risk_score(&hazards);
        let attention_mass = attention_mass(&g, &pass.trace);
        Ok(Inference {
            hazards,
            risk,
            class_id: pass.class_id,
            selected_p: pass.selected_p,
            selected_g: pass.selected_g,
            attention_mass,
        })
    }

    /// Concordance of predicted risks on `cohort` viewed under `scenario`.
    pub fn evaluate(&self, cohort: &Cohort, scenario: Scenario) -> Result<f64> {
        let risks = cohort
            .patients()
            .par_iter()
            .map(|p| self.infer(&scenario.view(p)).map(|r| r.risk))
            .collect::<Result<Vec<f64>>>()?;
        let times: Vec<f64> = cohort.patients().iter().map(|p| p.label.time_months).collect();
        let cens: Vec<Censorship> = cohort.patients().iter().map(|p| p.label.censorship).collect();
        concordance_index(&risks, &times, &cens)
    }
}

/// Mean over layers, heads and query rows of the attention each key position receives.
pub fn attention_mass(g: &Graph, trace: &EncoderTrace) -> Vec<f64> {
    let mut total: Option<Array1<f64>> = None;
    let mut count = 0usize;
    for layer in &trace.attention {
        for &head in layer {
            let received = g.value(head).mean_axis(Axis(0)).expect("non-empty attention");
            total = Some(match total {
                Some(t) => t + received,
                None => received,
            });
            count += 1;
        }
    }
    (total.expect("encoder has at least one layer") / count as f64).to_vec()
}

/// Optimizes the Stage-2 objective over `cohort` after removing the masked
/// modalities. Class representations and Stage-1 context tokens stay fixed.
pub fn train_stage2(
    cohort: &Cohort,
    mask: &MissingMask,
    stage1_p: &Stage1Output,
    stage1_g: &Stage1Output,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &Stage2Config,
) -> Result<Stage2Model> {
    if cohort.is_empty() {
        return Err(Error::NoSamples("any"));
    }
    let mut model = Stage2Model::init(stage1_p, stage1_g, encoder, enc_cfg, cfg)?;
    let masked = cohort.apply_mask(mask);
    let patients = masked.patients();
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a9e2);
    let mut order: Vec<usize> = (0..patients.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        for &i in &order {
            let mut g = Graph::new();
            let lg = model.loss_graph(&mut g, &patients[i], rng.random())?;
            let r = lg.report(&g, cfg);
            sum.surv_cls += r.surv_cls;
            sum.ud_p += r.ud_p;
            sum.ud_g += r.ud_g;
            sum.total += g.scalar(lg.total);
            let grads = g.backward(lg.total);
            adam.step(&mut model.params, &g, &grads);
        }
        let n = patients.len() as f64;
        let mean = LossReport {
            surv_cls: sum.surv_cls / n,
            ud_p: sum.ud_p / n,
            ud_g: sum.ud_g / n,
            total: sum.total / n,
        };
        log::debug!("stage2 epoch {epoch}: loss {:.4}", mean.total);
        model.epoch_losses.push(mean);
    }
    model.trained = true;
    Ok(model)
}
