//! Unimodal prompting: per-class learnable prompts are encoded into class
//! representations, instances are scored against them, and TopK pooling of
//! the scores yields per-interval hazards.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{top_indices, Graph, Var};
use crate::cohort::{Bag, Cohort, Modality, Patient};
use crate::encoders::{
    adapt, adapter_param_names, embed_tokens, encode, init_adapter, tokenize_text, EncoderConfig,
    TokenSequence, TOKEN_STD,
};
use crate::error::{Error, Result};
use crate::params::{gaussian, Adam, AdamConfig, ParamStore};
use crate::survival::HazardVector;

/// Class names for four intervals: dead classes first, then alive.
pub const CLASS_NAMES: [&str; 8] = [
    "high risk, dead",
    "mid-high risk, dead",
    "mid-low risk, dead",
    "low risk, dead",
    "short observation, alive",
    "mid-short observation, alive",
    "mid-long observation, alive",
    "long observation, alive",
];

pub const PATHOLOGY_PREFIX: &str =
    "This is a pathology slide image from the patient with overall survival of";
pub const GENOMICS_PREFIX: &str =
    "These are gene expression profiles from the patient with overall survival of";

pub fn prefix_text(modality: Modality) -> &'static str {
    match modality {
        Modality::Pathology => PATHOLOGY_PREFIX,
        Modality::Genomics => GENOMICS_PREFIX,
    }
}

/// Names of the `2·I_t` classes. Four intervals use [`CLASS_NAMES`]; other
/// counts fall back to numbered bands.
pub fn class_names(n_intervals: usize) -> Vec<String> {
    if n_intervals == 4 {
        return CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    }
    (1..=n_intervals)
        .map(|j| format!("risk band {j}, dead"))
        .chain((1..=n_intervals).map(|j| format!("observation band {j}, alive")))
        .collect()
}

/// Token layout of one modality's prompts. The learned context rows and the
/// frozen prefix/class-name embeddings live in a [`ParamStore`] under
/// `unipro.{p|g}.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub modality: Modality,
    pub n_intervals: usize,
    pub context_len: usize,
    pub prefix_ids: Vec<u32>,
    pub classname_ids: Vec<Vec<u32>>,
}

impl PromptTemplate {
    pub fn new(modality: Modality, n_intervals: usize, context_len: usize, vocab_size: usize) -> Self {
        Self {
            modality,
            n_intervals,
            context_len,
            prefix_ids: tokenize_text(prefix_text(modality), vocab_size),
            classname_ids: class_names(n_intervals)
                .iter()
                .map(|n| tokenize_text(n, vocab_size))
                .collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        2 * self.n_intervals
    }

    /// `1 + k + m + s` for the given 1-based class.
    pub fn assembled_len(&self, class_id: usize) -> usize {
        1 + self.context_len + self.prefix_ids.len() + self.classname_ids[class_id - 1].len()
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id == 0 || class_id > self.n_classes() {
            return Err(Error::ClassId {
                class_id,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    pub fn context_name(&self, class_id: usize) -> String {
        format!("unipro.{}.context.{class_id}", self.modality.tag())
    }

    pub fn prefix_name(&self) -> String {
        format!("unipro.{}.prefix", self.modality.tag())
    }

    pub fn classname_name(&self, class_id: usize) -> String {
        format!("unipro.{}.classname.{class_id}", self.modality.tag())
    }

    pub fn classreps_name(&self) -> String {
        classreps_name(self.modality)
    }

    /// Learned context rows (`N(0, 0.02²)`, independent per class) and the
    /// frozen token embeddings.
    pub fn init_params(&self, model_dim: usize, seed: u64, embed_seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for class_id in 1..=self.n_classes() {
            store.insert(
                self.context_name(class_id),
                gaussian(&mut rng, self.context_len, model_dim, TOKEN_STD),
            );
        }
        store.insert(self.prefix_name(), embed_tokens(&self.prefix_ids, model_dim, embed_seed));
        for (j, ids) in self.classname_ids.iter().enumerate() {
            store.insert(self.classname_name(j + 1), embed_tokens(ids, model_dim, embed_seed));
        }
        store
    }

    /// `[CLS] ‖ context(j) ‖ prefix ‖ classname(j)` as graph rows.
    pub fn assemble_graph(
        &self,
        g: &mut Graph,
        prompt: &ParamStore,
        encoder: &ParamStore,
        class_id: usize,
        train_context: bool,
    ) -> Result<Var> {
        self.check_class(class_id)?;
        let cls = encoder.bind(g, "encoder.cls", false);
        let ctx = prompt.bind(g, &self.context_name(class_id), train_context);
        let prefix = prompt.bind(g, &self.prefix_name(), false);
        let name = prompt.bind(g, &self.classname_name(class_id), false);
        Ok(g.concat_rows(&[cls, ctx, prefix, name]))
    }
}

pub fn classreps_name(modality: Modality) -> String {
    format!("unipro.{}.classreps", modality.tag())
}

/// Assembled input sequence of one class prompt.
pub fn assemble_prompt(
    template: &PromptTemplate,
    prompt: &ParamStore,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    class_id: usize,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let rows = template.assemble_graph(&mut g, prompt, encoder, class_id, false)?;
    let len = g.shape(rows).0;
    if len > enc_cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: enc_cfg.max_seq_len,
        });
    }
    Ok(TokenSequence::unmasked(g.value(rows).clone()))
}

/// One representation row per class (`2·I_t × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRepresentationSet {
    reps: Array2<f64>,
    frozen: bool,
}

impl ClassRepresentationSet {
    pub fn new(reps: Array2<f64>) -> Result<Self> {
        if reps.nrows() < 2 || reps.nrows() % 2 != 0 || reps.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("class representations", "2·I_t finite rows", reps.dim()));
        }
        Ok(Self { reps, frozen: false })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn reps(&self) -> &Array2<f64> {
        &self.reps
    }

    pub fn n_classes(&self) -> usize {
        self.reps.nrows()
    }

    pub fn n_intervals(&self) -> usize {
        self.reps.nrows() / 2
    }

    pub fn dim(&self) -> usize {
        self.reps.ncols()
    }

    /// Row of a 1-based class id.
    pub fn rep(&self, class_id: usize) -> ndarray::ArrayView1<'_, f64> {
        self.reps.row(class_id - 1)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            reps: &self.reps * c,
            frozen: self.frozen,
        }
    }
}

/// Encodes every class prompt and stacks the CLS outputs.
pub fn class_representations_graph(
    g: &mut Graph,
    template: &PromptTemplate,
    prompt: &ParamStore,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    train_context: bool,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(template.n_classes());
    for class_id in 1..=template.n_classes() {
        let input = template.assemble_graph(g, prompt, encoder, class_id, train_context)?;
        let trace = encode(g, encoder, enc_cfg, input, None, false)?;
        rows.push(trace.cls);
    }
    Ok(g.concat_rows(&rows))
}

pub fn class_representations(
    template: &PromptTemplate,
    prompt: &ParamStore,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
) -> Result<ClassRepresentationSet> {
    let mut g = Graph::new();
    let reps = class_representations_graph(&mut g, template, prompt, encoder, enc_cfg, false)?;
    ClassRepresentationSet::new(g.value(reps).clone())
}

/// Instance-by-class inner products (`M × 2·I_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn scores(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn from_scores(scores: Array2<f64>) -> Self {
        Self(scores)
    }
}

pub fn similarity_matrix(tokens: &Array2<f64>, reps: &ClassRepresentationSet) -> Result<SimilarityMatrix> {
    if tokens.ncols() != reps.dim() {
        return Err(Error::shape("similarity width", reps.dim(), tokens.ncols()));
    }
    Ok(SimilarityMatrix(tokens.dot(&reps.reps().t())))
}

/// Per class, the mean of the `min(k, M)` largest instance scores.
pub fn topk_pool(s: &SimilarityMatrix, k: usize) -> Result<Array1<f64>> {
    let scores = s.scores();
    if scores.is_empty() {
        return Err(Error::EmptyBag);
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let kk = k.min(scores.nrows());
    Ok(scores
        .axis_iter(Axis(1))
        .map(|col| {
            let idx = top_indices(col.to_vec(), kk);
            idx.iter().map(|&i| col[i]).sum::<f64>() / kk as f64
        })
        .collect())
}

/// Hazard of interval `j` is the sigmoid of the pooled score of class `(j, dead)`.
pub fn unipro_hazards(pooled: &[f64]) -> HazardVector {
    let n_intervals = pooled.len() / 2;
    HazardVector::new(pooled[..n_intervals].iter().map(|&x| crate::autograd::sigmoid(x)).collect())
        .expect("sigmoid outputs lie in [0, 1]")
}

/// Graph form of [`unipro_hazards`] for a `1 × 2·I_t` pooled row.
pub fn unipro_hazards_graph(g: &mut Graph, pooled: Var) -> Var {
    let n_intervals = g.shape(pooled).1 / 2;
    let dead = g.slice_cols(pooled, 0, n_intervals);
    g.sigmoid(dead)
}

/// Bag → adapter → similarity → TopK → hazards, all in the graph.
pub fn bag_hazards_graph(
    g: &mut Graph,
    params: &ParamStore,
    modality: Modality,
    bag: &Bag,
    reps: Var,
    pool_k: usize,
    train_adapter: bool,
) -> Result<Var> {
    let x = g.constant(bag.to_f64());
    let tokens = adapt(g, params, modality, x, train_adapter)?;
    let sims = g.matmul_t(tokens, reps);
    let pooled = g.topk_mean_cols(sims, pool_k);
    Ok(unipro_hazards_graph(g, pooled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub context_len: usize,
    pub pool_k: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Seed of the frozen token embedding streams.
    pub embed_seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            context_len: 8,
            pool_k: 8,
            epochs: 30,
            adam: AdamConfig::default(),
            seed: 0,
            embed_seed: 0x5eed,
        }
    }
}

/// Learned Stage-1 state of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub template: PromptTemplate,
    /// Context tokens, frozen embeddings and the adapter.
    pub params: ParamStore,
    /// Class representations snapshotted after training.
    pub reps: ClassRepresentationSet,
    /// Mean NLL over the training samples before the first update.
    pub initial_loss: f64,
    /// Mean NLL over the training samples after the last update.
    pub final_loss: f64,
    /// Mean per-sample loss during each epoch.
    pub epoch_losses: Vec<f64>,
}

impl Stage1Output {
    pub fn modality(&self) -> Modality {
        self.template.modality
    }

    pub fn adapter(&self) -> ParamStore {
        self.params.filter_prefix(&format!("adapter.{}.", self.modality().tag()))
    }

    /// Everything that goes into a checkpoint, including the class representations.
    pub fn to_store(&self) -> ParamStore {
        let mut store = self.params.clone();
        store.insert(self.template.classreps_name(), self.reps.reps().clone());
        store
    }

    /// Rebuilds the state from a checkpoint.
    pub fn from_store(store: &ParamStore, modality: Modality, vocab_size: usize) -> Result<Self> {
        let reps = store.require(&classreps_name(modality))?.clone();
        let n_intervals = reps.nrows() / 2;
        let probe = PromptTemplate::new(modality, n_intervals, 0, vocab_size);
        let context_len = store.require(&probe.context_name(1))?.nrows();
        let template = PromptTemplate::new(modality, n_intervals, context_len, vocab_size);
        let mut expected: Vec<String> = (1..=template.n_classes())
            .flat_map(|j| [template.context_name(j), template.classname_name(j)])
            .collect();
        expected.push(template.prefix_name());
        expected.push(template.classreps_name());
        expected.extend(adapter_param_names(modality));
        store.check_names(expected.iter().map(String::as_str), false)?;
        let mut params = ParamStore::new();
        for (k, v) in store.iter() {
            if k != template.classreps_name() {
                params.insert(k, v.clone());
            }
        }
        Ok(Self {
            template,
            params,
            reps: ClassRepresentationSet::new(reps)?.frozen(),
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
            epoch_losses: Vec::new(),
        })
    }
}

/// Fresh, untrained Stage-1 state.
pub fn init_stage1(
    modality: Modality,
    raw_width: usize,
    n_intervals: usize,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    let template = PromptTemplate::new(modality, n_intervals, cfg.context_len, enc_cfg.vocab_size);
    for class_id in 1..=template.n_classes() {
        let len = template.assembled_len(class_id);
        if len > enc_cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: enc_cfg.max_seq_len,
            });
        }
    }
    let mut params = template.init_params(enc_cfg.model_dim, cfg.seed ^ 0xc0de, cfg.embed_seed);
    params.extend(&init_adapter(modality, raw_width, enc_cfg.model_dim, cfg.seed ^ 0xada9));
    let reps = class_representations(&template, &params, encoder, enc_cfg)?.frozen();
    Ok(Stage1Output {
        template,
        params,
        reps,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        epoch_losses: Vec::new(),
    })
}

/// Per-patient Stage-1 loss with context tokens and adapter trainable.
pub fn stage1_loss_graph(
    g: &mut Graph,
    state: &Stage1Output,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    patient: &Patient,
    pool_k: usize,
) -> Result<Var> {
    let modality = state.modality();
    let bag = patient.bag(modality).ok_or(Error::NoSamples(modality.name()))?;
    let reps = class_representations_graph(g, &state.template, &state.params, encoder, enc_cfg, true)?;
    let hazards = bag_hazards_graph(g, &state.params, modality, bag, reps, pool_k, true)?;
    Ok(g.survival_nll(hazards, patient.label.interval, patient.label.censorship))
}

/// Stage-1 hazards of a bag with fixed class representations.
pub fn predict_hazards(state: &Stage1Output, bag: &Bag, pool_k: usize) -> Result<HazardVector> {
    let mut g = Graph::new();
    let reps = g.constant(state.reps.reps().clone());
    let h = bag_hazards_graph(&mut g, &state.params, state.modality(), bag, reps, pool_k, false)?;
    HazardVector::new(g.value(h).row(0).to_vec())
}

fn mean_loss(
    state: &Stage1Output,
    patients: &[&Patient],
    pool_k: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for p in patients {
        let h = predict_hazards(state, p.bag(state.modality()).expect("filtered"), pool_k)?;
        total += crate::survival::nll_loss(&h, p.label.interval, p.label.censorship)?;
    }
    Ok(total / patients.len() as f64)
}

/// Optimizes context tokens and adapter of one modality over every patient
/// that has it, with batch size one.
pub fn train_stage1(
    cohort: &Cohort,
    modality: Modality,
    encoder: &ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &Stage1Config,
) -> Result<Stage1Output> {
    let patients: Vec<&Patient> = cohort.patients().iter().filter(|p| p.has(modality)).collect();
    if patients.is_empty() {
        return Err(Error::NoSamples(modality.name()));
    }
    let mut state = init_stage1(
        modality,
        cohort.width(modality),
        cohort.n_intervals(),
        encoder,
        enc_cfg,
        cfg,
    )?;
    state.initial_loss = mean_loss(&state, &patients, cfg.pool_k)?;
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5747);
    let mut order: Vec<usize> = (0..patients.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut g = Graph::new();
            let loss = stage1_loss_graph(&mut g, &state, encoder, enc_cfg, patients[i], cfg.pool_k)?;
            total += g.scalar(loss);
            let grads = g.backward(loss);
            adam.step(&mut state.params, &g, &grads);
        }
        let mean = total / patients.len() as f64;
        log::debug!("stage1 {modality} epoch {epoch}: loss {mean:.4}");
        state.epoch_losses.push(mean);
    }
    state.reps = class_representations(&state.template, &state.params, encoder, enc_cfg)?.frozen();
    state.final_loss = mean_loss(&state, &patients, cfg.pool_k)?;
    Ok(state)
}
