//! Stage orchestration: configuration, in-memory stage functions, and the
//! on-disk artifact layout shared by the command line and the tests.
//!
//! Every stage reads its inputs from and writes its outputs to one run
//! directory:
//!
//! ```text
//! cohort.jsonl                      simulate
//! train.jsonl test.jsonl preprocessor.ckpt
//!                                   ingest
//! state-<variant>.ckpt state-<variant>.tsv
//!                                   train-state
//! behavior-<variant>.ckpt behavior-<variant>.tsv
//!                                   train-behavior
//! policy-<variant>.ckpt policy-<variant>.tsv checkpoints/
//!                                   train-policy
//! ope_report.tsv ope_plot.csv true_values.tsv
//!                                   evaluate
//! scores.tsv score_points.tsv       score (reads a study log and baseline file)
//! <stage>.config.toml               every stage
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{train_behavior_cvae, BehaviorConfig, BehaviorCvae, BehaviorTrainLog, BeliefAction};
use crate::checkpoint::Checkpoint;
use crate::cohort::{export_jsonl, ingest_cohort, split_cohort, Cohort, Format, Preprocessor, ProcessedAdmission};
use crate::error::{Error, Result};
use crate::ope::{evaluate_all, CriticRegressor, OpeConfig, OpeReport, OpeTrajectory, OpeVariant, ValueRegressor};
use crate::policy::{build_traces, train_policy, BeliefModels, LearnedPolicy, PolicyConfig, PolicyTrainLog, PolicyValueNet, Trace};
use crate::sim::{ScriptedClinician, SimConfig, Simulator, ValueEstimate};
use crate::shadow_metrics::ScoreTable;
use crate::state_repr::{train_state_representation, StateConfig, StateModel, StateTrainLog};
use crate::study::{design_study, point_scores_tsv, read_log, score_study, BaselineActions, PomdpRecommender, StudyConfig, StudyDesign};

/// Log-uniform ranges for tuning trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub lr: [f64; 2],
    pub rms_eps: [f64; 2],
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            lr: [1e-5, 5e-4],
            rms_eps: [1e-5, 1e-1],
        }
    }
}

impl TuningConfig {
    /// `(lr, rms_eps)` for trial `trial`, log-uniform in both ranges.
    pub fn sample(&self, seed: u64, trial: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let mut draw = |[lo, hi]: [f64; 2]| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
        (draw(self.lr), draw(self.rms_eps))
    }

    fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("lr", self.lr), ("rms_eps", self.rms_eps)] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!("tuning.{name} must be a positive increasing range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Monte-Carlo rollouts per policy in the simulator; 0 skips them.
    pub rollouts: usize,
    /// Seed of the rollout streams, shared by every policy.
    pub rollout_seed: u64,
    pub critic_epochs: usize,
    pub critic_batch: usize,
    pub critic_lr: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            rollouts: 1000,
            rollout_seed: 9001,
            critic_epochs: 3,
            critic_batch: 64,
            critic_lr: 5e-4,
        }
    }
}

/// The whole run. Unknown keys are rejected; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Admissions produced by `simulate`.
    pub n_admissions: usize,
    /// Admissions held out by `ingest`.
    pub n_test: usize,
    /// Train the two ablations next to the full model.
    pub ablations: bool,
    pub sim: SimConfig,
    pub state: StateConfig,
    pub behavior: BehaviorConfig,
    pub policy: PolicyConfig,
    pub ope: OpeConfig,
    pub evaluation: EvaluationConfig,
    pub tuning: TuningConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_admissions: 2000,
            n_test: 200,
            ablations: true,
            sim: SimConfig::default(),
            state: StateConfig::default(),
            behavior: BehaviorConfig::default(),
            policy: PolicyConfig::default(),
            ope: OpeConfig::default(),
            evaluation: EvaluationConfig::default(),
            tuning: TuningConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate().map_err(Error::Config)?;
        self.policy.validate()?;
        self.tuning.validate()?;
        if !(0.0..=1.0).contains(&self.ope.lambda) {
            return Err(Error::Config("ope.lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Replaces every learning rate and RMSProp ε with the draw for `trial`.
    pub fn apply_trial(&mut self, seed: u64, trial: u64) {
        let (lr, eps) = self.tuning.sample(seed, trial);
        self.state.lr = lr;
        self.state.rms_eps = eps;
        self.behavior.lr = lr;
        self.behavior.rms_eps = eps;
        self.policy.lr = lr;
        self.policy.rms_eps = eps;
    }

    pub fn variants(&self) -> Vec<Variant> {
        if self.ablations {
            Variant::ALL.to_vec()
        } else {
            vec![Variant::Full]
        }
    }
}

/// A trained model and its ablations. Each differs from `Full` in one
/// element only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Full,
    /// The history encoder keeps its random initialization.
    NoCvaePretrain,
    /// Critic targets come from the critic itself (`E = 0`).
    NoTreeSearch,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCvaePretrain, Variant::NoTreeSearch];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCvaePretrain => "no-cvae-pretrain",
            Variant::NoTreeSearch => "no-tree-search",
        }
    }

    /// Variant whose state and behavior models this one uses.
    pub fn state_variant(self) -> Variant {
        match self {
            Variant::NoCvaePretrain => Variant::NoCvaePretrain,
            _ => Variant::Full,
        }
    }

    pub fn state_config(self, base: &StateConfig) -> StateConfig {
        StateConfig {
            train_encoder: self != Variant::NoCvaePretrain && base.train_encoder,
            ..base.clone()
        }
    }

    pub fn policy_config(self, base: &PolicyConfig) -> PolicyConfig {
        let mut c = base.clone();
        if self == Variant::NoTreeSearch {
            c.search.expansions = 0;
        }
        c
    }
}

/// Name of the clinician policy in reports.
pub const BEHAVIOR: &str = "behavior";

// ---------------------------------------------------------------------------
// In-memory stages
// ---------------------------------------------------------------------------

pub fn simulate(config: &RunConfig, n: usize, seed: u64) -> Result<Cohort> {
    let sim = Simulator::new(config.sim.clone()).map_err(Error::Config)?;
    let mut clinician = ScriptedClinician::new(config.sim.clinician.clone());
    Ok(sim.simulate_cohort(&mut clinician, n, seed))
}

/// Train/test split plus the preprocessor fitted on the training half.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Cohort,
    pub test: Cohort,
    pub preprocessor: Preprocessor,
}

pub fn prepare(cohort: &Cohort, n_test: usize, seed: u64) -> Result<Prepared> {
    cohort.validate()?;
    let (train, test) = split_cohort(cohort, n_test, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let preprocessor = Preprocessor::fit(&train)?;
    Ok(Prepared {
        train,
        test,
        preprocessor,
    })
}

pub fn fit_state(
    train: &[ProcessedAdmission],
    pre: &Preprocessor,
    base: &StateConfig,
    variant: Variant,
    seed: u64,
) -> Result<(StateModel, StateTrainLog)> {
    Ok(train_state_representation(
        train,
        pre.n_continuous,
        pre.n_binary,
        variant.state_config(base),
        seed,
    )?)
}

/// `(belief, action)` pairs of every training step under `state`.
pub fn belief_actions(state: &StateModel, train: &[ProcessedAdmission]) -> Vec<BeliefAction> {
    train
        .iter()
        .flat_map(|a| {
            state
                .encoder
                .encode(a)
                .into_iter()
                .zip(a.actions.iter().copied())
                .map(|(belief, action)| BeliefAction { belief, action })
        })
        .collect()
}

pub fn fit_behavior(
    state: &StateModel,
    train: &[ProcessedAdmission],
    config: &BehaviorConfig,
    seed: u64,
) -> Result<(BehaviorCvae, BehaviorTrainLog)> {
    Ok(train_behavior_cvae(&belief_actions(state, train), config.clone(), seed)?)
}

pub fn policy_traces(
    state: &StateModel,
    behavior: &BehaviorCvae,
    train: &[ProcessedAdmission],
    config: &BehaviorConfig,
    seed: u64,
) -> Vec<Trace> {
    build_traces(train, &state.encoder, behavior, config.k_z, seed)
}

pub fn fit_policy(
    traces: &[Trace],
    state: &StateModel,
    base: &PolicyConfig,
    variant: Variant,
    seed: u64,
    on_checkpoint: impl FnMut(usize, &PolicyValueNet) -> std::result::Result<(), crate::error::TrainError>,
) -> Result<(PolicyValueNet, PolicyTrainLog)> {
    let models = BeliefModels {
        encoder: &state.encoder,
        cvae: &state.cvae,
    };
    Ok(train_policy(traces, models, &variant.policy_config(base), seed, on_checkpoint)?)
}

/// Monte-Carlo value of the scripted clinicians.
pub fn behavior_true_value(config: &RunConfig) -> Result<ValueEstimate> {
    let sim = Simulator::new(config.sim.clone()).map_err(Error::Config)?;
    let mut clinician = ScriptedClinician::new(config.sim.clinician.clone());
    Ok(sim.true_policy_value(
        &mut clinician,
        config.evaluation.rollouts.max(1),
        config.sim.gamma,
        config.evaluation.rollout_seed,
    ))
}

/// Monte-Carlo value of a learned policy on the same rollout streams as
/// [`behavior_true_value`].
pub fn learned_true_value(config: &RunConfig, pre: &Preprocessor, state: &StateModel, net: &PolicyValueNet) -> Result<ValueEstimate> {
    let sim = Simulator::new(config.sim.clone()).map_err(Error::Config)?;
    let mut policy = LearnedPolicy::new(pre, &state.encoder, net);
    Ok(sim.true_policy_value(
        &mut policy,
        config.evaluation.rollouts.max(1),
        config.sim.gamma,
        config.evaluation.rollout_seed,
    ))
}

/// Test trajectories of `net` with `π_b` taken from `behavior_density`.
pub fn ope_trajectories(
    state: &StateModel,
    net: Option<&PolicyValueNet>,
    test: &[ProcessedAdmission],
    behavior_density: &[Vec<f64>],
) -> Vec<OpeTrajectory> {
    test.iter()
        .zip(behavior_density)
        .map(|(a, dens)| {
            let states = state.encoder.encode(a);
            let log_ratios = match net {
                Some(net) => states
                    .iter()
                    .zip(&a.actions)
                    .zip(dens)
                    .map(|((s, act), d)| net.evaluate(s).log_prob(*act) - d.ln())
                    .collect(),
                None => vec![0.0; a.len()],
            };
            OpeTrajectory {
                states,
                rewards: a.rewards.clone(),
                log_ratios,
            }
        })
        .collect()
}

/// Everything `evaluate` needs for one learned variant.
pub struct TrainedVariant<'a> {
    pub variant: Variant,
    pub state: &'a StateModel,
    pub net: &'a PolicyValueNet,
}

/// OPE report over the behavior policy and every trained variant. All
/// variants share `π_b` estimated by the full model's behavior network.
pub fn evaluate_ope(
    config: &RunConfig,
    test: &[ProcessedAdmission],
    full_state: &StateModel,
    full_behavior: &BehaviorCvae,
    trained: &[TrainedVariant],
    seed: u64,
) -> Result<OpeReport> {
    let dens: Vec<Vec<f64>> = build_traces(test, &full_state.encoder, full_behavior, config.behavior.k_z, seed ^ 0x0be)
        .into_iter()
        .map(|t| t.behavior_density)
        .collect();
    let mut variants = vec![OpeVariant {
        name: BEHAVIOR.into(),
        trajectories: ope_trajectories(full_state, None, test, &dens),
    }];
    for t in trained {
        variants.push(OpeVariant {
            name: t.variant.name().into(),
            trajectories: ope_trajectories(t.state, Some(t.net), test, &dens),
        });
    }
    let ev = config.evaluation;
    let policy = &config.policy;
    let mut k = 0u64;
    Ok(evaluate_all(&variants, &config.ope, seed, |v| {
        k += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ k);
        let dim = v.trajectories[0].states[0].len();
        let net = PolicyValueNet::new(dim, policy.hidden, policy.log_std_bounds, &mut rng);
        Box::new(CriticRegressor::new(net, ev.critic_epochs, ev.critic_batch, ev.critic_lr, rng.random())) as Box<dyn ValueRegressor>
    })?)
}

/// Monte-Carlo values of the behavior policy and each variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueValues {
    pub rows: Vec<(String, ValueEstimate)>,
}

impl TrueValues {
    pub fn get(&self, name: &str) -> Option<&ValueEstimate> {
        self.rows.iter().find(|r| r.0 == name).map(|r| &r.1)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("policy\tmean\tstd_error\tsurvival_rate\tn\n");
        for (name, v) in &self.rows {
            out.push_str(&format!("{name}\t{}\t{}\t{}\t{}\n", v.mean, v.std_error, v.survival_rate, v.n));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// On-disk stages
// ---------------------------------------------------------------------------

/// Names of the files in a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn cohort(&self) -> PathBuf {
        self.path("cohort.jsonl")
    }

    pub fn train(&self) -> PathBuf {
        self.path("train.jsonl")
    }

    pub fn test(&self) -> PathBuf {
        self.path("test.jsonl")
    }

    pub fn preprocessor(&self) -> PathBuf {
        self.path("preprocessor.ckpt")
    }

    pub fn state(&self, v: Variant) -> PathBuf {
        self.path(&format!("state-{}.ckpt", v.name()))
    }

    pub fn behavior(&self, v: Variant) -> PathBuf {
        self.path(&format!("behavior-{}.ckpt", v.name()))
    }

    pub fn policy(&self, v: Variant) -> PathBuf {
        self.path(&format!("policy-{}.ckpt", v.name()))
    }

    pub fn config_echo(&self, stage: &str) -> PathBuf {
        self.path(&format!("{stage}.config.toml"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_cohort(path: &Path, cohort: &Cohort) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    export_jsonl(cohort, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_cohort(path: &Path) -> Result<Cohort> {
    if !path.exists() {
        return Err(Error::Config(format!("missing input {}", path.display())));
    }
    Ok(ingest_cohort(path, Some(Format::Jsonl))?)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("missing checkpoint {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Writes the fully resolved configuration of `stage` with its seed.
pub fn echo_config(layout: &Layout, stage: &str, config: &RunConfig, seed: u64) -> Result<()> {
    let text = format!("# stage = \"{stage}\"\n# seed = {seed}\n{}", config.to_toml());
    write_text(&layout.config_echo(stage), &text)
}

pub fn run_simulate(config: &RunConfig, seed: u64, layout: &Layout) -> Result<Cohort> {
    echo_config(layout, "simulate", config, seed)?;
    let cohort = simulate(config, config.n_admissions, seed)?;
    write_cohort(&layout.cohort(), &cohort)?;
    Ok(cohort)
}

/// Reads a cohort file in any supported format, splits it, and fits the
/// preprocessor on the training half.
pub fn run_ingest(config: &RunConfig, seed: u64, input: Option<&Path>, layout: &Layout) -> Result<Prepared> {
    echo_config(layout, "ingest", config, seed)?;
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| layout.cohort());
    if !input.exists() {
        return Err(Error::Config(format!("missing input {}", input.display())));
    }
    let cohort = ingest_cohort(&input, None)?;
    let prepared = prepare(&cohort, config.n_test, seed)?;
    write_cohort(&layout.train(), &prepared.train)?;
    write_cohort(&layout.test(), &prepared.test)?;
    prepared.preprocessor.to_checkpoint().save(layout.preprocessor())?;
    Ok(prepared)
}

fn load_processed(layout: &Layout, path: &Path) -> Result<(Preprocessor, Vec<ProcessedAdmission>)> {
    let pre = Preprocessor::from_checkpoint(&load_ckpt(&layout.preprocessor())?)?;
    let cohort = read_cohort(path)?;
    let processed = pre.process_cohort(&cohort);
    Ok((pre, processed))
}

fn state_variants(config: &RunConfig) -> Vec<Variant> {
    let mut v: Vec<Variant> = config.variants().iter().map(|v| v.state_variant()).collect();
    v.dedup();
    v
}

fn state_log_tsv(log: &StateTrainLog) -> String {
    let mut out = format!("epoch\ttrain\theldout\n-\t-\t{}\n", log.initial_heldout);
    for e in &log.epochs {
        out.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train, e.heldout));
    }
    out
}

fn behavior_log_tsv(log: &BehaviorTrainLog) -> String {
    let mut out = format!("epoch\ttrain\theldout\n-\t-\t{}\n", log.initial_heldout);
    for (i, (t, h)) in log.train.iter().zip(&log.heldout).enumerate() {
        out.push_str(&format!("{i}\t{t}\t{h}\n"));
    }
    out
}

pub fn run_train_state(config: &RunConfig, seed: u64, layout: &Layout) -> Result<()> {
    echo_config(layout, "train-state", config, seed)?;
    let (pre, train) = load_processed(layout, &layout.train())?;
    for v in state_variants(config) {
        let (model, log) = fit_state(&train, &pre, &config.state, v, seed)?;
        model.to_checkpoint().save(layout.state(v))?;
        write_text(&layout.path(&format!("state-{}.tsv", v.name())), &state_log_tsv(&log))?;
    }
    Ok(())
}

pub fn run_train_behavior(config: &RunConfig, seed: u64, layout: &Layout) -> Result<()> {
    echo_config(layout, "train-behavior", config, seed)?;
    let (_, train) = load_processed(layout, &layout.train())?;
    for v in state_variants(config) {
        let state = StateModel::from_checkpoint(&load_ckpt(&layout.state(v))?)?;
        let (model, log) = fit_behavior(&state, &train, &config.behavior, seed)?;
        model.to_checkpoint().save(layout.behavior(v))?;
        write_text(&layout.path(&format!("behavior-{}.tsv", v.name())), &behavior_log_tsv(&log))?;
    }
    Ok(())
}

pub fn run_train_policy(config: &RunConfig, seed: u64, layout: &Layout) -> Result<()> {
    echo_config(layout, "train-policy", config, seed)?;
    let (_, train) = load_processed(layout, &layout.train())?;
    for v in config.variants() {
        let sv = v.state_variant();
        let state = StateModel::from_checkpoint(&load_ckpt(&layout.state(sv))?)?;
        let behavior = BehaviorCvae::from_checkpoint(&load_ckpt(&layout.behavior(sv))?)?;
        let traces = policy_traces(&state, &behavior, &train, &config.behavior, seed);
        let ck_dir = layout.path("checkpoints");
        let (net, log) = fit_policy(&traces, &state, &config.policy, v, seed, |it, net| {
            fs::create_dir_all(&ck_dir).map_err(|e| crate::error::TrainError::Hyper(e.to_string()))?;
            net.to_checkpoint()
                .save(ck_dir.join(format!("policy-{}-{it:06}.ckpt", v.name())))
                .map_err(|e| crate::error::TrainError::Hyper(e.to_string()))
        })?;
        net.to_checkpoint().save(layout.policy(v))?;
        write_text(&layout.path(&format!("policy-{}.tsv", v.name())), &log.to_tsv())?;
    }
    Ok(())
}

/// Everything produced by `evaluate`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ope: OpeReport,
    pub true_values: Option<TrueValues>,
}

pub fn run_evaluate(config: &RunConfig, seed: u64, layout: &Layout) -> Result<Evaluation> {
    echo_config(layout, "evaluate", config, seed)?;
    let (pre, test) = load_processed(layout, &layout.test())?;
    let mut states = Vec::new();
    for v in state_variants(config) {
        states.push((v, StateModel::from_checkpoint(&load_ckpt(&layout.state(v))?)?));
    }
    let state_of = |v: Variant| &states.iter().find(|s| s.0 == v.state_variant()).expect("loaded above").1;
    let full_behavior = BehaviorCvae::from_checkpoint(&load_ckpt(&layout.behavior(Variant::Full))?)?;
    let mut nets = Vec::new();
    for v in config.variants() {
        nets.push((v, PolicyValueNet::from_checkpoint(&load_ckpt(&layout.policy(v))?)?));
    }
    let trained: Vec<TrainedVariant> = nets
        .iter()
        .map(|(v, net)| TrainedVariant {
            variant: *v,
            state: state_of(*v),
            net,
        })
        .collect();
    let ope = evaluate_ope(config, &test, state_of(Variant::Full), &full_behavior, &trained, seed)?;
    write_text(&layout.path("ope_report.tsv"), &ope.to_tsv())?;
    write_text(&layout.path("ope_plot.csv"), &ope.plot_data())?;

    let true_values = if config.evaluation.rollouts > 0 {
        let mut rows = vec![(BEHAVIOR.to_string(), behavior_true_value(config)?)];
        for t in &trained {
            rows.push((t.variant.name().to_string(), learned_true_value(config, &pre, t.state, t.net)?));
        }
        let tv = TrueValues { rows };
        write_text(&layout.path("true_values.tsv"), &tv.to_tsv())?;
        Some(tv)
    } else {
        None
    };
    Ok(Evaluation { ope, true_values })
}

/// The full model as a dose recommender for study points.
pub fn load_recommender(layout: &Layout) -> Result<PomdpRecommender> {
    load_recommender_with(layout, &layout.policy(Variant::Full))
}

/// As [`load_recommender`] with the policy taken from `policy`.
pub fn load_recommender_with(layout: &Layout, policy: &Path) -> Result<PomdpRecommender> {
    Ok(PomdpRecommender {
        preprocessor: Preprocessor::from_checkpoint(&load_ckpt(&layout.preprocessor())?)?,
        state: StateModel::from_checkpoint(&load_ckpt(&layout.state(Variant::Full))?)?,
        net: PolicyValueNet::from_checkpoint(&load_ckpt(policy)?)?,
    })
}

/// Study design over the held-out admissions of a run.
pub fn load_study_design(config: &RunConfig, layout: &Layout) -> Result<StudyDesign> {
    design_study(&read_cohort(&layout.test())?, &config.study)
}

/// Scores the study in `log` against the recorded doses, the baseline
/// file, and the full model.
pub fn run_score(config: &RunConfig, seed: u64, layout: &Layout, log: &Path, baseline: &Path) -> Result<ScoreTable> {
    echo_config(layout, "score", config, seed)?;
    let design = load_study_design(config, layout)?;
    let entries = read_log(std::io::BufReader::new(fs::File::open(log)?))?;
    let baseline = BaselineActions::from_csv(fs::File::open(baseline)?)?;
    let rec = load_recommender(layout)?;
    let table = score_study(&design, &entries, &baseline, &|a, t| rec.action(a, t), config.study.joint)?;
    write_text(&layout.path("scores.tsv"), &table.to_tsv())?;
    write_text(&layout.path("score_points.tsv"), &point_scores_tsv(&table))?;
    Ok(table)
}

/// Runs `simulate` through `evaluate` in order.
pub fn run_all(config: &RunConfig, seed: u64, layout: &Layout) -> Result<Evaluation> {
    run_simulate(config, seed, layout)?;
    run_ingest(config, seed, None, layout)?;
    run_train_state(config, seed, layout)?;
    run_train_behavior(config, seed, layout)?;
    run_train_policy(config, seed, layout)?;
    run_evaluate(config, seed, layout)
}
