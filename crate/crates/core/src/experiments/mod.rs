//! Named, configured experiment pipelines and their reports.

mod report;
mod scenario;

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    multistart_analysis, rgia_attack, start_seed, AttackConfig, AttackProblem, PriorSize,
    ReconstructionResult, RegWeights, StatePrior, TransitionModel,
};
use crate::defenses::{DefenseKind, DefenseSpec};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::frlcore::{evaluate_greedy, mix, run_federation, FederationConfig, TrainingLog};

pub use report::{
    emit_report, parse_report_csv, rows_to_csv, rows_to_long_csv, summarize, ArmSummary,
    EmitOptions, ReportFiles, ReportRow, ReportSummary, Stat, ARTIFACT_VERSION, TIMING_PREFIX,
};
pub use scenario::{
    match_samples, recompute_gme, score_attack, AttackScore, Scenario, ScenarioConfig,
    REWARD_RANGE_TOL, REWARD_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentTag {
    Train,
    Attack,
    Ablate,
    Sensitivity,
    DefenseSweep,
    BatchSweep,
    Multistart,
    PriorStudy,
    TransitionStudy,
}

impl ExperimentTag {
    pub const ALL: [ExperimentTag; 9] = [
        ExperimentTag::Train,
        ExperimentTag::Attack,
        ExperimentTag::Ablate,
        ExperimentTag::Sensitivity,
        ExperimentTag::DefenseSweep,
        ExperimentTag::BatchSweep,
        ExperimentTag::Multistart,
        ExperimentTag::PriorStudy,
        ExperimentTag::TransitionStudy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentTag::Train => "train",
            ExperimentTag::Attack => "attack",
            ExperimentTag::Ablate => "ablate",
            ExperimentTag::Sensitivity => "sensitivity",
            ExperimentTag::DefenseSweep => "defense-sweep",
            ExperimentTag::BatchSweep => "batch-sweep",
            ExperimentTag::Multistart => "multistart",
            ExperimentTag::PriorStudy => "prior-study",
            ExperimentTag::TransitionStudy => "transition-study",
        }
    }

    /// Tags that compare arms and so need several seeds.
    pub fn is_sweep(&self) -> bool {
        !matches!(self, ExperimentTag::Train | ExperimentTag::Attack)
    }
}

impl std::fmt::Display for ExperimentTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attack variant by enabled regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GIA")]
    Gia,
    #[serde(rename = "GIA-SR")]
    GiaSr,
    #[serde(rename = "GIA-RC")]
    GiaRc,
    #[serde(rename = "GIA-DC")]
    GiaDc,
    #[serde(rename = "RGIA")]
    Rgia,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gia,
        Variant::GiaSr,
        Variant::GiaRc,
        Variant::GiaDc,
        Variant::Rgia,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Gia => "GIA",
            Variant::GiaSr => "GIA-SR",
            Variant::GiaRc => "GIA-RC",
            Variant::GiaDc => "GIA-DC",
            Variant::Rgia => "RGIA",
        }
    }

    /// Weights of this variant: `base` with the disabled terms zeroed.
    pub fn weights(&self, base: RegWeights) -> RegWeights {
        let (a, b, g) = match self {
            Variant::Gia => (false, false, false),
            Variant::GiaSr => (true, false, false),
            Variant::GiaRc => (false, true, false),
            Variant::GiaDc => (false, false, true),
            Variant::Rgia => (true, true, true),
        };
        let on = |keep: bool, w: f64| if keep { w } else { 0.0 };
        RegWeights {
            alpha: on(a, base.alpha),
            beta: on(b, base.beta),
            gamma_dyn: on(g, base.gamma_dyn),
            lambda: base.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Alpha,
    Beta,
    GammaDyn,
}

impl Axis {
    pub fn apply(&self, base: RegWeights, value: f64) -> RegWeights {
        let mut w = base;
        match self {
            Axis::Alpha => w.alpha = value,
            Axis::Beta => w.beta = value,
            Axis::GammaDyn => w.gamma_dyn = value,
        }
        w
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Alpha => "alpha",
            Axis::Beta => "beta",
            Axis::GammaDyn => "gamma_dyn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    #[serde(flatten)]
    pub config: AttackConfig,
    /// Random starts per packet in multi-start analyses.
    #[serde(default = "default_k")]
    pub k_starts: usize,
}

fn default_k() -> usize {
    10
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            config: AttackConfig::default(),
            k_starts: default_k(),
        }
    }
}

/// Value lists swept by the different experiments. Each experiment reads
/// only the axes it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_axis")]
    pub axis: Axis,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise: Vec<DefenseKind>,
    #[serde(default = "default_variances")]
    pub variances: Vec<f64>,
    #[serde(default = "default_bits")]
    pub bits: Vec<u8>,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_sizes")]
    pub prior_sizes: Vec<PriorSize>,
    #[serde(default = "default_sizes")]
    pub model_sizes: Vec<PriorSize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Variant>,
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_axis() -> Axis {
    Axis::Beta
}
fn default_grid() -> Vec<f64> {
    vec![0.0, 0.01, 0.1, 1.0, 10.0]
}
fn default_noise() -> Vec<DefenseKind> {
    vec![DefenseKind::Gaussian, DefenseKind::Laplace]
}
fn default_variances() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
}
fn default_bits() -> Vec<u8> {
    vec![8, 4]
}
fn default_batches() -> Vec<usize> {
    vec![1, 3, 5, 8, 10]
}
fn default_sizes() -> Vec<PriorSize> {
    [5, 30, 100, 300, 1000]
        .into_iter()
        .map(PriorSize::Count)
        .chain([PriorSize::All])
        .collect()
}
fn default_methods() -> Vec<Variant> {
    vec![Variant::Gia, Variant::Rgia]
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            variants: default_variants(),
            axis: default_axis(),
            grid: default_grid(),
            noise: default_noise(),
            variances: default_variances(),
            bits: default_bits(),
            batch_sizes: default_batches(),
            prior_sizes: default_sizes(),
            model_sizes: default_sizes(),
            methods: default_methods(),
        }
    }
}

/// One experiment run: what to run, on which environment, with which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentTag,
    pub env: EnvSpec,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub attack: AttackSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseSpec>,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
    pub seeds: Vec<u64>,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `tag` on `env`, ten seeds.
    pub fn preset(tag: ExperimentTag, env: EnvSpec) -> Self {
        let attack_batch = !matches!(tag, ExperimentTag::Train);
        let mut scenario = ScenarioConfig::default();
        if matches!(tag, ExperimentTag::Ablate | ExperimentTag::Multistart) {
            scenario.packets = 3;
        }
        ExperimentConfig {
            experiment: tag,
            env,
            federation: FederationConfig {
                local_batch_size: if attack_batch { 1 } else { 8 },
                ..Default::default()
            },
            attack: AttackSettings::default(),
            defense: None,
            scenario,
            sweep: SweepAxes::default(),
            seeds: (0..10).collect(),
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON form without the output directory.
    pub fn hash(&self) -> String {
        let canon = ExperimentConfig {
            output: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: &str| Err(Error::Config(format!("{}: {msg}", self.experiment)));
        self.env.validate().map_err(as_config)?;
        self.federation.validate().map_err(as_config)?;
        self.attack.config.validate().map_err(as_config)?;
        self.scenario.validate(&self.federation)?;
        if let Some(d) = &self.defense {
            d.validate().map_err(as_config)?;
        }
        if self.seeds.is_empty() {
            return cfg_err("seeds must not be empty");
        }
        if self.experiment.is_sweep() && self.seeds.len() < 3 {
            return cfg_err("sweeps need at least 3 seeds");
        }
        let s = &self.sweep;
        match self.experiment {
            ExperimentTag::Ablate | ExperimentTag::Multistart => {
                let list = if self.experiment == ExperimentTag::Ablate {
                    &s.variants
                } else {
                    &s.methods
                };
                if list.is_empty() {
                    return cfg_err("variant list is empty");
                }
                if self.attack.k_starts < 2 {
                    return cfg_err("multi-start analysis needs k_starts >= 2");
                }
            }
            ExperimentTag::Sensitivity => {
                if s.grid.is_empty() {
                    return cfg_err("grid is empty");
                }
                if s.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return cfg_err("grid values must be non-negative");
                }
            }
            ExperimentTag::DefenseSweep => {
                if (s.noise.is_empty() || s.variances.is_empty()) && s.bits.is_empty() {
                    return cfg_err("no defense arms");
                }
                if s.noise
                    .iter()
                    .any(|k| !matches!(k, DefenseKind::Gaussian | DefenseKind::Laplace))
                {
                    return cfg_err("noise kinds must be gaussian or laplace");
                }
                for v in &s.variances {
                    DefenseSpec::gaussian(*v, 0).validate().map_err(as_config)?;
                }
                for b in &s.bits {
                    DefenseSpec::quantize(*b).validate().map_err(as_config)?;
                }
            }
            ExperimentTag::BatchSweep => {
                if s.batch_sizes.is_empty() {
                    return cfg_err("batch list is empty");
                }
                if s.batch_sizes.iter().any(|&b| b == 0 || b > 16) {
                    return cfg_err("batch sizes must be in 1..=16");
                }
            }
            ExperimentTag::PriorStudy if s.prior_sizes.is_empty() => {
                return cfg_err("prior size list is empty")
            }
            ExperimentTag::TransitionStudy if s.model_sizes.is_empty() => {
                return cfg_err("model size list is empty")
            }
            _ => {}
        }
        Ok(())
    }

    /// The same config with seeds `seed, seed + 1, …` (as many as before).
    pub fn with_base_seed(&self, seed: u64) -> Self {
        let n = self.seeds.len() as u64;
        ExperimentConfig {
            seeds: (0..n).map(|i| seed.wrapping_add(i)).collect(),
            ..self.clone()
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Row label for a prior or model size.
pub fn size_label(size: &PriorSize) -> String {
    match size {
        PriorSize::Count(n) => format!("n{n}"),
        PriorSize::Fraction(f) => format!("frac{f}"),
        PriorSize::All => "all".into(),
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ReportRow>,
    /// Training logs by seed (train experiments).
    pub logs: Vec<(u64, TrainingLog)>,
    /// Reconstructions by seed and packet (attack experiments).
    pub reconstructions: Vec<(u64, usize, ReconstructionResult)>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    match config.experiment {
        ExperimentTag::Train => run_training(config),
        ExperimentTag::Attack => run_attack(config),
        ExperimentTag::Ablate => rows(run_ablation(config)),
        ExperimentTag::Sensitivity => rows(run_sensitivity(config)),
        ExperimentTag::DefenseSweep => rows(run_defense_sweep(config)),
        ExperimentTag::BatchSweep => rows(run_batch_sweep(config)),
        ExperimentTag::Multistart => rows(run_multistart(config)),
        ExperimentTag::PriorStudy => rows(run_prior_bias(config)),
        ExperimentTag::TransitionStudy => rows(run_transition_study(config)),
    }
}

fn rows(r: Result<Vec<ReportRow>>) -> Result<ExperimentOutput> {
    Ok(ExperimentOutput {
        rows: r?,
        ..Default::default()
    })
}

/// Runs `f` for every seed concurrently and concatenates the rows in seed order.
fn per_seed<T, F>(config: &ExperimentConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<Vec<T>> + Sync,
{
    let parts: Vec<Vec<T>> = config
        .seeds
        .par_iter()
        .map(|&s| f(s))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    hash: String,
    env_name: &'static str,
}

impl<'a> Ctx<'a> {
    fn new(config: &'a ExperimentConfig) -> Self {
        Ctx {
            config,
            hash: config.hash(),
            env_name: config.env.kind().as_str(),
        }
    }

    fn row(&self, arm: &str, seed: u64) -> ReportRow {
        ReportRow::new(
            self.config.experiment.as_str(),
            self.env_name,
            arm,
            seed,
            &self.hash,
        )
    }

    fn capture(&self, seed: u64) -> Result<Scenario> {
        let c = self.config;
        Scenario::capture(&c.env, &c.scenario, &c.federation, seed, None, None)
    }

    fn prior(&self, sc: &Scenario) -> Result<StatePrior> {
        sc.prior(self.config.scenario.prior_size)
    }

    fn model(&self, sc: &Scenario) -> Result<TransitionModel> {
        let c = self.config;
        sc.model(c.scenario.model_data, &c.scenario.model_config(&c.env))
    }

    /// Attacks every packet of `sc` once with `weights`.
    fn attack_all(
        &self,
        sc: &Scenario,
        weights: RegWeights,
        prior: Option<&StatePrior>,
        model: Option<&TransitionModel>,
    ) -> Result<Vec<(ReconstructionResult, AttackScore)>> {
        let cfg = self.config.attack.config.with_weights(weights);
        sc.packets
            .iter()
            .enumerate()
            .map(|(p, pk)| {
                let problem =
                    AttackProblem::new(&sc.env, &pk.packet, &pk.snapshot, weights, prior, model)?;
                let res = rgia_attack(&problem, &cfg, start_seed(sc.seed, p, 0))?;
                let score = score_attack(&sc.env, &pk.truth, &res)?;
                Ok((res, score))
            })
            .collect()
    }
}

fn mean_of<T>(xs: &[T], f: impl Fn(&T) -> f64) -> f64 {
    xs.iter().map(f).sum::<f64>() / xs.len() as f64
}

fn mean_scores(scores: &[AttackScore]) -> AttackScore {
    AttackScore {
        gme: mean_of(scores, |s| s.gme),
        state_mse: mean_of(scores, |s| s.state_mse),
        next_state_mse: mean_of(scores, |s| s.next_state_mse),
        ra: mean_of(scores, |s| s.ra),
        reward_error: mean_of(scores, |s| s.reward_error),
        invalid_reward: mean_of(scores, |s| s.invalid_reward),
        te: mean_of(scores, |s| s.te),
        exact: mean_of(scores, |s| s.exact),
    }
}

/// Trains the federation (with `config.defense`, if any) and evaluates the
/// final greedy policy.
pub fn run_training(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ctx = Ctx::new(config);
    let per: Vec<(ReportRow, (u64, TrainingLog))> = per_seed(config, |seed| {
        let sc = &config.scenario;
        let data = crate::envs::generate_dataset(
            &config.env,
            crate::envs::Policy::Uniform,
            sc.dataset_size,
            mix(seed, 1, 0),
        )?;
        let shards = data.split(config.federation.n_agents, mix(seed, 2, 0))?;
        let fed = FederationConfig {
            seed,
            ..config.federation.clone()
        };
        let t0 = Instant::now();
        let out = run_federation(&config.env, &fed, &shards, config.defense.as_ref(), None)?;
        let mut row = ctx.row("train", seed);
        row.set_time("train", t0.elapsed().as_secs_f64());
        if let Some(l) = out.log.final_td_loss() {
            row.set("final_td_loss", l);
        }
        if let Some(r) = out.log.final_eval_return() {
            row.set("eval_return", r);
        }
        let eval = evaluate_greedy(&config.env, &out.snapshot.online, fed.eval_episodes, seed)?;
        row.set("success_rate", eval.success_rate);
        Ok(vec![(row, (seed, out.log))])
    })?;
    let (rows, logs) = per.into_iter().unzip();
    Ok(ExperimentOutput {
        rows,
        logs,
        reconstructions: Vec::new(),
    })
}

/// Attacks the intercepted packets of each seed with `config.attack`.
pub fn run_attack(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ctx = Ctx::new(config);
    let weights = config.attack.config.weights;
    let per = per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let prior = ctx.prior(&sc)?;
        let model = if weights.gamma_dyn > 0.0 {
            Some(ctx.model(&sc)?)
        } else {
            None
        };
        let out = ctx.attack_all(&sc, weights, Some(&prior), model.as_ref())?;
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(p, (res, score))| {
                let mut row = ctx.row("attack", seed).with_trial(p);
                score.insert_into(&mut row);
                row.set("iterations", res.iterations as f64);
                row.set_time("attack", res.wall_time_secs);
                (row, (seed, p, res))
            })
            .collect())
    })?;
    let (rows, reconstructions) = per.into_iter().unzip();
    Ok(ExperimentOutput {
        rows,
        logs: Vec::new(),
        reconstructions,
    })
}

/// Multi-start consistency (ED, SS, CD) together with TE, RA and state MSE
/// per variant, one row per (variant, seed).
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let prior = ctx.prior(&sc)?;
        let model = ctx.model(&sc)?;
        config
            .sweep
            .variants
            .iter()
            .map(|v| {
                let (row_vals, _) = consistency_rows(&ctx, &sc, *v, &prior, &model)?;
                let mut row = ctx.row(v.label(), seed);
                let n = row_vals.len() as f64;
                for key in ["ed", "cd", "te", "ra", "state_mse", "gme", "exact"] {
                    row.set(
                        key,
                        row_vals
                            .iter()
                            .map(|r| r.get(key).unwrap_or(0.0))
                            .sum::<f64>()
                            / n,
                    );
                }
                let ss: Vec<f64> = row_vals.iter().filter_map(|r| r.get("ss")).collect();
                if !ss.is_empty() {
                    row.set("ss", ss.iter().sum::<f64>() / ss.len() as f64);
                }
                Ok(row)
            })
            .collect()
    })
}

/// Runs the multi-start analysis of one variant on every packet of `sc`;
/// one row per packet.
fn consistency_rows(
    ctx: &Ctx<'_>,
    sc: &Scenario,
    variant: Variant,
    prior: &StatePrior,
    model: &TransitionModel,
) -> Result<(Vec<ReportRow>, f64)> {
    let base = ctx.config.attack.config.weights;
    let weights = variant.weights(base);
    let cfg = ctx.config.attack.config.with_weights(weights);
    let problems: Vec<AttackProblem<'_>> = sc
        .packets
        .iter()
        .map(|pk| {
            AttackProblem::new(
                &sc.env,
                &pk.packet,
                &pk.snapshot,
                weights,
                Some(prior),
                Some(model),
            )
        })
        .collect::<Result<_>>()?;
    let t0 = Instant::now();
    let report = multistart_analysis(
        &problems,
        ctx.config.attack.k_starts,
        &cfg,
        variant.label(),
        sc.seed,
    )?;
    let secs = t0.elapsed().as_secs_f64();
    let mut rows = Vec::with_capacity(report.rows.len());
    for cr in &report.rows {
        let scores: Vec<AttackScore> = report
            .starts
            .iter()
            .filter(|s| s.packet_id == cr.packet_id)
            .map(|s| score_attack(&sc.env, &sc.packets[s.packet_id].truth, &s.result))
            .collect::<Result<_>>()?;
        let m = mean_scores(&scores);
        let mut row = ctx.row(variant.label(), sc.seed).with_trial(cr.packet_id);
        row.set("ed", cr.ed).set("cd", cr.cd);
        if let Some(ss) = cr.ss {
            row.set("ss", ss);
        }
        row.set("te", m.te)
            .set("ra", m.ra)
            .set("state_mse", m.state_mse)
            .set("gme", m.gme)
            .set("exact", m.exact);
        rows.push(row);
    }
    Ok((rows, secs))
}

/// Multi-start comparison of attack methods, one row per (method, seed, packet).
pub fn run_multistart(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let prior = ctx.prior(&sc)?;
        let model = ctx.model(&sc)?;
        let mut out = Vec::new();
        for m in &config.sweep.methods {
            let (mut rows, secs) = consistency_rows(&ctx, &sc, *m, &prior, &model)?;
            for r in &mut rows {
                r.set_time("multistart", secs);
            }
            out.extend(rows);
        }
        Ok(out)
    })
}

/// One regularizer weight varied over `config.sweep.grid`, the others at
/// their configured values.
pub fn run_sensitivity(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    let axis = config.sweep.axis;
    per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let prior = ctx.prior(&sc)?;
        let model = ctx.model(&sc)?;
        config
            .sweep
            .grid
            .iter()
            .map(|&v| {
                let w = axis.apply(config.attack.config.weights, v);
                let scores: Vec<AttackScore> = ctx
                    .attack_all(&sc, w, Some(&prior), Some(&model))?
                    .into_iter()
                    .map(|(_, s)| s)
                    .collect();
                let mut row = ctx.row(&format!("{}={v}", axis.name()), seed);
                mean_scores(&scores).insert_into(&mut row);
                row.set(axis.name(), v);
                Ok(row)
            })
            .collect()
    })
}

/// Defense arms, each trained end to end for the training metrics. The
/// attack metrics of every arm come from the same clean intercepted packets
/// passed through the arm's defense, so arms differ only in the defense.
pub fn run_defense_sweep(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    let s = &config.sweep;
    let mut arms: Vec<(String, DefenseSpec)> = vec![("none".into(), DefenseSpec::none())];
    for kind in &s.noise {
        for &v in &s.variances {
            let spec = DefenseSpec {
                kind: *kind,
                variance: v,
                ..DefenseSpec::none()
            };
            arms.push((format!("{}-{v:e}", kind_name(*kind)), spec));
        }
    }
    for &b in &s.bits {
        arms.push((format!("quantize-{b}bit"), DefenseSpec::quantize(b)));
    }
    let weights = config.attack.config.weights;
    let cfg = config.attack.config;
    per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let prior = ctx.prior(&sc)?;
        let model = ctx.model(&sc)?;
        let shards = sc
            .dataset
            .split(config.federation.n_agents, mix(seed, 2, 0))?;
        arms.iter()
            .map(|(label, base)| {
                let defense = DefenseSpec {
                    seed: mix(seed, 6, 0),
                    ..base.clone()
                };
                let fed = FederationConfig {
                    seed,
                    ..config.federation.clone()
                };
                let t0 = Instant::now();
                let trained = run_federation(&config.env, &fed, &shards, Some(&defense), None)?;
                let train_secs = t0.elapsed().as_secs_f64();
                let mut scores = Vec::with_capacity(sc.packets.len());
                for (p, pk) in sc.packets.iter().enumerate() {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(
                        defense.seed,
                        pk.packet.round as u64 + 1,
                        pk.packet.agent_id as u64,
                    ));
                    let sent = defense.apply(&pk.packet, &mut rng)?;
                    let problem = AttackProblem::new(
                        &sc.env,
                        &sent,
                        &pk.snapshot,
                        weights,
                        Some(&prior),
                        Some(&model),
                    )?;
                    let res = rgia_attack(&problem, &cfg, start_seed(seed, p, 0))?;
                    scores.push(score_attack(&sc.env, &pk.truth, &res)?);
                }
                let mut row = ctx.row(label, seed);
                mean_scores(&scores).insert_into(&mut row);
                row.set("variance", defense.variance);
                if defense.kind == DefenseKind::Quantize {
                    row.set("bits", defense.bits as f64);
                }
                if let Some(l) = trained.log.final_td_loss() {
                    row.set("final_td_loss", l);
                }
                if let Some(r) = trained.log.final_eval_return() {
                    row.set("eval_return", r);
                }
                row.set_time("train", train_secs);
                Ok(row)
            })
            .collect()
    })
}

fn kind_name(kind: DefenseKind) -> &'static str {
    match kind {
        DefenseKind::None => "none",
        DefenseKind::Gaussian => "gaussian",
        DefenseKind::Laplace => "laplace",
        DefenseKind::Quantize => "quantize",
    }
}

/// Attack quality and cost as the local batch grows.
pub fn run_batch_sweep(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    per_seed(config, |seed| {
        config
            .sweep
            .batch_sizes
            .iter()
            .map(|&b| {
                let fed = FederationConfig {
                    local_batch_size: b,
                    ..config.federation.clone()
                };
                let sc = Scenario::capture(&config.env, &config.scenario, &fed, seed, None, None)?;
                let prior = ctx.prior(&sc)?;
                let model = ctx.model(&sc)?;
                let out = ctx.attack_all(
                    &sc,
                    config.attack.config.weights,
                    Some(&prior),
                    Some(&model),
                )?;
                let scores: Vec<AttackScore> = out.iter().map(|(_, s)| *s).collect();
                let mut row = ctx.row(&format!("batch={b}"), seed);
                mean_scores(&scores).insert_into(&mut row);
                row.set("batch_size", b as f64);
                row.set_time(
                    "attack",
                    out.iter().map(|(r, _)| r.wall_time_secs).sum::<f64>(),
                );
                Ok(row)
            })
            .collect()
    })
}

/// State priors of different sizes, plus an arm without the state regularizer.
pub fn run_prior_bias(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    let base = config.attack.config.weights;
    per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let model = ctx.model(&sc)?;
        let mut rows = Vec::new();
        let no_prior = RegWeights { alpha: 0.0, ..base };
        let scores: Vec<AttackScore> = ctx
            .attack_all(&sc, no_prior, None, Some(&model))?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let mut row = ctx.row("no-prior", seed);
        mean_scores(&scores).insert_into(&mut row);
        rows.push(row);
        for size in &config.sweep.prior_sizes {
            let prior = sc.prior(*size)?;
            let scores: Vec<AttackScore> = ctx
                .attack_all(&sc, base, Some(&prior), Some(&model))?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            let mut row = ctx.row(&format!("prior-{}", size_label(size)), seed);
            mean_scores(&scores).insert_into(&mut row);
            row.set("prior_samples", prior.n_samples as f64);
            rows.push(row);
        }
        Ok(rows)
    })
}

/// Transition models fitted on different amounts of prior data, plus an arm
/// without the dynamics regularizer.
pub fn run_transition_study(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let ctx = Ctx::new(config);
    let base = config.attack.config.weights;
    let model_cfg = config.scenario.model_config(&config.env);
    per_seed(config, |seed| {
        let sc = ctx.capture(seed)?;
        let prior = ctx.prior(&sc)?;
        let mut rows = Vec::new();
        let no_model = RegWeights {
            gamma_dyn: 0.0,
            ..base
        };
        let scores: Vec<AttackScore> = ctx
            .attack_all(&sc, no_model, Some(&prior), None)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let mut row = ctx.row("no-model", seed);
        mean_scores(&scores).insert_into(&mut row);
        rows.push(row);
        for size in &config.sweep.model_sizes {
            let model = sc.model(*size, &model_cfg)?;
            let scores: Vec<AttackScore> = ctx
                .attack_all(&sc, base, Some(&prior), Some(&model))?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            let mut row = ctx.row(&format!("model-{}", size_label(size)), seed);
            mean_scores(&scores).insert_into(&mut row);
            row.set("model_samples", model.train_size as f64);
            row.set("model_val_mse", model.validation_mse);
            rows.push(row);
        }
        Ok(rows)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tag: ExperimentTag) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(tag, EnvSpec::gridlake());
        c.seeds = vec![0, 1, 2];
        c.attack.config.max_iterations = 20;
        c.attack.k_starts = 2;
        c.federation.rounds = 4;
        c.scenario.packet_round = 2;
        c.scenario.dataset_size = 300;
        c.scenario.model_data = PriorSize::Count(100);
        c.scenario.model = Some(crate::attack::TransitionModelConfig {
            epochs: 2,
            ..crate::attack::TransitionModelConfig::for_env(&c.env)
        });
        c.sweep.prior_sizes = vec![PriorSize::Count(5), PriorSize::All];
        c.sweep.model_sizes = vec![PriorSize::Count(30)];
        c.sweep.variances = vec![1e-3];
        c.sweep.batch_sizes = vec![1, 2];
        c
    }

    #[test]
    fn presets_validate_and_round_trip() {
        for tag in ExperimentTag::ALL {
            for env in [
                EnvSpec::gridlake(),
                EnvSpec::pointmass(),
                EnvSpec::pixelgrid(),
            ] {
                let c = ExperimentConfig::preset(tag, env);
                c.validate().unwrap();
                let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
                assert_eq!(back, c);
                assert_eq!(back.hash(), c.hash());
            }
        }
    }

    #[test]
    fn config_rejections() {
        let mut c = tiny(ExperimentTag::BatchSweep);
        c.sweep.batch_sizes.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny(ExperimentTag::Sensitivity);
        c.seeds = vec![1, 2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny(ExperimentTag::Multistart);
        c.attack.k_starts = 1;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"experiment":"train","env":{"kind":"gridlake"},"seeds":[1],"bogus":1}"#
        )
        .is_err());
        let ok = ExperimentConfig::from_json(
            r#"{"experiment":"train","env":{"kind":"gridlake"},"seeds":[1]}"#,
        )
        .unwrap();
        assert_eq!(ok.federation, FederationConfig::default());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = tiny(ExperimentTag::Attack);
        let mut b = a.clone();
        b.output = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(9);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn variant_weights() {
        let base = RegWeights {
            alpha: 2.0,
            beta: 3.0,
            gamma_dyn: 4.0,
            lambda: 0.5,
        };
        assert_eq!(
            Variant::Gia.weights(base),
            RegWeights {
                lambda: 0.5,
                ..RegWeights::none()
            }
        );
        assert_eq!(Variant::GiaRc.weights(base).beta, 3.0);
        assert_eq!(Variant::GiaRc.weights(base).alpha, 0.0);
        assert_eq!(Variant::Rgia.weights(base), base);
        assert_eq!(Axis::GammaDyn.apply(base, 0.1).gamma_dyn, 0.1);
    }

    #[test]
    fn gia_only_ablation_is_one_row_per_seed() {
        let mut c = tiny(ExperimentTag::Ablate);
        c.sweep.variants = vec![Variant::Gia];
        let rows = run_ablation(&c).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.arm == "GIA" && r.get("ss").is_some()));
    }

    #[test]
    fn single_point_grid_is_one_row() {
        let mut c = tiny(ExperimentTag::Sensitivity);
        c.sweep.grid = vec![0.1];
        let rows = run_sensitivity(&c).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].get("beta"), Some(0.1));
    }

    #[test]
    fn every_tiny_experiment_runs_and_reruns_identically() {
        for tag in ExperimentTag::ALL {
            let c = tiny(tag);
            let a = run_experiment(&c).unwrap();
            assert!(!a.rows.is_empty(), "{tag}");
            let opts = EmitOptions {
                deterministic: true,
            };
            let b = run_experiment(&c).unwrap();
            assert_eq!(
                rows_to_csv(&a.rows, opts).unwrap(),
                rows_to_csv(&b.rows, opts).unwrap(),
                "{tag}"
            );
            for r in &a.rows {
                assert_eq!(r.config_hash, c.hash());
                assert_eq!(r.version, ARTIFACT_VERSION);
            }
        }
    }

    #[test]
    fn no_prior_arm_equals_degraded_run() {
        let c = tiny(ExperimentTag::PriorStudy);
        let rows = run_prior_bias(&c).unwrap();
        let ctx = Ctx::new(&c);
        let sc = ctx.capture(0).unwrap();
        let model = ctx.model(&sc).unwrap();
        let w = RegWeights {
            alpha: 0.0,
            ..c.attack.config.weights
        };
        let direct = ctx.attack_all(&sc, w, None, Some(&model)).unwrap();
        let mut expect = ctx.row("no-prior", 0);
        direct[0].1.insert_into(&mut expect);
        assert_eq!(rows[0].metrics, expect.metrics);
    }
}
