//! The outer repair loop: evaluate, select images, try input-based fixes,
//! rank suspicious layers and apply layer-based strategies until the target
//! agrees with the source or the loop gives up.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::interp::{classify, Dataset, InterpError, LabelRanking};
use crate::ir::{save_model, GraphModel, IrError, Op, Tensor};
use crate::localize::{
    analyze_traces, assign_ranks, hyperparam_reports, localize_static, match_layers, param_scores,
    rank_suspicious_layers, trace_pairs, weight_report, ActivationAnalysis, ActivationOptions,
    FaultCategory, FaultReport, GraphPairContext, LayerMatching, LayerPair, LocalizeError,
    Location, StaticFindings, SuspiciousRanking, TracePair, DEFAULT_ELEMENT_CAP,
};
use crate::repair::{
    repair_hyperparams, repair_input_dims, repair_preprocessing, repair_subgraph,
    repair_tensor_structure, repair_weights, CandidateModel, DrivingImage, RepairAction,
    RepairError, Rewrite, DEFAULT_KT_FIXED,
};
use crate::stats::{kendall_tau, DEFAULT_SIGNIFICANCE};

/// Fraction of the selected images drawn for each activation-analysis run.
const ACTIVATION_SUBSAMPLE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    pub n_sim: usize,
    pub n_diss: usize,
    pub analysis_iter_no: usize,
    pub diss_no: usize,
    pub time_limit_secs: u64,
    pub significance: f32,
    pub kt_fixed_threshold: f32,
    pub seed: u64,
    pub element_cap: Option<usize>,
    /// Absolute per-element difference tolerated before weights are reported.
    pub weight_tolerance: f32,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            n_sim: 100,
            n_diss: 100,
            analysis_iter_no: 3,
            diss_no: 3,
            time_limit_secs: 7200,
            significance: DEFAULT_SIGNIFICANCE,
            kt_fixed_threshold: DEFAULT_KT_FIXED,
            seed: 0,
            element_cap: Some(DEFAULT_ELEMENT_CAP),
            weight_tolerance: 0.0,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.n_sim == 0 || self.n_diss == 0 || self.analysis_iter_no == 0 || self.diss_no == 0 {
            return bad("n_sim, n_diss, analysis_iter_no and diss_no must be positive");
        }
        if self.time_limit_secs == 0 {
            return bad("time limit must be positive");
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return bad("significance must lie in (0, 1)");
        }
        if !(self.kt_fixed_threshold > -1.0 && self.kt_fixed_threshold <= 1.0) {
            return bad("kt threshold must lie in (-1, 1]");
        }
        if self.element_cap == Some(0) {
            return bad("element cap must be positive");
        }
        if self.weight_tolerance.is_nan() || self.weight_tolerance < 0.0 {
            return bad("weight tolerance must be non-negative");
        }
        Ok(())
    }

    fn activation_options(&self, seed: u64) -> ActivationOptions {
        ActivationOptions {
            significance: self.significance,
            element_cap: self.element_cap,
            seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{model} model failed on image {image}: {error}")]
    Inference {
        model: &'static str,
        image: String,
        error: InterpError,
    },
    #[error("image {image}: {detail}")]
    Compare { image: String, detail: String },
    #[error("no dissimilar images to select")]
    NoDissimilar,
    #[error(transparent)]
    Localize(#[from] crate::localize::LocalizeError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub source_ranking: LabelRanking,
    pub target_ranking: LabelRanking,
    pub labels_match: bool,
    pub kendall_tau: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: Vec<ImageEval>,
    pub dissimilarity_pct: f32,
}

impl EvalSummary {
    pub fn dissimilar_count(&self) -> usize {
        self.images.iter().filter(|e| !e.labels_match).count()
    }
}

fn source_rankings(
    source: &GraphModel,
    dataset: &Dataset,
) -> Result<Vec<LabelRanking>, EngineError> {
    dataset
        .images
        .par_iter()
        .map(|img| {
            classify(source, &img.tensor).map_err(|error| EngineError::Inference {
                model: "source",
                image: img.id.clone(),
                error,
            })
        })
        .collect()
}

fn evaluate_against(
    source: &[LabelRanking],
    target: &GraphModel,
    dataset: &Dataset,
) -> Result<EvalSummary, EngineError> {
    if dataset.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let images = dataset
        .images
        .par_iter()
        .zip(source)
        .map(|(img, s)| {
            let t = classify(target, &img.tensor).map_err(|error| EngineError::Inference {
                model: "target",
                image: img.id.clone(),
                error,
            })?;
            let kt = kendall_tau(s, &t).map_err(|e| EngineError::Compare {
                image: img.id.clone(),
                detail: e.to_string(),
            })?;
            Ok(ImageEval {
                image_id: img.id.clone(),
                labels_match: s.top1() == t.top1(),
                source_ranking: s.clone(),
                target_ranking: t,
                kendall_tau: kt,
            })
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    let diss = images.iter().filter(|e| !e.labels_match).count();
    Ok(EvalSummary {
        dissimilarity_pct: 100.0 * diss as f32 / images.len() as f32,
        images,
    })
}

/// Run both models on every image and compare rankings.
pub fn evaluate(
    source: &GraphModel,
    target: &GraphModel,
    dataset: &Dataset,
) -> Result<EvalSummary, EngineError> {
    if dataset.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    evaluate_against(&source_rankings(source, dataset)?, target, dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSelection {
    /// Sorted by image id.
    pub sim: Vec<String>,
    /// Ascending Kendall tau, ties by image id.
    pub diss: Vec<String>,
}

impl ImageSelection {
    pub fn driving(&self) -> &str {
        &self.diss[0]
    }
}

pub fn select_images(
    eval: &EvalSummary,
    n_sim: usize,
    n_diss: usize,
    seed: u64,
) -> Result<ImageSelection, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let similar: Vec<&ImageEval> = eval.images.iter().filter(|e| e.labels_match).collect();
    let mut sim: Vec<String> = similar
        .choose_multiple(&mut rng, n_sim)
        .map(|e| e.image_id.clone())
        .collect();
    sim.sort();
    let mut diss: Vec<&ImageEval> = eval.images.iter().filter(|e| !e.labels_match).collect();
    if diss.is_empty() {
        return Err(EngineError::NoDissimilar);
    }
    diss.sort_by(|a, b| {
        a.kendall_tau
            .total_cmp(&b.kendall_tau)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    diss.truncate(n_diss);
    Ok(ImageSelection {
        sim,
        diss: diss.into_iter().map(|e| e.image_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopState {
    pub same_diss: usize,
    pub diss_history: Vec<f32>,
    pub elapsed: Duration,
    pub iteration: usize,
}

impl LoopState {
    pub fn record(&mut self, diss: f32) {
        self.diss_history.push(diss);
        let run = self
            .diss_history
            .iter()
            .rev()
            .take_while(|&&d| d == diss)
            .count();
        self.same_diss = run - 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationReason {
    ZeroDissimilarity,
    Stagnation,
    TimeLimit,
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ZeroDissimilarity => "zero-dissimilarity",
            Self::Stagnation => "stagnation",
            Self::TimeLimit => "time-limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    pub final_model: GraphModel,
    pub actions: Vec<RepairAction>,
    /// One summary per outer iteration, for the model kept at that point.
    pub evaluations: Vec<EvalSummary>,
    pub termination_reason: TerminationReason,
    pub state: LoopState,
    /// Distinct locations reported per category over the whole run.
    pub localized: BTreeMap<FaultCategory, usize>,
    /// Distinct locations per category whose accepted fix survives in the final model.
    pub repaired: BTreeMap<FaultCategory, usize>,
}

impl RepairOutcome {
    pub fn final_dissimilarity(&self) -> f32 {
        self.evaluations
            .last()
            .map_or(100.0, |e| e.dissimilarity_pct)
    }
}

/// Static findings plus the activation-based ranking, with ranks assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub findings: StaticFindings,
    pub ranking: SuspiciousRanking,
    pub activation_runs: Vec<ActivationAnalysis>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn subsample<'a>(ids: &'a [String], min: usize, rng: &mut ChaCha8Rng) -> Vec<&'a String> {
    let k = ((ids.len() as f64 * ACTIVATION_SUBSAMPLE).round() as usize)
        .clamp(min.min(ids.len()), ids.len());
    let mut out: Vec<&String> = ids.choose_multiple(rng, k).collect();
    out.sort();
    out
}

/// Repeated activation analyses on random subsets of the selected images.
/// Images are traced once and shared by all runs. Returns no runs when there
/// are too few similar images.
#[allow(clippy::too_many_arguments)]
fn activation_runs(
    source: &GraphModel,
    target: &GraphModel,
    raw: &HashMap<&str, &Tensor>,
    selection: &ImageSelection,
    matching: &LayerMatching,
    cfg: &RepairConfig,
    iteration: usize,
    deadline: &dyn Fn() -> bool,
) -> Result<Vec<ActivationAnalysis>, EngineError> {
    if selection.sim.len() < 2 || deadline() {
        return Ok(Vec::new());
    }
    let ids: Vec<&String> = selection.sim.iter().chain(&selection.diss).collect();
    let images: Vec<Tensor> = ids.iter().map(|id| raw[id.as_str()].clone()).collect();
    let traced = trace_pairs(source, target, &images).map_err(LocalizeError::from)?;
    let by_id: HashMap<&str, &TracePair> = ids.iter().map(|id| id.as_str()).zip(&traced).collect();
    let mut runs = Vec::new();
    for r in 0..cfg.analysis_iter_no {
        if deadline() {
            break;
        }
        let seed = mix(cfg.seed, iteration as u64 + 1, r as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = |ids: Vec<&String>| -> Vec<&TracePair> {
            ids.into_iter().map(|id| by_id[id.as_str()]).collect()
        };
        let sim = pick(subsample(&selection.sim, 2, &mut rng));
        let diss = pick(subsample(&selection.diss, 1, &mut rng));
        runs.push(analyze_traces(
            source,
            &sim,
            &diss,
            matching,
            &cfg.activation_options(seed),
        )?);
    }
    Ok(runs)
}

fn rank(
    findings: &StaticFindings,
    source: &GraphModel,
    runs: &[ActivationAnalysis],
) -> Result<SuspiciousRanking, EngineError> {
    Ok(rank_suspicious_layers(
        &findings.conv_pairs(source),
        &param_scores(&findings.reports),
        runs,
    )?)
}

/// Full localization as run by one outer iteration, without repairing.
pub fn localize(
    source: &GraphModel,
    target: &GraphModel,
    dataset: &Dataset,
    cfg: &RepairConfig,
) -> Result<Localization, EngineError> {
    cfg.validate()?;
    let mut findings = localize_static(source, target, cfg.weight_tolerance);
    let eval = evaluate(source, target, dataset)?;
    let activation_runs = match select_images(&eval, cfg.n_sim, cfg.n_diss, cfg.seed) {
        Ok(sel) => {
            let raw: HashMap<&str, &Tensor> = dataset
                .images
                .iter()
                .map(|i| (i.id.as_str(), &i.tensor))
                .collect();
            activation_runs(
                source,
                target,
                &raw,
                &sel,
                &findings.matching,
                cfg,
                0,
                &|| false,
            )?
        }
        Err(EngineError::NoDissimilar) => Vec::new(),
        Err(e) => return Err(e),
    };
    let ranking = rank(&findings, source, &activation_runs)?;
    assign_ranks(&mut findings.reports, &ranking);
    Ok(Localization {
        findings,
        ranking,
        activation_runs,
    })
}

/// Source ids in the order layer-based strategies visit them: ranked Conv
/// layers, then other layers with parameter reports in declaration order.
fn layer_order(
    source: &GraphModel,
    findings: &StaticFindings,
    ranking: &SuspiciousRanking,
) -> Vec<String> {
    let mut order: Vec<String> = ranking.order.iter().map(|p| p.source.clone()).collect();
    let reported: BTreeSet<&str> = findings
        .reports
        .iter()
        .filter(|r| matches!(r.category, FaultCategory::Wb | FaultCategory::Lh))
        .filter_map(|r| r.location.pair().map(|p| p.source.as_str()))
        .collect();
    for n in &source.nodes {
        if n.op != Op::Conv && reported.contains(n.id.as_str()) {
            order.push(n.id.clone());
        }
    }
    order
}

enum Trial {
    Fixed,
    Improved,
    Rejected,
}

struct Run<'a, 'l> {
    cfg: &'a RepairConfig,
    start: Instant,
    actions: Vec<RepairAction>,
    log: Option<&'l mut dyn Write>,
    localized: BTreeSet<(FaultCategory, Location)>,
}

impl Run<'_, '_> {
    fn timed_out(&self) -> bool {
        self.start.elapsed() >= Duration::from_secs(self.cfg.time_limit_secs)
    }

    fn push(&mut self, action: RepairAction) -> Result<(), EngineError> {
        if let Some(w) = self.log.as_deref_mut() {
            let io = |source| EngineError::Io {
                path: PathBuf::from("<repair log>"),
                source,
            };
            let line = serde_json::to_string(&action).expect("actions serialize");
            writeln!(w, "{line}").map_err(io)?;
            w.flush().map_err(io)?;
        }
        self.actions.push(action);
        Ok(())
    }

    fn note(&mut self, r: &FaultReport) {
        self.localized.insert((r.category, r.location.clone()));
    }

    /// Screen one candidate on the driving image. `kt_before` is the score
    /// the candidate must beat.
    fn trial(
        &mut self,
        strategy: FaultCategory,
        location: Location,
        candidate: Result<Rewrite, RepairError>,
        driving: &DrivingImage,
        kt_before: f32,
        accept_improvement: bool,
    ) -> Result<(Trial, Option<(Rewrite, f32)>), EngineError> {
        let (description, scored) = match candidate {
            Err(e) => (format!("discarded: {e}"), None),
            Ok(rw) => match driving.kt(&rw.model) {
                Err(e) => (format!("{}; discarded: {e}", rw.description), None),
                Ok(kt) => (rw.description.clone(), Some((rw, kt))),
            },
        };
        let kt_after = scored.as_ref().map(|(_, kt)| *kt);
        let outcome = match kt_after {
            Some(kt) if kt >= self.cfg.kt_fixed_threshold && kt > kt_before => Trial::Fixed,
            Some(kt) if kt >= self.cfg.kt_fixed_threshold && !accept_improvement => Trial::Fixed,
            Some(kt) if accept_improvement && kt > kt_before => Trial::Improved,
            _ => Trial::Rejected,
        };
        self.push(RepairAction {
            strategy,
            target_location: location,
            description,
            accepted: !matches!(outcome, Trial::Rejected),
            kt_before,
            kt_after,
        })?;
        Ok((outcome, scored))
    }
}

fn accept(incumbent: &CandidateModel, rw: Rewrite, action: &RepairAction) -> CandidateModel {
    let mut provenance = incumbent.provenance.clone();
    provenance.push(action.clone());
    CandidateModel {
        model: rw.model,
        provenance,
    }
}

/// Run the repair loop without writing a log.
pub fn run_repair(
    source: &GraphModel,
    target: &GraphModel,
    dataset: &Dataset,
    cfg: &RepairConfig,
) -> Result<RepairOutcome, EngineError> {
    run_repair_logged(source, target, dataset, cfg, None)
}

/// Run the repair loop, appending each action to `log` as a JSON line.
pub fn run_repair_logged(
    source: &GraphModel,
    target: &GraphModel,
    dataset: &Dataset,
    cfg: &RepairConfig,
    log: Option<&mut dyn Write>,
) -> Result<RepairOutcome, EngineError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let mut run = Run {
        cfg,
        start: Instant::now(),
        actions: Vec::new(),
        log,
        localized: BTreeSet::new(),
    };
    let src_rankings = source_rankings(source, dataset)?;
    let ranking_of: HashMap<&str, &LabelRanking> = dataset
        .images
        .iter()
        .map(|i| i.id.as_str())
        .zip(&src_rankings)
        .collect();
    let raw: HashMap<&str, &Tensor> = dataset
        .images
        .iter()
        .map(|i| (i.id.as_str(), &i.tensor))
        .collect();

    let mut incumbent = CandidateModel {
        model: target.clone(),
        provenance: Vec::new(),
    };
    let mut best: Option<(CandidateModel, EvalSummary)> = None;
    let mut state = LoopState::default();
    let mut evaluations = Vec::new();

    let reason = loop {
        // Evaluate and keep the incumbent only if it is no worse than the best so far.
        let mut eval = evaluate_against(&src_rankings, &incumbent.model, dataset)?;
        match &best {
            Some((b, be)) if eval.dissimilarity_pct > be.dissimilarity_pct => {
                incumbent = b.clone();
                eval = be.clone();
            }
            _ => best = Some((incumbent.clone(), eval.clone())),
        }
        state.record(eval.dissimilarity_pct);
        state.elapsed = run.start.elapsed();
        evaluations.push(eval);
        let eval = evaluations.last().expect("pushed");
        if eval.dissimilarity_pct == 0.0 {
            break TerminationReason::ZeroDissimilarity;
        }
        if state.same_diss >= cfg.diss_no {
            break TerminationReason::Stagnation;
        }
        if run.timed_out() {
            break TerminationReason::TimeLimit;
        }
        let iteration = state.iteration;
        state.iteration += 1;

        let selection = select_images(
            eval,
            cfg.n_sim,
            cfg.n_diss,
            mix(cfg.seed, iteration as u64, 0),
        )?;
        let driving_id = selection.driving();
        let driving = DrivingImage {
            id: driving_id.to_string(),
            raw: raw[driving_id].clone(),
            source_ranking: ranking_of[driving_id].clone(),
        };
        let findings = localize_static(source, &incumbent.model, cfg.weight_tolerance);
        for r in &findings.reports {
            run.note(r);
        }
        let kt_now = driving.kt(&incumbent.model).unwrap_or(f32::NEG_INFINITY);

        // Input-based trials: accept the first candidate that fixes the driving image.
        let mut input_candidates: Vec<(FaultCategory, Location, Result<Rewrite, RepairError>)> =
            Vec::new();
        if findings.of(FaultCategory::Pp).next().is_some() {
            for rw in repair_preprocessing(&incumbent.model, &findings.pp_candidates) {
                if rw.model.preproc != incumbent.model.preproc {
                    input_candidates.push((FaultCategory::Pp, Location::ModelInput, Ok(rw)));
                }
            }
        }
        for r in findings.of(FaultCategory::Id) {
            input_candidates.push((
                FaultCategory::Id,
                r.location.clone(),
                repair_input_dims(&incumbent.model, source),
            ));
        }
        for r in findings.of(FaultCategory::Tss) {
            input_candidates.push((
                FaultCategory::Tss,
                r.location.clone(),
                repair_tensor_structure(&incumbent.model, source, r),
            ));
        }
        let mut fixed_by_input = false;
        for (cat, loc, cand) in input_candidates {
            if run.timed_out() {
                break;
            }
            if let (Trial::Fixed, Some((rw, _))) =
                run.trial(cat, loc, cand, &driving, kt_now, false)?
            {
                incumbent = accept(&incumbent, rw, run.actions.last().expect("logged"));
                fixed_by_input = true;
                break;
            }
        }
        if fixed_by_input || run.timed_out() {
            continue;
        }

        // Suspicious ranking, then layer-based strategies on a local copy.
        let runs = activation_runs(
            source,
            &incumbent.model,
            &raw,
            &selection,
            &findings.matching,
            cfg,
            iteration,
            &|| run.timed_out(),
        )?;
        let ranking = rank(&findings, source, &runs)?;
        let order = layer_order(source, &findings, &ranking);
        let mut local_best = incumbent.clone();
        let mut kt_best = kt_now;
        let mut matching = findings.matching.clone();
        'strategies: for strategy in [FaultCategory::Wb, FaultCategory::Lh, FaultCategory::Cg] {
            for src_id in &order {
                if run.timed_out() {
                    break 'strategies;
                }
                let Some(pair) = matching.pair_for_source(src_id).cloned() else {
                    continue;
                };
                let (report, candidate) = match layer_candidate(
                    strategy,
                    source,
                    &local_best.model,
                    &pair,
                    &matching,
                    cfg,
                ) {
                    Some(x) => x,
                    None => continue,
                };
                run.note(&report);
                let (outcome, scored) = run.trial(
                    strategy,
                    report.location.clone(),
                    candidate,
                    &driving,
                    kt_best,
                    true,
                )?;
                if let (Trial::Fixed | Trial::Improved, Some((rw, kt))) = (&outcome, scored) {
                    local_best = accept(&local_best, rw, run.actions.last().expect("logged"));
                    kt_best = kt;
                    matching = match_layers(source, &local_best.model);
                    if matches!(outcome, Trial::Fixed) {
                        break 'strategies;
                    }
                }
            }
        }
        incumbent = local_best;
    };

    // The loop may have stopped mid-iteration; make sure the reported
    // evaluation belongs to the returned model.
    if reason == TerminationReason::TimeLimit {
        if let Some((b, be)) = &best {
            if b.model != incumbent.model {
                let eval = evaluate_against(&src_rankings, &incumbent.model, dataset)?;
                if eval.dissimilarity_pct > be.dissimilarity_pct {
                    incumbent = b.clone();
                } else {
                    state.record(eval.dissimilarity_pct);
                    evaluations.push(eval);
                }
            }
        }
    }
    state.elapsed = run.start.elapsed();

    let count = |set: &BTreeSet<(FaultCategory, Location)>| {
        let mut m: BTreeMap<FaultCategory, usize> =
            FaultCategory::ALL.iter().map(|&c| (c, 0)).collect();
        for (c, _) in set {
            *m.entry(*c).or_insert(0) += 1;
        }
        m
    };
    let repaired_set: BTreeSet<(FaultCategory, Location)> = incumbent
        .provenance
        .iter()
        .map(|a| (a.strategy, a.target_location.clone()))
        .collect();
    Ok(RepairOutcome {
        final_model: incumbent.model,
        localized: count(&run.localized),
        repaired: count(&repaired_set),
        actions: run.actions,
        evaluations,
        termination_reason: reason,
        state,
    })
}

/// The current report for one strategy on one layer, and the candidate fix.
fn layer_candidate(
    strategy: FaultCategory,
    source: &GraphModel,
    model: &GraphModel,
    pair: &LayerPair,
    matching: &LayerMatching,
    cfg: &RepairConfig,
) -> Option<(FaultReport, Result<Rewrite, RepairError>)> {
    let (s, t) = (source.node(&pair.source)?, model.node(&pair.target)?);
    match strategy {
        FaultCategory::Wb => {
            let r = weight_report(s, t, pair, cfg.weight_tolerance)?;
            Some((r, repair_weights(model, source, pair)))
        }
        FaultCategory::Lh => {
            let rs = hyperparam_reports(s, t, pair);
            let first = rs.first()?.clone();
            Some((first, repair_hyperparams(model, source, pair, &rs)))
        }
        FaultCategory::Cg => {
            let r = GraphPairContext::new(source, model)?.graph_report(pair, matching)?;
            let c = repair_subgraph(model, source, &r);
            Some((r, c))
        }
        _ => None,
    }
}

/// `FIXED.json` -> `FIXED.<suffix>`.
pub fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

#[derive(Debug, Serialize)]
struct EvalMetadata<'a> {
    termination_reason: TerminationReason,
    iterations: usize,
    final_dissimilarity_pct: f32,
    diss_history: &'a [f32],
    localized: &'a BTreeMap<FaultCategory, usize>,
    repaired: &'a BTreeMap<FaultCategory, usize>,
    evaluations: &'a [EvalSummary],
}

/// Write the final model and `<out>.eval.json`.
pub fn save_outcome(outcome: &RepairOutcome, out: &Path) -> Result<(), EngineError> {
    save_model(&outcome.final_model, out)?;
    let meta = EvalMetadata {
        termination_reason: outcome.termination_reason,
        iterations: outcome.state.iteration,
        final_dissimilarity_pct: outcome.final_dissimilarity(),
        diss_history: &outcome.state.diss_history,
        localized: &outcome.localized,
        repaired: &outcome.repaired,
        evaluations: &outcome.evaluations,
    };
    let path = sidecar_path(out, "eval.json");
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(&path, json).map_err(|source| EngineError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inject::{
        inject, make_desk_model, DeskFixture, FaultSpec, InjectCategory, InjectMode,
    };
    use crate::ir::{AttrValue, Tensor};

    fn fixture() -> DeskFixture {
        make_desk_model(5, 60)
    }

    fn quick() -> RepairConfig {
        RepairConfig {
            n_sim: 30,
            n_diss: 30,
            analysis_iter_no: 2,
            element_cap: Some(512),
            ..RepairConfig::default()
        }
    }

    fn fake_eval(kts: &[(&str, bool, f32)]) -> EvalSummary {
        let r = LabelRanking::from_scores(&[0.5, 0.3, 0.2]);
        let images: Vec<ImageEval> = kts
            .iter()
            .map(|(id, m, kt)| ImageEval {
                image_id: id.to_string(),
                source_ranking: r.clone(),
                target_ranking: r.clone(),
                labels_match: *m,
                kendall_tau: *kt,
            })
            .collect();
        let diss = images.iter().filter(|e| !e.labels_match).count();
        EvalSummary {
            dissimilarity_pct: 100.0 * diss as f32 / images.len() as f32,
            images,
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = RepairConfig::default();
        assert_eq!(
            (
                c.n_sim,
                c.n_diss,
                c.analysis_iter_no,
                c.diss_no,
                c.time_limit_secs
            ),
            (100, 100, 3, 3, 7200)
        );
        assert!(c.validate().is_ok());
        for bad in [
            RepairConfig {
                significance: 1.0,
                ..c.clone()
            },
            RepairConfig {
                kt_fixed_threshold: -1.0,
                ..c.clone()
            },
            RepairConfig {
                diss_no: 0,
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn evaluate_self_and_permuted_head() {
        let f = fixture();
        let e = evaluate(&f.model, &f.model, &f.dataset).unwrap();
        assert_eq!(e.dissimilarity_pct, 0.0);
        assert!(e
            .images
            .iter()
            .all(|i| i.kendall_tau == 1.0 && i.labels_match));

        // Reverse the Gemm columns so each image's scores map to other classes.
        let mut t = f.model.clone();
        let g = t.node_mut("gemm").unwrap();
        for role in ["weight", "bias"] {
            let w = g.weights[role].clone();
            let shape = w.shape().to_vec();
            let v = w.as_f32().unwrap();
            let cols = *shape.last().unwrap();
            let rev: Vec<f32> = v
                .chunks(cols)
                .flat_map(|r| r.iter().rev().copied())
                .collect();
            g.weights
                .insert(role.into(), Tensor::from_f32(shape, rev).unwrap());
        }
        let e = evaluate(&f.model, &t, &f.dataset).unwrap();
        let recount = e
            .images
            .iter()
            .filter(|i| i.source_ranking.top1() != i.target_ranking.top1())
            .count();
        assert_eq!(e.dissimilar_count(), recount);
        // Reversal maps class c to 9 - c, which never fixes a point.
        assert_eq!(e.dissimilarity_pct, 100.0);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let f = fixture();
        assert!(matches!(
            evaluate(&f.model, &f.model, &Dataset::default()),
            Err(EngineError::EmptyDataset)
        ));
    }

    #[test]
    fn selection_orders_by_tau() {
        let e = fake_eval(&[
            ("a", false, 0.2),
            ("b", false, -0.5),
            ("c", false, 0.9),
            ("d", true, 1.0),
            ("e", true, 1.0),
        ]);
        let s = select_images(&e, 10, 10, 3).unwrap();
        assert_eq!(s.diss, vec!["b", "a", "c"]);
        assert_eq!(s.driving(), "b");
        assert_eq!(s.sim, vec!["d", "e"]);
        assert_eq!(s, select_images(&e, 10, 10, 3).unwrap());

        let tie = fake_eval(&[("z", false, 0.1), ("y", false, 0.1)]);
        assert_eq!(select_images(&tie, 1, 10, 0).unwrap().diss, vec!["y", "z"]);
        let none = fake_eval(&[("a", true, 1.0)]);
        assert!(matches!(
            select_images(&none, 1, 1, 0),
            Err(EngineError::NoDissimilar)
        ));
    }

    #[test]
    fn selection_samples_similar_images() {
        let rows: Vec<(String, bool, f32)> = (0..40)
            .map(|i| (format!("i{i:02}"), i % 4 != 0, 0.0))
            .collect();
        let borrowed: Vec<(&str, bool, f32)> =
            rows.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect();
        let e = fake_eval(&borrowed);
        let a = select_images(&e, 5, 3, 11).unwrap();
        assert_eq!(a.sim.len(), 5);
        assert_eq!(a.diss.len(), 3);
        assert!(a.sim.iter().all(|s| !a.diss.contains(s)));
        assert_eq!(a, select_images(&e, 5, 3, 11).unwrap());
    }

    #[test]
    fn same_diss_counts_trailing_run() {
        let mut s = LoopState::default();
        for (d, want) in [(5.0, 0), (5.0, 1), (3.0, 0), (3.0, 1), (3.0, 2), (1.0, 0)] {
            s.record(d);
            assert_eq!(s.same_diss, want);
        }
    }

    #[test]
    fn identical_models_stop_immediately() {
        let f = fixture();
        let out = run_repair(&f.model, &f.model, &f.dataset, &quick()).unwrap();
        assert_eq!(out.termination_reason, TerminationReason::ZeroDissimilarity);
        assert!(out.actions.is_empty());
        assert_eq!(out.evaluations.len(), 1);
        assert_eq!(out.final_model, f.model);
    }

    #[test]
    fn weight_fault_is_repaired() {
        let f = fixture();
        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Wb, 2)
                .layers(&["conv2"])
                .magnitude(0.2),
        )
        .unwrap();
        assert!(
            evaluate(&f.model, &t, &f.dataset)
                .unwrap()
                .dissimilarity_pct
                > 0.0
        );
        let out = run_repair(&f.model, &t, &f.dataset, &quick()).unwrap();
        assert_eq!(out.termination_reason, TerminationReason::ZeroDissimilarity);
        assert!(out.actions.iter().any(|a| a.accepted
            && a.strategy == FaultCategory::Wb
            && a.target_location.pair().unwrap().target == "conv2"));
        for c in FaultCategory::ALL {
            assert!(out.repaired[&c] <= out.localized[&c]);
        }
    }

    #[test]
    fn out_of_taxonomy_fault_stagnates() {
        let f = fixture();
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::OutOfTaxonomy, 0)).unwrap();
        let e = evaluate(&f.model, &t, &f.dataset).unwrap();
        assert!(e.dissimilarity_pct > 0.0);
        let cfg = RepairConfig {
            diss_no: 2,
            ..quick()
        };
        let out = run_repair(&f.model, &t, &f.dataset, &cfg).unwrap();
        assert_eq!(out.termination_reason, TerminationReason::Stagnation);
        assert_eq!(out.state.diss_history, vec![e.dissimilarity_pct; 3]);
        assert!(out.actions.is_empty());
    }

    #[test]
    fn input_fault_is_fixed_by_input_strategy() {
        let f = fixture();
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Tss, 0)).unwrap();
        let out = run_repair(&f.model, &t, &f.dataset, &quick()).unwrap();
        assert_eq!(out.termination_reason, TerminationReason::ZeroDissimilarity);
        let accepted: Vec<_> = out
            .actions
            .iter()
            .filter(|a| a.accepted)
            .map(|a| a.strategy)
            .collect();
        assert_eq!(accepted, vec![FaultCategory::Tss]);
        // The ID candidate cannot work with the transpose still in place.
        assert!(out
            .actions
            .iter()
            .any(|a| a.strategy == FaultCategory::Id && !a.accepted));
    }

    #[test]
    fn dissimilarity_never_increases() {
        let f = fixture();
        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Wb, 9)
                .mode(InjectMode::Quantize)
                .magnitude(3.0),
        )
        .unwrap();
        let out = run_repair(&f.model, &t, &f.dataset, &quick()).unwrap();
        assert!(
            out.state.diss_history.windows(2).all(|w| w[1] <= w[0]),
            "{:?}",
            out.state.diss_history
        );
    }

    #[test]
    fn log_lines_match_actions() {
        let f = fixture();
        let (mut t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Lh, 0).mode(InjectMode::OverwriteStrides),
        )
        .unwrap();
        t.node_mut("conv1")
            .unwrap()
            .attrs
            .insert("dilations".into(), AttrValue::Ints(vec![1, 1]));
        let mut buf = Vec::new();
        let out = run_repair_logged(&f.model, &t, &f.dataset, &quick(), Some(&mut buf)).unwrap();
        let lines: Vec<RepairAction> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.actions);
        assert!(!lines.is_empty());
    }

    #[test]
    fn localize_ranks_reports() {
        let f = fixture();
        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Wb, 1)
                .layers(&["conv1"])
                .magnitude(0.3),
        )
        .unwrap();
        let l = localize(&f.model, &t, &f.dataset, &quick()).unwrap();
        let wb: Vec<_> = l.findings.of(FaultCategory::Wb).collect();
        assert_eq!(wb.len(), 1);
        assert!(wb[0].suspicious_rank.is_some());
        assert_eq!(l.activation_runs.len(), 2);
        let empty = localize(&f.model, &f.model, &f.dataset, &quick()).unwrap();
        assert!(empty.findings.reports.is_empty() && empty.activation_runs.is_empty());
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(
            sidecar_path(Path::new("out/FIXED.json"), "eval.json"),
            PathBuf::from("out/FIXED.eval.json")
        );
        assert_eq!(
            sidecar_path(Path::new("FIXED.json"), "repairlog.jsonl"),
            PathBuf::from("FIXED.repairlog.jsonl")
        );
    }
}
