use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::artifacts::{write_csv, write_embedding, write_json, Manifest, SeedMetrics};
use super::train::{distill_student, train_classifier, train_projector, DistillLog, ProjectorLog, Supervision, SupervisedLog};
use super::{run_hash, seed_dir, write_atomic, PipelineError, StageSeeds, TrainConfig};
use crate::graph::{Graph, GraphView, ViewKind};
use crate::metrics::{evaluate_multi_sensitive, MetricsReport, RunMetrics};
use crate::models::{forward_teacher, load_parameters, Classifier, Linear, Parameters, Projector, Teacher, ViewData};
use crate::par;
use crate::tensor::Matrix;

/// The three graph views of one dataset plus the resolved attribute names.
#[derive(Clone, Debug)]
pub struct PreparedViews {
    pub full: ViewData,
    pub nodes: ViewData,
    pub topology: ViewData,
    /// Attribute kept away from the student (unless `with_sensitive`).
    pub sensitive: String,
    /// Attributes fairness is reported for.
    pub evaluate: Vec<String>,
    pub labels: Vec<u8>,
}

impl PreparedViews {
    pub fn view(&self, kind: ViewKind) -> &ViewData {
        match kind {
            ViewKind::Full => &self.full,
            ViewKind::NodesOnly => &self.nodes,
            ViewKind::TopologyOnly => &self.topology,
        }
    }

    fn evaluate_refs(&self) -> Vec<&str> {
        self.evaluate.iter().map(String::as_str).collect()
    }
}

pub fn prepare_views(graph: &Graph, cfg: &TrainConfig) -> Result<PreparedViews, PipelineError> {
    let sensitive = match &cfg.sensitive {
        Some(s) => s.clone(),
        None => graph
            .primary_sensitive()
            .ok_or_else(|| PipelineError::Config("the graph has no sensitive attribute".into()))?
            .to_string(),
    };
    let attr = graph.sensitive(&sensitive)?;
    let column = attr.column.map(|c| graph.attribute_names()[c].clone());
    let strip = if cfg.with_sensitive { None } else { column.as_deref() };
    let make = |kind| -> Result<ViewData, PipelineError> { Ok(ViewData::from_view(&GraphView::new(graph, kind, strip)?)) };
    let full = make(ViewKind::Full)?;
    if strip.is_some() && full.width() + 1 != graph.num_attributes() {
        return Err(PipelineError::Invariant("student input still contains the sensitive column".into()));
    }
    let evaluate = match &cfg.evaluate {
        Some(names) => names.clone(),
        None => graph.sensitive_attributes().iter().map(|a| a.name.clone()).collect(),
    };
    for name in &evaluate {
        graph.sensitive(name)?;
    }
    Ok(PreparedViews {
        nodes: make(ViewKind::NodesOnly)?,
        topology: make(ViewKind::TopologyOnly)?,
        full,
        sensitive,
        evaluate,
        labels: graph.label_vector(),
    })
}

/// Everything one seed of a full run produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub teacher: Teacher,
    pub reference: Classifier,
    pub student: Classifier,
    pub expert_logs: (SupervisedLog, SupervisedLog),
    pub reference_log: SupervisedLog,
    pub projector_log: ProjectorLog,
    pub student_log: DistillLog,
    /// Teacher representation `H`.
    pub teacher_h: Matrix,
    /// Student representation `Ĥ` of the selected checkpoint.
    pub student_h: Matrix,
    pub student_metrics: RunMetrics,
    pub vanilla_metrics: RunMetrics,
}

fn frozen(stage: &str, before: &[u64], model: &impl Parameters) -> Result<(), PipelineError> {
    if model.fingerprint() != before {
        return Err(PipelineError::Invariant(format!("{stage} parameters changed after freezing")));
    }
    Ok(())
}

fn sim_head(cfg: &TrainConfig, seed: u64) -> Option<Linear> {
    use rand::SeedableRng;
    cfg.sim_head.then(|| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Linear::init(cfg.hidden, cfg.hidden, &mut rng)
    })
}

/// One seed of the full sequence: experts, reference, projector, student.
pub fn run_seed(graph: &Graph, views: &PreparedViews, cfg: &TrainConfig, seed: u64) -> Result<SeedRun, PipelineError> {
    let seeds = StageSeeds::derive(seed);
    let sup = Supervision {
        labels: &views.labels,
        splits: graph.splits(),
    };
    let h = cfg.hidden;

    let (mlp_expert, mlp_log) = train_classifier(
        "mlp-expert",
        Classifier::mlp_expert(views.nodes.width(), h, seeds.mlp_expert),
        &views.nodes,
        sup,
        cfg,
    )?;
    let (gcn_expert, gcn_log) = train_classifier(
        "gcn-expert",
        Classifier::gcn_expert(views.topology.width(), h, seeds.gcn_expert),
        &views.topology,
        sup,
        cfg,
    )?;
    let (reference, reference_log) = train_classifier(
        "reference",
        Classifier::backbone("reference", cfg.backbone, views.full.width(), h, seeds.classifier),
        &views.full,
        sup,
        cfg,
    )?;
    let frozen_prints = [mlp_expert.fingerprint(), gcn_expert.fingerprint(), reference.fingerprint()];

    let h_cg = reference.infer(&views.full)?.0;
    let mut teacher = Teacher {
        mlp_expert,
        gcn_expert,
        projector: Projector::init(2 * h, h, h_cg.cols(), seeds.projector),
    };
    let concat = teacher.expert_features(&views.nodes, &views.topology)?;
    let (projector, _, projector_log) =
        train_projector(teacher.projector.clone(), sim_head(cfg, seeds.sim_head), &concat, &h_cg, cfg)?;
    teacher.projector = projector;
    let teacher_h = forward_teacher(&teacher, &views.nodes, &views.topology)?;

    let student_init = Classifier::backbone("student", cfg.backbone, views.full.width(), h, seeds.classifier);
    if !student_init.same_architecture(&reference) {
        return Err(PipelineError::Invariant("student and reference architectures differ".into()));
    }
    let (student, student_log) = distill_student(
        student_init,
        sim_head(cfg, seeds.sim_head.wrapping_add(1)),
        &views.full,
        &teacher_h,
        sup,
        cfg,
    )?;
    frozen("mlp-expert", &frozen_prints[0], &teacher.mlp_expert)?;
    frozen("gcn-expert", &frozen_prints[1], &teacher.gcn_expert)?;
    frozen("reference", &frozen_prints[2], &reference)?;

    let test = &graph.splits().test;
    let attrs = views.evaluate_refs();
    let student_metrics = evaluate_multi_sensitive(&student, &views.full, graph, &attrs, test, seed)?;
    let vanilla_metrics = evaluate_multi_sensitive(&reference, &views.full, graph, &attrs, test, seed)?;
    let student_h = student.infer(&views.full)?.0;
    Ok(SeedRun {
        seed,
        teacher,
        reference,
        student,
        expert_logs: (mlp_log, gcn_log),
        reference_log,
        projector_log,
        student_log,
        teacher_h,
        student_h,
        student_metrics,
        vanilla_metrics,
    })
}

fn write_seed(out: &Path, run: &SeedRun, config_hash: &str) -> Result<(), PipelineError> {
    let dir = seed_dir(out, run.seed);
    let mut manifest = Manifest::new(config_hash, run.seed);
    let t = &run.teacher;
    manifest.add(&dir, "mlp-expert", &t.mlp_expert, t.mlp_expert.spec(), Some(run.expert_logs.0.best_epoch))?;
    manifest.add(&dir, "gcn-expert", &t.gcn_expert, t.gcn_expert.spec(), Some(run.expert_logs.1.best_epoch))?;
    manifest.add(&dir, "projector", &t.projector, t.projector.spec(), None)?;
    manifest.add(&dir, "reference", &run.reference, run.reference.spec(), Some(run.reference_log.best_epoch))?;
    manifest.add(&dir, "student", &run.student, run.student.spec(), Some(run.student_log.best_epoch))?;
    manifest.write(&dir)?;

    let logs = dir.join("logs");
    write_csv(&logs.join("mlp-expert.csv"), &run.expert_logs.0.rows)?;
    write_csv(&logs.join("gcn-expert.csv"), &run.expert_logs.1.rows)?;
    write_csv(&logs.join("reference.csv"), &run.reference_log.rows)?;
    write_csv(&logs.join("projector.csv"), &run.projector_log.rows)?;
    write_csv(&logs.join("student.csv"), &run.student_log.rows)?;

    write_embedding(&dir.join("embeddings").join("teacher.bin"), &run.teacher_h)?;
    write_embedding(&dir.join("embeddings").join("student.bin"), &run.student_h)?;

    write_json(
        &dir.join("metrics.json"),
        &SeedMetrics {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed: run.seed,
            student: run.student_metrics.clone(),
            vanilla: run.vanilla_metrics.clone(),
        },
    )
}

fn write_report(out: &Path, name: &str, report: &MetricsReport) -> Result<(), PipelineError> {
    write_atomic(&out.join(format!("{name}.json")), report.to_json()?.as_bytes())?;
    write_atomic(&out.join(format!("{name}.csv")), report.summary_csv()?.as_bytes())
}

/// Aggregated reports of a multi-seed run.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub student: MetricsReport,
    pub vanilla: MetricsReport,
    pub runs: Vec<SeedRun>,
}

/// Runs every seed of `cfg` (in parallel when enabled) and, with `out`,
/// persists per-seed artifacts plus `fairgkd.{json,csv}` and
/// `vanilla.{json,csv}`. Seeds that finished keep their artifacts when a
/// later seed fails.
pub fn run_experiment(graph: &Graph, cfg: &TrainConfig, out: Option<&Path>) -> Result<ExperimentOutcome, PipelineError> {
    cfg.validate()?;
    let hash = run_hash(cfg, graph);
    let views = prepare_views(graph, cfg)?;
    let seeds = cfg.seed_list();
    let results = par::map_items(&seeds, |&seed| {
        let run = run_seed(graph, &views, cfg, seed)?;
        if let Some(out) = out {
            write_seed(out, &run, &hash)?;
        }
        Ok::<_, PipelineError>(run)
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let student = MetricsReport::new("fairgkd", &hash, runs.iter().map(|r| r.student_metrics.clone()).collect())?;
    let vanilla = MetricsReport::new("vanilla", &hash, runs.iter().map(|r| r.vanilla_metrics.clone()).collect())?;
    if let Some(out) = out {
        write_report(out, "fairgkd", &student)?;
        write_report(out, "vanilla", &vanilla)?;
    }
    Ok(ExperimentOutcome { student, vanilla, runs })
}

/// Recomputes the test metrics of the student checkpoint stored in `dir`.
pub fn evaluate_checkpoint(graph: &Graph, cfg: &TrainConfig, dir: &Path, seed: u64) -> Result<RunMetrics, PipelineError> {
    let views = prepare_views(graph, cfg)?;
    let mut student = Classifier::backbone("student", cfg.backbone, views.full.width(), cfg.hidden, 0);
    let path = dir.join("checkpoints").join("student.bin");
    let file = File::open(&path).map_err(|source| PipelineError::Io {
        path: path.clone(),
        source,
    })?;
    load_parameters(&mut student, &mut BufReader::new(file))?;
    let attrs = views.evaluate_refs();
    Ok(evaluate_multi_sensitive(&student, &views.full, graph, &attrs, &graph.splits().test, seed)?)
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub seed: u64,
    pub model: Classifier,
    pub log: SupervisedLog,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub report: MetricsReport,
    pub runs: Vec<BaselineRun>,
}

/// Trains the backbone classifier on one view per seed and evaluates it
/// on the same view. The `Full` strategy is the vanilla model.
pub fn run_baseline(
    graph: &Graph,
    strategy: ViewKind,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<BaselineOutcome, PipelineError> {
    cfg.validate()?;
    let hash = run_hash(cfg, graph);
    let views = prepare_views(graph, cfg)?;
    let input = views.view(strategy);
    let name = format!("baseline-{strategy}");
    let sup = Supervision {
        labels: &views.labels,
        splits: graph.splits(),
    };
    let attrs = views.evaluate_refs();
    let seeds = cfg.seed_list();
    let results = par::map_items(&seeds, |&seed| {
        let init = StageSeeds::derive(seed).classifier;
        let model = Classifier::backbone(&name, cfg.backbone, input.width(), cfg.hidden, init);
        let (model, log) = train_classifier("baseline", model, input, sup, cfg)?;
        let metrics = evaluate_multi_sensitive(&model, input, graph, &attrs, &graph.splits().test, seed)?;
        if let Some(out) = out {
            let dir = seed_dir(out, seed);
            let mut manifest = Manifest::new(&hash, seed);
            manifest.add(&dir, &name, &model, model.spec(), Some(log.best_epoch))?;
            write_json(&dir.join("checkpoints").join(format!("{name}.json")), &manifest)?;
            write_csv(&dir.join("logs").join(format!("{name}.csv")), &log.rows)?;
        }
        Ok::<_, PipelineError>(BaselineRun { seed, model, log, metrics })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::new(&name, &hash, runs.iter().map(|r| r.metrics.clone()).collect())?;
    if let Some(out) = out {
        write_report(out, &name, &report)?;
    }
    Ok(BaselineOutcome { report, runs })
}
