//! The training loop: k-means start, mini-batch head updates on the combined
//! contrastive loss, and scheduled dataset-wide pseudo-label refreshes.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::augment::{make_views, AugmentConfig, AugmentStrategy};
use crate::error::{Error, Result};
use crate::heads::{
    clustering_backward, clustering_logits, forward_clustering, projection_backward, projection_pass,
    adam_step, AdamState, HeadParams,
};
use crate::io::EmbeddingDataset;
use crate::losses::{class_wise_loss, instance_wise_loss, LossValue};
use crate::metrics::{accuracy, nmi};
use crate::numerics::{derive_seed, seeded_rng, softmax_rows, DenseMatrix, ProbVector};
use crate::pseudo::{harden, kmeans_init, make_schedule, PseudoLabels};
use crate::transport::{
    estimate_marginal_moving_average, solve_fixed_marginal_ot, solve_saot, CostMatrix,
    MarginalEstimatorState, Penalty, SaotConfig, SaotSolution,
};

/// Penalty weights for the three imbalance regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Epsilon2Preset {
    Balanced,
    LightImbalanced,
    HeavyImbalanced,
}

impl Epsilon2Preset {
    pub fn value(self) -> f64 {
        match self {
            Self::Balanced => 0.1,
            Self::LightImbalanced => 0.01,
            Self::HeavyImbalanced => 0.001,
        }
    }
}

/// How pseudo-labels are produced at each refresh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labeler {
    /// Self-adaptive transport with the log-barrier penalty.
    Saot,
    /// Plain transport with a uniform class marginal.
    Fixed,
    /// Plain transport with a moving-average class marginal.
    MovingAverage,
    /// Self-adaptive transport with a KL penalty towards the previous marginal.
    Kl,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_i: f64,
    pub batch_size: usize,
    /// Assignment-change threshold for stopping.
    pub delta: f64,
    /// `None` means 60 epochs' worth of batches.
    pub max_steps: Option<usize>,
    /// Steps trained on the instance-wise loss only.
    pub warmup_instance_only_steps: usize,
    /// Steps spent fitting the k-means labels before the refresh schedule
    /// starts. `None` means one quarter of the step budget.
    pub label_fit_steps: Option<usize>,
    pub num_refreshes: usize,
    /// Earliest step at which the change threshold may stop training.
    /// `None` means half the step budget.
    pub min_stop_step: Option<usize>,
    pub saot: SaotConfig,
    /// Overrides `saot.epsilon2` when set.
    pub epsilon2_preset: Option<Epsilon2Preset>,
    pub labeler: Labeler,
    /// Weight on the previous estimate for [`Labeler::MovingAverage`].
    pub mu: f64,
    pub augment: AugmentConfig,
    /// Use the dataset's stored views when present, whatever `augment.strategy` says.
    pub prefer_stored_views: bool,
    pub head_lr: f64,
    pub tau: f64,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_i: 10.0,
            batch_size: 200,
            delta: 0.01,
            max_steps: None,
            warmup_instance_only_steps: 0,
            label_fit_steps: None,
            num_refreshes: 10,
            min_stop_step: None,
            saot: SaotConfig::default(),
            epsilon2_preset: None,
            labeler: Labeler::Saot,
            mu: 0.9,
            augment: AugmentConfig::default(),
            prefer_stored_views: true,
            head_lr: 5e-4,
            tau: 1.0,
            proj_dim: 128,
            seed: 0,
        }
    }
}

pub const DEFAULT_EPOCHS: usize = 60;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.num_refreshes == 0 {
            return bad("num_refreshes must be at least 1".into());
        }
        if !(self.lambda_i >= 0.0 && self.lambda_i.is_finite()) {
            return bad(format!("lambda_i must be nonnegative, got {}", self.lambda_i));
        }
        if !(self.head_lr > 0.0 && self.head_lr.is_finite()) {
            return bad(format!("head_lr must be positive, got {}", self.head_lr));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if self.proj_dim == 0 {
            return bad("proj_dim must be at least 1".into());
        }
        self.augment.validate()
    }

    /// Transport settings after applying the preset and labeler.
    pub fn effective_saot(&self) -> SaotConfig {
        let mut cfg = self.saot.clone();
        if let Some(p) = self.epsilon2_preset {
            cfg.epsilon2 = p.value();
        }
        cfg.penalty = match self.labeler {
            Labeler::Kl => Penalty::KlToPrevious,
            _ => Penalty::LogBarrier,
        };
        cfg
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| DEFAULT_EPOCHS * samples.div_ceil(self.batch_size))
    }
}

/// Diagnostics captured at step 0 (k-means) and at every refresh.
#[derive(Clone, Debug, PartialEq)]
pub struct RefreshRecord {
    pub step: usize,
    pub clusters: usize,
    /// Fraction of dataset-wide assignments that changed since the previous
    /// refresh; `None` when there is nothing to compare with.
    pub change_rate: Option<f64>,
    /// Mean batch losses since the previous record.
    pub loss_c: Option<f64>,
    pub loss_i: Option<f64>,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub classes: usize,
    pub records: Vec<RefreshRecord>,
    pub assignments: Vec<usize>,
    pub stopped_early: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Parse {
        what: "report CSV",
        detail: format!("line {line}: {field:?} is not a number"),
    })
}

impl TrainReport {
    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("step,clusters,change_rate,loss_c,loss_i,acc,nmi");
        for j in 0..classes {
            let _ = write!(h, ",b_{j}");
        }
        h
    }

    /// One row per record; empty cells for unavailable values.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.classes);
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.clusters,
                fmt_opt(r.change_rate),
                fmt_opt(r.loss_c),
                fmt_opt(r.loss_i),
                fmt_opt(r.acc),
                fmt_opt(r.nmi)
            );
            for v in &r.b {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the records written by [`TrainReport::to_csv`]; assignments are not
    /// part of the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Empty("report CSV"))?;
        let classes = header.split(',').count().saturating_sub(7);
        if header != Self::csv_header(classes) {
            return Err(Error::Parse {
                what: "report CSV",
                detail: format!("unexpected header {header:?}"),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 + classes {
                return Err(Error::Parse {
                    what: "report CSV",
                    detail: format!("line {lineno} has {} fields", cells.len()),
                });
            }
            let int = |s: &str| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    what: "report CSV",
                    detail: format!("line {lineno}: {s:?} is not a count"),
                })
            };
            let b = cells[7..]
                .iter()
                .map(|c| parse_opt(c, lineno).and_then(|v| v.ok_or(Error::Empty("marginal cell"))))
                .collect::<Result<Vec<_>>>()?;
            records.push(RefreshRecord {
                step: int(cells[0])?,
                clusters: int(cells[1])?,
                change_rate: parse_opt(cells[2], lineno)?,
                loss_c: parse_opt(cells[3], lineno)?,
                loss_i: parse_opt(cells[4], lineno)?,
                acc: parse_opt(cells[5], lineno)?,
                nmi: parse_opt(cells[6], lineno)?,
                b,
            });
        }
        Ok(Self {
            classes,
            records,
            assignments: Vec::new(),
            stopped_early: false,
        })
    }
}

/// Fraction of positions where the two label vectors differ.
pub fn assignment_change_rate(prev: &[usize], cur: &[usize]) -> Result<f64> {
    if prev.len() != cur.len() {
        return Err(Error::Shape(format!("{} vs {} assignments", prev.len(), cur.len())));
    }
    if prev.is_empty() {
        return Ok(0.0);
    }
    let changed = prev.iter().zip(cur).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / prev.len() as f64)
}

/// Number of distinct row-argmax columns.
pub fn predicted_cluster_count(p: &DenseMatrix) -> usize {
    distinct(&p.argmax_rows(), p.cols())
}

fn distinct(labels: &[usize], classes: usize) -> usize {
    let mut seen = vec![false; classes.max(labels.iter().max().map_or(0, |m| m + 1))];
    for &l in labels {
        seen[l] = true;
    }
    seen.iter().filter(|&&s| s).count()
}

fn histogram(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for &l in labels {
        h[l] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    h.iter().map(|c| c / n).collect()
}

fn scores(truth: Option<&Vec<usize>>, labels: &[usize]) -> Result<(Option<f64>, Option<f64>)> {
    match truth {
        Some(t) if !t.is_empty() => Ok((Some(accuracy(t, labels)?), Some(nmi(t, labels)?))),
        _ => Ok((None, None)),
    }
}

#[derive(Default)]
struct LossMeter {
    class_wise: f64,
    class_batches: usize,
    instance_wise: f64,
    instance_batches: usize,
}

impl LossMeter {
    fn take(&mut self) -> (Option<f64>, Option<f64>) {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let out = (
            mean(self.class_wise, self.class_batches),
            mean(self.instance_wise, self.instance_batches),
        );
        *self = Self::default();
        out
    }
}

/// Transport solution for predictions `p` under the given labeler.
///
/// `previous` is the class marginal from the last refresh: the warm start for
/// the adaptive solvers, the KL reference, and the moving-average prior.
pub fn solve_labeler(
    p: &DenseMatrix,
    kind: Labeler,
    saot: &SaotConfig,
    previous: &ProbVector,
    mu: f64,
) -> Result<SaotSolution> {
    let cost = CostMatrix::from_predictions(p)?;
    let a = ProbVector::uniform(p.rows());
    match kind {
        Labeler::Saot | Labeler::Kl => solve_saot(&cost, &a, saot, previous),
        Labeler::Fixed => {
            let b = ProbVector::uniform(p.cols());
            solve_fixed_marginal_ot(&cost, &a, &b, saot.epsilon1, saot.polish_iters)
        }
        Labeler::MovingAverage => {
            let state = MarginalEstimatorState::new(previous.clone(), mu)?;
            let b = estimate_marginal_moving_average(p, &state)?;
            solve_fixed_marginal_ot(&cost, &a, &b, saot.epsilon1, saot.polish_iters)
        }
    }
}

struct PseudoLabeler {
    kind: Labeler,
    saot: SaotConfig,
    marginal: ProbVector,
    mu: f64,
}

impl PseudoLabeler {
    fn plan(&mut self, p: &DenseMatrix) -> Result<DenseMatrix> {
        let solution = solve_labeler(p, self.kind, &self.saot, &self.marginal, self.mu)?;
        self.marginal = solution.marginal;
        Ok(solution.plan)
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub assignments: Vec<usize>,
    pub report: TrainReport,
    pub heads: HeadParams,
}

/// Trains the heads and returns the final cluster assignments with per-refresh diagnostics.
pub fn run_rstc(
    dataset: &EmbeddingDataset,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(Vec<usize>, TrainReport)> {
    train(dataset, classes, cfg).map(|o| (o.assignments, o.report))
}

/// [`run_rstc`], also returning the trained heads.
pub fn train(dataset: &EmbeddingDataset, classes: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let e = &dataset.embeddings;
    let n = e.rows();
    if classes < 2 {
        return Err(Error::InvalidArgument("at least two clusters are required".into()));
    }
    if classes > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {classes} clusters from {n} samples"
        )));
    }
    let saot = cfg.effective_saot();
    saot.validate(classes)?;
    let truth = dataset.labels.as_ref();

    let mut q = kmeans_init(e, classes, derive_seed(cfg.seed, 1))?;
    let (acc, nmi_v) = scores(truth, q.labels())?;
    let mut records = vec![RefreshRecord {
        step: 0,
        clusters: distinct(q.labels(), classes),
        change_rate: None,
        loss_c: None,
        loss_i: None,
        acc,
        nmi: nmi_v,
        b: histogram(q.labels(), classes),
    }];

    let mut params = HeadParams::init(e.cols(), classes, cfg.proj_dim, derive_seed(cfg.seed, 2))?;
    let total_steps = cfg.total_steps(n);
    if total_steps == 0 {
        let assignments = q.labels().to_vec();
        return Ok(TrainOutcome {
            assignments: assignments.clone(),
            report: TrainReport {
                classes,
                records,
                assignments,
                stopped_early: false,
            },
            heads: params,
        });
    }
    let fit_steps = cfg
        .label_fit_steps
        .unwrap_or(total_steps / 4)
        .min(total_steps - 1);
    let refresh_span = total_steps - fit_steps;
    let schedule =
        make_schedule(refresh_span, cfg.num_refreshes.min(refresh_span))?.shifted(fit_steps);
    let min_stop_step = cfg.min_stop_step.unwrap_or(total_steps / 2);

    let mut adam = AdamState::new(&params);
    let mut order_rng = seeded_rng(derive_seed(cfg.seed, 3));
    let mut augment = cfg.augment.clone();
    augment.seed = derive_seed(cfg.seed, 4);
    if cfg.prefer_stored_views && dataset.views.is_some() {
        augment.strategy = AugmentStrategy::Precomputed;
    }
    let mut labeler = PseudoLabeler {
        kind: cfg.labeler,
        saot,
        marginal: ProbVector::uniform(classes),
        mu: cfg.mu,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut meter = LossMeter::default();
    let mut previous: Option<Vec<usize>> = None;
    let mut stopped_early = false;

    for step in 1..=total_steps {
        if cursor >= n {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = &order[cursor..end];
        cursor = end;

        let loss = train_step(
            dataset,
            batch,
            &q,
            &mut params,
            &mut adam,
            &augment,
            cfg,
            step,
        )?;
        if let Some(lc) = loss.class_wise {
            meter.class_wise += lc;
            meter.class_batches += 1;
        }
        meter.instance_wise += loss.instance_wise;
        meter.instance_batches += 1;

        if !schedule.contains(step) || step <= cfg.warmup_instance_only_steps {
            continue;
        }
        let p = forward_clustering(e, &params)?;
        let assignments = p.argmax_rows();
        let plan = labeler.plan(&p)?;
        let generation = q.generation + 1;
        q = harden(&plan);
        q.generation = generation;

        let change_rate = previous
            .as_deref()
            .map(|prev| assignment_change_rate(prev, &assignments))
            .transpose()?;
        let (loss_c, loss_i) = meter.take();
        let (acc, nmi_v) = scores(truth, &assignments)?;
        records.push(RefreshRecord {
            step,
            clusters: predicted_cluster_count(&p),
            change_rate,
            loss_c,
            loss_i,
            acc,
            nmi: nmi_v,
            b: labeler.marginal.as_slice().to_vec(),
        });
        previous = Some(assignments);
        if change_rate.is_some_and(|c| c < cfg.delta) && step >= min_stop_step && step < total_steps {
            stopped_early = true;
            break;
        }
    }

    // parameters are unchanged since the last refresh when training stopped there
    let assignments = forward_clustering(e, &params)?.argmax_rows();
    Ok(TrainOutcome {
        assignments: assignments.clone(),
        report: TrainReport {
            classes,
            records,
            assignments,
            stopped_early,
        },
        heads: params,
    })
}

struct StepLoss {
    class_wise: Option<f64>,
    instance_wise: f64,
}

/// One Adam update on a mini-batch. The class-wise term is skipped during warmup.
#[allow(clippy::too_many_arguments)]
fn train_step(
    dataset: &EmbeddingDataset,
    batch: &[usize],
    q: &PseudoLabels,
    params: &mut HeadParams,
    adam: &mut AdamState,
    augment: &AugmentConfig,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLoss> {
    let e_batch = dataset.embeddings.select_rows(batch);
    let stored = dataset
        .views
        .as_ref()
        .map(|(a, b)| (a.select_rows(batch), b.select_rows(batch)));
    let (v1, v2) = make_views(
        &e_batch,
        stored.as_ref().map(|(a, b)| (a, b)),
        augment,
        step as u64,
    )?;
    let abort = |reason: String| Error::Training { step, reason };

    let mut grads = params.zeros_like();
    let pass1 = projection_pass(&v1, params)?;
    let pass2 = projection_pass(&v2, params)?;
    let inst = instance_wise_loss(&pass1.output, &pass2.output, cfg.tau)
        .map_err(|e| abort(e.to_string()))?;
    let scale = |m: &DenseMatrix| m.map(|v| v * cfg.lambda_i);
    projection_backward(&v1, &pass1, params, &scale(&inst.d_z1)?, &mut grads)?;
    projection_backward(&v2, &pass2, params, &scale(&inst.d_z2)?, &mut grads)?;

    let class_wise = if step > cfg.warmup_instance_only_steps {
        let p1 = softmax_rows(&clustering_logits(&v1, params)?)?;
        let p2 = softmax_rows(&clustering_logits(&v2, params)?)?;
        let cls = class_wise_loss(&q.select(batch), &p1, &p2)?;
        clustering_backward(&v1, &cls.d_logits1, &mut grads)?;
        clustering_backward(&v2, &cls.d_logits2, &mut grads)?;
        Some(cls.value)
    } else {
        None
    };
    let total = LossValue::new(class_wise.unwrap_or(0.0), inst.value, cfg.lambda_i).total;
    if !total.is_finite() {
        return Err(abort(format!("loss became {total}")));
    }
    adam_step(params, &grads, adam, cfg.head_lr).map_err(|e| abort(e.to_string()))?;
    Ok(StepLoss {
        class_wise,
        instance_wise: inst.value,
    })
}
