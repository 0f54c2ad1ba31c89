//! Acceptance checks, one printed PASS/FAIL line each. Exits nonzero if any fail.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use rstc::heads::{
    clustering_backward, clustering_logits, projection_backward, projection_pass, HeadParams,
};
use rstc::io::{parse_train_config, synth_generate, EmbeddingDataset, SynthConfig};
use rstc::losses::{class_wise_loss, instance_wise_loss};
use rstc::metrics::{accuracy, hungarian, nmi};
use rstc::numerics::{seeded_rng, softmax_rows, DenseMatrix, ProbVector};
use rstc::pseudo::PseudoLabels;
use rstc::trainer::{run_rstc, Labeler, TrainConfig};
use rstc::transport::{
    marginal_from_h, marginal_residual, newton_root_h, saot_objective, solve_fixed_marginal_ot,
    solve_saot, CostMatrix, Penalty, SaotConfig,
};

const FIXTURE_CONFIG: &str = include_str!("fixtures/small_mixture.cfg");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_predictions(rows: usize, cols: usize, spread: f64, rng: &mut impl Rng) -> DenseMatrix {
    let logits = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-spread..spread)).unwrap();
    softmax_rows(&logits).unwrap()
}

fn saot_grid_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let mut rng = seeded_rng(1000 + seed);
        let n = 2 + (seed as usize % 5);
        let p = random_predictions(n, 2, 2.0, &mut rng);
        let cost = CostMatrix::from_predictions(&p).unwrap();
        let cfg = SaotConfig {
            epsilon1: [0.05, 0.1, 0.2, 0.5][seed as usize % 4],
            epsilon2: [0.001, 0.01, 0.1, 1.0][(seed as usize / 4) % 4],
            ..SaotConfig::default()
        };
        let a = ProbVector::uniform(n);
        let b1 = rng.random_range(0.1..0.9);
        let init = ProbVector::new(vec![b1, 1.0 - b1]).unwrap();
        let sol = solve_saot(&cost, &a, &cfg, &init).unwrap();
        let mut best = f64::INFINITY;
        for k in 1..1000 {
            let b1 = k as f64 / 1000.0;
            let b = ProbVector::new(vec![b1, 1.0 - b1]).unwrap();
            let fixed = solve_fixed_marginal_ot(&cost, &a, &b, cfg.epsilon1, 20_000).unwrap();
            let v = saot_objective(&fixed.plan, &cost, b.as_slice(), &cfg, None).unwrap();
            best = best.min(v);
        }
        worst = worst.max(sol.objective - best);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-3 && secs < 60.0,
        format!("max(solver - grid) = {worst:.3e} over 20 instances, {secs:.1}s"),
    )
}

fn marginal_constraints() -> Outcome {
    let (mut worst_row, mut worst_col) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = seeded_rng(2000 + seed);
        let classes = if seed % 2 == 0 { 4 } else { 20 };
        let p = random_predictions(200, classes, 3.0, &mut rng);
        let cost = CostMatrix::from_predictions(&p).unwrap();
        let cfg = SaotConfig {
            epsilon2: [0.0, 0.001, 0.01, 0.1][(seed as usize / 2) % 4],
            penalty: if seed % 5 == 4 { Penalty::KlToPrevious } else { Penalty::LogBarrier },
            ..SaotConfig::default()
        };
        let a = ProbVector::uniform(200);
        let sol = solve_saot(&cost, &a, &cfg, &ProbVector::uniform(classes)).unwrap();
        let row: f64 = sol.plan.row_sums().iter().zip(a.as_slice()).map(|(s, t)| (s - t).abs()).sum();
        let col: f64 = sol
            .plan
            .column_sums()
            .iter()
            .zip(sol.marginal.as_slice())
            .map(|(s, t)| (s - t).abs())
            .sum();
        worst_row = worst_row.max(row);
        worst_col = worst_col.max(col);
    }
    outcome(
        worst_row <= 1e-6 && worst_col <= 1e-6,
        format!("max row L1 {worst_row:.2e}, max column L1 {worst_col:.2e} over 100 solves"),
    )
}

/// Plain bisection on the residual, widening the bracket until it changes sign.
fn bisect(g: &[f64], eps2: f64) -> f64 {
    let mut lo = g.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let mut width = 1.0;
    while marginal_residual(g, lo, eps2) > 0.0 {
        width *= 2.0;
        lo -= width;
    }
    while marginal_residual(g, hi, eps2) < 0.0 {
        width *= 2.0;
        hi += width;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if marginal_residual(g, mid, eps2) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn newton_solve() -> Outcome {
    let mut rng = seeded_rng(3000);
    let (mut worst_res, mut worst_b) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let c = rng.random_range(2..=20);
        let eps2 = 10f64.powf(rng.random_range(-3.0..0.0));
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let h0 = rng.random_range(-6.0..6.0);
        let h = newton_root_h(&g, eps2, h0, 10).unwrap();
        let oracle = bisect(&g, eps2);
        worst_res = worst_res.max(marginal_residual(&g, h, eps2).abs());
        let diff = marginal_from_h(&g, h, eps2)
            .iter()
            .zip(marginal_from_h(&g, oracle, eps2))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst_b = worst_b.max(diff);
    }
    let singular = marginal_from_h(&[0.3, 1.7, -2.0], 1.7, 0.05)[1];
    outcome(
        worst_res < 1e-8 && worst_b <= 1e-8 && singular == 0.5,
        format!(
            "max |sum b - 1| {worst_res:.2e}, max |b - b_bisect| {worst_b:.2e}, singular entry {singular}"
        ),
    )
}

fn flatten(p: &HeadParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.iter().copied()).collect()
}

fn rebuild(template: &HeadParams, flat: &[f64]) -> HeadParams {
    let mut rest = flat;
    let mut take = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        head.to_vec()
    };
    let mat = |m: &DenseMatrix, data: Vec<f64>| DenseMatrix::new(m.rows(), m.cols(), data).unwrap();
    let gp_weight = mat(&template.gp_weight, take(template.gp_weight.as_slice().len()));
    let gp_bias = take(template.gp_bias.len());
    let gz_weight1 = mat(&template.gz_weight1, take(template.gz_weight1.as_slice().len()));
    let gz_bias1 = take(template.gz_bias1.len());
    let gz_weight2 = mat(&template.gz_weight2, take(template.gz_weight2.as_slice().len()));
    let gz_bias2 = take(template.gz_bias2.len());
    HeadParams {
        gp_weight,
        gp_bias,
        gz_weight1,
        gz_bias1,
        gz_weight2,
        gz_bias2,
    }
}

struct GradCase {
    v1: DenseMatrix,
    v2: DenseMatrix,
    q: PseudoLabels,
    lambda: f64,
}

impl GradCase {
    /// (L_C, L_I) and their analytic gradients.
    fn eval(&self, p: &HeadParams) -> (f64, f64, HeadParams, HeadParams) {
        let mut gc = p.zeros_like();
        let p1 = softmax_rows(&clustering_logits(&self.v1, p).unwrap()).unwrap();
        let p2 = softmax_rows(&clustering_logits(&self.v2, p).unwrap()).unwrap();
        let cls = class_wise_loss(&self.q, &p1, &p2).unwrap();
        clustering_backward(&self.v1, &cls.d_logits1, &mut gc).unwrap();
        clustering_backward(&self.v2, &cls.d_logits2, &mut gc).unwrap();

        let mut gi = p.zeros_like();
        let pass1 = projection_pass(&self.v1, p).unwrap();
        let pass2 = projection_pass(&self.v2, p).unwrap();
        let inst = instance_wise_loss(&pass1.output, &pass2.output, 1.0).unwrap();
        projection_backward(&self.v1, &pass1, p, &inst.d_z1, &mut gi).unwrap();
        projection_backward(&self.v2, &pass2, p, &inst.d_z2, &mut gi).unwrap();
        (cls.value, inst.value, gc, gi)
    }
}

fn relative_error(fd: &[f64], an: &[f64]) -> f64 {
    let num: f64 = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = an.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    num / den
}

fn gradient_check() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..5u64 {
        let mut rng = seeded_rng(4000 + seed);
        let (n, d1, c, d2) = (8, 10, 3, 4);
        let v1 = DenseMatrix::from_fn(n, d1, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let v2 = DenseMatrix::from_fn(n, d1, |i, j| v1.get(i, j) + rng.random_range(-0.2..0.2)).unwrap();
        let q = PseudoLabels::new((0..n).map(|_| rng.random_range(0..c)).collect(), c, 0).unwrap();
        let case = GradCase { v1, v2, q, lambda: 10.0 };
        let params = HeadParams::init(d1, c, d2, 40 + seed).unwrap();
        let (_, _, gc, gi) = case.eval(&params);
        let an_c = flatten(&gc);
        let an_i = flatten(&gi);
        let an_t: Vec<f64> = an_c.iter().zip(&an_i).map(|(a, b)| a + case.lambda * b).collect();

        let base = flatten(&params);
        let step = 1e-5;
        let (mut fd_c, mut fd_i) = (Vec::new(), Vec::new());
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus[k] += step;
            let mut minus = base.clone();
            minus[k] -= step;
            let (cp, ip, _, _) = case.eval(&rebuild(&params, &plus));
            let (cm, im, _, _) = case.eval(&rebuild(&params, &minus));
            fd_c.push((cp - cm) / (2.0 * step));
            fd_i.push((ip - im) / (2.0 * step));
        }
        let fd_t: Vec<f64> = fd_c.iter().zip(&fd_i).map(|(a, b)| a + case.lambda * b).collect();
        worst[0] = worst[0].max(relative_error(&fd_c, &an_c));
        worst[1] = worst[1].max(relative_error(&fd_i, &an_i));
        worst[2] = worst[2].max(relative_error(&fd_t, &an_t));
    }
    outcome(
        worst.iter().all(|&w| w < 1e-4),
        format!(
            "relative error class-wise {:.2e}, instance-wise {:.2e}, combined {:.2e} (5 instances)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn mixture(ratio: f64, seed: u64) -> EmbeddingDataset {
    synth_generate(&SynthConfig {
        ratio,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn fixture_config(seed: u64) -> TrainConfig {
    let mut cfg = parse_train_config(FIXTURE_CONFIG).unwrap();
    cfg.seed = seed;
    cfg
}

fn cluster_count(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn degeneracy() -> Outcome {
    let runs: Vec<(usize, f64, f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let ds = mixture(10.0, seed);
                    let truth = ds.labels.clone().unwrap();
                    let mut cfg = fixture_config(seed);
                    cfg.saot.epsilon2 = 0.001;
                    let (adaptive, _) = run_rstc(&ds, 4, &cfg).unwrap();
                    cfg.labeler = Labeler::Fixed;
                    let (fixed, _) = run_rstc(&ds, 4, &cfg).unwrap();
                    (
                        cluster_count(&adaptive),
                        accuracy(&truth, &adaptive).unwrap(),
                        accuracy(&truth, &fixed).unwrap(),
                        nmi(&truth, &adaptive).unwrap(),
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let four = runs.iter().filter(|r| r.0 == 4).count();
    let worse = runs.iter().filter(|r| r.2 < r.1).count();
    let cells: Vec<String> = runs
        .iter()
        .map(|r| format!("{}/{:.3}/{:.3}", r.0, r.1, r.2))
        .collect();
    outcome(
        four >= 4 && worse >= 3,
        format!(
            "4 clusters in {four}/5 seeds, uniform marginal worse in {worse}/5 (clusters/ACC/ACC uniform: {})",
            cells.join(" ")
        ),
    )
}

fn end_to_end() -> Outcome {
    let ds = mixture(1.0, 0);
    let truth = ds.labels.clone().unwrap();
    let start = Instant::now();
    let (labels, _) = run_rstc(&ds, 4, &fixture_config(0)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let acc = accuracy(&truth, &labels).unwrap();
    let score = nmi(&truth, &labels).unwrap();
    outcome(
        acc >= 0.95 && score >= 0.85 && secs < 300.0,
        format!("ACC {acc:.4}, NMI {score:.4}, {secs:.1}s"),
    )
}

fn entropy_insensitivity() -> Outcome {
    let ds = mixture(1.0, 0);
    let truth = ds.labels.clone().unwrap();
    let accs: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = [0.05, 0.1, 0.2, 0.5]
            .into_iter()
            .map(|eps1| {
                let (ds, truth) = (&ds, &truth);
                s.spawn(move || {
                    let mut cfg = fixture_config(0);
                    cfg.saot.epsilon1 = eps1;
                    let (labels, _) = run_rstc(ds, 4, &cfg).unwrap();
                    accuracy(truth, &labels).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = 100.0 * (max - min);
    outcome(
        spread <= 5.0,
        format!(
            "ACC over epsilon1 0.05/0.1/0.2/0.5 = {}, spread {spread:.2} points",
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn brute_force_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let k = truth.iter().chain(pred).max().unwrap() + 1;
    permutations(k)
        .iter()
        .map(|perm| truth.iter().zip(pred).filter(|(&t, &p)| perm[p] == t).count())
        .max()
        .unwrap() as f64
        / truth.len() as f64
}

fn entropy_of(labels: &[usize]) -> f64 {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1.0;
    }
    let n = labels.len() as f64;
    counts.values().map(|c| -(c / n) * (c / n).ln()).sum()
}

fn oracle_nmi(truth: &[usize], pred: &[usize]) -> f64 {
    let joint: Vec<usize> = truth.iter().zip(pred).map(|(t, p)| t * 1000 + p).collect();
    let (ht, hp) = (entropy_of(truth), entropy_of(pred));
    if ht == 0.0 || hp == 0.0 {
        return if ht == 0.0 && hp == 0.0 { 1.0 } else { 0.0 };
    }
    (ht + hp - entropy_of(&joint)) / (ht * hp).sqrt()
}

fn metrics() -> Outcome {
    let mut acc_mismatch = 0;
    let mut nmi_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = seeded_rng(5000 + seed);
        let ct = rng.random_range(1..=6);
        let cp = rng.random_range(1..=6);
        let n = rng.random_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..ct)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..cp)).collect();
        if (accuracy(&truth, &pred).unwrap() - brute_force_accuracy(&truth, &pred)).abs() > 1e-12 {
            acc_mismatch += 1;
        }
        nmi_err = nmi_err.max((nmi(&truth, &pred).unwrap() - oracle_nmi(&truth, &pred)).abs());
    }
    let perms = permutations(6);
    let mut hung_err = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = seeded_rng(6000 + seed);
        let cost = DenseMatrix::from_fn(6, 6, |_, _| rng.random_range(-10.0..10.0)).unwrap();
        let best = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        hung_err = hung_err.max((hungarian(&cost).unwrap().total_cost - best).abs());
    }
    outcome(
        acc_mismatch == 0 && hung_err < 1e-9 && nmi_err <= 1e-10,
        format!(
            "accuracy mismatches {acc_mismatch}/100, max Hungarian gap {hung_err:.1e} over 50, max NMI error {nmi_err:.1e}"
        ),
    )
}

fn rstc(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rstc"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), FIXTURE_CONFIG).unwrap();
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        rstc(&["synth", "--seed", "7", "--out", "data.emb1"], d)?;
        let mut files = Vec::new();
        for tag in ["a", "b"] {
            let (assign, report) = (format!("assign_{tag}.txt"), format!("report_{tag}.csv"));
            rstc(
                &[
                    "cluster", "--data", "data.emb1", "--classes", "4", "--config", "run.cfg", "--seed", "3",
                    "--out-assignments", &assign, "--out-report", &report,
                ],
                d,
            )?;
            files.push((
                std::fs::read(d.join(&assign)).unwrap(),
                std::fs::read(d.join(&report)).unwrap(),
            ));
        }
        let same_assign = files[0].0 == files[1].0;
        let same_report = files[0].1 == files[1].1;
        if same_assign && same_report {
            Ok(files.swap_remove(0))
        } else {
            Err(format!("assignments identical: {same_assign}, reports identical: {same_report}"))
        }
    };
    match run() {
        Ok((assign, report)) => outcome(
            true,
            format!(
                "two runs gave identical files ({} assignment bytes, {} report bytes)",
                assign.len(),
                report.len()
            ),
        ),
        Err(e) => outcome(false, e),
    }
}

fn main() {
    type Check = fn() -> Outcome;
    let checks: [(&str, Check); 9] = [
        ("transport matches grid search over the marginal", saot_grid_oracle),
        ("transport plans meet both marginals", marginal_constraints),
        ("marginal root converges in ten steps", newton_solve),
        ("head gradients match finite differences", gradient_check),
        ("adaptive marginal avoids collapse under imbalance", degeneracy),
        ("end-to-end clustering of a balanced mixture", end_to_end),
        ("accuracy is insensitive to the entropy weight", entropy_insensitivity),
        ("accuracy, Hungarian and NMI match brute force", metrics),
        ("cluster command is deterministic", cli_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("{} of {} acceptance checks passed", 9 - failed, 9);
    if failed > 0 {
        std::process::exit(1);
    }
}
