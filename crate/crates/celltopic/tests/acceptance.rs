//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use celltopic_core::cluster::{ari, nmi};
use celltopic_core::data::{generate_synthetic, PathwayDb, SynthConfig, SyntheticDataset};
use celltopic_core::metrics::{
    benjamini_hochberg, enrichment_score, full_report, gsea, hypergeom_upper_tail, interpretation_purity,
    max_running_sum_residual, permutation_p, running_sum, topic_diversity, GseaConfig, MetricsConfig,
};
use celltopic_core::model::loss::{consistency, mean_entropy, neighborhood, reconstruction, row_entropy};
use celltopic_core::model::{train_with, TopicOutputs, TrainConfig, TrainInputs, TrainResult, Trainer};
use celltopic_core::ot::{ecr_term, plan_violation, sinkhorn, SinkhornConfig};
use celltopic_core::rng::{normal_matrix, seeded};
use celltopic_core::tensor::grad_check;
use celltopic_core::{Matrix, Tape, Var};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn sinkhorn_feasibility() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(101);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..100 {
        let v = rng.gen_range(1..=200);
        let k = rng.gen_range(1..=20);
        let epsilon = [1.0, 0.1, 0.05][i % 3];
        let e = rng.gen_range(2..=16);
        let genes = normal_matrix(&mut rng, v, e, 0.5);
        let topics = normal_matrix(&mut rng, k, e, 0.5);
        let cost = genes.sq_dist(&topics).unwrap();
        match sinkhorn(&cost, &SinkhornConfig { epsilon, ..Default::default() }) {
            Ok(plan) => {
                let viol = plan_violation(&plan.pi);
                let nonneg = plan.pi.as_slice().iter().all(|&p| p >= 0.0);
                worst = worst.max(viol);
                if viol.is_nan() || viol >= 1e-6 || !nonneg {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let t = start.elapsed();
    Outcome::new(
        failures == 0 && t < Duration::from_secs(10),
        format!("100 problems, max L1 violation {worst:.2e}, {failures} failures, {}", secs(t)),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (b, v, k, e) = (4, 6, 3, 4);
    let mut rng = seeded(202);
    let mut x = Matrix::zeros(b, v);
    x.as_mut_slice().iter_mut().for_each(|c| *c = rng.gen_range(0..6) as f64);
    let zeta = normal_matrix(&mut rng, b, k, 1.0);
    let tau = 1.0;

    let gene_topic = |t: &mut Tape, g: Var, tk: Var| {
        let d = t.sq_dist(g, tk);
        let s = t.scale(d, -1.0 / tau);
        t.softmax_rows(s)
    };

    let mut results = Vec::new();
    let re = grad_check(
        |t, p| {
            let half = t.scale(p[1], 0.5);
            let sigma = t.exp(half);
            let z = t.constant(zeta.clone());
            let jitter = t.mul(sigma, z);
            let logits = t.add(p[0], jitter);
            let theta = t.softmax_rows(logits);
            let o = gene_topic(t, p[2], p[3]);
            let xv = t.constant(x.clone());
            reconstruction(t, theta, o, xv, p[0], p[1])
        },
        &[
            normal_matrix(&mut rng, b, k, 1.0),
            normal_matrix(&mut rng, b, k, 0.3),
            normal_matrix(&mut rng, v, e, 0.7),
            normal_matrix(&mut rng, k, e, 0.7),
        ],
    );
    results.push(("L_RE", re));

    let con = grad_check(
        |t, p| {
            let theta = t.softmax_rows(p[0]);
            let phi = t.softmax_rows(p[1]);
            consistency(t, theta, phi)
        },
        &[normal_matrix(&mut rng, b, k, 1.0), normal_matrix(&mut rng, b, k, 1.0)],
    );
    results.push(("L_CON", con));

    let nei = grad_check(
        |t, p| {
            let s: Vec<Var> = p.iter().map(|&l| t.softmax_rows(l)).collect();
            neighborhood(t, s[0], s[1], s[2], s[3], 0.5)
        },
        &(0..4).map(|_| normal_matrix(&mut rng, b, k, 1.0)).collect::<Vec<_>>(),
    );
    results.push(("L_NEI", nei));

    let reg_params = [normal_matrix(&mut rng, b, k, 1.0), normal_matrix(&mut rng, b, k, 1.0)];
    let reg_cell = grad_check(
        |t, p| {
            let a = row_entropy(t, p[0]);
            let c = row_entropy(t, p[1]);
            t.add(a, c)
        },
        &reg_params,
    );
    let reg_mean = grad_check(
        |t, p| {
            let a = mean_entropy(t, p[0]);
            let c = mean_entropy(t, p[1]);
            t.add(a, c)
        },
        &reg_params,
    );
    results.push(("L_REG per-cell", reg_cell));
    results.push(("L_REG batch-mean", reg_mean));

    let genes = normal_matrix(&mut rng, v, e, 0.7);
    let topics = normal_matrix(&mut rng, k, e, 0.7);
    let plan = sinkhorn(&genes.sq_dist(&topics).unwrap(), &SinkhornConfig::default()).unwrap();
    let ecr = grad_check(
        |t, p| {
            let pi = t.constant(plan.pi.clone());
            ecr_term(t, p[0], p[1], pi)
        },
        &[genes, topics],
    );
    results.push(("L_ECR", ecr));

    let t = start.elapsed();
    let mut pass = t < Duration::from_secs(30);
    let mut parts = Vec::new();
    for (name, r) in results {
        match r {
            Ok(err) => {
                pass &= err < 1e-4;
                parts.push(format!("{name} {err:.1e}"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    Outcome::new(pass, format!("max relative error: {}; {}", parts.join(", "), secs(t)))
}

fn on_simplex(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for row in m.iter_rows() {
        if row.iter().any(|&p| p.is_nan() || p < 0.0) {
            return f64::INFINITY;
        }
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    worst
}

fn simplex_invariants() -> Outcome {
    let s = generate_synthetic(&SynthConfig { n_cells: 60, n_genes: 40, n_topics: 4, view_dim: 8, seed: 3, ..Default::default() })
        .unwrap();
    let d = &s.dataset;
    let cfg = TrainConfig {
        n_topics: 4,
        embed_dim: 8,
        hidden: 16,
        batch_size: Some(16),
        knn_k: 5,
        epochs: 1,
        ..Default::default()
    };
    let run = || -> celltopic_core::Result<f64> {
        let inputs = TrainInputs::new(d.expression.map(f64::ln_1p), d.external.clone(), cfg.knn_k)?;
        let mut trainer = Trainer::new(inputs, cfg.clone())?;
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let step = trainer.step()?;
            worst = worst.max(on_simplex(&step.theta));
            worst = worst.max(on_simplex(&trainer.gene_topic()?));
            worst = worst.max(on_simplex(&trainer.infer_theta()?));
        }
        Ok(worst)
    };
    match run() {
        Ok(w) => Outcome::new(w < 1e-6, format!("50 steps, max |row sum - 1| {w:.1e}, all entries nonnegative: {}", w.is_finite())),
        Err(e) => Outcome::new(false, format!("training failed: {e}")),
    }
}

fn planted_config(seed: u64, lambda: f64) -> TrainConfig {
    TrainConfig { n_topics: 5, epochs: 200, lambda, seed, ..Default::default() }
}

fn planted_data() -> SyntheticDataset {
    generate_synthetic(&SynthConfig::default()).unwrap()
}

fn planted_recovery(s: &SyntheticDataset, result: &celltopic_core::Result<TrainResult>, t: Duration) -> Outcome {
    match result {
        Ok(r) => {
            let pred = r.outputs.theta.argmax_rows();
            let a = ari(&pred, &s.labels).unwrap();
            let ip = interpretation_purity(&r.outputs.theta, &s.labels).unwrap();
            Outcome::new(
                a >= 0.8 && ip >= 0.8 && t < Duration::from_secs(300),
                format!("ARI {a:.3}, IP {ip:.3}, {}", secs(t)),
            )
        }
        Err(e) => Outcome::new(false, format!("training failed: {e}")),
    }
}

fn ecr_direction(s: &SyntheticDataset, seed0_full: &celltopic_core::Result<TrainResult>) -> Outcome {
    let start = Instant::now();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..5u64 {
        for lambda in [20.0, 0.0] {
            let td = if seed == 0 && lambda == 20.0 {
                seed0_full.as_ref().map(|r| topic_diversity(&r.outputs.top_genes)).map_err(|e| e.to_string())
            } else {
                train_with(&s.dataset, &planted_config(seed, lambda), |_| {})
                    .map(|r| topic_diversity(&r.outputs.top_genes))
                    .map_err(|e| e.to_string())
            };
            match td {
                Ok(td) if lambda > 0.0 => with.push(td),
                Ok(td) => without.push(td),
                Err(e) => return Outcome::new(false, format!("seed {seed}, lambda {lambda}: {e}")),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    Outcome::new(
        a > b,
        format!("mean TD lambda=20 {a:.3} [{}] vs lambda=0 {b:.3} [{}], {}", fmt(&with), fmt(&without), secs(start.elapsed())),
    )
}

fn binom_exact(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Partitions of `n` items as restricted growth strings.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(cur: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        let next = cur.iter().max().map_or(0, |m| m + 1);
        for c in 0..=next {
            cur.push(c);
            grow(cur, n, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

fn pair_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            pairs += 1.0;
            both += f64::from(u8::from(sa && sb));
            in_a += f64::from(u8::from(sa));
            in_b += f64::from(u8::from(sb));
        }
    }
    let expected = in_a * in_b / pairs;
    let max = 0.5 * (in_a + in_b);
    if max == expected {
        return if both == max { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

fn entropy_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let values = |x: &[usize]| {
        let mut v = x.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (va, vb) = (values(a), values(b));
    let p = |pred: &dyn Fn(usize) -> bool| (0..a.len()).filter(|&i| pred(i)).count() as f64 / n;
    let h = |vals: &[usize], x: &[usize]| -> f64 {
        vals.iter().map(|&c| p(&|i| x[i] == c)).map(|q| -q * q.ln()).sum()
    };
    let (ha, hb) = (h(&va, a), h(&vb, b));
    if ha == 0.0 || hb == 0.0 {
        return if va.len() == vb.len() { 1.0 } else { 0.0 };
    }
    let mut mi = 0.0;
    for &ca in &va {
        for &cb in &vb {
            let pab = p(&|i| a[i] == ca && b[i] == cb);
            if pab > 0.0 {
                mi += pab * (pab / (p(&|i| a[i] == ca) * p(&|i| b[i] == cb))).ln();
            }
        }
    }
    mi / (ha * hb).sqrt()
}

fn step_up_bh(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0; p.len()];
    for (rank_i, &i) in order.iter().enumerate() {
        let best = order[rank_i..]
            .iter()
            .enumerate()
            .map(|(off, &j)| p[j] * m / (rank_i + off + 1) as f64)
            .fold(f64::INFINITY, f64::min);
        q[i] = best.min(1.0).max(p[i]);
    }
    q
}

fn statistics_oracles() -> Outcome {
    let start = Instant::now();
    let mut hyper_worst = 0.0f64;
    let mut hyper_configs = 0;
    for pop in 1..=20u64 {
        for succ in 0..=pop {
            for draws in 0..=pop {
                let total = binom_exact(pop, draws);
                for obs in 0..=draws.min(succ) {
                    let tail: u128 = (obs..=draws.min(succ))
                        .map(|x| binom_exact(succ, x) * binom_exact(pop - succ, draws - x))
                        .sum();
                    let exact = tail as f64 / total as f64;
                    let got = hypergeom_upper_tail(pop, succ, draws, obs).unwrap();
                    hyper_worst = hyper_worst.max((got - exact).abs());
                    hyper_configs += 1;
                }
            }
        }
    }

    let mut rng = seeded(606);
    let mut bh_worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.gen_range(1..=60);
        let p: Vec<f64> = (0..m)
            .map(|_| if rng.gen_bool(0.2) { (rng.gen_range(0..5) as f64) / 10.0 } else { rng.gen::<f64>().powi(3) })
            .collect();
        let got = benjamini_hochberg(&p).unwrap();
        for (a, b) in got.iter().zip(step_up_bh(&p)) {
            bh_worst = bh_worst.max((a - b).abs());
        }
    }

    let mut cluster_worst = 0.0f64;
    let mut cluster_pairs = 0;
    for n in 2..=6 {
        let parts = partitions(n);
        for a in &parts {
            for b in &parts {
                let da = (ari(a, b).unwrap() - pair_ari(a, b)).abs();
                let dn = (nmi(a, b).unwrap() - entropy_nmi(a, b)).abs();
                cluster_worst = cluster_worst.max(da).max(dn);
                cluster_pairs += 1;
            }
        }
    }
    Outcome::new(
        hyper_worst <= 1e-10 && bh_worst <= 1e-12 && cluster_worst <= 1e-12,
        format!(
            "hypergeometric {hyper_configs} configs max err {hyper_worst:.1e}; BH 1000 vectors max err {bh_worst:.1e}; \
             ARI/NMI {cluster_pairs} partition pairs max err {cluster_worst:.1e}; {}",
            secs(start.elapsed())
        ),
    )
}

fn gsea_checks(outputs: &[(TopicOutputs, PathwayDb)]) -> Outcome {
    let mut residual = 0.0f64;
    let mut walks = 0;
    for (o, db) in outputs {
        for w in [1.0, 0.0] {
            residual = residual.max(max_running_sum_residual(&o.gene_topic, &o.gene_names, db, w));
        }
        walks += o.n_topics() * db.len();
    }

    let run = running_sum(&[4.0, 3.0, 2.0, 1.0], &[true, false, true, false], 0.0);
    let hand_ok = run.as_deref() == Some(&[0.5, 0.0, 0.5, 0.0][..]) && enrichment_score(run.as_deref().unwrap_or(&[])) == 0.5;

    let mut rng = seeded(707);
    let mut scores: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let p1 = permutation_p(0.3, &scores, 15, 1.0, 1000, 42);
    let p2 = permutation_p(0.3, &scores, 15, 1.0, 1000, 42);
    let (o, db) = &outputs[0];
    let cfg = GseaConfig { n_perm: 200, seed: 5, ..Default::default() };
    let g1 = gsea(&o.gene_topic, &o.gene_names, db, &cfg).unwrap();
    let g2 = gsea(&o.gene_topic, &o.gene_names, db, &cfg).unwrap();
    let bits = |r: &celltopic_core::metrics::EnrichmentResult| r.records.iter().map(|x| x.p.to_bits()).collect::<Vec<_>>();
    let repro = p1.to_bits() == p2.to_bits() && bits(&g1) == bits(&g2);

    Outcome::new(
        residual <= 1e-9 && hand_ok && repro,
        format!("{walks} walks, max |end| {residual:.1e}; hand example ES 0.5: {hand_ok}; permutation p bit-identical: {repro}"),
    )
}

fn metric_identities(outputs: &[(TopicOutputs, PathwayDb, Vec<usize>)]) -> Outcome {
    let mut worst = 0.0f64;
    let cfg = MetricsConfig { gsea: GseaConfig { n_perm: 200, ..Default::default() }, ..Default::default() };
    for (o, db, labels) in outputs {
        match full_report(o, labels, db, &cfg) {
            Ok(r) => worst = worst.max(r.identity_residual()),
            Err(e) => return Outcome::new(false, format!("report failed: {e}")),
        }
    }
    Outcome::new(worst <= 1e-12, format!("{} reports, max identity residual {worst:.1e}", outputs.len()))
}

fn random_outputs(seed: u64) -> (TopicOutputs, PathwayDb, Vec<usize>) {
    let mut rng = seeded(seed);
    let (n, v, k) = (40, 50, 4);
    let theta = normal_matrix(&mut rng, n, k, 2.0).softmax_rows();
    let o = normal_matrix(&mut rng, v, k, 2.0).softmax_rows();
    let names: Vec<String> = (0..v).map(|g| format!("G{g}")).collect();
    let mut db = PathwayDb::new();
    for p in 0..6 {
        let genes: Vec<String> = names.iter().filter(|_| rng.gen_bool(0.2)).cloned().collect();
        if !genes.is_empty() {
            db.insert(format!("P{p}"), genes).unwrap();
        }
    }
    db.insert("head", names[..5].to_vec()).unwrap();
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    (TopicOutputs::new(theta, o, names, 10).unwrap(), db, labels)
}

fn cli_determinism() -> Outcome {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_celltopic");
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let pipeline = |root: &Path| -> Result<Vec<u8>, String> {
        let call = |args: &[&str]| -> Result<(), String> {
            let o = Command::new(bin).arg("-q").args(args).output().map_err(|e| e.to_string())?;
            if o.status.success() {
                Ok(())
            } else {
                Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
            }
        };
        let p = |s: &str| root.join(s).to_string_lossy().into_owned();
        call(&["synth", "--seed", "7", "--out", &p("data")])?;
        call(&[
            "train", "--expression", &p("data/expression.csv"), "--embedding", &p("data/embedding.csv"),
            "--topics", "5", "--embed-dim", "32", "--hidden", "64", "--epochs", "20", "--seed", "0", "--out", &p("model"),
        ])?;
        call(&[
            "eval", "--model", &p("model"), "--labels", &p("data/labels.csv"), "--gmt", &p("data/pathways.gmt"),
            "--n-perm", "200", "--seed", "0", "--out", &p("eval"),
        ])?;
        fs::read(root.join("eval/report.json")).map_err(|e| e.to_string())
    };
    let a = pipeline(&dir.path().join("a"));
    let b = pipeline(&dir.path().join("b"));
    match (a, b) {
        (Ok(a), Ok(b)) => Outcome::new(
            a == b,
            format!("report.json {} bytes, identical: {}, {}", a.len(), a == b, secs(start.elapsed())),
        ),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}

fn main() -> ExitCode {
    // libtest-style flags (e.g. --nocapture) are accepted and ignored
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, name: &'static str, o: Outcome| {
        println!("{id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report("AC1", "sinkhorn feasibility", sinkhorn_feasibility());
    report("AC2", "gradient suite", gradient_suite());
    report("AC3", "simplex invariants", simplex_invariants());

    let s = planted_data();
    let start = Instant::now();
    let full = train_with(&s.dataset, &planted_config(0, 20.0), |_| {});
    let t = start.elapsed();
    report("AC4", "planted recovery", planted_recovery(&s, &full, t));
    report("AC5", "ECR ablation direction", ecr_direction(&s, &full));
    report("AC6", "statistics oracles", statistics_oracles());

    let mut samples: Vec<(TopicOutputs, PathwayDb, Vec<usize>)> = (0..4).map(|i| random_outputs(800 + i)).collect();
    if let Ok(r) = &full {
        samples.insert(0, (r.outputs.clone(), s.signature_pathways(), s.labels.clone()));
    }
    let gsea_inputs: Vec<(TopicOutputs, PathwayDb)> = samples.iter().map(|(o, db, _)| (o.clone(), db.clone())).collect();
    report("AC7", "GSEA self-checks", gsea_checks(&gsea_inputs));
    report("AC8", "metric identities", metric_identities(&samples));
    report("AC9", "CLI determinism", cli_determinism());

    let failed: Vec<&str> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    println!("\n{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
