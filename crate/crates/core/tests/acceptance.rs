//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use geotrust_core::clustering::{elbow_scan, fit_kmeans_restarts, CentroidModel, ElbowOptions};
use geotrust_core::config::PipelineConfig;
use geotrust_core::data::{FeatureMatrix, PredictionStack, Space};
use geotrust_core::evaluation::{calibration, discard_curve, seg_metrics, CalibrationMode, ConfusionCounts};
use geotrust_core::fusion::{build_features, stratified_split, train_combiner, FeatureSpec, TrainOptions};
use geotrust_core::link::{decile_group, group_trend};
use geotrust_core::ood::{centroid_distances, ncdd, score_population, NcddParams};
use geotrust_core::pipeline::Pipeline;
use geotrust_core::record::{SceneEvaluation, SceneRecord, Split};
use geotrust_core::synth::{sample_mixture, synth_generate, write_dataset, MixtureSpec, SynthConfig};
use geotrust_core::uncertainty::{binary_entropy, pixel_metrics};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn matrix(values: Vec<f64>, dim: usize, prefix: &str) -> FeatureMatrix {
    let n = values.len() / dim;
    let ids = (0..n).map(|i| format!("{prefix}{i:05}")).collect();
    FeatureMatrix::new(ids, values, dim, Space::Raw).unwrap()
}

// Oracle: probability that a positive outscores a negative, by pair counting.
fn auroc_pairs(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &q in neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

// Oracle: minimum-cost perfect matching by dynamic programming over subsets.
fn min_matching(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask].is_infinite() {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row == n {
            continue;
        }
        for col in 0..n {
            if mask & (1 << col) == 0 {
                let next = mask | (1 << col);
                let c = best[mask] + cost[row][col];
                if c < best[next] {
                    best[next] = c;
                    choice[next] = col;
                }
            }
        }
    }
    let mut assignment = vec![0; n];
    let mut mask = full - 1;
    for row in (0..n).rev() {
        let col = choice[mask];
        assignment[row] = col;
        mask &= !(1 << col);
    }
    assignment
}

fn ncdd_bounds() -> Outcome {
    let start = Instant::now();
    let (k, dim) = (15, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let centroids: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let meta = geotrust_core::clustering::FitMeta {
        seed: 0,
        iterations_run: 0,
        wcss: 0.0,
        feature_dim: dim,
        converged: true,
    };
    let model = CentroidModel::from_centroids(centroids, k, dim, Space::Raw, meta).unwrap();
    let params = NcddParams::for_k(k).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d = centroid_distances(&model, &x).unwrap();
        let v = ncdd(&d.normalized, &params).unwrap();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mut coincident = vec![1.0; k];
    coincident[4] = 0.0;
    let top = ncdd(&coincident, &params).unwrap();
    let ambiguous = ncdd(&vec![1.0; k], &params).unwrap();
    let elapsed = start.elapsed();
    outcome(
        lo >= 0.0 && hi <= 14.0 && top == 14.0 && ambiguous == 0.0 && elapsed < Duration::from_secs(5),
        format!("range [{lo:.4}, {hi:.4}], coincident {top}, ambiguous {ambiguous}, {elapsed:.2?}"),
    )
}

fn kmeans_recovery() -> Outcome {
    let start = Instant::now();
    let spec = MixtureSpec::default();
    let centers = spec.centers().unwrap();
    let min_sep = (0..centers.len())
        .flat_map(|a| (a + 1..centers.len()).map(move |b| (a, b)))
        .map(|(a, b)| centers[a].iter().zip(&centers[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (values, _) = sample_mixture(&spec, 3000, 0.0, &mut rng).unwrap();
    let x = matrix(values, spec.dim, "p");
    let candidates: Vec<usize> = (2..=30).collect();
    let (scan, models) = elbow_scan(&x, &candidates, 5, &ElbowOptions::default()).unwrap();
    let model = models
        .iter()
        .find(|m| m.k() == 15)
        .expect("k = 15 was scanned");
    let cost: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            (0..model.k())
                .map(|j| model.centroid(j).iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let matching = min_matching(&cost);
    let worst = matching
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        scan.chosen_k == 15 && worst <= 0.05 && min_sep >= 2.0 && elapsed < Duration::from_secs(30),
        format!(
            "elbow k={}, worst matched centroid error {worst:.4}, center separation {min_sep:.3}, {elapsed:.2?}",
            scan.chosen_k
        ),
    )
}

fn ood_separation() -> Outcome {
    let spec = MixtureSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (reference, _) = sample_mixture(&spec, 1500, 0.0, &mut rng).unwrap();
    let model = fit_kmeans_restarts(&matrix(reference, spec.dim, "r"), 15, 1, 4, 300, 1e-6).unwrap();
    let params = NcddParams::for_k(15).unwrap();
    let d_nearest = |values: Vec<f64>, prefix: &str| -> Vec<f64> {
        score_population(&model, &matrix(values, spec.dim, prefix), &params)
            .unwrap()
            .iter()
            .map(|s| s.d_nearest)
            .collect()
    };
    let id = d_nearest(sample_mixture(&spec, 500, 0.0, &mut rng).unwrap().0, "i");
    let ood = d_nearest(sample_mixture(&spec, 500, 5.0, &mut rng).unwrap().0, "o");
    let null = d_nearest(sample_mixture(&spec, 500, 0.0, &mut rng).unwrap().0, "n");
    let shifted = auroc_pairs(&ood, &id);
    let unshifted = auroc_pairs(&null, &id);
    let core_shifted = geotrust_core::evaluation::auroc(&ood, &id).unwrap();
    outcome(
        shifted >= 0.99 && (0.45..=0.55).contains(&unshifted) && (core_shifted - shifted).abs() < 1e-12,
        format!("AUROC shift 5: {shifted:.4}, shift 0: {unshifted:.4}"),
    )
}

fn uncertainty_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (m, h, w) = (5, 1000, 1000);
    let n = h * w;
    let mut failures = Vec::new();

    let probs: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>()).collect();
    let px = pixel_metrics(&PredictionStack::new("random", m, h, w, probs, None).unwrap()).unwrap();
    let var_ok = px.variance.iter().all(|&v| (0.0..=0.25).contains(&v));
    let mi_ok = px
        .mutual_info
        .iter()
        .zip(&px.mean_prob)
        .all(|(&i, &p)| i >= 0.0 && i <= binary_entropy(p));
    if !var_ok {
        failures.push("variance range");
    }
    if !mi_ok {
        failures.push("mutual information range");
    }

    let binary: Vec<f64> = (0..m * n).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
    let px = pixel_metrics(&PredictionStack::new("binary", m, h, w, binary, None).unwrap()).unwrap();
    let worst_binary = px
        .variance
        .iter()
        .zip(&px.mean_prob)
        .map(|(&v, &p)| (v - p * (1.0 - p)).abs())
        .fold(0.0, f64::max);
    if worst_binary > 1e-12 {
        failures.push("binary members variance");
    }

    let base: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let same: Vec<f64> = (0..m).flat_map(|_| base.iter().copied()).collect();
    let px = pixel_metrics(&PredictionStack::new("same", m, h, w, same, None).unwrap()).unwrap();
    if !px.variance.iter().chain(&px.mutual_info).all(|&v| v == 0.0) {
        failures.push("identical members");
    }
    let h_half = (binary_entropy(0.5) - std::f64::consts::LN_2).abs();
    if h_half > 1e-12 {
        failures.push("H(0.5)");
    }
    outcome(
        failures.is_empty(),
        format!("{n} pixels x 3 stacks, binary max error {worst_binary:.1e}, failures {failures:?}"),
    )
}

fn calibration_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (n, bins) = (100_000, 15);
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let b = i % bins;
        let p = (b as f64 + rng.random::<f64>()) / bins as f64;
        probs.push(p);
        labels.push(u8::from(rng.random::<f64>() < p));
    }
    let ece = calibration(&probs, &labels, CalibrationMode::Ece, bins).unwrap().error;

    let ones = vec![1.0; 1000];
    let zeros = vec![0u8; 1000];
    let worst_ece = calibration(&ones, &zeros, CalibrationMode::Ece, bins).unwrap().error;
    let worst_ace = calibration(&ones, &zeros, CalibrationMode::Ace, bins).unwrap().error;

    let pool: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
    let pool_labels: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
    let mut unbalanced = None;
    'outer: for len in 1..=1000 {
        for m in 1..=len {
            let r = calibration(&pool[..len], &pool_labels[..len], CalibrationMode::Ace, m).unwrap();
            let sizes = r.bins.iter().map(|b| b.count);
            let (lo, hi) = sizes.fold((usize::MAX, 0), |(lo, hi), c| (lo.min(c), hi.max(c)));
            if hi - lo > 1 || r.bins.len() != m || r.bins.iter().map(|b| b.count).sum::<usize>() != len {
                unbalanced = Some((len, m));
                break 'outer;
            }
        }
    }
    outcome(
        ece <= 0.02 && worst_ece == 1.0 && worst_ace == 1.0 && unbalanced.is_none(),
        format!("ECE {ece:.4} at n={n}, confident-wrong ECE {worst_ece} ACE {worst_ace}, ACE imbalance {unbalanced:?}"),
    )
}

fn aurc_of_order(f1: &[f64], discard_first: &[usize]) -> f64 {
    // rank i in the discard order gets score N - i, so it is discarded i-th
    let n = f1.len();
    let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let mut scores = vec![None; n];
    for (rank, &i) in discard_first.iter().enumerate() {
        scores[i] = Some((n - rank) as f64);
    }
    discard_curve("order", &ids, &scores, f1).unwrap().aurc
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn risk_coverage() -> Outcome {
    let f1 = [0.1, 0.4, 0.7, 1.0];
    let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    let oracle: Vec<Option<f64>> = f1.iter().map(|v| Some(1.0 - v)).collect();
    let curve = discard_curve("oracle", &ids, &oracle, &f1).unwrap();
    let risks: Vec<f64> = curve.points.iter().rev().map(|p| p.risk).collect();
    // enumerated by hand: mean of 1 - f1 over the retained scenes at each coverage
    let expected_risks = [0.45, 0.3, 0.15, 0.0];
    let expected_aurc = 0.225;
    let fixture_ok = risks.iter().zip(expected_risks).all(|(a, b)| (a - b).abs() < 1e-4)
        && (curve.aurc - expected_aurc).abs() < 1e-4;

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_gap: f64 = 0.0;
    for n in 1..=6 {
        let perms = permutations(n);
        for _ in 0..20 {
            let f1: Vec<f64> = (0..n).map(|_| (rng.random_range(0..=10) as f64) / 10.0).collect();
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let oracle: Vec<Option<f64>> = f1.iter().map(|v| Some(1.0 - v)).collect();
            let got = discard_curve("oracle", &ids, &oracle, &f1).unwrap().aurc;
            let best = perms.iter().map(|p| aurc_of_order(&f1, p)).fold(f64::INFINITY, f64::min);
            worst_gap = worst_gap.max(got - best);
        }
    }
    outcome(
        fixture_ok && worst_gap <= 1e-12,
        format!(
            "risks {risks:?}, AURC {:.4}; oracle minus exhaustive minimum, worst over N<=6: {worst_gap:.1e}",
            curve.aurc
        ),
    )
}

fn flag_and_determinism() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&synth_generate(&SynthConfig::default()).unwrap(), dir.path().join("data")).unwrap();
    let run = |threads: usize| {
        let cfg = PipelineConfig {
            threads: Some(threads),
            ..PipelineConfig::default()
        };
        let work = dir.path().join(format!("work{threads}"));
        let report = Pipeline::new(cfg, &manifest, &work).unwrap().run_all().unwrap();
        (report, std::fs::read(work.join("report.json")).unwrap())
    };
    let (report, one) = run(1);
    let (_, eight) = run(8);

    let flag = report.flag.as_ref().expect("flag summary");
    let kept = flag.nonrejected_mean_f1.unwrap_or(f64::NAN);
    let flag_outcome = outcome(
        flag.score_name == "variance" && kept >= flag.full_mean_f1 + 0.05 && (flag.coverage - 0.5).abs() < 0.02,
        format!(
            "coverage {:.2}: retained mean F1 {kept:.4} vs full {:.4}",
            flag.coverage, flag.full_mean_f1
        ),
    );
    let det = outcome(
        one == eight,
        format!("report.json {} bytes at 1 thread, {} bytes at 8 threads", one.len(), eight.len()),
    );
    (flag_outcome, det)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// Oracle: Newton's method on the same penalized objective.
fn newton_logistic(x: &[f64], d: usize, y: &[u8], l2: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let p = d + 1;
    let mut theta = vec![0.0; p];
    for _ in 0..50 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (row, &yi) in x.chunks_exact(d).zip(y) {
            let mut feats = row.to_vec();
            feats.push(1.0);
            let z: f64 = feats.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let s = sigmoid(z);
            for a in 0..p {
                grad[a] += (s - f64::from(yi)) * feats[a] / n;
                for b in 0..p {
                    hess[a][b] += s * (1.0 - s) * feats[a] * feats[b] / n;
                }
            }
        }
        for a in 0..d {
            grad[a] += l2 * theta[a];
            hess[a][a] += l2;
        }
        let step = solve(hess, grad);
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
        if step.iter().all(|s| s.abs() < 1e-13) {
            break;
        }
    }
    theta
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn two_feature_records(n: usize, seed: u64) -> (Vec<SceneRecord>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (s1, s2): (f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng));
        let failure = rng.random::<f64>() < sigmoid(2.0 * s1 + s2);
        let mut r = SceneRecord::new(format!("scene_{i:05}"));
        r.attributes.insert("s1".into(), Some(s1));
        r.attributes.insert("s2".into(), Some(s2));
        records.push(r);
        labels.push(u8::from(failure));
    }
    (records, labels)
}

fn combiner() -> Outcome {
    let names = vec!["s1".to_owned(), "s2".to_owned()];
    let mut wins = 0;
    for seed in 0..20 {
        let (records, labels) = two_feature_records(2000, 1000 + seed);
        let ids: Vec<String> = records.iter().map(|r| r.scene_id.clone()).collect();
        let split = stratified_split(&ids, &labels, 0.7, seed).unwrap();
        let pick = |want: Split| -> (Vec<&SceneRecord>, Vec<u8>) {
            records
                .iter()
                .zip(&labels)
                .zip(&split)
                .filter(|(_, s)| **s == want)
                .map(|((r, &y), _)| (r, y))
                .unzip()
        };
        let (train, train_y) = pick(Split::Train);
        let (eval, eval_y) = pick(Split::Eval);
        let spec = FeatureSpec::fit(&train, &names).unwrap().spec;
        let design = build_features(&train, &spec).unwrap();
        let model = train_combiner(&design, &train_y, spec.clone(), &TrainOptions::default(), 0.5).unwrap();
        let eval_design = build_features(&eval, &spec).unwrap();
        let eval_ids: Vec<String> = eval.iter().map(|r| r.scene_id.clone()).collect();
        let f1: Vec<f64> = eval_y.iter().map(|&y| 1.0 - f64::from(y)).collect();
        let aurc = |scores: Vec<Option<f64>>| discard_curve("s", &eval_ids, &scores, &f1).unwrap().aurc;
        let combined = aurc((0..eval.len()).map(|i| Some(model.score(eval_design.row(i)).unwrap())).collect());
        let best_single = names
            .iter()
            .map(|n| aurc(eval.iter().map(|r| r.feature(n)).collect()))
            .fold(f64::INFINITY, f64::min);
        if combined < best_single {
            wins += 1;
        }
    }

    let (records, labels) = two_feature_records(2000, 77);
    let refs: Vec<&SceneRecord> = records.iter().collect();
    let spec = FeatureSpec::fit(&refs, &names).unwrap().spec;
    let design = build_features(&refs, &spec).unwrap();
    let opts = TrainOptions {
        l2: 1e-4,
        ..TrainOptions::default()
    };
    let model = train_combiner(&design, &labels, spec.clone(), &opts, 0.5).unwrap();
    let newton = newton_logistic(&design.values, 2, &labels, opts.l2);
    let gd_vs_newton = model
        .weights
        .iter()
        .chain([&model.bias])
        .zip(&newton)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let raw: Vec<f64> = model.weights.iter().zip(&spec.stds).map(|(w, s)| w / s).collect();
    let recovered = (raw[0] - 2.0).abs() <= 0.15 && (raw[1] - 1.0).abs() <= 0.15;
    outcome(
        wins >= 18 && recovered && gd_vs_newton < 1e-4,
        format!(
            "combiner beats best single score in {wins}/20 seeds; weights ({:.3}, {:.3}), max gap to Newton {gd_vs_newton:.1e}",
            raw[0], raw[1]
        ),
    )
}

fn decile_trend() -> Outcome {
    let records: Vec<SceneRecord> = (0..100)
        .map(|i| {
            let mut r = SceneRecord::new(format!("scene_{i:04}"));
            r.attributes.insert("elevation".into(), Some(500.0 + 7.0 * i as f64));
            // confidence falls with elevation; "-confidence" is the risk orientation
            r.attributes.insert("confidence".into(), Some(1.0 - i as f64 / 100.0));
            // f1 = 2tp / (2tp + fn) = 1 - i / 200
            let c = ConfusionCounts {
                tp: 200 - i as u64,
                fp: 0,
                tn: 0,
                fn_: 2 * i as u64,
            };
            r.evaluation = Some(SceneEvaluation::new(c, seg_metrics(&c)));
            r
        })
        .collect();
    let f1: Vec<f64> = records.iter().map(|r| r.evaluation.as_ref().unwrap().f1_for_risk).collect();
    let grouping = decile_group(&records, "elevation", "-confidence").unwrap();
    let trend = group_trend(&grouping).unwrap();
    let r = trend.pearson_r.unwrap_or(f64::NAN);
    let mut sizes = BTreeMap::new();
    for b in &grouping.bins {
        *sizes.entry(b.scene_ids.len()).or_insert(0) += 1;
    }
    outcome(
        (r + 1.0).abs() <= 1e-9 && sizes == BTreeMap::from([(10, 10)]),
        format!(
            "r = {r:.12}, slope {:?}, f1 range [{:.3}, {:.3}]",
            trend.slope,
            f1.iter().copied().fold(f64::INFINITY, f64::min),
            f1.iter().copied().fold(0.0, f64::max)
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("ncdd-bounds", ncdd_bounds()),
        ("kmeans-recovery", kmeans_recovery()),
        ("ood-separation", ood_separation()),
        ("uncertainty-identities", uncertainty_identities()),
        ("calibration", calibration_checks()),
        ("risk-coverage", risk_coverage()),
    ];
    let (flag, det) = flag_and_determinism();
    results.push(("flag-utility", flag));
    results.push(("combiner", combiner()));
    results.push(("decile-trend", decile_trend()));
    results.push(("determinism", det));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
