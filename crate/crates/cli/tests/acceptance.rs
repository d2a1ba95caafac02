//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{loss_gradient_error, sinkhorn_gradient_error, ModelCase};
use otunmix::data::load_dataset;
use otunmix::losses::LossKind;
use otunmix::model::Mode;
use otunmix::nfindr::nfindr_restarts;
use otunmix::numerics::{mat_mul, sample_dirichlet, DirichletSpec, Matrix, Rng};
use otunmix::sinkhorn::{sinkhorn, sinkhorn_divergence, DiscreteMeasure, SinkhornConfig};
use otunmix::trainer::{train, BenchReport, TrainConfig};
use tempfile::TempDir;

const GRAD_TOL: f64 = 1e-4;
const BENCH_RUNS: &str = "25";
const BENCH_TOP: &str = "5";

type Outcome = Result<String, String>;

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_otunmix"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("otunmix {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Library, Synth4 replica and both benches, shared by criteria 1, 2, 8, 9.
struct Synth4 {
    dir: TempDir,
}

impl Synth4 {
    fn build() -> Result<Self, String> {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let lib = dir.path().join("library.csv");
        cli(&["make-library", "--out", p(&lib), "--bands", "224", "--materials", "12", "--seed", "1"])?;
        cli(&[
            "synth", "--library", p(&lib), "--out", p(&dir.path().join("synth4")), "--k", "3", "--n", "2000",
            "--alpha", "4,4,4", "--max-purity", "0.8", "--snr-db", "40", "--seed", "7",
        ])?;
        Ok(Synth4 { dir })
    }

    fn data(&self) -> std::path::PathBuf {
        self.dir.path().join("synth4")
    }

    fn bench(&self, name: &str, extra: &[&str]) -> Result<(BenchReport, f64), String> {
        let out = self.dir.path().join(name);
        let data = self.data();
        let mut args = vec!["bench", "--data", p(&data), "--runs", BENCH_RUNS, "--top", BENCH_TOP, "--out", p(&out)];
        args.extend_from_slice(extra);
        let start = Instant::now();
        cli(&args)?;
        let seconds = start.elapsed().as_secs_f64();
        let text = fs::read_to_string(out.join("bench.json")).map_err(|e| e.to_string())?;
        let report = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        Ok((report, seconds))
    }
}

fn fmt_means(r: &BenchReport) -> String {
    r.per_endmember_mean
        .iter()
        .zip(&r.per_endmember_std)
        .map(|(m, s)| format!("{m:.3}±{s:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_1(ot: &(BenchReport, f64)) -> Outcome {
    let (r, seconds) = ot;
    let detail = format!(
        "best {} of {} mean SAD {:.4} (limit 0.15), per endmember [{}], {} failed runs, {:.0} s",
        r.top,
        r.runs,
        r.mean_sad,
        fmt_means(r),
        r.failed.len(),
        seconds
    );
    if r.mean_sad <= 0.15 && *seconds <= 1800.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2(ot: &BenchReport, mse: &BenchReport) -> Outcome {
    let margin = (mse.mean_sad - ot.mean_sad) / mse.mean_sad;
    let detail = format!(
        "OT+MSE {:.4} vs MSE {:.4} [{}], relative margin {:.1}% (need >= 20%)",
        ot.mean_sad,
        mse.mean_sad,
        fmt_means(mse),
        100.0 * margin
    );
    if ot.mean_sad < mse.mean_sad && margin >= 0.2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn simplex_points(rng: &mut Rng, n: usize) -> Matrix {
    sample_dirichlet(rng, &DirichletSpec::symmetric(3, 1.0).unwrap(), n).unwrap().transpose()
}

fn translated(m: &Matrix, t: &[f64]) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out[(r, c)] += t[c];
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = Rng::seed_from_u64(303);
    let (mut self_max, mut sym_max, mut neg_min, mut trans_max) = (0f64, 0f64, f64::INFINITY, 0f64);
    let mut pairs = 0;
    for eps in [1e-1, 1e-2, 1e-3] {
        let cfg = SinkhornConfig::with_epsilon(eps);
        for _ in 0..50 {
            let n = 5 + (rng.uniform() * 26.0) as usize;
            let m = 5 + (rng.uniform() * 26.0) as usize;
            let x = simplex_points(&mut rng, n);
            let y = simplex_points(&mut rng, m);
            let t: Vec<f64> = (0..3).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let mu = DiscreteMeasure::uniform(x.clone()).unwrap();
            let nu = DiscreteMeasure::uniform(y.clone()).unwrap();
            let s = |a: &DiscreteMeasure, b: &DiscreteMeasure| sinkhorn_divergence(a, b, &cfg).unwrap().value;
            let s_xy = s(&mu, &nu);
            self_max = self_max.max(s(&mu, &mu).abs()).max(s(&nu, &nu).abs());
            sym_max = sym_max.max((s_xy - s(&nu, &mu)).abs());
            neg_min = neg_min.min(s_xy);
            let mu_t = DiscreteMeasure::uniform(translated(&x, &t)).unwrap();
            let nu_t = DiscreteMeasure::uniform(translated(&y, &t)).unwrap();
            trans_max = trans_max.max((s(&mu_t, &nu_t) - s_xy).abs());
            pairs += 1;
        }
    }
    let detail = format!(
        "{pairs} pairs: max |S(mu,mu)| {self_max:.1e}, max asymmetry {sym_max:.1e}, min S {neg_min:.1e}, max translation drift {trans_max:.1e}"
    );
    if self_max <= 1e-9 && sym_max <= 1e-9 && neg_min >= -1e-8 && trans_max <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(m - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, m - 1);
            out.push(p);
        }
    }
    out
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn criterion_4() -> Outcome {
    let mut rng = Rng::seed_from_u64(404);
    let cfg = SinkhornConfig::with_epsilon(1e-3);
    let mut worst = 0f64;
    let mut worst_abs = 0f64;
    let mut instances = 0;
    for m in [2usize, 3, 4] {
        for _ in 0..20 {
            let x = simplex_points(&mut rng, m);
            let y = simplex_points(&mut rng, m);
            let exact = permutations(m)
                .iter()
                .map(|perm| (0..m).map(|i| euclid(x.row(i), y.row(perm[i]))).sum::<f64>() / m as f64)
                .fold(f64::INFINITY, f64::min);
            let w = sinkhorn(
                &DiscreteMeasure::uniform(x).unwrap(),
                &DiscreteMeasure::uniform(y).unwrap(),
                &cfg,
            )
            .unwrap()
            .cost;
            worst = worst.max((w - exact).abs() / exact);
            worst_abs = worst_abs.max((w - exact).abs());
            instances += 1;
        }
    }
    // A permutation plan carries KL = ln m, so the entropic term alone adds
    // up to eps ln 4 to W_eps.
    let detail = format!(
        "{instances} instances, worst relative gap to brute force {:.3}% (limit 1%), worst absolute gap {worst_abs:.2e} vs entropic bound {:.2e}",
        100.0 * worst,
        1e-3 * 4f64.ln()
    );
    if worst <= 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let seeds = 0..20u64;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |err: f64, what: String| {
        if err > worst.0 || err.is_nan() {
            worst = (err, what);
        }
    };
    for seed in seeds.clone() {
        note(sinkhorn_gradient_error(seed, &SinkhornConfig::default()), format!("sinkhorn seed {seed}"));
        for kind in [LossKind::Mse, LossKind::Sad] {
            note(loss_gradient_error(seed, kind, 8, 5), format!("{kind:?} loss seed {seed}"));
            for lambda in [0.0, 10.0] {
                let case = ModelCase::new(seed, kind, lambda);
                for (group, err) in case.group_errors() {
                    note(err, format!("backward {kind:?} lambda {lambda} {group} seed {seed}"));
                }
                if lambda > 0.0 {
                    note(case.abundance_gradient_error(), format!("OT abundance gradient {kind:?} seed {seed}"));
                }
            }
        }
    }
    let detail = format!(
        "{} seeds, worst relative error {:.1e} ({}), limit {GRAD_TOL:.0e}",
        seeds.end, worst.0, worst.1
    );
    if worst.0 <= GRAD_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let alpha = [4.0, 4.0, 4.0];
    let a0: f64 = alpha.iter().sum();
    let n = 100_000;
    let mut rng = Rng::seed_from_u64(606);
    let s = sample_dirichlet(&mut rng, &DirichletSpec::new(alpha.to_vec()).unwrap(), n).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, &ai) in alpha.iter().enumerate() {
        let row = s.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let want_mean = ai / a0;
        let want_var = ai * (a0 - ai) / (a0 * a0 * (a0 + 1.0));
        ok &= (mean - want_mean).abs() <= 0.01 && (var - want_var).abs() <= 0.05 * want_var;
        lines.push(format!("mean {mean:.4} var {var:.5} (target {want_var:.5})"));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // atan2 of |a x b| and a.b stays accurate near zero angles.
    let cross = (na * na * nb * nb - dot * dot).max(0.0).sqrt();
    cross.atan2(dot)
}

fn criterion_7() -> Outcome {
    let (l, k) = (50, 3);
    let mut worst = 0f64;
    for seed in 0..5u64 {
        let mut rng = Rng::seed_from_u64(700 + seed);
        let m = Matrix::from_vec(l, k, (0..l * k).map(|_| 0.05 + rng.uniform()).collect()).unwrap();
        let interior = sample_dirichlet(&mut rng, &DirichletSpec::symmetric(k, 2.0).unwrap(), 500).unwrap();
        let mut cols: Vec<Vec<f64>> = (0..k).map(|j| m.col(j)).collect();
        let mixed = mat_mul(&m, &interior).unwrap();
        cols.extend((0..500).map(|j| mixed.col(j)));
        // Vertices land at random positions among the mixtures.
        for i in (1..cols.len()).rev() {
            let j = (rng.uniform() * (i + 1) as f64) as usize;
            cols.swap(i, j.min(i));
        }
        let y = Matrix::from_columns(&cols).unwrap();
        let found = nfindr_restarts(&y, k, &mut rng, 100, 1).unwrap().endmembers;
        let best = permutations(k)
            .iter()
            .map(|perm| (0..k).map(|j| spectral_angle(&found.col(perm[j]), &m.col(j))).fold(0f64, f64::max))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    let detail = format!("5 random simplices, worst per-endmember SAD {worst:.1e} (limit 1e-6)");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(s: &Synth4) -> Outcome {
    let ds = load_dataset(&s.data()).map_err(|e| e.to_string())?;
    let res = train(&ds, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let c = &res.constraints;
    let (a, _) = res.params.encoder_forward(&ds.y, Mode::Eval).map_err(|e| e.to_string())?;
    let mut final_sum_err = 0f64;
    for j in 0..a.cols() {
        let sum: f64 = a.col(j).iter().sum();
        final_sum_err = final_sum_err.max((sum - 1.0).abs());
    }
    let final_min = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    let decoder_min = res.m_hat.data().iter().copied().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "all steps: max |sum-1| {:.1e}, min abundance {:.1e}, min W_D {:.1e}, {} fallback columns; \
         final recheck: max |sum-1| {final_sum_err:.1e}, min {final_min:.1e}, min W_D {decoder_min:.1e}",
        c.max_sum_error, c.min_abundance, c.min_decoder, c.fallback_columns
    );
    let ok = c.max_sum_error <= 1e-9
        && c.min_abundance >= 0.0
        && c.min_decoder >= 0.0
        && final_sum_err <= 1e-9
        && final_min >= 0.0
        && decoder_min >= 0.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9(s: &Synth4) -> Outcome {
    let data = s.data();
    let mut files = Vec::new();
    for name in ["det_a", "det_b"] {
        let out = s.dir.path().join(name);
        cli(&["train", "--data", p(&data), "--out", p(&out), "--seed", "3"])?;
        let read = |f: &str| fs::read(out.join(f)).map_err(|e| e.to_string());
        files.push((read("metrics.json")?, read("log.csv")?));
    }
    let same_metrics = files[0].0 == files[1].0;
    let same_log = files[0].1 == files[1].1;
    let detail = format!("metrics.json identical: {same_metrics}, log.csv identical: {same_log}");
    if same_metrics && same_log {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let synth = Synth4::build();
    let needs_synth = |f: &dyn Fn(&Synth4) -> Outcome| match &synth {
        Ok(s) => guarded(|| f(s)),
        Err(e) => Err(format!("dataset generation failed: {e}")),
    };
    let ot = synth.as_ref().map_err(Clone::clone).and_then(|s| s.bench("bench_ot", &[]));
    let mse = synth.as_ref().map_err(Clone::clone).and_then(|s| s.bench("bench_mse", &["--lambda-reg", "0"]));

    let results: Vec<(&str, Outcome)> = vec![
        ("Synth4 OT+MSE reproduction", ot.as_ref().map_err(Clone::clone).and_then(criterion_1)),
        (
            "regularization benefit",
            match (&ot, &mse) {
                (Ok(a), Ok(b)) => criterion_2(&a.0, &b.0),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            },
        ),
        ("Sinkhorn divergence properties", guarded(criterion_3)),
        ("exact OT agreement", guarded(criterion_4)),
        ("gradient correctness", guarded(criterion_5)),
        ("Dirichlet sampler moments", guarded(criterion_6)),
        ("NFINDR recovery", guarded(criterion_7)),
        ("constraint preservation", needs_synth(&criterion_8)),
        ("determinism", needs_synth(&criterion_9)),
    ];

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
