//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) before asserting.

use std::io::Write as _;
use std::sync::{Mutex, OnceLock};

use cacscore::cacslice::{classify_slices, heart_slices, train_classifier, ClassifierConfig, SliceClassifier};
use cacscore::calgan::{crop_rotated, gan_slices, train_cyclegan, AdversarialLoss, CycleGan, GanTrainConfig};
use cacscore::filters::Connectivity;
use cacscore::heartseg::{segment_heart, seg_metrics, train_heartseg, HeartSegConfig, HeartSegModel};
use cacscore::nn::Tensor;
use cacscore::phantom::{
    degrade, fraction_below, generate_pair, generate_phantom, point_along, Artery, LesionShape, LesionSpec, PhantomSpec,
};
use cacscore::pipeline::{generate_phantom_cohort, process_scan, report, run_pipeline, Models, PipelineConfig};
use cacscore::scoring::{
    adjusted_agatston, conventional_agatston, lesions_from_map, lesions_from_threshold, pseudo_mass, risk_category,
    score_map, RiskCategory, ScoringConfig,
};
use cacscore::stats::{
    abs_rel_diff, bland_altman, detection_metrics, icc_pairs, median, weighted_kappa, LimitsMethod, Z95,
};
use cacscore::volume::{Grid, HuWindow, NormalizedSlice, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2} [{name}]: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------- scoring

struct Blob {
    origin: [usize; 3],
    size: [usize; 3],
    /// HU per slice of the blob (bottom to top).
    hu: Vec<f64>,
}

fn oracle_weight(hu: f64, clinical: bool) -> f64 {
    if clinical && hu < 130.0 {
        0.0
    } else if hu >= 400.0 {
        4.0
    } else if hu >= 300.0 {
        3.0
    } else if hu >= 200.0 {
        2.0
    } else {
        1.0
    }
}

fn oracle_category(score: f64) -> RiskCategory {
    match score {
        s if s <= 10.0 => RiskCategory::I,
        s if s <= 100.0 => RiskCategory::II,
        s if s < 400.0 => RiskCategory::III,
        _ => RiskCategory::IV,
    }
}

/// Hand evaluation from the blob parameters: (mass, adjusted, conventional
/// of the thresholded voxels).
fn blob_oracle(blobs: &[Blob], spacing: [f64; 3]) -> (f64, f64, f64) {
    let area = spacing[0] * spacing[1];
    let vv = area * spacing[2];
    let (mut mass, mut adj, mut conv) = (0.0, 0.0, 0.0);
    for b in blobs {
        let n = (b.size[0] * b.size[1]) as f64;
        let mut conv_blob = 0.0;
        for &h in &b.hu {
            mass += n * h * vv;
            adj += n * area * oracle_weight(h, false);
            if h >= 130.0 {
                conv_blob += n * area * oracle_weight(h, true);
            }
        }
        conv += conv_blob;
    }
    (mass, adj, conv)
}

fn render_blobs(grid: Grid, blobs: &[Blob]) -> Volume {
    let mut v = Volume::filled(grid, 0.0);
    for b in blobs {
        for (dz, &h) in b.hu.iter().enumerate() {
            for dy in 0..b.size[1] {
                for dx in 0..b.size[0] {
                    v.set(b.origin[0] + dx, b.origin[1] + dy, b.origin[2] + dz, h);
                }
            }
        }
    }
    v
}

#[test]
fn criterion_01_scoring_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    let mut cases = 0;
    for case in 0..40 {
        let spacing = if case % 2 == 0 { [1.0, 1.0, 3.0] } else { [0.7, 0.6, 1.5] };
        let grid = Grid::new([24, 24, 8], spacing, [0.0; 3]).unwrap();
        // blobs on a 3 x 3 lattice of 8 x 8 cells never touch
        let count = 1 + case % 5;
        let mut cells: Vec<usize> = (0..9).collect();
        let mut blobs = Vec::new();
        for _ in 0..count {
            let c = cells.swap_remove(rng.random_range(0..cells.len()));
            let size = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=4)];
            let origin = [8 * (c % 3), 8 * (c / 3), rng.random_range(0..=8 - size[2])];
            let hu = (0..size[2])
                .map(|_| {
                    if case < 20 {
                        // integer HU across every weight bin and the 130 boundary
                        [60.0, 129.0, 130.0, 199.0, 200.0, 250.0, 300.0, 399.0, 400.0, 800.0][rng.random_range(0..10)]
                    } else {
                        rng.random_range(20.0..700.0)
                    }
                })
                .collect();
            blobs.push(Blob { origin, size, hu });
        }
        let map = render_blobs(grid, &blobs);
        let (mass, adj, conv) = blob_oracle(&blobs, spacing);
        let set = lesions_from_map(&map, Connectivity::TwentySix, 1, None).unwrap();
        let got_mass = pseudo_mass(&set, grid.voxel_volume());
        let got_adj = adjusted_agatston(&set);
        let thr = lesions_from_threshold(&map, None, 130.0, Connectivity::TwentySix, 1, None).unwrap();
        let got_conv = conventional_agatston(&thr);
        let tol = if case < 20 { 1e-12 } else { 1e-9 };
        let ok = set.len() == blobs.len()
            && close(got_mass, mass, tol)
            && close(got_adj, adj, tol)
            && close(got_conv, conv, tol)
            // adjusted scoring of a 130 HU thresholded set is the conventional score
            && close(adjusted_agatston(&thr), got_conv, 1e-12)
            && risk_category(got_adj).unwrap() == oracle_category(adj)
            && risk_category(got_conv).unwrap() == oracle_category(conv);
        // the full map scorer agrees with the parts
        let rec = score_map(&map, Some(&map), None, None, &ScoringConfig::default()).unwrap();
        let ok = ok && close(rec.pseudo_mass, mass, tol) && close(rec.adjusted_agatston, adj, tol);
        if !ok {
            failures.push(format!("case {case}: mass {got_mass}/{mass} adj {got_adj}/{adj} conv {got_conv}/{conv}"));
        }
        cases += 1;
    }
    let boundaries = [(0.0, RiskCategory::I), (10.0, RiskCategory::I), (11.0, RiskCategory::II), (100.0, RiskCategory::II), (101.0, RiskCategory::III), (399.0, RiskCategory::III), (400.0, RiskCategory::IV)];
    for (s, c) in boundaries {
        if risk_category(s).unwrap() != c {
            failures.push(format!("category of {s}"));
        }
    }
    let pass = failures.is_empty();
    verdict(1, "scoring oracles", pass, &format!("{cases} configurations, {} mismatches", failures.len()));
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------- stats

fn oracle_icc(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let k = 2.0;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (2.0 * n);
    let cols = [a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n];
    let mut ssr = 0.0;
    let mut sse = 0.0;
    for i in 0..a.len() {
        let r = (a[i] + b[i]) / 2.0;
        ssr += k * (r - grand).powi(2);
        for (j, x) in [a[i], b[i]].into_iter().enumerate() {
            sse += (x - r - cols[j] + grand).powi(2);
        }
    }
    let ssc = n * cols.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
    let msr = ssr / (n - 1.0);
    let msc = ssc / (k - 1.0);
    let mse = sse / ((n - 1.0) * (k - 1.0));
    let icc = (msr - mse) / (msr + (k - 1.0) * mse + k / n * (msc - mse));
    // McGraw and Wong (1996), case 2A
    let aa = k * icc / (n * (1.0 - icc));
    let bb = 1.0 + k * icc * (n - 1.0) / (n * (1.0 - icc));
    let v = (aa * msc + bb * mse).powi(2) / ((aa * msc).powi(2) / (k - 1.0) + (bb * mse).powi(2) / ((n - 1.0) * (k - 1.0)));
    let fs = FisherSnedecor::new(n - 1.0, v).unwrap().inverse_cdf(0.975);
    let fl = FisherSnedecor::new(v, n - 1.0).unwrap().inverse_cdf(0.975);
    let lo = n * (msr - fs * mse) / (fs * (k * msc + (k * n - k - n) * mse) + n * msr);
    let hi = n * (fl * msr - mse) / (k * msc + (k * n - k - n) * mse + n * fl * msr);
    (icc, lo, hi)
}

fn oracle_kappa(r1: &[usize], r2: &[usize], c: usize) -> (f64, f64) {
    let n = r1.len() as f64;
    let mut obs = vec![vec![0.0; c]; c];
    for (&i, &j) in r1.iter().zip(r2) {
        obs[i][j] += 1.0;
    }
    let rows: Vec<f64> = (0..c).map(|i| obs[i].iter().sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| (0..c).map(|i| obs[i][j]).sum()).collect();
    let d = |i: usize, j: usize| (i as f64 - j as f64).abs() / (c as f64 - 1.0);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..c {
        for j in 0..c {
            num += d(i, j) * obs[i][j];
            den += d(i, j) * rows[i] * cols[j] / n;
        }
    }
    let kappa = 1.0 - num / den;
    // Fleiss, Cohen and Everitt (1969) large-sample variance, agreement weights
    let w = |i: usize, j: usize| 1.0 - d(i, j);
    let p = |i: usize, j: usize| obs[i][j] / n;
    let pr: Vec<f64> = rows.iter().map(|r| r / n).collect();
    let pc: Vec<f64> = cols.iter().map(|r| r / n).collect();
    let pe: f64 = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| w(i, j) * pr[i] * pc[j]).sum();
    let wbar_i = |i: usize| (0..c).map(|j| pc[j] * w(i, j)).sum::<f64>();
    let wbar_j = |j: usize| (0..c).map(|i| pr[i] * w(i, j)).sum::<f64>();
    let mut s = 0.0;
    for i in 0..c {
        for j in 0..c {
            s += p(i, j) * (w(i, j) - (wbar_i(i) + wbar_j(j)) * (1.0 - kappa)).powi(2);
        }
    }
    let var = (s - (kappa - pe * (1.0 - kappa)).powi(2)) / (n * (1.0 - pe).powi(2));
    (kappa, 1.959964 * var.max(0.0).sqrt())
}

/// OLS through the normal equations.
fn oracle_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 * sxx.max(1.0) {
        return (sy / n, 0.0);
    }
    let slope = (n * sxy - sx * sy) / det;
    ((sy - slope * sx) / n, slope)
}

#[test]
fn criterion_02_statistics_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = Vec::new();
    let tol = 1e-9;
    for t in 0..100 {
        let n = rng.random_range(5..=20);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1000.0)).collect();
        let b: Vec<f64> = a.iter().map(|&x| (x * rng.random_range(0.6..1.4) + rng.random_range(0.0..50.0)).max(0.0)).collect();

        let (icc, lo, hi) = oracle_icc(&a, &b);
        let got = icc_pairs(&a, &b).unwrap();
        if !(close(got.estimate, icc, tol) && close(got.lower, lo, 1e-7) && close(got.upper, hi, 1e-7)) {
            failures.push(format!("table {t}: icc {got:?} vs ({icc}, {lo}, {hi})"));
        }

        let c1: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let c2: Vec<usize> = c1.iter().map(|&c| if rng.random_bool(0.7) { c } else { rng.random_range(0..4) }).collect();
        let (k, half) = oracle_kappa(&c1, &c2, 4);
        match weighted_kappa(&c1, &c2, 4) {
            Ok(got) => {
                if !(close(got.estimate, k, tol) && close(got.upper - got.estimate, half, 1e-6)) {
                    failures.push(format!("table {t}: kappa {got:?} vs {k} +- {half}"));
                }
            }
            Err(_) => {
                if k.is_finite() {
                    failures.push(format!("table {t}: kappa rejected, oracle {k}"));
                }
            }
        }

        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let pred: Vec<bool> = truth.iter().map(|&x| if rng.random_bool(0.8) { x } else { !x }).collect();
        let m = detection_metrics(&truth, &pred).unwrap();
        let count = |t: bool, p: bool| truth.iter().zip(&pred).filter(|(a, b)| **a == t && **b == p).count() as f64;
        let (tp, fp, tn, fnn) = (count(true, true), count(false, true), count(false, false), count(true, false));
        let checks = [
            (m.accuracy, (tp + tn) / n as f64),
            (m.sensitivity, tp / (tp + fnn)),
            (m.fpr, fp / (fp + tn)),
            (m.f1, 2.0 * tp / (2.0 * tp + fp + fnn)),
        ];
        for (got, want) in checks {
            let ok = match got {
                Some(g) => close(g, want, tol),
                None => !want.is_finite(),
            };
            if !ok {
                failures.push(format!("table {t}: detection {got:?} vs {want}"));
            }
        }

        for (x, y) in a.iter().zip(&b) {
            let want = if *x == 0.0 && *y == 0.0 { 0.0 } else { (x - y).abs() / ((x + y) / 2.0) };
            if !close(abs_rel_diff(*x, *y).unwrap(), want, tol) {
                failures.push(format!("table {t}: abs rel diff"));
            }
        }

        let ba = bland_altman(&a, &b, LimitsMethod::Regression).unwrap();
        let means: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (b0, b1) = oracle_line(&means, &diffs);
        let resid: Vec<f64> = means.iter().zip(&diffs).map(|(m, d)| (d - b0 - b1 * m).abs()).collect();
        let (r0, r1) = oracle_line(&means, &resid);
        for (i, row) in ba.rows.iter().enumerate() {
            let m = means[i];
            let half = (2.0 * std::f64::consts::PI).sqrt() / 2.0 * 1.959_963_984_540_054 * (r0 + r1 * m);
            let half = half.max(0.0);
            let bias = b0 + b1 * m;
            let scale = bias.abs().max(half).max(1.0);
            if (row.lower - (bias - half)).abs() > tol * scale || (row.upper - (bias + half)).abs() > tol * scale {
                failures.push(format!("table {t}: limits row {i}"));
            }
        }
    }
    let multiplier = Z95 * (std::f64::consts::PI / 2.0).sqrt();
    let mult_ok = (multiplier - 2.4567).abs() <= 1e-4;
    let pass = failures.is_empty() && mult_ok;
    verdict(
        2,
        "statistics oracles",
        pass,
        &format!(
            "100 tables, {} oracle mismatches; LoA multiplier {multiplier:.6}, pinned 2.4567 +- 1e-4",
            failures.len()
        ),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------- losses

fn tiny_gan() -> GanTrainConfig {
    let mut c = GanTrainConfig::desk();
    c.generator.width = 2;
    c.generator.blocks = 1;
    c.generator.first_kernel = 3;
    c.last_kernel = 3;
    c.discriminator.width = 2;
    c.discriminator.strides = vec![2, 1];
    c.crop_side = 8;
    c.batch_size = 2;
    c
}

fn random_images(n: usize, side: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..side * side).map(|_| rng.random_range(0.0..0.4)).collect()).collect()
}

#[test]
fn criterion_03_losses_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    for (cr, cs, z, kind) in [
        (0.2, 0.2, 0.0, AdversarialLoss::Log),
        (0.1, 0.3, 0.5, AdversarialLoss::Log),
        (0.4, 0.05, -1.0, AdversarialLoss::Log),
        (0.25, 0.15, 0.3, AdversarialLoss::LeastSquares),
    ] {
        let mut cfg = tiny_gan();
        cfg.adversarial = kind;
        let mut gan = CycleGan::new(cfg).unwrap();
        gan.g_r.set_constant_output(cr);
        gan.g_s.set_constant_output(cs);
        gan.d_cac.set_constant_logit(z);
        gan.d_nocac.set_constant_logit(z);
        let xc = random_images(2, 8, &mut rng);
        let xn = random_images(2, 8, &mut rng);
        let rc: Vec<&[f64]> = xc.iter().map(|x| x.as_slice()).collect();
        let rn: Vec<&[f64]> = xn.iter().map(|x| x.as_slice()).collect();
        let l = gan.gan_losses(&rc, &rn, true).unwrap();
        // rec = x - cr + cs in both directions
        let cyc = 2.0 * (cs - cr).abs();
        let id = cr + cs;
        let sp = cr + cs;
        let adv = match kind {
            AdversarialLoss::Log => 2.0 * (1.0 + (-z as f64).exp()).ln(),
            AdversarialLoss::LeastSquares => 2.0 * (z - 1.0f64).powi(2),
        };
        let c = &gan.config;
        let total = adv + c.lambda * cyc + c.alpha * id + c.beta * sp;
        for (name, got, want) in [("adv", l.adv, adv), ("cyc", l.cyc, cyc), ("id", l.id, id), ("sp", l.sp, sp), ("total", l.total, total)] {
            if !close(got, want, 1e-9) {
                failures.push(format!("{name}: {got} vs {want} (cr {cr}, cs {cs}, z {z})"));
            }
        }
    }

    let mut gan = CycleGan::new(tiny_gan()).unwrap();
    let xc = random_images(2, 8, &mut rng);
    let xn = random_images(2, 8, &mut rng);
    let rc: Vec<&[f64]> = xc.iter().map(|x| x.as_slice()).collect();
    let rn: Vec<&[f64]> = xn.iter().map(|x| x.as_slice()).collect();
    gan.generator_gradients(&rc, &rn).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for which in 0..2 {
        let entries = if which == 0 { gan.g_r.params().entries().len() } else { gan.g_s.params().entries().len() };
        let mut tries = 0;
        let mut done = 0;
        while done < 6 && tries < 200 {
            tries += 1;
            let e = rng.random_range(0..entries);
            let store = if which == 0 { gan.g_r.params() } else { gan.g_s.params() };
            if !store.entries()[e].trainable {
                continue;
            }
            let j = rng.random_range(0..store.get(e).len());
            let analytic = store.entries()[e].grad.data[j];
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut probe = gan.clone();
                let s = if which == 0 { probe.g_r.params_mut() } else { probe.g_s.params_mut() };
                s.get_mut(e).data[j] += delta;
                probe.gan_losses(&rc, &rn, true).unwrap().total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / scale;
            worst = worst.max(rel);
            if rel >= 1e-3 {
                failures.push(format!("gradient {which}/{e}[{j}]: {analytic} vs {numeric}"));
            }
            done += 1;
            checked += 1;
        }
    }
    let pass = failures.is_empty() && checked >= 12;
    verdict(3, "loss values and gradients", pass, &format!("{checked} parameters checked, worst relative error {worst:.2e}"));
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------- architecture

#[test]
fn criterion_04_architecture_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut failures = Vec::new();
    let cfg = GanTrainConfig::desk();
    let side = cfg.crop_side;
    let mut gan = CycleGan::new(cfg).unwrap();
    for i in 0..50 {
        let x: Vec<f64> = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
        for g in [&mut gan.g_r, &mut gan.g_s] {
            let y = g.forward(Tensor::new(vec![1, 1, 1, side, side], x.clone()), false);
            if y.shape != vec![1, 1, 1, side, side] || !y.data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                failures.push(format!("generator input {i}: shape {:?}", y.shape));
            }
        }
    }
    let ccfg = ClassifierConfig::desk();
    let cside = ccfg.crop_side;
    let mut cls = SliceClassifier::new(ccfg).unwrap();
    let slices: Vec<NormalizedSlice> = (0..20)
        .map(|i| NormalizedSlice {
            data: (0..cside * cside).map(|_| rng.random_range(0.0..1.0)).collect(),
            side: cside,
            window: HuWindow::default(),
            slice_index: i,
            crop_center: [0, 0],
        })
        .collect();
    let refs: Vec<&NormalizedSlice> = slices.iter().collect();
    for (i, p) in cls.probabilities(&refs).unwrap().iter().enumerate() {
        if (p[0] + p[1] - 1.0).abs() > 1e-6 || p.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
            failures.push(format!("classifier slice {i}: {p:?}"));
        }
    }
    let hcfg = HeartSegConfig::desk();
    let [px, py, pz] = hcfg.patch;
    let mut hs = HeartSegModel::new(hcfg).unwrap();
    let x: Vec<f64> = (0..px * py * pz).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = hs.forward(Tensor::new(vec![1, 1, pz, py, px], x.clone()), false);
    if y.shape != vec![1, 2, pz, py, px] {
        failures.push(format!("heart segmentation output {:?}", y.shape));
    }
    if hs.predict_patch(&x).len() != px * py * pz {
        failures.push("heart probability patch size".into());
    }
    let (v, _) = generate_phantom(&PhantomSpec::desk_default()).unwrap();
    let m = segment_heart(&mut hs, &v).unwrap();
    if !m.grid.same_as(&v.grid) {
        failures.push("segmentation grid differs from input".into());
    }
    let pass = failures.is_empty();
    verdict(4, "architectural invariants", pass, &format!("{} violations", failures.len()));
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------- phantom

fn quiet_spec() -> PhantomSpec {
    let mut s = PhantomSpec::desk_default();
    s.noise_sigma_hu = 0.0;
    s
}

fn lesion_on(spec: &PhantomSpec, artery: Artery, t: f64, radius: f64, peak: f64) -> LesionSpec {
    let path = &spec.arteries.iter().find(|a| a.artery == artery).unwrap().path;
    LesionSpec {
        artery,
        center_mm: point_along(path, t),
        radius_mm: radius,
        peak_hu: peak,
        shape: LesionShape::Sphere,
    }
}

#[test]
fn criterion_05_phantom_oracle() {
    let mut failures = Vec::new();
    let mut worst_mass: f64 = 0.0;
    let mut worst_blur: f64 = 0.0;
    let cfg = ScoringConfig::default();
    for (k, (artery, t, r, peak)) in [
        (Artery::Lad, 0.3, 1.5, 300.0),
        (Artery::Rca, 0.5, 2.0, 450.0),
        (Artery::Lcx, 0.7, 1.2, 180.0),
        (Artery::Rca, 0.2, 1.8, 600.0),
    ]
    .into_iter()
    .enumerate()
    {
        let mut spec = quiet_spec();
        spec.lesions.push(lesion_on(&spec, artery, t, r, peak));
        // unblurred: score the truth map itself and the background-subtracted image
        let mut sharp = spec.clone();
        for a in &mut sharp.arteries {
            a.motion_sigma_mm = [0.0; 3];
        }
        let (v, truth) = generate_phantom(&sharp).unwrap();
        let mut empty = sharp.clone();
        empty.lesions.clear();
        let (bg, _) = generate_phantom(&empty).unwrap();
        let true_mass = truth.total_true_mass();
        let from_truth = score_map(&truth.cac_map, None, None, None, &cfg).unwrap().pseudo_mass;
        let sub = Volume::new(v.grid, v.data.iter().zip(&bg.data).map(|(a, b)| a - b).collect()).unwrap();
        let from_image = score_map(&sub, None, None, None, &cfg).unwrap().pseudo_mass;
        for got in [from_truth, from_image] {
            let rel = (got - true_mass).abs() / true_mass;
            worst_mass = worst_mass.max(rel);
            if rel > 0.01 {
                failures.push(format!("lesion {k}: mass {got} vs {true_mass}"));
            }
        }

        // blur and block averaging conserve mass
        let (bv, bt) = generate_phantom(&spec).unwrap();
        for (m, what) in [(bt.total_map_mass(), "blur"), (degrade(&bv, &bt, 2).unwrap().1.total_map_mass(), "downsample")] {
            let rel = (m - true_mass).abs() / true_mass;
            worst_blur = worst_blur.max(rel);
            if rel > 0.005 {
                failures.push(format!("lesion {k}: {what} mass {m} vs {true_mass}"));
            }
        }

        // thresholded truth-lesion voxels never increase with motion
        let support = truth.lesion_voxels(1);
        let mut last = usize::MAX;
        for sigma in [0.0, 0.3, 0.6, 0.9, 1.2, 1.6, 2.0, 2.5, 3.0] {
            let mut s = spec.clone();
            for a in &mut s.arteries {
                a.motion_sigma_mm = [sigma, sigma, 0.5 * sigma];
            }
            let (v, _) = generate_phantom(&s).unwrap();
            let n = support.iter().filter(|&&i| v.data[i] >= 130.0).count();
            if n > last {
                failures.push(format!("lesion {k}: {n} voxels at sigma {sigma} after {last}"));
            }
            last = n;
        }
    }
    let pass = failures.is_empty();
    verdict(
        5,
        "phantom oracle",
        pass,
        &format!("worst mass error {:.3}%, worst conservation error {:.3}%", 100.0 * worst_mass, 100.0 * worst_blur),
    );
    assert!(pass, "{failures:?}");
}

// ---------------------------------------------------------------- trained models

struct Trained {
    heartseg: HeartSegModel,
    classifier: SliceClassifier,
    cyclegan: CycleGan,
}

fn trained() -> &'static Mutex<Trained> {
    static MODELS: OnceLock<Mutex<Trained>> = OnceLock::new();
    MODELS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seg: Vec<_> = (0..20)
            .map(|i| {
                let (v, t) = generate_phantom(&PhantomSpec::random_desk(&mut rng, 2..=5, i)).unwrap();
                (v, t.heart_mask)
            })
            .collect();
        let heartseg = train_heartseg(&seg, HeartSegConfig::desk()).unwrap();

        let cfg = ClassifierConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut slices = Vec::new();
        for i in 0..30 {
            let (v, t) = generate_phantom(&PhantomSpec::random_desk(&mut rng, 0..=4, 100 + i)).unwrap();
            for s in heart_slices(&v, &t.heart_mask, cfg.crop_side, cfg.window).unwrap() {
                let f = t.slice_flags[s.slice_index];
                slices.push((s, f));
            }
        }
        let classifier = train_classifier(&slices, cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gs = Vec::new();
        for i in 0..30 {
            let (v, t) = generate_phantom(&PhantomSpec::random_desk(&mut rng, 1..=4, 500 + i)).unwrap();
            gs.extend(gan_slices(&v, &t.heart_mask, &t.slice_flags).unwrap());
        }
        let cyclegan = train_cyclegan(&gs, GanTrainConfig::desk()).unwrap();
        Mutex::new(Trained {
            heartseg,
            classifier,
            cyclegan,
        })
    })
}

fn pipeline_models(heart_seg: bool, slice_classifier: bool) -> (Models, PipelineConfig) {
    let t = trained().lock().unwrap();
    let mut cfg = PipelineConfig::desk();
    cfg.use_heart_seg = heart_seg;
    cfg.use_slice_classifier = slice_classifier;
    let models = Models {
        heartseg: heart_seg.then(|| t.heartseg.clone()),
        classifier: slice_classifier.then(|| t.classifier.clone()),
        cyclegan: t.cyclegan.clone(),
    };
    (models, cfg)
}

#[test]
fn criterion_06_heart_segmentation() {
    let mut model = trained().lock().unwrap().heartseg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut dice = Vec::new();
    for i in 0..10 {
        let (v, t) = generate_phantom(&PhantomSpec::random_desk(&mut rng, 1..=4, 6000 + i)).unwrap();
        let m = segment_heart(&mut model, &v).unwrap();
        dice.push(seg_metrics(&m, &t.heart_mask).unwrap().dice);
    }
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;
    let min = dice.iter().cloned().fold(f64::INFINITY, f64::min);
    let pass = mean >= 0.90;
    verdict(6, "heart segmentation", pass, &format!("mean Dice {mean:.4} (min {min:.4}) on 10 held-out phantoms, need >= 0.90"));
    assert!(pass);
}

#[test]
fn criterion_07_slice_classification() {
    let mut model = trained().lock().unwrap().classifier.clone();
    let side = model.config.crop_side;
    let window = model.config.window;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for i in 0..10 {
        let (v, t) = generate_phantom(&PhantomSpec::random_desk(&mut rng, 0..=4, 7000 + i)).unwrap();
        let s = heart_slices(&v, &t.heart_mask, side, window).unwrap();
        pred.extend(classify_slices(&mut model, &s).unwrap());
        truth.extend(s.iter().map(|s| t.slice_flags[s.slice_index]));
    }
    let m = detection_metrics(&truth, &pred).unwrap();
    let acc = m.accuracy.unwrap();
    let fpr = m.fpr.unwrap();
    let pass = acc >= 0.90 && fpr <= 0.10;
    verdict(7, "slice classification", pass, &format!("accuracy {acc:.3}, FPR {fpr:.3} on {} held-out slices", truth.len()));
    assert!(pass);
}

#[test]
fn criterion_08_identity_on_empty_slices() {
    let mut gan = trained().lock().unwrap().cyclegan.clone();
    let side = gan.config.crop_side;
    let window = gan.config.window;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut means = Vec::new();
    for i in 0..10 {
        let (v, t) = generate_phantom(&PhantomSpec::random_desk(&mut rng, 0..=3, 8000 + i)).unwrap();
        for s in gan_slices(&v, &t.heart_mask, &t.slice_flags).unwrap().iter().filter(|s| !s.cac) {
            let crop = crop_rotated(s, s.center, side, 0.0, window);
            let ns = NormalizedSlice {
                data: crop,
                side,
                window,
                slice_index: s.slice_index,
                crop_center: [s.center[0].round() as i64, s.center[1].round() as i64],
            };
            let (m, _) = gan.decompose(&ns).unwrap();
            means.push(m.data.iter().sum::<f64>() / m.data.len() as f64);
        }
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let pass = mean <= 0.01;
    verdict(8, "identity on empty slices", pass, &format!("mean |G_R| {mean:.5} over {} held-out slices, need <= 0.01", means.len()));
    assert!(pass);
}

#[test]
fn criterion_09_reproducibility_direction() {
    let (mut models, cfg) = pipeline_models(true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut p1, mut p2, mut b1, mut b2) = (vec![], vec![], vec![], vec![]);
    for i in 0..36u64 {
        let spec = PhantomSpec::random_desk(&mut rng, 1..=4, 9000 + i);
        let ((v1, _), (v2, _)) = generate_pair(&spec, i).unwrap();
        let r1 = process_scan(&mut models, &cfg, &v1, None).unwrap();
        let r2 = process_scan(&mut models, &cfg, &v2, None).unwrap();
        let concordant = r1.proposed.is_positive() && r2.proposed.is_positive() && r1.baseline.is_positive() && r2.baseline.is_positive();
        if concordant {
            p1.push(r1.proposed.pseudo_mass);
            p2.push(r2.proposed.pseudo_mass);
            b1.push(r1.baseline.pseudo_mass);
            b2.push(r2.baseline.pseudo_mass);
        }
    }
    let dr = |a: &[f64], b: &[f64]| median(&a.iter().zip(b).map(|(x, y)| abs_rel_diff(*x, *y).unwrap()).collect::<Vec<_>>()).unwrap();
    let (dp, db) = (dr(&p1, &p2), dr(&b1, &b2));
    let (ip, ib) = (icc_pairs(&p1, &p2).unwrap().estimate, icc_pairs(&b1, &b2).unwrap().estimate);
    let pass = p1.len() >= 30 && dp < db && ip > ib;
    verdict(
        9,
        "reproducibility direction",
        pass,
        &format!(
            "{} concordant-positive pairs; median dR proposed {dp:.3} vs baseline {db:.3}; ICC proposed {ip:.3} vs baseline {ib:.3}",
            p1.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_sub_threshold_detection() {
    let (mut models, cfg) = pipeline_models(true, true);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut qualifying, mut proposed, mut baseline) = (0, 0, 0);
    for i in 0..24u64 {
        let mut spec = PhantomSpec::random_desk(&mut rng, 0..=0, 10_000 + i);
        let t = rng.random_range(0.15..0.85);
        let r = rng.random_range(1.4..2.2);
        let peak = rng.random_range(160.0..300.0);
        spec.lesions.push(lesion_on(&spec, Artery::Rca, t, r, peak));
        let ((v1, t1), (v2, t2)) = generate_pair(&spec, i).unwrap();
        let below = |v: &Volume, t: &cacscore::phantom::PhantomTruth| fraction_below(v, t, 1, 130.0).unwrap_or(0.0);
        if below(&v1, &t1) < 0.5 || below(&v2, &t2) < 0.5 {
            continue;
        }
        qualifying += 1;
        let mut hit = [true, true];
        for (v, t) in [(&v1, &t1), (&v2, &t2)] {
            let res = process_scan(&mut models, &cfg, v, None).unwrap();
            let lesion = t.lesion_voxels(1);
            let found = lesion.iter().any(|&i| res.map.data[i] > 0.0);
            let clinical = lesions_from_threshold(v, Some(&res.region), 130.0, Connectivity::TwentySix, 3, None).unwrap().mask();
            let found_base = lesion.iter().any(|&i| clinical.data[i]);
            hit[0] &= found;
            hit[1] &= found_base;
        }
        proposed += hit[0] as usize;
        baseline += hit[1] as usize;
    }
    let pass = qualifying > 0 && proposed > baseline;
    verdict(
        10,
        "sub-threshold RCA detection",
        pass,
        &format!("{qualifying} qualifying pairs; detected in both scans: proposed {proposed}, baseline {baseline}"),
    );
    assert!(pass);
}

#[test]
fn criterion_11_end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_phantom_cohort(&dir.path().join("cohort"), 2, None, 1..=3, 11).unwrap();
    let mut cfg = PipelineConfig::desk();
    {
        let t = trained().lock().unwrap();
        let ck = dir.path().join("models");
        std::fs::create_dir_all(&ck).unwrap();
        t.heartseg.save(&ck.join("heartseg.json")).unwrap();
        t.classifier.save(&ck.join("classifier.json")).unwrap();
        t.cyclegan.save(&ck.join("cyclegan.json")).unwrap();
        cfg.heartseg_checkpoint = Some(ck.join("heartseg.json"));
        cfg.classifier_checkpoint = Some(ck.join("classifier.json"));
        cfg.cyclegan_checkpoint = Some(ck.join("cyclegan.json"));
    }
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let m = run_pipeline(&cfg, &cohort, &out).unwrap();
        let rep = report(&m, &cohort.pairs, Some(&out)).unwrap();
        let scores: Vec<Vec<u8>> = m.scans.iter().map(|s| std::fs::read(&s.scores).unwrap()).collect();
        let records: Vec<_> = m.scans.iter().map(|s| (s.proposed.clone(), s.baseline.clone())).collect();
        outputs.push((scores, records, rep.to_json().unwrap(), m.errors.len()));
    }
    let pass = outputs[0] == outputs[1] && outputs[0].3 == 0 && outputs[0].0.len() == 4;
    verdict(11, "end-to-end determinism", pass, &format!("{} scans, score files and report JSON identical: {}", outputs[0].0.len(), outputs[0] == outputs[1]));
    assert!(pass);
}
