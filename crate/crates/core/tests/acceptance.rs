//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{naive_fit, random_archive, random_table};
use uqcurate::dataset::DatasetIndex;
use uqcurate::density::{ClassConditionalGaussian, Regularization};
use uqcurate::features::{build_archive, FeatureArchive, FeatureMap, MapSource, PoolOptions};
use uqcurate::filtering::{
    filter_noise_global, filter_redundant, redundancy_bin, FilterResult, Provenance,
};
use uqcurate::regularizer::{
    loss_gradient, loss_value, mean_bce, mean_weighted_entropy, ua_entropy_loss, LossBatch,
    Objective, SignMode,
};
use uqcurate::scoring::{normalize, score_dataset, ScoreTable};
use uqcurate::synth::{auroc, generate, recovery_experiment, Label, SynthConfig};
use uqcurate::{AnnotationId, CategoryId, ImageId};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                    - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

fn peak() -> usize {
    PEAK.load(Ordering::Relaxed)
}

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: uqcurate::Error) -> String {
    e.to_string()
}

fn fit_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dim = rng.random_range(1..=16);
        let classes = rng.random_range(1..=5);
        let n = rng.random_range((classes as usize * 2 + dim + 1)..=1000);
        let archive = random_archive(&mut rng, n, dim, classes);
        let model = ClassConditionalGaussian::fit(&archive, Regularization::Auto).map_err(err)?;
        let (means, cov) = naive_fit(&archive);
        for (cat, mu) in &means {
            for (a, b) in mu.iter().zip(model.mean(*cat).map_err(err)?) {
                worst = worst.max((a - b).abs());
            }
        }
        for (a, b) in cov.iter().zip(model.covariance()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-12, || {
        format!("max elementwise error {worst:e}")
    })?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("50 archives, max error {worst:e}, {secs:.2} s"))
}

fn mahalanobis_cases() -> Outcome {
    let one = |v: Vec<f64>| BTreeMap::from([(CategoryId(1), v)]);
    let counts = BTreeMap::from([(CategoryId(1), 1u64)]);
    let identity = ClassConditionalGaussian::from_parts(
        2,
        one(vec![0.0, 0.0]),
        counts.clone(),
        vec![1.0, 0.0, 0.0, 1.0],
        0.0,
    )
    .map_err(err)?;
    let diag = ClassConditionalGaussian::from_parts(
        2,
        one(vec![0.0, 0.0]),
        counts.clone(),
        vec![1.0, 0.0, 0.0, 4.0],
        0.0,
    )
    .map_err(err)?;
    let shifted = ClassConditionalGaussian::from_parts(
        2,
        one(vec![1.5, -2.0]),
        counts,
        vec![2.0, 0.3, 0.3, 1.0],
        0.0,
    )
    .map_err(err)?;
    let a = identity
        .mahalanobis(&[3.0, 4.0], CategoryId(1))
        .map_err(err)?;
    let b = diag.mahalanobis(&[0.0, 2.0], CategoryId(1)).map_err(err)?;
    let c = shifted
        .mahalanobis(&[1.5, -2.0], CategoryId(1))
        .map_err(err)?;
    ensure((a - 25.0).abs() <= 1e-12, || {
        format!("identity case gave {a}")
    })?;
    ensure((b - 1.0).abs() <= 1e-12, || {
        format!("diagonal case gave {b}")
    })?;
    ensure(c.abs() <= 1e-12, || format!("centroid gave {c}"))?;
    Ok(format!("{a}, {b}, {c}"))
}

/// Orthonormal columns from Gram-Schmidt on a Gaussian matrix, scaled by
/// singular values in `[1, 100]`: condition number at most 100.
fn well_conditioned(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut a = vec![0.0; dim * dim];
    for (j, col) in q.iter().enumerate() {
        let s = 10f64.powf(rng.random_range(0.0..=2.0));
        for i in 0..dim {
            a[i * dim + j] = col[i] * s;
        }
    }
    a
}

fn affine_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let dim = 8;
    let samples: Vec<(CategoryId, Vec<f64>)> = (0..600)
        .map(|i| {
            let k = i % 3;
            let v = (0..dim)
                .map(|j| rng.sample::<f64, _>(StandardNormal) + (k * j) as f64 * 0.5)
                .collect();
            (CategoryId(k as u32), v)
        })
        .collect();
    let base = ClassConditionalGaussian::fit_samples(dim, &samples, Regularization::Fixed(0.0))
        .map_err(err)?;
    let base_d: Vec<f64> = samples
        .iter()
        .map(|(c, v)| base.mahalanobis(v, *c))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let a = well_conditioned(&mut rng, dim);
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let moved: Vec<(CategoryId, Vec<f64>)> = samples
            .iter()
            .map(|(c, v)| {
                let w = (0..dim)
                    .map(|i| (0..dim).map(|j| a[i * dim + j] * v[j]).sum::<f64>() + b[i])
                    .collect();
                (*c, w)
            })
            .collect();
        let model = ClassConditionalGaussian::fit_samples(dim, &moved, Regularization::Fixed(0.0))
            .map_err(err)?;
        for ((c, v), d0) in moved.iter().zip(&base_d) {
            let d = model.mahalanobis(v, *c).map_err(err)?;
            worst = worst.max((d - d0).abs() / d0.abs().max(1e-300));
        }
    }
    ensure(worst <= 1e-8, || {
        format!("max relative deviation {worst:e}")
    })?;
    Ok(format!("10 transforms, max relative deviation {worst:e}"))
}

fn normalization() -> Outcome {
    let e = std::f64::consts::E;
    let n = normalize(&[1.0, e, e * e]).map_err(err)?;
    let expected = [0.0, 0.5, 1.0];
    for (a, b) in n.scores.iter().zip(expected) {
        ensure((a - b).abs() <= 1e-12, || {
            format!("{{1, e, e^2}} mapped to {:?}", n.scores)
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_rescale: f64 = 0.0;
    for _ in 0..100 {
        let (n, k) = (rng.random_range(2..300), rng.random_range(1..5));
        let table = random_table(&mut rng, n, k);
        for cat in table.categories().collect::<Vec<_>>() {
            let recs: Vec<_> = table.class_records(cat).collect();
            for r in &recs {
                ensure((0.0..=1.0).contains(&r.score), || {
                    format!("score {} outside [0, 1]", r.score)
                })?;
            }
            for x in &recs {
                for y in &recs {
                    if x.mahalanobis < y.mahalanobis {
                        ensure(x.score <= y.score, || {
                            "order within class not preserved".into()
                        })?;
                    }
                }
            }
            let d: Vec<f64> = recs.iter().map(|r| r.mahalanobis).collect();
            let c = rng.random_range(1e-3..1e3);
            let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
            let (s0, s1) = (
                normalize(&d).map_err(err)?,
                normalize(&scaled).map_err(err)?,
            );
            for (a, b) in s0.scores.iter().zip(&s1.scores) {
                worst_rescale = worst_rescale.max((a - b).abs());
            }
        }
    }
    ensure(worst_rescale <= 1e-12, || {
        format!("rescaling changed scores by {worst_rescale:e}")
    })?;
    Ok(format!("exact case ok, rescaling drift {worst_rescale:e}"))
}

fn quantile_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [10usize, 100, 1000] {
        let table = random_table(&mut rng, n, 1);
        for (p, hundredths) in [(0.90, 90usize), (0.95, 95), (1.0, 100)] {
            let kept = filter_noise_global(&table, p).map_err(err)?.kept.len();
            let expected = (hundredths * n).div_ceil(100);
            ensure(kept == expected, || {
                format!("n={n} p={p}: kept {kept}, expected {expected}")
            })?;
        }
    }
    for _ in 0..100 {
        let (n, k) = (rng.random_range(1..400), rng.random_range(1..4));
        let table = random_table(&mut rng, n, k);
        let mut ps = [rng.random_range(0.01..=1.0), rng.random_range(0.01..=1.0)];
        ps.sort_by(f64::total_cmp);
        let lo = filter_noise_global(&table, ps[0]).map_err(err)?;
        let hi = filter_noise_global(&table, ps[1]).map_err(err)?;
        ensure(lo.kept.is_subset(&hi.kept), || {
            format!("kept({}) not within kept({})", ps[0], ps[1])
        })?;
    }
    Ok("ceil(p n) kept for all 9 cases, monotone over 100 tables".into())
}

fn filter_bytes(r: &FilterResult) -> Vec<u8> {
    let mut buf = Vec::new();
    r.write_to(&mut buf).unwrap();
    buf
}

fn redundancy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let bins = 10;
    for _ in 0..50 {
        let (n, k) = (rng.random_range(1..600), rng.random_range(1..5));
        let table = random_table(&mut rng, n, k);
        let p = rng.random_range(0.0..1.0);
        let result = filter_redundant(&table, bins, p, rng.random()).map_err(err)?;
        let mut cells: BTreeMap<(CategoryId, u32), (usize, usize)> = BTreeMap::new();
        for r in &table.records {
            let cell = cells
                .entry((r.category_id, redundancy_bin(r.score, bins)))
                .or_default();
            cell.0 += 1;
            cell.1 += usize::from(result.dropped.contains(&r.annotation_id));
        }
        for ((cat, bin), (size, dropped)) in cells {
            let want = (p * size as f64).floor() as usize;
            ensure(dropped == want, || {
                format!("class {cat} bin {bin}: dropped {dropped} of {size}, expected {want}")
            })?;
        }
    }

    let table = random_table(&mut rng, 2000, 3);
    let p = 0.3;
    let a = filter_bytes(&filter_redundant(&table, bins, p, 99).map_err(err)?);
    let b = filter_bytes(&filter_redundant(&table, bins, p, 99).map_err(err)?);
    ensure(a == b, || "same seed produced different output".into())?;

    let mut sizes: HashMap<(CategoryId, u32), usize> = HashMap::new();
    for r in &table.records {
        *sizes
            .entry((r.category_id, redundancy_bin(r.score, bins)))
            .or_default() += 1;
    }
    let (mut mean, mut var) = (0.0, 0.0);
    for &n in sizes.values() {
        let (n, m) = (n as f64, n as f64 - (p * n as f64).floor());
        mean += m * m / n;
        if n > 1.0 {
            var += m * (m / n) * ((n - m) / n) * ((n - m) / (n - 1.0));
        }
    }
    let trials = 200;
    let mut total = 0.0;
    for t in 0..trials {
        let x = filter_redundant(&table, bins, p, 2 * t).map_err(err)?;
        let y = filter_redundant(&table, bins, p, 2 * t + 1).map_err(err)?;
        total += x.kept.intersection(&y.kept).count() as f64;
    }
    let observed = total / trials as f64;
    let sigma = (var / trials as f64).sqrt();
    ensure((observed - mean).abs() <= 3.0 * sigma, || {
        format!(
            "mean overlap {observed:.2}, expected {mean:.2} +- {:.2}",
            3.0 * sigma
        )
    })?;
    Ok(format!(
        "floor counts exact, deterministic, overlap {observed:.2} vs {mean:.2} (3 sigma {:.2})",
        3.0 * sigma
    ))
}

fn random_batch(rng: &mut ChaCha8Rng, sign: SignMode) -> LossBatch {
    let n = rng.random_range(1..=32);
    LossBatch::new(
        (0..n).map(|_| rng.random_range(0.01..0.99)).collect(),
        (0..n).map(|_| rng.random()).collect(),
        (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(),
        rng.random_range(0.0..1.0),
        sign,
    )
    .unwrap()
}

fn loss_suite() -> Outcome {
    let single =
        LossBatch::new(vec![0.5], vec![true], vec![1.0], 0.2, SignMode::Literal).map_err(err)?;
    let v = ua_entropy_loss(&single);
    ensure((v - 0.831776).abs() <= 1e-6, || {
        format!("single item gave {v}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut worst_grad: f64 = 0.0;
    let h = 1e-6;
    for i in 0..1000 {
        let sign = if i % 2 == 0 {
            SignMode::Literal
        } else {
            SignMode::MaxEntropy
        };
        let batch = random_batch(&mut rng, sign);
        let bce = mean_bce(batch.probs(), batch.targets()).map_err(err)?;
        let zero_beta = ua_entropy_loss(&batch.with_beta(0.0).map_err(err)?);
        let zero_d = ua_entropy_loss(
            &LossBatch::new(
                batch.probs().to_vec(),
                batch.targets().to_vec(),
                vec![0.0; batch.len()],
                batch.beta(),
                sign,
            )
            .map_err(err)?,
        );
        let focal0 = loss_value(&batch, Objective::Focal { gamma: 0.0 }).map_err(err)?;
        ensure((zero_beta - bce).abs() <= 1e-12, || {
            format!("beta=0 gave {zero_beta} vs BCE {bce}")
        })?;
        ensure((zero_d - bce).abs() <= 1e-12, || {
            format!("d=0 gave {zero_d} vs BCE {bce}")
        })?;
        ensure((focal0 - bce).abs() <= 1e-12, || {
            format!("gamma=0 gave {focal0} vs BCE {bce}")
        })?;

        let lit = ua_entropy_loss(&batch.with_sign_mode(SignMode::Literal));
        let max = ua_entropy_loss(&batch.with_sign_mode(SignMode::MaxEntropy));
        let gap = 2.0 * batch.beta() * mean_weighted_entropy(&batch);
        ensure((lit - max - gap).abs() <= 1e-12, || {
            format!("mode gap {} vs {gap}", lit - max)
        })?;

        let gamma = rng.random_range(0.0..4.0);
        for objective in [
            Objective::UaEntropy,
            Objective::ConstantEntropy,
            Objective::Focal { gamma },
        ] {
            let grad = loss_gradient(&batch, objective).map_err(err)?;
            // The loss is a mean of per-item terms, so differencing item j's
            // own term keeps the other items' rounding out of the estimate.
            let n = batch.len() as f64;
            for (j, g) in grad.iter().enumerate() {
                let item = |p: f64| -> Result<f64, String> {
                    let one = LossBatch::new(
                        vec![p],
                        vec![batch.targets()[j]],
                        vec![batch.scores()[j]],
                        batch.beta(),
                        batch.sign_mode(),
                    )
                    .map_err(err)?;
                    loss_value(&one, objective).map_err(err)
                };
                let p = batch.probs()[j];
                let fd = (item(p + h)? - item(p - h)?) / (2.0 * h * n);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-12);
                worst_grad = worst_grad.max(rel);
            }
        }
    }
    ensure(worst_grad <= 1e-5, || {
        format!("worst relative gradient error {worst_grad:e}")
    })?;
    Ok(format!(
        "single item {v:.6}, reductions exact, gradient error {worst_grad:e}"
    ))
}

/// Nearest-centroid oracle: squared Euclidean distance to the true class mean.
fn oracle_ranking(cfg: &SynthConfig) -> Result<(f64, f64), String> {
    let data = generate(cfg).map_err(err)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut all: Vec<(f64, AnnotationId)> = Vec::new();
    for e in data.archive.entries.values() {
        let mu = &data.class_means[&e.category_id];
        let d: f64 = e
            .vector
            .iter()
            .zip(mu)
            .map(|(x, m)| (f64::from(*x) - m).powi(2))
            .sum();
        all.push((d, e.annotation_id));
        match data.truth.labels[&e.annotation_id] {
            Label::Outlier => pos.push(d),
            Label::Clean => neg.push(d),
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = (cfg.contamination * all.len() as f64).round() as usize;
    let caught = all[..top]
        .iter()
        .filter(|(_, id)| data.truth.labels[id] == Label::Outlier)
        .count();
    Ok((
        auroc(&pos, &neg).map_err(err)?,
        caught as f64 / pos.len().max(1) as f64,
    ))
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig::default();
    let report = recovery_experiment(&cfg).map_err(err)?;
    let control_cfg = SynthConfig {
        outlier_shift: 0.0,
        ..cfg.clone()
    };
    let control = recovery_experiment(&control_cfg).map_err(err)?;
    let (oracle_auc, oracle_top) = oracle_ranking(&cfg)?;
    let (oracle_control, _) = oracle_ranking(&control_cfg)?;
    let secs = start.elapsed().as_secs_f64();

    let auc = report.auroc.unwrap_or(f64::NAN);
    let recall = report.outlier_recall().unwrap_or(f64::NAN);
    let control_auc = control.auroc.unwrap_or(f64::NAN);
    let detail = format!(
        "AUROC {auc:.4}, outliers dropped {recall:.4} ({}/{}), control AUROC {control_auc:.4}, \
         oracle AUROC {oracle_auc:.4} / top-5% recall {oracle_top:.4} / control {oracle_control:.4}, {secs:.1} s",
        report.dropped_outliers, report.outliers
    );
    ensure(auc >= 0.99, || format!("AUROC below 0.99: {detail}"))?;
    ensure(recall >= 0.90, || {
        format!("fewer than 90% of outliers dropped: {detail}")
    })?;
    ensure((control_auc - 0.5).abs() <= 0.05, || {
        format!("control outside 0.5 +- 0.05: {detail}")
    })?;
    ensure(secs < 60.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

struct GeneratedMaps {
    grid: usize,
    dim: usize,
}

impl MapSource for GeneratedMaps {
    fn load(&self, image: ImageId) -> uqcurate::Result<Option<FeatureMap>> {
        let len = self.grid * self.grid * self.dim;
        let data = (0..len)
            .map(|i| ((i as u64 + image.0) % 97) as f32 * 0.01)
            .collect();
        FeatureMap::new(image.0 as u32, self.grid, self.grid, self.dim, data).map(Some)
    }
}

fn pool_index(images: u64) -> DatasetIndex {
    let imgs: Vec<_> = (1..=images)
        .map(|i| serde_json::json!({"id": i, "width": 1024, "height": 1024, "file_name": format!("{i}.jpg")}))
        .collect();
    let anns: Vec<_> = (1..=images)
        .map(|i| {
            serde_json::json!({"id": i, "image_id": i, "category_id": 1 + i % 3,
            "bbox": [100.0, 120.0, 300.0 + i as f64, 250.0], "iscrowd": 0})
        })
        .collect();
    let cats: Vec<_> = (1..=3)
        .map(|c| serde_json::json!({"id": c, "name": format!("c{c}")}))
        .collect();
    let json = serde_json::json!({"images": imgs, "annotations": anns, "categories": cats});
    DatasetIndex::from_json_slice(json.to_string().as_bytes(), "generated")
        .unwrap()
        .0
}

fn pool_peak(images: u64) -> Result<usize, String> {
    let index = pool_index(images);
    let source = GeneratedMaps { grid: 64, dim: 256 };
    let base = reset_peak();
    let (archive, _) = build_archive(&index, &source, &PoolOptions::default()).map_err(err)?;
    let used = peak() - base;
    drop(archive);
    Ok(used)
}

fn throughput() -> Outcome {
    let cfg = SynthConfig {
        classes: 10,
        dim: 256,
        per_class: 10_000,
        contamination: 0.0,
        ..SynthConfig::default()
    };
    let data = generate(&cfg).map_err(err)?;
    let archive: FeatureArchive = data.archive;
    drop(data.index);
    let start = Instant::now();
    let model = ClassConditionalGaussian::fit(&archive, Regularization::Auto).map_err(err)?;
    let table: ScoreTable = score_dataset(&model, &archive).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let total_peak = peak();
    ensure(table.records.len() == 100_000, || {
        "not every vector was scored".into()
    })?;
    drop((table, model, archive));

    let small = pool_peak(20)?;
    let large = pool_peak(400)?;
    let gb = total_peak as f64 / (1u64 << 30) as f64;
    let detail = format!(
        "fit+score 100k x 256 in {secs:.2} s, process peak {gb:.2} GiB; pool peak {:.1} MiB at 20 images, {:.1} MiB at 400",
        small as f64 / 1048576.0,
        large as f64 / 1048576.0
    );
    ensure(secs < 60.0, || format!("too slow: {detail}"))?;
    ensure(total_peak < 2 << 30, || {
        format!("too much memory: {detail}")
    })?;
    // The archive itself grows with the object count; the map buffers must not.
    let archive_growth = 380 * (256 * 4 + 256);
    ensure(large <= small + archive_growth + (1 << 20), || {
        format!("pool peak grows with images: {detail}")
    })?;
    Ok(detail)
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    let json = r#"{"info": {"year": 2017}, "licenses": [], "custom": 1,
        "images": [{"id": 1, "width": 64, "height": 48, "file_name": "a.jpg", "coco_url": "x"}],
        "categories": [{"id": 2, "name": "cat", "supercategory": "animal"}],
        "annotations": [
          {"id": 5, "image_id": 1, "category_id": 2, "bbox": [1.5, 2.25, 10.0, 7.0], "area": 70.0,
           "iscrowd": 0, "segmentation": [[1.5, 2.25, 11.5, 2.25, 11.5, 9.25]]},
          {"id": 6, "image_id": 1, "category_id": 2, "bbox": [0.0, 0.0, 4.0, 4.0], "iscrowd": 1,
           "segmentation": {"size": [48, 64], "counts": [0, 4, 44, 4, 3020]}}]}"#;
    let (index, _) = DatasetIndex::from_json_slice(json.as_bytes(), "inline").map_err(err)?;
    let path = dir.path().join("a.json");
    uqcurate::dataset::write_dataset(&index, &path).map_err(err)?;
    let (back, _) = uqcurate::dataset::parse_dataset(&path).map_err(err)?;
    ensure(back == index, || "dataset changed on round trip".into())?;

    let archive = random_archive(&mut rng, 300, 12, 3);
    let path = dir.path().join("a.uqfa");
    uqcurate::features::write_archive(&archive, &path).map_err(err)?;
    ensure(
        {
            let back = uqcurate::features::read_archive(&path).map_err(err)?;
            back.dim == archive.dim && back.entries == archive.entries
        },
        || "archive changed".into(),
    )?;

    let model = ClassConditionalGaussian::fit(&archive, Regularization::Auto).map_err(err)?;
    let path = dir.path().join("m.uqgm");
    uqcurate::density::save_model(&model, &path).map_err(err)?;
    let loaded = uqcurate::density::load_model(&path).map_err(err)?;
    for _ in 0..100 {
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cat = CategoryId(rng.random_range(1..=3));
        let (a, b) = (
            model.mahalanobis(&v, cat).map_err(err)?,
            loaded.mahalanobis(&v, cat).map_err(err)?,
        );
        ensure(a.to_bits() == b.to_bits(), || {
            format!("probe distance {a} became {b}")
        })?;
    }

    let table = score_dataset(&model, &archive).map_err(err)?;
    let path = dir.path().join("s.tsv");
    uqcurate::scoring::write_scores(&table, &path).map_err(err)?;
    ensure(
        uqcurate::scoring::read_scores(&path).map_err(err)? == table,
        || "scores changed".into(),
    )?;

    let mut filters = vec![filter_noise_global(&table, 0.9).map_err(err)?];
    filters.push(uqcurate::filtering::filter_noise_per_class(&table, 0.8).map_err(err)?);
    filters.push(filter_redundant(&table, 10, 0.4, 3).map_err(err)?);
    for f in &filters {
        let path = dir.path().join("f.txt");
        uqcurate::filtering::write_filter(f, &path).map_err(err)?;
        let back = uqcurate::filtering::read_filter(&path).map_err(err)?;
        ensure(&back == f, || format!("{} filter changed", f.strategy))?;
        if let (Provenance::Global { threshold: a }, Provenance::Global { threshold: b }) =
            (&f.provenance, &back.provenance)
        {
            ensure(a.to_bits() == b.to_bits(), || "threshold drift".into())?;
        }
    }
    Ok(format!(
        "dataset, archive, model (100 probes), scores, {} filters",
        filters.len()
    ))
}

fn main() {
    let checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("fit oracle", fit_oracle),
        ("mahalanobis correctness", mahalanobis_cases),
        ("affine invariance", affine_invariance),
        ("normalization", normalization),
        ("quantile semantics", quantile_semantics),
        ("redundancy filter", redundancy),
        ("loss suite", loss_suite),
        ("synthetic recovery", synthetic_recovery),
        ("throughput", throughput),
        ("format round-trips", round_trips),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
