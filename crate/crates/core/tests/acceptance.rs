//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! The training criteria (5 to 8) use `configs/reference.toml`.

use std::path::Path;
use std::time::{Duration, Instant};

use exemplar_seg::esm::{replay_parts, synthesize_dataset, BackgroundFill, BackgroundSource, EsmConfig, TransformLogEntry};
use exemplar_seg::gradsuite;
use exemplar_seg::metrics::{dsc, hd95, seg_loss, MetricReport};
use exemplar_seg::numerics::gradcheck::GradCheckTolerance;
use exemplar_seg::pcem::{compute_prototypes, contrastive_loss, contrastive_terms, BatchPrototypes, IndicatorThreshold, PcemConfig, Prototype};
use exemplar_seg::phantom::generate_phantom_samples;
use exemplar_seg::pipeline::{module_ablation, run_pipeline, strategy_ablation, AblationTable, DataBundle, ModuleVariant, PipelineConfig};
use exemplar_seg::esm::{TransformStrategy, STRATEGY_ROWS};
use exemplar_seg::{Graph, Mask, Sample, Tensor, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn reference() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let text = std::fs::read_to_string(&path).expect("configs/reference.toml");
    let table: toml::Table = toml::from_str(&text).expect("reference config parses");
    let mut value = serde_json::to_value(PipelineConfig::default()).unwrap();
    merge(&mut value, serde_json::to_value(table).unwrap());
    let cfg: PipelineConfig = serde_json::from_value(value).expect("reference config fits PipelineConfig");
    cfg.validate().unwrap();
    cfg
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

// ---- criterion 1

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let reports = match gradsuite::full_suite(&GradCheckTolerance::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let composites = ["stage1_loss", "stage2_loss"].iter().all(|n| reports.iter().any(|r| r.name == *n));
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && composites && secs < 120.0,
        format!("{} checks, failed {:?}, max rel err {worst:.2e}, {secs:.1}s", reports.len(), failed),
    )
}

// ---- criterion 2

fn random_tensor(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor64 {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(h: usize, w: usize, k: u8, r: &mut ChaCha8Rng) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| r.random_range(0..k)).collect()).unwrap()
}

fn conv_oracle(x: &Tensor64, w: &Tensor64, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (co, k) = (w.dims()[0], w.dims()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += x.data()[(c * h + iy as usize) * wd + ix as usize] * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

fn check_conv(r: &mut ChaCha8Rng) -> bool {
    let k = [1, 3, 5][r.random_range(0..3)];
    let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
    let (stride, pad) = (r.random_range(1..3), r.random_range(0..=k / 2));
    // input sizes the strided window tiles exactly
    let side = |r: &mut ChaCha8Rng| k - 2 * pad + stride * r.random_range(0..5);
    let (h, w) = (side(r).max(1), side(r).max(1));
    let x = random_tensor(&[ci, h, w], r);
    let wt = random_tensor(&[co, ci, k, k], r);
    let b = random_tensor(&[co], r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
    let want = conv_oracle(&x, &wt, b.data(), stride, pad);
    g.value(y).data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9)
}

fn check_prototypes(r: &mut ChaCha8Rng) -> bool {
    let (c, h, w) = (r.random_range(1..5), r.random_range(2..9), r.random_range(2..9));
    let k = r.random_range(2..5u8);
    let x = random_tensor(&[c, h, w], r);
    let mask = random_mask(h, w, k, r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let protos = compute_prototypes(&mut g, xv, &mask, 0, k as usize, IndicatorThreshold::Positive).unwrap();
    (0..k).all(|cat| {
        let idx: Vec<usize> = (0..h * w).filter(|&i| mask.data()[i] == cat).collect();
        let p = &protos[cat as usize];
        if idx.is_empty() {
            return !p.present() && p.vector.is_none();
        }
        let got = g.value(p.vector.unwrap()).data().to_vec();
        p.pixel_count == idx.len()
            && (0..c).all(|ch| {
                let want = idx.iter().map(|&i| x.data()[ch * h * w + i]).sum::<f64>() / idx.len() as f64;
                (got[ch] - want).abs() < 1e-9
            })
    })
}

fn check_dsc(r: &mut ChaCha8Rng) -> bool {
    let (h, w) = (r.random_range(1..12), r.random_range(1..12));
    let (p, q) = (random_mask(h, w, 3, r), random_mask(h, w, 3, r));
    (1..3u8).all(|k| {
        let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
        for (x, y) in p.data().iter().zip(q.data()) {
            inter += usize::from(*x == k && *y == k);
            a += usize::from(*x == k);
            b += usize::from(*y == k);
        }
        let want = if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 };
        (dsc(&p, &q, k) - want).abs() < 1e-12
    })
}

fn boundary(m: &Mask, k: u8) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let (h, w) = (m.height() as i64, m.width() as i64);
    for y in 0..h {
        for x in 0..w {
            if m.get(y as usize, x as usize) != k {
                continue;
            }
            let interior = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().all(|(dy, dx)| {
                let (v, u) = (y + dy, x + dx);
                v >= 0 && u >= 0 && v < h && u < w && m.get(v as usize, u as usize) == k
            });
            if !interior {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn directed_p95(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|f| to.iter().map(|t| ((f.0 - t.0).powi(2) + (f.1 - t.1).powi(2)).sqrt()).fold(f64::MAX, f64::min))
        .collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    d[lo] + (rank - lo as f64) * (d[hi] - d[lo])
}

fn check_hd95(r: &mut ChaCha8Rng) -> bool {
    let (h, w) = (r.random_range(2..14), r.random_range(2..14));
    let (p, q) = (random_mask(h, w, 3, r), random_mask(h, w, 3, r));
    (1..3u8).all(|k| {
        let (a, b) = (boundary(&p, k), boundary(&q, k));
        let got = hd95(&p, &q, k);
        match (a.is_empty(), b.is_empty()) {
            (true, true) => got == 0.0,
            (false, false) => (got - directed_p95(&a, &b).max(directed_p95(&b, &a))).abs() < 1e-9,
            _ => (got - ((h * h + w * w) as f64).sqrt()).abs() < 1e-12,
        }
    })
}

fn seg_loss_oracle(logits: &[f64], k: usize, mask: &[u8]) -> f64 {
    let hw = mask.len();
    let (mut ce, mut inter, mut psum, mut gsum) = (0.0, vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for i in 0..hw {
        let col: Vec<f64> = (0..k).map(|c| logits[c * hw + i]).collect();
        let z: f64 = col.iter().map(|v| v.exp()).sum();
        for c in 0..k {
            let p = col[c].exp() / z;
            let t = f64::from(u8::from(mask[i] as usize == c));
            inter[c] += p * t;
            psum[c] += p;
            gsum[c] += t;
        }
        ce -= (col[mask[i] as usize].exp() / z).ln();
    }
    let dice = (0..k).map(|c| (2.0 * inter[c] + 1e-5) / (psum[c] + gsum[c] + 1e-5)).sum::<f64>() / k as f64;
    0.5 * ce / hw as f64 + 0.5 * (1.0 - dice)
}

fn check_seg_loss(r: &mut ChaCha8Rng) -> bool {
    let k = r.random_range(2..5);
    let (h, w) = (r.random_range(1..8), r.random_range(1..8));
    let logits = random_tensor(&[k, h, w], r);
    let mask = random_mask(h, w, k as u8, r);
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = seg_loss(&mut g, l, &mask).unwrap();
    (g.scalar_value(v) - seg_loss_oracle(logits.data(), k, mask.data())).abs() < 1e-9
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let checks: [(&str, fn(&mut ChaCha8Rng) -> bool); 5] = [
        ("compute_prototypes", check_prototypes),
        ("conv2d", check_conv),
        ("dsc", check_dsc),
        ("hd95", check_hd95),
        ("seg_loss", check_seg_loss),
    ];
    let mut failed = Vec::new();
    for (name, f) in checks {
        let bad = (0..120).filter(|_| !f(&mut r)).count();
        if bad > 0 {
            failed.push(format!("{name}: {bad}/120"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(failed.is_empty() && secs < 60.0, format!("5 ops x 120 instances, mismatches {failed:?}, {secs:.1}s"))
}

// ---- criterion 3

fn replay_matches(ex: &Sample, backgrounds: &[Sample], fill: BackgroundFill, s: &Sample, log: &[TransformLogEntry]) -> Result<(), String> {
    let (h, w) = (ex.height(), ex.width());
    let TransformLogEntry::Background { source, spec } = &log[0] else {
        return Err("log does not start with the background".into());
    };
    let base = match source {
        BackgroundSource::Black => exemplar_seg::esm::black_canvas(h, w),
        BackgroundSource::Phantom(id) => backgrounds.iter().find(|b| &b.id == id).ok_or("unknown background")?.clone(),
    };
    let organ_specs: Vec<_> = log[1..]
        .iter()
        .filter_map(|e| match e {
            TransformLogEntry::Organ { category, spec, .. } => Some((*category, spec.clone())),
            _ => None,
        })
        .collect();
    let (bg, organs) = replay_parts(ex, &base, spec, fill, &organ_specs).map_err(|e| e.to_string())?;
    let mut label = vec![0u8; h * w];
    let mut value = bg.image.data().to_vec();
    for o in &organs {
        for y in 0..o.height() {
            for x in 0..o.width() {
                if o.mask.get(y, x) == 1 {
                    let i = (o.top + y) * w + o.left + x;
                    label[i] = o.category;
                    value[i] = o.image.data()[y * o.width() + x];
                }
            }
        }
    }
    if s.mask.data() != &label[..] {
        return Err(format!("{}: labels differ", s.id));
    }
    for (i, (a, b)) in s.image.data().iter().zip(&value).enumerate() {
        if label[i] != 0 && (a - b).abs() > 1e-6 {
            return Err(format!("{}: pixel {i} is {a}, replay gives {b}", s.id));
        }
    }
    Ok(())
}

fn esm_consistency() -> Outcome {
    let t = Instant::now();
    let cfg = reference();
    let ds = generate_phantom_samples(1, &cfg.phantom).unwrap();
    let esm = EsmConfig {
        count: 100,
        ..cfg.esm.clone()
    };
    let out = synthesize_dataset(&ds.exemplar, &ds.background, &esm, 1).unwrap();
    let mut errors: Vec<String> = out
        .iter()
        .filter_map(|s| replay_matches(&ds.exemplar, &ds.background, esm.background_fill, &s.sample, &s.log).err())
        .collect();
    let dirty = ds.background.iter().filter(|b| b.mask.data().iter().any(|&v| v != 0)).count();
    if dirty > 0 {
        errors.push(format!("{dirty} background masks hold foreground"));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        errors.is_empty() && out.len() == 100 && secs < 60.0,
        format!("{} samples replayed, {} backgrounds, errors {:?}, {secs:.1}s", out.len(), ds.background.len(), errors.first()),
    )
}

// ---- criterion 4

fn prototypes(g: &mut Graph<f64>, rows: &[Vec<Option<Vec<f64>>>]) -> BatchPrototypes {
    let per_image = rows
        .iter()
        .enumerate()
        .map(|(n, row)| {
            row.iter()
                .enumerate()
                .map(|(k, v)| Prototype {
                    category: k as u8,
                    image: n,
                    vector: v.as_ref().map(|v| g.constant(Tensor::from_vec(&[v.len()], v.clone()).unwrap())),
                    pixel_count: usize::from(v.is_some()),
                })
                .collect()
        })
        .collect();
    BatchPrototypes::new(per_image).unwrap()
}

fn lc(rows: &[Vec<Option<Vec<f64>>>], cfg: &PcemConfig, seed: u64) -> f64 {
    let mut g = Graph::new();
    let b = prototypes(&mut g, rows);
    let l = contrastive_loss(&mut g, &b, cfg, seed, 0).unwrap();
    g.scalar_value(l)
}

fn contrastive_analytics() -> Outcome {
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let unit_tau = PcemConfig {
        tau: 1.0,
        ..Default::default()
    };
    // both images hold the same orthogonal pair: positive similarity 1, negative 0
    let full = vec![vec![Some(vec![0.0, 1.0]), Some(vec![1.0, 0.0])]; 2];
    let mut g = Graph::new();
    let b = prototypes(&mut g, &full);
    let terms = contrastive_terms(&mut g, &b, &unit_tau, 0, 0).unwrap();
    let term_err = terms.iter().map(|t| (g.scalar_value(t.value) - 0.3133).abs()).fold(0.0, f64::max);
    let closed = terms.len() == 4 && term_err < 1e-4 && (lc(&full, &unit_tau, 0) - 4.0 * want).abs() < 1e-9;
    // the second image lacks category 1, so only anchor (1, 0) survives
    let single = vec![vec![Some(vec![0.0, 1.0]), Some(vec![1.0, 0.0])], vec![Some(vec![0.0, 1.0]), None]];
    let single_value = lc(&single, &unit_tau, 0);
    let closed = closed && (single_value - 0.3133).abs() < 1e-4;

    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut min_lc, mut max_shift) = (f64::MAX, 0.0f64);
    for i in 0..300 {
        let n = r.random_range(2..5);
        let k = r.random_range(1..5);
        let c = r.random_range(2..6);
        let rows: Vec<Vec<Option<Vec<f64>>>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| r.random_bool(0.8).then(|| (0..c).map(|_| r.random_range(-1.0..1.0)).collect()))
                    .collect()
            })
            .collect();
        let cfg = PcemConfig::default();
        let base = lc(&rows, &cfg, i);
        min_lc = min_lc.min(base);
        let mut scaled = rows.clone();
        let (a, b) = (r.random_range(0..n), r.random_range(0..k));
        let s = r.random_range(0.01..100.0);
        if let Some(v) = scaled[a][b].as_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
        max_shift = max_shift.max((lc(&scaled, &cfg, i) - base).abs());
    }
    outcome(
        closed && min_lc >= 0.0 && max_shift < 1e-6,
        format!(
            "anchor term {:.6} (want 0.3133), single-anchor L_c {single_value:.6}, min L_c {min_lc:.3e} over 300 batches, max rescale shift {max_shift:.2e}",
            terms.first().map_or(f64::NAN, |t| g.scalar_value(t.value))
        ),
    )
}

// ---- criteria 5 to 8

struct Ablations {
    module: AblationTable,
    strategy: AblationTable,
    module_time: Duration,
    strategy_time: Duration,
}

fn run_ablations(cfg: &PipelineConfig) -> Ablations {
    let (mut module, mut strategy) = (Vec::new(), Vec::new());
    let (mut module_time, mut strategy_time) = (Duration::ZERO, Duration::ZERO);
    for seed in SEEDS {
        let mut c = cfg.clone();
        c.dataset_seed = seed;
        c.trainer.seed = seed;
        let t = Instant::now();
        let data = DataBundle::generate(seed, &c.phantom).unwrap();
        let m = module_ablation(&c, &data).unwrap();
        module_time += t.elapsed();
        let t = Instant::now();
        let s = strategy_ablation(&c, &data, Some(&m[1].1)).unwrap();
        strategy_time += t.elapsed();
        eprintln!(
            "seed {seed}: module {:?}",
            m.iter().map(|(v, r)| format!("{} {:.3}", v.label(), r.dsc_avg)).collect::<Vec<_>>()
        );
        eprintln!(
            "seed {seed}: strategy {:?}",
            s.iter().map(|(v, r)| format!("{} {:.3}", v.label(), r.dsc_avg)).collect::<Vec<_>>()
        );
        module.push(m.into_iter().map(|(_, r)| r).collect::<Vec<MetricReport>>());
        strategy.push(s.into_iter().map(|(_, r)| r).collect::<Vec<MetricReport>>());
    }
    let labels: Vec<String> = ModuleVariant::ALL.iter().map(|v| v.label().to_string()).collect();
    let slabels: Vec<String> = STRATEGY_ROWS.iter().map(|s| s.label()).collect();
    Ablations {
        module: AblationTable::from_reports("module ablation", &SEEDS, &labels, &module),
        strategy: AblationTable::from_reports("transform strategy ablation", &SEEDS, &slabels, &strategy),
        module_time,
        strategy_time,
    }
}

fn module_dsc(a: &Ablations) -> [f64; 4] {
    ModuleVariant::ALL.map(|v| a.module.row(v.label()).expect("module row").dsc)
}

fn module_ordering(a: &Ablations) -> Outcome {
    let [bs, esm, s1, full] = module_dsc(a);
    let mins = a.module_time.as_secs_f64() / 60.0;
    outcome(
        bs < esm && esm < s1 && s1 <= full && esm - bs >= 0.05 && full - bs >= 0.10 && mins <= 60.0,
        format!(
            "BS {bs:.3} < +ESM {esm:.3} < +ESM+PCEM_S1 {s1:.3} <= full {full:.3}; +ESM-BS {:+.3} (>= 0.05), full-BS {:+.3} (>= 0.10); {mins:.1} min",
            esm - bs,
            full - bs
        ),
    )
}

fn strategy_ordering(a: &Ablations) -> Outcome {
    let dsc = |s: TransformStrategy| a.strategy.row(&s.label()).expect("strategy row").dsc;
    let all = dsc(TransformStrategy::all_on());
    let none = dsc(TransformStrategy::all_off());
    let single: Vec<(String, f64)> = STRATEGY_ROWS
        .iter()
        .filter(|s| s.active_axes() == 3)
        .map(|s| (s.label(), dsc(*s)))
        .collect();
    let others: Vec<f64> = STRATEGY_ROWS
        .iter()
        .filter(|&&s| s != TransformStrategy::all_off())
        .map(|s| dsc(*s))
        .collect();
    let top = single.iter().all(|(_, v)| all >= *v);
    let bottom = others.iter().all(|v| none < *v);
    outcome(
        top && bottom,
        format!(
            "all-on {all:.3} vs single-axis-off {:?}; none {none:.3} vs min other {:.3}; {:.1} min",
            single.iter().map(|(l, v)| format!("{l} {v:.3}")).collect::<Vec<_>>(),
            others.iter().cloned().fold(f64::MAX, f64::min),
            a.strategy_time.as_secs_f64() / 60.0
        ),
    )
}

fn head(path: &Path, n: usize) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().take(n + 1).map(str::to_string).collect()
}

fn determinism(cfg: &PipelineConfig) -> Outcome {
    let mut c = cfg.clone();
    c.dataset_seed = 1;
    c.trainer.seed = 1;
    c.trainer.steps_stage1 = 200;
    c.trainer.steps_stage2 = 200;
    c.trainer.pcem_warmup = 5;
    let data = DataBundle::generate(1, &c.phantom).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            let o = run_pipeline(&c, &data, Some(&out)).unwrap();
            (out, o)
        })
        .collect();
    let csv = |i: usize, stage: &str| head(&runs[i].0.join(stage).join("losses.csv"), 10);
    let same_csv = ["stage1", "stage2"].iter().all(|s| {
        let a = csv(0, s);
        a.len() == 11 && a == csv(1, s)
    });
    let (ra, rb) = (runs[0].1.report(), runs[1].1.report());
    let same_report = ra == rb && runs[0].1.report_stage1 == runs[1].1.report_stage1;
    let same_files = std::fs::read(runs[0].0.join("report.json")).unwrap() == std::fs::read(runs[1].0.join("report.json")).unwrap();
    outcome(
        same_csv && same_report && same_files,
        format!(
            "losses.csv first 10 rows identical: {same_csv}; MetricReport identical: {}; final DSC {:.4}",
            same_report && same_files,
            ra.dsc_avg
        ),
    )
}

fn pseudo_label_utility(a: &Ablations) -> Outcome {
    let [_, _, s1, full] = module_dsc(a);
    outcome(full >= s1 - 0.01, format!("full {full:.3} >= +ESM+PCEM_S1 {s1:.3} - 0.01"))
}

/// Mirrors libtest's filtering: a name filter that does not match, or a
/// matching `--skip`, turns the suite into a no-op.
fn selected() -> bool {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut filters = Vec::new();
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--skip" => {
                if args.get(i + 1).is_some_and(|s| "acceptance".contains(s.as_str())) {
                    return false;
                }
                i += 1;
            }
            a if !a.starts_with('-') => filters.push(a),
            _ => {}
        }
        i += 1;
    }
    filters.is_empty() || filters.iter().any(|f| "acceptance".contains(f))
}

fn main() {
    if !selected() {
        println!("acceptance: filtered out");
        return;
    }
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    record("1 gradient integrity", gradient_integrity());
    record("2 oracle equivalence", oracle_equivalence());
    record("3 ESM label consistency", esm_consistency());
    record("4 contrastive analytics", contrastive_analytics());
    let cfg = reference();
    let ablations = run_ablations(&cfg);
    println!("{}", ablations.module.table());
    println!("{}", ablations.strategy.table());
    record("5 module ablation ordering", module_ordering(&ablations));
    record("6 transform strategy ordering", strategy_ordering(&ablations));
    record("7 determinism", determinism(&cfg));
    record("8 pseudo-label utility", pseudo_label_utility(&ablations));
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("\nsummary ({:.1} min):", started.elapsed().as_secs_f64() / 60.0);
    for (name, o) in &results {
        println!("  {} {name}", if o.passed { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
