//! Built-in verification suite: finite-difference checks of every
//! differentiable op and of one full training loss, exhaustive-search
//! checks of the assignment solver, and brute-force checks of the metrics.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic, BinaryMask, SyntheticSpec};
use crate::error::Result;
use crate::evaluation::{contour_accuracy, region_similarity};
use crate::model::{hungarian, ClipInputs, Model, ModelConfig};
use crate::tensor::{
    finite_diff_check, finite_diff_check_subset, DeformGeometry, GradCheckReport, OpKind, Tape,
    Tensor, Var,
};
use crate::training::{compute_losses, ClipTargets, LossConfig};

pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub module: &'static str,
    pub op: String,
    /// Largest observed error (relative for gradients, absolute otherwise).
    pub observed: f64,
    pub tol: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SelfCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.checks.iter().map(|c| c.op.len()).max().unwrap_or(2);
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<11} {:<w$}  err {:.3e}  tol {:.0e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.module,
                c.op,
                c.observed,
                c.tol,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn grad_result(module: &'static str, op: &str, r: GradCheckReport) -> CheckResult {
    let detail = match &r.failure {
        Some(why) => why.clone(),
        None => {
            let worst = r
                .params
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
            match worst {
                Some(p) => format!(
                    "worst input {} element {}: tape {:.6e} numeric {:.6e}",
                    p.param, p.worst_element, p.tape_grad, p.numeric_grad
                ),
                None => String::new(),
            }
        }
    };
    CheckResult {
        module,
        op: op.to_string(),
        observed: r.max_rel_error,
        tol: r.tol,
        passed: r.passed(),
        detail,
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One `(name, function, inputs)` case per differentiable op. Outputs are
/// weighted by a random readout so every adjoint entry is distinct.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let mut cases: Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> = Vec::new();
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s);
    macro_rules! case {
        ($name:expr, [$($s:expr),*], $out:expr, |$t:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$(r(rng, &$s)),*, r(rng, &$out)];
            let n = inputs.len() - 1;
            let f: OpFn = Box::new(move |$t: &mut Tape<f64>, all: &[Var]| {
                let $v = &all[..n];
                let y: Var = $body?;
                let y = $t.mul(y, all[n])?;
                Ok($t.sum(y))
            });
            cases.push(($name, f, inputs));
        }};
    }
    case!("matmul", [[3, 4], [4, 2]], [3, 2], |t, v| t.matmul(v[0], v[1]));
    case!("matmul_t", [[3, 4], [5, 4]], [3, 5], |t, v| t.matmul_t(v[0], v[1]));
    case!("add", [[3, 4], [3, 4]], [3, 4], |t, v| t.add(v[0], v[1]));
    case!("sub", [[3, 4], [3, 4]], [3, 4], |t, v| t.sub(v[0], v[1]));
    case!("mul", [[3, 4], [3, 4]], [3, 4], |t, v| t.mul(v[0], v[1]));
    case!("add_row", [[3, 4], [4]], [3, 4], |t, v| t.add_row(v[0], v[1]));
    case!("scale_rows", [[3, 4], [3]], [3, 4], |t, v| t.scale_rows(v[0], v[1]));
    case!("scale", [[3, 4]], [3, 4], |t, v| Ok::<_, crate::Error>(t.scale(v[0], -1.7)));
    case!("gelu", [[3, 4]], [3, 4], |t, v| Ok::<_, crate::Error>(t.gelu(v[0])));
    case!("sigmoid", [[3, 4]], [3, 4], |t, v| Ok::<_, crate::Error>(t.sigmoid(v[0])));
    case!("softmax(axis 0)", [[3, 4]], [3, 4], |t, v| t.softmax(v[0], 0));
    case!("softmax(axis 1)", [[3, 4]], [3, 4], |t, v| t.softmax(v[0], 1));
    case!("layer_norm", [[3, 6], [6], [6]], [3, 6], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    case!("attention", [[4, 8], [6, 8], [6, 8]], [4, 8], |t, v| t.attention(v[0], v[1], v[2], 2, 2));
    case!("select_rows", [[4, 3]], [5, 3], |t, v| t.select_rows(v[0], &[2, 0, 2, 3, 1]));
    case!("slice_rows", [[5, 3]], [2, 3], |t, v| t.slice_rows(v[0], 1, 2));
    case!("concat_rows", [[2, 3], [1, 3]], [3, 3], |t, v| t.concat_rows(&[v[0], v[1]]));
    case!("concat_cols", [[2, 3], [2, 1]], [2, 4], |t, v| t.concat_cols(&[v[0], v[1]]));
    case!("reshape", [[2, 6]], [4, 3], |t, v| t.reshape(v[0], &[4, 3]));
    case!("sum", [[3, 4]], [1], |t, v| Ok::<_, crate::Error>(t.sum(v[0])));
    case!("mean", [[3, 4]], [1], |t, v| Ok::<_, crate::Error>(t.mean(v[0])));
    case!("mean_rows", [[3, 4]], [4], |t, v| t.mean_rows(v[0]));
    case!("cosine_rows", [[3, 4], [3, 4]], [3], |t, v| t.cosine_rows(v[0], v[1]));

    let soft: Tensor<f64> = Tensor::from_fn([3, 5], |_| rng.gen_range(0.0..1.0));
    let s2 = soft.clone();
    case!("bce_rows", [[3, 5]], [3], |t, v| t.bce_rows(v[0], &soft));
    case!("dice_rows", [[3, 5]], [3], |t, v| t.dice_rows(v[0], &s2));

    let geom = Arc::new(DeformGeometry::new(&[(4, 4), (2, 2)], 2, 2, 2));
    let rows = geom.frames * geom.tokens_per_frame;
    let offsets = Tensor::from_fn([rows, geom.offset_cols()], |_| rng.gen_range(-1.3..1.3));
    let weights = Tensor::from_fn([rows, geom.weight_cols()], |_| rng.gen_range(0.0..1.0));
    let readout = rand_tensor(rng, &[rows, 4]);
    let value = rand_tensor(rng, &[rows, 4]);
    let f: OpFn = Box::new(move |t, v| {
        let y = t.deform_sample(v[0], v[1], v[2], geom.clone())?;
        let y = t.mul(y, v[3])?;
        Ok(t.sum(y))
    });
    cases.push(("deform_sample", f, vec![value, offsets, weights, readout]));
    cases
}

/// Finite-difference check of every differentiable op. `fault` corrupts the
/// adjoint of one op kind (negative control).
pub fn op_gradient_suite(fault: Option<OpKind>) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    op_cases(&mut rng)
        .into_iter()
        .map(|(name, f, inputs)| {
            let report = finite_diff_check(
                move |t, v| {
                    t.corrupt_adjoint(fault);
                    f(t, v)
                },
                &inputs,
                1e-5,
                OP_TOL,
            );
            grad_result("tensor", name, report)
        })
        .collect()
}

/// Small architecture for the end-to-end check: `C = 8`, two frames,
/// `8 × 8` finest maps.
pub fn tiny_model_config() -> ModelConfig {
    let mut m = ModelConfig {
        channels: 8,
        heads: 2,
        ffn_ratio: 2,
        input_channels: vec![8, 8],
        text_channels: 8,
        ..ModelConfig::default()
    };
    m.encoder.layers = 2;
    m.encoder.points = 2;
    m.frame_decoder.layers = 2;
    m.frame_decoder.queries = 4;
    m.video_decoder.layers = 2;
    m.video_decoder.queries = 4;
    m
}

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        frames: 2,
        height: 32,
        width: 32,
        scales: vec![(8, 8), (4, 4)],
        channels: 8,
        text_channels: 8,
        text_tokens: 3,
        objects: 2,
        min_radius: 4.0,
        max_radius: 7.0,
        max_speed: 2.0,
        noise: 0.05,
    }
}

/// Freshly initialized deformable offsets put every sample on a pixel
/// centre, where bilinear sampling has a kink and central differences
/// average the two one-sided slopes. Nudges all offset parameters so
/// gradient checks run at a differentiable point.
pub fn move_samples_off_grid(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0ff5);
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|(n, _)| n.contains(".offsets."))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let id = model.store.id(&name).expect("listed parameter");
        for x in model.store.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
}

/// Finite differences of the full training loss against `picks` random
/// parameter elements, with the reordering and loss matchings held at their
/// values for the unperturbed parameters.
pub fn end_to_end_gradcheck(seed: u64, picks: usize, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let clip = generate_synthetic(&tiny_spec(seed))?;
    let mut model = Model::new(tiny_model_config(), seed)?;
    move_samples_off_grid(&mut model, seed);
    let inputs = ClipInputs::<f64>::from_clip(&clip);
    let loss_cfg = LossConfig::default();
    let frames: Vec<usize> = (0..clip.frames).collect();

    let mut tape = Tape::<f64>::new();
    let vars = model.store.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &inputs, None)?;
    let targets = ClipTargets::from_clip(&clip, &frames, out.mask_height, out.mask_width);
    let (_, matchings) = compute_losses(&mut tape, &out, &targets, &loss_cfg, None)?;
    let reorder = out.reorder.clone();
    drop(tape);

    let params: Vec<Tensor<f64>> = model.store.iter().map(|(_, t)| t.cast()).collect();
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |e| (i, e)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let chosen: Vec<(usize, usize)> = all.choose_multiple(&mut rng, picks).copied().collect();
    Ok(finite_diff_check_subset(
        |t, v| {
            t.corrupt_adjoint(fault);
            let out = model.forward(t, v, &inputs, Some(&reorder))?;
            let (l, _) = compute_losses(t, &out, &targets, &loss_cfg, Some(&matchings))?;
            Ok(l.total)
        },
        &params,
        1e-5,
        END_TO_END_TOL,
        &chosen,
    ))
}

fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    fn go(row: usize, n: usize, used: &mut [bool], acc: f64, cost: &[f64], best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for c in 0..n {
            if !used[c] {
                used[c] = true;
                go(row + 1, n, used, acc + cost[row * n + c], cost, best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, n, &mut vec![false; n], 0.0, cost, &mut best);
    best
}

/// 200 random matrices per size `2..=max_n`, half integer-valued, compared
/// against exhaustive search; plus one timed `500 × 500` solve.
pub fn hungarian_suite(max_n: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a11);
    let mut out = Vec::new();
    for n in 2..=max_n {
        let mut worst = 0.0f64;
        let mut failures = 0;
        for trial in 0..200 {
            let cost: Vec<f64> = (0..n * n)
                .map(|_| {
                    if trial % 2 == 0 {
                        rng.gen_range(0..10) as f64
                    } else {
                        rng.gen_range(-5.0..5.0)
                    }
                })
                .collect();
            let best = brute_force_assignment(&cost, n);
            let got = match hungarian(&cost, n) {
                Ok(a) => a.permutation.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum(),
                Err(_) => f64::INFINITY,
            };
            let err = (got - best).abs();
            worst = worst.max(err);
            failures += (err > 0.0) as usize;
        }
        out.push(CheckResult {
            module: "initializer",
            op: format!("hungarian n={n}"),
            observed: worst,
            tol: 0.0,
            passed: failures == 0,
            detail: format!("{failures}/200 suboptimal"),
        });
    }
    let n = 500;
    let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let start = Instant::now();
    let ok = hungarian(&cost, n).is_ok();
    let secs = start.elapsed().as_secs_f64();
    out.push(CheckResult {
        module: "initializer",
        op: "hungarian n=500 runtime".into(),
        observed: secs,
        tol: 1.0,
        passed: ok && secs < 1.0,
        detail: format!("{secs:.3} s"),
    });
    out
}

/// Boundary set by explicit neighbour inspection.
fn oracle_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let on = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if on(r, c) && [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)].iter().any(|&(y, x)| !on(y, x)) {
                pts.push((r, c));
            }
        }
    }
    pts
}

/// Contour accuracy by all-pairs boundary distances.
pub fn oracle_contour(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> f64 {
    let (bp, bg) = (oracle_boundary(pred), oracle_boundary(gt));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    let near = |a: &[(i64, i64)], b: &[(i64, i64)]| -> f64 {
        if a.is_empty() {
            return 0.0;
        }
        let hit = a
            .iter()
            .filter(|p| b.iter().any(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64) <= tol * tol))
            .count();
        hit as f64 / a.len() as f64
    };
    let (p, r) = (near(&bp, &bg), near(&bg, &bp));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn oracle_iou(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for r in 0..gt.height() {
        for c in 0..gt.width() {
            let (a, b) = (pred.get(r, c), gt.get(r, c));
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Random blobby mask: a union of a few rectangles and disks.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let shapes = rng.gen_range(0..4);
    let mut m = BinaryMask::empty(h, w);
    for _ in 0..shapes {
        let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        let rad = rng.gen_range(1.0..(h.min(w) as f64 / 2.0).max(1.5));
        let disk = rng.gen_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let inside = if disk {
                    dy * dy + dx * dx <= rad * rad
                } else {
                    dy.abs() <= rad && dx.abs() <= rad * 0.6
                };
                if inside {
                    m.set(r, c, true);
                }
            }
        }
    }
    m
}

pub fn metric_suite() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let (mut j_err, mut f_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        let tol = rng.gen_range(0..4) as f64;
        j_err = j_err.max((region_similarity(&a, &b).unwrap_or(f64::NAN) - oracle_iou(&a, &b)).abs());
        f_err = f_err.max(
            (contour_accuracy(&a, &b, tol).unwrap_or(f64::NAN) - oracle_contour(&a, &b, tol)).abs(),
        );
    }
    let j_err = if j_err.is_nan() { f64::INFINITY } else { j_err };
    let f_err = if f_err.is_nan() { f64::INFINITY } else { f_err };
    let m = random_mask(&mut rng, 24, 24);
    let same = (region_similarity(&m, &m).unwrap_or(0.0) + contour_accuracy(&m, &m, 1.0).unwrap_or(0.0)) / 2.0;
    let empty = BinaryMask::empty(24, 24);
    let full = BinaryMask::full(24, 24);
    let disjoint = (region_similarity(&empty, &full).unwrap_or(1.0)
        + contour_accuracy(&empty, &full, 1.0).unwrap_or(1.0))
        / 2.0;
    vec![
        CheckResult {
            module: "evaluation",
            op: "region_similarity vs pixel oracle".into(),
            observed: j_err,
            tol: 0.0,
            passed: j_err == 0.0,
            detail: "50 random masks".into(),
        },
        CheckResult {
            module: "evaluation",
            op: "contour_accuracy vs distance oracle".into(),
            observed: f_err,
            tol: 0.0,
            passed: f_err == 0.0,
            detail: "50 random masks".into(),
        },
        CheckResult {
            module: "evaluation",
            op: "J&F identical masks".into(),
            observed: (same - 1.0).abs(),
            tol: 0.0,
            passed: same == 1.0,
            detail: format!("J&F {same}"),
        },
        CheckResult {
            module: "evaluation",
            op: "J&F empty vs non-empty".into(),
            observed: disjoint,
            tol: 0.0,
            passed: disjoint == 0.0,
            detail: format!("J&F {disjoint}"),
        },
    ]
}

/// Runs every check; `fault` corrupts one op kind's adjoint.
pub fn run_selfcheck(fault: Option<OpKind>) -> SelfCheckReport {
    let mut checks = op_gradient_suite(fault);
    checks.push(match end_to_end_gradcheck(1, 48, fault) {
        Ok(r) => grad_result("training", "end-to-end loss", r),
        Err(e) => CheckResult {
            module: "training",
            op: "end-to-end loss".into(),
            observed: f64::INFINITY,
            tol: END_TO_END_TOL,
            passed: false,
            detail: e.to_string(),
        },
    });
    checks.extend(hungarian_suite(7));
    checks.extend(metric_suite());
    SelfCheckReport { checks }
}
