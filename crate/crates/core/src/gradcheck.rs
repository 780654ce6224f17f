//! Central finite-difference checks of every analytic loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    class_loss, dice_loss, iou_loss, mask_loss, total_loss_fixed, IouLossKind, LossConfig, LossInputs,
};
use crate::matching::{hungarian, Assignment};
use crate::numerics::{l2_normalize, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 20;
/// Magnitude below which errors are measured absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max |a - n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<22} {:>5} {:>12} {:>6}\n", "loss", "cases", "max rel err", "ok");
        for e in &self.entries {
            s += &format!(
                "{:<22} {:>5} {:>12.3e} {:>6}\n",
                e.name,
                e.cases,
                e.max_rel_error,
                if e.passed { "yes" } else { "NO" }
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Weights and matching settings of the total-loss families.
    pub loss: LossConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cases: DEFAULT_CASES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            loss: LossConfig::default(),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    y[0] = 1.0;
    y
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = normal(rng, d, 1.0);
    l2_normalize(&mut v);
    v
}

const PIXELS: usize = 64;

fn check_mask(rng: &mut ChaCha8Rng, step: f64) -> Result<f64> {
    let y = binary(rng, PIXELS);
    let p = normal(rng, PIXELS, 2.0);
    let (_, g) = mask_loss(&y, &p)?;
    let n = central_difference(|x| mask_loss(&y, x).map_or(f64::NAN, |r| r.0), &p, step);
    Ok(max_relative_error(&g, &n))
}

fn check_dice(rng: &mut ChaCha8Rng, step: f64) -> Result<f64> {
    let y = binary(rng, PIXELS);
    let p = normal(rng, PIXELS, 2.0);
    let (_, g) = dice_loss(&y, &p);
    let n = central_difference(|x| dice_loss(&y, x).0, &p, step);
    Ok(max_relative_error(&g, &n))
}

fn check_iou(rng: &mut ChaCha8Rng, step: f64, kind: IouLossKind) -> Result<f64> {
    let y = binary(rng, PIXELS);
    let p = normal(rng, PIXELS, 2.0);
    let pred = rng.random_range(0.1..0.9);
    let r = iou_loss(&y, &p, pred, kind)?;
    let mut x = p.clone();
    x.push(pred);
    let f = |x: &[f64]| iou_loss(&y, &x[..PIXELS], x[PIXELS], kind).map_or(f64::NAN, |r| r.loss);
    let numeric = central_difference(f, &x, step);
    let mut analytic = r.grad_logits.clone();
    analytic.push(r.grad_predicted_iou);
    Ok(max_relative_error(&analytic, &numeric))
}

fn random_classes(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Tensor<f64> {
    let data = (0..c).flat_map(|_| unit(rng, d)).collect();
    Tensor::from_vec(&[c, d], data).expect("class table shape")
}

fn check_class(rng: &mut ChaCha8Rng, step: f64) -> Result<f64> {
    let (c, d) = (6, 8);
    let classes = random_classes(rng, c, d);
    let row = unit(rng, d);
    let y = rng.random_range(0..c);
    let tau = 0.2;
    let (_, g) = class_loss(y, &row, &classes, tau)?;
    let n = central_difference(
        |x| class_loss(y, x, &classes, tau).map_or(f64::NAN, |r| r.0),
        &row,
        step,
    );
    Ok(max_relative_error(&g, &n))
}

fn check_total(rng: &mut ChaCha8Rng, step: f64, cfg: &LossConfig) -> Result<f64> {
    let (n_gt, n_pred, c, d) = (3, 5, 4, 8);
    let targets: Vec<Vec<f64>> = (0..n_gt).map(|_| binary(rng, PIXELS)).collect();
    let gt_classes: Vec<usize> = (0..n_gt).map(|_| rng.random_range(0..c)).collect();
    let classes = random_classes(rng, c + 1, d);
    let inputs = LossInputs {
        logits: (0..n_pred).map(|_| normal(rng, PIXELS, 2.0)).collect(),
        p_iou: (0..n_pred).map(|_| rng.random_range(0.1..0.9)).collect(),
        g_ldp: (0..n_pred).map(|_| unit(rng, d)).collect(),
    };
    let cost = Tensor::from_vec(&[n_gt, n_pred], normal(rng, n_gt * n_pred, 1.0))?;
    let assignment: Assignment = hungarian(&cost)?;
    let tau = 0.2;

    let flatten = |inp: &LossInputs| -> Vec<f64> {
        let mut x: Vec<f64> = inp.logits.concat();
        x.extend(&inp.p_iou);
        x.extend(inp.g_ldp.concat());
        x
    };
    let unflatten = |x: &[f64]| -> LossInputs {
        let (logits, rest) = x.split_at(n_pred * PIXELS);
        let (p_iou, g) = rest.split_at(n_pred);
        LossInputs {
            logits: logits.chunks(PIXELS).map(<[f64]>::to_vec).collect(),
            p_iou: p_iou.to_vec(),
            g_ldp: g.chunks(d).map(<[f64]>::to_vec).collect(),
        }
    };
    let f = |x: &[f64]| {
        total_loss_fixed(&targets, &gt_classes, &unflatten(x), &classes, tau, &assignment, cfg)
            .map_or(f64::NAN, |(r, _)| r.l_total)
    };
    let (_, grad) = total_loss_fixed(&targets, &gt_classes, &inputs, &classes, tau, &assignment, cfg)?;
    let mut analytic: Vec<f64> = grad.logits.concat();
    analytic.extend(&grad.p_iou);
    analytic.extend(grad.g_ldp.concat());
    let numeric = central_difference(f, &flatten(&inputs), step);
    Ok(max_relative_error(&analytic, &numeric))
}

/// Runs every loss family over `cfg.cases` seeded cases.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    type Check = Box<dyn Fn(&mut ChaCha8Rng, f64) -> Result<f64>>;
    let base = LossConfig {
        iou_kind: IouLossKind::Regression,
        dice_in_mask_loss: false,
        ..cfg.loss
    };
    let literal = LossConfig {
        iou_kind: IouLossKind::LiteralMse,
        ..base
    };
    let with_dice = LossConfig {
        dice_in_mask_loss: true,
        ..base
    };
    let families: Vec<(&str, Check)> = vec![
        ("mask_bce", Box::new(check_mask)),
        (
            "iou_regression",
            Box::new(|r, s| check_iou(r, s, IouLossKind::Regression)),
        ),
        (
            "iou_literal_mse",
            Box::new(|r, s| check_iou(r, s, IouLossKind::LiteralMse)),
        ),
        ("class_ce", Box::new(check_class)),
        ("total", Box::new(move |r, s| check_total(r, s, &base))),
        ("total_literal_iou", Box::new(move |r, s| check_total(r, s, &literal))),
        ("dice", Box::new(check_dice)),
        ("total_with_dice", Box::new(move |r, s| check_total(r, s, &with_dice))),
    ];
    let mut entries = Vec::with_capacity(families.len());
    for (fi, (name, check)) in families.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for case in 0..cfg.cases {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((fi * 1000 + case) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = check(&mut rng, cfg.step)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        entries.push(GradcheckEntry {
            name: name.to_string(),
            cases: cfg.cases,
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        entries,
    })
}
