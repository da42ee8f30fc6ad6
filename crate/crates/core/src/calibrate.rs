//! Post-hoc calibrators over primary-model logits: temperature scaling,
//! ensemble temperature scaling, and one-vs-rest isotonic regression.

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::grad::{log_softmax_at, softmax};
use crate::uq::ProbVector;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CALIBRATOR_MAGIC: &[u8] = b"UUCAL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CalibratorKind {
    Ts,
    Ets,
    Ir,
}

impl CalibratorKind {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "ts" => Ok(CalibratorKind::Ts),
            "ets" => Ok(CalibratorKind::Ets),
            "ir" => Ok(CalibratorKind::Ir),
            other => Err(Error::Config(format!("unknown calibrator kind '{other}'"))),
        }
    }

    fn tag_byte(self) -> u8 {
        match self {
            CalibratorKind::Ts => 0,
            CalibratorKind::Ets => 1,
            CalibratorKind::Ir => 2,
        }
    }
}

/// Monotone nondecreasing step function stored as block starts and values.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFn {
    starts: Vec<f64>,
    values: Vec<f64>,
}

impl StepFn {
    pub fn new(starts: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if starts.is_empty() || starts.len() != values.len() {
            return Err(Error::Config("step function needs matching nonempty arrays".into()));
        }
        if starts.windows(2).any(|w| w[0] > w[1]) || values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("step function must be nondecreasing".into()));
        }
        Ok(StepFn { starts, values })
    }

    /// Value of the block whose start is the largest one <= p.
    pub fn eval(&self, p: f64) -> f64 {
        match self.starts.partition_point(|&s| s <= p) {
            0 => self.values[0],
            k => self.values[k - 1],
        }
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibratorParams {
    /// softmax(z / T)
    Ts { temperature: f64 },
    /// w1 * softmax(z/T) + w2 * softmax(z) + w3 * uniform
    Ets { temperature: f64, weights: [f64; 3] },
    /// Per-class monotone maps applied to softmax(z), then renormalized.
    Ir { maps: Vec<StepFn> },
}

impl CalibratorParams {
    pub fn kind(&self) -> CalibratorKind {
        match self {
            CalibratorParams::Ts { .. } => CalibratorKind::Ts,
            CalibratorParams::Ets { .. } => CalibratorKind::Ets,
            CalibratorParams::Ir { .. } => CalibratorKind::Ir,
        }
    }
}

fn check_validation(logits: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if logits.is_empty() || labels.is_empty() {
        return Err(Error::Empty("calibration set is empty".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape("logits/labels length mismatch".into()));
    }
    let c = logits[0].len();
    if logits.iter().any(|z| z.len() != c) {
        return Err(Error::Shape("ragged logit matrix".into()));
    }
    if labels.iter().any(|&y| y >= c) {
        return Err(Error::Index("label out of range".into()));
    }
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::Degenerate(
            "calibration set contains a single class".into(),
        ));
    }
    Ok(c)
}

fn nll_at_temperature(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let mut acc = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        acc -= log_softmax_at(&scaled, y);
    }
    acc / labels.len() as f64
}

/// Golden-section search for the NLL-minimizing temperature on [0.05, 20].
fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.05f64, 20.0f64);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = nll_at_temperature(logits, labels, c);
    let mut fd = nll_at_temperature(logits, labels, d);
    while b - a > 1e-6 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = nll_at_temperature(logits, labels, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = nll_at_temperature(logits, labels, d);
        }
    }
    0.5 * (a + b)
}

/// Pool-adjacent-violators for unit-weight squared error. Input pairs must be
/// sorted by x ascending (stable in the original index for ties).
fn pav(points: &[(f64, f64)]) -> StepFn {
    struct Block {
        start_x: f64,
        sum: f64,
        count: f64,
    }
    let mut blocks: Vec<Block> = Vec::new();
    for &(x, y) in points {
        blocks.push(Block {
            start_x: x,
            sum: y,
            count: 1.0,
        });
        while blocks.len() >= 2 {
            let n = blocks.len();
            let last = blocks[n - 1].sum / blocks[n - 1].count;
            let prev = blocks[n - 2].sum / blocks[n - 2].count;
            if prev <= last {
                break;
            }
            let b = blocks.pop().unwrap();
            let a = blocks.last_mut().unwrap();
            a.sum += b.sum;
            a.count += b.count;
        }
    }
    let starts: Vec<f64> = blocks.iter().map(|b| b.start_x).collect();
    let values: Vec<f64> = blocks.iter().map(|b| b.sum / b.count).collect();
    StepFn::new(starts, values).expect("pav output is monotone by construction")
}

/// Fit a calibrator on validation logits and labels.
///
/// TS minimizes validation NLL by golden-section search; ETS reuses the TS
/// temperature and grid-searches the 3-simplex mixture weights at step 0.01;
/// IR fits a one-vs-rest PAV map per class.
pub fn fit_calibrator(
    kind: CalibratorKind,
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<CalibratorParams> {
    let c = check_validation(logits, labels)?;
    match kind {
        CalibratorKind::Ts => Ok(CalibratorParams::Ts {
            temperature: fit_temperature(logits, labels),
        }),
        CalibratorKind::Ets => {
            let t = fit_temperature(logits, labels);
            let probs_t: Vec<Vec<f64>> = logits
                .iter()
                .map(|z| softmax(&z.iter().map(|v| v / t).collect::<Vec<_>>()))
                .collect();
            let probs_raw: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
            let uniform = 1.0 / c as f64;
            let mut best = (f64::INFINITY, [1.0, 0.0, 0.0]);
            for i in 0..=100usize {
                for j in 0..=(100 - i) {
                    let w = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                    let mut nll = 0.0;
                    for ((pt, pr), &y) in probs_t.iter().zip(&probs_raw).zip(labels) {
                        let p = w[0] * pt[y] + w[1] * pr[y] + w[2] * uniform;
                        nll -= p.max(1e-12).ln();
                    }
                    if nll < best.0 {
                        best = (nll, w);
                    }
                }
            }
            Ok(CalibratorParams::Ets {
                temperature: t,
                weights: best.1,
            })
        }
        CalibratorKind::Ir => {
            let mut maps = Vec::with_capacity(c);
            for class in 0..c {
                let mut pts: Vec<(f64, f64)> = logits
                    .iter()
                    .zip(labels)
                    .map(|(z, &y)| (softmax(z)[class], if y == class { 1.0 } else { 0.0 }))
                    .collect();
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                maps.push(pav(&pts));
            }
            Ok(CalibratorParams::Ir { maps })
        }
    }
}

/// Map raw logits through a calibrator to a probability vector.
pub fn apply_calibrator(cal: &CalibratorParams, logits: &[f64]) -> Result<ProbVector> {
    match cal {
        CalibratorParams::Ts { temperature } => {
            let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
            ProbVector::new(softmax(&scaled))
        }
        CalibratorParams::Ets {
            temperature,
            weights,
        } => {
            let c = logits.len();
            let pt = softmax(&logits.iter().map(|v| v / temperature).collect::<Vec<_>>());
            let pr = softmax(logits);
            let uniform = 1.0 / c as f64;
            let mixed: Vec<f64> = pt
                .iter()
                .zip(&pr)
                .map(|(a, b)| weights[0] * a + weights[1] * b + weights[2] * uniform)
                .collect();
            ProbVector::new(mixed)
        }
        CalibratorParams::Ir { maps } => {
            if maps.len() != logits.len() {
                return Err(Error::Shape(format!(
                    "calibrator has {} classes, logits {}",
                    maps.len(),
                    logits.len()
                )));
            }
            let raw = softmax(logits);
            let mapped: Vec<f64> = raw.iter().zip(maps).map(|(&p, m)| m.eval(p).max(0.0)).collect();
            let sum: f64 = mapped.iter().sum();
            if sum <= 0.0 {
                let c = logits.len();
                return ProbVector::new(vec![1.0 / c as f64; c]);
            }
            ProbVector::new(mapped.iter().map(|v| v / sum).collect())
        }
    }
}

pub fn save_calibrator(cal: &CalibratorParams, path: &Path) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(CALIBRATOR_MAGIC)?;
    w.u8(cal.kind().tag_byte())?;
    match cal {
        CalibratorParams::Ts { temperature } => w.f32(*temperature as f32)?,
        CalibratorParams::Ets {
            temperature,
            weights,
        } => {
            w.f32(*temperature as f32)?;
            for &wi in weights {
                w.f32(wi as f32)?;
            }
        }
        CalibratorParams::Ir { maps } => {
            w.u32(maps.len() as u32)?;
            for m in maps {
                w.u32(m.starts().len() as u32)?;
                w.f32s(m.starts().iter().map(|&v| v as f32))?;
                w.f32s(m.values().iter().map(|&v| v as f32))?;
            }
        }
    }
    w.flush()
}

pub fn load_calibrator(path: &Path) -> Result<CalibratorParams> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(CALIBRATOR_MAGIC)?;
    let kind = r.u8("kind tag")?;
    let cal = match kind {
        0 => CalibratorParams::Ts {
            temperature: r.f32("temperature")? as f64,
        },
        1 => {
            let t = r.f32("temperature")? as f64;
            let w1 = r.f32("w1")? as f64;
            let w2 = r.f32("w2")? as f64;
            let w3 = r.f32("w3")? as f64;
            CalibratorParams::Ets {
                temperature: t,
                weights: [w1, w2, w3],
            }
        }
        2 => {
            let c = r.u32("class count")? as usize;
            let mut maps = Vec::with_capacity(c);
            for _ in 0..c {
                let len = r.u32("map length")? as usize;
                let starts: Vec<f64> = r.f32s(len, "starts")?.into_iter().map(f64::from).collect();
                let values: Vec<f64> = r.f32s(len, "values")?.into_iter().map(f64::from).collect();
                maps.push(StepFn::new(starts, values)?);
            }
            CalibratorParams::Ir { maps }
        }
        t => return Err(Error::format_at(5, format!("unknown calibrator tag {t}"))),
    };
    r.expect_eof()?;
    Ok(cal)
}
