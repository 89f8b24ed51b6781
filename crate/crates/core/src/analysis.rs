//! Parameter-movement and noise-sensitivity measurements.
//!
//! [`rms_change`] compares two checkpoints component by component.
//! [`sensitivity_sweep`] adds Gaussian noise of growing standard deviation
//! to one component and records the BLEU it costs; [`interpolate_bleu_drop`]
//! reads that curve at an observed RMS movement, treating the RMS of an
//! `N(0, sigma^2)` perturbation as `sigma`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Codec;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::model::{Component, ParameterStore, Seq2Seq};
use crate::nn::{Parameter, SeededRng};

/// Sorted-by-name tensors of one component.
fn tensors(store: &ParameterStore, c: Component) -> Vec<&Parameter> {
    let mut v: Vec<&Parameter> = store.component(c).collect();
    v.sort_by(|a, b| a.name.cmp(&b.name));
    v
}

/// Root mean square of `a - b` over every scalar of component `c`.
///
/// Tensors are paired by name and summed in name order, so the result does
/// not depend on insertion order.
pub fn rms_change(a: &ParameterStore, b: &ParameterStore, c: Component) -> Result<f64> {
    let (ta, tb) = (tensors(a, c), tensors(b, c));
    if ta.len() != tb.len() {
        return Err(Error::Shape(format!(
            "{c}: {} tensors versus {}",
            ta.len(),
            tb.len()
        )));
    }
    if ta.is_empty() {
        return Err(Error::Invalid(format!("no tensors belong to {c}")));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (pa, pb) in ta.iter().zip(&tb) {
        if pa.name != pb.name || pa.value.shape() != pb.value.shape() {
            return Err(Error::Shape(format!(
                "{} {:?} versus {} {:?}",
                pa.name,
                pa.value.shape(),
                pb.name,
                pb.value.shape()
            )));
        }
        for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
            sum += (x - y) * (x - y);
        }
        n += pa.value.len();
    }
    Ok((sum / n as f64).sqrt())
}

/// Per-component RMS movement between two checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsReport {
    pub rows: Vec<(Component, f64)>,
}

impl RmsReport {
    /// Measures every component of [`Component::ALL`].
    pub fn between(a: &ParameterStore, b: &ParameterStore) -> Result<Self> {
        a.check_same_layout(b)?;
        let rows = Component::ALL
            .iter()
            .map(|&c| Ok((c, rms_change(a, b, c)?)))
            .collect::<Result<_>>()?;
        Ok(RmsReport { rows })
    }

    pub fn get(&self, c: Component) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == c).map(|r| r.1)
    }

    /// `component\trms` lines.
    pub fn tsv(&self) -> String {
        let mut s = String::from("component\trms\n");
        for (c, v) in &self.rows {
            let _ = writeln!(s, "{c}\t{v:.8}");
        }
        s
    }
}

/// Adds independent `N(0, sigma^2)` noise to every scalar of component `c`.
///
/// All other tensors are left untouched; `sigma = 0` returns an exact copy.
pub fn inject_noise(store: &ParameterStore, c: Component, sigma: f64, seed: u64) -> Result<ParameterStore> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma {sigma}")));
    }
    if store.count_params(c) == 0 {
        return Err(Error::Invalid(format!("no tensors belong to {c}")));
    }
    let mut out = store.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = SeededRng::new(seed).derive(&format!("noise-{c}"));
    for p in out.component_mut(c) {
        for v in p.value.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// Word-level sentences and references a curve is measured on.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub name: &'a str,
    pub src: &'a [Vec<String>],
    pub refs: &'a [Vec<String>],
}

/// BLEU of every noise trial at one sigma.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityPoint {
    pub sigma: f64,
    pub bleus: Vec<f64>,
}

impl SensitivityPoint {
    pub fn mean(&self) -> f64 {
        self.bleus.iter().sum::<f64>() / self.bleus.len() as f64
    }

    /// Sample standard deviation; 0 for a single trial.
    pub fn std(&self) -> f64 {
        let n = self.bleus.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.bleus.iter().map(|b| (b - m) * (b - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// BLEU as a function of noise added to one component.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCurve {
    pub component: Component,
    pub dataset: String,
    /// Strictly increasing in sigma, starting at 0.
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityCurve {
    /// Mean BLEU of the unperturbed model.
    pub fn baseline(&self) -> f64 {
        self.points[0].mean()
    }
}

/// Noise levels, trials per level and parallelism of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.first() != Some(&0.0) {
            return Err(Error::Invalid("sigma list must start at 0".into()));
        }
        if self.sigmas.iter().any(|s| !s.is_finite()) || self.sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("sigmas must be finite and strictly increasing".into()));
        }
        if self.trials == 0 {
            return Err(Error::Invalid("need at least one trial per sigma".into()));
        }
        Ok(())
    }

    /// Seed of one perturbation; depends only on the plan seed, component,
    /// sigma index and trial.
    pub fn trial_seed(&self, c: Component, sigma_index: usize, trial: usize) -> u64 {
        SeededRng::new(self.seed)
            .derive(&format!("sensitivity-{c}-{sigma_index}-{trial}"))
            .seed()
    }
}

/// Perturbs component `c` `plan.trials` times at every sigma and scores each
/// perturbed model by greedy BLEU on `eval`.
///
/// The sigma = 0 level is scored once and repeated for every trial.
pub fn sensitivity_sweep(
    model: &Seq2Seq,
    store: &ParameterStore,
    codec: &Codec,
    c: Component,
    plan: &SweepPlan,
    eval: EvalSet<'_>,
) -> Result<SensitivityCurve> {
    plan.validate()?;
    let score = |s: &ParameterStore| corpus_bleu(model, s, codec, eval.src, eval.refs, 1);
    let base = score(store)?;
    let jobs: Vec<(usize, usize)> = (1..plan.sigmas.len())
        .flat_map(|i| (0..plan.trials).map(move |t| (i, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let scores: Vec<f64> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, t)| score(&inject_noise(store, c, plan.sigmas[i], plan.trial_seed(c, i, t))?))
            .collect::<Result<_>>()
    })?;
    let mut points = vec![SensitivityPoint {
        sigma: 0.0,
        bleus: vec![base; plan.trials],
    }];
    for (i, chunk) in scores.chunks(plan.trials).enumerate() {
        points.push(SensitivityPoint {
            sigma: plan.sigmas[i + 1],
            bleus: chunk.to_vec(),
        });
    }
    Ok(SensitivityCurve {
        component: c,
        dataset: eval.name.to_string(),
        points,
    })
}

/// `component\tsigma\ttrial\tbleu` lines for every trial.
pub fn sensitivity_raw_tsv(curves: &[SensitivityCurve]) -> String {
    let mut s = String::from("component\tsigma\ttrial\tbleu\n");
    for c in curves {
        for p in &c.points {
            for (t, b) in p.bleus.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{}\t{:.4}", c.component, p.sigma, t, b);
            }
        }
    }
    s
}

/// `component\tsigma\tmean_bleu\tstd_bleu` lines.
pub fn sensitivity_tsv(curves: &[SensitivityCurve]) -> String {
    let mut s = String::from("component\tsigma\tmean_bleu\tstd_bleu\n");
    for c in curves {
        for p in &c.points {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}", c.component, p.sigma, p.mean(), p.std());
        }
    }
    s
}

/// Mean BLEU minus the unperturbed BLEU at `sigma = observed_rms`, linearly
/// interpolated between sampled sigmas. Negative values are losses.
///
/// Values outside the sampled range are refused rather than extrapolated.
pub fn interpolate_bleu_drop(curve: &SensitivityCurve, observed_rms: f64) -> Result<f64> {
    let pts = &curve.points;
    let max = pts.last().map_or(0.0, |p| p.sigma);
    if pts.is_empty() || pts[0].sigma != 0.0 {
        return Err(Error::Invalid("curve must start at sigma 0".into()));
    }
    if !(0.0..=max).contains(&observed_rms) {
        return Err(Error::Invalid(format!(
            "rms {observed_rms} lies outside the sampled sigma range [0, {max}]; not extrapolating"
        )));
    }
    let base = curve.baseline();
    let k = pts.partition_point(|p| p.sigma < observed_rms);
    if pts[k].sigma == observed_rms {
        return Ok(pts[k].mean() - base);
    }
    let (lo, hi) = (&pts[k - 1], &pts[k]);
    let t = (observed_rms - lo.sigma) / (hi.sigma - lo.sigma);
    let (d0, d1) = (lo.mean() - base, hi.mean() - base);
    Ok(d0 + t * (d1 - d0))
}

/// One row per component: how far full continued training moved it and the
/// BLEU change noise of that size causes.
#[derive(Clone, Debug, PartialEq)]
pub struct Table5 {
    pub rows: Vec<(Component, f64, f64)>,
}

impl Table5 {
    pub fn tsv(&self) -> String {
        let mut s = String::from("component\tobserved_rms\tinterpolated_bleu_drop\n");
        for (c, rms, d) in &self.rows {
            let _ = writeln!(s, "{c}\t{rms:.8}\t{d:.4}");
        }
        s
    }
}

pub fn build_table5(full: &RmsReport, curves: &[SensitivityCurve]) -> Result<Table5> {
    let rows = curves
        .iter()
        .map(|curve| {
            let rms = full
                .get(curve.component)
                .ok_or_else(|| Error::Invalid(format!("no RMS for {}", curve.component)))?;
            Ok((curve.component, rms, interpolate_bleu_drop(curve, rms)?))
        })
        .collect::<Result<_>>()?;
    Ok(Table5 { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(vals: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("enc.w", Component::Encoder, Tensor::new(&[vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s.add("dec.w", Component::Decoder, Tensor::new(&[1], vec![0.5]).unwrap())
            .unwrap();
        s
    }

    fn curve(points: &[(f64, f64)]) -> SensitivityCurve {
        SensitivityCurve {
            component: Component::Encoder,
            dataset: "test".into(),
            points: points
                .iter()
                .map(|&(sigma, b)| SensitivityPoint { sigma, bleus: vec![b] })
                .collect(),
        }
    }

    #[test]
    fn rms_of_two_deltas() {
        let a = store(&[0.0, 0.0]);
        let b = store(&[3.0, 4.0]);
        assert!((rms_change(&a, &b, Component::Encoder).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rms_change(&a, &b, Component::Decoder).unwrap(), 0.0);
        assert!(rms_change(&a, &b, Component::Softmax).is_err());
        assert!(rms_change(&a, &store(&[1.0]), Component::Encoder).is_err());
    }

    #[test]
    fn zero_noise_is_a_copy() {
        let a = store(&[-0.0, 1.0]);
        let b = inject_noise(&a, Component::Encoder, 0.0, 3).unwrap();
        assert!(a.values_bits_eq(&b));
        assert!(inject_noise(&a, Component::Encoder, -1.0, 3).is_err());
        assert!(inject_noise(&a, Component::Softmax, 0.1, 3).is_err());
    }

    #[test]
    fn interpolation() {
        let c = curve(&[(0.0, 50.0), (0.1, 48.0), (0.2, 40.0)]);
        assert_eq!(interpolate_bleu_drop(&c, 0.0).unwrap(), 0.0);
        assert_eq!(interpolate_bleu_drop(&c, 0.1).unwrap(), -2.0);
        assert!((interpolate_bleu_drop(&c, 0.15).unwrap() + 6.0).abs() < 1e-12);
        assert!(interpolate_bleu_drop(&c, 0.25).is_err());
        assert!(interpolate_bleu_drop(&c, -0.01).is_err());
    }

    #[test]
    fn plan_validation() {
        let mut p = SweepPlan {
            sigmas: vec![0.0, 0.1, 0.2],
            trials: 2,
            seed: 1,
            jobs: 1,
        };
        assert!(p.validate().is_ok());
        p.sigmas = vec![0.1, 0.2];
        assert!(p.validate().is_err());
        p.sigmas = vec![0.0, 0.2, 0.2];
        assert!(p.validate().is_err());
    }

    #[test]
    fn point_statistics() {
        let p = SensitivityPoint {
            sigma: 0.1,
            bleus: vec![1.0, 3.0],
        };
        assert_eq!(p.mean(), 2.0);
        assert!((p.std() - 2f64.sqrt()).abs() < 1e-12);
    }
}
