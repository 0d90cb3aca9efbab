//! Stochastic (perturbed-observation) ensemble Kalman analysis of the
//! augmented control vector, and stacking of heterogeneous observations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;
use rand::Rng;

use crate::error::{OsseError, Result};
use crate::obs::{Anamorphosis, GaugeObs, SwotNodeObs, WsrObs};
use crate::rng;

/// Observations whose equivalent is missing for more than this fraction of
/// members are dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Gauge,
    Wsr,
    Swot,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Gauge => "gauge",
            Source::Wsr => "wsr",
            Source::Swot => "swot",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsMeta {
    pub source: Source,
    pub id: String,
    pub t: f64,
}

/// One candidate observation with its per-member equivalents.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub meta: ObsMeta,
    pub y: f64,
    pub r: f64,
    pub equivalents: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisBatch {
    /// N x d control matrix, one member per row.
    pub x: DMatrix<f64>,
    /// N x m model equivalents.
    pub y_eq: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Diagonal observation error variances.
    pub r: DVector<f64>,
    pub meta: Vec<ObsMeta>,
}

impl AnalysisBatch {
    /// Drop rows with too many missing equivalents and fill the rest with
    /// the row mean of the members that have one.
    pub fn new(x: DMatrix<f64>, rows: Vec<ObsRow>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(OsseError::invalid("analysis needs at least 2 members"));
        }
        let mut kept = Vec::new();
        for row in rows {
            if row.equivalents.len() != n {
                return Err(OsseError::invalid(format!(
                    "observation {}:{} has {} equivalents for {n} members",
                    row.meta.source.as_str(),
                    row.meta.id,
                    row.equivalents.len()
                )));
            }
            if !(row.r > 0.0 && row.r.is_finite() && row.y.is_finite()) {
                return Err(OsseError::invalid(format!(
                    "observation {}:{} needs a finite value and positive variance",
                    row.meta.source.as_str(),
                    row.meta.id
                )));
            }
            let present: Vec<f64> = row.equivalents.iter().flatten().copied().collect();
            let missing = n - present.len();
            if present.is_empty() || missing as f64 > MAX_MISSING_FRACTION * n as f64 {
                continue;
            }
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            kept.push((row.meta, row.y, row.r, row.equivalents.iter().map(|e| e.unwrap_or(mean)).collect::<Vec<_>>()));
        }
        let m = kept.len();
        let y_eq = DMatrix::from_fn(n, m, |i, j| kept[j].3[i]);
        Ok(Self {
            x,
            y_eq,
            y: DVector::from_iterator(m, kept.iter().map(|k| k.1)),
            r: DVector::from_iterator(m, kept.iter().map(|k| k.2)),
            meta: kept.into_iter().map(|k| k.0).collect(),
        })
    }

    pub fn members(&self) -> usize {
        self.x.nrows()
    }

    pub fn obs_count(&self) -> usize {
        self.y.len()
    }
}

fn anomalies(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Cross covariance `Cxy` (d x m) and innovation covariance `Cyy + R`.
fn covariances(batch: &AnalysisBatch) -> (DMatrix<f64>, DMatrix<f64>) {
    let scale = 1.0 / (batch.members() as f64 - 1.0);
    let xa = anomalies(&batch.x);
    let ya = anomalies(&batch.y_eq);
    let cxy = xa.transpose() * &ya * scale;
    let mut s = ya.transpose() * &ya * scale;
    s = (&s + s.transpose()) * 0.5;
    for (k, r) in batch.r.iter().enumerate() {
        s[(k, k)] += r;
    }
    (cxy, s)
}

/// Kalman gain `Cxy (Cyy + R)^-1` from a Cholesky solve.
pub fn gain(batch: &AnalysisBatch) -> Result<DMatrix<f64>> {
    let (cxy, s) = covariances(batch);
    let chol = s.cholesky().ok_or(OsseError::DegenerateCovariance)?;
    Ok(chol.solve(&cxy.transpose()).transpose())
}

/// Perturbation matrix (N x m) with member `i` drawn from its own stream so
/// that results do not depend on member order.
pub fn perturbations(batch: &AnalysisBatch, member_seeds: &[u64]) -> DMatrix<f64> {
    let (n, m) = (batch.members(), batch.obs_count());
    let mut eps = DMatrix::zeros(n, m);
    for i in 0..n {
        let mut r = rng::stream(rng::derive_seed(member_seeds[i], rng::label::ANALYSIS));
        for j in 0..m {
            let z: f64 = r.sample(StandardNormal);
            eps[(i, j)] = batch.r[j].sqrt() * z;
        }
    }
    eps
}

/// Updated N x d control matrix. Bounds are not applied here.
pub fn analysis(batch: &AnalysisBatch, member_seeds: &[u64]) -> Result<DMatrix<f64>> {
    if member_seeds.len() != batch.members() {
        return Err(OsseError::invalid("one seed per member is required"));
    }
    analysis_with(batch, &perturbations(batch, member_seeds))
}

/// Analysis with explicit observation perturbations (N x m).
pub fn analysis_with(batch: &AnalysisBatch, eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if batch.obs_count() == 0 {
        return Ok(batch.x.clone());
    }
    let (cxy, s) = covariances(batch);
    let chol = s.cholesky().ok_or(OsseError::DegenerateCovariance)?;
    // Innovations, one column per member.
    let mut d = DMatrix::zeros(batch.obs_count(), batch.members());
    for i in 0..batch.members() {
        for j in 0..batch.obs_count() {
            d[(j, i)] = batch.y[j] + eps[(i, j)] - batch.y_eq[(i, j)];
        }
    }
    let w = chol.solve(&d);
    Ok(&batch.x + (cxy * w).transpose())
}

/// Multiplicative inflation of member anomalies about the mean.
pub fn inflate(x: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 1.0) {
        return Err(OsseError::invalid("inflation factor must be >= 1"));
    }
    if lambda == 1.0 {
        return Ok(x.clone());
    }
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        for v in col.iter_mut() {
            *v = mean + lambda * (*v - mean);
        }
    }
    Ok(out)
}

/// Which sources enter the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Toggles {
    pub in_situ: bool,
    pub s1: bool,
    pub swot: bool,
}

impl Toggles {
    pub fn any(&self) -> bool {
        self.in_situ || self.s1 || self.swot
    }
}

/// Observations of one window paired with their member equivalents.
#[derive(Debug, Clone, Default)]
pub struct WindowObs {
    /// Gauge observations with the rank of their station.
    pub gauges: Vec<(usize, GaugeObs, Vec<Option<f64>>)>,
    pub wsr: Vec<(WsrObs, Vec<f64>)>,
    pub swot: Vec<(SwotNodeObs, Vec<Option<f64>>)>,
}

/// Assemble the batch for the toggled sources. Rows are ordered gauges by
/// station then time, WSR by subdomain then time, SWOT by node then time.
/// WSR rows go through an anamorphosis fitted on the member ratios; rows
/// whose map is degenerate are dropped. Variances are floored at `r_floor`.
pub fn stack_sources(x: DMatrix<f64>, obs: &WindowObs, toggles: Toggles, r_floor: f64) -> Result<AnalysisBatch> {
    let mut rows = Vec::new();
    if toggles.in_situ {
        let mut g: Vec<_> = obs.gauges.iter().collect();
        g.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.t.total_cmp(&b.1.t)));
        for (_, o, eq) in g {
            rows.push(ObsRow {
                meta: ObsMeta { source: Source::Gauge, id: o.station.clone(), t: o.t },
                y: o.wse,
                r: (o.sigma * o.sigma).max(r_floor),
                equivalents: eq.clone(),
            });
        }
    }
    if toggles.s1 {
        let mut w: Vec<_> = obs.wsr.iter().collect();
        w.sort_by(|a, b| a.0.subdomain.cmp(&b.0.subdomain).then(a.0.t.total_cmp(&b.0.t)));
        for (o, eq) in w {
            let ana = Anamorphosis::fit(eq)?;
            if ana.is_degenerate() {
                continue;
            }
            rows.push(ObsRow {
                meta: ObsMeta { source: Source::Wsr, id: o.subdomain.to_string(), t: o.t },
                y: ana.transform(o.ratio),
                r: (o.sigma_g * o.sigma_g).max(r_floor),
                equivalents: eq.iter().map(|&v| Some(ana.transform(v))).collect(),
            });
        }
    }
    if toggles.swot {
        let mut s: Vec<_> = obs.swot.iter().collect();
        s.sort_by(|a, b| a.0.node_id.cmp(&b.0.node_id).then(a.0.t.total_cmp(&b.0.t)));
        for (o, eq) in s {
            rows.push(ObsRow {
                meta: ObsMeta { source: Source::Swot, id: o.node_id.to_string(), t: o.t },
                y: o.wse,
                r: (o.sigma * o.sigma).max(r_floor),
                equivalents: eq.clone(),
            });
        }
    }
    AnalysisBatch::new(x, rows)
}

fn col_mean_std(a: &DMatrix<f64>, j: usize) -> (f64, f64) {
    let n = a.nrows() as f64;
    let col = a.column(j);
    let mean = col.sum() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-cycle diagnostics: one line per observation (value and ensemble
/// equivalent spread), then one line per control element before and after.
pub fn analysis_csv(batch: &AnalysisBatch, after: &DMatrix<f64>, labels: &[String], t: f64) -> String {
    let mut s = String::from("kind,name,t,obs,before_mean,before_std,after_mean,after_std\n");
    for (j, m) in batch.meta.iter().enumerate() {
        let (mean, std) = col_mean_std(&batch.y_eq, j);
        let _ = writeln!(s, "obs,{}:{},{},{},{mean},{std},,", m.source.as_str(), m.id, m.t, batch.y[j]);
    }
    for (j, name) in labels.iter().enumerate() {
        let (bm, bs) = col_mean_std(&batch.x, j);
        let (am, as_) = col_mean_std(after, j);
        let _ = writeln!(s, "control,{name},{t},,{bm},{bs},{am},{as_}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn row(source: Source, y: f64, r: f64, eq: Vec<Option<f64>>) -> ObsRow {
        ObsRow { meta: ObsMeta { source, id: "a".into(), t: 0.0 }, y, r, equivalents: eq }
    }

    fn scalar_batch() -> AnalysisBatch {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        AnalysisBatch::new(x, vec![row(Source::Gauge, 4.0, 2.0, vec![Some(1.0), Some(3.0)])]).unwrap()
    }

    #[test]
    fn scalar_gain_by_hand() {
        let b = scalar_batch();
        let k = gain(&b).unwrap();
        assert!((k[(0, 0)] - 0.5).abs() < 1e-15);
        let out = analysis_with(&b, &DMatrix::zeros(2, 1)).unwrap();
        assert!((out.mean() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn huge_error_leaves_ensemble_unchanged() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 4.0, 3.0, 7.0, 0.5, 6.0]);
        let eq = vec![Some(1.0), Some(2.0), Some(3.5), Some(0.0)];
        let b = AnalysisBatch::new(x.clone(), vec![row(Source::Gauge, 10.0, 1e12, eq)]).unwrap();
        // Unperturbed: the update is O(1/r). Perturbations of std sqrt(r)
        // would add an O(1/sqrt(r)) member spread on top.
        let out = analysis_with(&b, &DMatrix::zeros(4, 1)).unwrap();
        for (a, o) in x.iter().zip(out.iter()) {
            assert!((a - o).abs() <= 1e-6 * a.abs());
        }
    }

    #[test]
    fn missing_rule() {
        let x = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let one_missing = vec![Some(1.0), None, Some(3.0), Some(4.0), Some(6.0)];
        let two_missing = vec![Some(1.0), None, None, Some(4.0), Some(5.0)];
        let b = AnalysisBatch::new(
            x.clone(),
            vec![row(Source::Swot, 0.0, 1.0, one_missing), row(Source::Swot, 0.0, 1.0, two_missing)],
        )
        .unwrap();
        assert_eq!(b.obs_count(), 1);
        assert_eq!(b.y_eq[(1, 0)], 3.5);
        let empty = AnalysisBatch::new(x.clone(), vec![row(Source::Swot, 0.0, 1.0, vec![None; 5])]).unwrap();
        assert_eq!(empty.obs_count(), 0);
        assert_eq!(analysis(&empty, &[0; 5]).unwrap(), x);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        // Constant equivalents give zero Cyy; a negative variance, which
        // the constructor refuses, stands in for a broken R.
        let mut b = AnalysisBatch::new(x, vec![row(Source::Gauge, 0.0, 1.0, vec![Some(2.0); 3])]).unwrap();
        b.r[0] = -1.0;
        assert!(matches!(gain(&b), Err(OsseError::DegenerateCovariance)));
    }

    #[test]
    fn inflation_scales_covariance() {
        let mut r = rng::stream(3);
        let x = DMatrix::from_fn(100, 3, |_, _| r.sample::<f64, _>(StandardNormal));
        assert_eq!(inflate(&x, 1.0).unwrap(), x);
        let cov = |a: &DMatrix<f64>| {
            let an = anomalies(a);
            an.transpose() * &an / 99.0
        };
        let c0 = cov(&x);
        let c1 = cov(&inflate(&x, 1.5).unwrap());
        for (a, b) in c0.iter().zip(c1.iter()) {
            assert!((b - 2.25 * a).abs() < 1e-9);
        }
        let x2 = inflate(&x, 2.0).unwrap();
        for j in 0..3 {
            assert!((x2.column(j).mean() - x.column(j).mean()).abs() < 1e-12);
            let n0 = anomalies(&x).column(j).norm();
            let n2 = anomalies(&x2).column(j).norm();
            assert!((n2 - 2.0 * n0).abs() < 1e-12 * n0);
        }
        assert!(inflate(&x, 0.9).is_err());
    }

    #[test]
    fn order_invariance() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 4.0, 3.0, 7.0, 0.5, 6.0]);
        let eq = [1.0, 2.0, 3.5, 0.0];
        let seeds = [11, 12, 13, 14];
        let b = AnalysisBatch::new(x.clone(), vec![row(Source::Gauge, 2.0, 0.3, eq.iter().map(|&v| Some(v)).collect())]).unwrap();
        let out = analysis(&b, &seeds).unwrap();
        let perm = [2, 0, 3, 1];
        let xp = DMatrix::from_fn(4, 2, |i, j| x[(perm[i], j)]);
        let bp = AnalysisBatch::new(xp, vec![row(Source::Gauge, 2.0, 0.3, perm.iter().map(|&p| Some(eq[p])).collect())]).unwrap();
        let outp = analysis(&bp, &perm.map(|p| seeds[p])).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((outp[(i, j)] - out[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stacking_follows_toggles_and_order() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let g = |st: &str, t: f64| GaugeObs { station: st.into(), t, wse: 1.0, sigma: 0.1 };
        let eq = vec![Some(1.0), Some(2.0), Some(4.0)];
        let mut w = WindowObs::default();
        for (rank, st) in ["up", "mid", "down"].iter().enumerate() {
            for t in [7200.0, 3600.0] {
                w.gauges.push((rank, g(st, t), eq.clone()));
            }
        }
        w.wsr.push((WsrObs { subdomain: 1, t: 0.0, ratio: 0.2, sigma_g: 0.2 }, vec![0.0; 3]));
        w.wsr.push((WsrObs { subdomain: 2, t: 0.0, ratio: 0.2, sigma_g: 0.2 }, vec![0.1, 0.3, 0.2]));
        let only_gauges = Toggles { in_situ: true, ..Default::default() };
        let b = stack_sources(x.clone(), &w, only_gauges, 0.0).unwrap();
        assert_eq!(b.obs_count(), 6);
        assert!(b.meta.iter().all(|m| m.source == Source::Gauge));
        let order: Vec<(String, f64)> = b.meta.iter().map(|m| (m.id.clone(), m.t)).collect();
        assert_eq!(order[0], ("up".to_string(), 3600.0));
        assert_eq!(order[5], ("down".to_string(), 7200.0));

        let igda = Toggles { in_situ: true, s1: true, swot: false };
        let b = stack_sources(x, &w, igda, 0.0).unwrap();
        assert_eq!(b.obs_count(), 7);
        let wsr_rows: Vec<&ObsMeta> = b.meta.iter().filter(|m| m.source == Source::Wsr).collect();
        assert_eq!(wsr_rows.len(), 1);
        assert_eq!(wsr_rows[0].id, "2");
        assert!(b.meta.iter().all(|m| m.source != Source::Swot));
    }

    /// Explicit-inverse reference for the gain.
    fn brute_gain(b: &AnalysisBatch) -> DMatrix<f64> {
        let n = b.members() as f64;
        let xm = DMatrix::from_fn(b.x.nrows(), b.x.ncols(), |i, j| b.x[(i, j)] - b.x.column(j).mean());
        let ym = DMatrix::from_fn(b.y_eq.nrows(), b.y_eq.ncols(), |i, j| b.y_eq[(i, j)] - b.y_eq.column(j).mean());
        let cxy = xm.transpose() * &ym / (n - 1.0);
        let cyy = ym.transpose() * &ym / (n - 1.0) + DMatrix::from_diagonal(&b.r);
        cxy * cyy.try_inverse().unwrap()
    }

    proptest! {
        #[test]
        fn gain_matches_explicit_inverse(
            n in 2usize..=5,
            d in 1usize..=3,
            m in 1usize..=3,
            vals in prop::collection::vec(-3.0f64..3.0, 5 * 3 + 5 * 3),
            r in prop::collection::vec(0.1f64..2.0, 3),
        ) {
            let x = DMatrix::from_fn(n, d, |i, j| vals[i * 3 + j]);
            let rows = (0..m)
                .map(|j| row(Source::Gauge, 0.0, r[j], (0..n).map(|i| Some(vals[15 + i * 3 + j])).collect()))
                .collect();
            let b = AnalysisBatch::new(x, rows).unwrap();
            let k = gain(&b).unwrap();
            let kb = brute_gain(&b);
            for (a, e) in k.iter().zip(kb.iter()) {
                prop_assert!((a - e).abs() <= 1e-10 * e.abs().max(1.0), "{} vs {}", a, e);
            }
        }

        #[test]
        fn zero_innovation_keeps_mean(
            vals in prop::collection::vec(-3.0f64..3.0, 6 * 4),
        ) {
            let x = DMatrix::from_fn(6, 2, |i, j| vals[i * 2 + j]);
            let eq: Vec<f64> = (0..6).map(|i| vals[12 + i] + 0.5 * vals[i * 2]).collect();
            let mean = eq.iter().sum::<f64>() / 6.0;
            let b = AnalysisBatch::new(x.clone(), vec![row(Source::Gauge, mean, 0.5, eq.into_iter().map(Some).collect())]).unwrap();
            let out = analysis_with(&b, &DMatrix::zeros(6, 1)).unwrap();
            for j in 0..2 {
                prop_assert!((out.column(j).mean() - x.column(j).mean()).abs() < 1e-10);
            }
        }
    }
}
