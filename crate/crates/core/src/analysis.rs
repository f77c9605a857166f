//! Lightcone extraction from OTOC heatmaps, linear front fitting with
//! uncertainties, and comparison reports between series.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::otoc::OtocSeries;

/// Site-by-time OTOC matrix with a mask of sites excluded from fits.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// 1-based site labels.
    pub site_labels: Vec<usize>,
    pub times_us: Vec<f64>,
    /// Normalized OTOC values, [site][time].
    pub values: Array2<f64>,
    pub stderr: Option<Array2<f64>>,
    /// Labels excluded from arrival detection and fits.
    pub masked: Vec<usize>,
    /// Label of the butterfly site; distances are measured from here.
    pub butterfly_site: usize,
    /// Hash of the run that produced the values.
    pub config_hash: String,
}

impl Heatmap {
    /// Build from a series; when `masked` is None the butterfly site is
    /// masked by default.
    pub fn from_series(series: &OtocSeries, masked: Option<Vec<usize>>) -> Heatmap {
        Heatmap {
            site_labels: series.site_labels.clone(),
            times_us: series.times_us.clone(),
            values: series.otoc.clone(),
            stderr: Some(series.stderr.clone()),
            masked: masked.unwrap_or_else(|| vec![series.meta.butterfly_site]),
            butterfly_site: series.meta.butterfly_site,
            config_hash: series.meta.config_hash.clone(),
        }
    }

    /// Plot-ready long format: site,t_us,value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(
            file,
            "# heatmap.v1 butterfly_site={} masked={} config={}",
            self.butterfly_site,
            self.masked
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join("|"),
            self.config_hash
        )
        .map_err(|e| io_err(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["site", "t_us", "value"])?;
        for (i, label) in self.site_labels.iter().enumerate() {
            for (k, t) in self.times_us.iter().enumerate() {
                w.write_record(&[
                    label.to_string(),
                    t.to_string(),
                    self.values[[i, k]].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }
}

/// Arrival of the scrambling front at one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteArrival {
    /// 1-based site label.
    pub site: usize,
    /// Distance from the butterfly site, in lattice sites.
    pub distance: f64,
    /// First time the OTOC drops below the per-site threshold level; None if
    /// the row never crosses.
    pub arrival_us: Option<f64>,
    /// Propagated uncertainty of the crossing time, when stderr is known.
    pub sigma_us: Option<f64>,
    pub masked: bool,
}

/// For each unmasked site, the first time the OTOC drops below
/// 1 - threshold * (1 - row minimum), linearly interpolated between grid
/// points.
pub fn arrival_times(hm: &Heatmap, threshold: f64) -> Result<Vec<SiteArrival>> {
    if hm.times_us.is_empty() || hm.site_labels.is_empty() {
        return Err(Error::EmptyHeatmap);
    }
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::BadThreshold(threshold));
    }
    let mut out = Vec::with_capacity(hm.site_labels.len());
    for (i, label) in hm.site_labels.iter().enumerate() {
        let masked = hm.masked.contains(label);
        let distance = (*label as f64 - hm.butterfly_site as f64).abs();
        if masked {
            out.push(SiteArrival {
                site: *label,
                distance,
                arrival_us: None,
                sigma_us: None,
                masked,
            });
            continue;
        }
        let row: Vec<f64> = (0..hm.times_us.len()).map(|k| hm.values[[i, k]]).collect();
        let row_min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let level = 1.0 - threshold * (1.0 - row_min);
        let mut arrival = None;
        let mut sigma = None;
        for k in 0..row.len() {
            if row[k] < level {
                if k == 0 {
                    arrival = Some(hm.times_us[0]);
                    break;
                }
                let (t0, t1) = (hm.times_us[k - 1], hm.times_us[k]);
                let (v0, v1) = (row[k - 1], row[k]);
                let frac = (v0 - level) / (v0 - v1);
                arrival = Some(t0 + frac * (t1 - t0));
                if let Some(se) = &hm.stderr {
                    let slope = (v1 - v0) / (t1 - t0);
                    if slope.abs() > 0.0 {
                        let se_here = se[[i, k - 1]] * (1.0 - frac) + se[[i, k]] * frac;
                        sigma = Some((se_here / slope).abs());
                    }
                }
                break;
            }
        }
        out.push(SiteArrival {
            site: *label,
            distance,
            arrival_us: arrival,
            sigma_us: sigma,
            masked,
        });
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOrientation {
    /// Fit arrival time versus site distance (slope in us per site).
    TimeVsSite,
    /// Fit site distance versus arrival time (slope in sites per us).
    SiteVsTime,
}

/// Functional form of the front. Only the linear model is implemented; the
/// enum leaves room for logarithmic/exponential fronts.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontModel {
    #[default]
    Linear,
}

/// Weighted linear front fit with both slope unit conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightconeFit {
    pub arrivals: Vec<SiteArrival>,
    pub model: FrontModel,
    pub orientation: FitOrientation,
    pub threshold: f64,
    pub cutoff_time_us: f64,
    /// Hash of the run the fit came from, when known.
    #[serde(default)]
    pub config_hash: String,
    pub n_points: usize,
    pub slope: f64,
    pub slope_err: f64,
    pub intercept: f64,
    pub intercept_err: f64,
    pub slope_us_per_site: f64,
    pub slope_us_per_site_err: f64,
    pub slope_sites_per_us: f64,
    pub slope_sites_per_us_err: f64,
    pub residuals: Vec<f64>,
}

/// Weighted least squares of arrival time against distance from the
/// butterfly site (or the transposed orientation). Arrivals after the cutoff
/// time and masked or non-crossing sites are excluded.
pub fn fit_lightcone(
    arrivals: &[SiteArrival],
    orientation: FitOrientation,
    cutoff_time_us: f64,
    threshold: f64,
) -> Result<LightconeFit> {
    let usable: Vec<(f64, f64, Option<f64>)> = arrivals
        .iter()
        .filter(|a| !a.masked)
        .filter_map(|a| a.arrival_us.map(|t| (a.distance, t, a.sigma_us)))
        .filter(|(_, t, _)| *t <= cutoff_time_us)
        .collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientArrivals(usable.len()));
    }
    let (xs, ys, sigmas): (Vec<f64>, Vec<f64>, Vec<Option<f64>>) = match orientation {
        FitOrientation::TimeVsSite => itertools_unzip(usable.iter().map(|(d, t, s)| (*d, *t, *s))),
        FitOrientation::SiteVsTime => itertools_unzip(usable.iter().map(|(d, t, s)| (*t, *d, *s))),
    };
    let spread =
        xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
    if spread == 0.0 {
        return Err(Error::DegenerateFit(
            "all fit points share one abscissa".into(),
        ));
    }
    let have_sigmas = sigmas.iter().all(|s| matches!(s, Some(v) if *v > 0.0));
    let weights: Vec<f64> = if have_sigmas {
        sigmas.iter().map(|s| 1.0 / s.unwrap().powi(2)).collect()
    } else {
        vec![1.0; xs.len()]
    };
    let sw: f64 = weights.iter().sum();
    let swx: f64 = weights.iter().zip(&xs).map(|(w, x)| w * x).sum();
    let swy: f64 = weights.iter().zip(&ys).map(|(w, y)| w * y).sum();
    let swxx: f64 = weights.iter().zip(&xs).map(|(w, x)| w * x * x).sum();
    let swxy: f64 = weights
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * x * y)
        .sum();
    let det = sw * swxx - swx * swx;
    if det.abs() < 1e-300 {
        return Err(Error::DegenerateFit("singular normal equations".into()));
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (slope * x + intercept))
        .collect();
    // Covariance of the WLS estimate; with unit weights scale by the
    // residual variance.
    let scale = if have_sigmas {
        1.0
    } else {
        let ssr: f64 = residuals.iter().zip(&weights).map(|(r, w)| w * r * r).sum();
        ssr / (xs.len() as f64 - 2.0)
    };
    let slope_var = (scale * sw / det).max(0.0);
    let intercept_var = (scale * swxx / det).max(0.0);
    let slope_err = slope_var.sqrt().max(1e-12);
    let intercept_err = intercept_var.sqrt().max(1e-12);
    let (us_site, us_site_err, site_us, site_us_err) = match orientation {
        FitOrientation::TimeVsSite => {
            let inv = 1.0 / slope;
            (slope, slope_err, inv, (slope_err / (slope * slope)).abs())
        }
        FitOrientation::SiteVsTime => {
            let inv = 1.0 / slope;
            (inv, (slope_err / (slope * slope)).abs(), slope, slope_err)
        }
    };
    Ok(LightconeFit {
        arrivals: arrivals.to_vec(),
        model: FrontModel::Linear,
        orientation,
        threshold,
        cutoff_time_us,
        config_hash: String::new(),
        n_points: xs.len(),
        slope,
        slope_err,
        intercept,
        intercept_err,
        slope_us_per_site: us_site,
        slope_us_per_site_err: us_site_err,
        slope_sites_per_us: site_us,
        slope_sites_per_us_err: site_us_err,
        residuals,
    })
}

fn itertools_unzip(
    it: impl Iterator<Item = (f64, f64, Option<f64>)>,
) -> (Vec<f64>, Vec<f64>, Vec<Option<f64>>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ss = Vec::new();
    for (x, y, s) in it {
        xs.push(x);
        ys.push(y);
        ss.push(s);
    }
    (xs, ys, ss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDeviation {
    pub site: usize,
    pub rms: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub us_per_site: f64,
    pub us_per_site_err: f64,
    pub sites_per_us: f64,
    pub sites_per_us_err: f64,
    pub n_points: usize,
}

/// Machine-readable comparison between two series on a common grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    #[serde(default)]
    pub config_hash_a: String,
    #[serde(default)]
    pub config_hash_b: String,
    pub times_us: Vec<f64>,
    pub per_site: Vec<SiteDeviation>,
    pub overall_rms: f64,
    pub overall_max: f64,
    pub resampled: bool,
    pub slope_a: Option<SlopeSummary>,
    pub slope_b: Option<SlopeSummary>,
    /// |slope_a - slope_b| in us/site over the joint 1-sigma uncertainty.
    pub slope_diff_over_joint_sigma: Option<f64>,
    pub summary: String,
}

fn resample_onto(series: &OtocSeries, times: &[f64]) -> Result<Array2<f64>> {
    let src = &series.times_us;
    let mut out = Array2::zeros((series.n_sites(), times.len()));
    for (k, t) in times.iter().enumerate() {
        let pos = src.partition_point(|x| x <= t);
        let (k0, k1, frac) = if pos == 0 {
            if (src[0] - t).abs() > 1e-9 {
                return Err(Error::IncompatibleSeries(format!(
                    "time {t} outside the source grid"
                )));
            }
            (0, 0, 0.0)
        } else if pos >= src.len() {
            if (t - src[src.len() - 1]).abs() > 1e-9 {
                return Err(Error::IncompatibleSeries(format!(
                    "time {t} outside the source grid"
                )));
            }
            (src.len() - 1, src.len() - 1, 0.0)
        } else {
            let (t0, t1) = (src[pos - 1], src[pos]);
            (pos - 1, pos, (t - t0) / (t1 - t0))
        };
        for i in 0..series.n_sites() {
            out[[i, k]] = series.otoc[[i, k0]] * (1.0 - frac) + series.otoc[[i, k1]] * frac;
        }
    }
    Ok(out)
}

fn slope_summary(
    series: &OtocSeries,
    mask: &[usize],
    threshold: f64,
    cutoff: f64,
) -> Option<SlopeSummary> {
    let hm = Heatmap::from_series(series, Some(mask.to_vec()));
    let arrivals = arrival_times(&hm, threshold).ok()?;
    let fit = fit_lightcone(&arrivals, FitOrientation::TimeVsSite, cutoff, threshold).ok()?;
    Some(SlopeSummary {
        us_per_site: fit.slope_us_per_site,
        us_per_site_err: fit.slope_us_per_site_err,
        sites_per_us: fit.slope_sites_per_us,
        sites_per_us_err: fit.slope_sites_per_us_err,
        n_points: fit.n_points,
    })
}

/// Per-site RMS and max deviation between two series, resampling the finer
/// time grid onto the coarser when they differ, plus a slope comparison.
pub fn compare_series(
    a: &OtocSeries,
    b: &OtocSeries,
    mask: &[usize],
    threshold: f64,
    cutoff_time_us: f64,
) -> Result<CompareReport> {
    if a.site_labels != b.site_labels {
        return Err(Error::IncompatibleSeries(format!(
            "site sets differ: {:?} vs {:?}",
            a.site_labels, b.site_labels
        )));
    }
    let same_grid = a.times_us.len() == b.times_us.len()
        && a.times_us
            .iter()
            .zip(&b.times_us)
            .all(|(x, y)| (x - y).abs() < 1e-9);
    let (times, va, vb, resampled) = if same_grid {
        (a.times_us.clone(), a.otoc.clone(), b.otoc.clone(), false)
    } else {
        // Resample the finer series onto the coarser grid, restricted to the
        // overlapping time range.
        let (coarse, fine) = if a.times_us.len() <= b.times_us.len() {
            (a, b)
        } else {
            (b, a)
        };
        let fine_min = fine.times_us.first().cloned().unwrap_or(0.0);
        let fine_max = fine.times_us.last().cloned().unwrap_or(0.0);
        let times: Vec<f64> = coarse
            .times_us
            .iter()
            .cloned()
            .filter(|t| *t >= fine_min - 1e-9 && *t <= fine_max + 1e-9)
            .collect();
        if times.len() < 2 {
            return Err(Error::IncompatibleSeries(
                "grids overlap in fewer than 2 points".into(),
            ));
        }
        let ra = resample_onto(a, &times)?;
        let rb = resample_onto(b, &times)?;
        (times, ra, rb, true)
    };
    let mut per_site = Vec::with_capacity(a.site_labels.len());
    let mut overall_sq = 0.0;
    let mut overall_max: f64 = 0.0;
    let mut count = 0usize;
    for (i, label) in a.site_labels.iter().enumerate() {
        if mask.contains(label) {
            continue;
        }
        let mut sq = 0.0;
        let mut mx: f64 = 0.0;
        for k in 0..times.len() {
            let d = (va[[i, k]] - vb[[i, k]]).abs();
            sq += d * d;
            mx = mx.max(d);
        }
        overall_sq += sq;
        overall_max = overall_max.max(mx);
        count += times.len();
        per_site.push(SiteDeviation {
            site: *label,
            rms: (sq / times.len() as f64).sqrt(),
            max: mx,
        });
    }
    if count == 0 {
        return Err(Error::IncompatibleSeries(
            "no unmasked sites to compare".into(),
        ));
    }
    let overall_rms = (overall_sq / count as f64).sqrt();
    let slope_a = slope_summary(a, mask, threshold, cutoff_time_us);
    let slope_b = slope_summary(b, mask, threshold, cutoff_time_us);
    let slope_diff_over_joint_sigma = match (&slope_a, &slope_b) {
        (Some(sa), Some(sb)) => {
            let joint = (sa.us_per_site_err.powi(2) + sb.us_per_site_err.powi(2)).sqrt();
            Some((sa.us_per_site - sb.us_per_site).abs() / joint.max(1e-12))
        }
        _ => None,
    };
    let summary = format!(
        "compared {} sites on {} times{}: rms = {:.4}, max = {:.4}{}",
        per_site.len(),
        times.len(),
        if resampled { " (resampled)" } else { "" },
        overall_rms,
        overall_max,
        match (&slope_a, &slope_b) {
            (Some(sa), Some(sb)) => format!(
                "; slopes {:.4} vs {:.4} us/site ({:.2} joint sigma apart)",
                sa.us_per_site,
                sb.us_per_site,
                slope_diff_over_joint_sigma.unwrap_or(f64::NAN)
            ),
            _ => String::new(),
        }
    );
    Ok(CompareReport {
        config_hash_a: a.meta.config_hash.clone(),
        config_hash_b: b.meta.config_hash.clone(),
        times_us: times,
        per_site,
        overall_rms,
        overall_max,
        resampled,
        slope_a,
        slope_b,
        slope_diff_over_joint_sigma,
        summary,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::otoc::{SeriesMeta, SERIES_SCHEMA};
    use approx::assert_abs_diff_eq;

    fn meta(butterfly: usize) -> SeriesMeta {
        SeriesMeta {
            schema: SERIES_SCHEMA.into(),
            kind: "estimator".into(),
            config_hash: "deadbeef".into(),
            master_seed: 1,
            n_instances: 2,
            n_shots: 0,
            butterfly_site: butterfly,
        }
    }

    fn series_from(values: Array2<f64>, times: Vec<f64>, butterfly: usize) -> OtocSeries {
        let n = values.nrows();
        OtocSeries {
            site_labels: (1..=n).collect(),
            times_us: times,
            raw: values.clone(),
            norm: values.mapv(|_| 1.0),
            otoc: values.clone(),
            stderr: values.mapv(|_| 0.01),
            meta: meta(butterfly),
        }
    }

    fn synthetic_heatmap() -> Heatmap {
        // Front moving at 0.4 us/site from site 4 with intercept 0.1.
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.05).collect();
        let n = 4;
        let mut values = Array2::from_elem((n, times.len()), 1.0);
        for site in 0..n {
            let d = (site as f64 + 1.0 - 4.0).abs();
            let arrival = 0.4 * d + 0.1;
            for (k, t) in times.iter().enumerate() {
                // Linear drop from 1.0 to 0.0 across the arrival; the 50%
                // threshold crossing sits exactly at `arrival`.
                values[[site, k]] = 1.0 - ((t - arrival) / 0.2 + 0.5).clamp(0.0, 1.0);
            }
        }
        Heatmap {
            site_labels: (1..=n).collect(),
            times_us: times,
            values,
            stderr: None,
            masked: vec![4],
            butterfly_site: 4,
            config_hash: String::new(),
        }
    }

    #[test]
    fn constant_row_never_arrives() {
        let times = vec![0.0, 0.5, 1.0];
        let values = Array2::from_elem((2, 3), 1.0);
        let hm = Heatmap {
            site_labels: vec![1, 2],
            times_us: times,
            values,
            stderr: None,
            masked: vec![2],
            butterfly_site: 2,
            config_hash: String::new(),
        };
        let arrivals = arrival_times(&hm, 0.5).unwrap();
        assert_eq!(arrivals[0].arrival_us, None);
        assert!(arrivals[1].masked);
    }

    #[test]
    fn step_row_interpolates_to_midpoint() {
        let times = vec![0.0, 1.0, 1.2];
        let mut values = Array2::from_elem((1, 3), 1.0);
        values[[0, 2]] = 0.0;
        let hm = Heatmap {
            site_labels: vec![1],
            times_us: times,
            values,
            stderr: None,
            masked: vec![],
            butterfly_site: 3,
            config_hash: String::new(),
        };
        let arrivals = arrival_times(&hm, 0.5).unwrap();
        assert_abs_diff_eq!(arrivals[0].arrival_us.unwrap(), 1.1, epsilon = 1e-12);
    }

    #[test]
    fn arrivals_stretch_with_the_grid() {
        let hm = synthetic_heatmap();
        let mut stretched = hm.clone();
        stretched.times_us = hm.times_us.iter().map(|t| 2.0 * t).collect();
        let a = arrival_times(&hm, 0.5).unwrap();
        let b = arrival_times(&stretched, 0.5).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            match (x.arrival_us, y.arrival_us) {
                (Some(ta), Some(tb)) => assert_abs_diff_eq!(2.0 * ta, tb, epsilon = 1e-9),
                (None, None) => {}
                _ => panic!("arrival presence changed under stretching"),
            }
        }
    }

    #[test]
    fn exact_line_is_recovered() {
        let hm = synthetic_heatmap();
        let arrivals = arrival_times(&hm, 0.5).unwrap();
        let fit = fit_lightcone(&arrivals, FitOrientation::TimeVsSite, 4.0, 0.5).unwrap();
        assert_abs_diff_eq!(fit.slope_us_per_site, 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.intercept, 0.1, epsilon = 1e-9);
        assert!(fit.slope_err <= 1e-6);
        assert!(fit.slope_err > 0.0);
        assert_abs_diff_eq!(fit.slope_sites_per_us, 2.5, epsilon = 1e-6);
        // Transposed orientation inverts the slope.
        let fit2 = fit_lightcone(&arrivals, FitOrientation::SiteVsTime, 4.0, 0.5).unwrap();
        assert_abs_diff_eq!(fit2.slope_us_per_site, 0.4, epsilon = 1e-9);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let arrivals = vec![
            SiteArrival {
                site: 1,
                distance: 3.0,
                arrival_us: Some(1.0),
                sigma_us: None,
                masked: false,
            },
            SiteArrival {
                site: 2,
                distance: 2.0,
                arrival_us: Some(0.7),
                sigma_us: None,
                masked: false,
            },
        ];
        assert!(matches!(
            fit_lightcone(&arrivals, FitOrientation::TimeVsSite, 4.0, 0.5),
            Err(Error::InsufficientArrivals(2))
        ));
    }

    #[test]
    fn fit_is_equivariant_under_time_scaling() {
        let hm = synthetic_heatmap();
        let arrivals = arrival_times(&hm, 0.5).unwrap();
        let fit = fit_lightcone(&arrivals, FitOrientation::TimeVsSite, 4.0, 0.5).unwrap();
        let scaled: Vec<SiteArrival> = arrivals
            .iter()
            .map(|a| SiteArrival {
                arrival_us: a.arrival_us.map(|t| 3.0 * t),
                ..a.clone()
            })
            .collect();
        let fit3 = fit_lightcone(&scaled, FitOrientation::TimeVsSite, 12.0, 0.5).unwrap();
        assert_abs_diff_eq!(fit3.slope, 3.0 * fit.slope, epsilon = 1e-9);
    }

    #[test]
    fn masked_rows_never_influence_the_fit() {
        let hm = synthetic_heatmap();
        let mut perturbed = hm.clone();
        let masked_idx = hm
            .site_labels
            .iter()
            .position(|l| hm.masked.contains(l))
            .unwrap();
        for k in 0..perturbed.times_us.len() {
            perturbed.values[[masked_idx, k]] = -17.0 + k as f64;
        }
        let fit_a = fit_lightcone(
            &arrival_times(&hm, 0.5).unwrap(),
            FitOrientation::TimeVsSite,
            4.0,
            0.5,
        )
        .unwrap();
        let fit_b = fit_lightcone(
            &arrival_times(&perturbed, 0.5).unwrap(),
            FitOrientation::TimeVsSite,
            4.0,
            0.5,
        )
        .unwrap();
        assert_eq!(fit_a.slope.to_bits(), fit_b.slope.to_bits());
        assert_eq!(fit_a.intercept.to_bits(), fit_b.intercept.to_bits());
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let hm = synthetic_heatmap();
        let series = series_from(hm.values.clone(), hm.times_us.clone(), 4);
        let report = compare_series(&series, &series, &[4], 0.5, 4.0).unwrap();
        assert_eq!(report.overall_rms, 0.0);
        assert_eq!(report.overall_max, 0.0);
        assert_eq!(report.slope_diff_over_joint_sigma, Some(0.0));
    }

    #[test]
    fn finer_grid_resamples_onto_coarser() {
        let times_fine: Vec<f64> = (0..41).map(|k| k as f64 * 0.05).collect();
        let times_coarse: Vec<f64> = (0..21).map(|k| k as f64 * 0.1).collect();
        let ramp = |times: &[f64]| {
            let mut v = Array2::zeros((2, times.len()));
            for (k, t) in times.iter().enumerate() {
                v[[0, k]] = 1.0 - 0.2 * t;
                v[[1, k]] = 1.0 - 0.1 * t;
            }
            v
        };
        let fine = series_from(ramp(&times_fine), times_fine, 2);
        let coarse = series_from(ramp(&times_coarse), times_coarse, 2);
        let report = compare_series(&fine, &coarse, &[], 0.5, 4.0).unwrap();
        assert!(report.resampled);
        assert!(report.overall_max < 1e-12, "max = {}", report.overall_max);
    }

    #[test]
    fn disjoint_grids_are_incompatible() {
        let a = series_from(Array2::zeros((1, 3)), vec![0.0, 0.1, 0.2], 1);
        let b = series_from(Array2::zeros((1, 3)), vec![5.0, 5.1, 5.2], 1);
        assert!(matches!(
            compare_series(&a, &b, &[], 0.5, 4.0),
            Err(Error::IncompatibleSeries(_))
        ));
        let c = series_from(Array2::zeros((2, 3)), vec![0.0, 0.1, 0.2], 1);
        assert!(matches!(
            compare_series(&a, &c, &[], 0.5, 4.0),
            Err(Error::IncompatibleSeries(_))
        ));
    }

    #[test]
    fn heatmap_csv_is_written() {
        let hm = synthetic_heatmap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.csv");
        hm.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# heatmap.v1"));
        assert!(text.lines().count() > 4 * 40);
    }
}
