//! Plot-ready data: two-column whitespace-separated series that gnuplot reads
//! directly, plus a gnuplot script that renders them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use auv_mppi::lie_se3::UnitQuat;

use crate::experiment::{ExperimentKind, MetricsRow};
use crate::output::write_atomic;
use crate::{read_manifest, TimingRow, METRICS_FILE, TIMING_FILE};

pub const PLOT_DIR: &str = "plots";
pub const SCRIPT_FILE: &str = "plots.gp";

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("missing data: {}", .0.display())]
    MissingData(PathBuf),
    #[error("{}: {}", .0.display(), .1)]
    Malformed(PathBuf, String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// One curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub columns: [String; 2],
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn to_dat(&self) -> String {
        let mut s = format!("# {} {}\n", self.columns[0], self.columns[1]);
        for (a, b) in &self.points {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }
}

/// A group of curves drawn on one set of axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub name: String,
    pub series: Vec<Series>,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PlotError> {
    if !path.is_file() {
        return Err(PlotError::MissingData(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| PlotError::Malformed(path.into(), e.to_string()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| PlotError::Malformed(path.into(), e.to_string()))
}

/// Columns of a trajectory CSV by header name.
struct Trajectory {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Trajectory {
    fn read(path: &Path) -> Result<Self, PlotError> {
        if !path.is_file() {
            return Err(PlotError::MissingData(path.to_path_buf()));
        }
        let bad = |e: csv::Error| PlotError::Malformed(path.into(), e.to_string());
        let mut r = csv::Reader::from_path(path).map_err(bad)?;
        let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(bad)?;
            rows.push(rec.iter().map(|f| f.parse().unwrap_or(f64::NAN)).collect());
        }
        Ok(Self {
            path: path.into(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<Vec<f64>, PlotError> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PlotError::Malformed(self.path.clone(), format!("no column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    fn yaw(&self) -> Result<Vec<f64>, PlotError> {
        let q: Vec<Vec<f64>> = ["qw", "qx", "qy", "qz"]
            .iter()
            .map(|c| self.column(c))
            .collect::<Result<_, _>>()?;
        Ok((0..self.rows.len())
            .map(|i| {
                UnitQuat::new(q[0][i], q[1][i], q[2][i], q[3][i])
                    .map(|u| u.yaw())
                    .unwrap_or(f64::NAN)
            })
            .collect())
    }

    /// Goal minus state along one of x, y, z, yaw.
    fn error(&self, axis: &str, row: &MetricsRow) -> Result<Vec<(f64, f64)>, PlotError> {
        let t = self.column("time")?;
        let e: Vec<f64> = match axis {
            "x" => self.column("x")?.iter().map(|v| row.goal_x - v).collect(),
            "y" => self.column("y")?.iter().map(|v| row.goal_y - v).collect(),
            "z" => self.column("z")?.iter().map(|v| row.goal_z - v).collect(),
            _ => self
                .yaw()?
                .iter()
                .map(|v| {
                    let d = row.goal_yaw - v;
                    d.sin().atan2(d.cos())
                })
                .collect(),
        };
        Ok(t.into_iter().zip(e).collect())
    }
}

/// First run (lowest seed) of each configuration, in metrics order.
fn representatives(rows: &[MetricsRow]) -> Vec<&MetricsRow> {
    let mut best: Vec<&MetricsRow> = Vec::new();
    for r in rows.iter().filter(|r| !r.trajectory.is_empty()) {
        let same = |b: &&mut &MetricsRow| b.label == r.label && b.controller == r.controller && b.variant == r.variant;
        match best.iter_mut().find(same) {
            Some(b) if r.seed < b.seed => *b = r,
            Some(_) => {}
            None => best.push(r),
        }
    }
    best
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn error_figure(dir: &Path, reps: &[&MetricsRow], axis: &str, name: String, by: fn(&MetricsRow) -> &str) -> Result<Figure, PlotError> {
    let mut series = Vec::new();
    for r in reps {
        let traj = Trajectory::read(&dir.join(&r.trajectory))?;
        series.push(Series {
            name: by(r).to_string(),
            columns: ["time_s".into(), format!("{axis}_error")],
            points: traj.error(axis, r)?,
        });
    }
    Ok(Figure { name, series })
}

/// Median of `metric` against the swept parameter.
fn trend_figure(rows: &[MetricsRow], name: &str, metric: &str, f: fn(&MetricsRow) -> f64) -> Figure {
    let mut by_param: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        by_param
            .entry(r.param.to_bits())
            .or_insert((r.param, Vec::new()))
            .1
            .push(f(r));
    }
    let mut points: Vec<(f64, f64)> = by_param.values().map(|(p, v)| (*p, crate::median(v))).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Figure {
        name: name.into(),
        series: vec![Series {
            name: metric.into(),
            columns: ["param".into(), format!("median_{metric}")],
            points,
        }],
    }
}

/// Builds the figures for the experiment recorded in `dir`.
pub fn figures(dir: &Path) -> Result<Vec<Figure>, PlotError> {
    let manifest = read_manifest(dir)?;
    if manifest.experiment == ExperimentKind::Timing {
        let rows: Vec<TimingRow> = read_rows(&dir.join(TIMING_FILE))?;
        let points = |f: fn(&TimingRow) -> f64| rows.iter().map(|r| (r.num_samples as f64, f(r))).collect();
        return Ok(vec![Figure {
            name: "timing".into(),
            series: vec![
                Series {
                    name: "mean".into(),
                    columns: ["num_samples".into(), "mean_ms".into()],
                    points: points(|r| r.mean_ms),
                },
                Series {
                    name: "p95".into(),
                    columns: ["num_samples".into(), "p95_ms".into()],
                    points: points(|r| r.p95_ms),
                },
            ],
        }]);
    }

    let rows: Vec<MetricsRow> = read_rows(&dir.join(METRICS_FILE))?;
    if rows.is_empty() {
        return Err(PlotError::MissingData(dir.join(METRICS_FILE)));
    }
    let reps = representatives(&rows);
    let mut figs = Vec::new();
    match manifest.experiment {
        ExperimentKind::PidCompare => {
            for axis in ["x", "y", "z", "yaw"] {
                figs.push(error_figure(dir, &reps, axis, format!("{axis}_error"), |r| &r.controller)?);
            }
        }
        ExperimentKind::ObstacleCourse => {
            let mut series = Vec::new();
            for r in &reps {
                let traj = Trajectory::read(&dir.join(&r.trajectory))?;
                series.push(Series {
                    name: r.variant.clone(),
                    columns: ["x".into(), "y".into()],
                    points: traj.column("x")?.into_iter().zip(traj.column("y")?).collect(),
                });
            }
            figs.push(Figure {
                name: "path".into(),
                series,
            });
            figs.push(error_figure(dir, &reps, "z", "z_error".into(), |r| &r.variant)?);
        }
        kind => {
            figs.push(error_figure(dir, &reps, "x", "x_error".into(), |r| &r.label)?);
            if kind.is_sweep() {
                figs.push(trend_figure(&rows, "ss_x_trend", "ss_x", |r| r.ss_x));
                figs.push(trend_figure(&rows, "settling_trend", "settling_time", |r| {
                    r.settling_time.unwrap_or(f64::NAN)
                }));
            }
            if kind == ExperimentKind::FilterStudy {
                let mut series = Vec::new();
                for r in &reps {
                    let traj = Trajectory::read(&dir.join(&r.trajectory))?;
                    series.push(Series {
                        name: r.label.clone(),
                        columns: ["time_s".into(), "thrust_0".into()],
                        points: traj.column("time")?.into_iter().zip(traj.column("thrust_0")?).collect(),
                    });
                }
                figs.push(Figure {
                    name: "thrust_0".into(),
                    series,
                });
            }
        }
    }
    Ok(figs)
}

fn dat_name(fig: &Figure, s: &Series) -> String {
    format!("{}__{}.dat", fig.name, slug(&s.name))
}

fn script(figs: &[Figure]) -> String {
    let mut g = String::from("set terminal pngcairo size 900,600\nset grid\n");
    for f in figs {
        let (xl, yl) = f
            .series
            .first()
            .map(|s| (s.columns[0].as_str(), s.columns[1].as_str()))
            .unwrap_or(("", ""));
        let _ = writeln!(g, "\nset output '{}.png'\nset xlabel '{xl}'\nset ylabel '{yl}'", f.name);
        let curves: Vec<String> = f
            .series
            .iter()
            .map(|s| format!("'{}' using 1:2 with lines title '{}'", dat_name(f, s), s.name))
            .collect();
        let _ = writeln!(g, "plot {}", curves.join(", \\\n     "));
    }
    g
}

/// Writes every series of `dir`'s experiment under `dir/plots/` and returns
/// the written paths. The gnuplot script is written alongside; rendering is
/// left to the user.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>, PlotError> {
    let figs = figures(dir)?;
    let out = dir.join(PLOT_DIR);
    let mut written = Vec::new();
    for f in &figs {
        for s in &f.series {
            let p = out.join(dat_name(f, s));
            write_atomic(&p, s.to_dat().as_bytes())?;
            written.push(p);
        }
    }
    let p = out.join(SCRIPT_FILE);
    write_atomic(&p, script(&figs).as_bytes())?;
    written.push(p);
    Ok(written)
}
