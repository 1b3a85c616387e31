//! Post-training inspection: subclass assignment dumps and 2-D projections.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::{self, CenterBank};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{self, dot, Matrix};
use crate::sinkhorn::SolverSettings;

/// How points are mapped to subclasses in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Most similar center of the point's class; no batch coupling.
    #[default]
    Nearest,
    /// The training-time transport solve, one scene per batch.
    Transport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene_id: u32,
    pub point_index: usize,
    pub class: usize,
    /// Within-class cluster index.
    pub subclass: usize,
    /// Cosine similarity to the assigned center.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub clusters_per_class: usize,
    pub rows: Vec<ReportRow>,
    /// `occupancy[class][subclass]` point counts.
    pub occupancy: Vec<Vec<usize>>,
}

impl ClusterReport {
    /// Fraction of subclasses (over classes that have any points) whose share
    /// of their class falls below `threshold`.
    pub fn near_empty_fraction(&self, threshold: f64) -> f64 {
        let mut total = 0;
        let mut near_empty = 0;
        for counts in &self.occupancy {
            let class_points: usize = counts.iter().sum();
            if class_points == 0 {
                continue;
            }
            total += counts.len();
            near_empty += counts
                .iter()
                .filter(|&&c| (c as f64) < threshold * class_points as f64)
                .count();
        }
        if total == 0 {
            0.0
        } else {
            near_empty as f64 / total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,point_index,class,subclass,similarity\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.scene_id, r.point_index, r.class, r.subclass, r.similarity)
                .expect("string write");
        }
        out
    }

    pub fn occupancy_csv(&self) -> String {
        let mut out = String::from("class,subclass,count,fraction\n");
        for (c, counts) in self.occupancy.iter().enumerate() {
            let total: usize = counts.iter().sum();
            for (m, &n) in counts.iter().enumerate() {
                let frac = if total == 0 { 0.0 } else { n as f64 / total as f64 };
                writeln!(out, "{c},{m},{n},{frac}").expect("string write");
            }
        }
        out
    }
}

fn check_pair(model: &Model, centers: &CenterBank) -> Result<()> {
    if centers.dim() != model.embed_dim() {
        return Err(Error::invalid(format!(
            "center bank dim {} does not match checkpoint embedding dim {}",
            centers.dim(),
            model.embed_dim()
        )));
    }
    if centers.class_count() != model.classes() {
        return Err(Error::invalid(format!(
            "center bank has {} classes, checkpoint has {}",
            centers.class_count(),
            model.classes()
        )));
    }
    Ok(())
}

/// Within-class cluster of each point by center similarity, with the cosine.
fn nearest(embeddings: &Matrix, labels: &[usize], centers: &CenterBank) -> Vec<(usize, f64)> {
    let m = centers.clusters_per_class();
    embeddings
        .iter_rows()
        .zip(labels)
        .map(|(e, &c)| {
            (0..m)
                .map(|k| (k, dot(e, centers.center(c, k))))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        })
        .collect()
}

/// Subclass assignments of every point using the ground-truth class.
pub fn cluster_report(
    model: &Model,
    centers: &CenterBank,
    scenes: &[Scene],
    assignment: Assignment,
    settings: SolverSettings,
) -> Result<ClusterReport> {
    check_pair(model, centers)?;
    let m = centers.clusters_per_class();
    let mut occupancy = vec![vec![0usize; m]; centers.class_count()];
    let mut rows = Vec::new();
    for s in scenes {
        if s.class_count > centers.class_count() {
            return Err(Error::invalid(format!(
                "scene {} has {} classes, center bank has {}",
                s.id,
                s.class_count,
                centers.class_count()
            )));
        }
        let emb = model.forward(&s.points)?.embeddings;
        let picks: Vec<(usize, f64)> = match assignment {
            Assignment::Nearest => nearest(&emb, &s.labels, centers),
            Assignment::Transport => {
                let o = cluster::assign_subclass_labels(&emb, &s.labels, centers, settings, 1)?;
                o.subclass_labels
                    .iter()
                    .zip(emb.iter_rows())
                    .map(|(&g, e)| {
                        let (c, k) = centers.split_id(g);
                        (k, dot(e, centers.center(c, k)))
                    })
                    .collect()
            }
        };
        for (i, (&class, (subclass, similarity))) in s.labels.iter().zip(picks).enumerate() {
            occupancy[class][subclass] += 1;
            rows.push(ReportRow {
                scene_id: s.id,
                point_index: i,
                class,
                subclass,
                similarity,
            });
        }
    }
    Ok(ClusterReport {
        clusters_per_class: m,
        rows,
        occupancy,
    })
}

/// Writes the assignment CSV to `path` and the occupancy table next to it
/// as `<stem>_occupancy.csv`. Returns the occupancy path.
pub fn write_cluster_report(report: &ClusterReport, path: &Path) -> Result<PathBuf> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    let occ = path.with_file_name(format!("{stem}_occupancy.csv"));
    fs::write(&occ, report.occupancy_csv()).map_err(|e| Error::io(&occ, e))?;
    Ok(occ)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit-norm principal direction per row, by decreasing variance.
    pub components: Matrix,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn project(&self, data: &Matrix) -> Matrix {
        let k = self.components.rows();
        let mut out = Matrix::zeros(data.rows(), k);
        let mut centered = vec![0.0; self.mean.len()];
        for (r, row) in data.iter_rows().enumerate() {
            for ((c, &x), &mu) in centered.iter_mut().zip(row).zip(&self.mean) {
                *c = x - mu;
            }
            for j in 0..k {
                out.set(r, j, dot(&centered, self.components.row(j)));
            }
        }
        out
    }
}

const POWER_ITERS: usize = 2000;
const POWER_TOL: f64 = 1e-13;

/// Top-`dims` principal components by power iteration with deflation on the
/// sample covariance. The start vectors come from `seed`.
pub fn pca(data: &Matrix, dims: usize, seed: u64) -> Result<Pca> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::invalid(format!("projection needs at least 2 points, got {n}")));
    }
    if dims == 0 || dims > d {
        return Err(Error::invalid(format!("cannot take {dims} components of {d}-dim data")));
    }
    let mut mean = vec![0.0; d];
    for row in data.iter_rows() {
        numerics::axpy(1.0 / n as f64, row, &mut mean);
    }
    let mut cov = Matrix::zeros(d, d);
    for row in data.iter_rows() {
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in 0..d {
                let v = cov.get(i, j) + xi * (row[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Matrix::zeros(dims, d);
    let mut variances = Vec::with_capacity(dims);
    for k in 0..dims {
        let mut v: Vec<f64> = (0..d)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        orthogonalize(&mut v, &components, k);
        numerics::normalize_in_place(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut w: Vec<f64> = cov.iter_rows().map(|r| dot(r, &v)).collect();
            orthogonalize(&mut w, &components, k);
            let norm = numerics::normalize_in_place(&mut w);
            if norm == 0.0 {
                // No variance left in the remaining subspace; keep v.
                lambda = 0.0;
                break;
            }
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if delta < POWER_TOL {
                break;
            }
        }
        components.row_mut(k).copy_from_slice(&v);
        variances.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        variances,
    })
}

/// Removes the first `k` component directions from `v`.
fn orthogonalize(v: &mut [f64], components: &Matrix, k: usize) {
    for j in 0..k {
        let c = components.row(j);
        let p = dot(v, c);
        numerics::axpy(-p, c, v);
    }
}

pub const PROJECTION_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub scene_ids: Vec<u32>,
    pub point_index: Vec<usize>,
    pub classes: Vec<usize>,
    pub subclasses: Option<Vec<usize>>,
    pub projection: Matrix,
    pub variances: Vec<f64>,
}

impl EmbeddingExport {
    pub fn to_csv(&self) -> String {
        let k = self.projection.cols();
        let mut out = String::from("scene_id,point_index,class,subclass");
        for j in 0..k {
            out.push(',');
            out.push_str(&match j {
                0 => "proj_x".to_string(),
                1 => "proj_y".to_string(),
                _ => format!("proj_{}", j + 1),
            });
        }
        out.push('\n');
        for r in 0..self.projection.rows() {
            let sub = self.subclasses.as_ref().map_or(String::new(), |s| s[r].to_string());
            write!(out, "{},{},{},{sub}", self.scene_ids[r], self.point_index[r], self.classes[r]).expect("string write");
            for v in self.projection.row(r) {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }
}

/// Embeds every point and projects onto the top `dims` principal
/// components. With a center bank, points also get their nearest subclass.
pub fn export_embeddings(
    model: &Model,
    scenes: &[Scene],
    centers: Option<&CenterBank>,
    dims: usize,
) -> Result<EmbeddingExport> {
    if let Some(c) = centers {
        check_pair(model, c)?;
    }
    let mut rows = Vec::new();
    let mut scene_ids = Vec::new();
    let mut point_index = Vec::new();
    let mut classes = Vec::new();
    let mut subclasses = centers.map(|_| Vec::new());
    for s in scenes {
        let emb = model.forward(&s.points)?.embeddings;
        if let (Some(c), Some(out)) = (centers, subclasses.as_mut()) {
            if let Some(&l) = s.labels.iter().find(|&&l| l >= c.class_count()) {
                return Err(Error::invalid(format!("label {l} outside the center bank")));
            }
            out.extend(nearest(&emb, &s.labels, c).into_iter().map(|(k, _)| k));
        }
        rows.extend_from_slice(emb.as_slice());
        scene_ids.extend(std::iter::repeat_n(s.id, s.len()));
        point_index.extend(0..s.len());
        classes.extend_from_slice(&s.labels);
    }
    let data = Matrix::from_vec(classes.len(), model.embed_dim(), rows)?;
    let p = pca(&data, dims, PROJECTION_SEED)?;
    Ok(EmbeddingExport {
        scene_ids,
        point_index,
        classes,
        subclasses,
        projection: p.project(&data),
        variances: p.variances,
    })
}
