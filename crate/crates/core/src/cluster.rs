//! Within-class online clustering and momentum cluster centers.
//!
//! Every class owns `M` unit-norm centers. Each training batch, the points of
//! a class are softly assigned to that class's centers by entropic optimal
//! transport, hardened to one local cluster each, and relabeled to a global
//! subclass id `class * M + cluster`. Per-cluster batch means then drive the
//! momentum update of the centers.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::sinkhorn::{self, SolverSettings, TransportProblem};

pub const DEFAULT_MOMENTUM: f64 = 0.9999;
pub const DEFAULT_CLUSTERS_PER_CLASS: usize = 40;

pub const CENTER_MAGIC: &[u8; 4] = b"CBNK";
pub const CENTER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    class_count: usize,
    clusters_per_class: usize,
    dim: usize,
    /// `class_count * clusters_per_class` rows of length `dim`.
    centers: Matrix,
}

impl CenterBank {
    /// Standard-normal draws, row-normalized. Deterministic per seed.
    pub fn init(class_count: usize, clusters_per_class: usize, dim: usize, seed: u64) -> Result<Self> {
        if class_count == 0 || clusters_per_class == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "center bank dimensions must be positive (classes={class_count}, M={clusters_per_class}, d={dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = class_count * clusters_per_class;
        let mut centers = Matrix::zeros(rows, dim);
        for r in 0..rows {
            let row = centers.row_mut(r);
            // A zero draw is measure-zero, but a zero row would never normalize.
            loop {
                row.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                if numerics::normalize_in_place(row) > 0.0 {
                    break;
                }
            }
        }
        Ok(CenterBank {
            class_count,
            clusters_per_class,
            dim,
            centers,
        })
    }

    /// Wraps existing centers; every row is renormalized.
    pub fn from_centers(class_count: usize, clusters_per_class: usize, centers: Matrix) -> Result<Self> {
        if centers.rows() != class_count * clusters_per_class || centers.cols() == 0 {
            return Err(Error::invalid(format!(
                "expected {} center rows, got {}x{}",
                class_count * clusters_per_class,
                centers.rows(),
                centers.cols()
            )));
        }
        let n = numerics::l2_normalize_rows(&centers);
        if n.zero_rows > 0 {
            return Err(Error::invalid("center bank contains zero rows"));
        }
        Ok(CenterBank {
            class_count,
            clusters_per_class,
            dim: centers.cols(),
            centers: n.matrix,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn clusters_per_class(&self) -> usize {
        self.clusters_per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subclass_count(&self) -> usize {
        self.class_count * self.clusters_per_class
    }

    pub fn global_id(&self, class: usize, cluster: usize) -> usize {
        class * self.clusters_per_class + cluster
    }

    /// Inverse of [`global_id`](Self::global_id).
    pub fn split_id(&self, global: usize) -> (usize, usize) {
        (global / self.clusters_per_class, global % self.clusters_per_class)
    }

    pub fn center(&self, class: usize, cluster: usize) -> &[f64] {
        self.centers.row(self.global_id(class, cluster))
    }

    /// All centers, one row per global subclass id.
    pub fn all_centers(&self) -> &Matrix {
        &self.centers
    }

    /// The `M x d` block of one class.
    pub fn class_centers(&self, class: usize) -> Matrix {
        let m = self.clusters_per_class;
        let idx: Vec<usize> = (class * m..(class + 1) * m).collect();
        self.centers.select_rows(&idx)
    }

    /// Momentum blend `q ← μ·q + (1−μ)·mean` for every occupied (class, cluster); unoccupied centers
    /// are left bitwise unchanged.
    pub fn momentum_update(&mut self, outcome: &ClusterOutcome, mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1], got {mu}")));
        }
        if outcome.batch_means.rows() != self.centers.rows() || outcome.batch_means.cols() != self.dim {
            return Err(Error::invalid("cluster outcome does not match center bank shape"));
        }
        for g in 0..self.centers.rows() {
            if !outcome.occupied[g] {
                continue;
            }
            let mean = outcome.batch_means.row(g);
            let mut blended: Vec<f64> = self
                .centers
                .row(g)
                .iter()
                .zip(mean)
                .map(|(&q, &p)| mu * q + (1.0 - mu) * p)
                .collect();
            // An antipodal center and mean can cancel exactly; keep the old
            // center rather than store a zero row.
            if numerics::normalize_in_place(&mut blended) > 0.0 {
                self.centers.row_mut(g).copy_from_slice(&blended);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &CenterMeta) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = Vec::with_capacity(20);
        header.extend_from_slice(CENTER_MAGIC);
        for v in [
            CENTER_VERSION,
            self.class_count as u32,
            self.clusters_per_class as u32,
            self.dim as u32,
        ] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&header).map_err(|e| Error::io(path, e))?;
        for v in self.centers.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(meta).expect("center metadata serializes");
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    /// Reads a snapshot; the JSON sidecar is optional.
    pub fn load(path: &Path) -> Result<(Self, Option<CenterMeta>)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Format {
            path: path.display().to_string(),
            message: message.to_string(),
        };
        if bytes.len() < 20 || &bytes[..4] != CENTER_MAGIC {
            return Err(bad("not a center bank snapshot (bad magic)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CENTER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let (classes, m, d) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let count = classes * m * d;
        if bytes.len() != 20 + count * 8 {
            return Err(bad(&format!(
                "payload has {} bytes, header implies {}",
                bytes.len() - 20,
                count * 8
            )));
        }
        let values: Vec<f64> = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let centers = Matrix::from_vec(classes * m, d, values)?;
        if classes == 0 || m == 0 || d == 0 {
            return Err(bad("empty center bank"));
        }
        let bank = CenterBank {
            class_count: classes,
            clusters_per_class: m,
            dim: d,
            centers,
        };
        let sidecar = sidecar_path(path);
        let meta = match fs::read_to_string(&sidecar) {
            Ok(s) => Some(serde_json::from_str(&s).map_err(|e| Error::Format {
                path: sidecar.display().to_string(),
                message: e.to_string(),
            })?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&sidecar, e)),
        };
        Ok((bank, meta))
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Sidecar metadata written next to a center bank snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterMeta {
    pub seed: u64,
    pub step: u64,
}

/// Per-class solver statistics from one clustering call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassSolve {
    pub class: usize,
    pub points: usize,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    /// Global subclass id per point, `class * M + cluster`.
    pub subclass_labels: Vec<usize>,
    /// One row per global subclass: mean embedding of its batch members.
    pub batch_means: Matrix,
    /// Point count per global subclass in this batch.
    pub counts: Vec<usize>,
    pub occupied: Vec<bool>,
    pub solves: Vec<ClassSolve>,
}

impl ClusterOutcome {
    /// Occupancy histogram, one row of `M` counts per class.
    pub fn occupancy(&self, clusters_per_class: usize) -> Vec<Vec<usize>> {
        self.counts
            .chunks(clusters_per_class)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn unconverged(&self) -> usize {
        self.solves.iter().filter(|s| !s.converged).count()
    }
}

/// Positions of each class's points, in batch order.
pub fn class_members(class_labels: &[usize], class_count: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); class_count];
    for (i, &c) in class_labels.iter().enumerate() {
        if c >= class_count {
            return Err(Error::invalid(format!(
                "class label {c} at point {i} out of range for {class_count} classes"
            )));
        }
        members[c].push(i);
    }
    Ok(members)
}

/// Centers-by-points similarity for one class: softmax over that class's
/// centers of the cosine similarities, transposed to `M x N`.
pub fn class_similarity(points: &Matrix, centers: &Matrix) -> Result<Matrix> {
    Ok(numerics::row_softmax(&points.matmul_t(centers)?).transpose())
}

/// Local cluster labels for the points of one class.
/// `(class, local labels, iterations, converged)` for one per-class solve.
type ClassResult = (usize, Vec<usize>, usize, bool);

fn cluster_class(points: &Matrix, centers: &Matrix, settings: SolverSettings) -> Result<(Vec<usize>, usize, bool)> {
    let sim = class_similarity(points, centers)?;
    let plan = sinkhorn::solve(&TransportProblem::new(sim, settings))?;
    Ok((sinkhorn::harden(&plan), plan.iters_used, plan.converged))
}

/// Phase-1 assignment. `embeddings` rows must already be unit norm.
///
/// With `workers > 1` the per-class problems are solved on a rayon pool; the
/// result does not depend on the worker count.
pub fn assign_subclass_labels(
    embeddings: &Matrix,
    class_labels: &[usize],
    bank: &CenterBank,
    settings: SolverSettings,
    workers: usize,
) -> Result<ClusterOutcome> {
    if embeddings.rows() != class_labels.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            class_labels.len()
        )));
    }
    if embeddings.cols() != bank.dim() {
        return Err(Error::invalid(format!(
            "embedding dim {} does not match center dim {}",
            embeddings.cols(),
            bank.dim()
        )));
    }
    settings.validate()?;
    let members = class_members(class_labels, bank.class_count())?;
    let present: Vec<usize> = (0..bank.class_count()).filter(|&c| !members[c].is_empty()).collect();

    let solve_one = |c: usize| -> Result<(usize, Vec<usize>, usize, bool)> {
        let points = embeddings.select_rows(&members[c]);
        cluster_class(&points, &bank.class_centers(c), settings)
            .map(|(labels, iters, conv)| (c, labels, iters, conv))
            .map_err(|e| Error::Solver {
                class: c,
                source: Box::new(e),
            })
    };

    let results: Vec<Result<ClassResult>> = if workers > 1 && present.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| present.par_iter().map(|&c| solve_one(c)).collect())
    } else {
        present.iter().map(|&c| solve_one(c)).collect()
    };

    let m = bank.clusters_per_class();
    let mut subclass_labels = vec![0usize; embeddings.rows()];
    let mut solves = Vec::with_capacity(present.len());
    for r in results {
        let (c, local, iters, converged) = r?;
        for (&i, &l) in members[c].iter().zip(&local) {
            subclass_labels[i] = c * m + l;
        }
        solves.push(ClassSolve {
            class: c,
            points: members[c].len(),
            iters,
            converged,
        });
    }
    let means = numerics::scatter_mean(embeddings, &subclass_labels, bank.subclass_count())?;
    Ok(ClusterOutcome {
        subclass_labels,
        occupied: means.counts.iter().map(|&c| c > 0).collect(),
        counts: means.counts,
        batch_means: means.means,
        solves,
    })
}
