//! Reference oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the library's numeric paths: sums are carried in
//! double-double arithmetic and every loss is spelled out pair by pair.

#![allow(dead_code, clippy::needless_range_loop)]

use otseg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Dd {
        let (h, l) = two_sum(hi, lo);
        Dd { hi: h, lo: l }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        Dd::renorm(s, e + self.lo + o.lo)
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::new(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::new(q2)));
        let q3 = r.hi / o.hi;
        Dd::renorm(q1, q2).add(Dd::new(q3))
    }

    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    fn scale(self, f: f64) -> Dd {
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    /// Argument reduction by ln 2 and 2^-10, then a Taylor series.
    pub fn exp(self) -> Dd {
        const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.3190468138462996e-17 };
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.mul(Dd::new(k))).scale(1.0 / 1024.0);
        let mut term = Dd::new(1.0);
        let mut sum = Dd::new(1.0);
        for i in 1..=14 {
            term = term.mul(r).div(Dd::new(i as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        sum.scale(2f64.powi(k as i32))
    }

    /// One Newton step on `exp(y) = x` from the f64 estimate.
    pub fn ln(self) -> Dd {
        let y = Dd::new(self.hi.ln());
        y.add(self.mul(y.neg().exp())).sub(Dd::new(1.0))
    }
}

/// Unit-norm random rows.
pub fn random_unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn dd_dot(a: &[f64], b: &[f64]) -> Dd {
    a.iter()
        .zip(b)
        .fold(Dd::ZERO, |acc, (&x, &y)| acc.add(Dd::new(x).mul(Dd::new(y))))
}

/// Similarity exactly as the clustering step defines it: softmax over the
/// centers of point-center dot products, laid out centers × points.
pub fn oracle_similarity(points: &Matrix, centers: &Matrix) -> Vec<Vec<Dd>> {
    let (n, m) = (points.rows(), centers.rows());
    let mut s = vec![vec![Dd::ZERO; n]; m];
    for p in 0..n {
        let logits: Vec<Dd> = (0..m).map(|c| dd_dot(points.row(p), centers.row(c))).collect();
        let max = logits.iter().map(|l| l.hi).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Dd> = logits.iter().map(|l| l.sub(Dd::new(max)).exp()).collect();
        let z = exps.iter().fold(Dd::ZERO, |a, &e| a.add(e));
        for c in 0..m {
            s[c][p] = exps[c].div(z);
        }
    }
    s
}

/// Output of the double-double Sinkhorn reference.
pub struct DdPlan {
    pub plan: Vec<Vec<Dd>>,
    pub row_residual: f64,
    pub col_residual: f64,
}

/// Sinkhorn-Knopp carried entirely in double-double for a fixed number of
/// sweeps on the kernel `s^lambda`.
pub fn oracle_sinkhorn(s: &Matrix, lambda: f64, sweeps: usize) -> DdPlan {
    let (m, n) = (s.rows(), s.cols());
    let k: Vec<Vec<Dd>> = (0..m)
        .map(|r| (0..n).map(|c| Dd::new(s.get(r, c)).ln().mul(Dd::new(lambda)).exp()).collect())
        .collect();
    let rt = Dd::new(1.0).div(Dd::new(m as f64));
    let ct = Dd::new(1.0).div(Dd::new(n as f64));
    let mut u = vec![Dd::new(1.0); m];
    let mut v = vec![Dd::new(1.0); n];
    for _ in 0..sweeps {
        for r in 0..m {
            let kv = (0..n).fold(Dd::ZERO, |a, c| a.add(k[r][c].mul(v[c])));
            u[r] = rt.div(kv);
        }
        for c in 0..n {
            let ktu = (0..m).fold(Dd::ZERO, |a, r| a.add(k[r][c].mul(u[r])));
            v[c] = ct.div(ktu);
        }
    }
    let plan: Vec<Vec<Dd>> = (0..m)
        .map(|r| (0..n).map(|c| u[r].mul(k[r][c]).mul(v[c])).collect())
        .collect();
    let row_residual = (0..m)
        .map(|r| plan[r].iter().fold(Dd::ZERO, |a, &x| a.add(x)).sub(rt).to_f64().abs())
        .fold(0.0, f64::max);
    let col_residual = (0..n)
        .map(|c| (0..m).fold(Dd::ZERO, |a, r| a.add(plan[r][c])).sub(ct).to_f64().abs())
        .fold(0.0, f64::max);
    DdPlan {
        plan,
        row_residual,
        col_residual,
    }
}

/// Row and column marginal residuals of an f64 plan, summed in double-double.
pub fn dd_marginal_residuals(plan: &Matrix) -> (f64, f64) {
    let (m, n) = (plan.rows(), plan.cols());
    let rt = Dd::new(1.0).div(Dd::new(m as f64));
    let ct = Dd::new(1.0).div(Dd::new(n as f64));
    let rows = (0..m)
        .map(|r| (0..n).fold(Dd::ZERO, |a, c| a.add(Dd::new(plan.get(r, c)))).sub(rt).to_f64().abs())
        .fold(0.0, f64::max);
    let cols = (0..n)
        .map(|c| (0..m).fold(Dd::ZERO, |a, r| a.add(Dd::new(plan.get(r, c)))).sub(ct).to_f64().abs())
        .fold(0.0, f64::max);
    (rows, cols)
}

/// `-log(e^a / (e^a + Σ e^b))` for the listed logits, in double-double.
fn neg_log_ratio(num: Dd, denominator: &[Dd]) -> Dd {
    let max = denominator
        .iter()
        .chain(std::iter::once(&num))
        .map(|d| d.hi)
        .fold(f64::NEG_INFINITY, f64::max);
    let z = denominator
        .iter()
        .fold(Dd::ZERO, |a, &d| a.add(d.sub(Dd::new(max)).exp()));
    z.ln().add(Dd::new(max)).sub(num)
}

/// Point-point contrast as a literal double loop. `positive_plus_negatives`
/// selects the denominator made of the positive itself plus all negatives;
/// otherwise every pool entry except the anchor is in the denominator.
pub fn oracle_ppc(
    anchors: &Matrix,
    anchor_labels: &[usize],
    pool: &Matrix,
    pool_labels: &[usize],
    tau: f64,
    anchors_lead_pool: bool,
    positive_plus_negatives: bool,
) -> f64 {
    let n = anchors.rows();
    let mut total = Dd::ZERO;
    for i in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut all = Vec::new();
        for k in 0..pool.rows() {
            if anchors_lead_pool && k == i {
                continue;
            }
            let l = dd_dot(anchors.row(i), pool.row(k)).div(Dd::new(tau));
            all.push(l);
            if pool_labels[k] == anchor_labels[i] {
                pos.push(l);
            } else {
                neg.push(l);
            }
        }
        if pos.is_empty() {
            continue;
        }
        let mut acc = Dd::ZERO;
        for &lp in &pos {
            let term = if positive_plus_negatives {
                let mut denom = neg.clone();
                denom.push(lp);
                neg_log_ratio(lp, &denom)
            } else {
                neg_log_ratio(lp, &all)
            };
            acc = acc.add(term);
        }
        total = total.add(acc.div(Dd::new(pos.len() as f64)));
    }
    total.div(Dd::new(n as f64)).to_f64()
}

/// Point-center contrast: softmax over every center, double loop.
pub fn oracle_pcc(embeddings: &Matrix, subclass: &[usize], centers: &Matrix, tau: f64) -> f64 {
    let n = embeddings.rows();
    let mut total = Dd::ZERO;
    for i in 0..n {
        let logits: Vec<Dd> = (0..centers.rows())
            .map(|g| dd_dot(embeddings.row(i), centers.row(g)).div(Dd::new(tau)))
            .collect();
        total = total.add(neg_log_ratio(logits[subclass[i]], &logits));
    }
    total.div(Dd::new(n as f64)).to_f64()
}

pub fn oracle_ce(logits: &Matrix, labels: &[usize]) -> f64 {
    let n = logits.rows();
    let mut total = Dd::ZERO;
    for i in 0..n {
        let row: Vec<Dd> = logits.row(i).iter().map(|&x| Dd::new(x)).collect();
        total = total.add(neg_log_ratio(row[labels[i]], &row));
    }
    total.div(Dd::new(n as f64)).to_f64()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// Instance generators and per-instance checks.

use otseg::cluster::{self, CenterBank};
use otseg::losses::{self, PpcDenominator, PpcOptions, Term};
use otseg::model::{Activation, Model, ModelShape};
use otseg::sinkhorn::{self, SolverSettings, TransportProblem};

/// A random clustering-shaped similarity: softmax over `m` random centers of
/// `n` random unit points, `m x n`.
pub fn random_similarity(m: usize, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let points = random_unit_rows(n, dim, rng);
    let centers = random_unit_rows(m, dim, rng);
    let s = oracle_similarity(&points, &centers);
    let data = s.iter().flatten().map(|d| d.to_f64()).collect();
    Matrix::from_vec(m, n, data).unwrap()
}

pub struct SinkhornCheck {
    pub converged: bool,
    pub iters: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    pub reconstruction: f64,
}

/// Solves one random problem and measures marginals in double-double and the
/// plan against a naive `u_r * s_rc^lambda * v_c` rebuild.
pub fn sinkhorn_check(seed: u64, lambda: f64, max_iters: usize) -> SinkhornCheck {
    let mut r = rng(seed);
    let m = r.random_range(1..=8);
    let n = r.random_range(1..=64);
    let s = random_similarity(m, n, 8, &mut r);
    let settings = SolverSettings {
        lambda,
        max_iters,
        tolerance: 1e-10,
    };
    let out = sinkhorn::solve(&TransportProblem::new(s.clone(), settings)).unwrap();
    let (row_residual, col_residual) = dd_marginal_residuals(&out.plan);
    let mut reconstruction: f64 = 0.0;
    for i in 0..m {
        for j in 0..n {
            let k = s.get(i, j).powf(lambda);
            let expect = out.u[i] * k * out.v[j];
            reconstruction = reconstruction.max((out.plan.get(i, j) - expect).abs());
        }
    }
    SinkhornCheck {
        converged: out.converged,
        iters: out.iters_used,
        row_residual,
        col_residual,
        reconstruction,
    }
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `|ppc - oracle|` on one random instance; anchors lead the pool or not,
/// labels drawn from few subclasses so anchors have positives.
pub fn ppc_oracle_gap(seed: u64, denominator: PpcDenominator) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=10);
    let extra = r.random_range(0..=10);
    let d = r.random_range(2..=8);
    let k = r.random_range(1..=4);
    let lead = r.random_bool(0.5);
    let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
    let anchors = random_unit_rows(n, d, &mut r);
    let labels = random_labels(n, k, &mut r);
    let (pool, pool_labels) = if lead {
        let tail = random_unit_rows(extra, d, &mut r);
        let mut pl = labels.clone();
        pl.extend(random_labels(extra, k, &mut r));
        (anchors.vstack(&tail).unwrap(), pl)
    } else {
        let p = random_unit_rows(extra + 1, d, &mut r);
        let pl = random_labels(extra + 1, k, &mut r);
        (p, pl)
    };
    let got = losses::ppc_loss(
        &anchors,
        &labels,
        &pool,
        &pool_labels,
        PpcOptions {
            tau,
            denominator,
            anchors_lead_pool: lead,
        },
    )
    .unwrap()
    .value;
    let expect = oracle_ppc(
        &anchors,
        &labels,
        &pool,
        &pool_labels,
        tau,
        lead,
        denominator == PpcDenominator::PositivePlusNegatives,
    );
    (got - expect).abs()
}

pub fn pcc_oracle_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    let d = r.random_range(2..=8);
    let g = r.random_range(1..=12);
    let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
    let emb = random_unit_rows(n, d, &mut r);
    let centers = random_unit_rows(g, d, &mut r);
    let sub = random_labels(n, g, &mut r);
    let got = losses::pcc_loss(&emb, &sub, &centers, tau).unwrap().value;
    (got - oracle_pcc(&emb, &sub, &centers, tau)).abs()
}

const FD_STEP: f64 = 1e-6;

fn perturb(base: &Matrix, flat: &[f64]) -> Matrix {
    Matrix::from_vec(base.rows(), base.cols(), flat.to_vec()).unwrap()
}

/// Relative error of the cross-entropy logit gradient.
pub fn ce_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    let c = r.random_range(1..=3);
    let logits = random_matrix(n, c, 2.0, &mut r);
    let labels = random_labels(n, c, &mut r);
    let analytic = losses::ce_loss(&logits, &labels).unwrap().grad;
    let fd = central_difference(logits.as_slice(), FD_STEP, |x| {
        losses::ce_loss(&perturb(&logits, x), &labels).unwrap().value
    });
    relative_error(analytic.as_slice(), &fd)
}

/// Relative error of the point-point gradient when the pool is the anchors
/// followed by fixed extra rows, so every anchor also appears in the pool.
pub fn ppc_grad_error(seed: u64, denominator: PpcDenominator) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..=20);
    let extra = r.random_range(0..=10);
    let d = r.random_range(2..=16);
    let k = r.random_range(1..=6);
    let anchors = random_unit_rows(n, d, &mut r);
    let labels = random_labels(n, k, &mut r);
    let tail = random_unit_rows(extra, d, &mut r);
    let mut pool_labels = labels.clone();
    pool_labels.extend(random_labels(extra, k, &mut r));
    let opts = PpcOptions {
        tau: 0.1,
        denominator,
        anchors_lead_pool: true,
    };
    let eval = |x: &Matrix| {
        let pool = x.vstack(&tail).unwrap();
        losses::ppc_loss(x, &labels, &pool, &pool_labels, opts).unwrap()
    };
    let out = eval(&anchors);
    let mut analytic = out.grad_anchors.as_slice().to_vec();
    for (a, p) in analytic.iter_mut().zip(&out.grad_pool.as_slice()[..n * d]) {
        *a += p;
    }
    let fd = central_difference(anchors.as_slice(), FD_STEP, |x| eval(&perturb(&anchors, x)).value);
    relative_error(&analytic, &fd)
}

/// Relative error of the point-center gradient with the centers held fixed.
pub fn pcc_grad_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=20);
    let d = r.random_range(2..=16);
    let g = r.random_range(1..=6);
    let emb = random_unit_rows(n, d, &mut r);
    let centers = random_unit_rows(g, d, &mut r);
    let sub = random_labels(n, g, &mut r);
    let analytic = losses::pcc_loss(&emb, &sub, &centers, 0.1).unwrap().grad;
    let fd = central_difference(emb.as_slice(), FD_STEP, |x| {
        losses::pcc_loss(&perturb(&emb, x), &sub, &centers, 0.1).unwrap().value
    });
    relative_error(analytic.as_slice(), &fd)
}

/// The combined objective as a function of the encoder and head parameters.
/// Subclass labels come from one clustering solve at the starting point and
/// stay fixed, as do the centers and the extra bank rows.
pub struct Objective {
    pub model: Model,
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub subclass: Vec<usize>,
    pub centers: Matrix,
    pub bank: Matrix,
    pub bank_labels: Vec<usize>,
    pub alpha: f64,
    pub tau: f64,
    pub denominator: PpcDenominator,
}

impl Objective {
    pub fn random(seed: u64) -> Objective {
        let mut r = rng(seed);
        let n = r.random_range(4..=20);
        let classes = r.random_range(1..=3);
        let m = r.random_range(1..=2);
        let input_dim = r.random_range(2..=5);
        let embed_dim = r.random_range(2..=16);
        let hidden = vec![r.random_range(3..=8)];
        let shape = ModelShape {
            input_dim,
            hidden,
            embed_dim,
            classes,
            activation: Activation::Tanh,
        };
        let model = Model::random(&shape, seed).unwrap();
        let points = random_matrix(n, input_dim, 1.0, &mut r);
        let labels = random_labels(n, classes, &mut r);
        let bank = CenterBank::init(classes, m, embed_dim, seed ^ 0xc0).unwrap();
        let fwd = model.forward(&points).unwrap();
        let outcome = cluster::assign_subclass_labels(&fwd.embeddings, &labels, &bank, SolverSettings::default(), 1)
            .unwrap();
        let extra = r.random_range(0..=8);
        let bank_rows = random_unit_rows(extra, embed_dim, &mut r);
        let bank_labels = random_labels(extra, classes * m, &mut r);
        let denominator = if r.random_bool(0.5) {
            PpcDenominator::PositivePlusNegatives
        } else {
            PpcDenominator::AllContrasts
        };
        Objective {
            model,
            points,
            labels,
            subclass: outcome.subclass_labels,
            centers: bank.all_centers().clone(),
            bank: bank_rows,
            bank_labels,
            alpha: 1.0,
            tau: 0.1,
            denominator,
        }
    }

    /// `(J, dJ/dθ)` at the model's current parameters.
    pub fn evaluate(&self, model: &Model) -> (f64, Vec<f64>) {
        let fwd = model.forward(&self.points).unwrap();
        let (n, d) = (fwd.embeddings.rows(), fwd.embeddings.cols());
        let ce = losses::ce_loss(&fwd.logits, &self.labels).unwrap();
        let pool = fwd.embeddings.vstack(&self.bank).unwrap();
        let mut pool_labels = self.subclass.clone();
        pool_labels.extend(&self.bank_labels);
        let out = losses::ppc_loss(
            &fwd.embeddings,
            &self.subclass,
            &pool,
            &pool_labels,
            PpcOptions {
                tau: self.tau,
                denominator: self.denominator,
                anchors_lead_pool: true,
            },
        )
        .unwrap();
        let mut grad = out.grad_anchors;
        for (a, p) in grad.as_mut_slice().iter_mut().zip(&out.grad_pool.as_slice()[..n * d]) {
            *a += p;
        }
        let ppc = Term { value: out.value, grad };
        let pcc = losses::pcc_loss(&fwd.embeddings, &self.subclass, &self.centers, self.tau).unwrap();
        let report = losses::total_loss(ce, Some(ppc), Some(pcc), self.alpha, self.tau, (n, d)).unwrap();
        let grads = model
            .backward(&fwd, &report.grad_embeddings, &report.grad_logits)
            .unwrap();
        (report.total, grads.flat())
    }

    pub fn grad_error(&self) -> f64 {
        let (_, analytic) = self.evaluate(&self.model);
        let theta = self.model.flat_params();
        let mut probe = self.model.clone();
        let fd = central_difference(&theta, FD_STEP, |x| {
            probe.set_flat_params(x).unwrap();
            self.evaluate(&probe).0
        });
        relative_error(&analytic, &fd)
    }
}

pub fn full_objective_grad_error(seed: u64) -> f64 {
    Objective::random(seed).grad_error()
}

/// Worst deviation of the two momentum endpoints from their closed forms:
/// `mu = 1` against the old centers, `mu = 0` against normalized batch means
/// accumulated in double-double. Unoccupied centers must not move.
pub fn momentum_endpoint_gap(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let classes = r.random_range(1..=3);
    let m = r.random_range(1..=4);
    let d = r.random_range(2..=16);
    let n = r.random_range(1..=60);
    let emb = random_unit_rows(n, d, &mut r);
    let labels = random_labels(n, classes, &mut r);
    let bank = CenterBank::init(classes, m, d, seed).unwrap();
    let outcome =
        cluster::assign_subclass_labels(&emb, &labels, &bank, SolverSettings::default(), 1).unwrap();

    let mut fixed = bank.clone();
    fixed.momentum_update(&outcome, 1.0).unwrap();
    let gap_one = fixed.all_centers().max_abs_diff(bank.all_centers());

    let mut reset = bank.clone();
    reset.momentum_update(&outcome, 0.0).unwrap();
    let mut gap_zero: f64 = 0.0;
    for g in 0..classes * m {
        let members: Vec<usize> = (0..n).filter(|&i| outcome.subclass_labels[i] == g).collect();
        let expect: Vec<f64> = if members.is_empty() {
            bank.all_centers().row(g).to_vec()
        } else {
            let sums: Vec<Dd> = (0..d)
                .map(|c| members.iter().fold(Dd::ZERO, |a, &i| a.add(Dd::new(emb.get(i, c)))))
                .collect();
            let norm = sums.iter().fold(Dd::ZERO, |a, &s| a.add(s.mul(s))).to_f64().sqrt();
            sums.iter().map(|s| s.to_f64() / norm).collect()
        };
        for (a, b) in reset.all_centers().row(g).iter().zip(&expect) {
            gap_zero = gap_zero.max((a - b).abs());
        }
    }
    (gap_one, gap_zero)
}
