//! Scenes, the synthetic scene generator, and the text scene format.
//!
//! Scene file (UTF-8, optionally gzip when the name ends in `.gz`):
//!
//! ```text
//! SCENE v1 id=<u32> n=<u32> aux=<u32> classes=<u32>
//! x y z a1 .. a_aux label [planted]
//! ```
//!
//! One point per line, single-space separated. The planted-subclass column is
//! either present on every row or on none.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u32,
    /// `N x (3 + aux)`: xyz then auxiliary channels.
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Ground-truth mode index within the point's class (synthetic data only).
    pub planted: Option<Vec<usize>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn aux_channels(&self) -> usize {
        self.points.cols().saturating_sub(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::invalid(format!("scene {} has no points", self.id)));
        }
        if self.points.cols() < 3 || self.points.rows() != self.labels.len() {
            return Err(Error::invalid(format!("scene {} has inconsistent shape", self.id)));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::invalid(format!(
                "scene {} label {bad} out of range for {} classes",
                self.id, self.class_count
            )));
        }
        if !self.points.is_finite() {
            return Err(Error::invalid(format!("scene {} has non-finite coordinates", self.id)));
        }
        if let Some(p) = &self.planted {
            if p.len() != self.labels.len() {
                return Err(Error::invalid(format!("scene {} planted labels length mismatch", self.id)));
            }
        }
        Ok(())
    }
}

/// Parameters of the planted-mode generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub class_count: usize,
    pub modes_per_class: usize,
    pub points_per_mode: usize,
    /// Minimum distance between any two mode centroids.
    pub mode_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub scenes: usize,
    pub aux_channels: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            class_count: 3,
            modes_per_class: 2,
            points_per_mode: 40,
            mode_separation: 2.0,
            noise_sigma: 0.6,
            seed: 0,
            scenes: 20,
            aux_channels: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.modes_per_class == 0 || self.points_per_mode == 0 || self.scenes == 0 {
            return Err(Error::Config("synth counts must all be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.mode_separation >= 0.0 && self.mode_separation.is_finite()) {
            return Err(Error::Config(format!(
                "mode_separation must be >= 0, got {}",
                self.mode_separation
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Mode centroids, `class_count * modes_per_class` rows, class-major.
///
/// Centroids are drawn uniformly from a cube and accepted only when at least
/// `mode_separation` away from all earlier ones; the cube grows if sampling
/// stalls.
pub fn mode_centroids(spec: &SynthSpec) -> Matrix {
    let dim = 3 + spec.aux_channels;
    let total = spec.class_count * spec.modes_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c3e7);
    let mut half = 0.5 * spec.mode_separation.max(1e-9) * (total as f64).powf(1.0 / dim as f64) * 1.5;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut stalls = 0;
    while out.len() < total {
        let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-half..=half)).collect();
        let ok = out.iter().all(|c| {
            let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= spec.mode_separation
        });
        if ok {
            out.push(cand);
            stalls = 0;
        } else {
            stalls += 1;
            if stalls > 1000 {
                half *= 1.25;
                stalls = 0;
            }
        }
    }
    Matrix::from_rows(dim, out).expect("fixed width")
}

/// Deterministic per seed; scene ids are `0..scenes`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let centroids = mode_centroids(spec);
    let dim = centroids.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let per_scene = spec.class_count * spec.modes_per_class * spec.points_per_mode;
    let mut scenes = Vec::with_capacity(spec.scenes);
    for id in 0..spec.scenes {
        let mut data = Vec::with_capacity(per_scene * dim);
        let mut labels = Vec::with_capacity(per_scene);
        let mut planted = Vec::with_capacity(per_scene);
        for c in 0..spec.class_count {
            for m in 0..spec.modes_per_class {
                let centroid = centroids.row(c * spec.modes_per_class + m);
                for _ in 0..spec.points_per_mode {
                    data.extend(centroid.iter().map(|&x| x + noise.sample(&mut rng)));
                    labels.push(c);
                    planted.push(m);
                }
            }
        }
        scenes.push(Scene {
            id: id as u32,
            points: Matrix::from_vec(per_scene, dim, data)?,
            labels,
            class_count: spec.class_count,
            planted: Some(planted),
        });
    }
    Ok(scenes)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    scene.validate()?;
    let mut text = String::with_capacity(scene.len() * 16 * (scene.points.cols() + 2));
    let _ = writeln!(
        text,
        "SCENE v1 id={} n={} aux={} classes={}",
        scene.id,
        scene.len(),
        scene.aux_channels(),
        scene.class_count
    );
    for i in 0..scene.len() {
        for (k, v) in scene.points.row(i).iter().enumerate() {
            if k > 0 {
                text.push(' ');
            }
            // `{}` on f64 prints the shortest representation that round-trips.
            let _ = write!(text, "{v}");
        }
        let _ = write!(text, " {}", scene.labels[i]);
        if let Some(p) = &scene.planted {
            let _ = write!(text, " {}", p[i]);
        }
        text.push('\n');
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e| Error::io(path, e);
    if is_gz(path) {
        let mut gz = flate2::write::GzEncoder::new(BufWriter::new(file), flate2::Compression::default());
        gz.write_all(text.as_bytes()).map_err(io)?;
        gz.finish().map_err(io)?.flush().map_err(io)
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(text.as_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }
}

struct Header {
    id: u32,
    n: usize,
    aux: usize,
    classes: usize,
}

fn parse_header(line: &str) -> std::result::Result<Header, String> {
    let mut tok = line.split(' ');
    if tok.next() != Some("SCENE") || tok.next() != Some("v1") {
        return Err("expected `SCENE v1` header".into());
    }
    let mut field = |name: &str| -> std::result::Result<u32, String> {
        let t = tok.next().ok_or_else(|| format!("header missing `{name}=`"))?;
        let v = t
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| format!("expected `{name}=<u32>`, found `{t}`"))?;
        v.parse::<u32>().map_err(|e| format!("bad `{name}` value `{v}`: {e}"))
    };
    let h = Header {
        id: field("id")?,
        n: field("n")? as usize,
        aux: field("aux")? as usize,
        classes: field("classes")? as usize,
    };
    if tok.next().is_some() {
        return Err("unexpected trailing header fields".into());
    }
    Ok(h)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source: Box<dyn Read> = if is_gz(path) {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_scene(BufReader::new(source), &path.display().to_string())
}

pub fn parse_scene(reader: impl BufRead, origin: &str) -> Result<Scene> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => return Err(err(1, "missing header".into())),
        Some(l) => l.map_err(|e| err(1, e.to_string()))?,
    };
    if header.trim().is_empty() {
        return Err(err(1, "missing header".into()));
    }
    let h = parse_header(header.trim_end_matches('\r')).map_err(|m| err(1, m))?;
    if h.n == 0 {
        return Err(err(1, "scene must contain at least one point".into()));
    }
    let dim = 3 + h.aux;
    let mut data = Vec::with_capacity(h.n * dim);
    let mut labels = Vec::with_capacity(h.n);
    let mut planted: Vec<usize> = Vec::new();
    let mut has_planted: Option<bool> = None;
    for i in 0..h.n {
        let line_no = i + 2;
        let line = match lines.next() {
            None => return Err(err(line_no, format!("expected {} points, file ends after {i}", h.n))),
            Some(l) => l.map_err(|e| err(line_no, e.to_string()))?,
        };
        let toks: Vec<&str> = line.trim_end_matches('\r').split(' ').collect();
        let with = match toks.len() {
            t if t == dim + 1 => false,
            t if t == dim + 2 => true,
            t => {
                return Err(err(
                    line_no,
                    format!("expected {} or {} fields for aux={}, found {t}", dim + 1, dim + 2, h.aux),
                ))
            }
        };
        match has_planted {
            None => has_planted = Some(with),
            Some(p) if p != with => {
                return Err(err(line_no, "planted column must be present on all rows or none".into()))
            }
            _ => {}
        }
        for t in &toks[..dim] {
            let v: f64 = t.parse().map_err(|_| err(line_no, format!("bad coordinate `{t}`")))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite coordinate `{t}`")));
            }
            data.push(v);
        }
        let label: usize = toks[dim]
            .parse()
            .map_err(|_| err(line_no, format!("bad label `{}`", toks[dim])))?;
        if label >= h.classes {
            return Err(err(line_no, format!("label {label} out of range for {} classes", h.classes)));
        }
        labels.push(label);
        if with {
            let p: usize = toks[dim + 1]
                .parse()
                .map_err(|_| err(line_no, format!("bad planted id `{}`", toks[dim + 1])))?;
            planted.push(p);
        }
    }
    if let Some(extra) = lines.next() {
        let extra = extra.map_err(|e| err(h.n + 2, e.to_string()))?;
        if !extra.trim().is_empty() {
            return Err(err(h.n + 2, format!("more than n={} point rows", h.n)));
        }
    }
    Ok(Scene {
        id: h.id,
        points: Matrix::from_vec(h.n, dim, data)?,
        labels,
        class_count: h.classes,
        planted: if has_planted == Some(true) { Some(planted) } else { None },
    })
}

/// Scene files in a directory (`*.scene`, `*.scene.gz`), sorted by name.
pub fn scene_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".scene") || name.ends_with(".scene.gz") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let paths = scene_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .scene files found"),
        ));
    }
    paths.iter().map(|p| read_scene(p)).collect()
}

pub fn write_scene_dir(scenes: &[Scene], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scenes
        .iter()
        .map(|s| {
            let p = dir.join(format!("scene_{:05}.scene", s.id));
            write_scene(s, &p).map(|_| p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_collapses_modes() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            scenes: 2,
            ..Default::default()
        };
        let scenes = generate(&spec).unwrap();
        let cents = mode_centroids(&spec);
        for s in &scenes {
            for i in 0..s.len() {
                let g = s.labels[i] * spec.modes_per_class + s.planted.as_ref().unwrap()[i];
                assert_eq!(s.points.row(i), cents.row(g));
            }
        }
    }

    #[test]
    fn single_mode_planted_all_zero() {
        let spec = SynthSpec {
            modes_per_class: 1,
            scenes: 1,
            ..Default::default()
        };
        let s = &generate(&spec).unwrap()[0];
        assert!(s.planted.as_ref().unwrap().iter().all(|&p| p == 0));
    }

    #[test]
    fn centroids_respect_separation() {
        let spec = SynthSpec {
            class_count: 4,
            modes_per_class: 3,
            mode_separation: 5.0,
            ..Default::default()
        };
        let c = mode_centroids(&spec);
        for i in 0..c.rows() {
            for j in 0..i {
                let d: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() >= 5.0);
            }
        }
    }

    #[test]
    fn nearest_centroid_recovers_planted() {
        let spec = SynthSpec {
            class_count: 2,
            modes_per_class: 2,
            points_per_mode: 50,
            mode_separation: 10.0,
            noise_sigma: 0.5,
            scenes: 1,
            ..Default::default()
        };
        let s = &generate(&spec).unwrap()[0];
        let cents = mode_centroids(&spec);
        let planted = s.planted.as_ref().unwrap();
        let mut agree = 0;
        for i in 0..s.len() {
            let c = s.labels[i];
            let best = (0..2)
                .min_by(|&a, &b| {
                    let da: f64 = s.points.row(i).iter().zip(cents.row(c * 2 + a)).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = s.points.row(i).iter().zip(cents.row(c * 2 + b)).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            agree += usize::from(best == planted[i]);
        }
        assert!(agree as f64 >= 0.99 * s.len() as f64);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&SynthSpec { scenes: 2, ..Default::default() }).unwrap();
        let b = generate(&SynthSpec { scenes: 2, ..Default::default() }).unwrap();
        let c = generate(&SynthSpec { scenes: 2, seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate(&SynthSpec { scenes: 1, ..Default::default() }).unwrap();
        for name in ["a.scene", "a.scene.gz"] {
            let p = dir.path().join(name);
            write_scene(&scenes[0], &p).unwrap();
            assert_eq!(read_scene(&p).unwrap(), scenes[0]);
        }
        let mut no_planted = scenes[0].clone();
        no_planted.planted = None;
        let p = dir.path().join("b.scene");
        write_scene(&no_planted, &p).unwrap();
        assert_eq!(read_scene(&p).unwrap(), no_planted);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "SCENE v1 id=0 n=2 aux=5 classes=2\n1 2 3 4 5 6 7 0\n1 2 3 4 5 6 7 8 0\n";
        match parse_scene(text.as_bytes(), "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_scene("".as_bytes(), "t") {
            Err(Error::Parse { line: 1, message, .. }) => assert_eq!(message, "missing header"),
            other => panic!("{other:?}"),
        }
        let text = "SCENE v1 id=0 n=1 aux=0 classes=2\n1 2 3 2\n";
        assert!(matches!(parse_scene(text.as_bytes(), "t"), Err(Error::Parse { line: 2, .. })));
        let text = "SCENE v1 id=0 n=2 aux=0 classes=2\n1 2 3 1\n";
        assert!(matches!(parse_scene(text.as_bytes(), "t"), Err(Error::Parse { line: 3, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn scene_files_round_trip_bitwise(
                coords in prop::collection::vec(-1e6f64..1e6, 5 * 7),
                labels in prop::collection::vec(0usize..3, 7),
                planted in prop::option::of(prop::collection::vec(0usize..2, 7)),
                gz in any::<bool>(),
            ) {
                let scene = Scene {
                    id: 3,
                    points: Matrix::from_vec(7, 5, coords).unwrap(),
                    labels,
                    class_count: 3,
                    planted,
                };
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join(if gz { "s.scene.gz" } else { "s.scene" });
                write_scene(&scene, &path).unwrap();
                let back = read_scene(&path).unwrap();
                prop_assert_eq!(back, scene);
            }
        }
    }
}
