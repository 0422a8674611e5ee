//! Synthetic two-domain datasets and the CSV dataset format.
//!
//! CSV schema: header `feature_0,…,feature_{d-1},label,domain`, one sample per
//! row. `label` is a class id or `-1` for unlabeled rows; `domain` is `source`
//! or `target`. A file holds a single domain and is either fully labeled or
//! fully unlabeled. Floats are written with 17 significant digits.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    /// Ground truth; `None` for unlabeled data.
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, domain: Domain) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::NoSamples);
        }
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "labels per row",
                    left: l.len(),
                    right: features.nrows(),
                });
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("non-finite feature".into()));
        }
        Ok(Self {
            features,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::Unlabeled)
    }

    /// `max label + 1`, or `None` when unlabeled.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1)
    }

    /// A copy with the labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn rows(&self, idx: &[usize]) -> Matrix {
        self.features.select(Axis(0), idx)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header: Vec<String> = (0..self.dims()).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        header.push("domain".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        let domain = self.domain.to_string();
        for (i, row) in self.features.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(match &self.labels {
                Some(l) => l[i].to_string(),
                None => "-1".into(),
            });
            rec.push(domain.clone());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let width = header.len();
        if width < 3 || &header[width - 2] != "label" || &header[width - 1] != "domain" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "header must be feature_0..feature_{d-1},label,domain".into(),
            });
        }
        let d = width - 2;
        let mut values = Vec::new();
        let mut labels: Vec<i64> = Vec::new();
        let mut domain: Option<Domain> = None;
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            for field in rec.iter().take(d) {
                let v: f64 = field.parse().map_err(|e| err(format!("bad feature `{field}`: {e}")))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite feature `{field}`")));
                }
                values.push(v);
            }
            let label: i64 = rec[d].parse().map_err(|_| err(format!("non-integer label `{}`", &rec[d])))?;
            if label < -1 {
                return Err(err(format!("invalid label {label}")));
            }
            let dom: Domain = rec[d + 1].parse().map_err(err)?;
            match domain {
                None => domain = Some(dom),
                Some(prev) if prev != dom => return Err(err("mixed domains in one file".into())),
                _ => {}
            }
            if let Some(&first) = labels.first() {
                if (first < 0) != (label < 0) {
                    return Err(err("mixed labeled and unlabeled rows".into()));
                }
            }
            labels.push(label);
        }
        let n = labels.len();
        let domain = domain.ok_or(Error::NoSamples)?;
        let labels = if labels[0] < 0 {
            None
        } else {
            Some(labels.into_iter().map(|l| l as usize).collect())
        };
        let features = Array2::from_shape_vec((n, d), values).expect("widths checked by csv reader");
        Self::new(features, labels, domain)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub name: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub source: Dataset,
    pub target: Dataset,
    pub meta: GeneratorMeta,
}

/// Transformation applied to the target domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Shift {
    /// Radians, in the plane of the first two features.
    pub rotation: f64,
    /// Offset along the all-ones diagonal.
    pub translation: f64,
    /// Scale applied to the class means.
    pub scale: f64,
    /// Per-coordinate standard deviation of the samples (both domains).
    pub noise: f64,
}

impl Default for Shift {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            translation: 0.0,
            scale: 1.0,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    /// Distance of the class means from the origin in the first plane.
    pub radius: f64,
    pub shift: Shift,
}

const SOURCE_STREAM: u64 = 11;
const TARGET_STREAM: u64 = 12;
const LAYOUT_STREAM: u64 = 13;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn rotate_plane(m: &mut Matrix, angle: f64, center: (f64, f64)) {
    let (s, c) = angle.sin_cos();
    for mut row in m.rows_mut() {
        let (x, y) = (row[0] - center.0, row[1] - center.1);
        row[0] = c * x - s * y + center.0;
        row[1] = s * x + c * y + center.1;
    }
}

fn noisy(rng: &mut ChaCha8Rng, means: ArrayView2<f64>, per_class: usize, sigma: f64) -> Result<(Matrix, Vec<usize>)> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let (m, d) = means.dim();
    let mut x = Array2::zeros((m * per_class, d));
    let mut y = Vec::with_capacity(m * per_class);
    for c in 0..m {
        for k in 0..per_class {
            let mut row = x.row_mut(c * per_class + k);
            for j in 0..d {
                row[j] = means[[c, j]] + normal.sample(rng);
            }
            y.push(c);
        }
    }
    Ok((x, y))
}

/// Gaussian blobs; the target applies rotation, scaling and translation to the class means.
pub fn gen_blobs(seed: u64, p: &BlobParams) -> Result<GeneratedPair> {
    let s = &p.shift;
    if p.classes < 2 || p.dims < 2 || p.per_class == 0 {
        return Err(Error::InvalidParam("blobs need >= 2 classes, >= 2 dims and >= 1 sample per class".into()));
    }
    if !(s.noise >= 0.0 && s.scale > 0.0 && p.radius > 0.0 && s.rotation.is_finite() && s.translation.is_finite()) {
        return Err(Error::InvalidParam(format!("invalid shift {s:?}")));
    }
    // Means evenly spaced on a circle in the first plane with a seeded phase;
    // remaining coordinates are seeded offsets.
    let mut layout = stream(seed, LAYOUT_STREAM);
    let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range").sample(&mut layout);
    let offset = Normal::new(0.0, 0.5 * p.radius).expect("positive sigma");
    let mut means = Array2::zeros((p.classes, p.dims));
    for c in 0..p.classes {
        let a = phase + 2.0 * PI * c as f64 / p.classes as f64;
        means[[c, 0]] = p.radius * a.cos();
        means[[c, 1]] = p.radius * a.sin();
        for j in 2..p.dims {
            means[[c, j]] = offset.sample(&mut layout);
        }
    }
    let mut shifted = &means * s.scale;
    rotate_plane(&mut shifted, s.rotation, (0.0, 0.0));
    shifted += s.translation / (p.dims as f64).sqrt();

    let (xs, ys) = noisy(&mut stream(seed, SOURCE_STREAM), means.view(), p.per_class, s.noise)?;
    let (xt, yt) = noisy(&mut stream(seed, TARGET_STREAM), shifted.view(), p.per_class, s.noise)?;
    Ok(GeneratedPair {
        source: Dataset::new(xs, Some(ys), Domain::Source)?,
        target: Dataset::new(xt, Some(yt), Domain::Target)?,
        meta: GeneratorMeta {
            name: "blobs".into(),
            seed,
            params: serde_json::to_value(p)?,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoonParams {
    pub per_class: usize,
    /// Radians, about the centroid of the two moons.
    pub rotation: f64,
    pub noise: f64,
}

/// Centroid of the noiseless two-moons layout.
pub const MOONS_CENTER: (f64, f64) = (0.5, 0.25);

fn moons(rng: &mut ChaCha8Rng, per_class: usize, noise: f64) -> Result<(Matrix, Vec<usize>)> {
    let t = Uniform::new_inclusive(0.0, PI).expect("valid range");
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut x = Array2::zeros((2 * per_class, 2));
    let mut y = Vec::with_capacity(2 * per_class);
    for c in 0..2 {
        for k in 0..per_class {
            let a: f64 = t.sample(rng);
            let (px, py) = if c == 0 {
                (a.cos(), a.sin())
            } else {
                (1.0 - a.cos(), 0.5 - a.sin())
            };
            let i = c * per_class + k;
            x[[i, 0]] = px + normal.sample(rng);
            x[[i, 1]] = py + normal.sample(rng);
            y.push(c);
        }
    }
    Ok((x, y))
}

/// Two interleaved half circles; the target is a fresh sample rotated about the centroid.
pub fn gen_moons(seed: u64, p: &MoonParams) -> Result<GeneratedPair> {
    if p.per_class == 0 || !(p.noise >= 0.0) || !p.rotation.is_finite() {
        return Err(Error::InvalidParam(format!("invalid moon parameters {p:?}")));
    }
    let (xs, ys) = moons(&mut stream(seed, SOURCE_STREAM), p.per_class, p.noise)?;
    let (mut xt, yt) = moons(&mut stream(seed, TARGET_STREAM), p.per_class, p.noise)?;
    rotate_plane(&mut xt, p.rotation, MOONS_CENTER);
    Ok(GeneratedPair {
        source: Dataset::new(xs, Some(ys), Domain::Source)?,
        target: Dataset::new(xt, Some(yt), Domain::Target)?,
        meta: GeneratorMeta {
            name: "moons".into(),
            seed,
            params: serde_json::to_value(p)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn blob_params(shift: Shift) -> BlobParams {
        BlobParams {
            classes: 3,
            per_class: 20,
            dims: 4,
            radius: 3.0,
            shift,
        }
    }

    #[test]
    fn blobs_shape_and_balance() {
        let g = gen_blobs(1, &blob_params(Shift::default())).unwrap();
        assert_eq!(g.source.features.dim(), (60, 4));
        for c in 0..3 {
            assert_eq!(g.target.labels().unwrap().iter().filter(|&&y| y == c).count(), 20);
        }
        assert_eq!(g.source.num_classes(), Some(3));
        assert!(gen_blobs(1, &BlobParams { classes: 1, ..blob_params(Shift::default()) }).is_err());
        assert!(gen_blobs(1, &BlobParams { dims: 1, ..blob_params(Shift::default()) }).is_err());
    }

    #[test]
    fn half_turn_swaps_antipodal_means() {
        let p = BlobParams {
            classes: 2,
            per_class: 200,
            dims: 2,
            radius: 3.0,
            shift: Shift {
                rotation: PI,
                noise: 0.1,
                ..Shift::default()
            },
        };
        let g = gen_blobs(5, &p).unwrap();
        let mean = |d: &Dataset, c: usize| {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels.as_ref().unwrap()[i] == c).collect();
            d.rows(&idx).mean_axis(Axis(0)).unwrap()
        };
        for c in 0..2 {
            let diff = &mean(&g.target, c) - &mean(&g.source, 1 - c);
            assert!(diff.iter().all(|v| v.abs() < 0.05), "{diff}");
        }
    }

    #[test]
    fn moons_rotation_zero_matches_layout() {
        let g = gen_moons(3, &MoonParams { per_class: 50, rotation: 0.0, noise: 0.0 }).unwrap();
        for (row, &y) in g.target.features.rows().into_iter().zip(g.target.labels().unwrap()) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = gen_moons(9, &MoonParams { per_class: 30, rotation: 0.5, noise: 0.05 }).unwrap();
        let path = dir.path().join("t.csv");
        g.target.save_csv(&path).unwrap();
        assert_eq!(Dataset::load_csv(&path).unwrap(), g.target);

        let unl = g.source.without_labels();
        unl.save_csv(&path).unwrap();
        assert_eq!(Dataset::load_csv(&path).unwrap(), unl);
    }

    #[test]
    fn csv_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        gen_blobs(4, &blob_params(Shift::default())).unwrap().source.save_csv(&a).unwrap();
        gen_blobs(4, &blob_params(Shift::default())).unwrap().source.save_csv(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("x.csv");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "feature_0,label,domain\n");
        assert!(matches!(Dataset::load_csv(&p), Err(Error::NoSamples)));

        let p = write(dir.path(), "feature_0,label,domain\n1.0,0,source\n2.0,1.5,source\n");
        match Dataset::load_csv(&p) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("non-integer label"));
            }
            other => panic!("{other:?}"),
        }

        let p = write(dir.path(), "feature_0,feature_1,label,domain\n1.0,2.0,0,source\n1.0,0,source\n");
        assert!(matches!(Dataset::load_csv(&p), Err(Error::Parse { line: 3, .. })));

        let p = write(dir.path(), "feature_0,label,domain\nabc,0,source\n");
        assert!(matches!(Dataset::load_csv(&p), Err(Error::Parse { line: 2, .. })));

        let p = write(dir.path(), "feature_0,label,domain\n1.0,-1,target\n2.0,-1,target\n");
        let d = Dataset::load_csv(&p).unwrap();
        assert_eq!(d.labels, None);
        assert_eq!(d.domain, Domain::Target);

        let p = write(dir.path(), "feature_0,label,domain\n1.0,-1,target\n2.0,0,target\n");
        assert!(Dataset::load_csv(&p).is_err());
    }
}
