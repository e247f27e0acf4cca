//! Synthetic benchmarks, CSV ingestion, and seeded splits.
//!
//! Inputs are Gaussian-process draws with an RBF kernel; the response is
//! `sin(sum_j X_j(t))` (plus `cos` for the multivariate case) observed at the
//! output instants, with optional Gaussian noise scaled by `lambda`. Output
//! values come from the same joint GP draw evaluated at the output grid, so
//! no interpolation error enters the targets. Irregular grids are sorted
//! uniforms with pinned endpoints. Cases 1, 2, and 4-8 observe inputs and
//! outputs on one shared ("aligned") grid; case 3 draws a per-sample input
//! grid of varying resolution against a fixed output grid.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FameError, Result};
use crate::funcpath::FunctionSample;

/// Observation-count policy for the input grids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointsSpec {
    /// One shared grid with this many points.
    Fixed(usize),
    /// Per-sample grids, each with a count drawn from these choices.
    Choices(Vec<usize>),
}

/// Generator settings for the synthetic cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    /// Case id 1..=8.
    pub case: usize,
    pub n_samples: usize,
    /// Input channel count d.
    pub d: usize,
    /// Output channel count m.
    pub m: usize,
    /// Per-channel RBF kernel widths (cycled when shorter than d).
    pub sigmas: Vec<f64>,
    /// Noise level lambda (noise is lambda * eps, eps ~ N(0, 1)).
    pub lambda: f64,
    pub in_points: PointsSpec,
    pub out_points: usize,
    pub seed: u64,
}

impl GenSpec {
    /// Paper defaults for one of the eight cases. `n_samples` 0 means the
    /// default 200.
    pub fn for_case(case: usize, n_samples: usize, seed: u64) -> Result<GenSpec> {
        let n = if n_samples == 0 { 200 } else { n_samples };
        let base = GenSpec {
            case,
            n_samples: n,
            d: 3,
            m: 1,
            sigmas: vec![0.3],
            lambda: 0.0,
            in_points: PointsSpec::Fixed(20),
            out_points: 20,
            seed,
        };
        let spec = match case {
            1 => base,
            2 => GenSpec { in_points: PointsSpec::Fixed(50), out_points: 50, ..base },
            3 => GenSpec { in_points: PointsSpec::Choices(vec![10, 20, 50]), ..base },
            4 => GenSpec { sigmas: vec![0.2, 0.3, 0.5], ..base },
            5 => GenSpec { lambda: 0.1, ..base },
            6 => GenSpec { m: 2, ..base },
            7 => GenSpec { d: 5, ..base },
            8 => GenSpec { d: 10, sigmas: vec![0.2, 0.3, 0.5], ..base },
            other => return Err(FameError::UnknownCase(other)),
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.case) {
            return Err(FameError::UnknownCase(self.case));
        }
        if self.n_samples == 0 || self.d == 0 || self.m == 0 || self.out_points < 2 {
            return Err(FameError::Config("generator counts must be positive".into()));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(FameError::Config("kernel widths must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(FameError::Config("noise level must be >= 0".into()));
        }
        match &self.in_points {
            PointsSpec::Fixed(n) if *n < 2 => {
                return Err(FameError::Config("input grids need >= 2 points".into()))
            }
            PointsSpec::Choices(c) if c.is_empty() || c.iter().any(|n| *n < 2) => {
                return Err(FameError::Config("input grid choices need >= 2 points".into()))
            }
            _ => {}
        }
        Ok(())
    }

    fn sigma_for(&self, channel: usize) -> f64 {
        self.sigmas[channel % self.sigmas.len()]
    }
}

/// One regression observation: d input functions, m output functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub inputs: Vec<FunctionSample>,
    pub outputs: Vec<FunctionSample>,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Generated(GenSpec),
    File(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Input channel count (0 for an empty dataset).
    pub fn d(&self) -> usize {
        self.samples.first().map_or(0, |s| s.inputs.len())
    }

    pub fn m(&self) -> usize {
        self.samples.first().map_or(0, |s| s.outputs.len())
    }
}

/// Zero-mean GP values with RBF kernel `exp(-(t-t')^2 / (2 sigma^2))` at the
/// given points, via Cholesky with escalating diagonal jitter.
pub fn gp_values(sigma: f64, points: &[f64], rng: &mut impl RngCore) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(FameError::Config(format!("kernel width must be > 0, got {sigma}")));
    }
    let n = points.len();
    let xi: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut jitter = 1e-8;
    loop {
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d = points[i] - points[j];
            (-d * d / (2.0 * sigma * sigma)).exp() + if i == j { jitter } else { 0.0 }
        });
        if let Some(chol) = k.cholesky() {
            let l = chol.l();
            let mut out = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l[(i, j)] * xi[j];
                }
                out[i] = acc;
            }
            return Ok(out);
        }
        jitter *= 10.0;
        if jitter > 1e-4 {
            return Err(FameError::Singular(
                "GP kernel matrix not positive definite even with jitter 1e-4".into(),
            ));
        }
    }
}

/// Draw one observed function from a GP at the given (sorted) instants.
pub fn sample_gp(sigma: f64, grid: &[f64], rng: &mut impl RngCore) -> Result<FunctionSample> {
    let values = gp_values(sigma, grid, rng)?;
    FunctionSample::new(grid.to_vec(), values, 1.0)
}

/// Sorted uniforms on [0, 1] with pinned endpoints.
fn irregular_grid(n: usize, rng: &mut impl RngCore) -> Vec<f64> {
    loop {
        let mut pts: Vec<f64> = (0..n - 2).map(|_| rng.gen::<f64>()).collect();
        pts.push(0.0);
        pts.push(1.0);
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        if pts.len() == n {
            return pts;
        }
    }
}

fn union_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = a.iter().chain(b).copied().collect();
    u.sort_by(|x, y| x.partial_cmp(y).unwrap());
    u.dedup();
    u
}

fn positions(union: &[f64], pts: &[f64]) -> Vec<usize> {
    pts.iter()
        .map(|t| union.binary_search_by(|x| x.partial_cmp(t).unwrap()).expect("subset"))
        .collect()
}

/// Response at one instant given the channel sum. Channel 0 is `sin`, and the
/// two-output case adds `cos`.
fn response(sum: f64, out_channel: usize) -> f64 {
    if out_channel == 0 {
        sum.sin()
    } else {
        sum.cos()
    }
}

/// Generate a synthetic dataset for the configured case.
pub fn make_case(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    // Stream 0: shared grids. Streams 1+i: per-sample draws.
    let mut grid_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    grid_rng.set_stream(0);
    let out_grid = irregular_grid(spec.out_points, &mut grid_rng);
    let shared_in: Option<Vec<f64>> = match &spec.in_points {
        // Aligned cases observe inputs on the output grid itself.
        PointsSpec::Fixed(n) => {
            if *n == spec.out_points {
                Some(out_grid.clone())
            } else {
                Some(irregular_grid(*n, &mut grid_rng))
            }
        }
        PointsSpec::Choices(_) => None,
    };

    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + i as u64);
        let in_grid: Vec<f64> = match (&shared_in, &spec.in_points) {
            (Some(g), _) => g.clone(),
            (None, PointsSpec::Choices(choices)) => {
                let n = choices[rng.gen_range(0..choices.len())];
                irregular_grid(n, &mut rng)
            }
            _ => unreachable!(),
        };
        let union = union_sorted(&in_grid, &out_grid);
        let in_pos = positions(&union, &in_grid);
        let out_pos = positions(&union, &out_grid);

        let mut inputs = Vec::with_capacity(spec.d);
        let mut out_sums = vec![0.0; out_grid.len()];
        for j in 0..spec.d {
            let values = gp_values(spec.sigma_for(j), &union, &mut rng)?;
            for (acc, &p) in out_sums.iter_mut().zip(&out_pos) {
                *acc += values[p];
            }
            inputs.push(FunctionSample::new(
                in_grid.clone(),
                in_pos.iter().map(|&p| values[p]).collect(),
                1.0,
            )?);
        }
        let mut outputs = Vec::with_capacity(spec.m);
        for z in 0..spec.m {
            let values: Vec<f64> = out_sums
                .iter()
                .map(|&s| {
                    let eps: f64 = rng.sample(StandardNormal);
                    response(s, z) + spec.lambda * eps
                })
                .collect();
            outputs.push(FunctionSample::new(out_grid.clone(), values, 1.0)?);
        }
        samples.push(SamplePair { inputs, outputs });
    }
    Ok(Dataset { samples, provenance: Provenance::Generated(spec.clone()) })
}

const CSV_HEADER: [&str; 5] = ["sample_id", "role", "channel", "t", "value"];

/// Write a dataset in the interchange CSV format
/// (`sample_id,role,channel,t,value`; times un-normalized by each function's
/// horizon).
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for (i, s) in ds.samples.iter().enumerate() {
        for (role, group) in [("in", &s.inputs), ("out", &s.outputs)] {
            for (ch, f) in group.iter().enumerate() {
                for (t, v) in f.times.iter().zip(&f.values) {
                    w.write_record([
                        i.to_string(),
                        role.to_string(),
                        ch.to_string(),
                        format!("{t}"),
                        format!("{v}"),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load the interchange CSV. Each function's horizon is inferred as the
/// maximum observed `t` of its (role, channel) across the whole file.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let hdr = r.headers()?;
        if !hdr.is_empty() && hdr.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(FameError::Ingestion {
                row: 1,
                msg: format!("expected header {CSV_HEADER:?}, got {hdr:?}"),
            });
        }
    }
    type Key = (String, bool, usize); // (sample, is_output, channel)
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<Key, Vec<(f64, f64)>> = HashMap::new();
    let mut horizons: HashMap<(bool, usize), f64> = HashMap::new();
    for (idx, rec) in r.records().enumerate() {
        let row = idx + 2; // 1-based, after header
        let rec = rec?;
        if rec.len() != 5 {
            return Err(FameError::Ingestion { row, msg: format!("expected 5 columns, got {}", rec.len()) });
        }
        let sample = rec[0].to_string();
        let is_output = match &rec[1] {
            "in" => false,
            "out" => true,
            other => {
                return Err(FameError::Ingestion { row, msg: format!("role must be in|out, got '{other}'") })
            }
        };
        let channel: usize = rec[2]
            .parse()
            .map_err(|_| FameError::Ingestion { row, msg: format!("bad channel '{}'", &rec[2]) })?;
        let t: f64 = rec[3]
            .parse()
            .map_err(|_| FameError::Ingestion { row, msg: format!("non-numeric t '{}'", &rec[3]) })?;
        let value: f64 = rec[4]
            .parse()
            .map_err(|_| FameError::Ingestion { row, msg: format!("non-numeric value '{}'", &rec[4]) })?;
        if !t.is_finite() || !value.is_finite() {
            return Err(FameError::Ingestion { row, msg: "non-finite t/value".into() });
        }
        if !order.contains(&sample) {
            order.push(sample.clone());
        }
        let entry = groups.entry((sample, is_output, channel)).or_default();
        if entry.iter().any(|(t0, _)| *t0 == t) {
            return Err(FameError::Ingestion { row, msg: format!("duplicate observation at t = {t}") });
        }
        entry.push((t, value));
        let h = horizons.entry((is_output, channel)).or_insert(f64::NEG_INFINITY);
        *h = h.max(t);
    }
    if order.is_empty() {
        return Ok(Dataset {
            samples: Vec::new(),
            provenance: Provenance::File(path.display().to_string()),
        });
    }
    let d = 1 + groups
        .keys()
        .filter(|(_, o, _)| !o)
        .map(|(_, _, c)| *c)
        .max()
        .ok_or_else(|| FameError::Ingestion { row: 0, msg: "no input rows".into() })?;
    let m = 1 + groups
        .keys()
        .filter(|(_, o, _)| *o)
        .map(|(_, _, c)| *c)
        .max()
        .ok_or_else(|| FameError::Ingestion { row: 0, msg: "no output rows".into() })?;

    let mut samples = Vec::with_capacity(order.len());
    for sid in &order {
        let mut build = |is_output: bool, count: usize| -> Result<Vec<FunctionSample>> {
            (0..count)
                .map(|ch| {
                    let mut obs = groups
                        .remove(&(sid.clone(), is_output, ch))
                        .ok_or_else(|| FameError::Ingestion {
                            row: 0,
                            msg: format!(
                                "sample '{sid}' missing {} channel {ch}",
                                if is_output { "out" } else { "in" }
                            ),
                        })?;
                    obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    let horizon = horizons[&(is_output, ch)].max(f64::MIN_POSITIVE);
                    FunctionSample::new(
                        obs.iter().map(|(t, _)| *t).collect(),
                        obs.iter().map(|(_, v)| *v).collect(),
                        horizon,
                    )
                })
                .collect()
        };
        samples.push(SamplePair { inputs: build(false, d)?, outputs: build(true, m)? });
    }
    Ok(Dataset { samples, provenance: Provenance::File(path.display().to_string()) })
}

/// Manifest describing a stored dataset: generator echo plus a content hash
/// of the CSV bytes.
#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub gen: Option<GenSpec>,
    pub n_samples: usize,
    pub d: usize,
    pub m: usize,
    pub content_sha256: String,
}

pub fn write_manifest(ds: &Dataset, csv_path: &Path, manifest_path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(csv_path)?.read_to_end(&mut bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        gen: match &ds.provenance {
            Provenance::Generated(g) => Some(g.clone()),
            Provenance::File(_) => None,
        },
        n_samples: ds.len(),
        d: ds.d(),
        m: ds.m(),
        content_sha256: hex,
    };
    let mut f = std::fs::File::create(manifest_path)?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Seeded shuffle split into (train, test). `ratio` is the train fraction.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 2 {
        return Err(FameError::Split);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FameError::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = ((ds.len() as f64 * ratio).round() as usize).clamp(1, ds.len() - 1);
    let pick = |ids: &[usize]| Dataset {
        samples: ids.iter().map(|&i| ds.samples[i].clone()).collect(),
        provenance: ds.provenance.clone(),
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}
