//! Geo-tagged place datasets: synthetic generation and CSV persistence.
//!
//! A dataset directory holds one CSV per split (`database.csv`,
//! `queries_train.csv`, `queries_val.csv`, `queries_test.csv`) with header
//! `image_id,place_id,x,y,f0..f{D-1}`, plus a `meta.json` sidecar. Floats
//! are written with 17 significant digits so files round-trip exactly.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum distance between synthetic place centers, in meters.
pub const MIN_PLACE_SEPARATION_M: f64 = 60.0;
/// Maximum offset of a synthetic view from its place center, in meters.
pub const VIEW_JITTER_M: f64 = 5.0;
/// Place id used when the ground-truth place is unknown.
pub const UNKNOWN_PLACE: i64 = -1;

const PLACEMENT_ATTEMPTS: usize = 10_000;

pub const SPLIT_FILES: [&str; 4] = [
    "database.csv",
    "queries_train.csv",
    "queries_val.csv",
    "queries_test.csv",
];
pub const META_FILE: &str = "meta.json";

/// One geo-tagged image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub image_id: u64,
    pub place_id: i64,
    pub x: f64,
    pub y: f64,
    pub features: Vec<f64>,
}

impl Descriptor {
    /// Planar Euclidean distance in meters.
    pub fn geo_distance(&self, other: &Descriptor) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Parameters of [`synth_generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_places: usize,
    pub views_per_place: usize,
    pub queries_per_place: usize,
    pub d_in: usize,
    pub view_noise_sigma: f64,
    pub map_extent_m: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_places: 100,
            views_per_place: 10,
            queries_per_place: 3,
            d_in: 64,
            view_noise_sigma: 0.1,
            map_extent_m: 2000.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d_in: usize,
    /// Generator settings when the dataset is synthetic.
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceDataset {
    pub database: Vec<Descriptor>,
    pub queries_train: Vec<Descriptor>,
    pub queries_val: Vec<Descriptor>,
    pub queries_test: Vec<Descriptor>,
    pub meta: DatasetMeta,
}

/// Query split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl PlaceDataset {
    pub fn queries(&self, split: Split) -> &[Descriptor] {
        match split {
            Split::Train => &self.queries_train,
            Split::Val => &self.queries_val,
            Split::Test => &self.queries_test,
        }
    }

    fn splits(&self) -> [&[Descriptor]; 4] {
        [
            &self.database,
            &self.queries_train,
            &self.queries_val,
            &self.queries_test,
        ]
    }

    /// Checks id uniqueness, feature dimensions, finiteness and that every
    /// query with a known place has at least one database view of it.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in self.splits() {
            for d in split {
                if !seen.insert(d.image_id) {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate image_id {}",
                        d.image_id
                    )));
                }
                if d.features.len() != self.meta.d_in {
                    return Err(Error::DimensionMismatch {
                        expected: self.meta.d_in,
                        actual: d.features.len(),
                    });
                }
                if !(d.x.is_finite() && d.y.is_finite())
                    || d.features.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::NonFinite(format!("image {}", d.image_id)));
                }
            }
        }
        let db_places: HashSet<i64> = self.database.iter().map(|d| d.place_id).collect();
        for q in self.splits()[1..].iter().flat_map(|s| s.iter()) {
            if q.place_id != UNKNOWN_PLACE && !db_places.contains(&q.place_id) {
                return Err(Error::InvalidArgument(format!(
                    "query {} has place {} with no database view",
                    q.image_id, q.place_id
                )));
            }
        }
        Ok(())
    }
}

/// Generates a synthetic place dataset.
///
/// Place centers are drawn uniformly in `[0, extent]²` with a minimum
/// pairwise separation of 60 m. Each place gets a latent descriptor drawn
/// uniformly on the unit sphere; every view and query is that latent plus
/// isotropic Gaussian noise, positioned within 5 m of the center. Queries
/// are split 70/15/15 by place and never enter the database.
pub fn synth_generate(cfg: &SynthConfig) -> Result<PlaceDataset> {
    if cfg.n_places < 2 {
        return Err(Error::InvalidArgument("n_places must be at least 2".into()));
    }
    if cfg.views_per_place < 1 {
        return Err(Error::InvalidArgument(
            "views_per_place must be at least 1".into(),
        ));
    }
    if cfg.d_in < 2 {
        return Err(Error::InvalidArgument("d_in must be at least 2".into()));
    }
    if !(cfg.view_noise_sigma >= 0.0 && cfg.view_noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(
            "view_noise_sigma must be a finite non-negative number".into(),
        ));
    }
    if !(cfg.map_extent_m > 0.0 && cfg.map_extent_m.is_finite()) {
        return Err(Error::InvalidArgument(
            "map_extent_m must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(cfg, &mut rng)?;
    let latents: Vec<Vec<f64>> = (0..cfg.n_places)
        .map(|_| unit_gaussian_direction(cfg.d_in, &mut rng))
        .collect();

    let mut next_id = 0u64;
    let mut view = |place: usize, rng: &mut ChaCha8Rng| {
        let features = latents[place]
            .iter()
            .map(|v| v + cfg.view_noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let r = VIEW_JITTER_M * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        let d = Descriptor {
            image_id: next_id,
            place_id: place as i64,
            x: centers[place][0] + r * theta.cos(),
            y: centers[place][1] + r * theta.sin(),
            features,
        };
        next_id += 1;
        d
    };

    let mut database = Vec::with_capacity(cfg.n_places * cfg.views_per_place);
    for place in 0..cfg.n_places {
        for _ in 0..cfg.views_per_place {
            database.push(view(place, &mut rng));
        }
    }
    let mut queries: Vec<Vec<Descriptor>> = Vec::with_capacity(cfg.n_places);
    for place in 0..cfg.n_places {
        queries.push(
            (0..cfg.queries_per_place)
                .map(|_| view(place, &mut rng))
                .collect(),
        );
    }

    let mut order: Vec<usize> = (0..cfg.n_places).collect();
    shuffle(&mut order, &mut rng);
    let n_train = (0.70 * cfg.n_places as f64).round() as usize;
    let n_val = (0.15 * cfg.n_places as f64).round() as usize;
    let split_of = |rank: usize| {
        if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let mut assignment = vec![Split::Test; cfg.n_places];
    for (rank, &place) in order.iter().enumerate() {
        assignment[place] = split_of(rank);
    }

    let mut ds = PlaceDataset {
        database,
        queries_train: Vec::new(),
        queries_val: Vec::new(),
        queries_test: Vec::new(),
        meta: DatasetMeta {
            d_in: cfg.d_in,
            synth: Some(cfg.clone()),
        },
    };
    // Queries stay sorted by image id within each split.
    for (place, qs) in queries.into_iter().enumerate() {
        let target = match assignment[place] {
            Split::Train => &mut ds.queries_train,
            Split::Val => &mut ds.queries_val,
            Split::Test => &mut ds.queries_test,
        };
        target.extend(qs);
    }
    Ok(ds)
}

fn place_centers(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let min_sq = MIN_PLACE_SEPARATION_M * MIN_PLACE_SEPARATION_M;
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(cfg.n_places);
    for _ in 0..cfg.n_places {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = [
                cfg.map_extent_m * rng.random::<f64>(),
                cfg.map_extent_m * rng.random::<f64>(),
            ];
            let clear = centers.iter().all(|o| {
                let (dx, dy) = (o[0] - c[0], o[1] - c[1]);
                dx * dx + dy * dy >= min_sq
            });
            if clear {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidArgument(format!(
                "could not place {} centers {MIN_PLACE_SEPARATION_M} m apart in a {} m square; \
                 increase map_extent_m",
                cfg.n_places, cfg.map_extent_m
            )));
        }
    }
    Ok(centers)
}

/// Uniform direction on the unit sphere (normalized standard Gaussian).
fn unit_gaussian_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Fisher-Yates over the crate's seeded generator.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Formats a float with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset into `dir`, creating it if needed.
pub fn save_dataset(dataset: &PlaceDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (name, split) in SPLIT_FILES.iter().zip(dataset.splits()) {
        write_descriptors(&dir.join(name), split, dataset.meta.d_in)?;
    }
    let meta = serde_json::to_string_pretty(&dataset.meta)? + "\n";
    let path = dir.join(META_FILE);
    fs::write(&path, meta).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads and validates a dataset directory written by [`save_dataset`].
/// The `meta.json` sidecar is optional; without it the feature dimension is
/// taken from the database header.
pub fn load_dataset(dir: &Path) -> Result<PlaceDataset> {
    let meta_path = dir.join(META_FILE);
    let meta: Option<DatasetMeta> = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };

    let mut seen: HashMap<u64, PathBuf> = HashMap::new();
    let mut d_in = meta.as_ref().map(|m| m.d_in);
    let mut splits = Vec::with_capacity(4);
    for name in SPLIT_FILES {
        let path = dir.join(name);
        let (descs, lines) = read_descriptors_with_lines(&path, d_in)?;
        if let Some(first) = descs.first() {
            d_in.get_or_insert(first.features.len());
        }
        for (d, line) in descs.iter().zip(&lines) {
            if let Some(prev) = seen.insert(d.image_id, path.clone()) {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: *line,
                    message: format!(
                        "duplicate image_id {} (first seen in {})",
                        d.image_id,
                        prev.display()
                    ),
                });
            }
        }
        splits.push(descs);
    }
    let d_in = d_in.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "{}: empty dataset without meta.json",
            dir.display()
        ))
    })?;
    let mut it = splits.into_iter();
    let ds = PlaceDataset {
        database: it.next().unwrap_or_default(),
        queries_train: it.next().unwrap_or_default(),
        queries_val: it.next().unwrap_or_default(),
        queries_test: it.next().unwrap_or_default(),
        meta: meta.unwrap_or(DatasetMeta { d_in, synth: None }),
    };
    ds.validate()?;
    Ok(ds)
}

fn header(d_in: usize) -> Vec<String> {
    ["image_id", "place_id", "x", "y"]
        .into_iter()
        .map(String::from)
        .chain((0..d_in).map(|i| format!("f{i}")))
        .collect()
}

pub fn write_descriptors(path: &Path, descs: &[Descriptor], d_in: usize) -> Result<()> {
    let io = |e: csv::Error| Error::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header(d_in)).map_err(io)?;
    for d in descs {
        let mut row = vec![
            d.image_id.to_string(),
            d.place_id.to_string(),
            format_f64(d.x),
            format_f64(d.y),
        ];
        row.extend(d.features.iter().map(|v| format_f64(*v)));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads one descriptor CSV.
pub fn read_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    read_descriptors_with_lines(path, None).map(|(d, _)| d)
}

fn read_descriptors_with_lines(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<(Vec<Descriptor>, Vec<usize>)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e.into()))?;
    let head = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let d_in = head.len().saturating_sub(4);
    if head.iter().collect::<Vec<_>>() != header(d_in) {
        return Err(parse_err(
            1,
            "header must be image_id,place_id,x,y,f0..f{D-1}".into(),
        ));
    }
    if let Some(expected) = expected_dim {
        if expected != d_in {
            return Err(parse_err(
                1,
                format!("feature dimension {d_in} does not match expected {expected}"),
            ));
        }
    }

    let mut out = Vec::new();
    let mut lines = Vec::new();
    let mut ids = HashSet::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != head.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", head.len(), rec.len()),
            ));
        }
        let float = |i: usize| -> Result<f64> {
            let v: f64 = rec[i].trim().parse().map_err(|_| {
                parse_err(line, format!("bad number {:?} in column {}", &rec[i], i))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("non-finite value in column {i}")))
            }
        };
        let image_id: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad image_id {:?}", &rec[0])))?;
        let place_id: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad place_id {:?}", &rec[1])))?;
        if !ids.insert(image_id) {
            return Err(parse_err(line, format!("duplicate image_id {image_id}")));
        }
        let features = (4..rec.len()).map(float).collect::<Result<Vec<_>>>()?;
        out.push(Descriptor {
            image_id,
            place_id,
            x: float(2)?,
            y: float(3)?,
            features,
        });
        lines.push(line);
    }
    Ok((out, lines))
}
