//! Temporal instances, labeled datasets, the on-disk CSV layout and a
//! synthetic generator with hidden point-level ground truth.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! <root>/manifest.json
//! <root>/labels.csv              id,label
//! <root>/instances/<id>.csv      t,f0,f1,...,f{D-1}
//! <root>/point_labels/<id>.csv   t,label          (optional)
//! ```

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A D×T multivariate series. Values are stored variable-major so that each
/// variable's trace is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalInstance {
    id: String,
    d_vars: usize,
    length: usize,
    values: Vec<f64>,
}

impl TemporalInstance {
    /// `values[v * length + t]` is variable `v` at time `t`.
    pub fn new(id: impl Into<String>, d_vars: usize, length: usize, values: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if d_vars == 0 || length == 0 {
            return Err(Error::Invalid(format!(
                "instance {id}: shape {d_vars}x{length} must be at least 1x1"
            )));
        }
        if values.len() != d_vars * length {
            return Err(Error::DimensionMismatch {
                context: "instance values",
                expected: d_vars * length,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "instance {id}: non-finite value at variable {}, t={}",
                pos / length,
                pos % length
            )));
        }
        Ok(Self {
            id,
            d_vars,
            length,
            values,
        })
    }

    /// Builds an instance from one row per variable.
    pub fn from_variables(id: impl Into<String>, variables: &[Vec<f64>]) -> Result<Self> {
        let d = variables.len();
        let t = variables.first().map_or(0, Vec::len);
        if let Some(bad) = variables.iter().find(|v| v.len() != t) {
            return Err(Error::DimensionMismatch {
                context: "instance variable length",
                expected: t,
                found: bad.len(),
            });
        }
        Self::new(id, d, t, variables.concat())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn d_vars(&self) -> usize {
        self.d_vars
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn variable(&self, v: usize) -> &[f64] {
        &self.values[v * self.length..(v + 1) * self.length]
    }

    pub fn get(&self, v: usize, t: usize) -> f64 {
        self.values[v * self.length + t]
    }

    /// Copy of `len` consecutive time points starting at `start`.
    pub fn window(&self, id: impl Into<String>, start: usize, len: usize) -> Result<Self> {
        if start + len > self.length {
            return Err(Error::Invalid(format!(
                "window {start}..{} exceeds length {}",
                start + len,
                self.length
            )));
        }
        let values = (0..self.d_vars)
            .flat_map(|v| self.variable(v)[start..start + len].iter().copied())
            .collect();
        Self::new(id, self.d_vars, len, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split tag {other:?}"))),
        }
    }
}

/// An instance with its weak label and, for evaluation only, point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub instance: TemporalInstance,
    pub label: bool,
    pub point_labels: Option<Vec<bool>>,
}

/// Per-variable z-normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Pooled mean/std per variable over every point of every instance.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let d = dataset.d_vars().ok_or(Error::EmptySplit("normalization"))?;
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for item in dataset.iter() {
            let inst = &item.instance;
            for v in 0..d {
                let trace = inst.variable(v);
                mean[v] += trace.iter().sum::<f64>();
                sq[v] += trace.iter().map(|x| x * x).sum::<f64>();
            }
            count += inst.length();
        }
        let n = count as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                // constant channels are left unscaled
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, instance: &TemporalInstance) -> Result<TemporalInstance> {
        if instance.d_vars() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "normalization",
                expected: self.mean.len(),
                found: instance.d_vars(),
            });
        }
        let t = instance.length();
        let values = instance
            .values()
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i / t]) / self.std[i / t])
            .collect();
        TemporalInstance::new(instance.id(), instance.d_vars(), t, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    split: Split,
    items: Vec<LabeledInstance>,
    normalization: Option<Normalization>,
}

impl Dataset {
    /// Validates and orders the instances by id.
    pub fn new(split: Split, mut items: Vec<LabeledInstance>) -> Result<Self> {
        let mut seen = HashSet::new();
        let d = items.first().map(|i| i.instance.d_vars());
        for item in &items {
            let inst = &item.instance;
            if !seen.insert(inst.id().to_owned()) {
                return Err(Error::Invalid(format!("duplicate instance id {}", inst.id())));
            }
            if Some(inst.d_vars()) != d {
                return Err(Error::DimensionMismatch {
                    context: "dataset variable count",
                    expected: d.unwrap_or(0),
                    found: inst.d_vars(),
                });
            }
            if let Some(points) = &item.point_labels {
                if points.len() != inst.length() {
                    return Err(Error::DimensionMismatch {
                        context: "point label length",
                        expected: inst.length(),
                        found: points.len(),
                    });
                }
                let implied = points.iter().any(|&p| p);
                if implied != item.label {
                    return Err(Error::Invalid(format!(
                        "instance {}: label {} disagrees with point labels (any anomalous point: {implied})",
                        inst.id(),
                        u8::from(item.label)
                    )));
                }
            }
        }
        items.sort_by(|a, b| a.instance.id().cmp(b.instance.id()));
        Ok(Self {
            split,
            items,
            normalization: None,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledInstance> {
        self.items.iter()
    }

    pub fn items(&self) -> &[LabeledInstance] {
        &self.items
    }

    pub fn d_vars(&self) -> Option<usize> {
        self.items.first().map(|i| i.instance.d_vars())
    }

    /// Common length if every instance has the same T.
    pub fn length(&self) -> Option<usize> {
        let t = self.items.first()?.instance.length();
        self.items.iter().all(|i| i.instance.length() == t).then_some(t)
    }

    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Statistics recorded in the manifest (not applied to the stored values).
    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn set_normalization(&mut self, stats: Option<Normalization>) {
        self.normalization = stats;
    }

    /// A copy with `stats` applied to every instance's values.
    pub fn normalized(&self, stats: &Normalization) -> Result<Self> {
        let items = self
            .items
            .iter()
            .map(|item| {
                Ok(LabeledInstance {
                    instance: stats.apply(&item.instance)?,
                    label: item.label,
                    point_labels: item.point_labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: self.split,
            items,
            normalization: self.normalization.clone(),
        })
    }

    /// Applies the stats stored in the manifest, if any.
    pub fn normalized_by_manifest(&self) -> Result<Self> {
        match &self.normalization {
            Some(stats) => self.normalized(stats),
            None => Ok(self.clone()),
        }
    }

    pub fn into_items(self) -> Vec<LabeledInstance> {
        self.items
    }
}

/// Cuts a stream into consecutive non-overlapping chunks; a trailing partial
/// chunk is dropped. Chunk ids are `<stream id>_<index>`.
pub fn split_stream(stream: &TemporalInstance, chunk_length: usize) -> Result<Vec<TemporalInstance>> {
    if chunk_length == 0 {
        return Err(Error::Invalid("chunk_length must be positive".into()));
    }
    (0..stream.length() / chunk_length)
        .map(|i| stream.window(format!("{}_{i}", stream.id()), i * chunk_length, chunk_length))
        .collect()
}

/// Splits a dataset into train/valid/test by integer ratio, stratified by
/// instance label. Split sizes follow the ratio by largest remainder.
pub fn stratified_split(dataset: &Dataset, ratio: [usize; 3], seed: u64) -> Result<[Dataset; 3]> {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratio must have a positive entry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = dataset.items.iter().cloned().partition(|i| i.label);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let sizes = apportion(dataset.len(), &ratio);
    let mut pos_sizes = apportion(pos.len(), &ratio);
    // keep each split's positives within its overall size
    for s in 0..3 {
        while pos_sizes[s] > sizes[s] {
            pos_sizes[s] -= 1;
            let other = (0..3).find(|&o| pos_sizes[o] < sizes[o]).expect("positives fit overall");
            pos_sizes[other] += 1;
        }
    }
    let mut pos = pos.into_iter();
    let mut neg = neg.into_iter();
    let splits = [Split::Train, Split::Valid, Split::Test];
    let mut out = Vec::with_capacity(3);
    for s in 0..3 {
        let mut items: Vec<_> = pos.by_ref().take(pos_sizes[s]).collect();
        items.extend(neg.by_ref().take(sizes[s] - pos_sizes[s]));
        out.push(Dataset::new(splits[s], items)?);
    }
    Ok(out.try_into().expect("three splits"))
}

fn apportion(n: usize, ratio: &[usize; 3]) -> [usize; 3] {
    let total: usize = ratio.iter().sum();
    let mut sizes = [0usize; 3];
    let mut rem = [0usize; 3];
    for i in 0..3 {
        sizes[i] = n * ratio[i] / total;
        rem[i] = n * ratio[i] % total;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratio[i] > 0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d_vars: Option<usize>,
    pub length: Option<usize>,
    pub split: Split,
    pub n_instances: usize,
    pub normalization: Option<Normalization>,
}

const MANIFEST: &str = "manifest.json";
const LABELS: &str = "labels.csv";
const INSTANCES: &str = "instances";
const POINT_LABELS: &str = "point_labels";

/// Writes `dataset` under `root` in the directory layout above.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let inst_dir = root.join(INSTANCES);
    fs::create_dir_all(&inst_dir).map_err(|e| Error::io(&inst_dir, e))?;
    let has_points = dataset.iter().any(|i| i.point_labels.is_some());
    let point_dir = root.join(POINT_LABELS);
    if has_points {
        fs::create_dir_all(&point_dir).map_err(|e| Error::io(&point_dir, e))?;
    }

    let labels_path = root.join(LABELS);
    let mut labels = csv_writer(&labels_path)?;
    write_record(&mut labels, &labels_path, ["id", "label"])?;
    for item in dataset.iter() {
        let inst = &item.instance;
        write_record(&mut labels, &labels_path, [inst.id(), if item.label { "1" } else { "0" }])?;

        let path = inst_dir.join(format!("{}.csv", inst.id()));
        let mut w = csv_writer(&path)?;
        let header = std::iter::once("t".to_string()).chain((0..inst.d_vars()).map(|v| format!("f{v}")));
        write_record(&mut w, &path, header)?;
        for t in 0..inst.length() {
            // `Display` for f64 is the shortest string that parses back exactly
            let row = std::iter::once(t.to_string()).chain((0..inst.d_vars()).map(|v| inst.get(v, t).to_string()));
            write_record(&mut w, &path, row)?;
        }
        flush(w, &path)?;

        if let Some(points) = &item.point_labels {
            let path = point_dir.join(format!("{}.csv", inst.id()));
            write_binary_series(&path, points)?;
        }
    }
    flush(labels, &labels_path)?;

    let manifest = Manifest {
        d_vars: dataset.d_vars(),
        length: dataset.length(),
        split: dataset.split(),
        n_instances: dataset.len(),
        normalization: dataset.normalization.clone(),
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory. Instances come back ordered by id.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST);
    let manifest: Option<Manifest> = match fs::read_to_string(&manifest_path) {
        Ok(text) => Some(
            serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, None, e.to_string()))?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    let split = match &manifest {
        Some(m) => m.split,
        None => root
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse().ok())
            .unwrap_or(Split::Train),
    };

    let labels_path = root.join(LABELS);
    if !labels_path.is_file() {
        return Err(Error::data(&labels_path, None, "labels file not found"));
    }
    let mut reader = csv_reader(&labels_path)?;
    expect_header(&mut reader, &labels_path, &["id", "label"])?;
    let point_dir = root.join(POINT_LABELS);
    let mut items = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::data(&labels_path, Some(row), e.to_string()))?;
        if record.len() != 2 {
            return Err(Error::data(&labels_path, Some(row), "expected 2 fields"));
        }
        let id = record[0].to_string();
        let label = parse_binary(&record[1]).ok_or_else(|| {
            Error::data(&labels_path, Some(row), format!("non-binary label {:?}", &record[1]))
        })?;
        let instance = read_instance(&root.join(INSTANCES).join(format!("{id}.csv")), &id)?;
        let point_path = point_dir.join(format!("{id}.csv"));
        let point_labels = if point_path.is_file() {
            Some(read_binary_series(&point_path)?)
        } else {
            None
        };
        if let Some(first) = items.first() {
            let first: &LabeledInstance = first;
            if first.instance.d_vars() != instance.d_vars() {
                return Err(Error::data(
                    root.join(INSTANCES).join(format!("{id}.csv")),
                    None,
                    format!(
                        "dimension mismatch: {} variables, expected {}",
                        instance.d_vars(),
                        first.instance.d_vars()
                    ),
                ));
            }
        }
        if let Some(points) = &point_labels {
            if points.iter().any(|&p| p) != label || points.len() != instance.length() {
                return Err(Error::data(
                    &point_path,
                    None,
                    format!("point labels inconsistent with instance label {}", u8::from(label)),
                ));
            }
        }
        items.push(LabeledInstance {
            instance,
            label,
            point_labels,
        });
    }

    let mut dataset = Dataset::new(split, items).map_err(|e| Error::data(root, None, e.to_string()))?;
    if let Some(m) = manifest {
        if let (Some(expected), Some(found)) = (m.d_vars, dataset.d_vars()) {
            if expected != found {
                return Err(Error::data(
                    &manifest_path,
                    None,
                    format!("manifest declares {expected} variables, instances have {found}"),
                ));
            }
        }
        dataset.normalization = m.normalization;
    }
    Ok(dataset)
}

fn read_instance(path: &Path, id: &str) -> Result<TemporalInstance> {
    if !path.is_file() {
        return Err(Error::data(path, None, "instance file not found"));
    }
    let mut reader = csv_reader(path)?;
    let header = reader
        .headers()
        .map_err(|e| Error::data(path, Some(1), e.to_string()))?
        .clone();
    if header.len() < 2 || &header[0] != "t" {
        return Err(Error::data(path, Some(1), "header must be t,f0,...,f{D-1}"));
    }
    let d = header.len() - 1;
    for (v, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{v}") {
            return Err(Error::data(path, Some(1), format!("unexpected column {name:?}, expected f{v}")));
        }
    }
    let mut columns = vec![Vec::new(); d];
    let mut last_t: Option<u64> = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::data(path, Some(row), e.to_string()))?;
        if record.len() != d + 1 {
            return Err(Error::data(
                path,
                Some(row),
                format!("expected {} fields, found {}", d + 1, record.len()),
            ));
        }
        let t: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::data(path, Some(row), format!("bad time index {:?}", &record[0])))?;
        let ok = match last_t {
            None => t == 0,
            Some(prev) => t > prev,
        };
        if !ok {
            return Err(Error::data(path, Some(row), "t must start at 0 and strictly increase"));
        }
        last_t = Some(t);
        for (v, field) in record.iter().skip(1).enumerate() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::data(path, Some(row), format!("bad value {field:?}")))?;
            if !x.is_finite() {
                return Err(Error::data(path, Some(row), format!("non-finite value {field:?} in f{v}")));
            }
            columns[v].push(x);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::data(path, None, "instance has no rows"));
    }
    TemporalInstance::from_variables(id, &columns)
}

/// Writes a `t,label` CSV.
pub fn write_binary_series(path: &Path, bits: &[bool]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_record(&mut w, path, ["t", "label"])?;
    for (t, &b) in bits.iter().enumerate() {
        write_record(&mut w, path, [t.to_string(), u8::from(b).to_string()])?;
    }
    flush(w, path)
}

/// Reads a `t,label` CSV.
pub fn read_binary_series(path: &Path) -> Result<Vec<bool>> {
    let mut reader = csv_reader(path)?;
    expect_header(&mut reader, path, &["t", "label"])?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::data(path, Some(row), e.to_string()))?;
        if record.len() != 2 || record[0].trim().parse::<usize>().ok() != Some(i) {
            return Err(Error::data(path, Some(row), "expected `t,label` with t = row index"));
        }
        let bit = parse_binary(&record[1])
            .ok_or_else(|| Error::data(path, Some(row), format!("non-binary label {:?}", &record[1])))?;
        out.push(bit);
    }
    Ok(out)
}

fn parse_binary(s: &str) -> Option<bool> {
    match s.trim() {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn expect_header(reader: &mut csv::Reader<fs::File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| Error::data(path, Some(1), e.to_string()))?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::data(
            path,
            Some(1),
            format!("expected header {:?}", expected.join(",")),
        ));
    }
    Ok(())
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn write_record<I, T>(w: &mut csv::Writer<fs::File>, path: &Path, record: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(record).map_err(|e| csv_io(path, e))
}

pub(crate) fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(PathBuf::from(path), std::io::Error::other(e.to_string()))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnomalyKind {
    MeanShift,
    AmplitudeScale,
    FrequencyChange,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [Self::MeanShift, Self::AmplitudeScale, Self::FrequencyChange];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_instances: usize,
    pub d_vars: usize,
    pub length: usize,
    /// Target fraction of anomalous points over the whole generated set.
    pub anomaly_ratio: f64,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    pub max_segments: usize,
    /// Minimum number of normal points between two injected segments.
    pub min_gap: usize,
    /// Injected segments keep this many normal points from either end.
    pub edge_margin: usize,
    pub noise_std: f64,
    /// Range of the base oscillation period, in points.
    pub period: [f64; 2],
    /// Offset added during a mean shift; the sign is random.
    pub mean_shift: [f64; 2],
    /// Factor applied to the base oscillation during an amplitude anomaly.
    pub amplitude_scale: [f64; 2],
    /// Factor applied to the base frequency during a frequency anomaly.
    pub frequency_scale: [f64; 2],
    /// Overrides the number of anomalous instances derived from `anomaly_ratio`.
    pub n_anomalous: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_instances: 100,
            d_vars: 3,
            length: 500,
            anomaly_ratio: 0.05,
            min_segment_len: 30,
            max_segment_len: 70,
            max_segments: 3,
            min_gap: 100,
            edge_margin: 50,
            noise_std: 0.1,
            period: [12.0, 24.0],
            mean_shift: [1.5, 2.5],
            amplitude_scale: [2.0, 3.0],
            frequency_scale: [3.0, 4.0],
            n_anomalous: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_instances == 0 || self.d_vars == 0 || self.length == 0 {
            return fail("synth: n_instances, d_vars and length must be positive".into());
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            return fail(format!("synth: anomaly_ratio {} not in (0,1)", self.anomaly_ratio));
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return fail(format!(
                "synth: segment length bounds [{}, {}] invalid",
                self.min_segment_len, self.max_segment_len
            ));
        }
        if self.max_segment_len + 2 * self.edge_margin > self.length {
            return fail(format!(
                "synth: max segment length {} plus edge margins {} exceeds instance length {}",
                self.max_segment_len,
                2 * self.edge_margin,
                self.length
            ));
        }
        if self.max_segments == 0 {
            return fail("synth: max_segments must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("synth: noise_std {} invalid", self.noise_std));
        }
        for (name, [lo, hi]) in [
            ("period", self.period),
            ("mean_shift", self.mean_shift),
            ("amplitude_scale", self.amplitude_scale),
            ("frequency_scale", self.frequency_scale),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return fail(format!("synth: {name} range [{lo}, {hi}] invalid"));
            }
        }
        if let Some(k) = self.n_anomalous {
            if k > self.n_instances {
                return fail(format!("synth: n_anomalous {k} exceeds n_instances {}", self.n_instances));
            }
        }
        Ok(())
    }

    /// Number of anomalous instances needed to hit `anomaly_ratio` on average.
    pub fn anomalous_instances(&self) -> usize {
        if let Some(k) = self.n_anomalous {
            return k;
        }
        let mean_len = (self.min_segment_len + self.max_segment_len) as f64 / 2.0;
        let mean_segments = (1 + self.max_segments) as f64 / 2.0;
        let points = self.anomaly_ratio * (self.n_instances * self.length) as f64;
        ((points / (mean_len * mean_segments)).round() as usize).clamp(1, self.n_instances)
    }
}

/// Per-variable periodic structure shared by every instance of a generated set.
struct Channel {
    period: f64,
    amplitude: f64,
}

struct Injection {
    start: usize,
    end: usize,
    kind: AnomalyKind,
    magnitude: f64,
}

/// Generates a labeled dataset (split tag `train`) with point-level ground
/// truth. The output depends only on `config` and `seed`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels: Vec<Channel> = (0..config.d_vars)
        .map(|_| Channel {
            period: draw(&mut rng, config.period),
            amplitude: rng.random_range(0.8..1.2),
        })
        .collect();

    let n_anom = config.anomalous_instances();
    let mut anomalous = vec![false; config.n_instances];
    anomalous[..n_anom].iter_mut().for_each(|a| *a = true);
    anomalous.shuffle(&mut rng);
    let mut kinds: Vec<AnomalyKind> = (0..n_anom).map(|i| AnomalyKind::ALL[i % 3]).collect();
    kinds.shuffle(&mut rng);
    let mut kinds = kinds.into_iter();

    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let width = config.n_instances.saturating_sub(1).to_string().len().max(4);
    let mut items = Vec::with_capacity(config.n_instances);
    for (idx, &is_anom) in anomalous.iter().enumerate() {
        let injections = if is_anom {
            let kind = kinds.next().expect("one kind per anomalous instance");
            place_injections(config, kind, &mut rng)
        } else {
            Vec::new()
        };
        let t_len = config.length;
        let mut values = Vec::with_capacity(config.d_vars * t_len);
        for ch in &channels {
            let phase = rng.random_range(0.0..2.0 * PI);
            let gain = rng.random_range(0.9..1.1);
            let mut periodic: Vec<f64> = (0..t_len)
                .map(|t| gain * ch.amplitude * (2.0 * PI * t as f64 / ch.period + phase).sin())
                .collect();
            let mut offset = vec![0.0; t_len];
            for inj in &injections {
                for t in inj.start..inj.end {
                    match inj.kind {
                        AnomalyKind::MeanShift => offset[t] += inj.magnitude,
                        AnomalyKind::AmplitudeScale => periodic[t] *= inj.magnitude,
                        AnomalyKind::FrequencyChange => {
                            let local = (t - inj.start) as f64;
                            let start_phase = 2.0 * PI * inj.start as f64 / ch.period + phase;
                            periodic[t] = gain
                                * ch.amplitude
                                * (start_phase + 2.0 * PI * local * inj.magnitude / ch.period).sin();
                        }
                    }
                }
            }
            for t in 0..t_len {
                values.push(periodic[t] + offset[t] + noise.sample(&mut rng));
            }
        }
        let mut points = vec![false; t_len];
        for inj in &injections {
            points[inj.start..inj.end].iter_mut().for_each(|p| *p = true);
        }
        let instance = TemporalInstance::new(format!("inst{idx:0width$}"), config.d_vars, t_len, values)?;
        items.push(LabeledInstance {
            instance,
            label: is_anom,
            point_labels: Some(points),
        });
    }
    Dataset::new(Split::Train, items)
}

/// Every segment of one instance shares the kind and magnitude.
fn place_injections(config: &SynthConfig, kind: AnomalyKind, rng: &mut ChaCha8Rng) -> Vec<Injection> {
    let wanted = rng.random_range(1..=config.max_segments);
    let gap = config.min_gap;
    let lo = config.edge_margin;
    let mut placed: Vec<Injection> = Vec::with_capacity(wanted);
    let magnitude = draw_magnitude(config, kind, rng);
    for _ in 0..wanted {
        let len = rng.random_range(config.min_segment_len..=config.max_segment_len);
        for _attempt in 0..100 {
            let start = rng.random_range(lo..=config.length - lo - len);
            let end = start + len;
            if placed.iter().all(|p| end + gap <= p.start || p.end + gap <= start) {
                placed.push(Injection {
                    start,
                    end,
                    kind,
                    magnitude,
                });
                break;
            }
        }
    }
    placed.sort_by_key(|p| p.start);
    placed
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_magnitude(config: &SynthConfig, kind: AnomalyKind, rng: &mut ChaCha8Rng) -> f64 {
    match kind {
        AnomalyKind::MeanShift => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * draw(rng, config.mean_shift)
        }
        AnomalyKind::AmplitudeScale => draw(rng, config.amplitude_scale),
        AnomalyKind::FrequencyChange => draw(rng, config.frequency_scale),
    }
}
