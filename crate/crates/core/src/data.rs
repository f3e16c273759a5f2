//! Datasets: synthetic generation from a teacher network, CSV input and output,
//! and seeded fit/test splitting.

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{softmax, LabeledSample, Network, NetworkTopology};

/// Samples sharing one feature width and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    feature_width: usize,
    class_count: usize,
    label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, feature_width: usize, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        for s in &samples {
            if s.features.len() != feature_width {
                return Err(Error::DimensionMismatch {
                    what: "sample features",
                    expected: feature_width,
                    got: s.features.len(),
                });
            }
            if s.label >= class_count {
                return Err(Error::InvalidLabel {
                    label: s.label,
                    classes: class_count,
                });
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
        }
        Ok(Self {
            samples,
            feature_width,
            class_count,
            label_names: None,
        })
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.class_count {
            return Err(Error::DimensionMismatch {
                what: "label names",
                expected: self.class_count,
                got: names.len(),
            });
        }
        self.label_names = Some(names);
        Ok(self)
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    /// Same schema, different samples.
    fn with_samples(&self, samples: Vec<LabeledSample>) -> Self {
        Self {
            samples,
            feature_width: self.feature_width,
            class_count: self.class_count,
            label_names: self.label_names.clone(),
        }
    }

    pub fn class_frequencies(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

impl Deref for Dataset {
    type Target = [LabeledSample];

    fn deref(&self) -> &[LabeledSample] {
        &self.samples
    }
}

/// Parameters of the synthetic teacher-network data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub feature_width: usize,
    pub class_count: usize,
    pub teacher_topology: NetworkTopology,
    pub teacher_seed: u64,
    /// Multiplier on the teacher's output scores before the softmax.
    pub noise_temperature: f64,
    /// Multiply feature `j` by `10^(j mod 3)`.
    pub scale_mixture: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            feature_width: 11,
            class_count: 3,
            teacher_topology: NetworkTopology::new(vec![11, 5, 3]).expect("valid"),
            teacher_seed: 2024,
            noise_temperature: 1.0,
            scale_mixture: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let t = &self.teacher_topology;
        if t.input_width() != self.feature_width || t.class_count() != self.class_count {
            return Err(Error::InvalidArgument(format!(
                "teacher {t} does not map {} features to {} classes",
                self.feature_width, self.class_count
            )));
        }
        if !self.noise_temperature.is_finite() {
            return Err(Error::NonFinite("noise temperature"));
        }
        Ok(())
    }

    pub fn teacher(&self) -> Network {
        Network::init(self.teacher_topology.clone(), self.teacher_seed)
    }
}

/// `n` samples labeled by the teacher network described in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    generate_from_teacher(&spec.teacher(), spec.noise_temperature, spec.scale_mixture, n, seed)
}

/// Features i.i.d. uniform on [0, 1), labels drawn from
/// `softmax(temperature · teacher(x))`.
pub fn generate_from_teacher(
    teacher: &Network,
    temperature: f64,
    scale_mixture: bool,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic sample count must be positive".into()));
    }
    let width = teacher.topology().input_width();
    let classes = teacher.topology().class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let features: Vec<f64> = (0..width)
            .map(|j| {
                let u: f64 = rng.random();
                if scale_mixture {
                    u * 10f64.powi((j % 3) as i32)
                } else {
                    u
                }
            })
            .collect();
        let scores: Vec<f64> = teacher.scores(&features)?.iter().map(|s| s * temperature).collect();
        let probs = softmax(&scores);
        let u: f64 = rng.random();
        let mut label = classes - 1;
        let mut cum = 0.0;
        for (c, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                label = c;
                break;
            }
        }
        samples.push(LabeledSample::new(features, label));
    }
    Dataset::new(samples, width, classes)
}

/// Splits into `(fit, test)`, each sample going to the fit side with
/// probability `p_fit`.
pub fn split(data: &Dataset, p_fit: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(p_fit > 0.0 && p_fit < 1.0) {
        return Err(Error::InvalidArgument(format!("fit probability must be in (0, 1), got {p_fit}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fit = Vec::new();
    let mut test = Vec::new();
    for s in data.iter() {
        if rng.random::<f64>() < p_fit {
            fit.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    if fit.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "split left {} fit and {} test samples",
            fit.len(),
            test.len()
        )));
    }
    Ok((data.with_samples(fit), data.with_samples(test)))
}

/// Uniform sample of `target` observations without replacement, kept in
/// their original order.
pub fn subsample(data: &Dataset, target: usize, seed: u64) -> Result<Dataset> {
    if target > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {target} samples from {}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, data.len(), target).into_vec();
    picked.sort_unstable();
    Ok(data.with_samples(picked.into_iter().map(|i| data[i].clone()).collect()))
}

/// Row predicate on one named column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFilter {
    pub column: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    AtLeast(f64),
    GreaterThan(f64),
    AtMost(f64),
    LessThan(f64),
    /// Inclusive range.
    Between(f64, f64),
}

impl Predicate {
    pub fn accepts(&self, x: f64) -> bool {
        match *self {
            Predicate::AtLeast(v) => x >= v,
            Predicate::GreaterThan(v) => x > v,
            Predicate::AtMost(v) => x <= v,
            Predicate::LessThan(v) => x < v,
            Predicate::Between(lo, hi) => lo <= x && x <= hi,
        }
    }
}

impl ColumnFilter {
    pub fn non_negative(column: &str) -> Self {
        Self {
            column: column.to_string(),
            predicate: Predicate::AtLeast(0.0),
        }
    }
}

impl FromStr for ColumnFilter {
    type Err = Error;

    /// Accepts `col>=v`, `col>v`, `col<=v`, `col<v` and `col in [lo,hi]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse filter {s:?}"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        if let Some((col, range)) = s.split_once(" in ") {
            let inner = range.trim().strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
            let (lo, hi) = inner.split_once(',').ok_or_else(bad)?;
            return Ok(Self {
                column: col.trim().to_string(),
                predicate: Predicate::Between(num(lo)?, num(hi)?),
            });
        }
        for (op, make) in [
            (">=", Predicate::AtLeast as fn(f64) -> Predicate),
            ("<=", Predicate::AtMost),
            (">", Predicate::GreaterThan),
            ("<", Predicate::LessThan),
        ] {
            if let Some((col, v)) = s.split_once(op) {
                if col.trim().is_empty() {
                    return Err(bad());
                }
                return Ok(Self {
                    column: col.trim().to_string(),
                    predicate: make(num(v)?),
                });
            }
        }
        Err(bad())
    }
}

impl fmt::Display for ColumnFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.predicate {
            Predicate::AtLeast(v) => write!(f, "{}>={v}", self.column),
            Predicate::GreaterThan(v) => write!(f, "{}>{v}", self.column),
            Predicate::AtMost(v) => write!(f, "{}<={v}", self.column),
            Predicate::LessThan(v) => write!(f, "{}<{v}", self.column),
            Predicate::Between(lo, hi) => write!(f, "{} in [{lo},{hi}]", self.column),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub label_column: String,
    /// Feature columns in order; `None` takes every non-label column.
    pub feature_columns: Option<Vec<String>>,
    pub filters: Vec<ColumnFilter>,
    /// Abort on the first unparseable value instead of dropping the row.
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped_by_filter: usize,
    pub dropped_unparseable: usize,
}

impl LoadReport {
    pub fn dropped_fraction(&self) -> f64 {
        if self.rows_read == 0 {
            0.0
        } else {
            (self.dropped_by_filter + self.dropped_unparseable) as f64 / self.rows_read as f64
        }
    }
}

fn csv_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a header-first CSV file.
///
/// Labels are class indices when every kept label parses as a non-negative
/// integer; otherwise they are names numbered by first appearance.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<(Dataset, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_error(path, format!("missing column {name:?}")))
    };

    let label_idx = column(&options.label_column)?;
    let feature_idx: Vec<usize> = match &options.feature_columns {
        Some(names) => names.iter().map(|n| column(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(csv_error(path, "no feature columns"));
    }
    let filter_idx: Vec<(usize, Predicate)> = options
        .filters
        .iter()
        .map(|f| Ok((column(&f.column)?, f.predicate)))
        .collect::<Result<_>>()?;

    let mut report = LoadReport::default();
    let mut rows: Vec<(Vec<f64>, String)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        report.rows_read += 1;
        let parse = |i: usize| record.get(i).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite());

        let features: Option<Vec<f64>> = feature_idx.iter().map(|&i| parse(i)).collect();
        let filter_values: Option<Vec<f64>> = filter_idx.iter().map(|&(i, _)| parse(i)).collect();
        let label = record.get(label_idx).filter(|l| !l.is_empty());
        let (Some(features), Some(filter_values), Some(label)) = (features, filter_values, label) else {
            if options.strict {
                return Err(csv_error(path, format!("unparseable value on data row {}", line + 1)));
            }
            report.dropped_unparseable += 1;
            continue;
        };
        if !filter_idx.iter().zip(&filter_values).all(|((_, p), &v)| p.accepts(v)) {
            report.dropped_by_filter += 1;
            continue;
        }
        rows.push((features, label.to_string()));
    }
    report.rows_kept = rows.len();
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no usable rows", path.display())));
    }

    let numeric: Option<Vec<usize>> = rows.iter().map(|(_, l)| l.parse::<usize>().ok()).collect();
    let width = feature_idx.len();
    let dataset = match numeric {
        Some(labels) => {
            let classes = labels.iter().max().map_or(1, |m| m + 1);
            let samples = rows.into_iter().zip(labels).map(|((f, _), l)| LabeledSample::new(f, l)).collect();
            Dataset::new(samples, width, classes)?
        }
        None => {
            let mut names: Vec<String> = Vec::new();
            let mut lookup: HashMap<String, usize> = HashMap::new();
            let mut samples = Vec::with_capacity(rows.len());
            for (f, l) in rows {
                let next = names.len();
                let id = *lookup.entry(l.clone()).or_insert_with(|| {
                    names.push(l);
                    next
                });
                samples.push(LabeledSample::new(f, id));
            }
            let classes = names.len();
            Dataset::new(samples, width, classes)?.with_label_names(names)?
        }
    };
    Ok((dataset, report))
}

/// Writes `x0..x{d-1},label` with shortest round-trip float formatting.
pub fn write_csv<W: io::Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..data.feature_width()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io::Error::from)?;
    for s in data.iter() {
        let mut record: Vec<String> = s.features.iter().map(|x| x.to_string()).collect();
        record.push(match data.label_names() {
            Some(names) => names[s.label].clone(),
            None => s.label.to_string(),
        });
        w.write_record(&record).map_err(io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(data, io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn filter_drops_negative_rows() {
        let f = write_temp("a,b,y\n1.0,2.0,0\n-1.0,3.0,1\n0.5,0.0,1\n");
        let opts = CsvOptions {
            label_column: "y".into(),
            filters: vec![ColumnFilter::non_negative("a")],
            ..Default::default()
        };
        let (d, report) = load_csv(f.path(), &opts).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(report.dropped_by_filter, 1);
        assert_eq!(report.rows_read, 3);
        assert!((report.dropped_fraction() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d[1].features, vec![0.5, 0.0]);
    }

    #[test]
    fn header_only_file_is_empty() {
        let f = write_temp("a,b,y\n");
        let opts = CsvOptions {
            label_column: "y".into(),
            ..Default::default()
        };
        assert!(matches!(load_csv(f.path(), &opts), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn missing_column_is_reported() {
        let f = write_temp("a,b,y\n1,2,0\n");
        let opts = CsvOptions {
            label_column: "class".into(),
            ..Default::default()
        };
        assert!(matches!(load_csv(f.path(), &opts), Err(Error::Csv { .. })));
    }

    #[test]
    fn unparseable_rows_dropped_or_fatal() {
        let f = write_temp("a,y\n1,0\noops,1\n2,1\n");
        let mut opts = CsvOptions {
            label_column: "y".into(),
            ..Default::default()
        };
        let (d, report) = load_csv(f.path(), &opts).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(report.dropped_unparseable, 1);
        opts.strict = true;
        assert!(load_csv(f.path(), &opts).is_err());
    }

    #[test]
    fn string_labels_numbered_by_first_appearance() {
        let f = write_temp("x,outcome\n1,prepay\n2,current\n3,prepay\n4,default\n");
        let opts = CsvOptions {
            label_column: "outcome".into(),
            feature_columns: Some(vec!["x".into()]),
            ..Default::default()
        };
        let (d, _) = load_csv(f.path(), &opts).unwrap();
        assert_eq!(d.class_count(), 3);
        assert_eq!(d.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1, 0, 2]);
        assert_eq!(d.label_names().unwrap(), ["prepay", "current", "default"]);
    }

    #[test]
    fn filter_parsing() {
        let f: ColumnFilter = "ltv>0".parse().unwrap();
        assert_eq!(f.predicate, Predicate::GreaterThan(0.0));
        let f: ColumnFilter = "age>=0".parse().unwrap();
        assert_eq!(f.predicate, Predicate::AtLeast(0.0));
        let f: ColumnFilter = "incentive in [-1, 1]".parse().unwrap();
        assert_eq!(f.predicate, Predicate::Between(-1.0, 1.0));
        assert!(f.predicate.accepts(1.0) && !f.predicate.accepts(1.5));
        assert!("nonsense".parse::<ColumnFilter>().is_err());
        assert!(">=3".parse::<ColumnFilter>().is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, 200, 3).unwrap();
        let b = generate_synthetic(&spec, 200, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&spec, 200, 4).unwrap());
        assert!(a.iter().all(|s| s.features.iter().all(|&x| (0.0..1.0).contains(&x))));
    }

    #[test]
    fn scale_mixture_scales_columns() {
        let spec = SyntheticSpec {
            scale_mixture: true,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec, 500, 1).unwrap();
        let max_col = |j: usize| d.iter().map(|s| s.features[j]).fold(0.0, f64::max);
        assert!(max_col(0) < 1.0);
        assert!(max_col(1) > 1.0 && max_col(1) < 10.0);
        assert!(max_col(2) > 10.0 && max_col(2) < 100.0);
    }

    #[test]
    fn mismatched_teacher_is_invalid() {
        let spec = SyntheticSpec {
            feature_width: 4,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 10, 0).is_err());
    }

    #[test]
    fn subsample_edges() {
        let d = generate_synthetic(&SyntheticSpec::default(), 50, 9).unwrap();
        assert_eq!(subsample(&d, 50, 1).unwrap(), d);
        let one = subsample(&d, 1, 2).unwrap();
        assert_eq!(one.len(), 1);
        assert!(d.contains(&one[0]));
        assert!(subsample(&d, 51, 0).is_err());
    }

    #[test]
    fn degenerate_split_is_an_error() {
        let d = generate_synthetic(&SyntheticSpec::default(), 1, 9).unwrap();
        assert!(split(&d, 0.5, 0).is_err());
        assert!(split(&d, 0.0, 0).is_err());
        assert!(split(&d, 1.0, 0).is_err());
    }
}
