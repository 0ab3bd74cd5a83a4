//! On-disk datasets, run configuration files and CSV output helpers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FsvdError, Result};
use crate::fsvd::DataTensor;
use crate::grid::Grid;

/// A data tensor together with its subject labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<String>,
    pub data: DataTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transform {
    #[default]
    None,
    Log,
}

impl std::str::FromStr for Transform {
    type Err = FsvdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Transform::None),
            "log" => Ok(Transform::Log),
            other => Err(FsvdError::InvalidConfig(format!(
                "unknown transform '{other}' (expected none or log)"
            ))),
        }
    }
}

impl Dataset {
    pub fn apply(self, transform: Transform) -> Result<Self> {
        match transform {
            Transform::None => Ok(self),
            Transform::Log => {
                let mut surfaces = Vec::with_capacity(self.data.n());
                for (x, id) in self.data.surfaces().iter().zip(&self.subjects) {
                    if let Some(bad) = x.iter().find(|v| **v <= 0.0) {
                        return Err(FsvdError::Inconsistent(format!(
                            "log transform needs positive values; subject '{id}' has {bad}"
                        )));
                    }
                    surfaces.push(x.map(f64::ln));
                }
                let data = DataTensor::new(self.data.s_grid().clone(), self.data.t_grid().clone(), surfaces)?;
                Ok(Self { data, ..self })
            }
        }
    }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> FsvdError {
    FsvdError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> FsvdError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    parse_error(path, line, e.to_string())
}

fn parse_finite(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("{what} '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("{what} '{field}' is not finite")));
    }
    Ok(v)
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| FsvdError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Sorted distinct values; exact duplicates collapse.
fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Long format: header `subject,s,t,value`, one row per cell. Subjects keep
/// their order of first appearance; grids are the sorted distinct `s`/`t`.
pub fn read_long_csv(path: &Path) -> Result<Dataset> {
    let mut reader = open_csv(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != ["subject", "s", "t", "value"] {
        return Err(parse_error(
            path,
            1,
            format!("expected header subject,s,t,value, found {}", names.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let s = parse_finite(path, line, &rec[1], "s")?;
        let t = parse_finite(path, line, &rec[2], "t")?;
        let v = parse_finite(path, line, &rec[3], "value")?;
        rows.push((rec[0].trim().to_string(), s, t, v, line));
    }
    if rows.is_empty() {
        return Err(FsvdError::EmptyData(format!("{} has no data rows", path.display())));
    }
    let s_pts = distinct(rows.iter().map(|r| r.1));
    let t_pts = distinct(rows.iter().map(|r| r.2));
    let mut subjects: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<DMatrix<f64>> = Vec::new();
    let mut seen: Vec<DMatrix<u8>> = Vec::new();
    for (id, s, t, v, line) in rows {
        let i = *index.entry(id.clone()).or_insert_with(|| {
            subjects.push(id.clone());
            cells.push(DMatrix::zeros(s_pts.len(), t_pts.len()));
            seen.push(DMatrix::zeros(s_pts.len(), t_pts.len()));
            subjects.len() - 1
        });
        let j = s_pts.binary_search_by(|x| x.total_cmp(&s)).expect("s value present");
        let k = t_pts.binary_search_by(|x| x.total_cmp(&t)).expect("t value present");
        if seen[i][(j, k)] == 1 {
            return Err(parse_error(path, line, format!("duplicate cell (s={s}, t={t}) for subject '{id}'")));
        }
        seen[i][(j, k)] = 1;
        cells[i][(j, k)] = v;
    }
    for (i, id) in subjects.iter().enumerate() {
        if let Some(pos) = seen[i].iter().position(|&x| x == 0) {
            let (j, k) = (pos % s_pts.len(), pos / s_pts.len());
            return Err(FsvdError::Inconsistent(format!(
                "subject '{id}' has no value at (s={}, t={}); grids must be complete and shared",
                s_pts[j], t_pts[k]
            )));
        }
    }
    let data = DataTensor::new(Grid::new(s_pts)?, Grid::new(t_pts)?, cells)?;
    Ok(Dataset { subjects, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

/// Matrix format: one CSV per subject (header row, then one row per `s`
/// point with one column per `t` point) listed in a JSON manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub subjects: Vec<ManifestEntry>,
}

fn read_matrix_csv(path: &Path, rows: usize, cols: usize, id: &str) -> Result<DMatrix<f64>> {
    let mut reader = open_csv(path)?;
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if width != cols {
        return Err(FsvdError::Inconsistent(format!(
            "subject '{id}': {} has {width} columns, the t grid has {cols}",
            path.display()
        )));
    }
    let mut x = DMatrix::zeros(rows, cols);
    let mut j = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if j >= rows {
            return Err(FsvdError::Inconsistent(format!(
                "subject '{id}': {} has more than {rows} data rows (the s grid size)",
                path.display()
            )));
        }
        for (k, field) in rec.iter().enumerate() {
            x[(j, k)] = parse_finite(path, line, field, "value")?;
        }
        j += 1;
    }
    if j != rows {
        return Err(FsvdError::Inconsistent(format!(
            "subject '{id}': {} has {j} data rows, the s grid has {rows}",
            path.display()
        )));
    }
    Ok(x)
}

pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| FsvdError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| parse_error(path, e.line() as u64, e.to_string()))?;
    if manifest.subjects.is_empty() {
        return Err(FsvdError::EmptyData(format!("{} lists no subjects", path.display())));
    }
    let s_grid = Grid::new(manifest.s.clone())?;
    let t_grid = Grid::new(manifest.t.clone())?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut surfaces = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        surfaces.push(read_matrix_csv(&base.join(&entry.path), s_grid.len(), t_grid.len(), &entry.id)?);
    }
    let subjects = manifest.subjects.into_iter().map(|e| e.id).collect();
    Ok(Dataset {
        subjects,
        data: DataTensor::new(s_grid, t_grid, surfaces)?,
    })
}

/// `.json` paths are manifests; anything else is read as long CSV.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_manifest(path),
        _ => read_long_csv(path),
    }
}

/// Write `dataset` as long CSV; values use shortest round-trip formatting.
pub fn write_long_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let (s, t) = (dataset.data.s_grid().points(), dataset.data.t_grid().points());
    let mut rows = Vec::new();
    for (id, x) in dataset.subjects.iter().zip(dataset.data.surfaces()) {
        for (j, sj) in s.iter().enumerate() {
            for (k, tk) in t.iter().enumerate() {
                rows.push(vec![id.clone(), sj.to_string(), tk.to_string(), x[(j, k)].to_string()]);
            }
        }
    }
    write_csv(path, &["subject", "s", "t", "value"], rows)
}

/// Twelve significant digits; negative zero prints as zero.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0.00000000000e0".to_string();
    }
    format!("{x:.11e}")
}

pub fn write_csv<I, R, S>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| FsvdError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FsvdError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FsvdError::io(path, e))
}

/// Keys accepted in `key=value` run configuration files.
pub const CONFIG_KEYS: &[&str] = &[
    "input",
    "out",
    "model",
    "transform",
    "order",
    "max_knots",
    "rel_improvement_tol",
    "allow_repeats",
    "p",
    "max_p",
    "folds",
    "seed",
    "mean",
    "sigma",
    "m",
    "n",
    "replicates",
    "protocols",
];

/// `key=value` settings. Blank lines and `#` comments are ignored; unknown
/// or repeated keys are errors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_error(origin, i as u64 + 1, format!("expected key=value, found '{line}'")))?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(FsvdError::InvalidConfig(format!(
                    "{}:{}: unknown key '{key}'",
                    origin.display(),
                    i + 1
                )));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(FsvdError::InvalidConfig(format!(
                    "{}:{}: key '{key}' given twice",
                    origin.display(),
                    i + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FsvdError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Override (or add) a key, e.g. from a command-line flag.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(FsvdError::InvalidConfig(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| FsvdError::InvalidConfig(format!("invalid value '{v}' for '{key}'")))
            })
            .transpose()
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| FsvdError::InvalidConfig(format!("missing required setting '{key}'")))
    }
}
