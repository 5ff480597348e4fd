//! Observation tables and simulation from zoo models.

use std::io::{Read, Write};
use std::path::Path;

use super::{IidModel, SsmModel};
use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;

/// Observations `y_1, ..., y_T` (row-major, `dim_y` columns) with their times.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub dim_y: usize,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn new(times: Vec<f64>, values: Vec<f64>, dim_y: usize) -> Result<Self> {
        if dim_y == 0 || values.len() != times.len() * dim_y {
            return Err(Error::Dataset(format!(
                "{} values do not fill {} rows of width {dim_y}",
                values.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Dataset("observation times must be strictly increasing".into()));
        }
        let names = (1..=dim_y).map(|k| format!("y{k}")).collect();
        Ok(Self {
            times,
            values,
            dim_y,
            names,
        })
    }

    /// Unit-spaced univariate series at times `1, ..., T`.
    pub fn univariate(values: Vec<f64>) -> Self {
        let times = (1..=values.len()).map(|t| t as f64).collect();
        Self::new(times, values, 1).expect("unit-spaced series is valid")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim_y..(t + 1) * self.dim_y]
    }

    /// Gap between observation `t` and its predecessor (0 for the first).
    pub fn gap(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.times[t] - self.times[t - 1]
        }
    }

    /// First column of a univariate series.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.row(t)[k]).collect()
    }

    /// Rows reordered by `perm` (times renumbered `1..T`; meant for
    /// exchangeable data).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if perm.len() != self.len() || perm.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(invalid("permutation must reorder every row exactly once"));
        }
        let mut values = Vec::with_capacity(self.values.len());
        for &i in perm {
            values.extend_from_slice(self.row(i));
        }
        let times = (1..=self.len()).map(|t| t as f64).collect();
        let mut out = Self::new(times, values, self.dim_y)?;
        out.names = self.names.clone();
        Ok(out)
    }

    /// First `n` rows.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            times: self.times[..n].to_vec(),
            values: self.values[..n * self.dim_y].to_vec(),
            dim_y: self.dim_y,
            names: self.names.clone(),
        }
    }

    /// Parses CSV text with a header row whose first column is `t`. Lines
    /// starting with `#` are ignored.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 || &header[0] != "t" {
            return Err(Error::Dataset("header must start with `t` followed by observation columns".into()));
        }
        let dim_y = header.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("row {}: column {}: {e}", line + 1, &header[i])))
            };
            times.push(parse(0)?);
            for i in 1..=dim_y {
                values.push(parse(i)?);
            }
        }
        let mut ds = Self::new(times, values, dim_y)?;
        ds.names = header.iter().skip(1).map(str::to_string).collect();
        Ok(ds)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
        Self::from_csv_reader(f)
    }

    /// Writes `# `-prefixed metadata lines, the header and the rows.
    pub fn write_csv<W: Write>(&self, mut out: W, metadata: &[String]) -> Result<()> {
        for m in metadata {
            writeln!(out, "# {m}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![fmt_num(self.times[t])];
            rec.extend(self.row(t).iter().map(|&v| fmt_num(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Bundled 41-row bivariate count series used by the population-dynamics
    /// study (a synthetic stand-in, see `data/README.md`).
    pub fn kangaroo_counts() -> Self {
        Self::from_csv_reader(include_str!("../../data/kangaroo_synthetic.csv").as_bytes())
            .expect("bundled dataset parses")
    }
}

/// Shortest representation that round-trips exactly.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

/// `T` draws from an i.i.d. model at parameter `theta`.
pub fn simulate_iid(model: &dyn IidModel, theta: &[f64], t_len: usize, rng: &mut StreamRng) -> Result<Dataset> {
    if theta.len() != model.dim_theta() {
        return Err(invalid(format!("{} expects {} parameters", model.name(), model.dim_theta())));
    }
    if !model.prior_log_density(theta).is_finite() {
        return Err(invalid(format!("parameter {theta:?} outside the support of {}", model.name())));
    }
    let mut values = Vec::with_capacity(t_len * model.dim_y());
    for _ in 0..t_len {
        values.extend(model.sample_observation(theta, rng));
    }
    let times = (1..=t_len).map(|t| t as f64).collect();
    Dataset::new(times, values, model.dim_y())
}

/// Observations of a state-space model at parameter `theta` and the given
/// observation times.
pub fn simulate_ssm(model: &dyn SsmModel, theta: &[f64], times: &[f64], rng: &mut StreamRng) -> Result<Dataset> {
    if theta.len() != model.dim_theta() {
        return Err(invalid(format!("{} expects {} parameters", model.name(), model.dim_theta())));
    }
    if !model.prior_log_density(theta).is_finite() {
        return Err(invalid(format!("parameter {theta:?} outside the support of {}", model.name())));
    }
    let mut x = vec![0.0; model.dim_x()];
    let mut values = Vec::with_capacity(times.len() * model.dim_y());
    for (t, &time) in times.iter().enumerate() {
        if t == 0 {
            model.sample_initial(theta, &mut x, rng);
        } else {
            model.transition(theta, &mut x, time - times[t - 1], rng);
        }
        let y = model
            .sample_measurement(&x, theta, rng)
            .ok_or_else(|| invalid(format!("{} has no measurement sampler at this state", model.name())))?;
        values.extend(y);
    }
    Dataset::new(times.to_vec(), values, model.dim_y())
}
