use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::mixing::MixingSpec;
use super::scm::ScmSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn index(&self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Latent blocks retained for diagnostics; only present for simulated data.
#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    pub w: Matrix,
    pub v: Matrix,
    pub h: Matrix,
}

/// Observables `(Z, D, Y)` of one environment and split.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDataset {
    pub env: usize,
    pub split: Split,
    pub seed: u64,
    pub z: Matrix,
    pub d: Matrix,
    pub y: Matrix,
    pub oracle: Option<Oracle>,
}

impl EnvDataset {
    pub fn n(&self) -> usize {
        self.z.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.z.rows();
        let mut ok = self.d.rows() == n && self.y.rows() == n && self.y.cols() == 1;
        if let Some(o) = &self.oracle {
            ok &= o.w.rows() == n && o.v.rows() == n && o.h.rows() == n;
        }
        if ok {
            Ok(())
        } else {
            Err(Error::shape("EnvDataset", format!("blocks of environment {} disagree on row count", self.env)))
        }
    }
}

/// All environments of one simulated (or loaded) study.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEnvData {
    pub spec: Option<ScmSpec>,
    pub mixing: Option<MixingSpec>,
    pub seed: u64,
    pub train: Vec<EnvDataset>,
    pub val: Vec<EnvDataset>,
}

/// Row-stacked blocks of several environments plus their environment labels.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub z: Matrix,
    pub d: Matrix,
    pub y: Matrix,
    pub w: Option<Matrix>,
    pub v: Option<Matrix>,
    pub labels: Vec<usize>,
}

pub fn pool(envs: &[EnvDataset]) -> Result<Pooled> {
    let stack = |f: &dyn Fn(&EnvDataset) -> &Matrix| -> Result<Matrix> {
        let parts: Vec<&Matrix> = envs.iter().map(f).collect();
        Matrix::vstack(&parts)
    };
    let has_oracle = envs.iter().all(|e| e.oracle.is_some());
    let labels = envs.iter().flat_map(|e| std::iter::repeat_n(e.env, e.n())).collect();
    Ok(Pooled {
        z: stack(&|e| &e.z)?,
        d: stack(&|e| &e.d)?,
        y: stack(&|e| &e.y)?,
        w: if has_oracle { Some(stack(&|e| &e.oracle.as_ref().unwrap().w)?) } else { None },
        v: if has_oracle { Some(stack(&|e| &e.oracle.as_ref().unwrap().v)?) } else { None },
        labels,
    })
}

impl MultiEnvData {
    pub fn num_envs(&self) -> usize {
        self.train.len()
    }

    pub fn d_z(&self) -> usize {
        self.train.first().map_or(0, |e| e.z.cols())
    }

    pub fn has_oracle(&self) -> bool {
        self.train.iter().chain(&self.val).all(|e| e.oracle.is_some())
    }

    pub fn pooled_train(&self) -> Result<Pooled> {
        pool(&self.train)
    }

    pub fn pooled_val(&self) -> Result<Pooled> {
        pool(&self.val)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Config("dataset has no environments".into()));
        }
        let dz = self.d_z();
        for e in self.train.iter().chain(&self.val) {
            e.validate()?;
            if e.z.cols() != dz {
                return Err(Error::shape("MultiEnvData", "environments disagree on d_z"));
            }
        }
        Ok(())
    }
}

/// JSON record written next to the per-environment CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub spec: Option<ScmSpec>,
    pub mixing: Option<MixingSpec>,
    pub seed: u64,
    pub files: Vec<SidecarFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarFile {
    pub env: usize,
    pub split: Split,
    pub seed: u64,
    pub file: String,
    pub rows: usize,
}

pub const SIDECAR_NAME: &str = "dataset.json";

fn csv_name(env: usize, split: Split) -> String {
    format!("env{env}_{}.csv", split.as_str())
}

/// Column header: `z_*, d_*, y` then `w_*, v_*, h_*` when oracle blocks exist.
pub fn csv_header(ds: &EnvDataset) -> Vec<String> {
    let mut h: Vec<String> = (0..ds.z.cols()).map(|j| format!("z_{j}")).collect();
    h.extend((0..ds.d.cols()).map(|j| format!("d_{j}")));
    h.push("y".into());
    if let Some(o) = &ds.oracle {
        h.extend((0..o.w.cols()).map(|j| format!("w_{j}")));
        h.extend((0..o.v.cols()).map(|j| format!("v_{j}")));
        h.extend((0..o.h.cols()).map(|j| format!("h_{j}")));
    }
    h
}

/// CSV text with every value at 17 significant digits.
pub fn to_csv(ds: &EnvDataset) -> String {
    let mut out = csv_header(ds).join(",");
    out.push('\n');
    let mut blocks: Vec<&Matrix> = vec![&ds.z, &ds.d, &ds.y];
    if let Some(o) = &ds.oracle {
        blocks.extend([&o.w, &o.v, &o.h]);
    }
    for i in 0..ds.n() {
        let mut first = true;
        for b in &blocks {
            for v in b.row(i) {
                if !first {
                    out.push(',');
                }
                first = false;
                write!(out, "{v:.16e}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

fn count_prefix(header: &[&str], prefix: &str) -> usize {
    header
        .iter()
        .filter(|h| h.strip_prefix(prefix).is_some_and(|r| r.parse::<usize>().is_ok()))
        .count()
}

pub fn from_csv(text: &str, env: usize, split: Split, seed: u64) -> Result<EnvDataset> {
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
    let header: Vec<&str> = header_line.split(',').map(str::trim).collect();
    let dz = count_prefix(&header, "z_");
    let dd = count_prefix(&header, "d_");
    let (pw, qv, hh) = (
        count_prefix(&header, "w_"),
        count_prefix(&header, "v_"),
        count_prefix(&header, "h_"),
    );
    if !header.contains(&"y") || dz == 0 || dd == 0 {
        return Err(Error::Parse(format!("CSV header must contain z_*, d_* and y columns: {header_line}")));
    }
    let width = header.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)))?;
        if vals.len() != width {
            return Err(Error::Parse(format!("line {}: {} fields, header has {width}", ln + 2, vals.len())));
        }
        rows.push(vals);
    }
    let n = rows.len();
    let take = |start: usize, w: usize| Matrix::from_fn(n, w, |i, j| rows[i][start + j]);
    let col = |name: String| header.iter().position(|h| *h == name);
    let z_start = col("z_0".into()).unwrap_or(0);
    let d_start = col("d_0".into()).ok_or_else(|| Error::Parse("missing d_0".into()))?;
    let y_at = col("y".into()).unwrap();
    let z = take(z_start, dz);
    let d = take(d_start, dd);
    let y = take(y_at, 1);
    let oracle = if pw + qv + hh > 0 {
        let start = |p: &str, w: usize| -> Result<usize> {
            if w == 0 {
                return Ok(0);
            }
            col(format!("{p}0")).ok_or_else(|| Error::Parse(format!("missing {p}0")))
        };
        Some(Oracle {
            w: take(start("w_", pw)?, pw),
            v: take(start("v_", qv)?, qv),
            h: take(start("h_", hh)?, hh),
        })
    } else {
        None
    };
    let ds = EnvDataset {
        env,
        split,
        seed,
        z,
        d,
        y,
        oracle,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes one CSV per environment and split plus the JSON sidecar.
pub fn write_dataset(data: &MultiEnvData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for ds in data.train.iter().chain(&data.val) {
        let name = csv_name(ds.env, ds.split);
        fs::write(dir.join(&name), to_csv(ds))?;
        files.push(SidecarFile {
            env: ds.env,
            split: ds.split,
            seed: ds.seed,
            file: name,
            rows: ds.n(),
        });
    }
    let sidecar = DatasetSidecar {
        spec: data.spec.clone(),
        mixing: data.mixing.clone(),
        seed: data.seed,
        files,
    };
    fs::write(dir.join(SIDECAR_NAME), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<MultiEnvData> {
    let sidecar_path = dir.join(SIDECAR_NAME);
    let text = fs::read_to_string(&sidecar_path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", sidecar_path.display())))
    })?;
    let sidecar: DatasetSidecar = serde_json::from_str(&text)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for f in &sidecar.files {
        let path = dir.join(&f.file);
        let csv = fs::read_to_string(&path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let ds = from_csv(&csv, f.env, f.split, f.seed)?;
        if ds.n() != f.rows {
            return Err(Error::Parse(format!("{}: {} rows, sidecar says {}", f.file, ds.n(), f.rows)));
        }
        match f.split {
            Split::Train => train.push(ds),
            Split::Val => val.push(ds),
        }
    }
    train.sort_by_key(|d| d.env);
    val.sort_by_key(|d| d.env);
    let data = MultiEnvData {
        spec: sidecar.spec,
        mixing: sidecar.mixing,
        seed: sidecar.seed,
        train,
        val,
    };
    data.validate()?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(oracle: bool) -> EnvDataset {
        EnvDataset {
            env: 1,
            split: Split::Val,
            seed: 4,
            z: Matrix::from_rows(&[[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]]),
            d: Matrix::column(&[1.0, std::f64::consts::PI]),
            y: Matrix::column(&[-0.0, 1e20]),
            oracle: oracle.then(|| Oracle {
                w: Matrix::column(&[0.2, 0.3]),
                v: Matrix::column(&[f64::EPSILON, 2.0]),
                h: Matrix::column(&[5.0, 6.0]),
            }),
        }
    }

    #[test]
    fn csv_round_trip_exact_at_17_digits() {
        for oracle in [true, false] {
            let ds = toy(oracle);
            let back = from_csv(&to_csv(&ds), 1, Split::Val, 4).unwrap();
            assert_eq!(back, ds);
        }
        assert_eq!(csv_header(&toy(true)).join(","), "z_0,z_1,d_0,y,w_0,v_0,h_0");
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = from_csv("z_0,d_0,y\n1,2,3\n1,x,3\n", 0, Split::Train, 0).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(from_csv("a,b\n", 0, Split::Train, 0).is_err());
    }
}
