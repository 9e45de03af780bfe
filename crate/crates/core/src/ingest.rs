//! Loading and validating gridded daily series.
//!
//! The on-disk format is a CSV file per climate-model run: a `day` column of
//! strictly increasing integer day indices followed by one column per site
//! named `s_<j>_<k>`, where `(j, k)` are the site's grid coordinates. Column
//! order fixes the site order for everything downstream.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Coord = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDataset {
    pub run_id: i64,
    pub sites: Vec<Coord>,
    pub times: Vec<i64>,
    /// Row-major `n_times x n_sites`.
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SitePair {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

impl GridDataset {
    /// Builds a dataset, enforcing shape, ordering and finiteness. Negative
    /// values are rejected unless `allow_negative` is set (synthetic fixtures
    /// on a standardised scale).
    pub fn new(run_id: i64, sites: Vec<Coord>, times: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        let d = sites.len();
        if d == 0 {
            return Err(Error::Structure("dataset has no sites".into()));
        }
        if values.len() != times.len() * d {
            return Err(Error::Structure(format!(
                "value matrix has {} entries, expected {} x {}",
                values.len(),
                times.len(),
                d
            )));
        }
        check_times(&times)?;
        for (idx, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: idx / d + 1,
                    column: site_name(&sites[idx % d]),
                    message: "non-finite value".into(),
                });
            }
            if *v < 0.0 {
                return Err(Error::Parse {
                    row: idx / d + 1,
                    column: site_name(&sites[idx % d]),
                    message: format!("negative precipitation {v}"),
                });
            }
        }
        Ok(Self {
            run_id,
            sites,
            times,
            values,
        })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.n_sites();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_sites())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.n_sites() + j]
    }

    /// Writes the dataset in the canonical CSV schema. Values are written in
    /// shortest round-trip form, so reloading is bit-exact.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("day");
        for s in &self.sites {
            header.push(',');
            header.push_str(&site_name(s));
        }
        writeln!(out, "{header}")?;
        for (t, row) in self.times.iter().zip(self.rows()) {
            let mut line = t.to_string();
            for v in row {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn check_times(times: &[i64]) -> Result<()> {
    for (k, w) in times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Structure(format!(
                "day index not strictly increasing at data row {}: {} follows {}",
                k + 2,
                w[1],
                w[0]
            )));
        }
    }
    Ok(())
}

fn fmt_coord(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        v.to_string()
    }
}

/// Column name for a site at grid coordinate `(j, k)`.
pub fn site_name(c: &Coord) -> String {
    format!("s_{}_{}", fmt_coord(c[0]), fmt_coord(c[1]))
}

fn parse_site_name(name: &str) -> Option<Coord> {
    let rest = name.trim().strip_prefix("s_")?;
    let (a, b) = rest.split_once('_')?;
    Some([a.parse().ok()?, b.parse().ok()?])
}

/// Reads a dataset from any CSV source.
pub fn read_dataset<R: Read>(source: R, run_id: i64) -> Result<GridDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.get(0) != Some("day") {
        return Err(Error::Structure("first column must be `day`".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut sites = Vec::with_capacity(names.len());
    for n in &names {
        sites.push(parse_site_name(n).ok_or_else(|| {
            Error::Structure(format!("column `{n}` is not of the form s_<j>_<k>"))
        })?);
    }
    let d = sites.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != d + 1 {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        let day: i64 = record[0].parse().map_err(|_| Error::Parse {
            row,
            column: "day".into(),
            message: format!("invalid day index `{}`", &record[0]),
        })?;
        times.push(day);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: names[j].clone(),
                message: format!("invalid or missing value `{cell}`"),
            })?;
            if v.is_nan() {
                return Err(Error::Parse {
                    row,
                    column: names[j].clone(),
                    message: "NaN value".into(),
                });
            }
            values.push(v);
        }
    }
    GridDataset::new(run_id, sites, times, values)
}

/// Loads one run's CSV export.
pub fn load_dataset(path: &Path, run_id: i64) -> Result<GridDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file), run_id)
}

/// `side x side` grid coordinates `(j, k)`, `j, k = 1..=side`, row-major.
pub fn grid_coordinates(side: i64) -> Result<Vec<Coord>> {
    if side < 1 {
        return Err(Error::domain(format!("grid side must be >= 1, got {side}")));
    }
    let mut out = Vec::with_capacity((side * side) as usize);
    for j in 1..=side {
        for k in 1..=side {
            out.push([j as f64, k as f64]);
        }
    }
    Ok(out)
}

#[inline]
pub fn distance(a: &Coord, b: &Coord) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Symmetric Euclidean distance matrix, row-major `d x d`.
pub fn pairwise_distances(coords: &[Coord]) -> Result<Vec<f64>> {
    let d = coords.len();
    if d < 2 {
        return Err(Error::domain("need at least two coordinates"));
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in (i + 1)..d {
            let h = distance(&coords[i], &coords[j]);
            out[i * d + j] = h;
            out[j * d + i] = h;
        }
    }
    Ok(out)
}

/// All unordered site pairs `i < j` with their distances.
pub fn site_pairs(coords: &[Coord]) -> Vec<SitePair> {
    let mut pairs = Vec::new();
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            pairs.push(SitePair {
                i,
                j,
                distance: distance(&coords[i], &coords[j]),
            });
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ZEROS: &str = "day,s_1_1,s_1_2,s_2_1\n1,0,0,0\n2,0,0,0\n3,0,0,0\n4,0,0,0\n";

    #[test]
    fn loads_degenerate_zero_file() {
        let ds = read_dataset(ZEROS.as_bytes(), 7).unwrap();
        assert_eq!(ds.n_times(), 4);
        assert_eq!(ds.n_sites(), 3);
        assert!(ds.values().iter().all(|v| *v == 0.0));
        assert_eq!(ds.sites[2], [2.0, 1.0]);
        assert_eq!(ds.run_id, 7);
    }

    #[test]
    fn duplicated_day_is_structural_error() {
        let csv = "day,s_1_1\n1,0.5\n2,0.1\n2,0.3\n";
        assert!(matches!(read_dataset(csv.as_bytes(), 1), Err(Error::Structure(_))));
    }

    #[test]
    fn missing_cell_names_row_and_column() {
        let csv = "day,s_1_1,s_1_2\n1,0.5,1\n2,,0.3\n";
        match read_dataset(csv.as_bytes(), 1) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "s_1_1");
            }
            other => panic!("unexpected {other:?}"),
        }
        let csv = "day,s_1_1,s_1_2\n1,NaN,1\n";
        assert!(matches!(read_dataset(csv.as_bytes(), 1), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn negative_values_rejected() {
        let csv = "day,s_1_1\n1,-0.5\n";
        assert!(read_dataset(csv.as_bytes(), 1).is_err());
    }

    #[test]
    fn grid_and_distances() {
        let g = grid_coordinates(5).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], [1.0, 1.0]);
        assert_eq!(g[1], [1.0, 2.0]);
        assert_eq!(g[24], [5.0, 5.0]);
        assert_eq!(grid_coordinates(1).unwrap(), vec![[1.0, 1.0]]);
        assert!(grid_coordinates(0).is_err());
        assert_eq!(distance(&[1.0, 1.0], &[4.0, 5.0]), 5.0);
        assert_eq!(pairwise_distances(&[[0.0, 0.0], [1.0, 0.0]]).unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(pairwise_distances(&[[0.0, 0.0], [3.0, 4.0]]).unwrap()[1], 5.0);
        assert!(pairwise_distances(&[[0.0, 0.0]]).is_err());
    }

    fn coords_strategy() -> impl Strategy<Value = Vec<Coord>> {
        prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0).prop_map(|(a, b)| [a, b]), 2..12)
    }

    proptest! {
        #[test]
        fn distance_matrix_symmetric_with_triangle_inequality(coords in coords_strategy()) {
            let d = coords.len();
            let m = pairwise_distances(&coords).unwrap();
            for i in 0..d {
                prop_assert_eq!(m[i * d + i], 0.0);
                for j in 0..d {
                    // independent double loop
                    let dx = coords[i][0] - coords[j][0];
                    let dy = coords[i][1] - coords[j][1];
                    prop_assert!((m[i * d + j] - (dx * dx + dy * dy).sqrt()).abs() < 1e-12);
                    prop_assert_eq!(m[i * d + j], m[j * d + i]);
                    for k in 0..d {
                        prop_assert!(m[i * d + k] <= m[i * d + j] + m[j * d + k] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn csv_round_trip_is_bit_exact(
            vals in prop::collection::vec(0.0f64..1e6, 6..60),
            start in -100i64..100,
        ) {
            let d = 3;
            let n = vals.len() / d;
            let values = vals[..n * d].to_vec();
            let times: Vec<i64> = (0..n as i64).map(|t| start + 2 * t).collect();
            let ds = GridDataset::new(3, grid_coordinates(2).unwrap()[..3].to_vec(), times, values).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            let back = read_dataset(buf.as_slice(), 3).unwrap();
            prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            ds.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, ds);
        }
    }
}
