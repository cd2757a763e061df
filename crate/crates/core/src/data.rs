//! Dataset representation, CSV ingestion and pairwise distances.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by the haversine metric, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// How the two coordinate columns are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordFrame {
    /// (latitude, longitude) in decimal degrees.
    Geographic,
    /// (x, y) in meters.
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Haversine,
    Euclidean,
}

/// Column-name map for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub id: String,
    /// Latitude, or planar x.
    pub coord_a: String,
    /// Longitude, or planar y.
    pub coord_b: String,
    pub cluster: String,
    pub z: String,
    pub y: String,
    pub covariate_prefix: String,
    pub frame: CoordFrame,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            coord_a: "lat".into(),
            coord_b: "lon".into(),
            cluster: "cluster".into(),
            z: "z".into(),
            y: "y".into(),
            covariate_prefix: "x_".into(),
            frame: CoordFrame::Geographic,
        }
    }
}

/// Units with coordinates, cluster labels, covariates (intercept first),
/// binary treatment and an optional outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    ids: Vec<String>,
    frame: CoordFrame,
    coords: Vec<[f64; 2]>,
    cluster: Vec<usize>,
    cluster_labels: Vec<String>,
    covariate_names: Vec<String>,
    x: DMatrix<f64>,
    z: Vec<bool>,
    y: Option<DVector<f64>>,
}

/// Raw column-oriented input accepted by [`SpatialDataset::new`].
#[derive(Debug, Clone, Default)]
pub struct DatasetParts {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub cluster: Vec<String>,
    /// Covariates without an intercept column; one inner vector per covariate.
    pub covariates: Vec<(String, Vec<f64>)>,
    pub z: Vec<bool>,
    pub y: Option<Vec<f64>>,
}

impl SpatialDataset {
    /// Validates the parts and prepends the intercept column.
    pub fn new(frame: CoordFrame, parts: DatasetParts) -> Result<Self> {
        let n = parts.ids.len();
        if n == 0 {
            return Err(Error::InvalidDataset("empty dataset".into()));
        }
        let check_len = |what: &str, len: usize| {
            if len != n {
                Err(Error::Dimension(format!("{what} has length {len}, expected {n}")))
            } else {
                Ok(())
            }
        };
        check_len("coords", parts.coords.len())?;
        check_len("cluster", parts.cluster.len())?;
        check_len("z", parts.z.len())?;
        if let Some(y) = &parts.y {
            check_len("y", y.len())?;
        }

        let mut seen = HashMap::with_capacity(n);
        for (row, id) in parts.ids.iter().enumerate() {
            if seen.insert(id.as_str(), row).is_some() {
                return Err(Error::DuplicateId { row: row + 1, id: id.clone() });
            }
        }
        for (row, c) in parts.coords.iter().enumerate() {
            for (k, v) in c.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        row: row + 1,
                        column: if k == 0 { "coord_a" } else { "coord_b" }.into(),
                        value: v.to_string(),
                    });
                }
            }
        }
        let p = parts.covariates.len() + 1;
        let mut x = DMatrix::from_element(n, p, 1.0);
        for (j, (name, col)) in parts.covariates.iter().enumerate() {
            check_len(name, col.len())?;
            for (row, v) in col.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        row: row + 1,
                        column: name.clone(),
                        value: v.to_string(),
                    });
                }
                x[(row, j + 1)] = *v;
            }
            if col.iter().all(|&v| v == 1.0) {
                return Err(Error::InvalidDataset(format!(
                    "covariate `{name}` is a constant ones column; the intercept is added automatically"
                )));
            }
        }
        let y = match parts.y {
            Some(y) => {
                if let Some((row, v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite { row: row + 1, column: "y".into(), value: v.to_string() });
                }
                Some(DVector::from_vec(y))
            }
            None => None,
        };

        let n_treated = parts.z.iter().filter(|&&t| t).count();
        if n_treated == 0 || n_treated == n {
            return Err(Error::InvalidDataset(
                "treatment must contain at least one treated and one control unit".into(),
            ));
        }
        if n < p + 2 {
            return Err(Error::InvalidDataset(format!(
                "n = {n} units is too few for p = {p} columns plus treatment"
            )));
        }

        // dense codes in first-appearance order
        let mut codes: HashMap<&str, usize> = HashMap::new();
        let mut cluster_labels = Vec::new();
        let cluster = parts
            .cluster
            .iter()
            .map(|label| {
                *codes.entry(label.as_str()).or_insert_with(|| {
                    cluster_labels.push(label.clone());
                    cluster_labels.len() - 1
                })
            })
            .collect();

        let mut covariate_names = vec!["intercept".to_string()];
        covariate_names.extend(parts.covariates.iter().map(|(name, _)| name.clone()));

        Ok(Self {
            ids: parts.ids,
            frame,
            coords: parts.coords,
            cluster,
            cluster_labels,
            covariate_names,
            x,
            z: parts.z,
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Number of columns of X, intercept included.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn frame(&self) -> CoordFrame {
        self.frame
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Dense cluster codes, first-appearance order.
    pub fn cluster(&self) -> &[usize] {
        &self.cluster
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    /// Covariate names, starting with `"intercept"`.
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    /// Treatment as a 0/1 vector.
    pub fn z_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.z.iter().map(|&t| if t { 1.0 } else { 0.0 }))
    }

    pub fn y(&self) -> Option<&DVector<f64>> {
        self.y.as_ref()
    }

    pub fn require_y(&self) -> Result<&DVector<f64>> {
        self.y
            .as_ref()
            .ok_or_else(|| Error::InvalidDataset("outcome column required".into()))
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|&&t| t).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.z[i]).collect()
    }

    /// Same units and design with a different outcome.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::Dimension(format!("outcome length {} != n = {}", y.len(), self.n())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite outcome".into()));
        }
        let mut out = self.clone();
        out.y = Some(y);
        Ok(out)
    }

    pub fn without_outcome(&self) -> Self {
        let mut out = self.clone();
        out.y = None;
        out
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            n: self.n(),
            p: self.p(),
            n_treated: self.n_treated(),
            n_control: self.n_control(),
            frame: self.frame,
            covariates: self.covariate_names.clone(),
            has_outcome: self.y.is_some(),
            cluster_codes: self
                .cluster_labels
                .iter()
                .enumerate()
                .map(|(code, label)| (label.clone(), code))
                .collect(),
        }
    }
}

/// JSON echo of a loaded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub p: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub frame: CoordFrame,
    pub covariates: Vec<String>,
    pub has_outcome: bool,
    pub cluster_codes: BTreeMap<String, usize>,
}

/// Reads a dataset from CSV.
///
/// Covariate columns are the headers starting with `schema.covariate_prefix`;
/// they enter X in lexicographic header order so the result does not depend
/// on column order in the file.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<SpatialDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: &Schema) -> Result<SpatialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find(&schema.id)?;
    let a_col = find(&schema.coord_a)?;
    let b_col = find(&schema.coord_b)?;
    let cluster_col = find(&schema.cluster)?;
    let z_col = find(&schema.z)?;
    let y_col = headers.iter().position(|h| h == schema.y);

    let mut cov_cols: Vec<(String, usize)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with(&schema.covariate_prefix) && h.len() > schema.covariate_prefix.len())
        .map(|(i, h)| (h[schema.covariate_prefix.len()..].to_string(), i))
        .collect();
    cov_cols.sort();

    let mut parts = DatasetParts {
        covariates: cov_cols.iter().map(|(name, _)| (name.clone(), Vec::new())).collect(),
        y: y_col.map(|_| Vec::new()),
        ..Default::default()
    };

    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        let field = |col: usize| record.get(col).unwrap_or("");
        let number = |col: usize| -> Result<f64> {
            let raw = field(col);
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::NonFinite { row, column: headers[col].to_string(), value: raw.to_string() }),
            }
        };
        parts.ids.push(field(id_col).to_string());
        parts.coords.push([number(a_col)?, number(b_col)?]);
        parts.cluster.push(field(cluster_col).to_string());
        let z = match field(z_col) {
            "0" => false,
            "1" => true,
            other => return Err(Error::NonBinaryTreatment { row, value: other.to_string() }),
        };
        parts.z.push(z);
        if let (Some(col), Some(y)) = (y_col, parts.y.as_mut()) {
            y.push(number(col)?);
        }
        for (k, (_, col)) in cov_cols.iter().enumerate() {
            parts.covariates[k].1.push(number(*col)?);
        }
    }
    SpatialDataset::new(schema.frame, parts)
}

/// Writes a dataset in the same layout [`load_dataset`] reads.
pub fn write_dataset<W: std::io::Write>(ds: &SpatialDataset, writer: W, schema: &Schema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.id.clone(),
        schema.coord_a.clone(),
        schema.coord_b.clone(),
        schema.cluster.clone(),
        schema.z.clone(),
    ];
    if ds.y().is_some() {
        header.push(schema.y.clone());
    }
    for name in &ds.covariate_names()[1..] {
        header.push(format!("{}{}", schema.covariate_prefix, name));
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![
            ds.ids[i].clone(),
            ds.coords[i][0].to_string(),
            ds.coords[i][1].to_string(),
            ds.cluster_labels[ds.cluster[i]].clone(),
            if ds.z[i] { "1" } else { "0" }.to_string(),
        ];
        if let Some(y) = ds.y() {
            rec.push(y[i].to_string());
        }
        for j in 1..ds.p() {
            rec.push(ds.x[(i, j)].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Symmetric matrix of pairwise distances in meters with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(DMatrix<f64>);

impl DistanceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// Great-circle distance in meters between two (lat, lon) points in degrees.
pub fn haversine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
    let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn euclidean(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn pairwise_distances(ds: &SpatialDataset, metric: DistanceMetric) -> Result<DistanceMatrix> {
    distances_from_coords(ds.coords(), ds.frame(), metric)
}

pub fn distances_from_coords(
    coords: &[[f64; 2]],
    frame: CoordFrame,
    metric: DistanceMetric,
) -> Result<DistanceMatrix> {
    let f: fn([f64; 2], [f64; 2]) -> f64 = match (metric, frame) {
        (DistanceMetric::Haversine, CoordFrame::Geographic) => haversine,
        (DistanceMetric::Euclidean, CoordFrame::Planar) => euclidean,
        (m, fr) => {
            return Err(Error::InvalidArgument(format!(
                "metric {m:?} does not match coordinate frame {fr:?}"
            )))
        }
    };
    let n = coords.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = f(coords[i], coords[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(DistanceMatrix(d))
}

/// Natural metric for a frame.
pub fn default_metric(frame: CoordFrame) -> DistanceMetric {
    match frame {
        CoordFrame::Geographic => DistanceMetric::Haversine,
        CoordFrame::Planar => DistanceMetric::Euclidean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "id,lat,lon,cluster,z,y,x_a\n\
                       u1,40.0,-74.0,NJ,1,1.5,0.2\n\
                       u2,40.1,-74.1,NJ,0,1.0,0.4\n\
                       u3,41.0,-75.0,PA,1,2.0,0.1\n\
                       u4,41.2,-75.3,PA,0,0.5,0.9\n";

    #[test]
    fn loads_toy_with_intercept() {
        let ds = read_dataset(TOY.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.p(), 2);
        assert!(ds.x().column(0).iter().all(|&v| v == 1.0));
        assert_eq!(ds.covariate_names(), &["intercept", "a"]);
        assert_eq!(ds.cluster(), &[0, 0, 1, 1]);
        assert_eq!(ds.meta().cluster_codes["PA"], 1);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let csv = TOY.replace("u3,41.0,-75.0,PA,1", "u3,41.0,-75.0,PA,2");
        let err = read_dataset(csv.as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::NonBinaryTreatment { row: 3, .. }));
        assert_eq!(err.to_string(), "non-binary treatment at row 3: `2`");
    }

    #[test]
    fn rejects_missing_column_duplicate_and_nonfinite() {
        let no_z = "id,lat,lon,cluster\nu1,0,0,a\n";
        assert!(matches!(read_dataset(no_z.as_bytes(), &Schema::default()), Err(Error::MissingColumn(c)) if c == "z"));

        let dup = TOY.replace("u4,", "u1,");
        assert!(matches!(
            read_dataset(dup.as_bytes(), &Schema::default()),
            Err(Error::DuplicateId { row: 4, .. })
        ));

        let nan = TOY.replace("0.4\n", "NaN\n");
        assert!(matches!(
            read_dataset(nan.as_bytes(), &Schema::default()),
            Err(Error::NonFinite { row: 2, .. })
        ));
    }

    #[test]
    fn rejects_ones_column_and_single_arm() {
        let ones = TOY.replace("x_a", "x_one").replace(",0.2\n", ",1\n").replace(",0.4\n", ",1\n")
            .replace(",0.1\n", ",1\n").replace(",0.9\n", ",1\n");
        assert!(matches!(read_dataset(ones.as_bytes(), &Schema::default()), Err(Error::InvalidDataset(_))));

        let all_treated = TOY.replace("NJ,0", "NJ,1").replace("PA,0", "PA,1");
        assert!(matches!(
            read_dataset(all_treated.as_bytes(), &Schema::default()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn reordered_columns_give_identical_dataset() {
        let reordered = "x_b,z,cluster,x_a,lon,id,y,lat\n\
                         3,1,NJ,0.2,-74.0,u1,1.5,40.0\n\
                         4,0,NJ,0.4,-74.1,u2,1.0,40.1\n\
                         5,1,PA,0.1,-75.0,u3,2.0,41.0\n\
                         7,0,PA,0.9,-75.3,u4,0.5,41.2\n\
                         2,0,NY,0.6,-73.9,u5,0.8,40.7\n";
        let canonical = "id,lat,lon,cluster,z,y,x_a,x_b\n\
                         u1,40.0,-74.0,NJ,1,1.5,0.2,3\n\
                         u2,40.1,-74.1,NJ,0,1.0,0.4,4\n\
                         u3,41.0,-75.0,PA,1,2.0,0.1,5\n\
                         u4,41.2,-75.3,PA,0,0.5,0.9,7\n\
                         u5,40.7,-73.9,NY,0,0.8,0.6,2\n";
        let a = read_dataset(reordered.as_bytes(), &Schema::default()).unwrap();
        let b = read_dataset(canonical.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(a.ids(), b.ids());
        assert_eq!(a.coords(), b.coords());
        assert_eq!(a.cluster(), b.cluster());
        assert_eq!(a.covariate_names(), b.covariate_names());
        assert_eq!(a.x(), b.x());
        assert_eq!(a.z(), b.z());
        assert_eq!(a.y(), b.y());
        assert_eq!(a, b);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(haversine([12.0, 7.0], [12.0, 7.0]), 0.0);
        let quarter = haversine([0.0, 0.0], [0.0, 90.0]);
        let expected = std::f64::consts::FRAC_PI_2 * EARTH_RADIUS_M;
        assert!((quarter - expected).abs() < 1.0);
        assert!((quarter - 10_007_543.0).abs() < 1.0);
        assert_eq!(euclidean([0.0, 0.0], [3.0, 4.0]), 5.0);
    }

    #[test]
    fn metric_must_match_frame() {
        let ds = read_dataset(TOY.as_bytes(), &Schema::default()).unwrap();
        assert!(pairwise_distances(&ds, DistanceMetric::Euclidean).is_err());
        let d = pairwise_distances(&ds, DistanceMetric::Haversine).unwrap();
        assert_eq!(d.matrix(), &d.matrix().transpose());
        assert!((0..4).all(|i| d.get(i, i) == 0.0));
    }
}
