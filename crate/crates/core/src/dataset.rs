//! Perturbation samples and per-cell baselines, with their on-disk forms:
//! a TSV index next to an "NDF1" matrix for each table.

use crate::graph::HeteroGraph;
use crate::ndf::{self, NdfMatrix};
use ndarray::Array2;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const SAMPLES_TSV: &str = "samples.tsv";
pub const SAMPLES_NDF: &str = "samples.ndf";
pub const BASELINES_TSV: &str = "baselines.tsv";
pub const BASELINES_NDF: &str = "baselines.ndf";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ndf(#[from] ndf::NdfError),
    #[error("{file} line {line}: expected {expected} tab-separated fields")]
    MalformedRow {
        file: String,
        line: usize,
        expected: usize,
    },
    #[error("{file} line {line}: row index {row} out of range for matrix with {rows} rows")]
    RowOutOfRange {
        file: String,
        line: usize,
        row: usize,
        rows: usize,
    },
    #[error("sample {index} references unknown cell '{cell_id}'")]
    UnknownCell { index: usize, cell_id: String },
    #[error("sample {index} references unknown drug '{drug_id}'")]
    UnknownDrug { index: usize, drug_id: String },
    #[error("duplicate cell id '{cell_id}' in baselines")]
    DuplicateCell { cell_id: String },
    #[error("non-finite value in {table} row {row}")]
    NonFinite { table: &'static str, row: usize },
    #[error("gene counts disagree: samples G={samples_g}, baselines G={baselines_g}")]
    WidthMismatch { samples_g: usize, baselines_g: usize },
    #[error("dataset has no samples")]
    Empty,
}

/// One (drug, cell) observation; `row` indexes the observed matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSample {
    pub drug_id: String,
    pub cell_id: String,
    pub row: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<PerturbationSample>,
    /// [S, G] observed expression, row i for samples[i].
    pub observed: Array2<f32>,
    pub cell_ids: Vec<String>,
    /// [C, G] baseline expression, row i for cell_ids[i].
    pub baselines: Array2<f32>,
    cell_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        samples: Vec<PerturbationSample>,
        observed: Array2<f32>,
        cell_ids: Vec<String>,
        baselines: Array2<f32>,
    ) -> Result<Self, DatasetError> {
        if samples.is_empty() {
            return Err(DatasetError::Empty);
        }
        if observed.ncols() != baselines.ncols() {
            return Err(DatasetError::WidthMismatch {
                samples_g: observed.ncols(),
                baselines_g: baselines.ncols(),
            });
        }
        assert_eq!(samples.len(), observed.nrows());
        assert_eq!(cell_ids.len(), baselines.nrows());
        for (row, r) in observed.rows().into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite {
                    table: "samples",
                    row,
                });
            }
        }
        for (row, r) in baselines.rows().into_iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::NonFinite {
                    table: "baselines",
                    row,
                });
            }
        }
        let mut cell_index = HashMap::new();
        for (i, id) in cell_ids.iter().enumerate() {
            if cell_index.insert(id.clone(), i).is_some() {
                return Err(DatasetError::DuplicateCell {
                    cell_id: id.clone(),
                });
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if !cell_index.contains_key(&s.cell_id) {
                return Err(DatasetError::UnknownCell {
                    index: i,
                    cell_id: s.cell_id.clone(),
                });
            }
        }
        Ok(Dataset {
            samples,
            observed,
            cell_ids,
            baselines,
            cell_index,
        })
    }

    pub fn g(&self) -> usize {
        self.observed.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn cell_row(&self, cell_id: &str) -> Option<usize> {
        self.cell_index.get(cell_id).copied()
    }

    /// Confirm every referenced drug and cell resolves as a graph node of
    /// the right type.
    pub fn validate_against(&self, graph: &HeteroGraph) -> Result<(), DatasetError> {
        use crate::graph::NodeType;
        for (i, s) in self.samples.iter().enumerate() {
            match graph.index_of(&s.drug_id) {
                Some((NodeType::Drug, _)) => {}
                _ => {
                    return Err(DatasetError::UnknownDrug {
                        index: i,
                        drug_id: s.drug_id.clone(),
                    })
                }
            }
            match graph.index_of(&s.cell_id) {
                Some((NodeType::Cell, _)) => {}
                _ => {
                    return Err(DatasetError::UnknownCell {
                        index: i,
                        cell_id: s.cell_id.clone(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| DatasetError::Io {
                path: path.clone(),
                source,
            }
        };
        let samples_tsv = dir.join(SAMPLES_TSV);
        let mut text = String::from("drug_id\tcell_id\trow\n");
        for s in &self.samples {
            text.push_str(&format!("{}\t{}\t{}\n", s.drug_id, s.cell_id, s.row));
        }
        std::fs::write(&samples_tsv, text).map_err(io(&samples_tsv))?;
        ndf::write(
            &dir.join(SAMPLES_NDF),
            &NdfMatrix::new(1, self.g() as u32, self.observed.clone()),
        )?;

        let baselines_tsv = dir.join(BASELINES_TSV);
        let mut text = String::from("cell_id\trow\n");
        for (i, id) in self.cell_ids.iter().enumerate() {
            text.push_str(&format!("{id}\t{i}\n"));
        }
        std::fs::write(&baselines_tsv, text).map_err(io(&baselines_tsv))?;
        ndf::write(
            &dir.join(BASELINES_NDF),
            &NdfMatrix::new(1, self.g() as u32, self.baselines.clone()),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let read = |path: &Path| {
            std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let observed = ndf::read(&dir.join(SAMPLES_NDF))?.values;
        let baselines = ndf::read(&dir.join(BASELINES_NDF))?.values;

        let samples_path = dir.join(SAMPLES_TSV);
        let mut samples = Vec::new();
        for (line_no, line) in read(&samples_path)?.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = DatasetError::MalformedRow {
                file: SAMPLES_TSV.into(),
                line: line_no + 1,
                expected: 3,
            };
            if fields.len() != 3 {
                return Err(malformed);
            }
            let row: usize = fields[2].parse().map_err(|_| malformed)?;
            if row >= observed.nrows() {
                return Err(DatasetError::RowOutOfRange {
                    file: SAMPLES_TSV.into(),
                    line: line_no + 1,
                    row,
                    rows: observed.nrows(),
                });
            }
            samples.push(PerturbationSample {
                drug_id: fields[0].to_string(),
                cell_id: fields[1].to_string(),
                row,
            });
        }

        let baselines_path = dir.join(BASELINES_TSV);
        let mut cell_ids = Vec::new();
        for (line_no, line) in read(&baselines_path)?.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = DatasetError::MalformedRow {
                file: BASELINES_TSV.into(),
                line: line_no + 1,
                expected: 2,
            };
            if fields.len() != 2 {
                return Err(malformed);
            }
            let row: usize = fields[1].parse().map_err(|_| malformed)?;
            if row >= baselines.nrows() {
                return Err(DatasetError::RowOutOfRange {
                    file: BASELINES_TSV.into(),
                    line: line_no + 1,
                    row,
                    rows: baselines.nrows(),
                });
            }
            cell_ids.push(fields[0].to_string());
        }
        Dataset::new(samples, observed, cell_ids, baselines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            vec![
                PerturbationSample {
                    drug_id: "d0".into(),
                    cell_id: "c0".into(),
                    row: 0,
                },
                PerturbationSample {
                    drug_id: "d1".into(),
                    cell_id: "c1".into(),
                    row: 1,
                },
            ],
            array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]],
            vec!["c0".into(), "c1".into()],
            array![[0.1f32, 0.2, 0.3], [0.4, 0.5, 0.6]],
        )
        .unwrap()
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let d = toy();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.samples, d.samples);
        assert_eq!(back.observed, d.observed);
        assert_eq!(back.cell_ids, d.cell_ids);
        assert_eq!(back.baselines, d.baselines);
        assert_eq!(back.cell_row("c1"), Some(1));
        assert_eq!(back.g(), 3);
    }

    #[test]
    fn rejects_unknown_cell_and_nan() {
        let err = Dataset::new(
            vec![PerturbationSample {
                drug_id: "d0".into(),
                cell_id: "nope".into(),
                row: 0,
            }],
            array![[1.0f32]],
            vec!["c0".into()],
            array![[0.0f32]],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::UnknownCell { .. }));

        let err = Dataset::new(
            vec![PerturbationSample {
                drug_id: "d0".into(),
                cell_id: "c0".into(),
                row: 0,
            }],
            array![[f32::NAN]],
            vec!["c0".into()],
            array![[0.0f32]],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::NonFinite { .. }));
    }

    #[test]
    fn rejects_mismatched_gene_counts() {
        let err = Dataset::new(
            vec![PerturbationSample {
                drug_id: "d0".into(),
                cell_id: "c0".into(),
                row: 0,
            }],
            array![[1.0f32, 2.0]],
            vec!["c0".into()],
            array![[0.0f32]],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::WidthMismatch { .. }));
    }
}
