//! The pipeline's CSV formats.
//!
//! Every file starts with a header row, uses `,` as separator, `.` as the
//! decimal point and `\n` line endings. Readers check the header exactly and
//! report the file, 1-based line and 1-based column of the first bad field.
//! A stray `\r` stays attached to the last field and fails its parse.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crfiqa_core::evaluation::ErcPoint;
use crfiqa_core::synthdata::Template;
use crfiqa_core::{Pair, PairList, StepReport, SyntheticSample};

use crate::error::{CliError, Result};

pub const DATASET_FIXED: [&str; 4] = ["id", "label", "sigma", "true_quality"];
pub const PAIRS_HEADER: [&str; 3] = ["id_a", "id_b", "genuine"];
pub const TEMPLATES_HEADER: [&str; 3] = ["template_id", "label", "member_id"];
pub const SCORES_HEADER: [&str; 3] = ["id", "quality_raw", "quality_norm"];
pub const LOG_HEADER: [&str; 6] = [
    "iteration",
    "arc_loss",
    "cr_loss",
    "total_loss",
    "mean_ccs",
    "mean_nnccs",
];
pub const PAIR_SCORES_HEADER: [&str; 5] = ["id_a", "id_b", "genuine", "score", "pair_quality"];
pub const ERC_HEADER: [&str; 2] = ["reject_ratio", "fnmr"];

/// A parsed CSV file: header plus records with their line numbers.
pub struct Table {
    path: PathBuf,
    pub header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let file = File::open(path).map_err(CliError::io(path))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_reader(file);
        let mut records = reader.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| csv_error(path, e))?,
            None => return Err(CliError::parse(path, 1, 1, "missing header row")),
        };
        let header = header.iter().map(str::to_owned).collect();
        let rows = records
            .map(|r| r.map_err(|e| csv_error(path, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Table {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    /// Fails unless the header equals `expected`.
    pub fn expect_header(&self, expected: &[&str]) -> Result<()> {
        for (i, name) in expected.iter().enumerate() {
            match self.header.get(i) {
                Some(h) if h == name => {}
                Some(h) => {
                    return Err(CliError::parse(
                        &self.path,
                        1,
                        i + 1,
                        format!("expected column {name:?}, found {h:?}"),
                    ))
                }
                None => {
                    return Err(CliError::parse(
                        &self.path,
                        1,
                        i + 1,
                        format!("missing column {name:?}"),
                    ))
                }
            }
        }
        if self.header.len() > expected.len() {
            return Err(CliError::parse(
                &self.path,
                1,
                expected.len() + 1,
                format!("unexpected column {:?}", self.header[expected.len()]),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn line(&self, row: usize) -> u64 {
        self.rows[row].position().map_or(0, |p| p.line())
    }

    pub fn raw(&self, row: usize, col: usize) -> &str {
        &self.rows[row][col]
    }

    pub fn error(&self, row: usize, col: usize, message: impl Into<String>) -> CliError {
        CliError::parse(&self.path, self.line(row), col + 1, message)
    }

    pub fn parse<T: FromStr>(&self, row: usize, col: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(row, col);
        raw.parse().map_err(|e| {
            self.error(
                row,
                col,
                format!("column {:?}: cannot parse {raw:?}: {e}", self.header[col]),
            )
        })
    }

    pub fn real(&self, row: usize, col: usize) -> Result<f64> {
        let v: f64 = self.parse(row, col)?;
        if !v.is_finite() {
            return Err(self.error(
                row,
                col,
                format!("column {:?}: non-finite value", self.header[col]),
            ));
        }
        Ok(v)
    }

    pub fn flag(&self, row: usize, col: usize) -> Result<bool> {
        match self.raw(row, col) {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.error(
                row,
                col,
                format!("column {:?}: expected 0 or 1, found {other:?}", self.header[col]),
            )),
        }
    }
}

fn csv_error(path: &Path, err: csv::Error) -> CliError {
    let line = err.position().map_or(0, |p| p.line());
    let column = match err.kind() {
        csv::ErrorKind::Utf8 { err, .. } => err.field() + 1,
        csv::ErrorKind::UnequalLengths { len, .. } => *len as usize,
        _ => 1,
    };
    let message = match err.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => {
            format!("expected {expected_len} fields, found {len}")
        }
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".to_string(),
        _ => err.to_string(),
    };
    CliError::parse(path, line, column, message)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn real(v: f64) -> String {
    v.to_string()
}

fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = writer(path)?;
    let err = write_err(path);
    w.write_record(header).map_err(&err)?;
    for row in rows {
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn write_dataset(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.input.len());
    let mut header = owned(&DATASET_FIXED);
    header.extend((0..dim).map(|k| format!("x{k}")));
    write_rows(
        path,
        &header,
        samples.iter().map(|s| {
            let mut row = vec![
                s.id.to_string(),
                s.label.to_string(),
                real(s.sigma),
                real(s.true_quality),
            ];
            row.extend(s.input.iter().map(|&v| real(v)));
            row
        }),
    )
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticSample>> {
    let t = Table::read(path)?;
    let dim = t.header.len().saturating_sub(DATASET_FIXED.len());
    let mut expected = DATASET_FIXED.map(String::from).to_vec();
    expected.extend((0..dim.max(1)).map(|k| format!("x{k}")));
    t.expect_header(&expected.iter().map(String::as_str).collect::<Vec<_>>())?;

    let mut seen = HashMap::new();
    (0..t.len())
        .map(|r| {
            let id: u64 = t.parse(r, 0)?;
            if let Some(first) = seen.insert(id, t.line(r)) {
                return Err(t.error(r, 0, format!("duplicate id {id} (first on line {first})")));
            }
            Ok(SyntheticSample {
                id,
                label: t.parse(r, 1)?,
                sigma: t.real(r, 2)?,
                true_quality: t.real(r, 3)?,
                input: (0..dim).map(|k| t.real(r, 4 + k)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &PairList) -> Result<()> {
    write_rows(
        path,
        &owned(&PAIRS_HEADER),
        pairs.pairs.iter().map(|p| {
            vec![
                p.id_a.to_string(),
                p.id_b.to_string(),
                u8::from(p.genuine).to_string(),
            ]
        }),
    )
}

pub fn read_pairs(path: &Path) -> Result<PairList> {
    let t = Table::read(path)?;
    t.expect_header(&PAIRS_HEADER)?;
    let pairs = (0..t.len())
        .map(|r| {
            Ok(Pair {
                id_a: t.parse(r, 0)?,
                id_b: t.parse(r, 1)?,
                genuine: t.flag(r, 2)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PairList { pairs })
}

/// One row per member. A row with an empty `member_id` declares a template
/// without adding a member, so empty templates can be expressed.
pub fn write_templates(path: &Path, templates: &[Template]) -> Result<()> {
    let rows = templates.iter().flat_map(|t| {
        let head = vec![t.id.to_string(), t.label.to_string()];
        let members: Vec<Vec<String>> = if t.members.is_empty() {
            vec![[head.clone(), vec![String::new()]].concat()]
        } else {
            t.members
                .iter()
                .map(|m| [head.clone(), vec![m.to_string()]].concat())
                .collect()
        };
        members
    });
    write_rows(path, &owned(&TEMPLATES_HEADER), rows)
}

/// Templates in order of first appearance.
pub fn read_templates(path: &Path) -> Result<Vec<Template>> {
    let t = Table::read(path)?;
    t.expect_header(&TEMPLATES_HEADER)?;
    let mut out: Vec<Template> = Vec::new();
    let mut index: HashMap<u64, usize> = HashMap::new();
    for r in 0..t.len() {
        let id: u64 = t.parse(r, 0)?;
        let label: usize = t.parse(r, 1)?;
        let slot = *index.entry(id).or_insert_with(|| {
            out.push(Template {
                id,
                label,
                members: Vec::new(),
            });
            out.len() - 1
        });
        if out[slot].label != label {
            return Err(t.error(
                r,
                1,
                format!("template {id} has label {} on an earlier row", out[slot].label),
            ));
        }
        if !t.raw(r, 2).is_empty() {
            out[slot].members.push(t.parse(r, 2)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRow {
    pub id: u64,
    pub quality_raw: f64,
    pub quality_norm: f64,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_rows(
        path,
        &owned(&SCORES_HEADER),
        rows.iter()
            .map(|s| vec![s.id.to_string(), real(s.quality_raw), real(s.quality_norm)]),
    )
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let t = Table::read(path)?;
    t.expect_header(&SCORES_HEADER)?;
    let mut seen = HashMap::new();
    (0..t.len())
        .map(|r| {
            let id: u64 = t.parse(r, 0)?;
            if seen.insert(id, ()).is_some() {
                return Err(t.error(r, 0, format!("duplicate id {id}")));
            }
            Ok(ScoreRow {
                id,
                quality_raw: t.real(r, 1)?,
                quality_norm: t.real(r, 2)?,
            })
        })
        .collect()
}

pub fn write_train_log(path: &Path, rows: &[StepReport]) -> Result<()> {
    write_rows(
        path,
        &owned(&LOG_HEADER),
        rows.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                real(r.arc_loss),
                real(r.cr_loss),
                real(r.total_loss),
                real(r.mean_ccs),
                real(r.mean_nnccs),
            ]
        }),
    )
}

pub fn read_train_log(path: &Path) -> Result<Vec<StepReport>> {
    let t = Table::read(path)?;
    t.expect_header(&LOG_HEADER)?;
    (0..t.len())
        .map(|r| {
            Ok(StepReport {
                iteration: t.parse(r, 0)?,
                arc_loss: t.real(r, 1)?,
                cr_loss: t.real(r, 2)?,
                total_loss: t.real(r, 3)?,
                mean_ccs: t.real(r, 4)?,
                mean_nnccs: t.real(r, 5)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub pair: Pair,
    pub score: f64,
    pub pair_quality: f64,
}

pub fn write_pair_scores(path: &Path, rows: &[PairScore]) -> Result<()> {
    write_rows(
        path,
        &owned(&PAIR_SCORES_HEADER),
        rows.iter().map(|s| {
            vec![
                s.pair.id_a.to_string(),
                s.pair.id_b.to_string(),
                u8::from(s.pair.genuine).to_string(),
                real(s.score),
                real(s.pair_quality),
            ]
        }),
    )
}

pub fn read_pair_scores(path: &Path) -> Result<Vec<PairScore>> {
    let t = Table::read(path)?;
    t.expect_header(&PAIR_SCORES_HEADER)?;
    (0..t.len())
        .map(|r| {
            Ok(PairScore {
                pair: Pair {
                    id_a: t.parse(r, 0)?,
                    id_b: t.parse(r, 1)?,
                    genuine: t.flag(r, 2)?,
                },
                score: t.real(r, 3)?,
                pair_quality: t.real(r, 4)?,
            })
        })
        .collect()
}

pub fn write_erc(path: &Path, points: &[ErcPoint]) -> Result<()> {
    write_rows(
        path,
        &owned(&ERC_HEADER),
        points.iter().map(|p| vec![real(p.reject_ratio), real(p.fnmr)]),
    )
}

pub fn read_erc(path: &Path) -> Result<Vec<ErcPoint>> {
    let t = Table::read(path)?;
    t.expect_header(&ERC_HEADER)?;
    (0..t.len())
        .map(|r| {
            Ok(ErcPoint {
                reject_ratio: t.real(r, 0)?,
                fnmr: t.real(r, 1)?,
            })
        })
        .collect()
}
