//! Two-file dataset format: an edge list plus a delimited attribute table,
//! described by a small TOML descriptor.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, SensitiveAttribute, SplitConfig};
use crate::tensor::Matrix;

/// Column semantics and split policy for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    /// Edge list path, relative to the descriptor's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_file: Option<PathBuf>,
    /// Attribute table path, relative to the descriptor's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_file: Option<PathBuf>,
    pub label: String,
    /// Sensitive attribute columns; the first is the one stripped by default.
    pub sensitive: Vec<String>,
    #[serde(default)]
    pub drop: Vec<String>,
    /// Column holding node ids referenced by the edge file. Without it the
    /// edge file refers to 0-based row positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// `column -> threshold`: values `>= threshold` become 1, others 0.
    /// For the label column negative values stay unknown.
    #[serde(default)]
    pub binarize: BTreeMap<String, f64>,
    /// Per-column z-scoring of feature columns.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub splits: SplitConfig,
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

impl DatasetMeta {
    pub fn from_toml_file(path: &Path) -> Result<Self, GraphError> {
        let text = read_to_string(path)?;
        toml::from_str(&text).map_err(|e| GraphError::Parse {
            file: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    /// Resolves the edge and attribute paths relative to `base`.
    pub fn resolve_files(&self, base: &Path) -> Result<(PathBuf, PathBuf), GraphError> {
        let edges = self
            .edge_file
            .as_ref()
            .ok_or_else(|| GraphError::InvalidParameter("descriptor has no edge_file".into()))?;
        let attrs = self
            .attribute_file
            .as_ref()
            .ok_or_else(|| GraphError::InvalidParameter("descriptor has no attribute_file".into()))?;
        Ok((base.join(edges), base.join(attrs)))
    }
}

/// A loaded graph together with the original node identifiers, indexed by
/// the dense node id.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub graph: Graph,
    pub original_ids: Vec<String>,
}

impl LoadedDataset {
    /// Writes `dense_id,original_id` lines.
    pub fn write_id_mapping(&self, path: &Path) -> Result<(), GraphError> {
        let mut out = String::from("node,original_id\n");
        for (i, id) in self.original_ids.iter().enumerate() {
            out.push_str(&format!("{i},{id}\n"));
        }
        write_file(path, out.as_bytes())
    }
}

fn read_to_string(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), GraphError> {
    let io_err = |source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

pub fn load_dataset(edge_file: &Path, attribute_file: &Path, meta: &DatasetMeta) -> Result<Graph, GraphError> {
    load_dataset_with_ids(edge_file, attribute_file, meta).map(|d| d.graph)
}

pub fn load_dataset_with_ids(
    edge_file: &Path,
    attribute_file: &Path,
    meta: &DatasetMeta,
) -> Result<LoadedDataset, GraphError> {
    meta.splits.validate()?;
    let table = read_attribute_table(attribute_file, meta)?;
    let n = table.labels.len();
    let edges = read_edges(edge_file, &table.id_index, n)?;
    let splits = meta.splits.draw(&table.labels)?;
    let graph = Graph::from_edges(
        n,
        &edges,
        table.attributes,
        table.feature_names,
        table.sensitive,
        table.labels,
        splits,
    )?;
    Ok(LoadedDataset {
        graph,
        original_ids: table.original_ids,
    })
}

struct AttributeTable {
    attributes: Matrix,
    feature_names: Vec<String>,
    sensitive: Vec<SensitiveAttribute>,
    labels: Vec<Option<u8>>,
    original_ids: Vec<String>,
    /// `None` when the edge file uses row positions.
    id_index: Option<HashMap<String, usize>>,
}

fn read_attribute_table(path: &Path, meta: &DatasetMeta) -> Result<AttributeTable, GraphError> {
    let file = path.display().to_string();
    let delimiter = u8::try_from(meta.delimiter)
        .map_err(|_| GraphError::InvalidParameter(format!("delimiter `{}` is not ASCII", meta.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(&file, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&file, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GraphError::MissingColumn(name.to_string()))
    };
    let label_col = position(&meta.label)?;
    let id_col = meta.id_column.as_deref().map(position).transpose()?;
    let sensitive_cols: Vec<usize> = meta.sensitive.iter().map(|s| position(s)).collect::<Result<_, _>>()?;
    let dropped: Vec<usize> = meta.drop.iter().map(|s| position(s)).collect::<Result<_, _>>()?;
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|c| *c != label_col && Some(*c) != id_col && !dropped.contains(c))
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut sens_values: Vec<Vec<u8>> = vec![Vec::new(); sensitive_cols.len()];
    let mut labels = Vec::new();
    let mut original_ids = Vec::new();
    let mut id_index: HashMap<String, usize> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&file, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(GraphError::Parse {
                file,
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let number = |col: usize| -> Result<f64, GraphError> {
            record[col].parse::<f64>().map_err(|_| GraphError::Parse {
                file: file.clone(),
                line,
                message: format!("column `{}`: `{}` is not a number", header[col], &record[col]),
            })
        };

        let node = labels.len();
        let id = match id_col {
            Some(c) => record[c].to_string(),
            None => node.to_string(),
        };
        if id_col.is_some() && id_index.insert(id.clone(), node).is_some() {
            return Err(GraphError::DuplicateNode { file, line, id });
        }
        original_ids.push(id);

        rows.push(feature_cols.iter().map(|&c| number(c)).collect::<Result<_, _>>()?);

        let raw_label = &record[label_col];
        let label = if raw_label.is_empty() {
            None
        } else {
            let v = number(label_col)?;
            binary_value(v, meta.binarize.get(&meta.label).copied(), true).ok_or_else(|| {
                GraphError::NonBinary {
                    file: file.clone(),
                    line,
                    column: meta.label.clone(),
                    value: raw_label.to_string(),
                }
            })?
        };
        labels.push(label);

        for (k, &c) in sensitive_cols.iter().enumerate() {
            let v = number(c)?;
            let b = binary_value(v, meta.binarize.get(&header[c]).copied(), false)
                .flatten()
                .ok_or_else(|| GraphError::NonBinary {
                    file: file.clone(),
                    line,
                    column: header[c].clone(),
                    value: record[c].to_string(),
                })?;
            sens_values[k].push(b);
        }
    }

    let n = rows.len();
    let d = feature_cols.len();
    let mut attributes = Matrix::from_vec(n, d, rows.into_iter().flatten().collect())?;
    if meta.standardize {
        standardize_columns(&mut attributes);
    }
    let sensitive = meta
        .sensitive
        .iter()
        .zip(&sensitive_cols)
        .zip(sens_values)
        .map(|((name, &c), values)| SensitiveAttribute {
            name: name.clone(),
            values,
            column: feature_cols.iter().position(|&f| f == c),
        })
        .collect();
    Ok(AttributeTable {
        attributes,
        feature_names: feature_cols.iter().map(|&c| header[c].clone()).collect(),
        sensitive,
        labels,
        original_ids,
        id_index: id_col.map(|_| id_index),
    })
}

/// Maps a raw value to `Some(Some(b))` for binary, `Some(None)` for an
/// unknown label, and `None` when the value is not acceptable.
fn binary_value(v: f64, threshold: Option<f64>, allow_unknown: bool) -> Option<Option<u8>> {
    if allow_unknown && v < 0.0 {
        return Some(None);
    }
    match threshold {
        Some(t) => Some(Some(u8::from(v >= t))),
        None if v == 0.0 => Some(Some(0)),
        None if v == 1.0 => Some(Some(1)),
        None => None,
    }
}

fn standardize_columns(x: &mut Matrix) {
    let (n, d) = x.shape();
    if n == 0 {
        return;
    }
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for r in 0..n {
            let centered = x.get(r, c) - mean;
            x.set(r, c, if std > 0.0 { centered / std } else { centered });
        }
    }
}

fn csv_error(file: &str, e: csv::Error) -> GraphError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    GraphError::Parse {
        file: file.to_string(),
        line,
        message: e.to_string(),
    }
}

fn read_edges(
    path: &Path,
    ids: &Option<HashMap<String, usize>>,
    num_nodes: usize,
) -> Result<Vec<(usize, usize)>, GraphError> {
    let file = path.display().to_string();
    let text = read_to_string(path)?;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.len() != 2 {
            return Err(GraphError::Parse {
                file,
                line,
                message: format!("expected two node ids, found {} fields", tokens.len()),
            });
        }
        let mut endpoints = [0usize; 2];
        for (slot, tok) in endpoints.iter_mut().zip(&tokens) {
            if tok.parse::<i64>().is_err() {
                return Err(GraphError::Parse {
                    file,
                    line,
                    message: format!("`{tok}` is not an integer node id"),
                });
            }
            *slot = match ids {
                Some(map) => *map.get(*tok).ok_or_else(|| GraphError::DanglingNode {
                    file: file.clone(),
                    line,
                    id: tok.to_string(),
                })?,
                None => tok
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v < num_nodes)
                    .ok_or_else(|| GraphError::DanglingNode {
                        file: file.clone(),
                        line,
                        id: tok.to_string(),
                    })?,
            };
        }
        edges.push((endpoints[0], endpoints[1]));
    }
    Ok(edges)
}

/// Writes `graph` as `edges.txt`, `nodes.csv` and `meta.toml` under `dir`.
/// The descriptor disables standardisation so a reload reproduces the
/// attribute values exactly.
pub fn write_dataset(graph: &Graph, dir: &Path, name: &str, splits: SplitConfig) -> Result<DatasetMeta, GraphError> {
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut edges = String::from("# undirected edge list, one pair per line\n");
    for (u, v) in graph.edge_list() {
        edges.push_str(&format!("{u} {v}\n"));
    }
    write_file(&dir.join("edges.txt"), edges.as_bytes())?;

    let extra: Vec<&SensitiveAttribute> = graph
        .sensitive_attributes()
        .iter()
        .filter(|s| s.column.is_none())
        .collect();
    let label_name = "label";
    let mut header: Vec<String> = graph.attribute_names().to_vec();
    header.extend(extra.iter().map(|s| s.name.clone()));
    header.push(label_name.to_string());
    let mut table = header.join(",");
    table.push('\n');
    for i in 0..graph.num_nodes() {
        let mut fields: Vec<String> = graph.attributes().row(i).iter().map(|v| format!("{v}")).collect();
        fields.extend(extra.iter().map(|s| s.values[i].to_string()));
        fields.push(match graph.labels()[i] {
            Some(y) => y.to_string(),
            None => "-1".to_string(),
        });
        table.push_str(&fields.join(","));
        table.push('\n');
    }
    write_file(&dir.join("nodes.csv"), table.as_bytes())?;

    let meta = DatasetMeta {
        name: name.to_string(),
        edge_file: Some("edges.txt".into()),
        attribute_file: Some("nodes.csv".into()),
        label: label_name.to_string(),
        sensitive: graph.sensitive_attributes().iter().map(|s| s.name.clone()).collect(),
        drop: extra.iter().map(|s| s.name.clone()).collect(),
        id_column: None,
        delimiter: ',',
        binarize: BTreeMap::new(),
        standardize: false,
        splits,
    };
    let text = toml::to_string(&meta).map_err(|e| GraphError::InvalidParameter(e.to_string()))?;
    write_file(&dir.join("meta.toml"), text.as_bytes())?;
    Ok(meta)
}
