use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One cell of one tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub tile_id: String,
    pub cell_id: u32,
    pub centroid: (f64, f64),
    pub mean_expr: Vec<f64>,
    /// Present once gated; `NaN` for markers not gated yet.
    pub posterior: Option<Vec<f64>>,
    pub label: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellTable {
    pub markers: Vec<String>,
    pub rows: Vec<CellRow>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    tile_id: String,
    cell_id: u32,
    centroid: [f64; 2],
    expr: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    posterior: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<serde_json::Map<String, serde_json::Value>>,
}

impl CellTable {
    pub fn new(markers: Vec<String>) -> Self {
        Self { markers, rows: Vec::new() }
    }

    pub fn marker_index(&self, marker: &str) -> Option<usize> {
        self.markers.iter().position(|m| m == marker)
    }

    pub fn is_gated(&self) -> bool {
        self.rows.iter().all(|r| r.label.is_some())
    }

    /// Labels of one marker; un-gated rows count as negative.
    pub fn labels(&self, marker: usize) -> Vec<bool> {
        self.rows
            .iter()
            .map(|r| r.label.as_ref().is_some_and(|l| l[marker]))
            .collect()
    }

    pub fn expression_column(&self, marker: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_expr[marker]).collect()
    }

    /// Rows grouped by tile id, in first-appearance order.
    pub fn rows_by_tile(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            let g = *index.entry(row.tile_id.clone()).or_insert_with(|| {
                groups.push((row.tile_id.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        groups
    }

    /// CSV with columns `tile_id, cell_id, centroid_x, centroid_y,
    /// expr_<m>..., post_<m>..., label_<m>...`. `preamble` lines are written
    /// first as `#` comments.
    pub fn write_csv<W: Write>(&self, writer: W, preamble: &[String]) -> Result<()> {
        let mut writer = writer;
        for line in preamble {
            writeln!(writer, "# {line}").map_err(|e| Error::io("<csv>", e))?;
        }
        let gated = self.is_gated() && !self.rows.is_empty();
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["tile_id".to_string(), "cell_id".into(), "centroid_x".into(), "centroid_y".into()];
        header.extend(self.markers.iter().map(|m| format!("expr_{m}")));
        if gated {
            header.extend(self.markers.iter().map(|m| format!("post_{m}")));
            header.extend(self.markers.iter().map(|m| format!("label_{m}")));
        }
        csv.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.tile_id.clone(),
                row.cell_id.to_string(),
                row.centroid.0.to_string(),
                row.centroid.1.to_string(),
            ];
            rec.extend(row.mean_expr.iter().map(f64::to_string));
            if gated {
                let post = row.posterior.as_ref().expect("gated row");
                rec.extend(post.iter().map(f64::to_string));
                let label = row.label.as_ref().expect("gated row");
                rec.extend(label.iter().map(|&l| u8::from(l).to_string()));
            }
            csv.write_record(&rec)?;
        }
        csv.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let header = csv.headers()?.clone();
        let markers: Vec<String> = header
            .iter()
            .filter_map(|h| h.strip_prefix("expr_").map(str::to_string))
            .collect();
        let m = markers.len();
        let gated = header.iter().any(|h| h.starts_with("label_"));
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::format("<csv>", format!("bad number `{s}`: {e}")))
        };
        let mut rows = Vec::new();
        for rec in csv.records() {
            let rec = rec?;
            if rec.len() != 4 + m * if gated { 3 } else { 1 } {
                return Err(Error::format("<csv>", "row length does not match header"));
            }
            let cell_id = rec[1]
                .parse::<u32>()
                .map_err(|e| Error::format("<csv>", format!("bad cell id: {e}")))?;
            let mean_expr = (0..m).map(|j| parse(&rec[4 + j])).collect::<Result<Vec<_>>>()?;
            let (posterior, label) = if gated {
                let p = (0..m).map(|j| parse(&rec[4 + m + j])).collect::<Result<Vec<_>>>()?;
                let l = (0..m).map(|j| &rec[4 + 2 * m + j] == "1").collect();
                (Some(p), Some(l))
            } else {
                (None, None)
            };
            rows.push(CellRow {
                tile_id: rec[0].to_string(),
                cell_id,
                centroid: (parse(&rec[2])?, parse(&rec[3])?),
                mean_expr,
                posterior,
                label,
            });
        }
        Ok(Self { markers, rows })
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        let to_map = |vals: &mut dyn Iterator<Item = serde_json::Value>| {
            self.markers.iter().cloned().zip(vals).collect::<serde_json::Map<_, _>>()
        };
        for row in &self.rows {
            let rec = JsonRow {
                tile_id: row.tile_id.clone(),
                cell_id: row.cell_id,
                centroid: [row.centroid.0, row.centroid.1],
                expr: to_map(&mut row.mean_expr.iter().map(|&v| v.into())),
                posterior: row.posterior.as_ref().map(|p| to_map(&mut p.iter().map(|&v| v.into()))),
                label: row.label.as_ref().map(|l| to_map(&mut l.iter().map(|&v| v.into()))),
            };
            serde_json::to_writer(&mut writer, &rec)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }

    /// Read JSONL rows; `markers` fixes the column order.
    pub fn read_jsonl<R: BufRead>(reader: R, markers: Vec<String>) -> Result<Self> {
        let mut rows = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io("<jsonl>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonRow = serde_json::from_str(&line)?;
            let pick = |map: &serde_json::Map<String, serde_json::Value>| -> Result<Vec<serde_json::Value>> {
                markers
                    .iter()
                    .map(|m| map.get(m).cloned().ok_or_else(|| Error::format("<jsonl>", format!("missing marker {m}"))))
                    .collect()
            };
            let num = |v: serde_json::Value| v.as_f64().unwrap_or(f64::NAN);
            rows.push(CellRow {
                tile_id: rec.tile_id,
                cell_id: rec.cell_id,
                centroid: (rec.centroid[0], rec.centroid[1]),
                mean_expr: pick(&rec.expr)?.into_iter().map(num).collect(),
                posterior: rec.posterior.as_ref().map(&pick).transpose()?.map(|v| v.into_iter().map(num).collect()),
                label: rec
                    .label
                    .as_ref()
                    .map(pick)
                    .transpose()?
                    .map(|v| v.into_iter().map(|x| x.as_bool().unwrap_or(false)).collect()),
            });
        }
        Ok(Self { markers, rows })
    }

    pub fn save_csv(&self, path: &Path, preamble: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), preamble)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> CellTable {
        CellTable {
            markers: vec!["CD45".into(), "CD3".into()],
            rows: vec![
                CellRow {
                    tile_id: "t0".into(),
                    cell_id: 1,
                    centroid: (1.5, 2.25),
                    mean_expr: vec![0.1, 1.0 / 3.0],
                    posterior: Some(vec![0.9, 0.2]),
                    label: Some(vec![true, false]),
                },
                CellRow {
                    tile_id: "t1".into(),
                    cell_id: 4,
                    centroid: (0.0, 7.0),
                    mean_expr: vec![12.0, 0.0],
                    posterior: Some(vec![0.4, 0.6]),
                    label: Some(vec![false, true]),
                },
            ],
        }
    }

    #[test]
    fn csv_round_trip_with_preamble() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &["config_hash=abc seed=1".into()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# config_hash=abc"));
        assert!(text.contains("expr_CD45,expr_CD3,post_CD45,post_CD3,label_CD45,label_CD3"));
        assert_eq!(CellTable::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn jsonl_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
        assert_eq!(CellTable::read_jsonl(buf.as_slice(), t.markers.clone()).unwrap(), t);
    }

    #[test]
    fn groups_by_tile() {
        let t = table();
        let g = t.rows_by_tile();
        assert_eq!(g, vec![("t0".to_string(), vec![0]), ("t1".to_string(), vec![1])]);
    }
}
