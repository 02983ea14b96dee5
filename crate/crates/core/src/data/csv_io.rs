//! Long-format CSV: `sample_id,time,<channels…>[,<labels…>]`, one row per
//! time step, empty cells meaning missing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prep::encode_ordinal;
use super::{MultiSeries, Target};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schema {
    pub channels: Vec<String>,
    pub labels: Vec<String>,
    /// Category order of each categorical channel.
    pub categories: BTreeMap<String, Vec<String>>,
    /// Name of an appended channel holding `time − first time` of each sample.
    pub hours_channel: Option<String>,
}

impl Schema {
    pub fn channel_names(&self) -> Vec<String> {
        let mut names = self.channels.clone();
        names.extend(self.hours_channel.clone());
        names
    }
}

/// A sample before imputation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub sample_id: String,
    pub times: Vec<f64>,
    /// `C × T`, `None` where missing.
    pub values: Vec<Vec<Option<f64>>>,
    pub channel_names: Vec<String>,
    pub labels: Option<Vec<f64>>,
}

struct Row {
    time: f64,
    time_text: String,
    cells: Vec<Option<String>>,
    labels: Vec<Option<String>>,
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Vec<RawSample>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.first().map(String::as_str) != Some("sample_id") || headers.get(1).map(String::as_str) != Some("time") {
        return Err(Error::Data("header must start with `sample_id,time`".into()));
    }
    let mut channel_col = vec![None; schema.channels.len()];
    let mut label_col = vec![None; schema.labels.len()];
    for (i, h) in headers.iter().enumerate().skip(2) {
        if let Some(c) = schema.channels.iter().position(|n| n == h) {
            channel_col[c] = Some(i);
        } else if let Some(l) = schema.labels.iter().position(|n| n == h) {
            label_col[l] = Some(i);
        } else {
            return Err(Error::UnknownColumn(h.clone()));
        }
    }
    let missing: Vec<&str> = schema
        .channels
        .iter()
        .chain(&schema.labels)
        .zip(channel_col.iter().chain(&label_col))
        .filter(|(_, c)| c.is_none())
        .map(|(n, _)| n.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("columns missing from header: {}", missing.join(", "))));
    }
    let cell = |rec: &csv::StringRecord, i: Option<usize>| -> Option<String> {
        let v = rec.get(i.expect("checked")).unwrap_or("").trim();
        (!v.is_empty()).then(|| v.to_string())
    };

    let mut groups: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").to_string();
        let time_text = rec.get(1).unwrap_or("").trim().to_string();
        let time: f64 = time_text
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| Error::Data(format!("sample `{id}`: time `{time_text}` is not a number")))?;
        groups.entry(id).or_default().push(Row {
            time,
            time_text,
            cells: channel_col.iter().map(|&c| cell(&rec, c)).collect(),
            labels: label_col.iter().map(|&c| cell(&rec, c)).collect(),
        });
    }

    let mut out = Vec::with_capacity(groups.len());
    for (id, mut rows) in groups {
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(w) = rows.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(Error::DuplicateRow { sample: id, time: w[1].time_text.clone() });
        }
        let mut values = Vec::with_capacity(schema.channels.len() + 1);
        for (c, name) in schema.channels.iter().enumerate() {
            let raw: Vec<Option<&str>> = rows.iter().map(|r| r.cells[c].as_deref()).collect();
            let col = match schema.categories.get(name) {
                Some(order) => encode_ordinal(&raw, order, name)?,
                None => {
                    raw.iter()
                        .map(|v| {
                            v.map(|s| {
                                s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                                    Error::Data(format!("sample `{id}`: `{s}` in `{name}` is not a number"))
                                })
                            })
                            .transpose()
                        })
                        .collect::<Result<_>>()?
                }
            };
            values.push(col);
        }
        let times: Vec<f64> = rows.iter().map(|r| r.time).collect();
        if schema.hours_channel.is_some() {
            values.push(times.iter().map(|t| Some(t - times[0])).collect());
        }
        let labels = if schema.labels.is_empty() {
            None
        } else {
            let mut ls = Vec::with_capacity(schema.labels.len());
            for (l, name) in schema.labels.iter().enumerate() {
                let v = rows
                    .iter()
                    .find_map(|r| r.labels[l].as_deref())
                    .ok_or_else(|| Error::Data(format!("sample `{id}` has no value for label `{name}`")))?;
                let y: f64 = v
                    .parse()
                    .map_err(|_| Error::Data(format!("sample `{id}`: label `{name}` = `{v}` is not a number")))?;
                ls.push(y);
            }
            Some(ls)
        };
        out.push(RawSample { sample_id: id, times, values, channel_names: schema.channel_names(), labels });
    }
    Ok(out)
}

/// Writes samples in the long format read by [`load_csv`]; time is the step index.
/// Label targets become label columns named `label0…`; forecast targets are not written.
pub fn write_csv(path: &Path, samples: &[MultiSeries]) -> Result<Schema> {
    let first = samples.first().ok_or_else(|| Error::Data("nothing to write".into()))?;
    let labels = first.labels().map_or(0, <[f64]>::len);
    let schema = Schema {
        channels: first.channel_names.clone(),
        labels: (0..labels).map(|i| format!("label{i}")).collect(),
        ..Schema::default()
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string(), "time".to_string()];
    header.extend(schema.channels.iter().cloned());
    header.extend(schema.labels.iter().cloned());
    w.write_record(&header)?;
    for s in samples {
        s.validate()?;
        if s.channel_names != schema.channels {
            return Err(Error::Data(format!("sample `{}` has a different channel set", s.sample_id)));
        }
        let ls = s.labels().unwrap_or(&[]);
        for t in 0..s.len() {
            let mut rec = vec![s.sample_id.clone(), t.to_string()];
            rec.extend(s.x.iter().map(|row| format!("{:?}", row[t])));
            rec.extend(ls.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(schema)
}

impl RawSample {
    pub fn into_series(self, x: Vec<Vec<f64>>) -> MultiSeries {
        MultiSeries {
            sample_id: self.sample_id,
            channel_names: self.channel_names,
            x,
            y: self.labels.map_or(Target::None, Target::Labels),
        }
    }
}
