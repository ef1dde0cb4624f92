use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diary::DiaryStore;
use crate::logpack::Value;
use crate::scheduler::AnswerValue;
use crate::store::{Store, StoreError};
use crate::study::{SensorCatalog, SensorSpec, ValueKind};
use crate::TsMs;

pub const ANSWERS_TABLE: &str = "answers";
pub const TELEMETRY_TABLE: &str = "telemetry";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub name: String,
    pub row_count: u64,
    pub file: String,
    pub schema_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub export_id: String,
    pub created_at: TsMs,
    pub from: TsMs,
    pub to: TsMs,
    pub tables: Vec<TableEntry>,
}

impl ExportManifest {
    pub fn table(&self, name: &str) -> Option<&TableEntry> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Serialize)]
struct Column {
    name: String,
    #[serde(rename = "type")]
    ty: &'static str,
}

#[derive(Serialize)]
struct Schema<'a> {
    table: &'a str,
    columns: &'a [Column],
    row_order: &'a [&'a str],
}

fn col(name: impl Into<String>, ty: &'static str) -> Column {
    Column { name: name.into(), ty }
}

fn type_name(kind: ValueKind) -> &'static str {
    match kind {
        ValueKind::Numeric => "f64",
        ValueKind::Boolean => "bool",
        ValueKind::Text => "str",
    }
}

/// Writer that hashes what passes through it.
struct Hashing<W> {
    inner: W,
    hash: Sha256,
}

impl<W: Write> Write for Hashing<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hash.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct Table {
    name: String,
    file: String,
    schema_hash: String,
    rows: u64,
    writer: csv::Writer<Hashing<BufWriter<fs::File>>>,
}

impl Table {
    fn create(dir: &Path, name: &str, columns: &[Column], row_order: &[&str]) -> io::Result<Self> {
        let header: Vec<String> = columns.iter().map(|c| format!("{}:{}", c.name, c.ty)).collect();
        let schema_hash = hex::encode(&Sha256::digest(header.join(",").as_bytes())[..8]);
        let schema = Schema {
            table: name,
            columns,
            row_order,
        };
        fs::write(
            dir.join(format!("{name}.schema.json")),
            serde_json::to_vec_pretty(&schema).expect("schema serializes"),
        )?;
        let file = format!("{name}.csv");
        let sink = Hashing {
            inner: BufWriter::new(fs::File::create(dir.join(&file))?),
            hash: Sha256::new(),
        };
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
        writer.write_record(&header)?;
        Ok(Self {
            name: name.to_string(),
            file,
            schema_hash,
            rows: 0,
            writer,
        })
    }

    fn row<I, T>(&mut self, fields: I) -> io::Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.rows += 1;
        self.writer.write_record(fields).map_err(io::Error::other)
    }

    /// Closes the file; returns the manifest entry and the content hash.
    fn finish(self) -> io::Result<(TableEntry, [u8; 32])> {
        let sink = self.writer.into_inner().map_err(|e| e.into_error())?;
        let mut inner = sink.inner;
        inner.flush()?;
        Ok((
            TableEntry {
                name: self.name,
                row_count: self.rows,
                file: self.file,
                schema_hash: self.schema_hash,
            },
            sink.hash.finalize().into(),
        ))
    }
}

fn sensor_columns(spec: &SensorSpec) -> Vec<Column> {
    let mut cols = vec![col("pseudonym", "str"), col("ts_ms", "i64")];
    for i in 1..=spec.value_arity {
        cols.push(col(format!("value_{i}"), type_name(spec.value_kind)));
    }
    cols
}

fn value_field(v: &Value) -> String {
    v.to_string()
}

/// Writes one table per sensor with data in `[from, to)` plus the answers and
/// telemetry tables, then `manifest.json`. Rows are ordered by pseudonym,
/// then time. Sensors without rows get no table; the answers and telemetry
/// tables are always written.
pub fn export_tables(
    store: &Store,
    diary: &DiaryStore,
    from: TsMs,
    to: TsMs,
    out: &Path,
    created_at: TsMs,
) -> Result<ExportManifest, StoreError> {
    fs::create_dir_all(out)?;
    let mut pseudonyms = store.pseudonyms();
    pseudonyms.sort();
    let mut entries = Vec::new();
    let mut id_hash = Sha256::new();
    id_hash.update(from.to_be_bytes());
    id_hash.update(to.to_be_bytes());

    for spec in SensorCatalog::standard().entries() {
        let holders: Vec<_> = pseudonyms
            .iter()
            .copied()
            .filter(|&p| store.partitions(p).iter().any(|part| part.sensor_id == spec.id))
            .collect();
        if holders.is_empty() {
            continue;
        }
        let name = spec.slug();
        let mut table = Table::create(out, &name, &sensor_columns(spec), &["pseudonym", "ts_ms"])?;
        let mut failed = None;
        for p in holders {
            let ps = p.to_hex();
            store.scan_range(p, spec.id, from, to, |r| {
                if failed.is_some() {
                    return;
                }
                let mut fields = Vec::with_capacity(2 + r.values.len());
                fields.push(ps.clone());
                fields.push(r.ts_ms.to_string());
                fields.extend(r.values.iter().map(value_field));
                if let Err(e) = table.row(&fields) {
                    failed = Some(e);
                }
            })?;
        }
        if let Some(e) = failed {
            return Err(e.into());
        }
        if table.rows == 0 {
            drop(table);
            fs::remove_file(out.join(format!("{name}.csv")))?;
            fs::remove_file(out.join(format!("{name}.schema.json")))?;
            continue;
        }
        let (entry, h) = table.finish()?;
        id_hash.update(h);
        entries.push(entry);
    }

    let mut answers = diary.all();
    answers.retain(|(_, a)| (from..to).contains(&a.answer.episode_start));
    answers.sort_by_key(|(p, a)| (*p, a.answer.episode_start, a.answer.kind as u8, a.telemetry.notified_at));

    let mut table = Table::create(
        out,
        ANSWERS_TABLE,
        &[
            col("task_id", "str"),
            col("pseudonym", "str"),
            col("episode_start", "i64"),
            col("codebook", "str"),
            col("code", "i64"),
            col("open_text", "str"),
        ],
        &["pseudonym", "episode_start", "codebook"],
    )?;
    for (p, a) in &answers {
        let mut items = a.answer.answers.clone();
        items.sort_by_key(|i| i.codebook);
        for item in items {
            let (code, text) = match item.value {
                AnswerValue::Code(c) => (c.to_string(), String::new()),
                AnswerValue::OpenText(t) => (String::new(), t),
            };
            table.row([
                a.answer.task_id.to_hex(),
                p.to_hex(),
                a.answer.episode_start.to_string(),
                item.codebook.as_str().to_string(),
                code,
                text,
            ])?;
        }
    }
    let (entry, h) = table.finish()?;
    id_hash.update(h);
    entries.push(entry);

    let mut table = Table::create(
        out,
        TELEMETRY_TABLE,
        &[
            col("task_id", "str"),
            col("pseudonym", "str"),
            col("episode_start", "i64"),
            col("notified_at", "i64"),
            col("reaction_ms", "i64"),
            col("completion_ms", "i64"),
            col("delivered_offline", "bool"),
        ],
        &["pseudonym", "episode_start"],
    )?;
    for (p, a) in &answers {
        let t = &a.telemetry;
        table.row([
            t.task_id.to_hex(),
            p.to_hex(),
            a.answer.episode_start.to_string(),
            t.notified_at.to_string(),
            t.reaction_ms.to_string(),
            t.completion_ms.to_string(),
            t.delivered_offline.to_string(),
        ])?;
    }
    let (entry, h) = table.finish()?;
    id_hash.update(h);
    entries.push(entry);

    let manifest = ExportManifest {
        export_id: hex::encode(&id_hash.finalize()[..8]),
        created_at,
        from,
        to,
        tables: entries,
    };
    fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}
