//! Dataset container: a `key = value` text header followed by the raw
//! little-endian `f32` payload, record-major, each record `[2][n][T]`.

use std::collections::BTreeMap;
use std::path::Path;

use omcrd_core::{Dataset, Emotion, FnirsRecord, Signal, Task, CLASS_COUNT};

use crate::bytes::{put_f32s, read_file, write_file, Reader};
use crate::error::{Error, Result};

const MAGIC: &str = "OMCRD-DATASET";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let recs = data.records();
    if let Some(r) = recs.iter().find(|r| r.subject_id.contains(|c: char| c == ',' || c.is_whitespace())) {
        return Err(Error::Usage(format!(
            "subject id {:?} contains a comma or whitespace",
            r.subject_id
        )));
    }
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(",");
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let mut kv = |k: &str, v: String| header.push_str(&format!("{} = {}\n", k, v));
    kv("version", DATASET_VERSION.to_string());
    kv("task", data.task().name().into());
    kv("channels", data.channels().to_string());
    kv("samples", data.samples().to_string());
    kv("sample_rate_hz", data.sample_rate_hz().to_string());
    kv("record_count", recs.len().to_string());
    kv("class_names", Emotion::NAMES.join(","));
    kv("subject_ids", join(&mut recs.iter().map(|r| r.subject_id.clone())));
    kv("labels", join(&mut recs.iter().map(|r| r.label.index().to_string())));
    header.push_str("end\n");

    let per = 2 * data.channels() * data.samples();
    let mut out = header.into_bytes();
    out.reserve(recs.len() * per * 4);
    for r in recs {
        put_f32s(&mut out, r.signal.data());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let end = b"\nend\n";
    let split = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::format(path, "header terminator not found"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format(path, "not a dataset container"));
    }
    let mut fields = BTreeMap::new();
    for line in lines {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format(path, format!("bad header line {:?}", line)))?;
        if fields.insert(k, v).is_some() {
            return Err(Error::format(path, format!("duplicate key {:?}", k)));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::format(path, format!("missing key {:?}", k)))
    };
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(path, format!("{} is not an integer", k))) };

    let version = num("version")? as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let task = Task::parse(get("task")?).ok_or_else(|| Error::format(path, "unknown task"))?;
    let (n, t, count) = (num("channels")?, num("samples")?, num("record_count")?);
    let rate: f32 = get("sample_rate_hz")?
        .parse()
        .map_err(|_| Error::format(path, "bad sample_rate_hz"))?;
    if get("class_names")? != Emotion::NAMES.join(",") {
        return Err(Error::format(
            path,
            format!("class names {:?} are not the four quadrants", get("class_names")?),
        ));
    }
    let list = |k: &str| -> Result<Vec<&str>> {
        let v = get(k)?;
        let items: Vec<&str> = if v.is_empty() { Vec::new() } else { v.split(',').collect() };
        if items.len() != count {
            return Err(Error::format(
                path,
                format!("{} lists {} entries for {} records", k, items.len(), count),
            ));
        }
        Ok(items)
    };
    let subjects = list("subject_ids")?;
    let labels = list("labels")?
        .into_iter()
        .map(|s| {
            s.parse::<usize>()
                .ok()
                .and_then(Emotion::from_index)
                .ok_or_else(|| Error::format(path, format!("label {:?} is not in 0..{}", s, CLASS_COUNT)))
        })
        .collect::<Result<Vec<_>>>()?;

    let per = 2 * n * t;
    let mut rd = Reader::new(&bytes[split + end.len()..], path);
    let mut records = Vec::with_capacity(count);
    for (sid, label) in subjects.into_iter().zip(labels) {
        records.push(FnirsRecord {
            subject_id: sid.to_string(),
            task,
            label,
            signal: Signal::new(n, t, rd.f32s(per)?)?,
            sample_rate_hz: rate,
        });
    }
    rd.finish()?;
    Ok(Dataset::new(records)?)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(data)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?, path)
}
