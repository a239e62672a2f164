use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};

use super::image::{encode_png, resize_normalize};
use super::{AttributeSchema, DataError, ImageRecord, Source, UnknownValue, ATTRIBUTE_NAMES};

/// Column order of the manifest CSV.
pub const MANIFEST_HEADER: [&str; 13] = [
    "path",
    "label",
    ATTRIBUTE_NAMES[0],
    ATTRIBUTE_NAMES[1],
    ATTRIBUTE_NAMES[2],
    ATTRIBUTE_NAMES[3],
    ATTRIBUTE_NAMES[4],
    ATTRIBUTE_NAMES[5],
    ATTRIBUTE_NAMES[6],
    ATTRIBUTE_NAMES[7],
    ATTRIBUTE_NAMES[8],
    ATTRIBUTE_NAMES[9],
    ATTRIBUTE_NAMES[10],
];

struct Row {
    line: usize,
    path: PathBuf,
    id: String,
    cell_type: Option<String>,
    attributes: BTreeMap<String, String>,
}

pub(crate) fn id_from_path(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Loads a manifest CSV. Image paths are resolved relative to the CSV's
/// directory and resized to `image_size`. Record ids are the image file
/// stems. Values outside a non-empty schema vocabulary are collected and
/// reported together; extra columns are ignored.
pub fn load_manifest(
    path: &Path,
    schema: &AttributeSchema,
    image_size: usize,
) -> Result<Vec<ImageRecord>, DataError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::io(path, io),
        other => DataError::Schema(format!("{other:?}")),
    })?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let path_col = column("path").ok_or_else(|| DataError::MissingColumn("path".into()))?;
    let label_col = column("label");
    let attr_cols = schema
        .attributes
        .iter()
        .map(|a| {
            column(&a.name)
                .map(|c| (a, c))
                .ok_or_else(|| DataError::MissingColumn(a.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut unknown = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, result) in reader.records().enumerate() {
        let line = i + 1;
        let rec = result?;
        let field = |c: usize| rec.get(c).map(str::trim).filter(|s| !s.is_empty());
        let raw_path = field(path_col).ok_or_else(|| DataError::Image {
            path: String::new(),
            reason: format!("row {line} has an empty path"),
        })?;
        let id = id_from_path(raw_path);
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(DataError::DuplicateId {
                id,
                first,
                second: line,
            });
        }
        let cell_type = label_col.and_then(field).map(str::to_string);
        if let Some(ct) = &cell_type {
            if !schema.cell_types.is_empty() && !schema.cell_types.contains(ct) {
                unknown.push(UnknownValue {
                    row: line,
                    attribute: "label".into(),
                    value: ct.clone(),
                });
            }
        }
        let mut attributes = BTreeMap::new();
        for (def, c) in &attr_cols {
            if let Some(v) = field(*c) {
                if !def.values.is_empty() && !def.values.iter().any(|x| x == v) {
                    unknown.push(UnknownValue {
                        row: line,
                        attribute: def.name.clone(),
                        value: v.to_string(),
                    });
                }
                attributes.insert(def.name.clone(), v.to_string());
            }
        }
        rows.push(Row {
            line,
            path: base.join(raw_path),
            id,
            cell_type,
            attributes,
        });
    }
    if !unknown.is_empty() {
        return Err(DataError::Vocabulary(unknown));
    }

    let pixels = parallel_map(&rows, |row| {
        let bytes = std::fs::read(&row.path).map_err(|e| DataError::Image {
            path: row.path.display().to_string(),
            reason: format!("row {}: {e}", row.line),
        })?;
        resize_normalize(&bytes, image_size).map_err(|e| DataError::Image {
            path: row.path.display().to_string(),
            reason: e.to_string(),
        })
    });
    rows.into_iter()
        .zip(pixels)
        .map(|(row, pixels)| {
            Ok(ImageRecord {
                id: row.id,
                path: Some(row.path),
                pixels: pixels?,
                cell_type: row.cell_type,
                attributes: row.attributes,
                source: Source::Seed,
            })
        })
        .collect()
}

/// Order-preserving map over scoped worker threads.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(8);
    if items.len() < 2 * workers || workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Path of `target` relative to `base`, when both are relative or both are
/// absolute; otherwise `target` unchanged.
pub(crate) fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    if target.is_absolute() != base.is_absolute() {
        return target.to_path_buf();
    }
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

/// Writes records as a manifest CSV. Records with a `path` keep it (made
/// relative to the CSV's directory); others get their pixels written to
/// `images/<id>.png` next to the CSV.
pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<(), DataError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(MANIFEST_HEADER)?;
    for r in records {
        let image_path = match &r.path {
            Some(p) => relative_to(p, &base),
            None => {
                let rel = PathBuf::from("images").join(format!("{}.png", r.id));
                let full = base.join(&rel);
                std::fs::create_dir_all(full.parent().unwrap())
                    .map_err(|e| DataError::io(&full, e))?;
                std::fs::write(&full, encode_png(&r.pixels))
                    .map_err(|e| DataError::io(&full, e))?;
                rel
            }
        };
        let mut row = vec![
            image_path.to_string_lossy().replace('\\', "/"),
            r.cell_type.clone().unwrap_or_default(),
        ];
        row.extend(
            ATTRIBUTE_NAMES
                .iter()
                .map(|n| r.attributes.get(*n).cloned().unwrap_or_default()),
        );
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}
