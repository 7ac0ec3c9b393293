use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Provenance, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decimal rendering with `digits` significant digits, trailing zeros trimmed.
/// Falls back to exponent notation for very large or very small magnitudes.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{:.*e}", digits.saturating_sub(1), v);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    let v = if exp >= digits as i32 {
        let unit = 10f64.powi(exp - digits as i32 + 1);
        (v / unit).round() * unit
    } else {
        v
    };
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// Parses label-first CSV text. Labels are integers remapped to dense
/// `[0, K)` in ascending order of the original value.
pub fn parse_csv(reader: impl Read, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: "expected a label followed by at least one feature".into(),
            });
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    line,
                    msg: format!("ragged row: {} fields, expected {w}", rec.len()),
                })
            }
            _ => {}
        }
        let label: i64 = rec[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label {:?} is not an integer", &rec[0]),
        })?;
        raw_labels.push(label);
        for cell in rec.iter().skip(1) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("{cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value {cell:?}"),
                });
            }
            data.push(v);
        }
    }
    let Some(width) = width else {
        return Err(Error::Parse {
            line: 0,
            msg: "no data rows".into(),
        });
    };
    let (labels, map) = dense_labels(&raw_labels);
    let n = labels.len();
    let mut ds = Dataset::new(
        Tensor::matrix(n, width - 1, data),
        labels,
        Split::IdTrain,
        Provenance::Csv,
    )?;
    ds.num_classes = map.len();
    ds.label_map = Some(map);
    Ok(ds)
}

fn dense_labels(raw: &[i64]) -> (Vec<usize>, Vec<i64>) {
    let mut index = BTreeMap::new();
    for &l in raw {
        index.entry(l).or_insert(0usize);
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    (raw.iter().map(|l| index[l]).collect(), index.into_keys().collect())
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, has_header)
}

/// Writes `label,dim_0,...,dim_{d-1}` with `digits` significant digits. The
/// original labels are written back when the dataset carries a label map.
pub fn write_labeled_csv(
    path: impl AsRef<Path>,
    features: &Tensor,
    labels: &[usize],
    label_map: Option<&[i64]>,
    digits: usize,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("label");
    for j in 0..features.cols() {
        out.push_str(&format!(",dim_{j}"));
    }
    out.push('\n');
    for (i, &l) in labels.iter().enumerate() {
        match label_map {
            Some(m) => out.push_str(&m[l].to_string()),
            None => out.push_str(&l.to_string()),
        }
        for &v in features.row(i) {
            out.push(',');
            out.push_str(&format_sig(v, digits));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl IdxReader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format(format!("{} file truncated in header", self.what)))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn rest(&self, len: usize) -> Result<&[u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            Error::Format(format!(
                "{} file truncated: need {len} payload bytes, have {}",
                self.what,
                self.bytes.len() - self.pos
            ))
        })
    }
}

/// Parses an IDX image/label pair (MNIST layout). Pixels are scaled to
/// `[0, 1]`; labels are remapped to dense classes.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut ri = IdxReader {
        bytes: images,
        pos: 0,
        what: "image",
    };
    let magic = ri.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let (n, rows, cols) = (ri.u32()? as usize, ri.u32()? as usize, ri.u32()? as usize);
    let pixels = ri.rest(n * rows * cols)?;

    let mut rl = IdxReader {
        bytes: labels,
        pos: 0,
        what: "label",
    };
    let magic = rl.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = rl.u32()? as usize;
    if n_labels != n {
        return Err(Error::Format(format!("image count {n} != label count {n_labels}")));
    }
    let raw: Vec<i64> = rl.rest(n)?.iter().map(|&b| b as i64).collect();
    if n == 0 || rows * cols == 0 {
        return Err(Error::Format("IDX file holds no data".into()));
    }

    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let (dense, map) = dense_labels(&raw);
    let mut ds = Dataset::new(
        Tensor::matrix(n, rows * cols, data),
        dense,
        Split::IdTrain,
        Provenance::Idx,
    )?;
    ds.num_classes = map.len();
    ds.label_map = Some(map);
    Ok(ds)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_sig_examples() {
        assert_eq!(format_sig(0.0, 6), "0");
        assert_eq!(format_sig(1.0, 6), "1");
        assert_eq!(format_sig(0.123456789, 6), "0.123457");
        assert_eq!(format_sig(-12.3456789, 6), "-12.3457");
        assert_eq!(format_sig(123456789.0, 6), "123457000");
        assert_eq!(format_sig(1.5e-9, 6), "1.50000e-9");
        assert_eq!(format_sig(0.1234567891234, 9), "0.123456789");
    }

    #[test]
    fn csv_basic_and_remap() {
        let text = "3,0.5,1\n7,2,3\n7,4,5\n";
        let ds = parse_csv(text.as_bytes(), false).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));
        assert_eq!(ds.labels, vec![0, 1, 1]);
        assert_eq!(ds.label_map.as_deref(), Some(&[3i64, 7][..]));
        assert_eq!(ds.num_classes, 2);

        let ds = parse_csv("label,a,b\n1,2,3\n".as_bytes(), true).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn csv_errors() {
        match parse_csv("0,1,2\n1,2\n".as_bytes(), false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_csv("0,abc\n".as_bytes(), false),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_csv("0,NaN\n".as_bytes(), false),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(parse_csv("".as_bytes(), false), Err(Error::Parse { .. })));
    }

    fn idx_pair(n: u32, rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, n] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn idx_parse() {
        let (img, lab) = idx_pair(10, 28, 28);
        assert_eq!(u32::from_be_bytes(img[..4].try_into().unwrap()), 2051);
        assert_eq!(u32::from_be_bytes(lab[..4].try_into().unwrap()), 2049);
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!((ds.len(), ds.dim()), (10, 784));
        assert_eq!(ds.features.get(0, 255), 1.0);
        assert_eq!(ds.features.get(0, 0), 0.0);
        assert_eq!(ds.labels[3], 3);
    }

    #[test]
    fn idx_errors() {
        let (mut img, lab) = idx_pair(2, 2, 2);
        assert!(parse_idx(&lab, &lab).is_err());
        let (_, lab3) = idx_pair(3, 2, 2);
        assert!(matches!(parse_idx(&img, &lab3), Err(Error::Format(_))));
        img.pop();
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format(_))));
    }
}
