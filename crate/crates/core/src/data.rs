//! Datasets of raw observations, embeddings, labels and attributes.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Split {
    #[default]
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::MetaTrain => "meta-train",
            Split::MetaVal => "meta-val",
            Split::MetaTest => "meta-test",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Split::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta-train" | "train" => Ok(Split::MetaTrain),
            "meta-val" | "val" => Ok(Split::MetaVal),
            "meta-test" | "test" => Ok(Split::MetaTest),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Row-major boolean matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} attribute bits for a {rows}x{cols} matrix",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    raw: Mat,
    embeddings: Option<Mat>,
    labels: Option<Vec<usize>>,
    attributes: Option<BoolMatrix>,
    splits: Vec<Split>,
}

impl DataSet {
    /// Builds a dataset with every row tagged meta-train.
    pub fn new(
        raw: Mat,
        embeddings: Option<Mat>,
        labels: Option<Vec<usize>>,
        attributes: Option<BoolMatrix>,
    ) -> Result<Self> {
        let n = raw.rows();
        Self::with_splits(raw, embeddings, labels, attributes, vec![Split::MetaTrain; n])
    }

    pub fn with_splits(
        raw: Mat,
        embeddings: Option<Mat>,
        labels: Option<Vec<usize>>,
        attributes: Option<BoolMatrix>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = raw.rows();
        let check = |what: &str, rows: usize| {
            if rows != n {
                Err(Error::Data(format!("row count mismatch: {what} has {rows} rows, raw has {n}")))
            } else {
                Ok(())
            }
        };
        if let Some(e) = &embeddings {
            check("embeddings", e.rows())?;
        }
        if let Some(l) = &labels {
            check("labels", l.len())?;
        }
        if let Some(a) = &attributes {
            check("attributes", a.rows())?;
        }
        check("split tags", splits.len())?;
        if !raw.is_finite() || embeddings.as_ref().is_some_and(|e| !e.is_finite()) {
            return Err(Error::Data("non-finite values in dataset".into()));
        }
        Ok(Self {
            raw,
            embeddings,
            labels,
            attributes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw(&self) -> &Mat {
        &self.raw
    }

    pub fn embeddings(&self) -> Option<&Mat> {
        self.embeddings.as_ref()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn attributes(&self) -> Option<&BoolMatrix> {
        self.attributes.as_ref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// One past the largest label, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn require_embeddings(&self) -> Result<&Mat> {
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no embeddings".into()))
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))
    }

    pub fn replace_embeddings(&self, embeddings: Mat) -> Result<Self> {
        Self::with_splits(
            self.raw.clone(),
            Some(embeddings),
            self.labels.clone(),
            self.attributes.clone(),
            self.splits.clone(),
        )
    }

    pub fn replace_raw(&self, raw: Mat) -> Result<Self> {
        Self::with_splits(
            raw,
            self.embeddings.clone(),
            self.labels.clone(),
            self.attributes.clone(),
            self.splits.clone(),
        )
    }

    pub fn with_split_tags(&self, splits: Vec<Split>) -> Result<Self> {
        Self::with_splits(
            self.raw.clone(),
            self.embeddings.clone(),
            self.labels.clone(),
            self.attributes.clone(),
            splits,
        )
    }
}

/// Which per-row vector a model or clustering reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Representation {
    #[default]
    Raw,
    Embedding,
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::Raw => "raw",
            Representation::Embedding => "embedding",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Representation::Raw),
            "embedding" | "emb" => Ok(Representation::Embedding),
            _ => Err(Error::Config(format!("unknown representation `{s}`"))),
        }
    }
}

impl DataSet {
    pub fn features(&self, repr: Representation) -> Result<&Mat> {
        match repr {
            Representation::Raw => Ok(&self.raw),
            Representation::Embedding => self.require_embeddings(),
        }
    }
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Binary,
    Csv,
}

impl DataFormat {
    /// `.csv` is CSV, anything else is the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Binary,
        }
    }
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const FLAG_LABELS: u8 = 1;
const FLAG_SPLITS: u8 = 2;

/// Encodes `EMB1`: magic, `u64` n, d_in, d_z, A, a flags byte, then raw and
/// embedding rows as `f64`, labels as `i32`, attributes bit-packed per row
/// (LSB first) and one split byte per row.
pub fn encode_binary(ds: &DataSet) -> Vec<u8> {
    let n = ds.len();
    let d_z = ds.embeddings.as_ref().map_or(0, Mat::cols);
    let a = ds.attributes.as_ref().map_or(0, BoolMatrix::cols);
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    for v in [n, ds.raw.cols(), d_z, a] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let mut flags = FLAG_SPLITS;
    if ds.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    buf.push(flags);
    for v in ds.raw.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(e) = &ds.embeddings {
        for v in e.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(l) = &ds.labels {
        for &v in l {
            buf.extend_from_slice(&(v as i32).to_le_bytes());
        }
    }
    if let Some(attrs) = &ds.attributes {
        for r in 0..n {
            let mut packed = vec![0u8; a.div_ceil(8)];
            for (c, &b) in attrs.row(r).iter().enumerate() {
                if b {
                    packed[c / 8] |= 1 << (c % 8);
                }
            }
            buf.extend_from_slice(&packed);
        }
    }
    buf.extend(ds.splits.iter().map(|s| s.code()));
    buf
}

pub fn decode_binary(bytes: &[u8]) -> Result<DataSet> {
    if bytes.len() < 37 || &bytes[..4] != EMB_MAGIC {
        return Err(Error::Data("malformed header: not an EMB1 file".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, d_in, d_z, a) = (word(0), word(1), word(2), word(3));
    let flags = bytes[36];
    if flags & !(FLAG_LABELS | FLAG_SPLITS) != 0 {
        return Err(Error::Data(format!("malformed header: unknown flags {flags:#x}")));
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let has_splits = flags & FLAG_SPLITS != 0;
    let expected = (|| {
        let mut total = 37usize;
        total = total.checked_add(n.checked_mul(d_in)?.checked_mul(8)?)?;
        total = total.checked_add(n.checked_mul(d_z)?.checked_mul(8)?)?;
        if has_labels {
            total = total.checked_add(n.checked_mul(4)?)?;
        }
        total = total.checked_add(n.checked_mul(a.div_ceil(8))?)?;
        if has_splits {
            total = total.checked_add(n)?;
        }
        Some(total)
    })()
    .ok_or_else(|| Error::Data("malformed header: sizes overflow".into()))?;
    if expected != bytes.len() {
        return Err(Error::Data(format!(
            "row count mismatch: header declares {n} rows ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let mut pos = 37;
    let mut floats = |count: usize| {
        let out: Vec<f64> = bytes[pos..pos + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += count * 8;
        out
    };
    let raw = Mat::from_vec(n, d_in, floats(n * d_in))?;
    let embeddings = if d_z > 0 {
        Some(Mat::from_vec(n, d_z, floats(n * d_z))?)
    } else {
        None
    };
    let labels = if has_labels {
        let mut out = Vec::with_capacity(n);
        for (i, c) in bytes[pos..pos + 4 * n].chunks_exact(4).enumerate() {
            let v = i32::from_le_bytes(c.try_into().expect("4 bytes"));
            if v < 0 {
                return Err(Error::Data(format!("label out of range: row {i} has label {v}")));
            }
            out.push(v as usize);
        }
        pos += 4 * n;
        Some(out)
    } else {
        None
    };
    let attributes = if a > 0 {
        let stride = a.div_ceil(8);
        let mut bits = Vec::with_capacity(n * a);
        for r in 0..n {
            let row = &bytes[pos + r * stride..pos + (r + 1) * stride];
            bits.extend((0..a).map(|c| row[c / 8] >> (c % 8) & 1 == 1));
        }
        pos += n * stride;
        Some(BoolMatrix::new(n, a, bits)?)
    } else {
        None
    };
    let splits = if has_splits {
        bytes[pos..pos + n]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Split::from_code(c).ok_or_else(|| Error::Data(format!("row {i}: invalid split tag {c}")))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![Split::MetaTrain; n]
    };
    DataSet::with_splits(raw, embeddings, labels, attributes, splits)
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` prints the shortest representation that parses back exactly.
    format!("{v:?}")
}

pub fn encode_csv(ds: &DataSet) -> String {
    let mut header: Vec<String> = (0..ds.raw.cols()).map(|i| format!("raw_{i}")).collect();
    if let Some(e) = &ds.embeddings {
        header.extend((0..e.cols()).map(|i| format!("emb_{i}")));
    }
    if ds.labels.is_some() {
        header.push("label".into());
    }
    if let Some(a) = &ds.attributes {
        header.extend((0..a.cols()).map(|i| format!("attr_{i}")));
    }
    header.push("split".into());
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..ds.len() {
        let mut fields: Vec<String> = ds.raw.row(r).iter().map(|&v| fmt_f64(v)).collect();
        if let Some(e) = &ds.embeddings {
            fields.extend(e.row(r).iter().map(|&v| fmt_f64(v)));
        }
        if let Some(l) = &ds.labels {
            fields.push(l[r].to_string());
        }
        if let Some(a) = &ds.attributes {
            fields.extend(a.row(r).iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        }
        fields.push(ds.splits[r].to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Column {
    Raw(usize),
    Emb(usize),
    Label,
    Attr(usize),
    Split,
}

fn parse_header(line: &str) -> Result<Vec<Column>> {
    let mut cols = Vec::new();
    for name in line.split(',').map(str::trim) {
        let indexed = |prefix: &str| -> Option<Result<usize>> {
            name.strip_prefix(prefix).map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Data(format!("malformed header: bad column `{name}`")))
            })
        };
        let col = if name == "label" {
            Column::Label
        } else if name == "split" {
            Column::Split
        } else if let Some(i) = indexed("raw_") {
            Column::Raw(i?)
        } else if let Some(i) = indexed("emb_") {
            Column::Emb(i?)
        } else if let Some(i) = indexed("attr_") {
            Column::Attr(i?)
        } else {
            return Err(Error::Data(format!("malformed header: unknown column `{name}`")));
        };
        cols.push(col);
    }
    // Indexed families must be exactly 0..d.
    for (family, pick) in [
        ("raw_", (|c: &Column| if let Column::Raw(i) = c { Some(*i) } else { None }) as fn(&Column) -> Option<usize>),
        ("emb_", |c: &Column| if let Column::Emb(i) = c { Some(*i) } else { None }),
        ("attr_", |c: &Column| if let Column::Attr(i) = c { Some(*i) } else { None }),
    ] {
        let idx: Vec<usize> = cols.iter().filter_map(pick).collect();
        let set: BTreeSet<usize> = idx.iter().copied().collect();
        if set.len() != idx.len() || set.iter().copied().ne(0..idx.len()) {
            return Err(Error::Data(format!(
                "malformed header: {family} columns must be numbered 0..{} without gaps or repeats",
                idx.len()
            )));
        }
    }
    if !cols.iter().any(|c| matches!(c, Column::Raw(_))) {
        return Err(Error::Data("malformed header: no raw_ columns".into()));
    }
    if cols.iter().filter(|c| matches!(c, Column::Label)).count() > 1
        || cols.iter().filter(|c| matches!(c, Column::Split)).count() > 1
    {
        return Err(Error::Data("malformed header: duplicate label or split column".into()));
    }
    Ok(cols)
}

pub fn decode_csv(text: &str) -> Result<DataSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("malformed header: empty file".into()))?;
    let cols = parse_header(header)?;
    let count = |f: fn(&Column) -> bool| cols.iter().filter(|c| f(c)).count();
    let d_in = count(|c| matches!(c, Column::Raw(_)));
    let d_z = count(|c| matches!(c, Column::Emb(_)));
    let a = count(|c| matches!(c, Column::Attr(_)));
    let has_label = count(|c| matches!(c, Column::Label)) == 1;

    let (mut raw, mut emb, mut labels, mut attrs, mut splits) = (vec![], vec![], vec![], vec![], vec![]);
    for (r, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "row count mismatch: data row {r} has {} fields, header has {}",
                fields.len(),
                cols.len()
            )));
        }
        let (mut raw_row, mut emb_row, mut attr_row) = (vec![0.0; d_in], vec![0.0; d_z], vec![false; a]);
        let mut split = Split::MetaTrain;
        for (col, field) in cols.iter().zip(&fields) {
            let num = || {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {r}: `{field}` is not a number")))
            };
            match *col {
                Column::Raw(i) => raw_row[i] = num()?,
                Column::Emb(i) => emb_row[i] = num()?,
                Column::Attr(i) => {
                    attr_row[i] = match *field {
                        "1" | "true" => true,
                        "0" | "false" => false,
                        _ => return Err(Error::Data(format!("row {r}: attribute `{field}` is not boolean"))),
                    }
                }
                Column::Label => {
                    let v: i64 = field
                        .parse()
                        .map_err(|_| Error::Data(format!("row {r}: label `{field}` is not an integer")))?;
                    if v < 0 || v > i32::MAX as i64 {
                        return Err(Error::Data(format!("label out of range: row {r} has label {v}")));
                    }
                    labels.push(v as usize);
                }
                Column::Split => split = field.parse()?,
            }
        }
        raw.extend(raw_row);
        emb.extend(emb_row);
        attrs.extend(attr_row);
        splits.push(split);
    }
    let n = splits.len();
    DataSet::with_splits(
        Mat::from_vec(n, d_in, raw)?,
        (d_z > 0).then(|| Mat::from_vec(n, d_z, emb)).transpose()?,
        has_label.then_some(labels),
        (a > 0).then(|| BoolMatrix::new(n, a, attrs)).transpose()?,
        splits,
    )
}

pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<DataSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        DataFormat::Binary => decode_binary(&bytes),
        DataFormat::Csv => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Data("CSV is not valid UTF-8".into()))?;
            decode_csv(&text)
        }
    }
}

pub fn save_dataset(ds: &DataSet, path: impl AsRef<Path>, format: DataFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        DataFormat::Binary => encode_binary(ds),
        DataFormat::Csv => encode_csv(ds).into_bytes(),
    };
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Every row of a listed class goes to that class's split.
    ByClass {
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
    /// Rows are shuffled and cut by fraction.
    ByFraction { train: f64, val: f64, test: f64 },
    /// Rows are cut by fraction; attribute index ranges are reserved per
    /// split for attribute-defined tasks.
    ByAttributeRange {
        fractions: [f64; 3],
        attributes: [Range<usize>; 3],
    },
}

impl SplitSpec {
    /// Attribute indices reserved for `split` (by_attribute_range only).
    pub fn attribute_indices(&self, split: Split) -> Option<Vec<usize>> {
        match self {
            SplitSpec::ByAttributeRange { attributes, .. } => Some(attributes[split as usize].clone().collect()),
            _ => None,
        }
    }
}

fn fraction_tags(n: usize, f: [f64; 3], rng: &mut impl Rng) -> Result<Vec<Split>> {
    if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
    }
    let n_train = (f[0] * n as f64).round() as usize;
    let n_val = ((f[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut tags = vec![Split::MetaTest; n];
    for (pos, &i) in order.iter().enumerate() {
        tags[i] = if pos < n_train {
            Split::MetaTrain
        } else if pos < n_train + n_val {
            Split::MetaVal
        } else {
            Split::MetaTest
        };
    }
    Ok(tags)
}

pub fn split_dataset(ds: &DataSet, spec: &SplitSpec, rng: &mut impl Rng) -> Result<DataSet> {
    let tags = match spec {
        SplitSpec::ByClass { train, val, test } => {
            let labels = ds
                .labels()
                .ok_or_else(|| Error::Config("by_class split needs labels".into()))?;
            let mut owner = vec![None; ds.num_classes()];
            for (split, classes) in Split::ALL.iter().zip([train, val, test]) {
                for &c in classes {
                    if c >= owner.len() {
                        owner.resize(c + 1, None);
                    }
                    if let Some(prev) = owner[c] {
                        return Err(Error::Config(format!("class {c} listed in both {prev} and {split}")));
                    }
                    owner[c] = Some(*split);
                }
            }
            labels
                .iter()
                .map(|&l| owner[l].ok_or_else(|| Error::Config(format!("class {l} is not assigned to any split"))))
                .collect::<Result<Vec<_>>>()?
        }
        SplitSpec::ByFraction { train, val, test } => fraction_tags(ds.len(), [*train, *val, *test], rng)?,
        SplitSpec::ByAttributeRange { fractions, attributes } => {
            let width = ds
                .attributes()
                .ok_or_else(|| Error::Config("by_attribute_range split needs attributes".into()))?
                .cols();
            let mut seen = vec![false; width];
            for r in attributes {
                for i in r.clone() {
                    if i >= width || std::mem::replace(&mut seen[i], true) {
                        return Err(Error::Config(format!(
                            "attribute ranges {attributes:?} overlap or exceed {width} attributes"
                        )));
                    }
                }
            }
            fraction_tags(ds.len(), *fractions, rng)?
        }
    };
    ds.with_split_tags(tags)
}

// ---------------------------------------------------------------------------
// PCA whitening

/// Eigenvalues below this are treated as degenerate.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PcaFit {
    /// Statistics from meta-train rows only.
    #[default]
    MetaTrain,
    /// Statistics from every row, regardless of split.
    AllRows,
}

/// Fitted projection `(z - mean) * components / sqrt(eigenvalues)`.
#[derive(Clone, Debug)]
pub struct Whitening {
    pub mean: Vec<f64>,
    /// `d_z x d_out`, columns sorted by decreasing eigenvalue.
    pub components: Mat,
    pub eigenvalues: Vec<f64>,
}

impl Whitening {
    pub fn fit(points: &Mat, d_out: usize) -> Result<Self> {
        let (n, d) = (points.rows(), points.cols());
        if d_out == 0 || d_out > d {
            return Err(Error::Config(format!("cannot keep {d_out} of {d} dimensions")));
        }
        if n <= d_out {
            return Err(Error::Data(format!("{n} rows are too few to whiten to {d_out} dimensions")));
        }
        let mean = points.column_means();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in 0..n {
            let c: Vec<f64> = points.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Mat::zeros(d, d_out);
        let mut eigenvalues = Vec::with_capacity(d_out);
        for (k, &idx) in order.iter().take(d_out).enumerate() {
            let lambda = eig.eigenvalues[idx];
            if lambda < EIGENVALUE_FLOOR {
                return Err(Error::Numeric(format!(
                    "degenerate direction: component {k} has eigenvalue {lambda:e}, below the floor {EIGENVALUE_FLOOR:e}"
                )));
            }
            let col = eig.eigenvectors.column(idx);
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = (0..d)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
                .expect("d > 0");
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                components[(i, k)] = sign * col[i];
            }
            eigenvalues.push(lambda.max(EIGENVALUE_FLOOR));
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn transform(&self, points: &Mat) -> Result<Mat> {
        let mut centered = points.clone();
        for r in 0..centered.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let mut out = centered.matmul(&self.components)?;
        let scale: Vec<f64> = self.eigenvalues.iter().map(|l| 1.0 / l.sqrt()).collect();
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        Ok(out)
    }
}

/// Replaces the embeddings with a `d_out`-dimensional whitened PCA projection.
pub fn pca_whiten(ds: &DataSet, d_out: usize, fit: PcaFit) -> Result<DataSet> {
    let emb = ds.require_embeddings()?;
    let fit_rows = match fit {
        PcaFit::MetaTrain => emb.select_rows(&ds.rows_in(Split::MetaTrain)),
        PcaFit::AllRows => emb.clone(),
    };
    let w = Whitening::fit(&fit_rows, d_out)?;
    ds.replace_embeddings(w.transform(emb)?)
}

// ---------------------------------------------------------------------------
// Synthetic mixtures

/// Gaussian mixture stand-in for an image dataset.
///
/// Class centers live in a random `d_z`-dimensional subspace of the raw
/// space; raw rows add isotropic noise in all `d_in` dimensions. Embeddings
/// project raw rows onto that subspace and add independent noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub d_z: usize,
    /// Raw-space noise standard deviation.
    pub noise: f64,
    /// Additional embedding noise standard deviation.
    pub emb_noise: f64,
    /// Standard deviation of class-center coordinates.
    pub center_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_classes: usize, per_class: usize, d_in: usize, d_z: usize, noise: f64, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            d_in,
            d_z,
            noise,
            emb_noise: noise,
            center_scale: 1.0,
            seed,
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn synth_mixture(spec: &SynthSpec) -> Result<DataSet> {
    let SynthSpec {
        num_classes,
        per_class,
        d_in,
        d_z,
        noise,
        emb_noise,
        center_scale,
        seed,
    } = *spec;
    if num_classes == 0 || per_class == 0 || d_in == 0 || d_z == 0 {
        return Err(Error::Config("synthetic dataset counts must be positive".into()));
    }
    if !(noise >= 0.0 && emb_noise >= 0.0 && center_scale > 0.0) {
        return Err(Error::Config("noise levels must be >= 0 and center scale > 0".into()));
    }
    let mut rng = seed::rng(seed);
    // Basis: d_in x d_z with orthonormal columns when d_z <= d_in.
    let mut basis = Mat::zeros(d_in, d_z);
    for j in 0..d_z {
        let mut v: Vec<f64> = (0..d_in).map(|_| gaussian(&mut rng)).collect();
        if j < d_in {
            for p in 0..j {
                let dot: f64 = (0..d_in).map(|i| v[i] * basis[(i, p)]).sum();
                for (i, x) in v.iter_mut().enumerate() {
                    *x -= dot * basis[(i, p)];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v.iter_mut().for_each(|x| *x /= (d_in as f64).sqrt());
        }
        for (i, x) in v.into_iter().enumerate() {
            basis[(i, j)] = x;
        }
    }
    let latent: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d_z).map(|_| center_scale * gaussian(&mut rng)).collect())
        .collect();
    let n = num_classes * per_class;
    let mut raw = Mat::zeros(n, d_in);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let center: Vec<f64> = (0..d_in)
            .map(|i| (0..d_z).map(|j| basis[(i, j)] * latent[c][j]).sum())
            .collect();
        for k in 0..per_class {
            let row = raw.row_mut(c * per_class + k);
            for (x, m) in row.iter_mut().zip(&center) {
                *x = m + noise * gaussian(&mut rng);
            }
            labels.push(c);
        }
    }
    let mut emb = raw.matmul(&basis)?;
    for v in emb.as_mut_slice() {
        *v += emb_noise * gaussian(&mut rng);
    }
    DataSet::new(raw, Some(emb), Some(labels), None)
}
