//! Presentation manifests: one row per stimulus presentation, TSV with header.
//!
//! Canonical form puts the known columns first in a fixed order, keeps unknown
//! columns (preserved verbatim, never interpreted) after them, and emits
//! optional `# key=value` directive lines before the header. Parsing followed
//! by serialization is idempotent on the canonical form.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{MegError, Result};

pub const KNOWN_COLUMNS: [&str; 6] = [
    "image_id",
    "category_id",
    "subject_id",
    "session",
    "repetition_index",
    "split_tag",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Valid,
    SmallTest,
    LargeTest,
    UnseenPool,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::SmallTest => "small_test",
            SplitTag::LargeTest => "large_test",
            SplitTag::UnseenPool => "unseen_pool",
        }
    }

    pub const ALL: [SplitTag; 5] = [
        SplitTag::Train,
        SplitTag::Valid,
        SplitTag::SmallTest,
        SplitTag::LargeTest,
        SplitTag::UnseenPool,
    ];
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = MegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "valid" => Ok(SplitTag::Valid),
            "small_test" => Ok(SplitTag::SmallTest),
            "large_test" => Ok(SplitTag::LargeTest),
            "unseen_pool" => Ok(SplitTag::UnseenPool),
            other => Err(MegError::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresentationRecord {
    pub image_id: String,
    pub category_id: String,
    pub subject_id: u32,
    pub session: u32,
    pub repetition_index: u32,
    pub split_tag: SplitTag,
}

/// A column the parser does not interpret, carried through serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtraColumn {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<PresentationRecord>,
    pub extras: Vec<ExtraColumn>,
    /// Declared presentations per (image, subject) for the small test split.
    pub small_test_reps: Option<u32>,
    /// Declared presentations per (image, subject) for the large test split.
    pub large_test_reps: Option<u32>,
}

impl Manifest {
    pub fn new(records: Vec<PresentationRecord>) -> Self {
        Manifest {
            records,
            extras: Vec::new(),
            small_test_reps: None,
            large_test_reps: None,
        }
    }

    pub fn records_with_tag(&self, tag: SplitTag) -> impl Iterator<Item = &PresentationRecord> {
        self.records.iter().filter(move |r| r.split_tag == tag)
    }

    pub fn image_ids_with_tag(&self, tag: SplitTag) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in self.records_with_tag(tag) {
            if seen.insert(r.image_id.clone()) {
                out.push(r.image_id.clone());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !keys.insert((r.image_id.clone(), r.subject_id, r.repetition_index)) {
                return Err(MegError::Format(format!(
                    "duplicate presentation (image {:?}, subject {}, repetition {})",
                    r.image_id, r.subject_id, r.repetition_index
                )));
            }
        }
        for col in &self.extras {
            if col.values.len() != self.records.len() {
                return Err(MegError::Shape(format!(
                    "extra column {:?} has {} values for {} records",
                    col.name,
                    col.values.len(),
                    self.records.len()
                )));
            }
        }
        self.check_declared_reps(SplitTag::SmallTest, self.small_test_reps)?;
        self.check_declared_reps(SplitTag::LargeTest, self.large_test_reps)?;
        Ok(())
    }

    fn check_declared_reps(&self, tag: SplitTag, declared: Option<u32>) -> Result<()> {
        let Some(expect) = declared else {
            return Ok(());
        };
        use std::collections::HashMap;
        let mut counts: HashMap<(&str, u32), u32> = HashMap::new();
        for r in self.records_with_tag(tag) {
            *counts.entry((r.image_id.as_str(), r.subject_id)).or_insert(0) += 1;
        }
        for ((image, subject), n) in counts {
            if n != expect {
                return Err(MegError::Format(format!(
                    "image {image:?} subject {subject} has {n} {tag} presentations, header declares {expect}"
                )));
            }
        }
        Ok(())
    }
}

fn field_err(line: usize, field: &str, value: &str) -> MegError {
    MegError::Format(format!(
        "manifest line {line}: cannot parse {field} from {value:?}"
    ))
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut small_test_reps = None;
    let mut large_test_reps = None;
    let mut lines = text.lines().enumerate().peekable();

    while let Some((_, line)) = lines.peek() {
        let Some(directive) = line.strip_prefix('#') else {
            break;
        };
        let directive = directive.trim();
        let (key, value) = directive.split_once('=').ok_or_else(|| {
            MegError::Format(format!("malformed directive line {line:?}"))
        })?;
        let parsed: u32 = value
            .trim()
            .parse()
            .map_err(|_| MegError::Format(format!("directive {key:?} needs a count, got {value:?}")))?;
        match key.trim() {
            "small_test_reps" => small_test_reps = Some(parsed),
            "large_test_reps" => large_test_reps = Some(parsed),
            other => {
                return Err(MegError::Format(format!("unknown directive {other:?}")));
            }
        }
        lines.next();
    }

    let (header_no, header) = lines
        .next()
        .ok_or_else(|| MegError::Format("manifest has no header row".into()))?;
    let columns: Vec<&str> = header.split('\t').collect();
    let mut known_at = [usize::MAX; 6];
    let mut extra_cols: Vec<(usize, String)> = Vec::new();
    for (i, name) in columns.iter().enumerate() {
        match KNOWN_COLUMNS.iter().position(|k| k == name) {
            Some(k) => {
                if known_at[k] != usize::MAX {
                    return Err(MegError::Format(format!("duplicate column {name:?}")));
                }
                known_at[k] = i;
            }
            None => extra_cols.push((i, name.to_string())),
        }
    }
    for (k, &at) in known_at.iter().enumerate() {
        if at == usize::MAX {
            return Err(MegError::Format(format!(
                "manifest header missing column {:?}",
                KNOWN_COLUMNS[k]
            )));
        }
    }

    let mut records = Vec::new();
    let mut extras: Vec<ExtraColumn> = extra_cols
        .iter()
        .map(|(_, name)| ExtraColumn { name: name.clone(), values: Vec::new() })
        .collect();
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(MegError::Format(format!(
                "manifest line {}: {} fields, header has {}",
                no + 1,
                fields.len(),
                columns.len()
            )));
        }
        let get = |k: usize| fields[known_at[k]];
        let record = PresentationRecord {
            image_id: get(0).to_string(),
            category_id: get(1).to_string(),
            subject_id: get(2)
                .parse()
                .map_err(|_| field_err(no + 1, "subject_id", get(2)))?,
            session: get(3)
                .parse()
                .map_err(|_| field_err(no + 1, "session", get(3)))?,
            repetition_index: get(4)
                .parse()
                .map_err(|_| field_err(no + 1, "repetition_index", get(4)))?,
            split_tag: get(5).parse()?,
        };
        records.push(record);
        for (slot, (src, _)) in extras.iter_mut().zip(extra_cols.iter()) {
            slot.values.push(fields[*src].to_string());
        }
    }
    let _ = header_no;

    let manifest = Manifest { records, extras, small_test_reps, large_test_reps };
    manifest.validate()?;
    Ok(manifest)
}

pub fn manifest_to_string(manifest: &Manifest) -> Result<String> {
    manifest.validate()?;
    let mut out = String::new();
    if let Some(n) = manifest.small_test_reps {
        out.push_str(&format!("# small_test_reps={n}\n"));
    }
    if let Some(n) = manifest.large_test_reps {
        out.push_str(&format!("# large_test_reps={n}\n"));
    }
    out.push_str(&KNOWN_COLUMNS.join("\t"));
    for col in &manifest.extras {
        out.push('\t');
        out.push_str(&col.name);
    }
    out.push('\n');
    for (i, r) in manifest.records.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.image_id, r.category_id, r.subject_id, r.session, r.repetition_index, r.split_tag
        ));
        for col in &manifest.extras {
            out.push('\t');
            out.push_str(&col.values[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, manifest_to_string(manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(image: &str, cat: &str, subject: u32, rep: u32, tag: SplitTag) -> PresentationRecord {
        PresentationRecord {
            image_id: image.into(),
            category_id: cat.into(),
            subject_id: subject,
            session: 1,
            repetition_index: rep,
            split_tag: tag,
        }
    }

    #[test]
    fn canonical_round_trip_is_idempotent() {
        let mut m = Manifest::new(vec![
            rec("img_a", "cat_1", 0, 0, SplitTag::Train),
            rec("img_b", "cat_2", 0, 0, SplitTag::Valid),
            rec("img_b", "cat_2", 1, 0, SplitTag::Valid),
        ]);
        m.extras.push(ExtraColumn {
            name: "notes".into(),
            values: vec!["x".into(), "".into(), "y".into()],
        });
        let once = manifest_to_string(&m).unwrap();
        let twice = manifest_to_string(&parse_manifest(&once).unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn reordered_columns_canonicalize() {
        let scrambled = "split_tag\timage_id\trepetition_index\tsubject_id\tsession\tcategory_id\n\
                         train\timg_a\t0\t2\t1\tcat_1\n";
        let m = parse_manifest(scrambled).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].subject_id, 2);
        let canon = manifest_to_string(&m).unwrap();
        assert!(canon.starts_with("image_id\tcategory_id\tsubject_id"));
        let again = manifest_to_string(&parse_manifest(&canon).unwrap()).unwrap();
        assert_eq!(canon, again);
    }

    #[test]
    fn unknown_columns_survive_round_trip() {
        let text = "image_id\tcategory_id\tsubject_id\tsession\trepetition_index\tsplit_tag\tsource_file\n\
                    img_a\tcat_1\t0\t1\t0\ttrain\trun3.fif\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.extras.len(), 1);
        assert_eq!(m.extras[0].values, vec!["run3.fif"]);
        assert_eq!(manifest_to_string(&m).unwrap(), text);
    }

    #[test]
    fn duplicate_presentation_rejected() {
        let m = Manifest::new(vec![
            rec("img_a", "cat_1", 0, 0, SplitTag::Train),
            rec("img_a", "cat_1", 0, 0, SplitTag::Train),
        ]);
        assert!(matches!(m.validate(), Err(MegError::Format(_))));
    }

    #[test]
    fn negative_repetition_rejected() {
        let text = "image_id\tcategory_id\tsubject_id\tsession\trepetition_index\tsplit_tag\n\
                    img_a\tcat_1\t0\t1\t-1\ttrain\n";
        match parse_manifest(text) {
            Err(MegError::Format(msg)) => assert!(msg.contains("repetition_index")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_split_tag_rejected() {
        let text = "image_id\tcategory_id\tsubject_id\tsession\trepetition_index\tsplit_tag\n\
                    img_a\tcat_1\t0\t1\t0\tholdout\n";
        match parse_manifest(text) {
            Err(MegError::Format(msg)) => assert!(msg.contains("holdout")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn declared_rep_count_enforced() {
        let mut m = Manifest::new(vec![
            rec("img_t", "cat_t", 0, 0, SplitTag::SmallTest),
            rec("img_t", "cat_t", 0, 1, SplitTag::SmallTest),
        ]);
        m.small_test_reps = Some(3);
        assert!(matches!(m.validate(), Err(MegError::Format(_))));
        m.small_test_reps = Some(2);
        m.validate().unwrap();
    }

    #[test]
    fn directives_round_trip() {
        let mut m = Manifest::new(vec![
            rec("img_t", "cat_t", 0, 0, SplitTag::SmallTest),
            rec("img_t", "cat_t", 0, 1, SplitTag::SmallTest),
        ]);
        m.small_test_reps = Some(2);
        let text = manifest_to_string(&m).unwrap();
        assert!(text.starts_with("# small_test_reps=2\n"));
        let back = parse_manifest(&text).unwrap();
        assert_eq!(back.small_test_reps, Some(2));
        assert_eq!(manifest_to_string(&back).unwrap(), text);
    }

    #[test]
    fn missing_required_column_rejected() {
        let text = "image_id\tcategory_id\tsubject_id\tsession\trepetition_index\n\
                    img_a\tcat_1\t0\t1\t0\n";
        assert!(matches!(parse_manifest(text), Err(MegError::Format(_))));
    }
}
