//! Identifiers, engagement events, labels, and log parsing.
//!
//! Everything downstream (signal building, training, serving, evaluation)
//! speaks these types. All of them are immutable values after construction
//! and safe to share across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Seedless FNV-1a over the raw bytes, 64-bit variant.
///
/// Stores built on different machines must agree on every hash, so this
/// deliberately avoids `std::hash` (SipHash is keyed per process).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET_BASIS;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("query is empty after normalization")]
    EmptyQuery,
    #[error("line {line_no}: expected 7 tab-separated columns, found {found}")]
    MalformedLine { line_no: usize, found: usize },
    #[error("line {line_no}: bad {field} value {value:?}")]
    BadField {
        line_no: usize,
        field: &'static str,
        value: String,
    },
    #[error("embedding entry {index} is not finite")]
    NonFiniteEmbedding { index: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Stable item identifier. Zero is reserved and never refers to an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A search query after canonicalization.
///
/// `key_hash` is FNV-1a of the normalized text, so two stores that
/// normalized the same raw string always land on the same key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QueryKey {
    pub normalized_text: String,
    pub key_hash: u64,
}

impl QueryKey {
    fn from_normalized(text: String) -> Self {
        let key_hash = fnv1a64(text.as_bytes());
        QueryKey {
            normalized_text: text,
            key_hash,
        }
    }
}

impl PartialOrd for QueryKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueryKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.normalized_text
            .cmp(&other.normalized_text)
            .then(self.key_hash.cmp(&other.key_hash))
    }
}

impl fmt::Display for QueryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.normalized_text)
    }
}

/// Canonicalize a raw query: Unicode lowercase, collapse whitespace runs to
/// a single space, trim. Idempotent.
pub fn normalize_query(raw: &str) -> Result<QueryKey, DomainError> {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Err(DomainError::EmptyQuery);
    }
    Ok(QueryKey::from_normalized(collapsed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionType {
    Save,
    LongClick,
    Download,
    Screenshot,
    Click,
    Hide,
    Report,
    Impression,
}

impl ActionType {
    pub const ALL: [ActionType; 8] = [
        ActionType::Save,
        ActionType::LongClick,
        ActionType::Download,
        ActionType::Screenshot,
        ActionType::Click,
        ActionType::Hide,
        ActionType::Report,
        ActionType::Impression,
    ];

    /// Actions that count a session as fulfilled: the user kept or consumed
    /// the result rather than merely inspecting it.
    pub fn is_fulfilling(self) -> bool {
        matches!(
            self,
            ActionType::Save | ActionType::LongClick | ActionType::Download | ActionType::Screenshot
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Save => "save",
            ActionType::LongClick => "long_click",
            ActionType::Download => "download",
            ActionType::Screenshot => "screenshot",
            ActionType::Click => "click",
            ActionType::Hide => "hide",
            ActionType::Report => "report",
            ActionType::Impression => "impression",
        }
    }
}

impl FromStr for ActionType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "save" => Ok(ActionType::Save),
            "long_click" => Ok(ActionType::LongClick),
            "download" => Ok(ActionType::Download),
            "screenshot" => Ok(ActionType::Screenshot),
            "click" => Ok(ActionType::Click),
            "hide" => Ok(ActionType::Hide),
            "report" => Ok(ActionType::Report),
            "impression" => Ok(ActionType::Impression),
            _ => Err(()),
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Default positive action set for the engagement label.
pub fn default_action_set() -> BTreeSet<ActionType> {
    [
        ActionType::Save,
        ActionType::LongClick,
        ActionType::Download,
        ActionType::Screenshot,
        ActionType::Click,
    ]
    .into_iter()
    .collect()
}

/// Default per-action label weights; unlisted actions weigh 1.0.
pub fn default_weight_table() -> BTreeMap<ActionType, f64> {
    [(ActionType::Save, 2.0), (ActionType::LongClick, 1.5)]
        .into_iter()
        .collect()
}

/// One row of the engagement log.
#[derive(Clone, Debug, PartialEq)]
pub struct EngagementEvent {
    pub timestamp: i64,
    pub user_id: u64,
    pub query: QueryKey,
    pub item: ItemId,
    pub action: ActionType,
    pub surface: String,
    pub session_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Device {
    Mobile,
    Desktop,
    Tablet,
}

impl Device {
    pub fn as_str(self) -> &'static str {
        match self {
            Device::Mobile => "mobile",
            Device::Desktop => "desktop",
            Device::Tablet => "tablet",
        }
    }
}

impl FromStr for Device {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "mobile" => Ok(Device::Mobile),
            "desktop" => Ok(Device::Desktop),
            "tablet" => Ok(Device::Tablet),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-request searcher context: who is asking and from where.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestContext {
    pub user_id: u64,
    pub country: String,
    pub device: Device,
    pub language: String,
    pub age_bucket: u8,
    pub gender_bucket: u8,
}

impl RequestContext {
    pub fn new(user_id: u64) -> Self {
        RequestContext {
            user_id,
            country: "us".to_string(),
            device: Device::Mobile,
            language: "en".to_string(),
            age_bucket: 0,
            gender_bucket: 0,
        }
    }
}

/// Fixed-length vector of finite 32-bit floats.
///
/// This is the storage format for content embeddings and tower outputs;
/// model math upcasts to f64 and only rounds back at file boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVec {
    values: Vec<f32>,
}

impl EmbeddingVec {
    pub fn new(values: Vec<f32>) -> Result<Self, DomainError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFiniteEmbedding { index });
        }
        Ok(EmbeddingVec { values })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVec {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Binary engagement label with an importance weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnifiedLabel {
    pub value: bool,
    pub weight: f64,
}

impl UnifiedLabel {
    pub fn as_f64(self) -> f64 {
        if self.value {
            1.0
        } else {
            0.0
        }
    }
}

/// Collapse all events for one (user, query, item) into a single label.
///
/// Positive iff any event's action is in `action_set`; the weight is the
/// largest table weight among matched actions (1.0 for unlisted actions and
/// for negatives), so a save+click pair is not counted twice.
pub fn unified_label(
    events_for_pair: &[EngagementEvent],
    action_set: &BTreeSet<ActionType>,
    weight_table: &BTreeMap<ActionType, f64>,
) -> UnifiedLabel {
    let mut value = false;
    let mut weight: f64 = 1.0;
    for event in events_for_pair {
        if action_set.contains(&event.action) {
            value = true;
            let w = weight_table.get(&event.action).copied().unwrap_or(1.0);
            weight = weight.max(w);
        }
    }
    if !value {
        weight = 1.0;
    }
    UnifiedLabel { value, weight }
}

/// Parse one TSV log row. Columns: timestamp, user_id, query, item_id,
/// action, surface, session_id. `line_no` is 1-based and only used in errors.
pub fn parse_event_line(line: &str, line_no: usize) -> Result<EngagementEvent, DomainError> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err(DomainError::MalformedLine {
            line_no,
            found: cols.len(),
        });
    }
    let bad = |field: &'static str, value: &str| DomainError::BadField {
        line_no,
        field,
        value: value.to_string(),
    };
    let timestamp: i64 = cols[0].parse().map_err(|_| bad("timestamp", cols[0]))?;
    if timestamp <= 0 {
        return Err(bad("timestamp", cols[0]));
    }
    let user_id: u64 = cols[1].parse().map_err(|_| bad("user_id", cols[1]))?;
    let query = normalize_query(cols[2]).map_err(|_| bad("query", cols[2]))?;
    let item_id: u64 = cols[3].parse().map_err(|_| bad("item_id", cols[3]))?;
    if item_id == 0 {
        return Err(bad("item_id", cols[3]));
    }
    let action = ActionType::from_str(cols[4]).map_err(|_| bad("action", cols[4]))?;
    let session_id: u64 = cols[6].parse().map_err(|_| bad("session_id", cols[6]))?;
    Ok(EngagementEvent {
        timestamp,
        user_id,
        query,
        item: ItemId(item_id),
        action,
        surface: cols[5].to_string(),
        session_id,
    })
}

/// Inverse of [`parse_event_line`] for valid events (no trailing newline).
pub fn format_event_line(event: &EngagementEvent) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        event.timestamp,
        event.user_id,
        event.query.normalized_text,
        event.item.0,
        event.action,
        event.surface,
        event.session_id
    )
}

/// Read a whole engagement log. Lines starting with '#' and blank lines are
/// skipped; anything else must parse.
pub fn read_events(path: &Path) -> Result<Vec<EngagementEvent>, DomainError> {
    let file = File::open(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut events = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DomainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        events.push(parse_event_line(trimmed, idx + 1)?);
    }
    Ok(events)
}

/// Write an engagement log readable by [`read_events`].
pub fn write_events(events: &[EngagementEvent], path: &Path) -> Result<(), DomainError> {
    let mut out = String::from("# timestamp\tuser_id\tquery\titem_id\taction\tsurface\tsession_id\n");
    for event in events {
        out.push_str(&format_event_line(event));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a searcher context table: one user per line,
/// `user_id\tcountry\tdevice\tlanguage\tage_bucket\tgender_bucket`.
pub fn read_users(path: &Path) -> Result<BTreeMap<u64, RequestContext>, DomainError> {
    let text = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut users = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = idx + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(DomainError::MalformedLine {
                line_no,
                found: cols.len(),
            });
        }
        let bad = |field: &'static str, value: &str| DomainError::BadField {
            line_no,
            field,
            value: value.to_string(),
        };
        let user_id: u64 = cols[0].parse().map_err(|_| bad("user_id", cols[0]))?;
        let device = Device::from_str(cols[2]).map_err(|_| bad("device", cols[2]))?;
        let age_bucket: u8 = cols[4].parse().map_err(|_| bad("age_bucket", cols[4]))?;
        let gender_bucket: u8 = cols[5].parse().map_err(|_| bad("gender_bucket", cols[5]))?;
        users.insert(
            user_id,
            RequestContext {
                user_id,
                country: cols[1].to_string(),
                device,
                language: cols[3].to_string(),
                age_bucket,
                gender_bucket,
            },
        );
    }
    Ok(users)
}

/// Write a searcher context table readable by [`read_users`].
pub fn write_users(users: &BTreeMap<u64, RequestContext>, path: &Path) -> Result<(), DomainError> {
    let mut out = String::from("# user_id\tcountry\tdevice\tlanguage\tage_bucket\tgender_bucket\n");
    for ctx in users.values() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            ctx.user_id, ctx.country, ctx.device, ctx.language, ctx.age_bucket, ctx.gender_bucket
        ));
    }
    std::fs::write(path, out).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a64_reference_vectors() {
        // Published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn normalize_lowercases_and_collapses() {
        let q = normalize_query("  Red  DRESS ").unwrap();
        assert_eq!(q.normalized_text, "red dress");
        let q2 = normalize_query("red dress").unwrap();
        assert_eq!(q, q2);
    }

    #[test]
    fn normalize_handles_tabs_and_unicode() {
        let q = normalize_query("\tÉCOLE\tmaternelle\n").unwrap();
        assert_eq!(q.normalized_text, "école maternelle");
    }

    #[test]
    fn normalize_rejects_blank() {
        assert!(matches!(normalize_query("   "), Err(DomainError::EmptyQuery)));
        assert!(matches!(normalize_query(""), Err(DomainError::EmptyQuery)));
    }

    #[test]
    fn normalize_is_idempotent_on_samples() {
        for raw in ["A  b\tC", "쌀국수   레시피", "Mixed CASE query", "x"] {
            let once = normalize_query(raw).unwrap();
            let twice = normalize_query(&once.normalized_text).unwrap();
            assert_eq!(once, twice);
        }
    }

    fn event_with_action(action: ActionType) -> EngagementEvent {
        EngagementEvent {
            timestamp: 1_700_000_000,
            user_id: 42,
            query: normalize_query("red dress").unwrap(),
            item: ItemId(9001),
            action,
            surface: "search".to_string(),
            session_id: 7,
        }
    }

    #[test]
    fn label_matches_brute_force_on_all_action_subsets() {
        let action_set = default_action_set();
        let weights = default_weight_table();
        for mask in 0u32..(1 << ActionType::ALL.len()) {
            let events: Vec<EngagementEvent> = ActionType::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &a)| event_with_action(a))
                .collect();
            let label = unified_label(&events, &action_set, &weights);

            let expect_value = events.iter().any(|e| action_set.contains(&e.action));
            assert_eq!(label.value, expect_value, "mask {mask:#b}");
            let expect_weight = if expect_value {
                events
                    .iter()
                    .filter(|e| action_set.contains(&e.action))
                    .map(|e| weights.get(&e.action).copied().unwrap_or(1.0))
                    .fold(1.0_f64, f64::max)
            } else {
                1.0
            };
            assert_eq!(label.weight, expect_weight, "mask {mask:#b}");
            assert!(label.weight > 0.0);
        }
    }

    #[test]
    fn label_takes_max_weight_not_sum() {
        let events = vec![
            event_with_action(ActionType::Click),
            event_with_action(ActionType::LongClick),
        ];
        let action_set = default_action_set();
        let weights: BTreeMap<ActionType, f64> =
            [(ActionType::LongClick, 2.0), (ActionType::Click, 1.0)]
                .into_iter()
                .collect();
        let label = unified_label(&events, &action_set, &weights);
        assert!(label.value);
        assert_eq!(label.weight, 2.0);
    }

    #[test]
    fn label_of_impression_only_is_negative() {
        let events = vec![event_with_action(ActionType::Impression)];
        let label = unified_label(&events, &default_action_set(), &default_weight_table());
        assert!(!label.value);
        assert_eq!(label.weight, 1.0);
    }

    #[test]
    fn parse_example_row() {
        let event =
            parse_event_line("1700000000\t42\tred dress\t9001\tsave\tsearch\t7", 1).unwrap();
        assert_eq!(event.action, ActionType::Save);
        assert_eq!(event.item, ItemId(9001));
        assert_eq!(event.query.normalized_text, "red dress");
        assert_eq!(event.surface, "search");
    }

    #[test]
    fn parse_rejects_wrong_column_count() {
        let err = parse_event_line("1\t2\tq\t3\tsave", 12).unwrap_err();
        assert!(matches!(
            err,
            DomainError::MalformedLine {
                line_no: 12,
                found: 5
            }
        ));
    }

    #[test]
    fn parse_rejects_unknown_action() {
        let err = parse_event_line("1700000000\t42\tq\t9001\tpurchase\tsearch\t7", 3).unwrap_err();
        assert!(matches!(
            err,
            DomainError::BadField {
                line_no: 3,
                field: "action",
                ..
            }
        ));
    }

    #[test]
    fn parse_rejects_zero_item_and_bad_timestamp() {
        assert!(matches!(
            parse_event_line("1700000000\t42\tq\t0\tsave\tsearch\t7", 1).unwrap_err(),
            DomainError::BadField { field: "item_id", .. }
        ));
        assert!(matches!(
            parse_event_line("-5\t42\tq\t9001\tsave\tsearch\t7", 1).unwrap_err(),
            DomainError::BadField { field: "timestamp", .. }
        ));
        assert!(matches!(
            parse_event_line("soon\t42\tq\t9001\tsave\tsearch\t7", 1).unwrap_err(),
            DomainError::BadField { field: "timestamp", .. }
        ));
    }

    #[test]
    fn parse_format_round_trip() {
        let line = "1700000123\t42\tred dress\t9001\tlong_click\tsearch\t7";
        let event = parse_event_line(line, 1).unwrap();
        assert_eq!(format_event_line(&event), line);
    }

    #[test]
    fn read_events_skips_comments_and_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        std::fs::write(
            &path,
            "# ts\tuser\tquery\titem\taction\tsurface\tsession\n\
             1700000000\t42\tred dress\t9001\tsave\tsearch\t7\n\
             \n\
             1700000001\t42\tred dress\t9002\timpression\tsearch\t7\n",
        )
        .unwrap();
        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].action, ActionType::Impression);
    }

    #[test]
    fn read_events_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        std::fs::write(&path, "# header\n1700000000\t42\tq\t9001\tsave\tsearch\n").unwrap();
        let err = read_events(&path).unwrap_err();
        assert!(matches!(
            err,
            DomainError::MalformedLine {
                line_no: 2,
                found: 6
            }
        ));
    }

    #[test]
    fn events_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        let events = vec![
            parse_event_line("1700000123\t42\tred dress\t9001\tlong_click\tsearch\t7", 1).unwrap(),
            parse_event_line("1700000456\t43\tsofa\t9002\timpression\tsearch\t8", 2).unwrap(),
        ];
        write_events(&events, &path).unwrap();
        assert_eq!(read_events(&path).unwrap(), events);
    }

    #[test]
    fn users_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("users.tsv");
        let mut users = BTreeMap::new();
        users.insert(
            3,
            RequestContext {
                user_id: 3,
                country: "de".to_string(),
                device: Device::Tablet,
                language: "de".to_string(),
                age_bucket: 2,
                gender_bucket: 1,
            },
        );
        users.insert(9, RequestContext::new(9));
        write_users(&users, &path).unwrap();
        assert_eq!(read_users(&path).unwrap(), users);

        std::fs::write(&path, "3\tde\thologram\tde\t2\t1\n").unwrap();
        assert!(matches!(
            read_users(&path).unwrap_err(),
            DomainError::BadField { field: "device", .. }
        ));
    }
}
