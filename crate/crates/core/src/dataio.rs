//! Session log ingestion, filtering, time-based splitting and prefix augmentation.
//!
//! The flow is `load_events` → `preprocess` → `split_by_time` → `SessionDataset::from_split`.
//! Items are dense indices; the training vocabulary is built from training
//! sessions only, in order of first appearance.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub session_id: String,
    pub item_id: String,
    /// Epoch milliseconds.
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    fn delimiter(self) -> char {
        match self {
            Format::Csv => ',',
            Format::Tsv => '\t',
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Tsv => "tsv",
        })
    }
}

/// Bijection between raw item ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of `raw`, assigning the next free one if unseen.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(raw.to_owned());
        self.index.insert(raw.to_owned(), i);
        i
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn lookup(&self, raw: &str) -> Result<usize> {
        self.get(raw).ok_or_else(|| Error::UnknownItem(raw.to_owned()))
    }

    pub fn raw(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.ids.iter().enumerate().map(|(i, s)| (i, s.as_str()))
    }
}

impl FromIterator<String> for Vocab {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let mut v = Vocab::new();
        for s in iter {
            v.intern(&s);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub items: Vec<usize>,
    pub end_time: i64,
}

/// One next-item prediction instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub prefix: Vec<usize>,
    pub label: usize,
}

/// Output of [`preprocess`]: sessions indexed against the vocabulary of all retained items.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub sessions: Vec<Session>,
    pub vocab: Vocab,
}

/// A validation or test session whose items are mapped into the training
/// vocabulary; `None` marks an item never seen in training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOutSession {
    pub items: Vec<Option<usize>>,
    pub end_time: i64,
}

#[derive(Debug, Clone)]
pub struct SplitSessions {
    pub train: Vec<Session>,
    pub validation: Vec<HeldOutSession>,
    pub test: Vec<HeldOutSession>,
    /// Training vocabulary.
    pub vocab: Vocab,
}

pub fn load_events(path: &Path, format: Format, has_header: bool) -> Result<Vec<RawEvent>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(file), path, format, has_header)
}

/// Parses `session_id, timestamp, item_id` rows. Extra trailing columns are ignored.
pub fn parse_events<R: BufRead>(
    reader: R,
    path: &Path,
    format: Format,
    has_header: bool,
) -> Result<Vec<RawEvent>> {
    let delim = format.delimiter();
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if has_header && i == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(delim);
        let (Some(sid), Some(ts), Some(item)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::parse(path, lineno, "expected session_id, timestamp, item_id"));
        };
        let (sid, ts, item) = (sid.trim(), ts.trim(), item.trim());
        if sid.is_empty() || item.is_empty() {
            return Err(Error::parse(path, lineno, "empty session_id or item_id"));
        }
        let timestamp: i64 = ts
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad timestamp `{ts}`")))?;
        if timestamp < 0 {
            return Err(Error::parse(path, lineno, "negative timestamp"));
        }
        events.push(RawEvent {
            session_id: sid.to_owned(),
            item_id: item.to_owned(),
            timestamp,
        });
    }
    Ok(events)
}

/// Groups events into sessions and filters rare items and short sessions
/// until neither rule removes anything.
pub fn preprocess(
    events: &[RawEvent],
    min_item_support: usize,
    min_session_len: usize,
) -> Result<Preprocessed> {
    if events.is_empty() {
        return Err(Error::DegenerateCorpus("no events".into()));
    }

    let mut by_session: HashMap<&str, usize> = HashMap::new();
    let mut grouped: Vec<Vec<(i64, &str)>> = Vec::new();
    for ev in events {
        let slot = *by_session.entry(&ev.session_id).or_insert_with(|| {
            grouped.push(Vec::new());
            grouped.len() - 1
        });
        grouped[slot].push((ev.timestamp, &ev.item_id));
    }
    for clicks in &mut grouped {
        // stable: equal timestamps keep file order
        clicks.sort_by_key(|&(t, _)| t);
    }

    let mut sessions: Vec<(i64, Vec<&str>)> = grouped
        .into_iter()
        .map(|clicks| {
            let end = clicks.last().map(|c| c.0).unwrap_or(0);
            (end, clicks.into_iter().map(|c| c.1).collect())
        })
        .collect();

    loop {
        let mut support: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &sessions {
            for &it in items {
                *support.entry(it).or_default() += 1;
            }
        }
        let before: usize = sessions.iter().map(|s| s.1.len()).sum::<usize>() + sessions.len();
        for (_, items) in &mut sessions {
            items.retain(|it| support[it] >= min_item_support);
        }
        sessions.retain(|(_, items)| items.len() >= min_session_len.max(1));
        let after: usize = sessions.iter().map(|s| s.1.len()).sum::<usize>() + sessions.len();
        if before == after {
            break;
        }
    }

    if sessions.is_empty() {
        return Err(Error::DegenerateCorpus(format!(
            "no session survives filtering (min item support {min_item_support}, min session length {min_session_len})"
        )));
    }

    sessions.sort_by_key(|s| s.0);
    let mut vocab = Vocab::new();
    let sessions = sessions
        .into_iter()
        .map(|(end_time, items)| Session {
            items: items.into_iter().map(|it| vocab.intern(it)).collect(),
            end_time,
        })
        .collect();
    Ok(Preprocessed { sessions, vocab })
}

/// Time-based split. Sessions ending inside the trailing `test_window_ms`
/// form the test set; the most recent `validation_fraction` of the rest
/// form validation.
pub fn split_by_time(
    sessions: &[Session],
    vocab: &Vocab,
    test_window_ms: i64,
    validation_fraction: f64,
) -> Result<SplitSessions> {
    if sessions.is_empty() {
        return Err(Error::EmptyTrain("no sessions".into()));
    }
    if test_window_ms <= 0 {
        return Err(Error::Config("test window must be positive".into()));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
    }
    let t_min = sessions.iter().map(|s| s.end_time).min().unwrap();
    let t_max = sessions.iter().map(|s| s.end_time).max().unwrap();
    if test_window_ms >= t_max - t_min {
        return Err(Error::EmptyTrain(format!(
            "test window {test_window_ms} ms covers the full time range of {} ms",
            t_max - t_min
        )));
    }

    let mut ordered: Vec<&Session> = sessions.iter().collect();
    ordered.sort_by_key(|s| s.end_time);
    let cutoff = t_max - test_window_ms;
    let n_rest = ordered.partition_point(|s| s.end_time <= cutoff);
    let (rest, test) = ordered.split_at(n_rest);
    let n_val = (validation_fraction * rest.len() as f64).round() as usize;
    let (train, validation) = rest.split_at(rest.len() - n_val);
    if train.is_empty() {
        return Err(Error::EmptyTrain("validation fraction consumed every session".into()));
    }

    let mut train_vocab = Vocab::new();
    let train: Vec<Session> = train
        .iter()
        .map(|s| Session {
            items: s.items.iter().map(|&i| train_vocab.intern(vocab.raw(i))).collect(),
            end_time: s.end_time,
        })
        .collect();
    let hold_out = |group: &[&Session]| -> Vec<HeldOutSession> {
        group
            .iter()
            .map(|s| HeldOutSession {
                items: s.items.iter().map(|&i| train_vocab.get(vocab.raw(i))).collect(),
                end_time: s.end_time,
            })
            .collect()
    };
    Ok(SplitSessions {
        validation: hold_out(validation),
        test: hold_out(test),
        train,
        vocab: train_vocab,
    })
}

/// Prefix augmentation: `[v1..vL]` becomes `([v1..vk], v(k+1))` for k = 1..L-1.
pub fn augment(sessions: &[Session]) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(sessions.iter().map(|s| s.items.len().saturating_sub(1)).sum());
    for (i, s) in sessions.iter().enumerate() {
        if s.items.len() < 2 {
            return Err(Error::Precondition(format!(
                "session {i} has length {}; augmentation needs at least 2",
                s.items.len()
            )));
        }
        for k in 1..s.items.len() {
            out.push(Example {
                prefix: s.items[..k].to_vec(),
                label: s.items[k],
            });
        }
    }
    Ok(out)
}

/// Augments held-out sessions, dropping examples whose label is unseen and
/// unseen elements from prefixes. Examples left with an empty prefix are dropped.
pub fn augment_held_out(sessions: &[HeldOutSession]) -> Vec<Example> {
    let mut out = Vec::new();
    for s in sessions {
        for k in 1..s.items.len() {
            let Some(label) = s.items[k] else { continue };
            let prefix: Vec<usize> = s.items[..k].iter().flatten().copied().collect();
            if !prefix.is_empty() {
                out.push(Example { prefix, label });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub clicks: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub items: usize,
    pub average_length: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# of clicks\t{}", self.clicks)?;
        writeln!(f, "# of train sessions\t{}", self.train_sessions)?;
        writeln!(f, "# of test sessions\t{}", self.test_sessions)?;
        writeln!(f, "# of items\t{}", self.items)?;
        writeln!(f, "Average length\t{:.2}", self.average_length)
    }
}

#[derive(Debug, Clone)]
pub struct SessionDataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// Unaugmented training sessions, used by the global graph and Item-KNN.
    pub train_sessions: Vec<Session>,
    pub vocab: Vocab,
    /// Per-item click count over training sessions.
    pub popularity: Vec<u64>,
}

impl SessionDataset {
    pub fn from_split(split: SplitSessions) -> Result<Self> {
        let train = augment(&split.train)?;
        let popularity = popularity(&split.train, split.vocab.len());
        Ok(Self {
            validation: augment_held_out(&split.validation),
            test: augment_held_out(&split.test),
            train,
            train_sessions: split.train,
            popularity,
            vocab: split.vocab,
        })
    }

    pub fn m(&self) -> usize {
        self.vocab.len()
    }

    /// Summary in the layout of the usual dataset-statistics table. `sessions`
    /// is the preprocessed corpus the split was made from.
    pub fn stats(&self, sessions: &[Session]) -> DatasetStats {
        let clicks: usize = sessions.iter().map(|s| s.items.len()).sum();
        DatasetStats {
            clicks,
            train_sessions: self.train.len() + self.validation.len(),
            test_sessions: self.test.len(),
            items: self.m(),
            average_length: clicks as f64 / sessions.len().max(1) as f64,
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut vocab = String::new();
        for (i, raw) in self.vocab.iter() {
            let _ = writeln!(vocab, "{raw}\t{i}");
        }
        write_file(&dir.join("vocab.tsv"), &vocab)?;
        write_file(&dir.join("train.txt"), &format_examples(&self.train))?;
        write_file(&dir.join("validation.txt"), &format_examples(&self.validation))?;
        write_file(&dir.join("test.txt"), &format_examples(&self.test))?;
        let mut sess = String::new();
        for s in &self.train_sessions {
            let _ = writeln!(sess, "{}\t{}", s.end_time, join_indices(&s.items));
        }
        write_file(&dir.join("train_sessions.txt"), &sess)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let vocab = read_vocab(&dir.join("vocab.tsv"))?;
        let m = vocab.len();
        let train = read_examples(&dir.join("train.txt"), m)?;
        let validation = read_examples(&dir.join("validation.txt"), m)?;
        let test = read_examples(&dir.join("test.txt"), m)?;
        let path = dir.join("train_sessions.txt");
        let text = read_file(&path)?;
        let mut train_sessions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (end, items) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&path, i + 1, "expected end_time<TAB>items"))?;
            let end_time = end
                .parse()
                .map_err(|_| Error::parse(&path, i + 1, "bad end time"))?;
            let items = parse_indices(items, m).map_err(|msg| Error::parse(&path, i + 1, msg))?;
            train_sessions.push(Session { items, end_time });
        }
        let popularity = popularity(&train_sessions, m);
        Ok(Self {
            train,
            validation,
            test,
            train_sessions,
            vocab,
            popularity,
        })
    }
}

pub fn popularity(sessions: &[Session], m: usize) -> Vec<u64> {
    let mut pop = vec![0u64; m];
    for s in sessions {
        for &i in &s.items {
            pop[i] += 1;
        }
    }
    pop
}

fn join_indices(items: &[usize]) -> String {
    let mut s = String::new();
    for (k, i) in items.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "{i}");
    }
    s
}

fn parse_indices(s: &str, m: usize) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| match t.trim().parse::<usize>() {
            Ok(i) if i < m => Ok(i),
            Ok(i) => Err(format!("item index {i} out of range (m = {m})")),
            Err(_) => Err(format!("bad item index `{t}`")),
        })
        .collect()
}

fn format_examples(examples: &[Example]) -> String {
    let mut s = String::new();
    for ex in examples {
        let _ = writeln!(s, "{}\t{}", join_indices(&ex.prefix), ex.label);
    }
    s
}

pub fn read_examples(path: &Path, m: usize) -> Result<Vec<Example>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (prefix, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected prefix<TAB>label"))?;
        let prefix = parse_indices(prefix, m).map_err(|msg| Error::parse(path, i + 1, msg))?;
        let label = parse_indices(label, m).map_err(|msg| Error::parse(path, i + 1, msg))?;
        if label.len() != 1 {
            return Err(Error::parse(path, i + 1, "expected a single label"));
        }
        out.push(Example {
            prefix,
            label: label[0],
        });
    }
    Ok(out)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_file(path)?;
    let mut vocab = Vocab::new();
    for (i, line) in text.lines().enumerate() {
        let (raw, idx) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected raw_id<TAB>index"))?;
        if idx.parse::<usize>().ok() != Some(i) || vocab.get(raw).is_some() {
            return Err(Error::parse(path, i + 1, "vocab indices must be dense, ordered and unique"));
        }
        vocab.intern(raw);
    }
    Ok(vocab)
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}
