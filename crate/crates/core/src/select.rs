//! Reliable pseudo-label selection and the bounded per-class queue used in
//! online mode.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blackbox::PseudoLabelRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Confidence threshold; a record must be strictly above it.
    pub tau: f64,
    /// Noise ratio controlling the per-class cap.
    pub rho: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { tau: 0.9, rho: 0.9 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "selection.tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "selection.rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// `floor((1 - rho) n / C)`. A tiny slack absorbs representation error,
    /// so that e.g. rho = 0.9, n = 10000, C = 10 gives 100 rather than 99.
    pub fn per_class_cap(&self, n: usize, classes: usize) -> usize {
        ((1.0 - self.rho) * n as f64 / classes as f64 + 1e-9).floor() as usize
    }
}

/// Index sets of a selection, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection {
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
}

impl Selection {
    pub fn is_reliable(&self, i: usize) -> bool {
        self.reliable.binary_search(&i).is_ok()
    }
}

/// Higher confidence first, then lower sample index.
fn rank(a: &PseudoLabelRecord, b: &PseudoLabelRecord) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.sample_index.cmp(&b.sample_index))
}

/// Splits `records` (covering `0..n` exactly once) into reliable and
/// unreliable index sets.
pub fn select_reliable(
    records: &[PseudoLabelRecord],
    cfg: &SelectionConfig,
    classes: usize,
) -> Result<Selection> {
    cfg.validate()?;
    if classes == 0 {
        return Err(Error::InvalidArgument(
            "number of classes must be positive".into(),
        ));
    }
    let n = records.len();
    let mut seen = vec![false; n];
    for r in records {
        if r.sample_index >= n || std::mem::replace(&mut seen[r.sample_index], true) {
            return Err(Error::InvalidArgument(format!(
                "sample index {} is duplicated or out of range",
                r.sample_index
            )));
        }
        if r.class_id >= classes {
            return Err(Error::InvalidArgument(format!(
                "class {} out of range",
                r.class_id
            )));
        }
    }
    let cap = cfg.per_class_cap(n, classes);
    let mut per_class: Vec<Vec<&PseudoLabelRecord>> = vec![Vec::new(); classes];
    for r in records.iter().filter(|r| r.confidence > cfg.tau) {
        per_class[r.class_id].push(r);
    }
    let mut flag = vec![false; n];
    for bucket in &mut per_class {
        bucket.sort_by(|a, b| rank(a, b));
        for r in bucket.iter().take(cap) {
            flag[r.sample_index] = true;
        }
    }
    let (reliable, unreliable) = (0..n).partition(|&i| flag[i]);
    Ok(Selection {
        reliable,
        unreliable,
    })
}

/// Writes `sample_index,class_id,confidence,reliable` rows.
pub fn write_selection_csv<W: Write>(
    records: &[PseudoLabelRecord],
    selection: &Selection,
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample_index", "class_id", "confidence", "reliable"])
        .map_err(csv_err)?;
    let mut sorted: Vec<&PseudoLabelRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sample_index);
    for r in sorted {
        out.write_record([
            r.sample_index.to_string(),
            r.class_id.to_string(),
            r.confidence.to_string(),
            selection.is_reliable(r.sample_index).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry<D> {
    pub record: PseudoLabelRecord,
    pub data: D,
}

/// Bounded store of confident samples with a per-class cap of
/// `floor(capacity / classes)`.
///
/// Within a class, entries are kept in descending confidence; among equal
/// confidences, older entries come first. When a class overflows, its last
/// entry (the least confident, newest among ties) is evicted, which may be
/// the entry just pushed.
#[derive(Debug, Clone)]
pub struct ReliableQueue<D> {
    capacity: usize,
    per_class_cap: usize,
    classes: Vec<Vec<QueueEntry<D>>>,
}

impl<D> ReliableQueue<D> {
    pub fn new(capacity: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || capacity < num_classes {
            return Err(Error::Config(format!(
                "queue capacity {capacity} must be at least the number of classes {num_classes}"
            )));
        }
        Ok(Self {
            capacity,
            per_class_cap: capacity / num_classes,
            classes: (0..num_classes).map(|_| Vec::new()).collect(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn per_class_cap(&self) -> usize {
        self.per_class_cap
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.classes[class].len()
    }

    pub fn class_entries(&self, class: usize) -> &[QueueEntry<D>] {
        &self.classes[class]
    }

    /// Inserts in confidence order and returns the evicted entry, if any.
    pub fn push(&mut self, record: PseudoLabelRecord, data: D) -> Result<Option<QueueEntry<D>>> {
        let bucket = self.classes.get_mut(record.class_id).ok_or_else(|| {
            Error::InvalidArgument(format!("class {} out of range", record.class_id))
        })?;
        if !record.confidence.is_finite() {
            return Err(Error::non_finite("queued confidence"));
        }
        let pos = bucket.partition_point(|e| e.record.confidence >= record.confidence);
        bucket.insert(pos, QueueEntry { record, data });
        Ok((bucket.len() > self.per_class_cap).then(|| bucket.pop().expect("non-empty bucket")))
    }

    /// All entries ordered by class, then by descending confidence.
    pub fn snapshot(&self) -> Vec<&QueueEntry<D>> {
        self.classes.iter().flatten().collect()
    }

    /// Checks size, cap and ordering invariants.
    pub fn check_invariants(&self) -> Result<()> {
        if self.len() > self.capacity {
            return Err(Error::InvalidArgument("queue exceeds capacity".into()));
        }
        for (k, bucket) in self.classes.iter().enumerate() {
            if bucket.len() > self.per_class_cap {
                return Err(Error::InvalidArgument(format!("class {k} exceeds its cap")));
            }
            if bucket
                .windows(2)
                .any(|w| w[0].record.confidence < w[1].record.confidence)
            {
                return Err(Error::InvalidArgument(format!("class {k} is out of order")));
            }
            if bucket.iter().any(|e| e.record.class_id != k) {
                return Err(Error::InvalidArgument(format!(
                    "class {k} holds a foreign entry"
                )));
            }
        }
        Ok(())
    }
}

impl ReliableQueue<Vec<f64>> {
    /// Stacks stored samples into a batch with their labels, or `None` when
    /// the queue is empty.
    pub fn snapshot_batch(&self, sample_shape: &[usize]) -> Result<Option<(Tensor, Vec<usize>)>> {
        let entries = self.snapshot();
        if entries.is_empty() {
            return Ok(None);
        }
        let rows: Vec<&[f64]> = entries.iter().map(|e| e.data.as_slice()).collect();
        let labels = entries.iter().map(|e| e.record.class_id).collect();
        Ok(Some((Tensor::stack(sample_shape, &rows)?, labels)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, c: usize, conf: f64) -> PseudoLabelRecord {
        PseudoLabelRecord {
            sample_index: i,
            class_id: c,
            confidence: conf,
        }
    }

    #[test]
    fn cap_arithmetic() {
        let cfg = SelectionConfig { tau: 0.9, rho: 0.9 };
        assert_eq!(cfg.per_class_cap(10_000, 10), 100);
        assert_eq!(cfg.per_class_cap(1000, 4), 25);
        assert_eq!(
            SelectionConfig { tau: 0.0, rho: 0.0 }.per_class_cap(7, 2),
            3
        );
    }

    #[test]
    fn all_below_tau_unreliable() {
        let records: Vec<_> = (0..5).map(|i| rec(i, i % 2, 0.5)).collect();
        let s = select_reliable(&records, &SelectionConfig::default(), 2).unwrap();
        assert!(s.reliable.is_empty());
        assert_eq!(s.unreliable, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn threshold_is_strict() {
        let records = vec![rec(0, 0, 0.9), rec(1, 0, 0.9000001)];
        let cfg = SelectionConfig { tau: 0.9, rho: 0.0 };
        let s = select_reliable(&records, &cfg, 1).unwrap();
        assert_eq!(s.reliable, vec![1]);
    }

    #[test]
    fn top_confidence_kept_under_cap() {
        // n = 10000, C = 10 -> cap 100; 150 class-3 records above tau.
        let mut records: Vec<_> = (0..10_000).map(|i| rec(i, (i % 9 + 4) % 10, 0.2)).collect();
        for k in 0..150 {
            let i = k * 60;
            records[i] = rec(i, 3, 0.91 + (k % 75) as f64 * 0.001);
        }
        let s = select_reliable(&records, &SelectionConfig::default(), 10).unwrap();
        let mut oracle: Vec<_> = records
            .iter()
            .filter(|r| r.class_id == 3 && r.confidence > 0.9)
            .collect();
        oracle.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.sample_index.cmp(&b.sample_index))
        });
        let mut expect: Vec<usize> = oracle[..100].iter().map(|r| r.sample_index).collect();
        expect.sort();
        assert_eq!(s.reliable, expect);
        assert_eq!(s.reliable.len() + s.unreliable.len(), 10_000);
    }

    #[test]
    fn duplicate_index_rejected() {
        let records = vec![rec(0, 0, 0.95), rec(0, 1, 0.95)];
        assert!(select_reliable(&records, &SelectionConfig::default(), 2).is_err());
        assert!(select_reliable(&[rec(0, 2, 0.9)], &SelectionConfig::default(), 2).is_err());
    }

    #[test]
    fn queue_basic_push_and_self_eviction() {
        let mut q: ReliableQueue<u32> = ReliableQueue::new(4, 2).unwrap();
        assert!(q.push(rec(0, 0, 0.95), 0).unwrap().is_none());
        assert!(q.push(rec(1, 0, 0.97), 1).unwrap().is_none());
        let ev = q.push(rec(2, 0, 0.91), 2).unwrap().unwrap();
        assert_eq!(ev.record.sample_index, 2);
        let ev = q.push(rec(3, 0, 0.99), 3).unwrap().unwrap();
        assert_eq!(ev.record.sample_index, 0);
        let order: Vec<usize> = q.snapshot().iter().map(|e| e.record.sample_index).collect();
        assert_eq!(order, vec![3, 1]);
        q.check_invariants().unwrap();
    }

    #[test]
    fn queue_thousand_ten_classes() {
        let mut q: ReliableQueue<()> = ReliableQueue::new(1000, 10).unwrap();
        assert_eq!(q.per_class_cap(), 100);
        for i in 0..100 {
            q.push(rec(i, 0, 0.91 + i as f64 * 1e-4), ()).unwrap();
        }
        let ev = q.push(rec(100, 0, 0.95), ()).unwrap().unwrap();
        assert_eq!(ev.record.sample_index, 0);
        assert_eq!(q.class_len(0), 100);
    }

    #[test]
    fn snapshot_batch_stacks() {
        let mut q: ReliableQueue<Vec<f64>> = ReliableQueue::new(4, 2).unwrap();
        assert!(q.snapshot_batch(&[2]).unwrap().is_none());
        q.push(rec(0, 1, 0.95), vec![1.0, 2.0]).unwrap();
        q.push(rec(1, 0, 0.92), vec![3.0, 4.0]).unwrap();
        let (x, y) = q.snapshot_batch(&[2]).unwrap().unwrap();
        assert_eq!(x.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(y, vec![0, 1]);
        assert_eq!(q.snapshot_batch(&[2]).unwrap().unwrap().0, x);
    }

    #[test]
    fn csv_report() {
        let records = vec![rec(1, 0, 0.95), rec(0, 1, 0.5)];
        let sel = select_reliable(&records, &SelectionConfig { tau: 0.9, rho: 0.0 }, 2).unwrap();
        let mut buf = Vec::new();
        write_selection_csv(&records, &sel, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_index,class_id,confidence,reliable\n0,1,0.5,false\n1,0,0.95,true\n"
        );
    }
}
