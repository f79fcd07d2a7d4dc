//! Category taxonomy: frequency-derived splits and weight vectors.
//!
//! The catalog carries, per category, the train-set instance and annotated
//! surface-point counts. Point counts drive the head/common/tail split and
//! the log-frequency weight vectors consumed by the class-balanced loss and
//! by instance-sampling augmentation.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Frequency band of a category within the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Head,
    Common,
    Tail,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Head => write!(f, "head"),
            Split::Common => write!(f, "common"),
            Split::Tail => write!(f, "tail"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Split::Head),
            "common" => Ok(Split::Common),
            "tail" => Ok(Split::Tail),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// One category of the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRecord {
    /// Dense 0-based index.
    pub id: usize,
    /// Canonical label text.
    pub name: String,
    /// Train-set instance count.
    pub instance_count: u64,
    /// Train-set annotated surface-point count (the n_i of the
    /// class-balanced loss).
    pub point_count: u64,
}

/// Head/common/tail split cardinalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub head: usize,
    pub common: usize,
    pub tail: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.head + self.common + self.tail
    }

    /// Head and tail each take a rounded third; the middle band absorbs
    /// the remainder (200 categories -> 66/68/66).
    pub fn proportional(n: usize) -> Self {
        let third = ((n as f64) / 3.0).floor() as usize;
        SplitSizes {
            head: third,
            common: n - 2 * third,
            tail: third,
        }
    }
}

/// The category taxonomy with split assignment and raw-label aliases.
///
/// Immutable after construction; safe to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCatalog {
    records: Vec<CategoryRecord>,
    split: Vec<Split>,
    raw_to_canonical: HashMap<String, usize>,
}

impl LabelCatalog {
    /// Build a catalog from records. Ids must be dense 0..N-1 in order and
    /// names unique. All categories start in `Tail` until splits are
    /// assigned.
    pub fn new(records: Vec<CategoryRecord>) -> Result<Self> {
        let mut names = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.id != i {
                return Err(Error::Format(format!(
                    "record {} has id {}, expected dense ids",
                    i, r.id
                )));
            }
            if names.insert(r.name.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate category name `{}`", r.name)));
            }
        }
        let n = records.len();
        Ok(LabelCatalog {
            records,
            split: vec![Split::Tail; n],
            raw_to_canonical: names,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CategoryRecord] {
        &self.records
    }

    pub fn record(&self, id: usize) -> &CategoryRecord {
        &self.records[id]
    }

    pub fn split_of(&self, id: usize) -> Split {
        self.split[id]
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    /// Ids belonging to one split, ascending.
    pub fn ids_in_split(&self, s: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == s).collect()
    }

    /// Register raw-label aliases (raw name -> canonical name) from a
    /// merge-mapping table. Unknown canonical names are rejected.
    pub fn add_aliases<I: IntoIterator<Item = (String, String)>>(&mut self, pairs: I) -> Result<()> {
        for (raw, canonical) in pairs {
            let id = *self
                .raw_to_canonical
                .get(&canonical)
                .ok_or_else(|| Error::Format(format!("alias target `{canonical}` not in catalog")))?;
            self.raw_to_canonical.insert(raw, id);
        }
        Ok(())
    }

    /// Map raw label text to a canonical id, or `None` (UNLABELED) when the
    /// text is not covered by any selected category or alias.
    pub fn map_raw_label(&self, raw: &str) -> Option<usize> {
        self.raw_to_canonical.get(raw).copied()
    }

    /// Keep the k most-represented categories by instance count
    /// (ties broken by name ascending), re-indexed densely in
    /// descending-count order.
    pub fn select_top_k(records: &[CategoryRecord], k: usize) -> Result<Vec<CategoryRecord>> {
        if k > records.len() {
            return Err(Error::CatalogSize {
                requested: k,
                available: records.len(),
            });
        }
        let mut sorted: Vec<&CategoryRecord> = records.iter().collect();
        sorted.sort_by(|a, b| {
            b.instance_count
                .cmp(&a.instance_count)
                .then_with(|| a.name.cmp(&b.name))
        });
        Ok(sorted
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, r)| CategoryRecord {
                id: i,
                name: r.name.clone(),
                instance_count: r.instance_count,
                point_count: r.point_count,
            })
            .collect())
    }

    /// Assign head/common/tail by point count descending (name ascending on
    /// ties): the `sizes.head` most-annotated categories become head, the
    /// next `sizes.common` common, the remainder tail.
    pub fn assign_splits(mut self, sizes: SplitSizes) -> Result<Self> {
        if sizes.total() != self.len() {
            return Err(Error::SplitSize {
                expected: self.len(),
                got: sizes.total(),
            });
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.records[b]
                .point_count
                .cmp(&self.records[a].point_count)
                .then_with(|| self.records[a].name.cmp(&self.records[b].name))
        });
        for (rank, &id) in order.iter().enumerate() {
            self.split[id] = if rank < sizes.head {
                Split::Head
            } else if rank < sizes.head + sizes.common {
                Split::Common
            } else {
                Split::Tail
            };
        }
        Ok(self)
    }

    /// Per-category loss weights alpha_i = log(n_i) / sum_j log(n_j), with
    /// n_i the train-set point count. Invariant to the logarithm base.
    pub fn alpha_weights(&self) -> Result<Vec<f64>> {
        let logs = self.log_counts(&(0..self.len()).collect::<Vec<_>>())?;
        let total: f64 = logs.iter().sum();
        Ok(logs.into_iter().map(|l| l / total).collect())
    }

    /// Sampling probabilities p_i proportional to 1/log(n_i), normalized
    /// over the given id subset.
    pub fn inverse_log_weights(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let logs = self.log_counts(ids)?;
        let inv: Vec<f64> = logs.into_iter().map(|l| 1.0 / l).collect();
        let total: f64 = inv.iter().sum();
        Ok(inv.into_iter().map(|w| w / total).collect())
    }

    fn log_counts(&self, ids: &[usize]) -> Result<Vec<f64>> {
        ids.iter()
            .map(|&i| {
                let r = &self.records[i];
                if r.point_count < 2 {
                    Err(Error::CatalogCountTooSmall {
                        name: r.name.clone(),
                        count: r.point_count,
                    })
                } else {
                    Ok((r.point_count as f64).ln())
                }
            })
            .collect()
    }

    /// Write the tab-separated catalog file:
    /// `id \t name \t instance_count \t point_count \t split`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.id, r.name, r.instance_count, r.point_count, self.split[r.id]
            )?;
        }
        Ok(())
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    /// Read a catalog file written by [`LabelCatalog::write`].
    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let mut records = Vec::new();
        let mut splits = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "catalog line {}: expected 5 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_err = |what: &str| Error::Format(format!("catalog line {}: bad {}", lineno + 1, what));
            records.push(CategoryRecord {
                id: fields[0].parse().map_err(|_| parse_err("id"))?,
                name: fields[1].to_string(),
                instance_count: fields[2].parse().map_err(|_| parse_err("instance_count"))?,
                point_count: fields[3].parse().map_err(|_| parse_err("point_count"))?,
            });
            splits.push(fields[4].parse::<Split>()?);
        }
        let mut catalog = LabelCatalog::new(records)?;
        catalog.split = splits;
        Ok(catalog)
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Read a raw-label mapping file: one `raw_name \t canonical_name` per line.
pub fn read_alias_file<P: AsRef<Path>>(path: P) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.splitn(2, '\t');
        match (it.next(), it.next()) {
            (Some(raw), Some(canonical)) => pairs.push((raw.to_string(), canonical.to_string())),
            _ => {
                return Err(Error::Format(format!(
                    "mapping line {}: expected `raw\\tcanonical`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, name: &str, instances: u64, points: u64) -> CategoryRecord {
        CategoryRecord {
            id,
            name: name.to_string(),
            instance_count: instances,
            point_count: points,
        }
    }

    #[test]
    fn top_k_orders_by_count_then_name() {
        let records = vec![rec(0, "a", 5, 10), rec(1, "b", 9, 10), rec(2, "c", 1, 10)];
        let top = LabelCatalog::select_top_k(&records, 2).unwrap();
        assert_eq!(top[0].name, "b");
        assert_eq!(top[0].instance_count, 9);
        assert_eq!(top[1].instance_count, 5);
        assert_eq!(top.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn top_k_tie_breaks_by_name_ascending() {
        let records = vec![rec(0, "b", 4, 10), rec(1, "a", 4, 10)];
        let top = LabelCatalog::select_top_k(&records, 1).unwrap();
        assert_eq!(top[0].name, "a");
    }

    #[test]
    fn top_k_too_large_errors() {
        let records = vec![rec(0, "a", 1, 1)];
        assert!(matches!(
            LabelCatalog::select_top_k(&records, 2),
            Err(Error::CatalogSize { .. })
        ));
    }

    #[test]
    fn splits_follow_point_count() {
        let records = (0..6).map(|i| rec(i, &format!("c{i}"), 1, 100 - 10 * i as u64)).collect();
        let catalog = LabelCatalog::new(records)
            .unwrap()
            .assign_splits(SplitSizes { head: 2, common: 2, tail: 2 })
            .unwrap();
        assert_eq!(catalog.split_of(0), Split::Head);
        assert_eq!(catalog.split_of(1), Split::Head);
        assert_eq!(catalog.split_of(2), Split::Common);
        assert_eq!(catalog.split_of(5), Split::Tail);
    }

    #[test]
    fn split_sizes_must_sum_to_n() {
        let records = vec![rec(0, "a", 1, 2), rec(1, "b", 1, 2)];
        let catalog = LabelCatalog::new(records).unwrap();
        assert!(matches!(
            catalog.assign_splits(SplitSizes { head: 1, common: 1, tail: 1 }),
            Err(Error::SplitSize { .. })
        ));
    }

    #[test]
    fn equal_counts_split_by_name() {
        let records = vec![rec(0, "b", 1, 5), rec(1, "a", 1, 5), rec(2, "c", 1, 5)];
        let catalog = LabelCatalog::new(records)
            .unwrap()
            .assign_splits(SplitSizes { head: 1, common: 1, tail: 1 })
            .unwrap();
        assert_eq!(catalog.split_of(1), Split::Head); // "a"
        assert_eq!(catalog.split_of(0), Split::Common); // "b"
        assert_eq!(catalog.split_of(2), Split::Tail); // "c"
    }

    #[test]
    fn alpha_weights_analytic_case() {
        // counts (100, 10): ln(100)/(ln(100)+ln(10)) = 2/3.
        let records = vec![rec(0, "a", 1, 100), rec(1, "b", 1, 10)];
        let catalog = LabelCatalog::new(records).unwrap();
        let w = catalog.alpha_weights().unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_weights_uniform_on_equal_counts() {
        let records = (0..4).map(|i| rec(i, &format!("c{i}"), 1, 77)).collect();
        let catalog = LabelCatalog::new(records).unwrap();
        for w in catalog.alpha_weights().unwrap() {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn count_one_is_rejected() {
        let records = vec![rec(0, "a", 1, 1), rec(1, "b", 1, 10)];
        let catalog = LabelCatalog::new(records).unwrap();
        assert!(matches!(catalog.alpha_weights(), Err(Error::CatalogCountTooSmall { .. })));
        assert!(matches!(
            catalog.inverse_log_weights(&[0, 1]),
            Err(Error::CatalogCountTooSmall { .. })
        ));
    }

    #[test]
    fn inverse_log_weights_analytic_case() {
        // counts (e^2, e^4): 1/2 vs 1/4 -> normalized (2/3, 1/3).
        let e2 = (2.0f64).exp().round() as u64; // 7
        let records = vec![rec(0, "a", 1, 7), rec(1, "b", 1, 55)];
        let _ = e2;
        let catalog = LabelCatalog::new(records).unwrap();
        let w = catalog.inverse_log_weights(&[0, 1]).unwrap();
        // exact counts are not e^2/e^4; check the defining ratio instead
        let l0 = (7f64).ln();
        let l1 = (55f64).ln();
        assert!((w[0] - (1.0 / l0) / (1.0 / l0 + 1.0 / l1)).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_log_weights_restrict_to_subset() {
        let records = vec![rec(0, "a", 1, 10), rec(1, "b", 1, 20), rec(2, "c", 1, 30)];
        let catalog = LabelCatalog::new(records).unwrap();
        let w = catalog.inverse_log_weights(&[1, 2]).unwrap();
        assert_eq!(w.len(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raw_label_mapping() {
        let records = vec![rec(0, "chair", 1, 10), rec(1, "table", 1, 10)];
        let mut catalog = LabelCatalog::new(records).unwrap();
        catalog
            .add_aliases(vec![("office chair".to_string(), "chair".to_string())])
            .unwrap();
        assert_eq!(catalog.map_raw_label("chair"), Some(0));
        assert_eq!(catalog.map_raw_label("office chair"), Some(0));
        assert_eq!(catalog.map_raw_label("zebra"), None);
    }

    #[test]
    fn catalog_file_roundtrip() {
        let records = vec![rec(0, "chair", 3, 10), rec(1, "table", 2, 20)];
        let catalog = LabelCatalog::new(records)
            .unwrap()
            .assign_splits(SplitSizes { head: 1, common: 1, tail: 0 })
            .unwrap();
        let mut buf = Vec::new();
        catalog.write(&mut buf).unwrap();
        let back = LabelCatalog::read(&buf[..]).unwrap();
        assert_eq!(back.records(), catalog.records());
        assert_eq!(back.splits(), catalog.splits());
    }

    #[test]
    fn construction_is_deterministic() {
        let records: Vec<_> = (0..10).map(|i| rec(i, &format!("c{i}"), (i * 7 % 5) as u64 + 1, 100 + i as u64)).collect();
        let build = || {
            let top = LabelCatalog::select_top_k(&records, 8).unwrap();
            let cat = LabelCatalog::new(top)
                .unwrap()
                .assign_splits(SplitSizes { head: 3, common: 3, tail: 2 })
                .unwrap();
            let mut buf = Vec::new();
            cat.write(&mut buf).unwrap();
            buf
        };
        assert_eq!(build(), build());
    }
}
