use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, DocumentSet};
use crate::error::{Error, Result};

/// Document ratio `original : expanded`, e.g. `1:2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRatio {
    pub original: usize,
    pub expanded: usize,
}

impl MixRatio {
    pub fn new(original: usize, expanded: usize) -> Self {
        Self { original, expanded }
    }

    /// Fraction of documents that are original-language.
    pub fn original_share(&self) -> f64 {
        self.original as f64 / (self.original + self.expanded) as f64
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.original, self.expanded)
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio {s:?} is not of the form A:B"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let r = MixRatio::new(
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if r.original == 0 && r.expanded == 0 {
            return Err(Error::Config("ratio 0:0 selects nothing".into()));
        }
        Ok(r)
    }
}

/// Interleave original and expanded documents in windows of
/// `ratio.original + ratio.expanded`, each window holding exactly the
/// ratio. `windows = None` takes as many windows as the inputs allow.
pub fn mix_corpora(
    original: &[Document],
    expanded: &[Document],
    ratio: MixRatio,
    windows: Option<usize>,
    seed: u64,
) -> Result<DocumentSet> {
    if ratio.original == 0 && ratio.expanded == 0 {
        return Err(Error::Config("ratio 0:0 selects nothing".into()));
    }
    let fit = |have: usize, per: usize| have.checked_div(per).unwrap_or(usize::MAX);
    let available = fit(original.len(), ratio.original).min(fit(expanded.len(), ratio.expanded));
    let windows = windows.unwrap_or(available);
    if windows == 0 || windows > available {
        let want = windows.max(1);
        return Err(Error::Data(format!(
            "ratio {ratio} over {want} window(s) needs {} original (have {}) and {} expanded (have {})",
            want * ratio.original,
            original.len(),
            want * ratio.expanded,
            expanded.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orig: Vec<&Document> = original.iter().collect();
    let mut exp: Vec<&Document> = expanded.iter().collect();
    orig.shuffle(&mut rng);
    exp.shuffle(&mut rng);

    let mut docs = Vec::with_capacity(windows * (ratio.original + ratio.expanded));
    let (mut oi, mut ei) = (orig.into_iter(), exp.into_iter());
    for _ in 0..windows {
        let mut window: Vec<Document> = oi
            .by_ref()
            .take(ratio.original)
            .chain(ei.by_ref().take(ratio.expanded))
            .cloned()
            .collect();
        window.shuffle(&mut rng);
        docs.extend(window);
    }
    Ok(DocumentSet::new(docs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;

    fn docs(n: usize, role: Role) -> Vec<Document> {
        (0..n)
            .map(|i| Document::new(format!("{role} {i}"), "x", role))
            .collect()
    }

    #[test]
    fn one_to_two_consumes_everything() {
        let set = mix_corpora(
            &docs(50, Role::Original),
            &docs(100, Role::Expanded),
            MixRatio::new(1, 2),
            None,
            0,
        )
        .unwrap();
        let c = set.count_by_role();
        assert_eq!(c[&Role::Original], 50);
        assert_eq!(c[&Role::Expanded], 100);
        for w in set.docs.chunks(3) {
            assert_eq!(w.iter().filter(|d| d.role == Role::Original).count(), 1);
        }
    }

    #[test]
    fn one_to_zero_is_original_only() {
        let set = mix_corpora(&docs(7, Role::Original), &[], MixRatio::new(1, 0), None, 0).unwrap();
        assert_eq!(set.len(), 7);
        assert!(set.docs.iter().all(|d| d.role == Role::Original));
    }

    #[test]
    fn three_hundred_docs_split_100_200() {
        let set = mix_corpora(
            &docs(150, Role::Original),
            &docs(250, Role::Expanded),
            MixRatio::new(1, 2),
            Some(100),
            3,
        )
        .unwrap();
        let c = set.count_by_role();
        assert_eq!((c[&Role::Original], c[&Role::Expanded]), (100, 200));
    }

    #[test]
    fn shortfall_is_reported() {
        let err = mix_corpora(
            &docs(10, Role::Original),
            &docs(10, Role::Expanded),
            MixRatio::new(1, 2),
            Some(8),
            0,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("16 expanded (have 10)"), "{msg}");
        assert!(mix_corpora(&[], &docs(3, Role::Expanded), MixRatio::new(1, 2), None, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let (o, e) = (docs(20, Role::Original), docs(40, Role::Expanded));
        let a = mix_corpora(&o, &e, MixRatio::new(1, 2), None, 11).unwrap();
        let b = mix_corpora(&o, &e, MixRatio::new(1, 2), None, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_ratio() {
        assert_eq!("1:2".parse::<MixRatio>().unwrap(), MixRatio::new(1, 2));
        assert!("0:0".parse::<MixRatio>().is_err());
        assert!("12".parse::<MixRatio>().is_err());
    }
}
