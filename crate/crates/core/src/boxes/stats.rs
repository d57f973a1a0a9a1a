use std::fmt;

use serde::Serialize;

use super::detection::DetectionSet;

pub const BIN_LABELS: [&str; 6] = ["0", "1-10", "11-20", "21-30", "31-50", ">50"];

/// Histogram of boxes-per-image counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BoxHistogram {
    pub images: usize,
    pub bins: [usize; 6],
}

impl BoxHistogram {
    pub fn bin_of(count: usize) -> usize {
        match count {
            0 => 0,
            1..=10 => 1,
            11..=20 => 2,
            21..=30 => 3,
            31..=50 => 4,
            _ => 5,
        }
    }

    pub fn add(&mut self, count: usize) {
        self.images += 1;
        self.bins[Self::bin_of(count)] += 1;
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,count\n");
        for (label, n) in BIN_LABELS.iter().zip(self.bins) {
            s.push_str(&format!("{label},{n}\n"));
        }
        s
    }
}

impl fmt::Display for BoxHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", "images")?;
        for l in BIN_LABELS {
            write!(f, " {l:>7}")?;
        }
        writeln!(f)?;
        write!(f, "{:>8}", self.images)?;
        for n in self.bins {
            write!(f, " {n:>7}")?;
        }
        writeln!(f)
    }
}

/// Sequential reduction over a corpus, in iteration order.
pub fn box_stats<'a>(corpus: impl IntoIterator<Item = &'a DetectionSet>) -> BoxHistogram {
    let mut h = BoxHistogram::default();
    for set in corpus {
        h.add(set.len());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{Detection, Provenance};

    fn set_with(n: usize) -> DetectionSet {
        DetectionSet {
            image_id: "i".into(),
            detections: (0..n)
                .map(|i| Detection::new(i as f64, 0.0, i as f64 + 1.0, 1.0, 0.5, "a").unwrap())
                .collect(),
            provenance: Provenance::File,
        }
    }

    #[test]
    fn bin_edges() {
        let edges = [
            (0, 0),
            (1, 1),
            (10, 1),
            (11, 2),
            (20, 2),
            (21, 3),
            (30, 3),
            (31, 4),
            (50, 4),
            (51, 5),
        ];
        for (count, bin) in edges {
            assert_eq!(BoxHistogram::bin_of(count), bin, "{count}");
        }
    }

    #[test]
    fn empty_and_single() {
        let empties = vec![set_with(0), set_with(0)];
        assert_eq!(box_stats(&empties).bins, [2, 0, 0, 0, 0, 0]);
        assert_eq!(box_stats(&[set_with(7)]).bins, [0, 1, 0, 0, 0, 0]);
        assert!(box_stats(&[set_with(7)]).to_csv().contains("1-10,1"));
    }
}
