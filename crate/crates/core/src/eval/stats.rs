//! Face aspect-ratio statistics.

use crate::boxes::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `counts[i]` covers `[edges[i], edges[i+1])`; the last bin also
    /// includes its right edge.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.below + self.above
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["lo", "hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                format!("{:?}", self.edges[i]),
                format!("{:?}", self.edges[i + 1]),
                c.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Bin edges for `w / h` running from 0 to 4 in steps of 0.25.
pub fn default_ratio_edges() -> Vec<f64> {
    (0..=16).map(|i| i as f64 * 0.25).collect()
}

pub fn aspect_ratio_histogram<'a>(boxes: impl IntoIterator<Item = &'a BBox>, edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2
        || edges
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::Config(
            vec!["histogram edges must be strictly increasing".into()],
        ));
    }
    let mut h = Histogram {
        edges: edges.to_vec(),
        counts: vec![0; edges.len() - 1],
        below: 0,
        above: 0,
    };
    let last = *edges.last().expect("two edges");
    for b in boxes {
        b.validate()?;
        let r = b.width() / b.height();
        if r < edges[0] {
            h.below += 1;
        } else if r > last {
            h.above += 1;
        } else if r == last {
            *h.counts.last_mut().expect("one bin") += 1;
        } else {
            let i = edges.partition_point(|&e| e <= r) - 1;
            h.counts[i] += 1;
        }
    }
    Ok(h)
}
