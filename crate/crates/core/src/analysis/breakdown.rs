use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of near-equal-size groups examples are split into.
pub const BREAKDOWN_BINS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakdownFactor {
    /// Code tokens in the target.
    TargetLength,
    /// Code tokens in the context.
    ContextLength,
    /// Call expressions in the target.
    FunctionCalls,
    /// 0 = no imports, 1 = standard library only, 2 = any external library.
    ImportClass,
}

impl BreakdownFactor {
    pub const ALL: [BreakdownFactor; 4] = [
        BreakdownFactor::TargetLength,
        BreakdownFactor::ContextLength,
        BreakdownFactor::FunctionCalls,
        BreakdownFactor::ImportClass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BreakdownFactor::TargetLength => "target_length",
            BreakdownFactor::ContextLength => "context_length",
            BreakdownFactor::FunctionCalls => "function_calls",
            BreakdownFactor::ImportClass => "import_class",
        }
    }
}

impl fmt::Display for BreakdownFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BreakdownFactor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BreakdownFactor::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown breakdown factor `{s}`"))
    }
}

/// One point of a breakdown: an example's factor value and its pass@1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownPoint {
    pub example_id: String,
    pub value: f64,
    pub pass_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Smallest and largest factor value inside the bin.
    pub min: f64,
    pub max: f64,
    pub size: usize,
    pub mean_pass_at_1: f64,
    pub example_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BreakdownError {
    #[error("breakdown needs at least {BREAKDOWN_BINS} examples, got {0}")]
    TooFewExamples(usize),
}

/// Sorts examples by factor value (ties by example id) and cuts them into
/// [`BREAKDOWN_BINS`] contiguous groups whose sizes differ by at most one,
/// larger groups first.
pub fn breakdown(points: &[BreakdownPoint]) -> Result<Vec<Bin>, BreakdownError> {
    if points.len() < BREAKDOWN_BINS {
        return Err(BreakdownError::TooFewExamples(points.len()));
    }
    let mut sorted: Vec<&BreakdownPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.example_id.cmp(&b.example_id)));

    let base = sorted.len() / BREAKDOWN_BINS;
    let extra = sorted.len() % BREAKDOWN_BINS;
    let mut bins = Vec::with_capacity(BREAKDOWN_BINS);
    let mut start = 0;
    for i in 0..BREAKDOWN_BINS {
        let size = base + usize::from(i < extra);
        let members = &sorted[start..start + size];
        start += size;
        bins.push(Bin {
            min: members.first().map_or(0.0, |p| p.value),
            max: members.last().map_or(0.0, |p| p.value),
            size,
            mean_pass_at_1: members.iter().map(|p| p.pass_at_1).sum::<f64>() / size as f64,
            example_ids: members.iter().map(|p| p.example_id.clone()).collect(),
        });
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(values: &[f64]) -> Vec<BreakdownPoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| BreakdownPoint { example_id: format!("ex{i:02}"), value: v, pass_at_1: v / 10.0 })
            .collect()
    }

    #[test]
    fn ten_values_make_pairs() {
        let values: Vec<f64> = (1..=10).map(f64::from).collect();
        let bins = breakdown(&pts(&values)).unwrap();
        let ranges: Vec<(f64, f64)> = bins.iter().map(|b| (b.min, b.max)).collect();
        assert_eq!(ranges, [(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0), (9.0, 10.0)]);
    }

    #[test]
    fn ties_split_by_id() {
        let bins = breakdown(&pts(&[3.0; 10])).unwrap();
        assert_eq!(bins[0].example_ids, ["ex00", "ex01"]);
        assert_eq!(bins[4].example_ids, ["ex08", "ex09"]);
        assert!(bins.iter().all(|b| b.mean_pass_at_1 == 0.3));
    }

    #[test]
    fn uneven_sizes_differ_by_one() {
        let bins = breakdown(&pts(&[1.0; 7])).unwrap();
        assert_eq!(bins.iter().map(|b| b.size).collect::<Vec<_>>(), [2, 2, 1, 1, 1]);
        assert_eq!(breakdown(&pts(&[1.0; 4])), Err(BreakdownError::TooFewExamples(4)));
    }

    #[test]
    fn factor_names_round_trip() {
        for f in BreakdownFactor::ALL {
            assert_eq!(f.as_str().parse::<BreakdownFactor>().unwrap(), f);
        }
    }
}
