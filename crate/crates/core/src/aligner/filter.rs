use std::fmt;

/// Thresholds for dropping implausible alignments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Longest allowed run of aligned positions on consecutive frames.
    pub max_run: usize,
    /// Longest allowed distance between neighbouring positions, and between
    /// the utterance edges and the first/last position.
    pub max_gap: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_run: 3,
            max_gap: 150,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    ConsecutiveRun,
    Gap,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::ConsecutiveRun => "consecutive-run",
            DropReason::Gap => "gap",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

impl FilterDecision {
    pub fn is_keep(self) -> bool {
        self == FilterDecision::Keep
    }
}

/// Drops an alignment when more than `max_run` positions sit on consecutive
/// frames, or when any gap (including the leading `p_1` and trailing
/// `T - p_L`) exceeds `max_gap`.
pub fn filter_alignment(p: &[usize], t: usize, cfg: &FilterConfig) -> FilterDecision {
    let mut run = 1;
    for w in p.windows(2) {
        run = if w[1] == w[0] + 1 { run + 1 } else { 1 };
        if run > cfg.max_run {
            return FilterDecision::Drop(DropReason::ConsecutiveRun);
        }
    }
    let (Some(&first), Some(&last)) = (p.first(), p.last()) else {
        return FilterDecision::Keep;
    };
    let inner = p.windows(2).any(|w| w[1] - w[0] > cfg.max_gap);
    if inner || first > cfg.max_gap || t.saturating_sub(last) > cfg.max_gap {
        return FilterDecision::Drop(DropReason::Gap);
    }
    FilterDecision::Keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_decisions() {
        let c = FilterConfig::default();
        assert_eq!(
            filter_alignment(&[10, 11, 12, 13], 20, &c),
            FilterDecision::Drop(DropReason::ConsecutiveRun)
        );
        assert_eq!(
            filter_alignment(&[1, 160], 170, &c),
            FilterDecision::Drop(DropReason::Gap)
        );
        assert_eq!(filter_alignment(&[5, 30, 62], 100, &c), FilterDecision::Keep);
        assert_eq!(filter_alignment(&[10, 11, 12], 20, &c), FilterDecision::Keep);
    }

    #[test]
    fn threshold_is_configurable() {
        let c = FilterConfig {
            max_run: 4,
            max_gap: 150,
        };
        assert!(filter_alignment(&[10, 11, 12, 13], 20, &c).is_keep());
    }
}
