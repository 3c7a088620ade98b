use std::fmt::Write as _;

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

/// Edit distance normalized by the reference length.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hyp.is_empty() { 0.0 } else { 1.0 };
    }
    edit_distance(hyp, reference) as f64 / reference.len() as f64
}

/// Corpus-level error rate: total edits over total reference tokens.
pub fn corpus_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let edits: usize = pairs.iter().map(|(h, r)| edit_distance(h, r)).sum();
    let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if total == 0 {
        0.0
    } else {
        edits as f64 / total as f64
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Evaluation summary. Printed as one `key=value` pair per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub token_error_rate: Option<f64>,
    pub speaker_cosine: Option<f64>,
    pub chain_consistency: Option<f64>,
    /// `(component, seconds)`
    pub timings: Vec<(String, f64)>,
    pub extra: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn push_timing(&mut self, name: impl Into<String>, seconds: f64) {
        self.timings.push((name.into(), seconds.max(0.0)));
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.extra.push((name.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "ter" => self.token_error_rate,
            "speaker_cosine" => self.speaker_cosine,
            "chain_consistency" => self.chain_consistency,
            _ => self
                .timings
                .iter()
                .chain(&self.extra)
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v),
        }
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: f64| {
            let _ = writeln!(s, "{k}={v:.6}");
        };
        if let Some(v) = self.token_error_rate {
            put("ter", v);
        }
        if let Some(v) = self.speaker_cosine {
            put("speaker_cosine", v);
        }
        if let Some(v) = self.chain_consistency {
            put("chain_consistency", v);
        }
        for (k, v) in &self.timings {
            put(k, *v);
        }
        for (k, v) in &self.extra {
            put(k, *v);
        }
        s
    }

    /// Parses `key=value` lines back into `(key, value)` pairs.
    pub fn parse_lines(text: &str) -> Vec<(String, f64)> {
        text.lines()
            .filter_map(|l| {
                let (k, v) = l.split_once('=')?;
                Some((k.trim().to_string(), v.trim().parse().ok()?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 3], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[2, 3]), 2);
        assert_eq!(edit_distance(&[5, 6], &[6, 5]), 2);
    }

    #[test]
    fn one_substitution_in_ten() {
        let r: Vec<usize> = (0..10).collect();
        let mut h = r.clone();
        h[4] = 99;
        assert!((token_error_rate(&h, &r) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn report_lines_roundtrip() {
        let mut m = MetricsReport {
            token_error_rate: Some(0.05),
            ..Default::default()
        };
        m.push_timing("flow_ms", 1.5);
        let parsed = MetricsReport::parse_lines(&m.to_lines());
        assert_eq!(parsed, vec![("ter".into(), 0.05), ("flow_ms".into(), 1.5)]);
    }
}
