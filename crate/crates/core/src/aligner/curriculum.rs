use std::collections::BTreeSet;
use std::sync::Arc;

/// Step thresholds and the active-set cap that applies from each one on.
/// `None` means the full vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub stages: Vec<(u64, Option<usize>)>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            stages: vec![(0, Some(64)), (5_000, Some(256)), (20_000, None)],
        }
    }
}

impl CurriculumSchedule {
    pub fn cap(&self, step: u64) -> Option<usize> {
        self.stages
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(Some(0), |&(_, c)| c)
    }
}

/// Active symbol set over `V` tokens plus blank (index `V`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurriculumVocab {
    active: Vec<bool>,
}

impl CurriculumVocab {
    pub fn full(vocab: usize) -> Self {
        Self {
            active: vec![true; vocab + 1],
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.active.get(k).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&k| self.active[k]).collect()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    /// Column mask for a restricted log-softmax.
    pub fn mask(&self) -> Arc<Vec<bool>> {
        Arc::new(self.active.clone())
    }
}

/// Most frequently observed indices up to the scheduled cap (ties by index),
/// plus the current batch targets and blank.
pub fn curriculum_subset(
    step: u64,
    observed: &[u64],
    batch_targets: &[usize],
    schedule: &CurriculumSchedule,
) -> CurriculumVocab {
    let vocab = observed.len();
    let mut active = vec![false; vocab + 1];
    match schedule.cap(step) {
        None => active.iter_mut().for_each(|a| *a = true),
        Some(cap) => {
            let mut seen: Vec<usize> = (0..vocab).filter(|&k| observed[k] > 0).collect();
            seen.sort_by(|&a, &b| observed[b].cmp(&observed[a]).then(a.cmp(&b)));
            for &k in seen.iter().take(cap) {
                active[k] = true;
            }
        }
    }
    for &k in batch_targets.iter().filter(|&&k| k < vocab) {
        active[k] = true;
    }
    active[vocab] = true;
    CurriculumVocab { active }
}

/// Stateful curriculum: accumulates counts and never shrinks the active set.
#[derive(Clone, Debug)]
pub struct Curriculum {
    schedule: CurriculumSchedule,
    counts: Vec<u64>,
    admitted: BTreeSet<usize>,
}

impl Curriculum {
    pub fn new(vocab: usize, schedule: CurriculumSchedule) -> Self {
        Self {
            schedule,
            counts: vec![0; vocab],
            admitted: BTreeSet::new(),
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Records the batch targets and returns the active set for this step.
    pub fn update(&mut self, step: u64, batch_targets: &[usize]) -> CurriculumVocab {
        for &k in batch_targets {
            if k < self.counts.len() {
                self.counts[k] += 1;
            }
        }
        let mut v = curriculum_subset(step, &self.counts, batch_targets, &self.schedule);
        for &k in &self.admitted {
            v.active[k] = true;
        }
        self.admitted.extend(v.indices());
        v
    }
}
