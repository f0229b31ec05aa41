use super::Descriptor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    /// Lowe ratio: accept iff `d1 < ratio * d2`.
    pub ratio: f64,
    /// Absolute Hamming ceiling on the best distance.
    pub max_distance: u32,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { ratio: 0.8, max_distance: 50 }
    }
}

impl MatchParams {
    /// Ratio and distance tests on a best / second-best pair.
    pub fn accepts(&self, best: u32, second: Option<u32>) -> bool {
        if best > self.max_distance {
            return false;
        }
        match second {
            Some(d2) => (best as f64) < self.ratio * d2 as f64,
            None => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DescriptorMatch {
    pub query: usize,
    pub candidate: usize,
    pub distance: u32,
}

/// Brute-force Hamming matching with the ratio test, made injective on the
/// candidate side by keeping each candidate's closest query (ties to the
/// lower query index). Output is ordered by query index.
pub fn match_ratio(query: &[Descriptor], candidates: &[Descriptor], params: &MatchParams) -> Vec<DescriptorMatch> {
    let mut best_for_candidate: Vec<Option<DescriptorMatch>> = vec![None; candidates.len()];
    for (qi, q) in query.iter().enumerate() {
        let mut best: Option<(usize, u32)> = None;
        let mut second: Option<u32> = None;
        for (ci, c) in candidates.iter().enumerate() {
            let d = q.hamming(c);
            match best {
                Some((_, bd)) if d >= bd => {
                    if second.is_none_or(|s| d < s) {
                        second = Some(d);
                    }
                }
                _ => {
                    second = best.map(|(_, bd)| bd);
                    best = Some((ci, d));
                }
            }
        }
        let Some((ci, d)) = best else { continue };
        if !params.accepts(d, second) {
            continue;
        }
        let slot = &mut best_for_candidate[ci];
        if slot.is_none_or(|m| d < m.distance) {
            *slot = Some(DescriptorMatch { query: qi, candidate: ci, distance: d });
        }
    }
    let mut out: Vec<DescriptorMatch> = best_for_candidate.into_iter().flatten().collect();
    out.sort_by_key(|m| m.query);
    out
}
