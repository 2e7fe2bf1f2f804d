//! Ranking and dialogue metrics. All functions are pure.

/// 1-based position of `target` in `ranked`, if present.
pub fn rank_of<T: PartialEq>(ranked: &[T], target: &T) -> Option<usize> {
    ranked.iter().position(|x| x == target).map(|p| p + 1)
}

/// 1 if `target` is within the first `k` entries, else 0.
pub fn recall_at_k<T: PartialEq>(ranked: &[T], target: &T, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Binary-relevance NDCG with one positive; ideal DCG is 1.
pub fn ndcg_at_k<T: PartialEq>(ranked: &[T], target: &T, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Fraction of dialogues that succeeded within `t` turns. `None` is a failure.
pub fn success_at(turns_to_success: &[Option<usize>], t: usize) -> f64 {
    if turns_to_success.is_empty() {
        return 0.0;
    }
    let hits = turns_to_success
        .iter()
        .filter(|o| matches!(o, Some(n) if *n <= t))
        .count();
    hits as f64 / turns_to_success.len() as f64
}

/// Mean turns used; failures count as `max_turns`.
pub fn average_turns(turns_to_success: &[Option<usize>], max_turns: usize) -> f64 {
    if turns_to_success.is_empty() {
        return max_turns as f64;
    }
    let total: usize = turns_to_success
        .iter()
        .map(|o| o.map_or(max_turns, |n| n.min(max_turns)))
        .sum();
    total as f64 / turns_to_success.len() as f64
}
