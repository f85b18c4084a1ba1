use std::collections::BTreeSet;

pub use crate::attention::full_frame_indices;

/// Reference frames `{1, 1+s, 1+2s, …} ∪ {N}`, 1-based and ascending.
pub fn select_reference_frames(total: usize, interval: usize) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let mut refs: Vec<usize> = (1..=total).step_by(interval.max(1)).collect();
    if refs.last() != Some(&total) {
        refs.push(total);
    }
    refs
}

/// Midpoint-bisection levels over the frames of `1..=total` not in
/// `scheduled`. Each level holds `⌊(a+b)/2⌋` for every adjacent scheduled
/// pair `(a, b)` with a gap, ascending. Frames outside the scheduled span
/// pull in the video endpoints first.
pub fn hierarchical_levels(total: usize, scheduled: &[usize]) -> Vec<Vec<usize>> {
    let mut done: BTreeSet<usize> = scheduled.iter().copied().filter(|&i| (1..=total).contains(&i)).collect();
    let mut levels = Vec::new();
    while done.len() < total {
        let mut level = BTreeSet::new();
        match (done.first().copied(), done.last().copied()) {
            (Some(first), Some(last)) => {
                if first > 1 {
                    level.insert(1);
                }
                if last < total {
                    level.insert(total);
                }
            }
            _ => {
                level.insert(1);
                level.insert(total);
            }
        }
        let ordered: Vec<usize> = done.iter().copied().collect();
        for pair in ordered.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a > 1 {
                level.insert((a + b) / 2);
            }
        }
        done.extend(level.iter().copied());
        levels.push(level.into_iter().collect());
    }
    levels
}

/// Flattened [`hierarchical_levels`]: the processing order of frames not
/// yet edited.
pub fn hierarchical_order(total: usize, scheduled: &[usize]) -> Vec<usize> {
    hierarchical_levels(total, scheduled).into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_selection() {
        assert_eq!(select_reference_frames(1, 5), vec![1]);
        let r = select_reference_frames(40, 3);
        assert_eq!(r.len(), 14);
        assert_eq!((r[0], r[1], r[13]), (1, 4, 40));
        assert_eq!(select_reference_frames(10, 4), vec![1, 5, 9, 10]);
        assert_eq!(select_reference_frames(7, 7), vec![1, 7]);
        assert_eq!(select_reference_frames(5, 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn bisection_levels() {
        assert_eq!(hierarchical_levels(9, &[1, 5, 9]), vec![vec![3, 7], vec![2, 4, 6, 8]]);
        assert_eq!(hierarchical_order(3, &[1, 3]), vec![2]);
        assert!(hierarchical_order(4, &[1, 2, 3, 4]).is_empty());
        assert_eq!(hierarchical_order(10, &[1, 5, 9, 10]), vec![3, 7, 2, 4, 6, 8]);
    }

    #[test]
    fn order_covers_every_unscheduled_frame_once() {
        for total in 1..30 {
            for s in 1..=total {
                let refs = select_reference_frames(total, s);
                let mut order = hierarchical_order(total, &refs);
                let expected: Vec<usize> = (1..=total).filter(|i| !refs.contains(i)).collect();
                order.sort_unstable();
                assert_eq!(order, expected, "N={total}, s={s}");
            }
        }
    }

    #[test]
    fn span_outside_references_is_filled() {
        let order = hierarchical_order(8, &[4]);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3, 5, 6, 7, 8]);
        assert_eq!(&order[..2], &[1, 8]);
        assert_eq!(hierarchical_order(3, &[]), vec![1, 3, 2]);
    }
}
