use distillkit::select::{difficulty_order, select_count, window_start, window_subset, WindowSpec};
use distillkit::util::rng_for;
use rand::Rng;

/// Rank of each sample within its class by counting harder rivals.
fn brute_order(labels: &[usize], scores: &[f64], classes: usize) -> Vec<usize> {
    let mut slots: Vec<Vec<Option<usize>>> = vec![vec![None; labels.len()]; classes];
    for i in 0..labels.len() {
        let rank = (0..labels.len())
            .filter(|&j| labels[j] == labels[i])
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        slots[labels[i]][rank] = Some(i);
    }
    let k = (0..classes).map(|c| labels.iter().filter(|&&y| y == c).count()).min().unwrap();
    let mut out = Vec::new();
    for r in 0..k {
        for slot in &slots {
            out.push(slot[r].unwrap());
        }
    }
    out
}

#[test]
fn difficulty_order_matches_brute_force() {
    for case in 0..200u64 {
        let mut rng = rng_for(case, 1, 0);
        let classes = rng.random_range(1..5);
        let n = rng.random_range(classes..40);
        let mut labels: Vec<usize> = (0..classes).collect();
        labels.extend((classes..n).map(|_| rng.random_range(0..classes)));
        // Few distinct values so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        assert_eq!(
            difficulty_order(&labels, &scores, classes).unwrap(),
            brute_order(&labels, &scores, classes),
            "case {case}"
        );
    }
}

#[test]
fn window_arithmetic_matches_integer_oracle() {
    for case in 0..500u64 {
        let mut rng = rng_for(case, 2, 0);
        let classes = rng.random_range(1..11);
        let ipc = rng.random_range(1..8);
        let n = classes * rng.random_range(ipc..40);
        let b = rng.random_range(0..=100u64);
        let a = rng.random_range(0..=100u64);
        let (beta, alpha) = (b as f64 / 100.0, a as f64 / 100.0);

        let mut start = 0;
        while 100 * start < (b as usize) * n {
            start += classes;
        }
        assert_eq!(window_start(beta, n, classes), start, "case {case}");

        let total = ipc * classes;
        let raw = ((100 - a) as usize * total).div_ceil(100);
        // Nearest multiple of C, halves rounding up.
        let mut best = 0usize;
        for k in 0..=raw / classes + 1 {
            if (k * classes).abs_diff(raw) <= best.abs_diff(raw) {
                best = k * classes;
            }
        }
        assert_eq!(select_count(alpha, ipc, classes), best.min(total), "case {case}: raw {raw}");

        let order: Vec<usize> = (0..n).map(|i| 1000 + i).collect();
        let spec = WindowSpec { beta, ipc, alpha };
        match window_subset(&order, &spec, classes) {
            Ok(w) => {
                assert!(start + total <= n);
                assert_eq!(w.initial, order[start..start + total].to_vec());
                assert_eq!(w.select.len(), best.min(total));
                assert_eq!([w.select.clone(), w.distill.clone()].concat(), w.initial);
                for part in [&w.select, &w.distill] {
                    for c in 0..classes {
                        let in_class = part.iter().filter(|&&i| (i - 1000) % classes == c).count();
                        assert_eq!(in_class * classes, part.len(), "case {case}: unbalanced");
                    }
                }
            }
            Err(_) => assert!(start + total > n, "case {case}"),
        }
    }
}
