use palmwatch::evaluate::{confusion_matrix, metrics, pearson, split_dataset, Averaging};
use proptest::prelude::*;

const CLASSES: [&str; 3] = ["healthy", "smallish", "dead"];

fn labels() -> impl Strategy<Value = (Vec<&'static str>, Vec<&'static str>)> {
    (1usize..200).prop_flat_map(|n| {
        (prop::collection::vec(0usize..3, n), prop::collection::vec(0usize..3, n))
            .prop_map(|(a, p)| (a.into_iter().map(|i| CLASSES[i]).collect(), p.into_iter().map(|i| CLASSES[i]).collect()))
    })
}

proptest! {
    #[test]
    fn micro_average_equals_accuracy((a, p) in labels()) {
        let cm = confusion_matrix(&a, &p, &CLASSES).unwrap();
        let r = metrics(&cm, Averaging::Micro).unwrap();
        prop_assert!((r.micro_avg.f1 - r.accuracy).abs() <= 1e-12);
        prop_assert!((r.micro_avg.precision - r.accuracy).abs() <= 1e-12);
        prop_assert_eq!(cm.total(), a.len() as u64);
    }

    #[test]
    fn per_class_f1_is_harmonic_and_bounded((a, p) in labels()) {
        let cm = confusion_matrix(&a, &p, &CLASSES).unwrap();
        let r = metrics(&cm, Averaging::Macro).unwrap();
        for c in &r.per_class {
            prop_assert!((0.0..=1.0).contains(&c.f1));
            let lo = c.precision.min(c.recall);
            let hi = c.precision.max(c.recall);
            prop_assert!(c.f1 >= lo - 1e-12 && c.f1 <= hi + 1e-12 || c.f1_undefined);
        }
        let mean = r.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
        prop_assert!((r.macro_avg.f1 - mean).abs() <= 1e-12);
    }

    #[test]
    fn split_is_a_seeded_partition(n in 2usize..500, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..n).collect();
        let s = split_dataset(&ids, ratio, seed).unwrap();
        prop_assert_eq!(s.train.len() + s.test.len(), n);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids.clone());
        prop_assert_eq!(split_dataset(&ids, ratio, seed).unwrap(), s);
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(xy in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..100)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let (Ok(a), Ok(b)) = (pearson(&x, &y), pearson(&y, &x)) {
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn empty_class_reports_zero_and_flags() {
    let cm = confusion_matrix(&["healthy", "healthy"], &["healthy", "healthy"], &CLASSES).unwrap();
    let r = metrics(&cm, Averaging::Macro).unwrap();
    let dead = &r.per_class[2];
    assert_eq!((dead.precision, dead.recall, dead.f1), (0.0, 0.0, 0.0));
    assert!(dead.precision_undefined && dead.recall_undefined);
}
