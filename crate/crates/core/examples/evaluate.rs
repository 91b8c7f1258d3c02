//! Scores a few hand-written predictions with class-agnostic AP.

use instfuse::metrics::{evaluate_ap, Prediction};

fn main() {
    let gt = vec![(0..100).collect::<Vec<_>>(), (100..150).collect(), (150..160).collect()];
    let pred = vec![
        // near-perfect
        Prediction {
            point_ids: (0..95).collect(),
            confidence: 0.95,
        },
        // half of the second object
        Prediction {
            point_ids: (100..125).collect(),
            confidence: 0.8,
        },
        // a false positive with high confidence
        Prediction {
            point_ids: (200..230).collect(),
            confidence: 0.9,
        },
    ];
    let r = evaluate_ap(&pred, &gt);
    println!("AP {:.3}  AP50 {:.3}  AP25 {:.3}", r.ap, r.ap50, r.ap25);
    for c in &r.curves {
        println!(
            "IoU {:.2}: AP {:.3}, precision {:.2?}, recall {:.2?}",
            c.iou_threshold, c.ap, c.precision, c.recall
        );
    }
}
