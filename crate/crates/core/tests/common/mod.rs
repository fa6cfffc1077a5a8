use eulerheat::loops::WindingLoop;
use num_complex::Complex64;
use proptest::prelude::*;

/// Loops winding once along a random axis with three small random modes.
pub fn arb_loop() -> impl Strategy<Value = WindingLoop> {
    (
        0usize..2,
        prop::bool::ANY,
        prop::array::uniform2(0.0f64..1.0),
        prop::collection::vec(prop::array::uniform4(-0.02f64..0.02), 3),
    )
        .prop_map(|(axis, flip, mean, modes)| {
            let mut winding = vec![0i64; 2];
            winding[axis] = if flip { -1 } else { 1 };
            let mut lp = WindingLoop::line(&winding, &mean).unwrap().with_truncation(3).unwrap();
            for (k, c) in modes.iter().enumerate() {
                let coef = [Complex64::new(c[0], c[1]), Complex64::new(c[2], c[3])];
                lp = lp.with_mode(k as i64 + 1, &coef).unwrap();
            }
            lp
        })
}

