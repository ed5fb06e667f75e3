//! Helpers shared by the integration tests.
#![allow(dead_code)]

use chainflow::tensor::{Array, ParamStore, Tape, Var};
use chainflow::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_RTOL: f64 = 1e-3;
/// Absolute slack for gradients so small that the central difference is
/// dominated by rounding.
pub const FD_ATOL: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

fn loss_value(store: &ParamStore, f: &dyn Fn(&mut Tape) -> Result<Var>) -> f64 {
    let mut tape = Tape::new(store);
    let loss = f(&mut tape).expect("forward");
    tape.value(loss).item()
}

/// Compares backward-pass gradients against five-point central differences for
/// up to `per_param` randomly chosen entries of every trainable parameter.
pub fn gradcheck(store: &ParamStore, per_param: usize, seed: u64, f: &dyn Fn(&mut Tape) -> Result<Var>) -> GradReport {
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape).expect("forward");
        tape.backward(loss).expect("backward")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradReport::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let param = store.get(&name).unwrap();
        if !param.trainable {
            continue;
        }
        let id = store.id(&name).unwrap();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Array::zeros(param.value.rows(), param.value.cols()));
        let mut idx: Vec<usize> = (0..param.value.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(per_param);
        for i in idx {
            let orig = param.value.data()[i];
            let mut at = |h: f64| {
                work.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
                loss_value(&work, f)
            };
            let (up, down, up2, down2) = (at(FD_EPS), at(-FD_EPS), at(2.0 * FD_EPS), at(-2.0 * FD_EPS));
            work.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            let fd = (8.0 * (up - down) - (up2 - down2)) / (12.0 * FD_EPS);
            let a = analytic.data()[i];
            let err = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            report.checked += 1;
            if err > FD_RTOL * scale + FD_ATOL {
                report.failures.push(format!("{name}[{i}]: analytic {a:.6e} vs fd {fd:.6e}"));
            } else if err > FD_ATOL {
                report.worst = report.worst.max(rel);
            }
        }
    }
    report
}

/// `sum(out * weights)` with fixed random weights, so every output entry
/// matters to the scalar.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let [r, c] = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let w = tape.constant(Array::randn(r, c, 1.0, &mut rng));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
