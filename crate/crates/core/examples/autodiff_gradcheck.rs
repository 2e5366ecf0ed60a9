//! The reverse-mode tape: build a small graph, backpropagate, and compare
//! against central finite differences.
//!
//! ```bash
//! cargo run --example autodiff_gradcheck
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotdg::autodiff::{grad_check, Graph, Tensor};

fn main() -> rotdg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = Tensor::new(&[6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    // loss = mean(log_softmax(relu(x) @ w)) picked at class 0
    let f = |g: &mut Graph, xv| {
        let wv = g.constant(w.clone())?;
        let h = g.relu(xv)?;
        let logits = g.matmul(h, wv)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick(lp, &[0, 1, 2, 0])?;
        g.mean(picked)
    };

    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    println!("loss = {:.6}", g.item(loss));
    println!("tape length = {}", g.len());
    println!("d loss / d x[0, ..] = {:?}", &grads.wrt(xv).expect("x needs a gradient")[..6]);

    let err = grad_check(f, &x, 1e-5)?;
    println!("max relative error vs finite differences = {err:.2e}");
    Ok(())
}
