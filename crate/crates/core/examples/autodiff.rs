//! Reverse-mode gradients on the tape: a tiny conv + dense network, its
//! backward pass, and a finite-difference check of the same graph.
//!
//! cargo run --example autodiff

use openset::numcore::gradcheck::check_gradients;
use openset::numcore::{Padding, Tape, Tensor};

fn main() -> openset::Result<()> {
    // One 1-channel 4x3 "window", a 2-filter 3x3 kernel and a dense layer.
    let x = Tensor::from_fn([1, 1, 4, 3], |i| (i as f64 * 0.37).sin());
    let kernel = Tensor::from_fn([2, 1, 3, 3], |i| 0.1 * i as f64 - 0.8);
    let bias = Tensor::zeros([2]);
    let weight = Tensor::from_fn([24, 3], |i| ((i * 7) % 5) as f64 * 0.05 - 0.1);
    let dense_bias = Tensor::full([3], 0.1);

    let graph = |t: &mut Tape, v: &[openset::numcore::Var]| {
        let h = t.conv2d(v[0], v[1], v[2], Padding::Same)?;
        let h = t.relu(h);
        let h = t.flatten(h)?;
        let logits = t.dense(h, v[3], v[4])?;
        let p = t.sigmoid(logits);
        t.binary_cross_entropy(p, &[1])
    };

    let inputs = [x, kernel, bias, weight, dense_bias];
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = graph(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    println!("loss            {:.6}", tape.value(loss).item());
    println!("d loss / d bias {:?}", grads.wrt(vars[2]).data());
    println!("tape length     {}", tape.len());

    let report = check_gradients(&inputs, 1e-4, graph)?;
    println!(
        "gradcheck       {} entries, worst relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    Ok(())
}
