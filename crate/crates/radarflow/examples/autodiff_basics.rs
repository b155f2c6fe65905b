//! Tours the reverse-mode tape that powers training: building a graph,
//! backpropagating, and validating a gradient against finite differences —
//! including through the differentiable Kabsch fit.
//!
//! Run with: `cargo run --example autodiff_basics`

use radarflow::tensor::{Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // d/dx sum((x·w + b)²) by hand vs by tape
    let tape = Tape::new();
    let x = tape.leaf(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 1.5, -1.0], true);
    let w = tape.leaf(&[3, 1], vec![0.3, -0.7, 1.1], true);
    let b = tape.constant(&[1], vec![0.25]);
    let y = x.matmul(&w)?.add(&b)?;
    let loss = y.squared_norm(1)?.sum(None)?;
    tape.backward(&loss)?;

    println!("loss = {:.6}", loss.item());
    println!("dL/dw = {:?}", w.grad().unwrap());

    // finite-difference spot check on one weight entry
    let numeric = {
        let eval = |dw: f64| -> f64 {
            let tape = Tape::new();
            let x = tape.constant(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 1.5, -1.0]);
            let w = tape.constant(&[3, 1], vec![0.3 + dw, -0.7, 1.1]);
            let b = tape.constant(&[1], vec![0.25]);
            let y = x.matmul(&w).unwrap().add(&b).unwrap();
            y.squared_norm(1).unwrap().sum(None).unwrap().item()
        };
        let h = 1e-6;
        (eval(h) - eval(-h)) / (2.0 * h)
    };
    let analytic = w.grad().unwrap()[0];
    println!("dL/dw[0]: analytic {analytic:.8}, finite difference {numeric:.8}");

    // gradients flow through the rigid fit: nudging a target point changes
    // the fitted translation
    let tape = Tape::new();
    let src = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let dst = tape.leaf(
        &[4, 3],
        vec![0.1, 0.0, 0.0, 1.1, 0.0, 0.0, 0.1, 1.0, 0.0, 0.1, 0.0, 1.0],
        true,
    );
    let fit = Tensor::kabsch_fit(&src, &dst)?; // (3, 4) row-major [R|t]
    let tx = fit.gather(&[0])?.mul(&tape.constant(&[1, 4], vec![0.0, 0.0, 0.0, 1.0]))?;
    let root = tx.sum(None)?;
    tape.backward(&root)?;
    println!("fitted x-translation = {:.6}", root.item());
    println!("d(tx)/d(dst) row sums = {:?}", dst.grad().unwrap().chunks(3).map(|c| c[0]).collect::<Vec<_>>());
    Ok(())
}
